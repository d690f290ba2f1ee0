//! Forward definitions of every recorded operation.

use std::sync::Arc;

use super::kernels::{
    bernstein_basis, bilinear_tap, gaussian_factors, im2col3x3, pixel_or_zero, square_factors,
};
use super::shape::{axis_split, broadcast_shape, broadcast_strides, for_each_broadcast};
use super::{invalid, BinaryOp, Op, Result, Tensor, TensorError, UnaryOp};
use crate::scalar::{lit, Scalar};

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<'g, T: Scalar> Tensor<'g, T> {
    fn same_graph(&self, other: &Tensor<'g, T>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(invalid(op, "operands belong to different graphs"))
        }
    }

    fn parts(&self) -> (Vec<usize>, Arc<Vec<T>>, bool) {
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        (n.shape.clone(), Arc::clone(&n.value), n.requires_grad)
    }

    fn binary(&self, other: &Tensor<'g, T>, op: BinaryOp, name: &'static str) -> Result<Tensor<'g, T>> {
        self.same_graph(other, name)?;
        let (sa, va, ra) = self.parts();
        let (sb, vb, rb) = other.parts();
        let f = |x: T, y: T| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        };
        let (shape, out) = if sa == sb {
            (sa, va.iter().zip(vb.iter()).map(|(&x, &y)| f(x, y)).collect())
        } else if vb.len() == 1 && sa.len() >= sb.len() {
            let y = vb[0];
            (sa, va.iter().map(|&x| f(x, y)).collect())
        } else {
            let shape = broadcast_shape(name, &sa, &sb)?;
            let stra = broadcast_strides(&sa, &shape);
            let strb = broadcast_strides(&sb, &shape);
            let mut out = vec![T::zero(); shape.iter().product()];
            for_each_broadcast(&shape, &stra, &strb, |i, ia, ib| out[i] = f(va[ia], vb[ib]));
            (shape, out)
        };
        Ok(self
            .graph
            .push(shape, out, Op::Binary(op, self.id, other.id), ra || rb))
    }

    pub fn add(&self, other: &Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        self.binary(other, BinaryOp::Add, "add")
    }

    pub fn sub(&self, other: &Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        self.binary(other, BinaryOp::Sub, "sub")
    }

    pub fn mul(&self, other: &Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        self.binary(other, BinaryOp::Mul, "mul")
    }

    pub fn div(&self, other: &Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        self.binary(other, BinaryOp::Div, "div")
    }

    fn unary(&self, op: UnaryOp) -> Tensor<'g, T> {
        let (shape, v, r) = self.parts();
        let f = |x: T| match op {
            UnaryOp::Neg => -x,
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Softplus => softplus(x),
            UnaryOp::Abs => x.abs(),
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Square => x * x,
            UnaryOp::Sin => x.sin(),
            UnaryOp::Cos => x.cos(),
        };
        let out = v.iter().map(|&x| f(x)).collect();
        self.graph.push(shape, out, Op::Unary(op, self.id), r)
    }

    pub fn neg(&self) -> Tensor<'g, T> {
        self.unary(UnaryOp::Neg)
    }
    pub fn tanh(&self) -> Tensor<'g, T> {
        self.unary(UnaryOp::Tanh)
    }
    pub fn sigmoid(&self) -> Tensor<'g, T> {
        self.unary(UnaryOp::Sigmoid)
    }
    pub fn exp(&self) -> Tensor<'g, T> {
        self.unary(UnaryOp::Exp)
    }
    pub fn log(&self) -> Tensor<'g, T> {
        self.unary(UnaryOp::Log)
    }
    pub fn softplus(&self) -> Tensor<'g, T> {
        self.unary(UnaryOp::Softplus)
    }
    pub fn abs(&self) -> Tensor<'g, T> {
        self.unary(UnaryOp::Abs)
    }
    pub fn sqrt(&self) -> Tensor<'g, T> {
        self.unary(UnaryOp::Sqrt)
    }
    pub fn square(&self) -> Tensor<'g, T> {
        self.unary(UnaryOp::Square)
    }
    pub fn sin(&self) -> Tensor<'g, T> {
        self.unary(UnaryOp::Sin)
    }
    pub fn cos(&self) -> Tensor<'g, T> {
        self.unary(UnaryOp::Cos)
    }

    /// `self * scale + shift` for constants.
    pub fn affine(&self, scale: T, shift: T) -> Tensor<'g, T> {
        let (shape, v, r) = self.parts();
        let out = v.iter().map(|&x| x * scale + shift).collect();
        self.graph.push(shape, out, Op::ScaleShift(self.id, scale), r)
    }

    pub fn scale(&self, s: T) -> Tensor<'g, T> {
        self.affine(s, T::zero())
    }

    pub fn add_scalar(&self, c: T) -> Tensor<'g, T> {
        self.affine(T::one(), c)
    }

    /// Elementwise clamp; gradient is zero where the bound is active.
    pub fn clamp(&self, lo: T, hi: T) -> Tensor<'g, T> {
        let (shape, v, r) = self.parts();
        let out = v.iter().map(|&x| x.max(lo).min(hi)).collect();
        self.graph.push(shape, out, Op::Clamp(self.id, lo, hi), r)
    }

    /// Value-equal copy through which no gradient flows.
    pub fn detach(&self) -> Tensor<'g, T> {
        let (shape, v, _) = self.parts();
        let mut nodes = self.graph.nodes.borrow_mut();
        nodes.push(super::Node {
            shape,
            value: v,
            op: Op::Detach,
            requires_grad: false,
            leaf_grad: None,
        });
        self.graph.tensor(nodes.len() - 1)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        self.same_graph(other, "matmul")?;
        let (sa, va, ra) = self.parts();
        let (sb, vb, rb) = other.parts();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), &va, (k as isize, 1), &vb, (n as isize, 1), T::zero(), &mut out, (n as isize, 1));
        Ok(self
            .graph
            .push(vec![m, n], out, Op::Matmul(self.id, other.id), ra || rb))
    }

    /// Batched matmul `[b, m, k] x [b, k, n] -> [b, m, n]`; a rank-2 right
    /// operand is shared across the batch.
    pub fn bmm(&self, other: &Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        self.same_graph(other, "bmm")?;
        let (sa, va, ra) = self.parts();
        let (sb, vb, rb) = other.parts();
        let ok = sa.len() == 3
            && match sb.len() {
                3 => sb[0] == sa[0] && sb[1] == sa[2],
                2 => sb[0] == sa[2],
                _ => false,
            };
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let (bsz, m, k) = (sa[0], sa[1], sa[2]);
        let n = *sb.last().unwrap();
        let b_step = if sb.len() == 3 { k * n } else { 0 };
        let mut out = vec![T::zero(); bsz * m * n];
        for bi in 0..bsz {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &va[bi * m * k..(bi + 1) * m * k],
                (k as isize, 1),
                &vb[bi * b_step..bi * b_step + k * n],
                (n as isize, 1),
                T::zero(),
                &mut out[bi * m * n..(bi + 1) * m * n],
                (n as isize, 1),
            );
        }
        Ok(self
            .graph
            .push(vec![bsz, m, n], out, Op::Bmm(self.id, other.id), ra || rb))
    }

    pub fn transpose_last2(&self) -> Result<Tensor<'g, T>> {
        let (s, v, r) = self.parts();
        if s.len() < 2 {
            return Err(invalid("transpose_last2", format!("rank {} < 2", s.len())));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = v.len() / (rows * cols);
        let mut out = vec![T::zero(); v.len()];
        for b in 0..batch {
            let src = &v[b * rows * cols..(b + 1) * rows * cols];
            let dst = &mut out[b * rows * cols..(b + 1) * rows * cols];
            for i in 0..rows {
                for j in 0..cols {
                    dst[j * rows + i] = src[i * cols + j];
                }
            }
        }
        let mut shape = s.clone();
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        Ok(self.graph.push(shape, out, Op::TransposeLast2(self.id), r))
    }

    /// 3x3, stride 1, zero-padded convolution preserving spatial size.
    /// `self: [b, cin, h, w]`, `weight: [cout, cin, 3, 3]`, `bias: [cout]`.
    pub fn conv2d_3x3(&self, weight: &Tensor<'g, T>, bias: &Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        self.same_graph(weight, "conv2d_3x3")?;
        self.same_graph(bias, "conv2d_3x3")?;
        let (sx, vx, rx) = self.parts();
        let (sw, vw, rw) = weight.parts();
        let (sb, vb, rb) = bias.parts();
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != 3 || sw[3] != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d_3x3",
                lhs: sx,
                rhs: sw,
            });
        }
        if sb != [sw[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d_3x3 bias",
                lhs: sw,
                rhs: sb,
            });
        }
        let (bsz, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let cout = sw[0];
        let hw = h * w;
        let kdim = cin * 9;
        let mut col = vec![T::zero(); kdim * hw];
        let mut out = vec![T::zero(); bsz * cout * hw];
        for bi in 0..bsz {
            im2col3x3(&vx[bi * cin * hw..(bi + 1) * cin * hw], cin, h, w, &mut col);
            let dst = &mut out[bi * cout * hw..(bi + 1) * cout * hw];
            for (co, row) in dst.chunks_mut(hw).enumerate() {
                row.fill(vb[co]);
            }
            T::gemm(cout, kdim, hw, T::one(), &vw, (kdim as isize, 1), &col, (hw as isize, 1), T::one(), dst, (hw as isize, 1));
        }
        Ok(self.graph.push(
            vec![bsz, cout, h, w],
            out,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.id,
            },
            rx || rw || rb,
        ))
    }

    pub fn sum(&self) -> Tensor<'g, T> {
        let (_, v, r) = self.parts();
        let s = v.iter().copied().sum();
        self.graph.push(vec![1], vec![s], Op::SumAll(self.id), r)
    }

    pub fn mean(&self) -> Tensor<'g, T> {
        let n = self.numel();
        self.sum().scale(T::one() / lit::<T>(n as f64))
    }

    fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut s: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
        if s.is_empty() {
            s.push(1);
        }
        s
    }

    /// Sum over one axis; the axis is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<'g, T>> {
        let (s, v, r) = self.parts();
        let sp = axis_split("sum_axis", &s, axis)?;
        let mut out = vec![T::zero(); sp.outer * sp.inner];
        for o in 0..sp.outer {
            for k in 0..sp.n {
                let src = &v[(o * sp.n + k) * sp.inner..(o * sp.n + k + 1) * sp.inner];
                for (d, &x) in out[o * sp.inner..(o + 1) * sp.inner].iter_mut().zip(src) {
                    *d += x;
                }
            }
        }
        Ok(self
            .graph
            .push(Self::reduced_shape(&s, axis), out, Op::SumAxis(self.id, sp), r))
    }

    /// Maximum over one axis; gradient flows to the first arg-max.
    pub fn max_axis(&self, axis: usize) -> Result<Tensor<'g, T>> {
        let (s, v, r) = self.parts();
        let sp = axis_split("max_axis", &s, axis)?;
        let mut out = vec![T::neg_infinity(); sp.outer * sp.inner];
        let mut arg = vec![0usize; sp.outer * sp.inner];
        for o in 0..sp.outer {
            for k in 0..sp.n {
                for i in 0..sp.inner {
                    let x = v[(o * sp.n + k) * sp.inner + i];
                    let slot = o * sp.inner + i;
                    if x > out[slot] || k == 0 {
                        out[slot] = x;
                        arg[slot] = k;
                    }
                }
            }
        }
        Ok(self
            .graph
            .push(Self::reduced_shape(&s, axis), out, Op::MaxAxis(self.id, sp, arg), r))
    }

    pub fn logsumexp(&self, axis: usize) -> Result<Tensor<'g, T>> {
        let (s, v, r) = self.parts();
        let sp = axis_split("logsumexp", &s, axis)?;
        let mut out = vec![T::zero(); sp.outer * sp.inner];
        for o in 0..sp.outer {
            for i in 0..sp.inner {
                let at = |k: usize| v[(o * sp.n + k) * sp.inner + i];
                let m = (0..sp.n).map(at).fold(T::neg_infinity(), T::max);
                out[o * sp.inner + i] = if m.is_infinite() {
                    m
                } else {
                    m + (0..sp.n).map(|k| (at(k) - m).exp()).sum::<T>().ln()
                };
            }
        }
        Ok(self
            .graph
            .push(Self::reduced_shape(&s, axis), out, Op::LogSumExp(self.id, sp), r))
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor<'g, T>> {
        let (s, v, r) = self.parts();
        let sp = axis_split("softmax", &s, axis)?;
        let mut out = vec![T::zero(); v.len()];
        for o in 0..sp.outer {
            for i in 0..sp.inner {
                let idx = |k: usize| (o * sp.n + k) * sp.inner + i;
                let m = (0..sp.n).map(|k| v[idx(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..sp.n {
                    let e = (v[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..sp.n {
                    out[idx(k)] /= z;
                }
            }
        }
        Ok(self.graph.push(s, out, Op::Softmax(self.id, sp), r))
    }

    /// `x - logsumexp(x)` along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<'g, T>> {
        let s = self.shape();
        let lse = self.logsumexp(axis)?;
        let mut keep = s.clone();
        keep[axis] = 1;
        self.sub(&lse.reshape(&keep)?)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<'g, T>> {
        let (s, v, r) = self.parts();
        if shape.iter().product::<usize>() != v.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: s,
                rhs: shape.to_vec(),
            });
        }
        let mut nodes = self.graph.nodes.borrow_mut();
        nodes.push(super::Node {
            shape: shape.to_vec(),
            value: v,
            op: Op::Reshape(self.id),
            requires_grad: r,
            leaf_grad: None,
        });
        Ok(self.graph.tensor(nodes.len() - 1))
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<'g, T>> {
        let (s, v, r) = self.parts();
        let sp = axis_split("slice", &s, axis)?;
        if len == 0 || start + len > sp.n {
            return Err(invalid(
                "slice",
                format!("range {start}..{} outside axis {axis} of {s:?}", start + len),
            ));
        }
        let mut out = Vec::with_capacity(sp.outer * len * sp.inner);
        for o in 0..sp.outer {
            out.extend_from_slice(&v[(o * sp.n + start) * sp.inner..(o * sp.n + start + len) * sp.inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.graph.push(
            shape,
            out,
            Op::Slice {
                a: self.id,
                split: sp,
                start,
                len,
            },
            r,
        ))
    }

    pub fn concat(parts: &[Tensor<'g, T>], axis: usize) -> Result<Tensor<'g, T>> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        let g = first.graph;
        let base = first.shape();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut total = 0;
        let mut recs = Vec::with_capacity(parts.len());
        let mut vals = Vec::with_capacity(parts.len());
        let mut req = false;
        for p in parts {
            first.same_graph(p, "concat")?;
            let (s, v, r) = p.parts();
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s,
                });
            }
            recs.push((p.id, s[axis]));
            total += s[axis];
            vals.push(v);
            req |= r;
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &(_, n)) in vals.iter().zip(&recs) {
                out.extend_from_slice(&v[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(g.push(
            shape,
            out,
            Op::Concat {
                parts: recs,
                outer,
                inner,
                total,
            },
            req,
        ))
    }

    /// Bilinear sampling of `self: [b, c, h, w]` at normalised grid locations
    /// `grid: [b, ho, wo, 2]` holding `(x, y)` in `[-1, 1]` (corner-aligned).
    /// Locations outside the source read zeros.
    pub fn bilinear_sample(&self, grid: &Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        self.same_graph(grid, "bilinear_sample")?;
        let (si, vi, ri) = self.parts();
        let (sg, vg, rg) = grid.parts();
        if si.len() != 4 || sg.len() != 4 || sg[3] != 2 || sg[0] != si[0] {
            return Err(TensorError::ShapeMismatch {
                op: "bilinear_sample",
                lhs: si,
                rhs: sg,
            });
        }
        let (bsz, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (ho, wo) = (sg[1], sg[2]);
        let mut out = vec![T::zero(); bsz * c * ho * wo];
        for b in 0..bsz {
            for p in 0..ho * wo {
                let gi = (b * ho * wo + p) * 2;
                let tap = bilinear_tap(vg[gi], vg[gi + 1], h, w);
                let (wx1, wy1) = (tap.wx1, tap.wy1);
                let (wx0, wy0) = (T::one() - wx1, T::one() - wy1);
                for ch in 0..c {
                    let plane = &vi[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    let px = |dy: isize, dx: isize| pixel_or_zero(plane, h, w, tap.y0 + dy, tap.x0 + dx);
                    out[(b * c + ch) * ho * wo + p] = wy0 * (wx0 * px(0, 0) + wx1 * px(0, 1))
                        + wy1 * (wx0 * px(1, 0) + wx1 * px(1, 1));
                }
            }
        }
        Ok(self.graph.push(
            vec![bsz, c, ho, wo],
            out,
            Op::BilinearSample {
                img: self.id,
                grid: grid.id,
            },
            ri || rg,
        ))
    }

    /// Evaluates Bezier curves with control points `self: [b, J, 2]` at
    /// `samples` evenly spaced parameters, giving `[b, samples, 2]`.
    pub fn bezier(&self, samples: usize) -> Result<Tensor<'g, T>> {
        let (s, v, r) = self.parts();
        if s.len() != 3 || s[2] != 2 || s[1] < 2 || samples < 2 {
            return Err(invalid(
                "bezier",
                format!("need control points [b, J>=2, 2] and >=2 samples, got {s:?}, S={samples}"),
            ));
        }
        let (bsz, j) = (s[0], s[1]);
        let basis = Arc::new(bernstein_basis::<T>(j, samples));
        let mut out = vec![T::zero(); bsz * samples * 2];
        for b in 0..bsz {
            T::gemm(
                samples,
                j,
                2,
                T::one(),
                &basis,
                (j as isize, 1),
                &v[b * j * 2..(b + 1) * j * 2],
                (2, 1),
                T::zero(),
                &mut out[b * samples * 2..(b + 1) * samples * 2],
                (2, 1),
            );
        }
        Ok(self.graph.push(
            vec![bsz, samples, 2],
            out,
            Op::Bezier {
                cp: self.id,
                basis,
                samples,
                points: j,
            },
            r,
        ))
    }

    /// Rasterises curve samples `self: [b, S, 2]` (pixel `(x=col, y=row)`)
    /// with per-curve blur `sigma: [b]` into raw intensities `[b, h, w]`:
    /// `sum_n exp(-((row - y_n)^2 + (col - x_n)^2) / sigma^2)`.
    ///
    /// With `literal`, evaluates `sum_n (row - y_n)^2 (col - x_n)^2 / sigma^2`
    /// instead; that variant is kept for comparison only.
    pub fn rasterize(&self, sigma: &Tensor<'g, T>, height: usize, width: usize, literal: bool) -> Result<Tensor<'g, T>> {
        self.same_graph(sigma, "rasterize")?;
        let (ss, vs, rs) = self.parts();
        let (sz, vz, rz) = sigma.parts();
        if ss.len() != 3 || ss[2] != 2 || vz.len() != ss[0] {
            return Err(TensorError::ShapeMismatch {
                op: "rasterize",
                lhs: ss,
                rhs: sz,
            });
        }
        let (bsz, ns) = (ss[0], ss[1]);
        let (h, w) = (height, width);
        let mut out = vec![T::zero(); bsz * h * w];
        let mut fx = Vec::with_capacity(ns * w);
        let mut fy = Vec::with_capacity(ns * h);
        for b in 0..bsz {
            let pts = &vs[b * ns * 2..(b + 1) * ns * 2];
            let sig = vz[b];
            if !(sig > T::zero()) {
                return Err(invalid("rasterize", format!("sigma must be positive, got {sig}")));
            }
            let inv_s2 = T::one() / (sig * sig);
            let xs = pts.chunks(2).map(|p| p[0]);
            let ys = pts.chunks(2).map(|p| p[1]);
            let alpha = if literal {
                square_factors(xs, w, &mut fx);
                square_factors(ys, h, &mut fy);
                inv_s2
            } else {
                gaussian_factors(xs, w, inv_s2, &mut fx);
                gaussian_factors(ys, h, inv_s2, &mut fy);
                T::one()
            };
            // out[h, w] = sum_s fy[s, h] * fx[s, w]
            T::gemm(
                h,
                ns,
                w,
                alpha,
                &fy,
                (1, h as isize),
                &fx,
                (w as isize, 1),
                T::zero(),
                &mut out[b * h * w..(b + 1) * h * w],
                (w as isize, 1),
            );
        }
        Ok(self.graph.push(
            vec![bsz, h, w],
            out,
            Op::Rasterize {
                samples: self.id,
                sigma: sigma.id,
                height: h,
                width: w,
                literal,
            },
            rs || rz,
        ))
    }
}
