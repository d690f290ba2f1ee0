use super::kernels::{bilinear_tap, col2im3x3, gaussian_factors, im2col3x3, pixel_or_zero, square_factors};
use super::ops::sigmoid;
use super::shape::{broadcast_strides, for_each_broadcast};
use super::{BinaryOp, Graph, Node, NodeId, Op, Result, TensorError, UnaryOp};
use crate::scalar::{lit, Scalar};

struct GradBuf<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> GradBuf<T> {
    fn slot(&mut self, id: NodeId, len: usize) -> &mut Vec<T> {
        self.slots[id].get_or_insert_with(|| vec![T::zero(); len])
    }
}

pub(super) fn run<T: Scalar>(graph: &Graph<T>, root: NodeId) -> Result<()> {
    let mut nodes = graph.nodes.borrow_mut();
    if nodes[root].value.len() != 1 {
        return Err(TensorError::NonScalarRoot(nodes[root].shape.clone()));
    }
    if !nodes[root].requires_grad {
        return Ok(());
    }
    let mut buf = GradBuf {
        slots: (0..=root).map(|_| None).collect(),
    };
    buf.slots[root] = Some(vec![T::one()]);
    for id in (0..=root).rev() {
        let Some(g) = buf.slots[id].take() else { continue };
        let node = &nodes[id];
        if !node.requires_grad {
            continue;
        }
        if matches!(node.op, Op::Leaf) {
            buf.slots[id] = Some(g);
            continue;
        }
        propagate(&nodes, id, &g, &mut buf);
    }
    for (id, slot) in buf.slots.into_iter().enumerate() {
        let Some(g) = slot else { continue };
        let node = &mut nodes[id];
        if matches!(node.op, Op::Leaf) && node.requires_grad {
            match &mut node.leaf_grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                None => node.leaf_grad = Some(g),
            }
        }
    }
    Ok(())
}

fn wants<T>(nodes: &[Node<T>], id: NodeId) -> bool {
    nodes[id].requires_grad
}

fn propagate<T: Scalar>(nodes: &[Node<T>], id: NodeId, g: &[T], buf: &mut GradBuf<T>) {
    let node = &nodes[id];
    let out = &node.value;
    match &node.op {
        Op::Leaf | Op::Detach => {}
        Op::Binary(op, a, b) => binary(nodes, *op, *a, *b, &node.shape, g, buf),
        Op::Unary(op, a) => {
            if !wants(nodes, *a) {
                return;
            }
            let x = &nodes[*a].value;
            let dst = buf.slot(*a, x.len());
            let two = lit::<T>(2.0);
            for i in 0..g.len() {
                let d = match op {
                    UnaryOp::Neg => -T::one(),
                    UnaryOp::Tanh => T::one() - out[i] * out[i],
                    UnaryOp::Sigmoid => out[i] * (T::one() - out[i]),
                    UnaryOp::Exp => out[i],
                    UnaryOp::Log => T::one() / x[i],
                    UnaryOp::Softplus => sigmoid(x[i]),
                    UnaryOp::Abs => x[i].signum() * if x[i] == T::zero() { T::zero() } else { T::one() },
                    UnaryOp::Sqrt => T::one() / (two * out[i]),
                    UnaryOp::Square => two * x[i],
                    UnaryOp::Sin => x[i].cos(),
                    UnaryOp::Cos => -x[i].sin(),
                };
                dst[i] += g[i] * d;
            }
        }
        Op::ScaleShift(a, s) => {
            if wants(nodes, *a) {
                let dst = buf.slot(*a, g.len());
                for (d, &gi) in dst.iter_mut().zip(g) {
                    *d += gi * *s;
                }
            }
        }
        Op::Clamp(a, lo, hi) => {
            if wants(nodes, *a) {
                let x = &nodes[*a].value;
                let dst = buf.slot(*a, g.len());
                for i in 0..g.len() {
                    if x[i] >= *lo && x[i] <= *hi {
                        dst[i] += g[i];
                    }
                }
            }
        }
        Op::Matmul(a, b) => {
            let (sa, sb) = (&nodes[*a].shape, &nodes[*b].shape);
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if wants(nodes, *a) {
                // dA = G B^T
                let vb = nodes[*b].value.clone();
                let dst = buf.slot(*a, m * k);
                T::gemm(m, n, k, T::one(), g, (n as isize, 1), &vb, (1, n as isize), T::one(), dst, (k as isize, 1));
            }
            if wants(nodes, *b) {
                // dB = A^T G
                let va = nodes[*a].value.clone();
                let dst = buf.slot(*b, k * n);
                T::gemm(k, m, n, T::one(), &va, (1, k as isize), g, (n as isize, 1), T::one(), dst, (n as isize, 1));
            }
        }
        Op::Bmm(a, b) => {
            let (sa, sb) = (nodes[*a].shape.clone(), nodes[*b].shape.clone());
            let (bsz, m, k) = (sa[0], sa[1], sa[2]);
            let n = *sb.last().unwrap();
            let b_step = if sb.len() == 3 { k * n } else { 0 };
            if wants(nodes, *a) {
                let vb = nodes[*b].value.clone();
                let dst = buf.slot(*a, bsz * m * k);
                for bi in 0..bsz {
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        &g[bi * m * n..(bi + 1) * m * n],
                        (n as isize, 1),
                        &vb[bi * b_step..bi * b_step + k * n],
                        (1, n as isize),
                        T::one(),
                        &mut dst[bi * m * k..(bi + 1) * m * k],
                        (k as isize, 1),
                    );
                }
            }
            if wants(nodes, *b) {
                let va = nodes[*a].value.clone();
                let len = nodes[*b].value.len();
                let dst = buf.slot(*b, len);
                for bi in 0..bsz {
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        &va[bi * m * k..(bi + 1) * m * k],
                        (1, k as isize),
                        &g[bi * m * n..(bi + 1) * m * n],
                        (n as isize, 1),
                        T::one(),
                        &mut dst[bi * b_step..bi * b_step + k * n],
                        (n as isize, 1),
                    );
                }
            }
        }
        Op::TransposeLast2(a) => {
            if wants(nodes, *a) {
                let s = &nodes[*a].shape;
                let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
                let dst = buf.slot(*a, g.len());
                let batch = g.len() / (rows * cols);
                for b in 0..batch {
                    let off = b * rows * cols;
                    for i in 0..rows {
                        for j in 0..cols {
                            dst[off + i * cols + j] += g[off + j * rows + i];
                        }
                    }
                }
            }
        }
        Op::Conv2d { x, w, b } => conv2d(nodes, *x, *w, *b, g, buf),
        Op::SumAll(a) => {
            if wants(nodes, *a) {
                let len = nodes[*a].value.len();
                let dst = buf.slot(*a, len);
                for d in dst.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::SumAxis(a, sp) => {
            if wants(nodes, *a) {
                let dst = buf.slot(*a, sp.outer * sp.n * sp.inner);
                for o in 0..sp.outer {
                    for k in 0..sp.n {
                        for i in 0..sp.inner {
                            dst[(o * sp.n + k) * sp.inner + i] += g[o * sp.inner + i];
                        }
                    }
                }
            }
        }
        Op::MaxAxis(a, sp, arg) => {
            if wants(nodes, *a) {
                let dst = buf.slot(*a, sp.outer * sp.n * sp.inner);
                for o in 0..sp.outer {
                    for i in 0..sp.inner {
                        let slot = o * sp.inner + i;
                        dst[(o * sp.n + arg[slot]) * sp.inner + i] += g[slot];
                    }
                }
            }
        }
        Op::LogSumExp(a, sp) => {
            if wants(nodes, *a) {
                let x = nodes[*a].value.clone();
                let dst = buf.slot(*a, x.len());
                for o in 0..sp.outer {
                    for i in 0..sp.inner {
                        let slot = o * sp.inner + i;
                        if out[slot].is_infinite() {
                            continue;
                        }
                        for k in 0..sp.n {
                            let idx = (o * sp.n + k) * sp.inner + i;
                            dst[idx] += g[slot] * (x[idx] - out[slot]).exp();
                        }
                    }
                }
            }
        }
        Op::Softmax(a, sp) => {
            if wants(nodes, *a) {
                let dst = buf.slot(*a, out.len());
                for o in 0..sp.outer {
                    for i in 0..sp.inner {
                        let idx = |k: usize| (o * sp.n + k) * sp.inner + i;
                        let dot: T = (0..sp.n).map(|k| g[idx(k)] * out[idx(k)]).sum();
                        for k in 0..sp.n {
                            dst[idx(k)] += out[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if wants(nodes, *a) {
                let dst = buf.slot(*a, g.len());
                for (d, &x) in dst.iter_mut().zip(g) {
                    *d += x;
                }
            }
        }
        Op::Slice { a, split, start, len } => {
            if wants(nodes, *a) {
                let sp = *split;
                let dst = buf.slot(*a, sp.outer * sp.n * sp.inner);
                for o in 0..sp.outer {
                    let src = &g[o * len * sp.inner..(o + 1) * len * sp.inner];
                    let d = &mut dst[(o * sp.n + start) * sp.inner..(o * sp.n + start + len) * sp.inner];
                    for (x, &y) in d.iter_mut().zip(src) {
                        *x += y;
                    }
                }
            }
        }
        Op::Concat {
            parts,
            outer,
            inner,
            total,
        } => {
            let mut offset = 0;
            for &(pid, n) in parts {
                if wants(nodes, pid) {
                    let dst = buf.slot(pid, outer * n * inner);
                    for o in 0..*outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                        for (x, &y) in dst[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                }
                offset += n;
            }
        }
        Op::BilinearSample { img, grid } => bilinear(nodes, *img, *grid, g, buf),
        Op::Bezier {
            cp,
            basis,
            samples,
            points,
        } => {
            if wants(nodes, *cp) {
                let bsz = nodes[*cp].shape[0];
                let (s, j) = (*samples, *points);
                let dst = buf.slot(*cp, bsz * j * 2);
                for b in 0..bsz {
                    // dCP = basis^T G
                    T::gemm(
                        j,
                        s,
                        2,
                        T::one(),
                        basis,
                        (1, j as isize),
                        &g[b * s * 2..(b + 1) * s * 2],
                        (2, 1),
                        T::one(),
                        &mut dst[b * j * 2..(b + 1) * j * 2],
                        (2, 1),
                    );
                }
            }
        }
        Op::Rasterize {
            samples,
            sigma,
            height,
            width,
            literal,
        } => rasterize(nodes, *samples, *sigma, *height, *width, *literal, g, buf),
    }
}

fn binary<T: Scalar>(
    nodes: &[Node<T>],
    op: BinaryOp,
    a: NodeId,
    b: NodeId,
    out_shape: &[usize],
    g: &[T],
    buf: &mut GradBuf<T>,
) {
    let (va, vb) = (nodes[a].value.clone(), nodes[b].value.clone());
    let (wa, wb) = (wants(nodes, a), wants(nodes, b));
    let da = |y: T| -> T {
        match op {
            BinaryOp::Add | BinaryOp::Sub => T::one(),
            BinaryOp::Mul => y,
            BinaryOp::Div => T::one() / y,
        }
    };
    let db = |x: T, y: T| -> T {
        match op {
            BinaryOp::Add => T::one(),
            BinaryOp::Sub => -T::one(),
            BinaryOp::Mul => x,
            BinaryOp::Div => -x / (y * y),
        }
    };
    if nodes[a].shape == nodes[b].shape {
        if wa {
            let dst = buf.slot(a, va.len());
            for i in 0..g.len() {
                dst[i] += g[i] * da(vb[i]);
            }
        }
        if wb {
            let dst = buf.slot(b, vb.len());
            for i in 0..g.len() {
                dst[i] += g[i] * db(va[i], vb[i]);
            }
        }
        return;
    }
    let sa = broadcast_strides(&nodes[a].shape, out_shape);
    let sb = broadcast_strides(&nodes[b].shape, out_shape);
    if wa {
        let mut acc = vec![T::zero(); va.len()];
        for_each_broadcast(out_shape, &sa, &sb, |i, ia, ib| acc[ia] += g[i] * da(vb[ib]));
        let dst = buf.slot(a, va.len());
        dst.iter_mut().zip(&acc).for_each(|(d, x)| *d += *x);
    }
    if wb {
        let mut acc = vec![T::zero(); vb.len()];
        for_each_broadcast(out_shape, &sa, &sb, |i, ia, ib| acc[ib] += g[i] * db(va[ia], vb[ib]));
        let dst = buf.slot(b, vb.len());
        dst.iter_mut().zip(&acc).for_each(|(d, x)| *d += *x);
    }
}

fn conv2d<T: Scalar>(nodes: &[Node<T>], x: NodeId, w: NodeId, b: NodeId, g: &[T], buf: &mut GradBuf<T>) {
    let sx = nodes[x].shape.clone();
    let (bsz, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
    let cout = nodes[w].shape[0];
    let hw = h * wd;
    let kdim = cin * 9;
    let vx = nodes[x].value.clone();
    let vw = nodes[w].value.clone();
    if wants(nodes, b) {
        let dst = buf.slot(b, cout);
        for bi in 0..bsz {
            for co in 0..cout {
                dst[co] += g[(bi * cout + co) * hw..(bi * cout + co + 1) * hw].iter().copied().sum::<T>();
            }
        }
    }
    let need_w = wants(nodes, w);
    let need_x = wants(nodes, x);
    let mut col = vec![T::zero(); kdim * hw];
    let mut dcol = vec![T::zero(); kdim * hw];
    let mut dw = vec![T::zero(); cout * kdim];
    let mut dx = if need_x { vec![T::zero(); vx.len()] } else { Vec::new() };
    for bi in 0..bsz {
        let gb = &g[bi * cout * hw..(bi + 1) * cout * hw];
        if need_w {
            im2col3x3(&vx[bi * cin * hw..(bi + 1) * cin * hw], cin, h, wd, &mut col);
            // dW += G col^T
            T::gemm(cout, hw, kdim, T::one(), gb, (hw as isize, 1), &col, (1, hw as isize), T::one(), &mut dw, (kdim as isize, 1));
        }
        if need_x {
            // dcol = W^T G
            T::gemm(kdim, cout, hw, T::one(), &vw, (1, kdim as isize), gb, (hw as isize, 1), T::zero(), &mut dcol, (hw as isize, 1));
            col2im3x3(&dcol, cin, h, wd, &mut dx[bi * cin * hw..(bi + 1) * cin * hw]);
        }
    }
    if need_w {
        let dst = buf.slot(w, dw.len());
        dst.iter_mut().zip(&dw).for_each(|(d, v)| *d += *v);
    }
    if need_x {
        let dst = buf.slot(x, dx.len());
        dst.iter_mut().zip(&dx).for_each(|(d, v)| *d += *v);
    }
}

fn bilinear<T: Scalar>(nodes: &[Node<T>], img: NodeId, grid: NodeId, g: &[T], buf: &mut GradBuf<T>) {
    let si = nodes[img].shape.clone();
    let sg = nodes[grid].shape.clone();
    let (bsz, c, h, w) = (si[0], si[1], si[2], si[3]);
    let (ho, wo) = (sg[1], sg[2]);
    let vi = nodes[img].value.clone();
    let vg = nodes[grid].value.clone();
    let need_img = wants(nodes, img);
    let need_grid = wants(nodes, grid);
    let mut dimg = if need_img { vec![T::zero(); vi.len()] } else { Vec::new() };
    let mut dgrid = if need_grid { vec![T::zero(); vg.len()] } else { Vec::new() };
    let half = lit::<T>(0.5);
    let sx = half * lit::<T>((w - 1) as f64);
    let sy = half * lit::<T>((h - 1) as f64);
    for b in 0..bsz {
        for p in 0..ho * wo {
            let gi = (b * ho * wo + p) * 2;
            let tap = bilinear_tap(vg[gi], vg[gi + 1], h, w);
            let (wx1, wy1) = (tap.wx1, tap.wy1);
            let (wx0, wy0) = (T::one() - wx1, T::one() - wy1);
            for ch in 0..c {
                let go = g[(b * c + ch) * ho * wo + p];
                if go == T::zero() {
                    continue;
                }
                let base = (b * c + ch) * h * w;
                if need_img {
                    let corners = [(0, 0, wy0 * wx0), (0, 1, wy0 * wx1), (1, 0, wy1 * wx0), (1, 1, wy1 * wx1)];
                    for (dy, dx, wt) in corners {
                        let (y, x) = (tap.y0 + dy, tap.x0 + dx);
                        if y >= 0 && x >= 0 && y < h as isize && x < w as isize {
                            dimg[base + y as usize * w + x as usize] += go * wt;
                        }
                    }
                }
                if need_grid {
                    let plane = &vi[base..base + h * w];
                    let px = |dy: isize, dx: isize| pixel_or_zero(plane, h, w, tap.y0 + dy, tap.x0 + dx);
                    let (p00, p01, p10, p11) = (px(0, 0), px(0, 1), px(1, 0), px(1, 1));
                    let d_px = wy0 * (p01 - p00) + wy1 * (p11 - p10);
                    let d_py = wx0 * (p10 - p00) + wx1 * (p11 - p01);
                    dgrid[gi] += go * d_px * sx;
                    dgrid[gi + 1] += go * d_py * sy;
                }
            }
        }
    }
    if need_img {
        let dst = buf.slot(img, dimg.len());
        dst.iter_mut().zip(&dimg).for_each(|(d, v)| *d += *v);
    }
    if need_grid {
        let dst = buf.slot(grid, dgrid.len());
        dst.iter_mut().zip(&dgrid).for_each(|(d, v)| *d += *v);
    }
}

#[allow(clippy::too_many_arguments)]
fn rasterize<T: Scalar>(
    nodes: &[Node<T>],
    samples: NodeId,
    sigma: NodeId,
    h: usize,
    w: usize,
    literal: bool,
    g: &[T],
    buf: &mut GradBuf<T>,
) {
    let vs = nodes[samples].value.clone();
    let vz = nodes[sigma].value.clone();
    let bsz = vz.len();
    let ns = nodes[samples].shape[1];
    let need_pts = wants(nodes, samples);
    let need_sig = wants(nodes, sigma);
    let mut dpts = vec![T::zero(); vs.len()];
    let mut dsig = vec![T::zero(); bsz];
    let (mut fx, mut fy) = (Vec::new(), Vec::new());
    let mut dfx = vec![T::zero(); ns * w];
    let mut dfy = vec![T::zero(); ns * h];
    let two = lit::<T>(2.0);
    for b in 0..bsz {
        let pts = &vs[b * ns * 2..(b + 1) * ns * 2];
        let gb = &g[b * h * w..(b + 1) * h * w];
        let sig = vz[b];
        let inv_s2 = T::one() / (sig * sig);
        let xs = pts.chunks(2).map(|p| p[0]);
        let ys = pts.chunks(2).map(|p| p[1]);
        if literal {
            square_factors(xs, w, &mut fx);
            square_factors(ys, h, &mut fy);
        } else {
            gaussian_factors(xs, w, inv_s2, &mut fx);
            gaussian_factors(ys, h, inv_s2, &mut fy);
        }
        // dfx[s, w] = sum_h fy[s, h] G[h, w];  dfy[s, h] = sum_w fx[s, w] G[h, w]
        T::gemm(ns, h, w, T::one(), &fy, (h as isize, 1), gb, (w as isize, 1), T::zero(), &mut dfx, (w as isize, 1));
        T::gemm(ns, w, h, T::one(), &fx, (w as isize, 1), gb, (1, w as isize), T::zero(), &mut dfy, (h as isize, 1));
        if literal {
            // out = U / sigma^2 with U = fy^T fx
            if need_sig {
                let u_dot_g: T = (0..ns)
                    .map(|s| (0..w).map(|k| dfx[s * w + k] * fx[s * w + k]).sum::<T>())
                    .sum();
                dsig[b] += u_dot_g * (-two) / (sig * sig * sig);
            }
            if need_pts {
                for s in 0..ns {
                    let (x, y) = (pts[s * 2], pts[s * 2 + 1]);
                    let mut gx = T::zero();
                    for k in 0..w {
                        gx += dfx[s * w + k] * (-two) * (lit::<T>(k as f64) - x);
                    }
                    let mut gy = T::zero();
                    for k in 0..h {
                        gy += dfy[s * h + k] * (-two) * (lit::<T>(k as f64) - y);
                    }
                    dpts[b * ns * 2 + s * 2] += gx * inv_s2;
                    dpts[b * ns * 2 + s * 2 + 1] += gy * inv_s2;
                }
            }
        } else {
            let inv_s3 = inv_s2 / sig;
            let mut gs = T::zero();
            for s in 0..ns {
                let (x, y) = (pts[s * 2], pts[s * 2 + 1]);
                let (mut gx, mut gy) = (T::zero(), T::zero());
                for k in 0..w {
                    let d = lit::<T>(k as f64) - x;
                    let t = dfx[s * w + k] * fx[s * w + k];
                    gx += t * d;
                    gs += t * d * d;
                }
                for k in 0..h {
                    let d = lit::<T>(k as f64) - y;
                    let t = dfy[s * h + k] * fy[s * h + k];
                    gy += t * d;
                    gs += t * d * d;
                }
                dpts[b * ns * 2 + s * 2] += two * inv_s2 * gx;
                dpts[b * ns * 2 + s * 2 + 1] += two * inv_s2 * gy;
            }
            dsig[b] += two * inv_s3 * gs;
        }
    }
    if need_pts {
        let dst = buf.slot(samples, dpts.len());
        dst.iter_mut().zip(&dpts).for_each(|(d, v)| *d += *v);
    }
    if need_sig {
        let dst = buf.slot(sigma, bsz);
        dst.iter_mut().zip(&dsig).for_each(|(d, v)| *d += *v);
    }
}
