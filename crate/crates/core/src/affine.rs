//! Spatial-transformer geometry.
//!
//! An affine matrix `M` (2x3, row-major, stored as 6 values) maps glimpse
//! coordinates to canvas coordinates, both normalised to `[-1, 1]` with
//! `x` horizontal and `y` vertical. Writing a stroke maps its canonical
//! control points through `M`; reading a glimpse samples the canvas at `M`
//! applied to the glimpse grid, so the two directions are inverse to each
//! other.

use crate::scalar::{lit, Scalar};
use crate::tensor::{Result, Tensor};

pub const LAYOUT_DIM: usize = 4;
pub const DEFAULT_GLIMPSE: usize = 20;

/// Admissible layout ranges: shift in `[-1, 1]^2`, scale in
/// `[scale_min, 1]`, rotation in `[-rotation_max, rotation_max]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayoutRanges {
    pub scale_min: f64,
    pub rotation_max: f64,
}

impl Default for LayoutRanges {
    fn default() -> Self {
        Self {
            scale_min: 0.2,
            rotation_max: std::f64::consts::FRAC_PI_4,
        }
    }
}

impl LayoutRanges {
    /// Clamps layouts `[n, 4]` into range.
    pub fn clamp<'g, T: Scalar>(&self, l: &Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        let shift = l.slice(1, 0, 2)?.clamp(-T::one(), T::one());
        let scale = l.slice(1, 2, 1)?.clamp(lit(self.scale_min), T::one());
        let rot = l.slice(1, 3, 1)?.clamp(lit(-self.rotation_max), lit(self.rotation_max));
        Tensor::concat(&[shift, scale, rot], 1)
    }

    pub fn clamp_value<T: Scalar>(&self, l: &LayoutLatent<T>) -> LayoutLatent<T> {
        let c = |v: T, lo: f64, hi: f64| v.max(lit(lo)).min(lit(hi));
        LayoutLatent {
            shift: [c(l.shift[0], -1.0, 1.0), c(l.shift[1], -1.0, 1.0)],
            scale: c(l.scale, self.scale_min, 1.0),
            rotation: c(l.rotation, -self.rotation_max, self.rotation_max),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayoutLatent<T> {
    pub shift: [T; 2],
    pub scale: T,
    pub rotation: T,
}

impl<T: Scalar> LayoutLatent<T> {
    pub fn identity() -> Self {
        Self {
            shift: [T::zero(); 2],
            scale: T::one(),
            rotation: T::zero(),
        }
    }

    pub fn from_slice(v: &[T]) -> Self {
        Self {
            shift: [v[0], v[1]],
            scale: v[2],
            rotation: v[3],
        }
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.shift[0], self.shift[1], self.scale, self.rotation]
    }

    pub fn matrix(&self) -> Affine<T> {
        let (s, c) = self.rotation.sin_cos();
        let k = self.scale;
        Affine([k * c, -k * s, self.shift[0], k * s, k * c, self.shift[1]])
    }
}

/// Plain-valued 2x3 affine map `[a, b, tx, c, d, ty]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine<T>(pub [T; 6]);

impl<T: Scalar> Affine<T> {
    pub fn identity() -> Self {
        Self([T::one(), T::zero(), T::zero(), T::zero(), T::one(), T::zero()])
    }

    pub fn apply(&self, p: [T; 2]) -> [T; 2] {
        let m = &self.0;
        [m[0] * p[0] + m[1] * p[1] + m[2], m[3] * p[0] + m[4] * p[1] + m[5]]
    }

    /// `self` after `other`: `(self ∘ other)(p) = self(other(p))`.
    pub fn compose(&self, other: &Affine<T>) -> Affine<T> {
        let (a, b) = (&self.0, &other.0);
        Affine([
            a[0] * b[0] + a[1] * b[3],
            a[0] * b[1] + a[1] * b[4],
            a[0] * b[2] + a[1] * b[5] + a[2],
            a[3] * b[0] + a[4] * b[3],
            a[3] * b[1] + a[4] * b[4],
            a[3] * b[2] + a[4] * b[5] + a[5],
        ])
    }

    pub fn det(&self) -> T {
        self.0[0] * self.0[4] - self.0[1] * self.0[3]
    }

    pub fn inverse(&self) -> Option<Affine<T>> {
        let d = self.det();
        if d.abs() < lit(1e-12) {
            return None;
        }
        let m = &self.0;
        let (a, b, c, e) = (m[4] / d, -m[1] / d, -m[3] / d, m[0] / d);
        Some(Affine([a, b, -(a * m[2] + b * m[5]), c, e, -(c * m[2] + e * m[5])]))
    }
}

/// `[n, 4]` layouts `(tx, ty, scale, theta)` to `[n, 6]` matrices
/// `[s cos, -s sin, tx, s sin, s cos, ty]`.
pub fn layout_to_matrix<'g, T: Scalar>(l: &Tensor<'g, T>) -> Result<Tensor<'g, T>> {
    let tx = l.slice(1, 0, 1)?;
    let ty = l.slice(1, 1, 1)?;
    let s = l.slice(1, 2, 1)?;
    let th = l.slice(1, 3, 1)?;
    let sc = s.mul(&th.cos())?;
    let ss = s.mul(&th.sin())?;
    Tensor::concat(&[sc, ss.neg(), tx, ss, sc, ty], 1)
}

/// Composes `[n, 6]` matrices: `outer ∘ inner`.
pub fn compose<'g, T: Scalar>(outer: &Tensor<'g, T>, inner: &Tensor<'g, T>) -> Result<Tensor<'g, T>> {
    let a = |i| outer.slice(1, i, 1);
    let b = |i| inner.slice(1, i, 1);
    let row = |r: usize| -> Result<[Tensor<'g, T>; 3]> {
        let (p, q, t) = (a(3 * r)?, a(3 * r + 1)?, a(3 * r + 2)?);
        Ok([
            p.mul(&b(0)?)?.add(&q.mul(&b(3)?)?)?,
            p.mul(&b(1)?)?.add(&q.mul(&b(4)?)?)?,
            p.mul(&b(2)?)?.add(&q.mul(&b(5)?)?)?.add(&t)?,
        ])
    };
    let [r0, r1, r2] = row(0)?;
    let [r3, r4, r5] = row(1)?;
    Tensor::concat(&[r0, r1, r2, r3, r4, r5], 1)
}

/// Applies `[n, 6]` matrices to points `[n, P, 2]`.
pub fn apply_to_points<'g, T: Scalar>(m: &Tensor<'g, T>, pts: &Tensor<'g, T>) -> Result<Tensor<'g, T>> {
    let n = m.dim(0);
    let p = pts.dim(1);
    let x = pts.slice(2, 0, 1)?.reshape(&[n, p])?;
    let y = pts.slice(2, 1, 1)?.reshape(&[n, p])?;
    let e = |i| m.slice(1, i, 1);
    let nx = x.mul(&e(0)?)?.add(&y.mul(&e(1)?)?)?.add(&e(2)?)?;
    let ny = x.mul(&e(3)?)?.add(&y.mul(&e(4)?)?)?.add(&e(5)?)?;
    Tensor::concat(&[nx.reshape(&[n, p, 1])?, ny.reshape(&[n, p, 1])?], 2)
}

/// Maps normalised points `[n, P, 2]` to pixel coordinates of an
/// `height x width` image.
pub fn to_pixels<'g, T: Scalar>(pts: &Tensor<'g, T>, height: usize, width: usize) -> Result<Tensor<'g, T>> {
    let half_w: T = lit((width as f64 - 1.0) / 2.0);
    let half_h: T = lit((height as f64 - 1.0) / 2.0);
    let x = pts.slice(2, 0, 1)?.affine(half_w, half_w);
    let y = pts.slice(2, 1, 1)?.affine(half_h, half_h);
    Tensor::concat(&[x, y], 2)
}

/// Canonical control points `[n, J, 2]` to canvas pixel coordinates.
pub fn transform_control_points<'g, T: Scalar>(
    cp: &Tensor<'g, T>,
    m: &Tensor<'g, T>,
    height: usize,
    width: usize,
) -> Result<Tensor<'g, T>> {
    to_pixels(&apply_to_points(m, cp)?, height, width)
}

/// Normalised `g x g` sampling grid as `[1, g*g, 2]` points, row-major.
pub fn glimpse_grid<T: Scalar>(g: usize) -> Vec<T> {
    let coord = |i: usize| lit::<T>(if g > 1 { 2.0 * i as f64 / (g - 1) as f64 - 1.0 } else { 0.0 });
    let mut out = Vec::with_capacity(g * g * 2);
    for r in 0..g {
        for c in 0..g {
            out.push(coord(c));
            out.push(coord(r));
        }
    }
    out
}

/// Bilinear read of `img: [n, h, w]` at `M` applied to a `g x g` glimpse grid;
/// returns `[n, g, g]`.
pub fn extract_glimpse<'g, T: Scalar>(img: &Tensor<'g, T>, m: &Tensor<'g, T>, g: usize) -> Result<Tensor<'g, T>> {
    let s = img.shape();
    let n = s[0];
    let graph = img.graph();
    let base = graph.constant(&[1, g * g, 2], glimpse_grid(g))?;
    let ones = graph.full(&[n, 1, 1], T::one());
    let grid = apply_to_points(m, &base.mul(&ones)?)?.reshape(&[n, g, g, 2])?;
    img.reshape(&[n, 1, s[1], s[2]])?
        .bilinear_sample(&grid)?
        .reshape(&[n, g, g])
}
