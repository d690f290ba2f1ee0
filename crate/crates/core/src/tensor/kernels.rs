//! Slice-level kernels shared by the forward and backward passes.

use crate::scalar::{lit, Scalar};

/// `col[(c*9 + ky*3 + kx), y*w + x] = img[c, y+ky-1, x+kx-1]` (zero padded).
pub(crate) fn im2col3x3<T: Scalar>(img: &[T], c: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &img[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, d) in dst.iter_mut().enumerate() {
                        let sx = x as isize + kx as isize - 1;
                        *d = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3x3`]: scatters `col` back onto the padded image.
pub(crate) fn col2im3x3<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, img: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut img[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, &v) in src.iter().enumerate() {
                        let sx = x as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Bernstein weights `C(J-1,j) (1-n)^(J-1-j) n^j` for `samples` evenly
/// spaced `n` in `[0, 1]`, row-major `samples x points`. The first and last
/// rows are exactly one-hot so curves interpolate their end points.
pub fn bernstein_basis<T: Scalar>(points: usize, samples: usize) -> Vec<T> {
    assert!(points >= 2 && samples >= 2);
    let degree = points - 1;
    let mut binom = vec![1.0f64; points];
    for j in 1..points {
        binom[j] = binom[j - 1] * (degree - j + 1) as f64 / j as f64;
    }
    let mut basis = vec![T::zero(); samples * points];
    for s in 0..samples {
        let n = s as f64 / (samples - 1) as f64;
        for j in 0..points {
            let w = binom[j] * (1.0 - n).powi((degree - j) as i32) * n.powi(j as i32);
            basis[s * points + j] = lit(w);
        }
    }
    basis
}

pub(crate) struct BilinearTap<T> {
    pub x0: isize,
    pub y0: isize,
    pub wx1: T,
    pub wy1: T,
}

#[inline]
pub(crate) fn bilinear_tap<T: Scalar>(gx: T, gy: T, h: usize, w: usize) -> BilinearTap<T> {
    let half = lit::<T>(0.5);
    let px = (gx + T::one()) * half * lit::<T>((w - 1) as f64);
    let py = (gy + T::one()) * half * lit::<T>((h - 1) as f64);
    let fx = px.floor();
    let fy = py.floor();
    BilinearTap {
        x0: fx.to_isize().unwrap_or(isize::MIN / 2),
        y0: fy.to_isize().unwrap_or(isize::MIN / 2),
        wx1: px - fx,
        wy1: py - fy,
    }
}

#[inline]
pub(crate) fn pixel_or_zero<T: Scalar>(plane: &[T], h: usize, w: usize, y: isize, x: isize) -> T {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        T::zero()
    } else {
        plane[y as usize * w + x as usize]
    }
}

/// Separable Gaussian factors `exp(-(k - c_s)^2 / sigma^2)` for one axis,
/// laid out `samples x len`.
pub(crate) fn gaussian_factors<T: Scalar>(centers: impl Iterator<Item = T>, len: usize, inv_s2: T, out: &mut Vec<T>) {
    out.clear();
    for c in centers {
        for k in 0..len {
            let d = lit::<T>(k as f64) - c;
            out.push((-(d * d) * inv_s2).exp());
        }
    }
}

/// Squared-distance factors `(k - c_s)^2` for the literal raster formula.
pub(crate) fn square_factors<T: Scalar>(centers: impl Iterator<Item = T>, len: usize, out: &mut Vec<T>) {
    out.clear();
    for c in centers {
        for k in 0..len {
            let d = lit::<T>(k as f64) - c;
            out.push(d * d);
        }
    }
}
