//! Differentiable Bezier stroke renderer and canvas compositor.
//!
//! A stroke is `J` control points in pixel coordinates `(x = column,
//! y = row)`. It is sampled at `S` evenly spaced curve parameters, splatted
//! with a Gaussian kernel of width `sigma`, max-normalised and passed through
//! `tanh(. / s_slope)`. Strokes are summed and squashed with
//! `tanh(. / g_slope)` to form the canvas.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::scalar::{lit, to_f64, Scalar};
use crate::tensor::{Result, Tensor};

pub const DEFAULT_SAMPLES: usize = 100;

/// Per-stroke blur and slope plus the per-image canvas slope.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderParams<T> {
    pub sigma: T,
    pub s_slope: T,
    pub g_slope: T,
}

/// Samples Bezier curves `cp: [n, J, 2]` at `samples` points: `[n, S, 2]`.
pub fn bezier_points<'g, T: Scalar>(cp: &Tensor<'g, T>, samples: usize) -> Result<Tensor<'g, T>> {
    cp.bezier(samples)
}

/// Raw Gaussian-splat intensities `[n, h, w]` of sample points `[n, S, 2]`.
pub fn rasterize<'g, T: Scalar>(
    samples: &Tensor<'g, T>,
    sigma: &Tensor<'g, T>,
    height: usize,
    width: usize,
    literal: bool,
) -> Result<Tensor<'g, T>> {
    samples.rasterize(sigma, height, width, literal)
}

/// Floor on the peak intensity a stroke is normalised by. Strokes that lie
/// almost entirely off the canvas stay faint instead of being blown up.
pub const PEAK_FLOOR: f64 = 1e-6;

/// `tanh((raw / max(raw, PEAK_FLOOR)) / s_slope)` per image. An all-zero
/// raster stays zero.
pub fn normalize_stroke<'g, T: Scalar>(raw: &Tensor<'g, T>, s_slope: &Tensor<'g, T>) -> Result<Tensor<'g, T>> {
    let shape = raw.shape();
    let n = shape[0];
    let m = raw
        .reshape(&[n, raw.numel() / n])?
        .max_axis(1)?
        .clamp(lit(PEAK_FLOOR), T::infinity());
    let denom = m.mul(s_slope)?.reshape(&[n, 1, 1])?;
    Ok(raw.div(&denom)?.tanh())
}

/// `tanh(sum / g_slope)` where `sum: [n, h, w]` is the summed stroke images.
pub fn normalize_canvas<'g, T: Scalar>(stroke_sum: &Tensor<'g, T>, g_slope: &Tensor<'g, T>) -> Result<Tensor<'g, T>> {
    let g = if g_slope.numel() == 1 {
        g_slope.reshape(&[1, 1, 1])?
    } else {
        g_slope.reshape(&[g_slope.numel(), 1, 1])?
    };
    Ok(stroke_sum.div(&g)?.tanh())
}

/// Composites a list of `[n, h, w]` stroke images; an empty list gives a zero
/// canvas of the requested shape.
pub fn composite<'g, T: Scalar>(
    graph: &'g crate::tensor::Graph<T>,
    strokes: &[Tensor<'g, T>],
    g_slope: &Tensor<'g, T>,
    shape: &[usize],
) -> Result<Tensor<'g, T>> {
    let mut sum = graph.zeros(shape);
    for s in strokes {
        sum = sum.add(s)?;
    }
    normalize_canvas(&sum, g_slope)
}

/// Full stroke pipeline on pixel-frame control points `[n, J, 2]`.
#[allow(clippy::too_many_arguments)]
pub fn render_stroke<'g, T: Scalar>(
    cp_pixels: &Tensor<'g, T>,
    sigma: &Tensor<'g, T>,
    s_slope: &Tensor<'g, T>,
    samples: usize,
    height: usize,
    width: usize,
    literal: bool,
) -> Result<Tensor<'g, T>> {
    let pts = bezier_points(cp_pixels, samples)?;
    let raw = rasterize(&pts, sigma, height, width, literal)?;
    normalize_stroke(&raw, s_slope)
}

/// Quantises `[0, 1]` intensities to bytes as `round(p * 255)`.
pub fn to_bytes<T: Scalar>(pixels: &[T]) -> Vec<u8> {
    pixels
        .iter()
        .map(|&p| (to_f64(p).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Writes one 8-bit grayscale PNG.
pub fn save_png<T: Scalar>(path: &Path, pixels: &[T], height: usize, width: usize) -> std::io::Result<()> {
    assert_eq!(pixels.len(), height * width);
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(std::io::Error::other)?;
    writer
        .write_image_data(&to_bytes(pixels))
        .map_err(std::io::Error::other)?;
    Ok(())
}

/// Tiles equally sized images into a grid with `cols` columns and a one
/// pixel gray border, for quick visual inspection.
pub fn tile<T: Scalar>(images: &[Vec<T>], height: usize, width: usize, cols: usize) -> (Vec<T>, usize, usize) {
    let cols = cols.max(1).min(images.len().max(1));
    let rows = images.len().div_ceil(cols).max(1);
    let (gh, gw) = (rows * (height + 1) + 1, cols * (width + 1) + 1);
    let mut out = vec![lit::<T>(0.5); gh * gw];
    for (i, img) in images.iter().enumerate() {
        let (r0, c0) = ((i / cols) * (height + 1) + 1, (i % cols) * (width + 1) + 1);
        for r in 0..height {
            out[(r0 + r) * gw + c0..(r0 + r) * gw + c0 + width].copy_from_slice(&img[r * width..(r + 1) * width]);
        }
    }
    (out, gh, gw)
}
