//! Grayscale image IO and preprocessing.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

/// Bilinear resize of a `h x w` byte image to `size x size`, scaled to
/// `[0, 1]`, optionally inverted (`1 - p`).
pub fn preprocess(raw: &[u8], h: usize, w: usize, size: usize, invert: bool) -> Vec<f32> {
    let src: Vec<f32> = raw.iter().map(|&v| v as f32 / 255.0).collect();
    let mut out = resize_bilinear(&src, h, w, size, size);
    if invert {
        for v in &mut out {
            *v = 1.0 - *v;
        }
    }
    out
}

/// Bilinear resize with pixel-centre alignment and edge clamping.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    if h == oh && w == ow {
        return src.to_vec();
    }
    let coord = |o: usize, n_out: usize, n_in: usize| {
        let c = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, (c - i0 as f64) as f32)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        let (r0, r1, fr) = coord(r, oh, h);
        for c in 0..ow {
            let (c0, c1, fc) = coord(c, ow, w);
            let top = src[r0 * w + c0] * (1.0 - fc) + src[r0 * w + c1] * fc;
            let bot = src[r1 * w + c0] * (1.0 - fc) + src[r1 * w + c1] * fc;
            out.push(top * (1.0 - fr) + bot * fr);
        }
    }
    out
}

#[derive(Debug, thiserror::Error)]
pub enum PngError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Decode { path: String, source: png::DecodingError },
}

/// Reads a PNG as 8-bit grayscale `(pixels, height, width)`. Colour images
/// are averaged over channels; alpha is ignored.
pub fn load_png_gray(path: &Path) -> Result<(Vec<u8>, usize, usize), PngError> {
    let p = path.display().to_string();
    let file = File::open(path).map_err(|source| PngError::Io { path: p.clone(), source })?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|source| PngError::Decode { path: p.clone(), source })?;
    let mut buf = vec![0; reader.output_buffer_size().expect("png buffer size fits in memory")];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|source| PngError::Decode { path: p.clone(), source })?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let colour = match info.color_type {
        png::ColorType::GrayscaleAlpha => 1,
        png::ColorType::Rgba => 3,
        _ => channels,
    };
    let gray = buf[..info.buffer_size()]
        .chunks(channels)
        .map(|px| (px[..colour].iter().map(|&v| v as u32).sum::<u32>() / colour as u32) as u8)
        .collect();
    Ok((gray, h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_stays_zero() {
        assert!(preprocess(&[0; 28 * 28], 28, 28, 50, false).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let px: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        crate::renderer::save_png(&path, &px, 3, 4).unwrap();
        let (g, h, w) = load_png_gray(&path).unwrap();
        assert_eq!((h, w), (3, 4));
        assert_eq!(g, crate::renderer::to_bytes(&px));
    }

    proptest! {
        #[test]
        fn constant_images_resize_to_the_same_constant(v in 0u8..=255, h in 1usize..40, w in 1usize..40) {
            let out = preprocess(&vec![v; h * w], h, w, 50, false);
            let want = v as f32 / 255.0;
            prop_assert!(out.iter().all(|&p| (p - want).abs() < 1e-6));
        }

        #[test]
        fn inversion_is_an_involution(raw in prop::collection::vec(any::<u8>(), 28 * 28)) {
            let once = preprocess(&raw, 28, 28, 50, true);
            let plain = preprocess(&raw, 28, 28, 50, false);
            for (a, b) in once.iter().zip(&plain) {
                prop_assert!((1.0 - a - b).abs() < 1e-6);
            }
        }
    }
}
