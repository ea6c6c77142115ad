//! Pixel grid loading, saving and resizing.
//!
//! Images are `Array3<f64>` in (channel, row, col) layout with values in
//! [0, 1]; three channels throughout.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Rgb};
use ndarray::Array3;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

pub fn load_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::runtime(format!("cannot read image {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((CHANNELS, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..CHANNELS {
            out[(c, y as usize, x as usize)] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

pub fn save_image(path: &Path, pixels: &Array3<f64>) -> Result<()> {
    let (c, h, w) = pixels.dim();
    if c != CHANNELS {
        return Err(Error::validation(format!("save_image expects 3 channels, got {c}")));
    }
    let mut buf = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        for ch in 0..CHANNELS {
            let v = pixels[(ch, y as usize, x as usize)].clamp(0.0, 1.0);
            px.0[ch] = (v * 255.0).round() as u8;
        }
    }
    DynamicImage::ImageRgb8(buf)
        .save(path)
        .map_err(|e| Error::runtime(format!("cannot write image {}: {e}", path.display())))
}

/// Bilinear resize to (height, width).
pub fn resize(pixels: &Array3<f64>, height: usize, width: usize) -> Array3<f64> {
    let (c, sh, sw) = pixels.dim();
    if (sh, sw) == (height, width) {
        return pixels.clone();
    }
    let mut out = Array3::<f64>::zeros((c, height, width));
    let sy = sh as f64 / height as f64;
    let sx = sw as f64 / width as f64;
    for y in 0..height {
        // Sample at pixel centers.
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, sh as f64 - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = fy - y0 as f64;
        for x in 0..width {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, sw as f64 - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let top = pixels[(ch, y0, x0)] * (1.0 - wx) + pixels[(ch, y0, x1)] * wx;
                let bot = pixels[(ch, y1, x0)] * (1.0 - wx) + pixels[(ch, y1, x1)] * wx;
                out[(ch, y, x)] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn save_load_round_trip_within_quantization() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.png");
        let img = Array3::from_shape_fn((3, 8, 8), |(c, y, x)| {
            ((c + 2 * y + 3 * x) % 7) as f64 / 6.0
        });
        save_image(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.dim(), (3, 8, 8));
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1.0 / 255.0 + 1e-9);
        }
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = Array3::from_elem((3, 10, 10), 0.4);
        assert_eq!(resize(&img, 10, 10), img);
        let small = resize(&img, 5, 7);
        assert!(small.iter().all(|v| (v - 0.4).abs() < 1e-12));
    }
}
