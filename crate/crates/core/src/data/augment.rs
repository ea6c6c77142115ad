//! Training-time augmentation: resize, padded random crop, horizontal flip,
//! small random rotation. Deterministic under an explicit seed.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::imageio::resize;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub size: usize,
    pub crop_pad: usize,
    pub flip_prob: f64,
    pub max_rotation_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            size: 48,
            crop_pad: 10,
            flip_prob: 0.5,
            max_rotation_deg: 10.0,
        }
    }
}

pub fn hflip(image: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = image.dim();
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| image[(ch, y, w - 1 - x)])
}

/// Rotation about the center by `deg` degrees, bilinear, edge-clamped.
pub fn rotate(image: &Array3<f64>, deg: f64) -> Array3<f64> {
    if deg == 0.0 {
        return image.clone();
    }
    let (c, h, w) = image.dim();
    let rad = deg.to_radians();
    let (sin, cos) = rad.sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Array3::<f64>::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            // Inverse-rotate the output coordinate into the source frame.
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sy = (cos * dy + sin * dx + cy).clamp(0.0, h as f64 - 1.0);
            let sx = (-sin * dy + cos * dx + cx).clamp(0.0, w as f64 - 1.0);
            let y0 = sy.floor() as usize;
            let x0 = sx.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let wy = sy - y0 as f64;
            let wx = sx - x0 as f64;
            for ch in 0..c {
                let top = image[(ch, y0, x0)] * (1.0 - wx) + image[(ch, y0, x1)] * wx;
                let bot = image[(ch, y1, x0)] * (1.0 - wx) + image[(ch, y1, x1)] * wx;
                out[(ch, y, x)] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

/// Pads by edge replication and crops `size` x `size` at the given offset.
pub fn pad_crop(image: &Array3<f64>, pad: usize, oy: usize, ox: usize) -> Array3<f64> {
    let (c, h, w) = image.dim();
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
        let sy = (y + oy).saturating_sub(pad).min(h - 1);
        let sx = (x + ox).saturating_sub(pad).min(w - 1);
        image[(ch, sy, sx)]
    })
}

/// Full pipeline: resize, random crop with padding, flip, rotation.
pub fn augment(image: &Array3<f64>, config: &AugmentConfig, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = resize(image, config.size, config.size);
    if config.crop_pad > 0 {
        let oy = rng.gen_range(0..=2 * config.crop_pad);
        let ox = rng.gen_range(0..=2 * config.crop_pad);
        img = pad_crop(&img, config.crop_pad, oy, ox);
    }
    if rng.gen_bool(config.flip_prob) {
        img = hflip(&img);
    }
    if config.max_rotation_deg > 0.0 {
        let deg = rng.gen_range(-config.max_rotation_deg..=config.max_rotation_deg);
        img = rotate(&img, deg);
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, h, w), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn flip_is_an_involution() {
        let img = random_image(1, 12, 16);
        assert_eq!(hflip(&hflip(&img)), img);
    }

    #[test]
    fn zero_rotation_zero_offset_is_identity() {
        let img = random_image(2, 16, 16);
        assert_eq!(rotate(&img, 0.0), img);
        assert_eq!(pad_crop(&img, 5, 5, 5), img);
    }

    #[test]
    fn deterministic_under_seed() {
        let img = random_image(3, 20, 20);
        let cfg = AugmentConfig {
            size: 16,
            ..AugmentConfig::default()
        };
        let a = augment(&img, &cfg, 77);
        let b = augment(&img, &cfg, 77);
        assert_eq!(a, b);
    }

    #[test]
    fn preserves_shape_and_range() {
        let img = random_image(4, 30, 22);
        let cfg = AugmentConfig::default();
        for seed in 0..20 {
            let out = augment(&img, &cfg, seed);
            assert_eq!(out.dim(), (3, cfg.size, cfg.size));
            assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
