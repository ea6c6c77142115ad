//! Spectrum-space preprocessing: domain-invariant images (DII) and
//! style-perturbation images (SPI).
//!
//! DII keeps the complement of the mask: `idct2((1 - M) . dct2(X))`.
//! SPI multiplies the masked part by `1 + N(0,1)` noise and recomposes:
//! `idct2(R_G(M . dct2(X)) + (1 - M) . dct2(X))`, which equals
//! `idct2(dct2(X) + M . dct2(X) . N)`.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::dct::{dct2, idct2};
use super::mask::BandPassMask;
use crate::error::{Error, Result};

/// Result of running both branches on one image.
#[derive(Debug, Clone)]
pub struct StreamOutput {
    pub dii: Array3<f64>,
    pub spi: Array3<f64>,
    pub noise_seed: u64,
}

fn check_shape(image: &Array3<f64>, mask: &BandPassMask) -> Result<()> {
    let (_, h, w) = image.dim();
    if h != mask.height() || w != mask.width() {
        return Err(Error::validation(format!(
            "image {h}x{w} does not match mask {}x{}",
            mask.height(),
            mask.width()
        )));
    }
    Ok(())
}

/// Domain-invariant image: suppress the masked (domain-related) bands.
///
/// With `shift_and_clip`, the DC energy removed by the mask is re-added as a
/// per-channel mean shift (scaled by the mask weight at DC) and pixels are
/// clipped back to [0, 1], keeping the output in the standard pixel domain.
/// The raw variant leaves the signed result untouched so the masked
/// complement recomposes the source spectrum exactly.
pub fn extract_dii(
    image: &Array3<f64>,
    mask: &BandPassMask,
    shift_and_clip: bool,
) -> Result<Array3<f64>> {
    check_shape(image, mask)?;
    let (c, h, w) = image.dim();
    let mut out = Array3::<f64>::zeros((c, h, w));
    let dc_weight = mask.weights[(0, 0)];
    for ch in 0..c {
        let plane = image.index_axis(ndarray::Axis(0), ch).to_owned();
        let mut spec = dct2(&plane)?;
        spec.zip_mut_with(&mask.weights, |s, m| *s *= 1.0 - m);
        let mut pix = idct2(&spec)?;
        if shift_and_clip {
            let mean = plane.mean().unwrap_or(0.0);
            pix.mapv_inplace(|v| (v + mean * dc_weight).clamp(0.0, 1.0));
        }
        out.index_axis_mut(ndarray::Axis(0), ch).assign(&pix);
    }
    Ok(out)
}

/// Style-perturbation image: multiplicative Gaussian noise on the masked bands.
///
/// Noise is i.i.d. per coefficient per channel, fixed by `seed`. Output pixels
/// are not clipped; the perturbation is defined in the spectrum.
pub fn make_spi(image: &Array3<f64>, mask: &BandPassMask, seed: u64) -> Result<Array3<f64>> {
    let (c, h, w) = image.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<Array2<f64>> = (0..c)
        .map(|_| Array2::from_shape_fn((h, w), |_| rng.sample::<f64, _>(StandardNormal)))
        .collect();
    make_spi_with_noise(image, mask, &noise)
}

/// [`make_spi`] with an explicit noise draw per channel (one grid each).
pub fn make_spi_with_noise(
    image: &Array3<f64>,
    mask: &BandPassMask,
    noise: &[Array2<f64>],
) -> Result<Array3<f64>> {
    check_shape(image, mask)?;
    let (c, h, w) = image.dim();
    if noise.len() != c || noise.iter().any(|n| n.dim() != (h, w)) {
        return Err(Error::validation("make_spi: noise shape mismatch"));
    }
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        let plane = image.index_axis(ndarray::Axis(0), ch).to_owned();
        let mut spec = dct2(&plane)?;
        ndarray::Zip::from(&mut spec)
            .and(&mask.weights)
            .and(&noise[ch])
            .for_each(|s, m, n| *s += *s * m * n);
        let pix = idct2(&spec)?;
        out.index_axis_mut(ndarray::Axis(0), ch).assign(&pix);
    }
    Ok(out)
}

/// Runs both branches with one seed.
pub fn stream_apply(
    image: &Array3<f64>,
    mask: &BandPassMask,
    seed: u64,
    shift_and_clip: bool,
) -> Result<StreamOutput> {
    Ok(StreamOutput {
        dii: extract_dii(image, mask, shift_and_clip)?,
        spi: make_spi(image, mask, seed)?,
        noise_seed: seed,
    })
}

/// Per-image per-epoch seed derivation (splitmix64 over the mixed inputs).
pub fn derive_seed(master: u64, epoch: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
