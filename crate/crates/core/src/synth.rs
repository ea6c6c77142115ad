//! Synthetic domain-shift dataset generator.
//!
//! Each identity is a glyph whose spectral content lives strictly in the
//! mid-frequency band the preprocessing mask treats as causal; each domain
//! style is a color cast plus smooth background and fine texture whose energy
//! lives strictly in the masked (non-causal) bands. Source and target splits
//! use disjoint styles, so cross-domain retrieval succeeds exactly when a
//! model keys on the causal band.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::imageio::{save_image, CHANNELS};
use crate::data::manifest::{write_manifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::spectral::{build_mask, dct2, derive_seed, idct2, MaskParams};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_ids: usize,
    pub num_cameras: usize,
    pub images_per_id_per_camera: usize,
    /// Source-domain style count; one extra held-out style renders the target.
    pub num_source_styles: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_ids: 8,
            num_cameras: 4,
            images_per_id_per_camera: 4,
            num_source_styles: 2,
            image_size: 32,
            seed: 7,
        }
    }
}

/// One domain style: global color cast plus seeded background/texture draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Style {
    pub color_cast: [f64; 3],
    pub pattern_seed: u64,
}

pub struct SynthOutput {
    pub source_manifest: PathBuf,
    pub query_manifest: PathBuf,
    pub gallery_manifest: PathBuf,
    pub source_images: usize,
    pub query_images: usize,
    pub gallery_images: usize,
}

/// Style parameters for style index `idx`; index `num_source_styles` is the
/// held-out target style.
pub fn style_params(spec: &SynthSpec, idx: usize) -> Style {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0x57e1, idx as u64));
    Style {
        color_cast: [
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
        ],
        pattern_seed: rng.gen(),
    }
}

fn band_cutoffs(size: usize) -> Result<(usize, usize)> {
    let mask = build_mask(size, size, MaskParams::default())?;
    let (v1, v2, _) = mask.cutoffs;
    Ok((v1, v2))
}

/// Glyph spectrum of one identity: a blocky pixel-space glyph projected onto
/// the causal mid band (v1 < max(i, j) <= v2). Shared across domains.
fn identity_spectrum(spec: &SynthSpec, id: usize, v1: usize, v2: usize) -> Array2<f64> {
    let n = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0x1de0, id as u64));
    let mut glyph = Array2::<f64>::zeros((n, n));
    // A handful of rectangles plus local marks makes each identity distinct.
    for _ in 0..6 {
        let y0 = rng.gen_range(0..n - 2);
        let x0 = rng.gen_range(0..n - 2);
        let h = rng.gen_range(2..=(n - y0).min(n / 2));
        let w = rng.gen_range(2..=(n - x0).min(n / 2));
        let v = rng.gen_range(-0.8..0.8);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                glyph[(y, x)] += v;
            }
        }
    }
    let mut spec2 = dct2(&glyph).expect("finite glyph");
    for i in 0..n {
        for j in 0..n {
            let r = i.max(j);
            if r <= v1 || r > v2 {
                spec2[(i, j)] = 0.0;
            }
        }
    }
    // Normalize the causal energy so every identity has comparable contrast.
    let norm = spec2.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
    spec2.mapv(|v| v / norm * 3.0)
}

/// Renders one image of `id` in `style`; `jitter_seed` drives the per-image
/// camera jitter inside the causal band.
pub fn render_image(
    spec: &SynthSpec,
    style: &Style,
    id: usize,
    jitter_seed: u64,
) -> Result<Array3<f64>> {
    let n = spec.image_size;
    let (v1, v2) = band_cutoffs(n)?;
    let ident = identity_spectrum(spec, id, v1, v2);
    let mut style_rng = ChaCha8Rng::seed_from_u64(style.pattern_seed);
    // Style spectra per channel: smooth background at r <= v1 and fine
    // texture at r > v2, nothing in the causal band.
    let mut style_spec = vec![Array2::<f64>::zeros((n, n)); CHANNELS];
    for s in style_spec.iter_mut() {
        for i in 0..n {
            for j in 0..n {
                let r = i.max(j);
                if r == 0 {
                    continue; // DC handled by the color cast
                } else if r <= v1 {
                    s[(i, j)] = style_rng.gen_range(-4.0..4.0);
                } else if r > v2 {
                    s[(i, j)] = style_rng.gen_range(-0.5..0.5);
                }
            }
        }
    }
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(jitter_seed);
    let mut jitter = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let r = i.max(j);
            if r > v1 && r <= v2 {
                jitter[(i, j)] = jitter_rng.gen_range(-0.06..0.06);
            }
        }
    }
    let mut out = Array3::<f64>::zeros((CHANNELS, n, n));
    for c in 0..CHANNELS {
        let mut total = &ident + &jitter + &style_spec[c];
        // Orthonormal DCT: a constant shift v appears at DC as v * n.
        total[(0, 0)] += (0.5 + style.color_cast[c]) * n as f64;
        let pix = idct2(&total)?;
        out.index_axis_mut(ndarray::Axis(0), c)
            .assign(&pix.mapv(|v| v.clamp(0.0, 1.0)));
    }
    Ok(out)
}

/// Writes the dataset tree and the three manifests under `root`.
pub fn generate(spec: &SynthSpec, root: &Path) -> Result<SynthOutput> {
    if spec.num_ids < 2 {
        return Err(Error::validation("synth dataset needs at least 2 identities"));
    }
    if spec.num_cameras == 0 || spec.images_per_id_per_camera == 0 || spec.num_source_styles == 0 {
        return Err(Error::validation(
            "cameras, images per id per camera and styles must be positive",
        ));
    }
    if spec.image_size < 8 {
        return Err(Error::validation("image_size must be at least 8"));
    }
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;

    let mut source = Vec::new();
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    let mut counts = (0usize, 0usize, 0usize);
    for id in 0..spec.num_ids {
        for cam in 0..spec.num_cameras {
            for s in 0..spec.images_per_id_per_camera {
                let uniq = ((id * spec.num_cameras + cam) * spec.images_per_id_per_camera + s) as u64;

                // Source: style varies with the camera.
                let style = style_params(spec, cam % spec.num_source_styles);
                let img = render_image(spec, &style, id, derive_seed(spec.seed, 0xca3, uniq))?;
                let rel = format!("source/{id:03}/{cam}_{s}.png");
                let path = root.join(&rel);
                std::fs::create_dir_all(path.parent().unwrap())
                    .map_err(|e| Error::io(&path, e))?;
                save_image(&path, &img)?;
                source.push(ManifestEntry {
                    path: rel,
                    id: id as i64,
                    camera: Some(cam as i64),
                    split: Split::Source,
                });
                counts.0 += 1;

                // Target: held-out per-camera styles, so cross-camera
                // retrieval inside the target is also cross-style; camera 0
                // becomes the query split.
                let target_style = style_params(spec, spec.num_source_styles + cam);
                let img = render_image(
                    spec,
                    &target_style,
                    id,
                    derive_seed(spec.seed, 0x7a9, uniq),
                )?;
                let sub = if cam == 0 { "target_query" } else { "target_gallery" };
                let rel = format!("{sub}/{id:03}/{cam}_{s}.png");
                let path = root.join(&rel);
                std::fs::create_dir_all(path.parent().unwrap())
                    .map_err(|e| Error::io(&path, e))?;
                save_image(&path, &img)?;
                let entry = ManifestEntry {
                    path: rel,
                    id: id as i64,
                    camera: Some(cam as i64),
                    split: Split::Target,
                };
                if cam == 0 {
                    query.push(entry);
                    counts.1 += 1;
                } else {
                    gallery.push(entry);
                    counts.2 += 1;
                }
            }
        }
    }
    let source_manifest = root.join("source.jsonl");
    let query_manifest = root.join("target_query.jsonl");
    let gallery_manifest = root.join("target_gallery.jsonl");
    write_manifest(&source_manifest, &source)?;
    write_manifest(&query_manifest, &query)?;
    write_manifest(&gallery_manifest, &gallery)?;
    Ok(SynthOutput {
        source_manifest,
        query_manifest,
        gallery_manifest,
        source_images: counts.0,
        query_images: counts.1,
        gallery_images: counts.2,
    })
}
