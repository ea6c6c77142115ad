//! Dual image/text encoder with a built-in desk-scale backbone, plus the
//! learnable per-(identity, expert) prompt set.
//!
//! The image side is a small patch transformer (patch 8, 4 blocks); the text
//! side a 2-block transformer over a 77-slot token sequence built from a
//! fixed scaffold ("a photo of a <slots> vehicle .") around the learnable
//! prompt slots. Both share the embedding width `dim`. External pretrained
//! weights can replace either side through the checkpoint loader as long as
//! they use the same parameter names and shapes.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{encoder_block, init_encoder_block, init_layer_norm, init_linear, layer_norm, linear};
use crate::nn::{Graph, ParamStore, Var};

/// Vocabulary for the fixed prompt scaffold.
const VOCAB: &[&str] = &["<pad>", "<bos>", "<eos>", "a", "photo", "of", "vehicle", "."];
const PAD: usize = 0;
const BOS: usize = 1;
const EOS: usize = 2;
/// Token ids before the learnable slots: "<bos> a photo of a".
const PREFIX: [usize; 5] = [BOS, 3, 4, 5, 3];
/// Token ids after the slots: "vehicle . <eos>".
const SUFFIX: [usize; 3] = [6, 7, EOS];
pub const TEXT_SEQ_LEN: usize = 77;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub image_blocks: usize,
    pub text_blocks: usize,
    /// L: learnable context slots per (identity, expert).
    pub prompt_len: usize,
    /// Fixed contrastive temperature (1 / 0.07), frozen in both stages.
    pub logit_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 48,
            patch: 8,
            dim: 64,
            heads: 4,
            image_blocks: 4,
            text_blocks: 2,
            prompt_len: 4,
            logit_scale: 1.0 / 0.07,
        }
    }
}

impl EncoderConfig {
    pub fn tokens_per_image(&self) -> usize {
        let side = self.image_size / self.patch;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * crate::data::CHANNELS
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % self.patch != 0 {
            return Err(Error::validation(format!(
                "image_size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::validation("dim must be divisible by heads"));
        }
        let fixed = PREFIX.len() + SUFFIX.len();
        if fixed + self.prompt_len > TEXT_SEQ_LEN {
            return Err(Error::validation("prompt_len too large for the token sequence"));
        }
        Ok(())
    }
}

/// Registers image-encoder ("img.*"), text-encoder ("txt.*") and temperature
/// parameters with the given seed.
pub fn init_dual_encoder(store: &mut ParamStore, cfg: &EncoderConfig, seed: u64) -> Result<()> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.dim;
    init_linear(store, &mut rng, "img.embed", cfg.patch_dim(), d);
    store.init_gaussian("img.pos", (cfg.tokens_per_image(), d), 0.02, &mut rng, true);
    for b in 0..cfg.image_blocks {
        init_encoder_block(store, &mut rng, &format!("img.block{b}"), d);
    }
    init_layer_norm(store, "img.ln_final", d);

    store.init_gaussian("txt.tok", (VOCAB.len(), d), 0.02, &mut rng, true);
    store.init_gaussian("txt.pos", (TEXT_SEQ_LEN, d), 0.02, &mut rng, true);
    for b in 0..cfg.text_blocks {
        init_encoder_block(store, &mut rng, &format!("txt.block{b}"), d);
    }
    init_layer_norm(store, "txt.ln_final", d);

    store.insert(
        "logit_scale",
        Array2::from_elem((1, 1), cfg.logit_scale),
        false,
    );
    Ok(())
}

/// Registers the prompt table: N_id * K * L learnable slot embeddings.
pub fn init_prompts(store: &mut ParamStore, cfg: &EncoderConfig, num_ids: usize, experts: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    store.init_gaussian(
        "prompt.tokens",
        (num_ids * experts * cfg.prompt_len, cfg.dim),
        0.02,
        &mut rng,
        true,
    );
}

/// Splits an image into flattened patch rows (tokens x patch_dim).
pub fn patchify(cfg: &EncoderConfig, image: &Array3<f64>) -> Result<Array2<f64>> {
    let (c, h, w) = image.dim();
    if h != cfg.image_size || w != cfg.image_size {
        return Err(Error::validation(format!(
            "encode_image expects {0}x{0} input, got {h}x{w}; resize first",
            cfg.image_size
        )));
    }
    let p = cfg.patch;
    let side = cfg.image_size / p;
    // Per-channel mean over this image; subtracting it keeps global
    // brightness/color shifts (which spectrum perturbation makes arbitrarily
    // large) out of the token stream, and rescaling keeps the remaining
    // contrast from being swamped by the positional embeddings.
    let mut ch_mean = vec![0.0f64; c];
    for (ch, m) in ch_mean.iter_mut().enumerate() {
        *m = image.index_axis(ndarray::Axis(0), ch).mean().unwrap_or(0.0);
    }
    let mut tokens = Array2::<f64>::zeros((side * side, cfg.patch_dim()));
    for ty in 0..side {
        for tx in 0..side {
            let row = ty * side + tx;
            let mut col = 0;
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        tokens[(row, col)] = (image[(ch, ty * p + dy, tx * p + dx)] - ch_mean[ch]) * 4.0;
                        col += 1;
                    }
                }
            }
        }
    }
    Ok(tokens)
}

/// Image feature for one image: 1 x dim (not normalized).
pub fn encode_image_one(g: &mut Graph, cfg: &EncoderConfig, image: &Array3<f64>) -> Result<Var> {
    let tokens = patchify(cfg, image)?;
    let t = g.tape.leaf(tokens);
    let mut x = linear(g, t, "img.embed");
    let pos = g.param("img.pos");
    x = g.tape.add(x, pos);
    for b in 0..cfg.image_blocks {
        x = encoder_block(g, x, &format!("img.block{b}"), cfg.heads);
    }
    let x = layer_norm(g, x, "img.ln_final");
    Ok(g.tape.mean_rows(x))
}

/// Image features for a batch: b x dim.
pub fn encode_image_batch(
    g: &mut Graph,
    cfg: &EncoderConfig,
    images: &[Array3<f64>],
) -> Result<Var> {
    let rows: Vec<Var> = images
        .iter()
        .map(|img| encode_image_one(g, cfg, img))
        .collect::<Result<_>>()?;
    Ok(g.tape.concat_rows(&rows))
}

/// Text feature for the (identity, expert) prompt: 1 x dim (not normalized).
pub fn encode_prompt(
    g: &mut Graph,
    cfg: &EncoderConfig,
    num_ids: usize,
    experts: usize,
    identity: usize,
    expert: usize,
) -> Result<Var> {
    if identity >= num_ids || expert >= experts {
        return Err(Error::validation(format!(
            "encode_prompt: (identity {identity}, expert {expert}) out of range ({num_ids} ids, {experts} experts)"
        )));
    }
    let l = cfg.prompt_len;
    let tok = g.param("txt.tok");
    let prompts = g.param("prompt.tokens");
    let prefix = g.tape.gather_rows(tok, &PREFIX);
    let slot_start = (identity * experts + expert) * l;
    let slots = g.tape.slice_rows(prompts, slot_start, l);
    let suffix = g.tape.gather_rows(tok, &SUFFIX);
    let pad_len = TEXT_SEQ_LEN - PREFIX.len() - l - SUFFIX.len();
    let pads = g.tape.gather_rows(tok, &vec![PAD; pad_len]);
    let seq = g.tape.concat_rows(&[prefix, slots, suffix, pads]);
    let pos = g.param("txt.pos");
    let mut x = g.tape.add(seq, pos);
    for b in 0..cfg.text_blocks {
        x = encoder_block(g, x, &format!("txt.block{b}"), cfg.heads);
    }
    let x = layer_norm(g, x, "txt.ln_final");
    let eos_pos = PREFIX.len() + l + SUFFIX.len() - 1;
    Ok(g.tape.slice_rows(x, eos_pos, 1))
}

/// Text features for all (identity, expert) pairs of one expert: N_id x dim.
pub fn encode_prompts_for_expert(
    g: &mut Graph,
    cfg: &EncoderConfig,
    num_ids: usize,
    experts: usize,
    expert: usize,
) -> Result<Var> {
    let rows: Vec<Var> = (0..num_ids)
        .map(|id| encode_prompt(g, cfg, num_ids, experts, id, expert))
        .collect::<Result<_>>()?;
    Ok(g.tape.concat_rows(&rows))
}

/// Scaled cosine similarity of two plain feature vectors.
pub fn similarity(v: &Array2<f64>, t: &Array2<f64>, logit_scale: f64) -> Result<f64> {
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nt = t.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nv == 0.0 || nt == 0.0 {
        return Err(Error::validation("similarity: zero-norm vector"));
    }
    if v.iter().chain(t.iter()).any(|x| !x.is_finite()) {
        return Err(Error::validation("similarity: non-finite input"));
    }
    let dot: f64 = v.iter().zip(t.iter()).map(|(a, b)| a * b).sum();
    Ok(logit_scale * dot / (nv * nt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;

    fn setup(cfg: &EncoderConfig) -> ParamStore {
        let mut store = ParamStore::new();
        init_dual_encoder(&mut store, cfg, 1234).unwrap();
        init_prompts(&mut store, cfg, 4, 2, 1234);
        store
    }

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            image_size: 16,
            patch: 8,
            dim: 16,
            heads: 2,
            image_blocks: 2,
            text_blocks: 1,
            prompt_len: 4,
            ..EncoderConfig::default()
        }
    }

    fn random_image(seed: u64, s: usize) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, s, s), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn image_batch_shape_and_duplicate_rows() {
        let cfg = small_cfg();
        let store = setup(&cfg);
        let img = random_image(5, 16);
        let other = random_image(6, 16);
        let mut g = Graph::new(&store);
        let f = encode_image_batch(&mut g, &cfg, &[img.clone(), other, img]).unwrap();
        let v = g.tape.value(f);
        assert_eq!(v.dim(), (3, 16));
        for c in 0..16 {
            assert_eq!(v[(0, c)], v[(2, c)]);
        }
    }

    #[test]
    fn resolution_mismatch_rejected() {
        let cfg = small_cfg();
        let store = setup(&cfg);
        let img = random_image(7, 24);
        let mut g = Graph::new(&store);
        assert!(encode_image_one(&mut g, &cfg, &img).is_err());
    }

    #[test]
    fn prompt_deterministic_and_range_checked() {
        let cfg = small_cfg();
        let store = setup(&cfg);
        let mut g = Graph::new(&store);
        let a = encode_prompt(&mut g, &cfg, 4, 2, 1, 0).unwrap();
        let b = encode_prompt(&mut g, &cfg, 4, 2, 1, 0).unwrap();
        assert_eq!(g.tape.value(a), g.tape.value(b));
        assert!(encode_prompt(&mut g, &cfg, 4, 2, 4, 0).is_err());
        assert!(encode_prompt(&mut g, &cfg, 4, 2, 0, 2).is_err());
    }

    #[test]
    fn prompts_differ_across_identity_and_expert() {
        let cfg = small_cfg();
        let store = setup(&cfg);
        let mut g = Graph::new(&store);
        let a = encode_prompt(&mut g, &cfg, 4, 2, 0, 0).unwrap();
        let c = encode_prompt(&mut g, &cfg, 4, 2, 0, 1).unwrap();
        let d = encode_prompt(&mut g, &cfg, 4, 2, 2, 0).unwrap();
        let av = g.tape.value(a).clone();
        assert_ne!(av, g.tape.value(c).clone());
        assert_ne!(av, g.tape.value(d).clone());
    }

    #[test]
    fn similarity_contract() {
        let v = Array2::from_shape_vec((1, 3), vec![0.6, 0.8, 0.0]).unwrap();
        let s = 1.0 / 0.07;
        assert!((similarity(&v, &v, s).unwrap() - s).abs() < 1e-9);
        let neg = v.mapv(|x| -x);
        assert!((similarity(&v, &neg, s).unwrap() + s).abs() < 1e-9);
        let scaled = v.mapv(|x| 3.7 * x);
        assert!((similarity(&v, &scaled, s).unwrap() - s).abs() < 1e-9);
        let zero = Array2::zeros((1, 3));
        assert!(similarity(&v, &zero, s).is_err());
    }

    #[test]
    fn feature_regression_hash_stable() {
        // Golden regression: fixed seed, fixed input, frozen first components.
        let cfg = small_cfg();
        let store = setup(&cfg);
        let img = Array3::from_shape_fn((3, 16, 16), |(c, y, x)| {
            (((c + 1) * (y + 2) * (x + 3)) % 11) as f64 / 10.0
        });
        let mut g = Graph::new(&store);
        let f = encode_image_one(&mut g, &cfg, &img).unwrap();
        let v = g.tape.value(f);
        let mut h: u64 = 0xcbf29ce484222325;
        for x in v.iter() {
            for b in x.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        // Captured at first build; any change to init or forward order shows here.
        let expected = golden_feature_hash();
        assert_eq!(h, expected, "feature hash drifted: {h:#x}");
    }

    fn golden_feature_hash() -> u64 {
        // Recorded from the first successful build of this backbone.
        GOLDEN_FEATURE_HASH
    }

    // Set by the initial capture run; see feature_regression_hash_stable.
    const GOLDEN_FEATURE_HASH: u64 = 0x48a52e0590d95b64;
}
