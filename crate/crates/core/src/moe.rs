//! Mixture-of-experts teacher: visual-textual fusion, expert gating, gated
//! teacher logits, and the KL distillation loss against the student head.
//!
//! The K expert tokens are a set, not a sequence, so the fusion blocks carry
//! no positional encoding; one self-attention block mixes the visual tokens,
//! one cross-attention block reads the text tokens, and the result is
//! mean-pooled into the fused feature F_C.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{cross_block, encoder_block, init_cross_block, init_encoder_block, init_linear, linear};
use crate::nn::{Arr, Graph, ParamStore, Var};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Attention heads inside the fusion blocks.
pub const FUSION_HEADS: usize = 2;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MoeConfig {
    pub experts: usize,
    pub feature_dim: usize,
    pub num_ids: usize,
}

/// Registers teacher parameters under "moe.".
pub fn init_moe(store: &mut ParamStore, cfg: &MoeConfig, seed: u64) -> Result<()> {
    if cfg.experts == 0 || cfg.feature_dim == 0 || cfg.num_ids == 0 {
        return Err(Error::validation("MoE config fields must be positive"));
    }
    if cfg.feature_dim % FUSION_HEADS != 0 {
        return Err(Error::validation(format!(
            "MoE feature dim {} not divisible by {FUSION_HEADS} attention heads",
            cfg.feature_dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x40e5);
    init_encoder_block(store, &mut rng, "moe.sa", cfg.feature_dim);
    init_cross_block(store, &mut rng, "moe.ca", cfg.feature_dim);
    for k in 0..cfg.experts {
        init_linear(store, &mut rng, &format!("moe.head{k}"), cfg.feature_dim, cfg.num_ids);
    }
    init_linear(store, &mut rng, "moe.gate", 2 * cfg.feature_dim, cfg.experts);
    Ok(())
}

/// Visual-textual fusion. `visual` and `text` hold one b x d matrix per
/// expert; per sample the K tokens run through self-attention, then
/// cross-attention against the text tokens, and mean-pool to F_C (b x d).
pub fn vtf_fuse(g: &mut Graph, visual: &[Var], text: &[Var]) -> Result<Var> {
    if visual.is_empty() || visual.len() != text.len() {
        return Err(Error::validation(format!(
            "vtf_fuse: visual carries {} expert tokens but text carries {}",
            visual.len(),
            text.len()
        )));
    }
    let b = g.tape.value(visual[0]).nrows();
    let mut pooled = Vec::with_capacity(b);
    for n in 0..b {
        let vrows: Vec<Var> = visual.iter().map(|&v| g.tape.gather_rows(v, &[n])).collect();
        let trows: Vec<Var> = text.iter().map(|&t| g.tape.gather_rows(t, &[n])).collect();
        let vseq = g.tape.concat_rows(&vrows);
        let tseq = g.tape.concat_rows(&trows);
        let sa = encoder_block(g, vseq, "moe.sa", FUSION_HEADS);
        let ca = cross_block(g, sa, tseq, "moe.ca", FUSION_HEADS);
        pooled.push(g.tape.mean_rows(ca));
    }
    Ok(g.tape.concat_rows(&pooled))
}

/// Gate weights: softmax over a linear map of [fused ; text_pooled].
pub fn gate(g: &mut Graph, fused: Var, text_pooled: Var) -> Var {
    let cat = g.tape.concat_cols(&[fused, text_pooled]);
    let logits = linear(g, cat, "moe.gate");
    g.tape.softmax(logits)
}

/// Gated teacher logits Z_t = sum_k G_k . m_k(F_C).
pub fn teacher_logits(g: &mut Graph, cfg: &MoeConfig, fused: Var, gate_weights: Var) -> Var {
    let ones = g.tape.constant(Arr::ones((1, cfg.num_ids)));
    let mut acc: Option<Var> = None;
    for k in 0..cfg.experts {
        let head = linear(g, fused, &format!("moe.head{k}"));
        let w_col = g.tape.slice_cols(gate_weights, k, 1);
        let w_full = g.tape.matmul(w_col, ones);
        let term = g.tape.mul(w_full, head);
        acc = Some(match acc {
            Some(a) => g.tape.add(a, term),
            None => term,
        });
    }
    acc.expect("at least one expert")
}

pub struct TeacherOutput {
    pub fused: Var,
    pub gate_weights: Var,
    pub z_t: Var,
}

pub fn teacher_forward(
    g: &mut Graph,
    cfg: &MoeConfig,
    visual: &[Var],
    text: &[Var],
    text_pooled: Var,
) -> Result<TeacherOutput> {
    let fused = vtf_fuse(g, visual, text)?;
    let gate_weights = gate(g, fused, text_pooled);
    let gw = g.tape.value(gate_weights);
    for row in gw.rows() {
        let s: f64 = row.sum();
        debug_assert!(row.iter().all(|&v| v >= 0.0) && (s - 1.0).abs() < 1e-6);
    }
    let z_t = teacher_logits(g, cfg, fused, gate_weights);
    Ok(TeacherOutput {
        fused,
        gate_weights,
        z_t,
    })
}

/// KL distillation between softmax-normalized logits, mean over the batch.
/// Default direction puts the student distribution on the left; `reversed`
/// swaps the arguments for ablation.
pub fn distill_loss(g: &mut Graph, z_s: Var, z_t: Var, reversed: bool) -> Var {
    let (left, right) = if reversed { (z_t, z_s) } else { (z_s, z_t) };
    let b = g.tape.value(left).nrows();
    let p = g.tape.softmax(left);
    let lp = g.tape.log_softmax(left);
    let lq = g.tape.log_softmax(right);
    let dlog = g.tape.sub(lp, lq);
    let terms = g.tape.mul(p, dlog);
    let total = g.tape.sum_all(terms);
    g.tape.scale(total, 1.0 / b as f64)
}
