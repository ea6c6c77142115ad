//! Contrastive, identity and visual-text-matching losses, plus the per-stage
//! aggregates and the loss report streamed to the training log.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Stage1,
    Stage2,
}

/// Named loss components with their weighted total.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub components: BTreeMap<String, f64>,
    pub weighted_total: f64,
    pub stage: Stage,
}

impl LossReport {
    pub fn get(&self, name: &str) -> f64 {
        self.components[name]
    }
}

/// One-hot target matrix as a constant tape node.
fn one_hot(g: &mut Graph, labels: &[usize], classes: usize) -> Var {
    let mut m = crate::nn::Arr::zeros((labels.len(), classes));
    for (r, &l) in labels.iter().enumerate() {
        m[(r, l)] = 1.0;
    }
    g.tape.constant(m)
}

/// Label-smoothed target matrix: (1 - eps) on the true class, eps / C elsewhere.
fn smoothed_targets(g: &mut Graph, labels: &[usize], classes: usize, eps: f64) -> Var {
    let mut m = crate::nn::Arr::from_elem((labels.len(), classes), eps / classes as f64);
    for (r, &l) in labels.iter().enumerate() {
        m[(r, l)] += 1.0 - eps;
    }
    g.tape.constant(m)
}

/// Mean cross-entropy of row-wise logits against hard labels.
pub fn cross_entropy_mean(g: &mut Graph, logits: Var, labels: &[usize]) -> Var {
    let classes = g.tape.value(logits).ncols();
    debug_assert_eq!(g.tape.value(logits).nrows(), labels.len());
    let lp = g.tape.log_softmax(logits);
    let t = one_hot(g, labels, classes);
    let picked = g.tape.mul(lp, t);
    let s = g.tape.sum_all(picked);
    g.tape.scale(s, -1.0 / labels.len() as f64)
}

/// Mean cross-entropy against label-smoothed targets.
pub fn cross_entropy_smoothed(g: &mut Graph, logits: Var, labels: &[usize], eps: f64) -> Var {
    let classes = g.tape.value(logits).ncols();
    let lp = g.tape.log_softmax(logits);
    let t = smoothed_targets(g, labels, classes, eps);
    let picked = g.tape.mul(lp, t);
    let s = g.tape.sum_all(picked);
    g.tape.scale(s, -1.0 / labels.len() as f64)
}

fn check_identities(identities: &[usize], num_ids: usize) -> Result<()> {
    if let Some(&bad) = identities.iter().find(|&&i| i >= num_ids) {
        return Err(Error::validation(format!(
            "batch identity {bad} has no prompt entry (table holds {num_ids} identities)"
        )));
    }
    Ok(())
}

/// Scaled similarity logits between unit-normalized rows of `a` and `b`.
fn similarity_logits(g: &mut Graph, a: Var, b: Var, logit_scale: f64) -> Var {
    let an = g.tape.row_normalize(a);
    let bn = g.tape.row_normalize(b);
    let bt = g.tape.transpose(bn);
    let s = g.tape.matmul(an, bt);
    g.tape.scale(s, logit_scale)
}

/// Visual-to-text contrastive loss, summed over experts, mean over the batch.
///
/// `latents[k]` is the b x d expert latent matrix, `text[k]` the N_id x d
/// text-feature matrix of expert k. The positive set P(y_n) includes the
/// anchor; with one text feature per identity the inner positive average
/// collapses to the anchor's own term.
pub fn loss_v2t(
    g: &mut Graph,
    latents: &[Var],
    text: &[Var],
    identities: &[usize],
    logit_scale: f64,
) -> Result<Var> {
    let num_ids = g.tape.value(text[0]).nrows();
    check_identities(identities, num_ids)?;
    let b = identities.len();
    let mut acc: Option<Var> = None;
    for (lat, txt) in latents.iter().zip(text) {
        let logits = similarity_logits(g, *lat, *txt, logit_scale);
        let lp = g.tape.log_softmax(logits);
        let t = one_hot(g, identities, num_ids);
        let picked = g.tape.mul(lp, t);
        let s = g.tape.sum_all(picked);
        let term = g.tape.scale(s, -1.0 / b as f64);
        acc = Some(match acc {
            Some(a) => g.tape.add(a, term),
            None => term,
        });
    }
    Ok(acc.expect("at least one expert"))
}

/// Text-to-visual contrastive loss: softmax over the batch images for each
/// identity text query, positives averaged per anchor.
pub fn loss_t2v(
    g: &mut Graph,
    latents: &[Var],
    text: &[Var],
    identities: &[usize],
    logit_scale: f64,
) -> Result<Var> {
    let num_ids = g.tape.value(text[0]).nrows();
    check_identities(identities, num_ids)?;
    let b = identities.len();
    // Weight of log p(f_p | T_y) summed over anchors n with y_n = y:
    // each anchor contributes 1/|P(y)| for each positive p, and there are
    // |P(y)| such anchors, so every (y_p, p) cell gets weight 1.
    let mut w = crate::nn::Arr::zeros((num_ids, b));
    for (p, &y) in identities.iter().enumerate() {
        w[(y, p)] = 1.0;
    }
    let mut acc: Option<Var> = None;
    for (lat, txt) in latents.iter().zip(text) {
        let logits = similarity_logits(g, *txt, *lat, logit_scale); // N_id x b
        let lp = g.tape.log_softmax(logits);
        let wv = g.tape.constant(w.clone());
        let picked = g.tape.mul(lp, wv);
        let s = g.tape.sum_all(picked);
        let term = g.tape.scale(s, -1.0 / b as f64);
        acc = Some(match acc {
            Some(a) => g.tape.add(a, term),
            None => term,
        });
    }
    Ok(acc.expect("at least one expert"))
}

/// Visual-text matching loss used in stage 2: per-expert identity
/// classification with the text features as class weights, smoothed targets,
/// averaged over experts and the batch.
pub fn loss_v2tce(
    g: &mut Graph,
    latents: &[Var],
    text: &[Var],
    identities: &[usize],
    logit_scale: f64,
    eps: f64,
) -> Result<Var> {
    let num_ids = g.tape.value(text[0]).nrows();
    check_identities(identities, num_ids)?;
    let k = latents.len();
    let mut acc: Option<Var> = None;
    for (lat, txt) in latents.iter().zip(text) {
        let logits = similarity_logits(g, *lat, *txt, logit_scale);
        let ce = cross_entropy_smoothed(g, logits, identities, eps);
        acc = Some(match acc {
            Some(a) => g.tape.add(a, ce),
            None => ce,
        });
    }
    let total = acc.expect("at least one expert");
    Ok(g.tape.scale(total, 1.0 / k as f64))
}

/// Identity loss on classifier logits with label smoothing.
pub fn loss_id(g: &mut Graph, logits: Var, identities: &[usize], eps: f64) -> Var {
    cross_entropy_smoothed(g, logits, identities, eps)
}

/// Stage-1 aggregate: MEKA total plus the two contrastive directions.
pub fn stage1_total(
    g: &mut Graph,
    meka_report: &LossReport,
    meka_total: Var,
    v2t: Var,
    t2v: Var,
) -> (Var, LossReport) {
    let s = g.tape.add(meka_total, v2t);
    let s = g.tape.add(s, t2v);
    let mut components = meka_report.components.clone();
    components.insert("L_v2t".into(), g.tape.scalar_value(v2t));
    components.insert("L_t2v".into(), g.tape.scalar_value(t2v));
    let report = LossReport {
        components,
        weighted_total: g.tape.scalar_value(s),
        stage: Stage::Stage1,
    };
    (s, report)
}

/// Stage-2 aggregate: alpha1 * L_ID + alpha2 * L_v2tce + L_dis.
pub fn stage2_total(
    g: &mut Graph,
    id_loss: Var,
    v2tce: Var,
    distill: Var,
    alpha1: f64,
    alpha2: f64,
) -> (Var, LossReport) {
    let a = g.tape.scale(id_loss, alpha1);
    let b = g.tape.scale(v2tce, alpha2);
    let s = g.tape.add(a, b);
    let s = g.tape.add(s, distill);
    let mut components = BTreeMap::new();
    components.insert("L_ID".into(), g.tape.scalar_value(id_loss));
    components.insert("L_v2tce".into(), g.tape.scalar_value(v2tce));
    components.insert("L_dis".into(), g.tape.scalar_value(distill));
    let report = LossReport {
        components,
        weighted_total: g.tape.scalar_value(s),
        stage: Stage::Stage2,
    };
    (s, report)
}
