//! The two stage loops. Stage 1 trains MEKA and the prompt set on
//! domain-invariant images with both encoders frozen; stage 2 trains the
//! image encoder, the ID classifier, and the MoE teacher on style-perturbed
//! images with the text side and MEKA frozen.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array3};

use super::{lr_schedule, save_checkpoint, load_checkpoint, TrainConfig};
use crate::data::augment::{augment, AugmentConfig};
use crate::data::imageio::{load_image, resize};
use crate::data::manifest::Dataset;
use crate::data::sampler::{label_batch, PkSampler};
use crate::encoders::{
    encode_image_batch, encode_image_one, encode_prompts_for_expert, init_dual_encoder,
    init_prompts,
};
use crate::error::{Error, Result};
use crate::meka::{self, MekaConfig};
use crate::moe::{self, MoeConfig};
use crate::nn::layers::{init_linear, linear};
use crate::nn::{AdamW, Arr, Graph, ParamStore, Var};
use crate::objectives::{
    loss_id, loss_t2v, loss_v2t, loss_v2tce, stage1_total, stage2_total, LossReport,
};
use crate::spectral::{build_mask, derive_seed, extract_dii, make_spi};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Loss reports in step order plus bookkeeping, returned by both stages.
pub struct TrainOutcome {
    pub reports: Vec<LossReport>,
    pub steps: usize,
}

fn log_step(
    log: &mut Option<&mut dyn Write>,
    stage: u8,
    step: usize,
    lr: f64,
    report: &LossReport,
    wall: Instant,
) -> Result<()> {
    if let Some(w) = log {
        let line = serde_json::json!({
            "stage": stage,
            "step": step,
            "lr": lr,
            "losses": report.components,
            "total": report.weighted_total,
            "wall_ms": wall.elapsed().as_millis() as u64,
        });
        writeln!(w, "{line}").map_err(|e| Error::runtime(format!("step log write failed: {e}")))?;
    }
    Ok(())
}

fn check_finite(report: &LossReport, indices: &[usize]) -> Result<()> {
    if report.weighted_total.is_finite() && report.components.values().all(|v| v.is_finite()) {
        return Ok(());
    }
    Err(Error::runtime(format!(
        "non-finite loss {:?} on batch indices {:?}",
        report.components, indices
    )))
}

fn load_resized(path: &Path, size: usize) -> Result<Array3<f64>> {
    Ok(resize(&load_image(path)?, size, size))
}

fn assert_frozen(store: &ParamStore, prefix: &str, expected: u64, stage: u8) -> Result<()> {
    let got = store.hash_prefix(prefix);
    if got != expected {
        return Err(Error::runtime(format!(
            "freeze contract violated in stage {stage}: parameter group {prefix:?} changed \
             (hash {expected:016x} -> {got:016x})"
        )));
    }
    Ok(())
}

/// Stage 1: frozen dual encoder, trainable MEKA + prompts, DII inputs.
pub fn train_stage1(
    cfg: &TrainConfig,
    dataset: &Dataset,
    out: &Path,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let use_camera = cfg.lambda1 > 0.0;
    if use_camera {
        if let Some(r) = dataset.records.iter().find(|r| r.camera.is_none()) {
            return Err(Error::validation(format!(
                "camera loss enabled (lambda1 = {}) but {} has no camera label; \
                 set lambda1 = 0 for camera-free manifests",
                cfg.lambda1,
                r.path.display()
            )));
        }
    }
    let wall = Instant::now();
    let size = cfg.encoder.image_size;
    let mask = build_mask(size, size, cfg.mask)?;

    let mut store = ParamStore::new();
    init_dual_encoder(&mut store, &cfg.encoder, cfg.seed)?;
    init_prompts(&mut store, &cfg.encoder, dataset.num_ids, cfg.experts, cfg.seed);
    let meka_cfg = MekaConfig {
        experts: cfg.experts,
        feature_dim: cfg.encoder.dim,
        num_cameras: dataset.num_cameras.max(1),
    };
    meka::init_meka(&mut store, &meka_cfg, cfg.seed)?;
    store.set_trainable_prefix("", false);
    store.set_trainable_prefix("meka.", true);
    store.set_trainable_prefix("prompt.", true);

    // The encoder is frozen and DII is deterministic, so image features are
    // computed once up front.
    let features = {
        let mut rows = Array2::<f64>::zeros((dataset.records.len(), cfg.encoder.dim));
        let g_store = &store;
        for (i, rec) in dataset.records.iter().enumerate() {
            let img = load_resized(&rec.path, size)?;
            let input = if cfg.stream {
                extract_dii(&img, &mask, true)?
            } else {
                img
            };
            let mut g = Graph::new(g_store);
            let f = encode_image_one(&mut g, &cfg.encoder, &input)?;
            rows.row_mut(i).assign(&g.tape.value(f).row(0));
        }
        rows
    };

    let img_hash = store.hash_prefix("img.");
    let txt_hash = store.hash_prefix("txt.");
    let sampler = PkSampler::new(dataset, cfg.p, cfg.m, cfg.seed)?;
    let total_steps = cfg.epochs_stage1 * sampler.batches_per_epoch();
    let mut opt = AdamW::new(store.trainable_names(), cfg.weight_decay);
    let mut reports = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs_stage1 {
        for mut batch in sampler.epoch_batches(epoch) {
            label_batch(dataset, &mut batch);
            let lr = lr_schedule(step, total_steps, cfg);
            let grads;
            let report;
            {
                let mut g = Graph::new(&store);
                let mut feats = Array2::<f64>::zeros((batch.indices.len(), cfg.encoder.dim));
                for (r, &i) in batch.indices.iter().enumerate() {
                    feats.row_mut(r).assign(&features.row(i));
                }
                let fv = g.tape.leaf(feats);
                let bundle = meka::expert_forward(&mut g, &meka_cfg, fv);
                let ec = meka::loss_ec(&mut g, &bundle);
                let rc = meka::loss_rc(&mut g, &bundle, fv);
                let al = meka::loss_al(&mut g, &bundle)?;
                let cc = if use_camera {
                    Some(meka::loss_cc(&mut g, &bundle, &batch.cameras)?)
                } else {
                    None
                };
                let (meka_total, meka_report) = meka::loss_meka(
                    &mut g,
                    ec,
                    cc,
                    rc,
                    al,
                    (cfg.lambda1, cfg.lambda2, cfg.lambda3),
                );
                let text: Vec<Var> = (0..cfg.experts)
                    .map(|k| {
                        encode_prompts_for_expert(
                            &mut g,
                            &cfg.encoder,
                            dataset.num_ids,
                            cfg.experts,
                            k,
                        )
                    })
                    .collect::<Result<_>>()?;
                let scale = cfg.encoder.logit_scale;
                let v2t = loss_v2t(&mut g, &bundle.latents, &text, &batch.identities, scale)?;
                let t2v = loss_t2v(&mut g, &bundle.latents, &text, &batch.identities, scale)?;
                let (total, rep) = stage1_total(&mut g, &meka_report, meka_total, v2t, t2v);
                check_finite(&rep, &batch.indices)?;
                g.tape.backward(total);
                grads = g.param_grads();
                report = rep;
            }
            opt.step(&mut store, &grads, lr);
            log_step(&mut log, 1, step, lr, &report, wall)?;
            reports.push(report);
            step += 1;
        }
        assert_frozen(&store, "img.", img_hash, 1)?;
        assert_frozen(&store, "txt.", txt_hash, 1)?;
    }
    save_checkpoint(out, 1, cfg, &store)?;
    Ok(TrainOutcome {
        reports,
        steps: step,
    })
}

/// Frozen per-expert text features (and their expert-mean) from a store.
pub fn frozen_text_features(
    store: &ParamStore,
    cfg: &TrainConfig,
    num_ids: usize,
) -> Result<(Vec<Arr>, Arr)> {
    let mut g = Graph::new(store);
    let mut text = Vec::with_capacity(cfg.experts);
    for k in 0..cfg.experts {
        let t = encode_prompts_for_expert(&mut g, &cfg.encoder, num_ids, cfg.experts, k)?;
        text.push(g.tape.value(t).clone());
    }
    let mut pooled = Arr::zeros((num_ids, cfg.encoder.dim));
    for t in &text {
        pooled += t;
    }
    pooled /= cfg.experts as f64;
    Ok((text, pooled))
}

/// Stage 2: trainable image encoder + ID head + MoE teacher, SPI inputs,
/// text side and MEKA frozen.
pub fn train_stage2(
    cfg: &TrainConfig,
    dataset: &Dataset,
    stage1_ckpt: &Path,
    out: &Path,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (stage, ckpt_cfg, mut store) = load_checkpoint(stage1_ckpt)?;
    if stage != 1 {
        return Err(Error::validation(format!(
            "stage-2 training needs a stage-1 checkpoint; {} carries stage tag {stage}",
            stage1_ckpt.display()
        )));
    }
    if ckpt_cfg.encoder != cfg.encoder || ckpt_cfg.experts != cfg.experts {
        return Err(Error::validation(
            "config mismatch: encoder/expert settings differ from the stage-1 checkpoint",
        ));
    }
    let expected_prompt_rows = dataset.num_ids * cfg.experts * cfg.encoder.prompt_len;
    if store.get("prompt.tokens")?.value.nrows() != expected_prompt_rows {
        return Err(Error::validation(
            "identity count mismatch between manifest and stage-1 prompts",
        ));
    }
    let wall = Instant::now();
    let size = cfg.encoder.image_size;
    let mask = build_mask(size, size, cfg.mask)?;
    let d = cfg.encoder.dim;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1dea);
    init_linear(&mut store, &mut rng, "id_head", d, dataset.num_ids);
    let moe_cfg = MoeConfig {
        experts: cfg.experts,
        feature_dim: d,
        num_ids: dataset.num_ids,
    };
    moe::init_moe(&mut store, &moe_cfg, cfg.seed)?;
    store.set_trainable_prefix("", false);
    store.set_trainable_prefix("img.", true);
    store.set_trainable_prefix("id_head", true);
    store.set_trainable_prefix("moe.", true);

    let (text, text_pooled) = frozen_text_features(&store, cfg, dataset.num_ids)?;

    let raw_images: Vec<Array3<f64>> = dataset
        .records
        .iter()
        .map(|r| load_image(&r.path))
        .collect::<Result<_>>()?;
    let aug_cfg = AugmentConfig {
        size,
        crop_pad: (size / 10).max(2),
        ..AugmentConfig::default()
    };

    let txt_hash = store.hash_prefix("txt.");
    let prompt_hash = store.hash_prefix("prompt.");
    let meka_hash = store.hash_prefix("meka.");
    let sampler = PkSampler::new(dataset, cfg.p, cfg.m, cfg.seed ^ 0x57a2)?;
    let total_steps = cfg.epochs_stage2 * sampler.batches_per_epoch();
    let mut opt = AdamW::new(store.trainable_names(), cfg.weight_decay);
    let mut reports = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs_stage2 {
        for mut batch in sampler.epoch_batches(epoch) {
            label_batch(dataset, &mut batch);
            let lr = lr_schedule(step, total_steps, cfg);
            // Augment, then perturb the spectrum with fresh noise per epoch.
            let mut inputs = Vec::with_capacity(batch.indices.len());
            for &i in &batch.indices {
                let aug = augment(
                    &raw_images[i],
                    &aug_cfg,
                    derive_seed(cfg.seed, epoch as u64, i as u64),
                );
                let img = if cfg.stream {
                    make_spi(&aug, &mask, derive_seed(cfg.seed ^ 0x5919, epoch as u64, i as u64))?
                } else {
                    aug
                };
                inputs.push(img);
            }
            let grads;
            let report;
            {
                let mut g = Graph::new(&store);
                let feats = encode_image_batch(&mut g, &cfg.encoder, &inputs)?;
                let z_s = linear(&mut g, feats, "id_head");
                let id = loss_id(&mut g, z_s, &batch.identities, cfg.label_smoothing);
                // Frozen MEKA encoders viewed live on the SPI features.
                let latents: Vec<Var> = (0..cfg.experts)
                    .map(|k| {
                        let lat = linear(&mut g, feats, &format!("meka.enc{k}"));
                        g.tape.row_normalize(lat)
                    })
                    .collect();
                let text_vars: Vec<Var> =
                    text.iter().map(|t| g.tape.constant(t.clone())).collect();
                let v2tce = loss_v2tce(
                    &mut g,
                    &latents,
                    &text_vars,
                    &batch.identities,
                    cfg.encoder.logit_scale,
                    cfg.label_smoothing,
                )?;
                let batch_text: Vec<Var> = text
                    .iter()
                    .map(|t| {
                        let tv = g.tape.constant(t.clone());
                        g.tape.gather_rows(tv, &batch.identities)
                    })
                    .collect();
                let pooled = {
                    let tv = g.tape.constant(text_pooled.clone());
                    g.tape.gather_rows(tv, &batch.identities)
                };
                let teacher =
                    moe::teacher_forward(&mut g, &moe_cfg, &latents, &batch_text, pooled)?;
                let dis = moe::distill_loss(&mut g, z_s, teacher.z_t, false);
                let (total, rep) =
                    stage2_total(&mut g, id, v2tce, dis, cfg.alpha1, cfg.alpha2);
                check_finite(&rep, &batch.indices)?;
                g.tape.backward(total);
                grads = g.param_grads();
                report = rep;
            }
            opt.step(&mut store, &grads, lr);
            log_step(&mut log, 2, step, lr, &report, wall)?;
            reports.push(report);
            step += 1;
        }
        assert_frozen(&store, "txt.", txt_hash, 2)?;
        assert_frozen(&store, "prompt.", prompt_hash, 2)?;
        assert_frozen(&store, "meka.", meka_hash, 2)?;
    }
    save_checkpoint(out, 2, cfg, &store)?;
    Ok(TrainOutcome {
        reports,
        steps: step,
    })
}

/// Mean pairwise expert-latent distance over a dataset's stage-1 features,
/// for the diversification audit.
pub fn latent_diversity(
    store: &ParamStore,
    cfg: &TrainConfig,
    dataset: &Dataset,
) -> Result<f64> {
    let size = cfg.encoder.image_size;
    let mask = build_mask(size, size, cfg.mask)?;
    let meka_cfg = MekaConfig {
        experts: cfg.experts,
        feature_dim: cfg.encoder.dim,
        num_cameras: dataset.num_cameras.max(1),
    };
    let mut rows = Array2::<f64>::zeros((dataset.records.len(), cfg.encoder.dim));
    for (i, rec) in dataset.records.iter().enumerate() {
        let img = load_resized(&rec.path, size)?;
        let input = if cfg.stream {
            extract_dii(&img, &mask, true)?
        } else {
            img
        };
        let mut g = Graph::new(store);
        let f = encode_image_one(&mut g, &cfg.encoder, &input)?;
        rows.row_mut(i).assign(&g.tape.value(f).row(0));
    }
    Ok(meka::mean_pairwise_latent_distance(store, &meka_cfg, &rows))
}
