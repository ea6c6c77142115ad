//! Multi-expert adversarial learning over the global image feature.
//!
//! K single-layer autoencoders map the feature into K latent perspectives;
//! a shared K-way discriminator keeps each perspective identifiable while
//! the adversarial loss pushes them apart. A camera head on a separate
//! learnable map supervises camera-specific structure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{init_linear, linear};
use crate::nn::{Graph, ParamStore, Var};
use crate::objectives::{cross_entropy_mean, LossReport, Stage};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MekaConfig {
    pub experts: usize,
    pub feature_dim: usize,
    pub num_cameras: usize,
}

/// Registers MEKA parameters under "meka.". Encoders and decoders start near
/// the identity so reconstruction is almost exact at step 0 and the
/// adversarial terms drive the early dynamics.
pub fn init_meka(store: &mut ParamStore, cfg: &MekaConfig, seed: u64) -> Result<()> {
    if cfg.experts < 2 {
        return Err(Error::validation(format!(
            "MEKA needs at least 2 experts (got {}); the adversarial normalizer K^2 - K vanishes",
            cfg.experts
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3e4a);
    let d = cfg.feature_dim;
    for k in 0..cfg.experts {
        store.init_near_identity(&format!("meka.enc{k}.w"), d, 0.01, &mut rng, true);
        store.init_zeros(&format!("meka.enc{k}.b"), (1, d), true);
        store.init_near_identity(&format!("meka.dec{k}.w"), d, 0.01, &mut rng, true);
        store.init_zeros(&format!("meka.dec{k}.b"), (1, d), true);
    }
    init_linear(store, &mut rng, "meka.disc", d, cfg.experts);
    store.init_near_identity("meka.cam_map.w", d, 0.01, &mut rng, true);
    store.init_zeros("meka.cam_map.b", (1, d), true);
    init_linear(store, &mut rng, "meka.cam_head", d, cfg.num_cameras);
    Ok(())
}

/// Forward products of the expert bank on a b x d feature batch.
pub struct ExpertBundle {
    /// Raw latents e_k(f), one b x d matrix per expert.
    pub latents: Vec<Var>,
    /// Unit-normalized latents, used for adversarial spread and similarity.
    pub latents_norm: Vec<Var>,
    /// Reconstructions h_k(e_k(f)).
    pub reconstructions: Vec<Var>,
    /// Discriminator logits D(e_k(f)), one b x K matrix per expert; row
    /// provenance fixes the perspective label to k.
    pub expert_logits: Vec<Var>,
    /// Camera logits D_g(e_g(f)), b x N_cam.
    pub camera_logits: Var,
}

pub fn expert_forward(g: &mut Graph, cfg: &MekaConfig, features: Var) -> ExpertBundle {
    let mut latents = Vec::with_capacity(cfg.experts);
    let mut latents_norm = Vec::with_capacity(cfg.experts);
    let mut reconstructions = Vec::with_capacity(cfg.experts);
    let mut expert_logits = Vec::with_capacity(cfg.experts);
    for k in 0..cfg.experts {
        let lat = linear(g, features, &format!("meka.enc{k}"));
        let rec = linear(g, lat, &format!("meka.dec{k}"));
        let logits = linear(g, lat, "meka.disc");
        latents_norm.push(g.tape.row_normalize(lat));
        latents.push(lat);
        reconstructions.push(rec);
        expert_logits.push(logits);
    }
    let cam_feat = linear(g, features, "meka.cam_map");
    let camera_logits = linear(g, cam_feat, "meka.cam_head");
    ExpertBundle {
        latents,
        latents_norm,
        reconstructions,
        expert_logits,
        camera_logits,
    }
}

/// Reconstruction loss: mean over experts and batch of the per-sample MSE.
pub fn loss_rc(g: &mut Graph, bundle: &ExpertBundle, features: Var) -> Var {
    let k = bundle.reconstructions.len();
    let mut acc: Option<Var> = None;
    for rec in &bundle.reconstructions {
        let diff = g.tape.sub(features, *rec);
        let sq = g.tape.mul(diff, diff);
        let mse = g.tape.mean_all(sq);
        acc = Some(match acc {
            Some(a) => g.tape.add(a, mse),
            None => mse,
        });
    }
    let total = acc.expect("at least one expert");
    g.tape.scale(total, 1.0 / k as f64)
}

/// Expert-perspective classification loss, mean over batch and experts.
pub fn loss_ec(g: &mut Graph, bundle: &ExpertBundle) -> Var {
    let k = bundle.expert_logits.len();
    let mut acc: Option<Var> = None;
    for (label, logits) in bundle.expert_logits.iter().enumerate() {
        let b = g.tape.value(*logits).nrows();
        let ce = cross_entropy_mean(g, *logits, &vec![label; b]);
        acc = Some(match acc {
            Some(a) => g.tape.add(a, ce),
            None => ce,
        });
    }
    let total = acc.expect("at least one expert");
    g.tape.scale(total, 1.0 / k as f64)
}

/// Adversarial spread loss on unit latents: negative mean pairwise squared
/// distance, normalized by K^2 - K. Bounded in [-4, 0].
pub fn loss_al(g: &mut Graph, bundle: &ExpertBundle) -> Result<Var> {
    let k = bundle.latents_norm.len();
    if k < 2 {
        return Err(Error::validation("loss_al requires K >= 2"));
    }
    let b = g.tape.value(bundle.latents_norm[0]).nrows();
    let mut acc: Option<Var> = None;
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let diff = g.tape.sub(bundle.latents_norm[i], bundle.latents_norm[j]);
            let sq = g.tape.mul(diff, diff);
            let s = g.tape.sum_all(sq);
            acc = Some(match acc {
                Some(a) => g.tape.add(a, s),
                None => s,
            });
        }
    }
    let total = acc.expect("K >= 2");
    Ok(g.tape.scale(total, -1.0 / ((k * k - k) as f64 * b as f64)))
}

/// Camera classification loss; requires camera labels on every sample.
pub fn loss_cc(g: &mut Graph, bundle: &ExpertBundle, cameras: &[Option<usize>]) -> Result<Var> {
    let labels: Vec<usize> = cameras
        .iter()
        .map(|c| {
            c.ok_or_else(|| {
                Error::validation(
                    "loss_cc: camera label absent; disable the camera loss (lambda1 = 0) \
                     for camera-free manifests",
                )
            })
        })
        .collect::<Result<_>>()?;
    Ok(cross_entropy_mean(g, bundle.camera_logits, &labels))
}

/// Weighted MEKA aggregate: L_EC + l1 * L_CC + l2 * L_RC + l3 * L_AL.
pub fn loss_meka(
    g: &mut Graph,
    ec: Var,
    cc: Option<Var>,
    rc: Var,
    al: Var,
    lambda: (f64, f64, f64),
) -> (Var, LossReport) {
    let (l1, l2, l3) = lambda;
    let mut total = ec;
    let cc_value = match cc {
        Some(cc) => {
            let w = g.tape.scale(cc, l1);
            total = g.tape.add(total, w);
            g.tape.scalar_value(cc)
        }
        None => 0.0,
    };
    let wrc = g.tape.scale(rc, l2);
    total = g.tape.add(total, wrc);
    let wal = g.tape.scale(al, l3);
    total = g.tape.add(total, wal);
    let report = LossReport {
        components: BTreeMap::from([
            ("L_EC".to_string(), g.tape.scalar_value(ec)),
            ("L_CC".to_string(), cc_value),
            ("L_RC".to_string(), g.tape.scalar_value(rc)),
            ("L_AL".to_string(), g.tape.scalar_value(al)),
        ]),
        weighted_total: g.tape.scalar_value(total),
        stage: Stage::Stage1,
    };
    (total, report)
}

/// Mean pairwise distance between unit expert latents, as a plain number;
/// used to verify that diversification engaged during training.
pub fn mean_pairwise_latent_distance(
    store: &ParamStore,
    cfg: &MekaConfig,
    features: &crate::nn::Arr,
) -> f64 {
    let mut g = Graph::new(store);
    let f = g.tape.leaf(features.clone());
    let bundle = expert_forward(&mut g, cfg, f);
    let k = cfg.experts;
    let b = features.nrows();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..k {
        for j in (i + 1)..k {
            let a = g.tape.value(bundle.latents_norm[i]);
            let c = g.tape.value(bundle.latents_norm[j]);
            for r in 0..b {
                let d2: f64 = a
                    .row(r)
                    .iter()
                    .zip(c.row(r))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                total += d2.sqrt();
            }
            pairs += b;
        }
    }
    total / pairs as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Arr;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(k: usize) -> MekaConfig {
        MekaConfig {
            experts: k,
            feature_dim: 4,
            num_cameras: 4,
        }
    }

    fn rand_arr(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Arr {
        Arr::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn k1_rejected_at_construction() {
        let mut store = ParamStore::new();
        assert!(init_meka(&mut store, &cfg(1), 0).is_err());
    }

    #[test]
    fn shapes_and_identity_init() {
        let mut store = ParamStore::new();
        let c = cfg(2);
        init_meka(&mut store, &c, 3).unwrap();
        // Exact identity weights: reconstruction error is zero.
        for k in 0..2 {
            let mut eye = Arr::eye(4);
            std::mem::swap(&mut store.get_mut(&format!("meka.enc{k}.w")).unwrap().value, &mut eye);
            let mut eye = Arr::eye(4);
            std::mem::swap(&mut store.get_mut(&format!("meka.dec{k}.w")).unwrap().value, &mut eye);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = rand_arr(&mut rng, 3, 4);
        let mut g = Graph::new(&store);
        let fv = g.tape.leaf(f.clone());
        let bundle = expert_forward(&mut g, &c, fv);
        assert_eq!(g.tape.value(bundle.latents[0]).dim(), (3, 4));
        assert_eq!(g.tape.value(bundle.expert_logits[1]).dim(), (3, 2));
        assert_eq!(g.tape.value(bundle.camera_logits).dim(), (3, 4));
        let rc = loss_rc(&mut g, &bundle, fv);
        assert!(g.tape.scalar_value(rc).abs() < 1e-12);
    }

    #[test]
    fn rc_constant_offset_is_one() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let f = g.tape.leaf(Arr::from_elem((3, 4), 0.2));
        let rec = g.tape.add_scalar(f, 1.0);
        let bundle = ExpertBundle {
            latents: vec![],
            latents_norm: vec![],
            reconstructions: vec![rec, rec],
            expert_logits: vec![],
            camera_logits: f,
        };
        let rc = loss_rc(&mut g, &bundle, f);
        assert!((g.tape.scalar_value(rc) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rc_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let store = ParamStore::new();
        for _ in 0..20 {
            let (b, k, d) = (4, 3, 5);
            let f = rand_arr(&mut rng, b, d);
            let recs: Vec<Arr> = (0..k).map(|_| rand_arr(&mut rng, b, d)).collect();
            let mut g = Graph::new(&store);
            let fv = g.tape.leaf(f.clone());
            let recvs: Vec<_> = recs.iter().map(|r| g.tape.leaf(r.clone())).collect();
            let bundle = ExpertBundle {
                latents: vec![],
                latents_norm: vec![],
                reconstructions: recvs,
                expert_logits: vec![],
                camera_logits: fv,
            };
            let rc = loss_rc(&mut g, &bundle, fv);
            let mut want = 0.0;
            for rec in &recs {
                for n in 0..b {
                    let mse: f64 = f
                        .row(n)
                        .iter()
                        .zip(rec.row(n))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        / d as f64;
                    want += mse / (b * k) as f64;
                }
            }
            assert!((g.tape.scalar_value(rc) - want).abs() < 1e-6);
        }
    }

    #[test]
    fn ec_uniform_logits_is_ln_k() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let logits = g.tape.leaf(Arr::zeros((5, 2)));
        let bundle = ExpertBundle {
            latents: vec![],
            latents_norm: vec![],
            reconstructions: vec![],
            expert_logits: vec![logits, logits],
            camera_logits: logits,
        };
        let ec = loss_ec(&mut g, &bundle);
        assert!((g.tape.scalar_value(ec) - 2.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn al_antipodal_is_minus_four_and_identical_is_zero() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let mut u = Arr::zeros((3, 4));
        for r in 0..3 {
            u[(r, r)] = 1.0;
        }
        let up = g.tape.leaf(u.clone());
        let un = g.tape.leaf(u.mapv(|v| -v));
        let bundle = ExpertBundle {
            latents: vec![],
            latents_norm: vec![up, un],
            reconstructions: vec![],
            expert_logits: vec![],
            camera_logits: up,
        };
        let al = loss_al(&mut g, &bundle).unwrap();
        assert!((g.tape.scalar_value(al) + 4.0).abs() < 1e-12);

        let same = ExpertBundle {
            latents: vec![],
            latents_norm: vec![up, up],
            reconstructions: vec![],
            expert_logits: vec![],
            camera_logits: up,
        };
        let al = loss_al(&mut g, &same).unwrap();
        assert_eq!(g.tape.scalar_value(al), 0.0);
    }

    #[test]
    fn al_matches_pairwise_loop_oracle_and_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let store = ParamStore::new();
        let (b, k, d) = (4, 3, 5);
        let lats: Vec<Arr> = (0..k)
            .map(|_| {
                let mut a = rand_arr(&mut rng, b, d);
                for mut row in a.rows_mut() {
                    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    row.mapv_inplace(|v| v / n);
                }
                a
            })
            .collect();
        let eval = |order: &[usize]| {
            let mut g = Graph::new(&store);
            let vars: Vec<_> = order.iter().map(|&i| g.tape.leaf(lats[i].clone())).collect();
            let bundle = ExpertBundle {
                latents: vec![],
                latents_norm: vars.clone(),
                reconstructions: vec![],
                expert_logits: vec![],
                camera_logits: vars[0],
            };
            let al = loss_al(&mut g, &bundle).unwrap();
            g.tape.scalar_value(al)
        };
        let got = eval(&[0, 1, 2]);
        let mut want = 0.0;
        for i in 0..k {
            for j in 0..k {
                if i == j {
                    continue;
                }
                for n in 0..b {
                    let d2: f64 = lats[i]
                        .row(n)
                        .iter()
                        .zip(lats[j].row(n))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    want -= d2 / ((k * k - k) as f64 * b as f64);
                }
            }
        }
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        assert!((got - eval(&[2, 0, 1])).abs() < 1e-12);
        assert!((-4.0..=0.0).contains(&got));
    }

    #[test]
    fn cc_uniform_is_ln_cams_and_missing_label_rejected() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let logits = g.tape.leaf(Arr::zeros((3, 4)));
        let bundle = ExpertBundle {
            latents: vec![],
            latents_norm: vec![],
            reconstructions: vec![],
            expert_logits: vec![],
            camera_logits: logits,
        };
        let cc = loss_cc(&mut g, &bundle, &[Some(0), Some(1), Some(2)]).unwrap();
        assert!((g.tape.scalar_value(cc) - 4.0f64.ln()).abs() < 1e-9);
        assert!(loss_cc(&mut g, &bundle, &[Some(0), None, Some(2)]).is_err());
    }

    #[test]
    fn meka_weighted_sum() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let one = g.tape.leaf(Arr::from_elem((1, 1), 1.0));
        let (total, report) = loss_meka(&mut g, one, Some(one), one, one, (0.1, 10.0, 0.2));
        assert!((g.tape.scalar_value(total) - 11.3).abs() < 1e-12);
        assert_eq!(report.get("L_RC"), 1.0);
        let zero = g.tape.leaf(Arr::zeros((1, 1)));
        let (total, _) = loss_meka(&mut g, zero, Some(zero), zero, zero, (0.1, 10.0, 0.2));
        assert_eq!(g.tape.scalar_value(total), 0.0);
    }

    #[test]
    fn rc_descends_under_optimization() {
        let mut store = ParamStore::new();
        let c = MekaConfig {
            experts: 2,
            feature_dim: 6,
            num_cameras: 2,
        };
        init_meka(&mut store, &c, 11).unwrap();
        // Perturb decoders so reconstruction starts clearly wrong.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for k in 0..2 {
            let p = store.get_mut(&format!("meka.dec{k}.w")).unwrap();
            p.value += &rand_arr(&mut rng, 6, 6);
        }
        let f = rand_arr(&mut rng, 4, 6);
        let mut opt = crate::nn::AdamW::new(store.trainable_names(), 0.0);
        let mut losses = Vec::new();
        for _ in 0..200 {
            let mut g = Graph::new(&store);
            let fv = g.tape.leaf(f.clone());
            let bundle = expert_forward(&mut g, &c, fv);
            let rc = loss_rc(&mut g, &bundle, fv);
            losses.push(g.tape.scalar_value(rc));
            g.tape.backward(rc);
            let grads = g.param_grads();
            opt.step(&mut store, &grads, 1e-2);
        }
        assert!(losses.last().unwrap() < &(losses[0] * 0.1));
        // Broadly monotone: the tail is below the head.
        let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = losses[180..].iter().sum::<f64>() / 20.0;
        assert!(tail < head);
    }

    #[test]
    fn ec_positional_labels_not_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let store = ParamStore::new();
        let a = rand_arr(&mut rng, 3, 2);
        let b = rand_arr(&mut rng, 3, 2);
        let eval = |first: &Arr, second: &Arr| {
            let mut g = Graph::new(&store);
            let fv = g.tape.leaf(first.clone());
            let sv = g.tape.leaf(second.clone());
            let bundle = ExpertBundle {
                latents: vec![],
                latents_norm: vec![],
                reconstructions: vec![],
                expert_logits: vec![fv, sv],
                camera_logits: fv,
            };
            let ec = loss_ec(&mut g, &bundle);
            g.tape.scalar_value(ec)
        };
        assert!((eval(&a, &b) - eval(&b, &a)).abs() > 1e-9);
    }
}
