//! Single-query retrieval evaluation: feature extraction from original
//! images, cosine ranking with the standard junk rule, and mAP/CMC reports.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::imageio::{load_image, resize};
use crate::data::manifest::Dataset;
use crate::encoders::encode_image_one;
use crate::error::{Error, Result};
use crate::nn::Graph;
use crate::trainer::{load_checkpoint, TrainConfig};

pub const FEATURE_MAGIC: [u8; 4] = *b"STRF";
pub const DEFAULT_MAX_RANK: usize = 20;

/// Unit-normalized features with their original (raw) labels.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub features: Array2<f64>,
    pub identities: Vec<i64>,
    pub cameras: Vec<Option<i64>>,
    /// Images that failed to load and were skipped.
    pub skipped: usize,
}

/// One query's ranking outcome.
#[derive(Debug, Clone)]
pub struct RankingResult {
    pub query_index: usize,
    pub ordered_gallery: Vec<usize>,
    pub ap: f64,
    /// 1-based rank of the first correct match.
    pub first_match_rank: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub map: f64,
    /// cmc[r - 1] = fraction of queries with first match at rank <= r.
    pub cmc: Vec<f64>,
    pub num_queries: usize,
    /// Queries with no admissible positive, excluded from the averages.
    pub dropped_queries: usize,
    pub protocol: String,
}

/// Encodes every readable image in the dataset with the checkpointed image
/// encoder. Original images only; no spectral preprocessing. Returns the
/// checkpoint config and whether a stage-1 checkpoint was supplied.
pub fn extract_features(
    checkpoint: &Path,
    dataset: &Dataset,
) -> Result<(FeatureSet, TrainConfig, bool)> {
    let (stage, cfg, store) = load_checkpoint(checkpoint)?;
    let stage1_warning = match stage {
        2 => false,
        1 => true,
        other => {
            return Err(Error::validation(format!(
                "checkpoint {} carries unknown stage tag {other}",
                checkpoint.display()
            )))
        }
    };
    let size = cfg.encoder.image_size;
    let mut rows = Vec::new();
    let mut identities = Vec::new();
    let mut cameras = Vec::new();
    let mut skipped = 0usize;
    for rec in &dataset.records {
        let img = match load_image(&rec.path) {
            Ok(i) => resize(&i, size, size),
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let mut g = Graph::new(&store);
        let f = encode_image_one(&mut g, &cfg.encoder, &img)?;
        let row = g.tape.value(f).row(0).to_owned();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 0.0 || !norm.is_finite() {
            return Err(Error::runtime(format!(
                "degenerate feature for {}",
                rec.path.display()
            )));
        }
        rows.push(row.mapv(|v| v / norm));
        identities.push(rec.raw_id);
        cameras.push(rec.raw_camera);
    }
    if rows.is_empty() {
        return Err(Error::validation("no readable images in the manifest"));
    }
    let dim = rows[0].len();
    let mut features = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        features.row_mut(i).assign(r);
    }
    Ok((
        FeatureSet {
            features,
            identities,
            cameras,
            skipped,
        },
        cfg,
        stage1_warning,
    ))
}

/// Ranks one query against the gallery. Gallery entries sharing both the
/// query's identity and camera are junk and excluded when both camera labels
/// exist. Returns `None` when no admissible positive remains.
pub fn rank_query(
    query_index: usize,
    query: ArrayView1<f64>,
    query_id: i64,
    query_cam: Option<i64>,
    gallery: &FeatureSet,
) -> Option<RankingResult> {
    let mut scored: Vec<(usize, f64)> = Vec::new();
    for (gi, grow) in gallery.features.rows().into_iter().enumerate() {
        let junk = gallery.identities[gi] == query_id
            && matches!((query_cam, gallery.cameras[gi]), (Some(a), Some(b)) if a == b);
        if junk {
            continue;
        }
        let sim: f64 = query.iter().zip(grow).map(|(a, b)| a * b).sum();
        scored.push((gi, sim));
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let ordered_gallery: Vec<usize> = scored.iter().map(|&(i, _)| i).collect();
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    let mut first_match_rank = None;
    for (rank0, &gi) in ordered_gallery.iter().enumerate() {
        if gallery.identities[gi] == query_id {
            hits += 1;
            precision_sum += hits as f64 / (rank0 + 1) as f64;
            first_match_rank.get_or_insert(rank0 + 1);
        }
    }
    first_match_rank.map(|r| RankingResult {
        query_index,
        ordered_gallery,
        ap: precision_sum / hits as f64,
        first_match_rank: r,
    })
}

/// Aggregates rankings into mAP and the CMC curve at ranks 1..=max_rank.
pub fn compute_report(
    rankings: &[RankingResult],
    dropped_queries: usize,
    max_rank: usize,
    protocol: &str,
) -> Result<EvalReport> {
    if rankings.is_empty() {
        return Err(Error::validation(
            "no valid queries (every query lacked an admissible positive)",
        ));
    }
    let n = rankings.len() as f64;
    let map = rankings.iter().map(|r| r.ap).sum::<f64>() / n;
    let cmc = (1..=max_rank)
        .map(|r| {
            rankings.iter().filter(|q| q.first_match_rank <= r).count() as f64 / n
        })
        .collect();
    Ok(EvalReport {
        map,
        cmc,
        num_queries: rankings.len(),
        dropped_queries,
        protocol: protocol.to_string(),
    })
}

/// Full single-query protocol over two feature sets.
pub fn evaluate(
    query: &FeatureSet,
    gallery: &FeatureSet,
    max_rank: usize,
) -> Result<EvalReport> {
    let mut rankings = Vec::new();
    let mut dropped = 0usize;
    for (qi, qrow) in query.features.rows().into_iter().enumerate() {
        match rank_query(qi, qrow, query.identities[qi], query.cameras[qi], gallery) {
            Some(r) => rankings.push(r),
            None => dropped += 1,
        }
    }
    compute_report(&rankings, dropped, max_rank, "single-query")
}

/// Subsampled-gallery preset: `trials` random galleries of `size` entries
/// (at most one image per identity each), metrics averaged across trials.
pub fn evaluate_subsampled(
    query: &FeatureSet,
    gallery: &FeatureSet,
    size: usize,
    trials: usize,
    max_rank: usize,
    seed: u64,
) -> Result<EvalReport> {
    if size == 0 || trials == 0 {
        return Err(Error::validation("subsample size and trials must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc: Option<EvalReport> = None;
    for _ in 0..trials {
        // One random representative per identity, then a random subset.
        let mut per_id: std::collections::BTreeMap<i64, Vec<usize>> = Default::default();
        for (i, &id) in gallery.identities.iter().enumerate() {
            per_id.entry(id).or_default().push(i);
        }
        let mut picks: Vec<usize> = per_id
            .values()
            .map(|v| v[rand::Rng::gen_range(&mut rng, 0..v.len())])
            .collect();
        picks.shuffle(&mut rng);
        picks.truncate(size);
        picks.sort_unstable();
        let sub = FeatureSet {
            features: {
                let mut m = Array2::zeros((picks.len(), gallery.features.ncols()));
                for (r, &i) in picks.iter().enumerate() {
                    m.row_mut(r).assign(&gallery.features.row(i));
                }
                m
            },
            identities: picks.iter().map(|&i| gallery.identities[i]).collect(),
            cameras: picks.iter().map(|&i| gallery.cameras[i]).collect(),
            skipped: 0,
        };
        let rep = evaluate(query, &sub, max_rank)?;
        acc = Some(match acc {
            None => rep,
            Some(mut a) => {
                a.map += rep.map;
                for (c, r) in a.cmc.iter_mut().zip(&rep.cmc) {
                    *c += r;
                }
                a
            }
        });
    }
    let mut rep = acc.expect("trials >= 1");
    rep.map /= trials as f64;
    for c in rep.cmc.iter_mut() {
        *c /= trials as f64;
    }
    rep.protocol = format!("subsampled-gallery(size={size}, trials={trials})");
    Ok(rep)
}

/// Saves a feature set: header, raw labels, then row-major f64 features.
pub fn save_features(path: &Path, set: &FeatureSet) -> Result<()> {
    let (n, d) = set.features.dim();
    let mut buf = Vec::with_capacity(16 + n * (d * 8 + 17));
    buf.extend_from_slice(&FEATURE_MAGIC);
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.extend_from_slice(&(d as u64).to_le_bytes());
    for i in 0..n {
        buf.extend_from_slice(&set.identities[i].to_le_bytes());
        match set.cameras[i] {
            Some(c) => {
                buf.push(1);
                buf.extend_from_slice(&c.to_le_bytes());
            }
            None => {
                buf.push(0);
                buf.extend_from_slice(&0i64.to_le_bytes());
            }
        }
        for v in set.features.row(i) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path) -> Result<FeatureSet> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let corrupt = || Error::validation(format!("feature file {} unreadable", path.display()));
    if bytes.len() < 20 || bytes[..4] != FEATURE_MAGIC {
        return Err(corrupt());
    }
    let n = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let rec = 8 + 9 + d * 8;
    if bytes.len() != 20 + n * rec {
        return Err(corrupt());
    }
    let mut features = Array2::zeros((n, d));
    let mut identities = Vec::with_capacity(n);
    let mut cameras = Vec::with_capacity(n);
    for i in 0..n {
        let at = 20 + i * rec;
        identities.push(i64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()));
        let has_cam = bytes[at + 8] != 0;
        let cam = i64::from_le_bytes(bytes[at + 9..at + 17].try_into().unwrap());
        cameras.push(has_cam.then_some(cam));
        for j in 0..d {
            let o = at + 17 + j * 8;
            features[(i, j)] = f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        }
    }
    Ok(FeatureSet {
        features,
        identities,
        cameras,
        skipped: 0,
    })
}
