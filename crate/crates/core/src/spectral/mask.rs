//! Piecewise band-pass mask over DCT frequency indices.
//!
//! The mask selects the "non-causal" (domain-related) part of the spectrum:
//! close to 1 at the lowest frequencies, a small constant across the
//! identity-carrying band, and rising again toward the highest frequencies.
//! Position enters only through `r = max(i, j)` on zero-based indices with
//! the DC coefficient at (0, 0).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape parameters of the band-pass mask. Defaults are the reference
/// constants: c1=0.95, c2=0.3, band value 0.01, tail value 0.5 and cutoff
/// ratios (0.005, 0.7, 1.0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub c1: f64,
    pub c2: f64,
    pub m2_val: f64,
    pub m4_val: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            k1: 0.005,
            k2: 0.7,
            k3: 1.0,
            c1: 0.95,
            c2: 0.3,
            m2_val: 0.01,
            m4_val: 0.5,
        }
    }
}

/// A built mask: clamped weight grid plus the integer cutoffs it was built with.
#[derive(Debug, Clone)]
pub struct BandPassMask {
    pub weights: Array2<f64>,
    pub cutoffs: (usize, usize, usize),
    pub params: MaskParams,
}

impl BandPassMask {
    pub fn height(&self) -> usize {
        self.weights.nrows()
    }

    pub fn width(&self) -> usize {
        self.weights.ncols()
    }

    /// Piecewise value at (i, j) before clamping to [0, 1].
    pub fn analytic_unclamped(&self, i: usize, j: usize) -> f64 {
        let (v1, v2, v3) = self.cutoffs;
        let r = i.max(j);
        let rf = r as f64;
        let p = &self.params;
        if r <= v1 {
            1.0 - (p.c1 / v1 as f64) * rf
        } else if r <= v2 {
            p.m2_val
        } else if r <= v3 {
            (p.c2 / (v3 - v2) as f64) * rf
        } else {
            p.m4_val
        }
    }
}

/// Builds the mask for an H x W spectrum.
///
/// Cutoffs are `round(min(H, W) * k_i)`; v1 is floored at 1 so the low-pass
/// slope stays defined on small images. Values are clamped to [0, 1].
pub fn build_mask(height: usize, width: usize, params: MaskParams) -> Result<BandPassMask> {
    if height < 2 || width < 2 {
        return Err(Error::validation(format!(
            "build_mask: image must be at least 2x2, got {height}x{width}"
        )));
    }
    if !(params.k1 > 0.0 && params.k1 < params.k2 && params.k2 <= params.k3) {
        return Err(Error::validation(format!(
            "build_mask: cutoff ratios must satisfy 0 < k1 < k2 <= k3, got ({}, {}, {})",
            params.k1, params.k2, params.k3
        )));
    }
    let side = height.min(width) as f64;
    let v1 = ((side * params.k1).round() as usize).max(1);
    let v2 = (side * params.k2).round() as usize;
    let v3 = (side * params.k3).round() as usize;
    if v2 <= v1 {
        return Err(Error::validation(format!(
            "build_mask: v2 ({v2}) must exceed v1 ({v1}); use a larger image or larger k2"
        )));
    }
    if v3 == v2 {
        return Err(Error::validation(format!(
            "build_mask: v3 equals v2 ({v2}); the high-frequency slope is undefined"
        )));
    }
    let mut mask = BandPassMask {
        weights: Array2::zeros((height, width)),
        cutoffs: (v1, v2, v3),
        params,
    };
    for i in 0..height {
        for j in 0..width {
            mask.weights[(i, j)] = mask.analytic_unclamped(i, j).clamp(0.0, 1.0);
        }
    }
    Ok(mask)
}
