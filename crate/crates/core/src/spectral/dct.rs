//! Orthonormal 2-D DCT-II and its inverse on rectangular grids.
//!
//! Separable implementation with precomputed cosine tables; the orthonormal
//! scaling makes the transform its own transpose-inverse (Parseval holds).

use std::f64::consts::PI;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Precomputed basis for length-`n` orthonormal DCT-II / DCT-III.
///
/// `cos[k][i] = alpha(k) * cos(pi * (2i + 1) * k / (2n))`
#[derive(Debug, Clone)]
pub struct CosBasis {
    n: usize,
    cos: Vec<f64>, // n * n, row k = frequency k
}

impl CosBasis {
    pub fn new(n: usize) -> Self {
        let nf = n as f64;
        let mut cos = vec![0.0; n * n];
        for k in 0..n {
            let alpha = if k == 0 {
                (1.0 / nf).sqrt()
            } else {
                (2.0 / nf).sqrt()
            };
            for i in 0..n {
                cos[k * n + i] = alpha * (PI * (2.0 * i as f64 + 1.0) * k as f64 / (2.0 * nf)).cos();
            }
        }
        Self { n, cos }
    }

    /// Forward 1-D DCT-II: `out[k] = sum_i cos[k][i] * x[i]`.
    fn forward(&self, x: &[f64], out: &mut [f64]) {
        for k in 0..self.n {
            let row = &self.cos[k * self.n..(k + 1) * self.n];
            out[k] = row.iter().zip(x).map(|(c, v)| c * v).sum();
        }
    }

    /// Inverse (DCT-III): `out[i] = sum_k cos[k][i] * s[k]`.
    fn inverse(&self, s: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..self.n {
            let row = &self.cos[k * self.n..(k + 1) * self.n];
            let sk = s[k];
            if sk != 0.0 {
                for (o, c) in out.iter_mut().zip(row) {
                    *o += sk * c;
                }
            }
        }
    }
}

fn check_finite(grid: &Array2<f64>, what: &str) -> Result<()> {
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation(format!("{what} contains non-finite values")));
    }
    Ok(())
}

/// Forward orthonormal 2-D DCT-II of a single channel.
pub fn dct2(channel: &Array2<f64>) -> Result<Array2<f64>> {
    let (h, w) = channel.dim();
    if h == 0 || w == 0 {
        return Err(Error::validation("dct2: empty grid"));
    }
    check_finite(channel, "dct2 input")?;
    Ok(transform(channel, &CosBasis::new(h), &CosBasis::new(w), true))
}

/// Inverse of [`dct2`]; `spectrum` holds orthonormal DCT-II coefficients.
pub fn idct2(spectrum: &Array2<f64>) -> Result<Array2<f64>> {
    let (h, w) = spectrum.dim();
    if h == 0 || w == 0 {
        return Err(Error::validation("idct2: empty grid"));
    }
    check_finite(spectrum, "idct2 input")?;
    Ok(transform(spectrum, &CosBasis::new(h), &CosBasis::new(w), false))
}

fn transform(grid: &Array2<f64>, rows: &CosBasis, cols: &CosBasis, forward: bool) -> Array2<f64> {
    let (h, w) = grid.dim();
    let mut tmp = Array2::<f64>::zeros((h, w));
    let mut buf_in = vec![0.0; w];
    let mut buf_out = vec![0.0; w];
    // Pass 1: along each row.
    for i in 0..h {
        for j in 0..w {
            buf_in[j] = grid[(i, j)];
        }
        if forward {
            cols.forward(&buf_in, &mut buf_out);
        } else {
            cols.inverse(&buf_in, &mut buf_out);
        }
        for j in 0..w {
            tmp[(i, j)] = buf_out[j];
        }
    }
    // Pass 2: along each column.
    let mut out = Array2::<f64>::zeros((h, w));
    let mut cbuf_in = vec![0.0; h];
    let mut cbuf_out = vec![0.0; h];
    for j in 0..w {
        for i in 0..h {
            cbuf_in[i] = tmp[(i, j)];
        }
        if forward {
            rows.forward(&cbuf_in, &mut cbuf_out);
        } else {
            rows.inverse(&cbuf_in, &mut cbuf_out);
        }
        for i in 0..h {
            out[(i, j)] = cbuf_out[i];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Naive O(N^4) orthonormal DCT-II, the independent oracle.
    pub fn dct2_naive(x: &Array2<f64>) -> Array2<f64> {
        let (h, w) = x.dim();
        let (hf, wf) = (h as f64, w as f64);
        let mut out = Array2::<f64>::zeros((h, w));
        for u in 0..h {
            for v in 0..w {
                let au = if u == 0 { (1.0 / hf).sqrt() } else { (2.0 / hf).sqrt() };
                let av = if v == 0 { (1.0 / wf).sqrt() } else { (2.0 / wf).sqrt() };
                let mut acc = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        acc += x[(i, j)]
                            * (PI * (2.0 * i as f64 + 1.0) * u as f64 / (2.0 * hf)).cos()
                            * (PI * (2.0 * j as f64 + 1.0) * v as f64 / (2.0 * wf)).cos();
                    }
                }
                out[(u, v)] = au * av * acc;
            }
        }
        out
    }

    fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn constant_grid_is_dc_only() {
        let c = 0.37;
        let x = Array2::from_elem((5, 7), c);
        let s = dct2(&x).unwrap();
        assert!((s[(0, 0)] - c * (35.0f64).sqrt()).abs() < 1e-12);
        for ((i, j), v) in s.indexed_iter() {
            if (i, j) != (0, 0) {
                assert!(v.abs() < 1e-12, "({i},{j}) = {v}");
            }
        }
    }

    #[test]
    fn round_trip_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(h, w) in &[(1, 1), (3, 5), (8, 8), (16, 9), (32, 32)] {
            let x = random_grid(&mut rng, h, w);
            let y = idct2(&dct2(&x).unwrap()).unwrap();
            let err = (&y - &x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-6, "{h}x{w} round trip err {err}");
            // Opposite order.
            let s = random_grid(&mut rng, h, w);
            let s2 = dct2(&idct2(&s).unwrap()).unwrap();
            let err = (&s2 - &s).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-6);
        }
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(h, w) in &[(2, 2), (4, 4), (8, 8), (5, 3), (16, 16)] {
            let x = random_grid(&mut rng, h, w);
            let fast = dct2(&x).unwrap();
            let slow = dct2_naive(&x);
            let err = (&fast - &slow).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-8, "{h}x{w} oracle err {err}");
        }
    }

    #[test]
    fn parseval_energy_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(h, w) in &[(4, 4), (17, 31), (64, 64)] {
            let x = random_grid(&mut rng, h, w);
            let s = dct2(&x).unwrap();
            let ex: f64 = x.iter().map(|v| v * v).sum();
            let es: f64 = s.iter().map(|v| v * v).sum();
            assert!((ex - es).abs() / ex < 1e-5, "{h}x{w}: {ex} vs {es}");
        }
    }

    #[test]
    fn dc_only_spectrum_gives_constant() {
        let mut s = Array2::<f64>::zeros((6, 4));
        let c = 1.5;
        s[(0, 0)] = c * (24.0f64).sqrt();
        let x = idct2(&s).unwrap();
        for v in x.iter() {
            assert!((v - c).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut x = Array2::<f64>::zeros((3, 3));
        x[(1, 1)] = f64::NAN;
        assert!(dct2(&x).is_err());
        assert!(idct2(&x).is_err());
    }
}
