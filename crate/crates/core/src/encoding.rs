//! Sinusoidal positional encoding with coarse-to-fine frequency annealing.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Mat, Tape, TapeError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    /// Number of frequency bands `L`.
    pub frequencies: usize,
    /// Training-progress fractions over which `alpha` ramps from 0 to `L`.
    pub c2f_start: f64,
    pub c2f_end: f64,
}

impl EncodingConfig {
    pub fn new(frequencies: usize, c2f_start: f64, c2f_end: f64) -> Self {
        Self {
            frequencies,
            c2f_start,
            c2f_end,
        }
    }

    /// No annealing: every band is active from the first step.
    pub fn full(frequencies: usize) -> Self {
        Self::new(frequencies, 0.0, 0.0)
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        input_dim + 2 * input_dim * self.frequencies
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.c2f_start)
            && (0.0..=1.0).contains(&self.c2f_end)
            && self.c2f_start <= self.c2f_end
    }

    /// Annealing progress `alpha ∈ [0, L]` after `step` of `total` steps.
    pub fn alpha(&self, step: u64, total: u64) -> f64 {
        let l = self.frequencies as f64;
        if total == 0 {
            return l;
        }
        let p = step as f64 / total as f64;
        let span = self.c2f_end - self.c2f_start;
        if span <= 0.0 {
            return if p >= self.c2f_end { l } else { 0.0 };
        }
        l * ((p - self.c2f_start) / span).clamp(0.0, 1.0)
    }
}

/// Annealing progress of the field encoding and of the warp encoding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anneal {
    pub field: f64,
    pub warp: f64,
}

impl Anneal {
    /// Every band of every encoding active.
    pub const FULL: Anneal = Anneal {
        field: f64::INFINITY,
        warp: f64::INFINITY,
    };
}

impl From<f64> for Anneal {
    fn from(alpha: f64) -> Self {
        Self { field: alpha, warp: alpha }
    }
}

/// Weight of band `k` at annealing progress `alpha`.
pub fn c2f_weight(k: usize, alpha: f64) -> f64 {
    let t = alpha - k as f64;
    if t < 0.0 {
        0.0
    } else if t < 1.0 {
        (1.0 - (t * PI).cos()) / 2.0
    } else {
        1.0
    }
}

fn band_weights(cfg: &EncodingConfig, dim: usize, alpha: f64) -> Vec<f64> {
    let mut w = vec![1.0; dim];
    for k in 0..cfg.frequencies {
        let wk = c2f_weight(k, alpha);
        w.extend(std::iter::repeat(wk).take(2 * dim));
    }
    w
}

/// Encode each row of `x` as
/// `[x, w_0·sin(2⁰πx), w_0·cos(2⁰πx), …, w_{L−1}·sin(2^{L−1}πx), w_{L−1}·cos(2^{L−1}πx)]`.
pub fn encode(tape: &mut Tape, x: Var, cfg: &EncodingConfig, alpha: f64) -> Result<Var, TapeError> {
    if cfg.frequencies == 0 {
        return Ok(x);
    }
    let dim = tape.value(x).ncols();
    let bands = tape.custom(Box::new(Bands(cfg.frequencies)), &[x]);
    let stacked = tape.concat_cols(&[x, bands])?;
    tape.mul_columns(stacked, band_weights(cfg, dim, alpha))
}

/// `[sin(2⁰πx), cos(2⁰πx), …]` per row. Higher bands come from the
/// double-angle recurrence, so each element costs one `sin_cos`.
struct Bands(usize);

impl CustomOp for Bands {
    fn name(&self) -> &'static str {
        "fourier_bands"
    }

    fn forward(&self, inputs: &[&Mat]) -> Mat {
        let x = inputs[0];
        let (n, d) = x.dim();
        let mut out = Mat::zeros((n, 2 * d * self.0));
        for i in 0..n {
            for j in 0..d {
                let mut k = 0;
                for_each_band(x[[i, j]], self.0, |s, c| {
                    out[[i, 2 * d * k + j]] = s;
                    out[[i, 2 * d * k + d + j]] = c;
                    k += 1;
                });
            }
        }
        out
    }

    fn backward(&self, inputs: &[&Mat], output: &Mat, grad: &Mat) -> Vec<Option<Mat>> {
        let x = inputs[0];
        let (n, d) = x.dim();
        let mut gx = Mat::zeros((n, d));
        for i in 0..n {
            for k in 0..self.0 {
                let f = (1u64 << k) as f64 * PI;
                for j in 0..d {
                    let (si, ci) = (2 * d * k + j, 2 * d * k + d + j);
                    gx[[i, j]] += f * (grad[[i, si]] * output[[i, ci]] - grad[[i, ci]] * output[[i, si]]);
                }
            }
        }
        vec![Some(gx)]
    }
}

/// Plain-value encoding of a single point, same layout as [`encode`].
pub fn encode_point(x: &[f64], cfg: &EncodingConfig, alpha: f64) -> Vec<f64> {
    let d = x.len();
    let mut out = x.to_vec();
    out.resize(d + 2 * d * cfg.frequencies, 0.0);
    for (j, &v) in x.iter().enumerate() {
        let mut k = 0;
        for_each_band(v, cfg.frequencies, |s, c| {
            let w = c2f_weight(k, alpha);
            out[d + 2 * d * k + j] = w * s;
            out[d + 2 * d * k + d + j] = w * c;
            k += 1;
        });
    }
    out
}

/// `sin(2ᵏπv), cos(2ᵏπv)` for `k = 0..bands`, by the double-angle recurrence.
fn for_each_band(v: f64, bands: usize, mut f: impl FnMut(f64, f64)) {
    let (mut s, mut c) = (PI * v).sin_cos();
    for _ in 0..bands {
        f(s, c);
        (s, c) = (2.0 * s * c, (c - s) * (c + s));
    }
}
