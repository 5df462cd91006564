//! Supervised contrastive loss over labelled pixel embeddings.
//!
//! For anchors `i` with positives `Ω_i = {j ≠ i : y_j = y_i}`:
//!
//! ```text
//! L = Σ_i  -1/|Ω_i| Σ_{j∈Ω_i} log( exp(s_ij) / Σ_{k≠i} exp(s_ik) ),   s_ij = ⟨z_i, z_j⟩ / τ
//! ```
//!
//! Anchors without positives contribute 0. Similarities are cosine because
//! the embeddings are unit vectors. Accumulation is in f64.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `‖z‖₂ - 1` for embeddings that must be normalized.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    embeddings: Vec<f32>,
    wide: Vec<f64>,
    dim: usize,
    labels: Vec<u8>,
}

impl ContrastiveBatch {
    /// `embeddings` is N×dim row-major; pixels with equal `labels` are positives of each other.
    pub fn new(embeddings: Vec<f32>, dim: usize, labels: Vec<u8>, require_unit_norm: bool) -> Result<Self> {
        if dim == 0 {
            return Err(Error::DimensionMismatch { expected: 1, found: 0 });
        }
        if embeddings.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * dim,
                found: embeddings.len(),
            });
        }
        if labels.len() < 2 {
            return Err(Error::TooFewPoints {
                needed: 2,
                got: labels.len(),
            });
        }
        if require_unit_norm {
            for (index, z) in embeddings.chunks_exact(dim).enumerate() {
                let norm = z.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                    return Err(Error::NotNormalized { index, norm });
                }
            }
        }
        Ok(Self {
            wide: embeddings.iter().map(|&v| v as f64).collect(),
            embeddings,
            dim,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }

    #[inline]
    pub fn z(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    fn zw(&self, i: usize) -> &[f64] {
        &self.wide[i * self.dim..(i + 1) * self.dim]
    }

    /// `|Ω_i|` for every anchor.
    pub fn positive_counts(&self) -> Vec<usize> {
        let mut per_label = [0usize; 256];
        for &l in &self.labels {
            per_label[l as usize] += 1;
        }
        self.labels.iter().map(|&l| per_label[l as usize] - 1).collect()
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (head_a, tail_a) = a.split_at(a.len() / 4 * 4);
    let (head_b, tail_b) = b.split_at(head_a.len());
    for (x, y) in head_a.chunks_exact(4).zip(head_b.chunks_exact(4)) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in tail_a.iter().zip(tail_b) {
        s += x * y;
    }
    s
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidConfig(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// One pass over `k ≠ i`: streaming log-sum-exp of `s_ik` and the sum of `s_ij` over positives.
fn anchor_pass(batch: &ContrastiveBatch, i: usize, tau: f64) -> (f64, f64) {
    let zi = batch.zw(i);
    let yi = batch.labels[i];
    let mut max = f64::NEG_INFINITY;
    let mut acc = 0.0f64;
    let mut positive_sum = 0.0f64;
    for k in 0..batch.len() {
        if k == i {
            continue;
        }
        let s = dot(zi, batch.zw(k)) / tau;
        if s > max {
            acc = acc * (max - s).exp() + 1.0;
            max = s;
        } else {
            acc += (s - max).exp();
        }
        if batch.labels[k] == yi {
            positive_sum += s;
        }
    }
    (max + acc.ln(), positive_sum)
}

/// Per-anchor log-sum-exp and loss term `ℓ_i`; anchors without positives give `(0, 0)`.
fn anchor_terms(batch: &ContrastiveBatch, positives: &[usize], tau: f64) -> Vec<(f64, f64)> {
    (0..batch.len())
        .into_par_iter()
        .map(|i| {
            if positives[i] == 0 {
                return (0.0, 0.0);
            }
            let (lse, positive_sum) = anchor_pass(batch, i, tau);
            let n = positives[i] as f64;
            (lse, (n * lse - positive_sum) / n)
        })
        .collect()
}

/// Per-anchor loss terms `ℓ_i`; anchors without positives are 0.
pub fn supcon_anchor_losses(batch: &ContrastiveBatch, tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    let positives = batch.positive_counts();
    Ok(anchor_terms(batch, &positives, tau).into_iter().map(|(_, l)| l).collect())
}

pub fn supcon_loss(batch: &ContrastiveBatch, tau: f64) -> Result<f64> {
    Ok(supcon_anchor_losses(batch, tau)?.iter().sum())
}

/// `∂L/∂z_m` for every embedding, N×dim row-major.
///
/// The loss is treated as a function of the raw vectors; projecting onto the
/// sphere is left to the caller's normalization backward pass.
pub fn supcon_grad(batch: &ContrastiveBatch, tau: f64) -> Result<Vec<f64>> {
    Ok(supcon_loss_and_grad(batch, tau)?.1)
}

/// Loss and gradient sharing one log-sum-exp pass.
///
/// `∂L/∂z_m = Σ_{k≠m} [c(m,k) + c(k,m)] z_k` with
/// `c(i,k) = (p_ik - 1[k∈Ω_i]/|Ω_i|) / τ` and `p_ik = exp(s_ik - lse_i)`.
pub fn supcon_loss_and_grad(batch: &ContrastiveBatch, tau: f64) -> Result<(f64, Vec<f64>)> {
    check_tau(tau)?;
    let n = batch.len();
    let dim = batch.dim;
    let positives = batch.positive_counts();
    let terms = anchor_terms(batch, &positives, tau);
    let loss: f64 = terms.iter().map(|t| t.1).sum();
    let active: Vec<f64> = positives.iter().map(|&p| f64::from(u8::from(p > 0))).collect();
    let pos_weight: Vec<f64> = positives
        .iter()
        .map(|&p| if p > 0 { 1.0 / p as f64 } else { 0.0 })
        .collect();

    // With bounded similarities exp(s - lse_i) factors into exp(s)·exp(-lse_i),
    // which needs one exponential per pair instead of two.
    let max_sq = batch
        .wide
        .chunks_exact(dim)
        .map(|z| dot(z, z))
        .fold(0.0f64, f64::max);
    let min_lse = terms
        .iter()
        .zip(&positives)
        .filter(|(_, &p)| p > 0)
        .map(|(t, _)| t.0)
        .fold(f64::INFINITY, f64::min);
    let factored = max_sq / tau < 200.0 && (min_lse.is_infinite() || min_lse > -200.0);
    let inv_exp_lse: Vec<f64> = terms
        .iter()
        .zip(&active)
        .map(|(t, &a)| if a > 0.0 { (-t.0).exp() } else { 0.0 })
        .collect();

    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|m| {
            let zm = batch.zw(m);
            let ym = batch.labels[m];
            let mut g = vec![0.0f64; dim];
            for k in 0..n {
                if k == m {
                    continue;
                }
                let zk = batch.zw(k);
                let s = dot(zm, zk) / tau;
                let p = if factored {
                    s.exp() * (inv_exp_lse[m] + inv_exp_lse[k])
                } else {
                    active[m] * (s - terms[m].0).exp() + active[k] * (s - terms[k].0).exp()
                };
                let pos = if batch.labels[k] == ym {
                    pos_weight[m] + pos_weight[k]
                } else {
                    0.0
                };
                let c = (p - pos) / tau;
                for (gd, &v) in g.iter_mut().zip(zk) {
                    *gd += c * v;
                }
            }
            g
        })
        .collect();
    Ok((loss, rows.into_iter().flatten().collect()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// Sum over anchors, exactly as written above.
    Sum,
    /// Sum divided by the number of anchors N.
    #[default]
    Mean,
}

impl LossReduction {
    pub fn scale(self, n: usize) -> f64 {
        match self {
            LossReduction::Sum => 1.0,
            LossReduction::Mean => 1.0 / n as f64,
        }
    }
}
