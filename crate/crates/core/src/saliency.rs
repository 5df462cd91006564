//! Per-pixel saliency: external CAMs and the classifier mean-gradient map.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{check_image, forward_noise, timestep_seed, NoiseSchedule};
use crate::error::{Error, Result};
use crate::raster::{ActivationMap, ImageTensor, MapKind};
use crate::tensor_io::{read_tensor, Layout};

/// Timesteps averaged into the mean gradient map: 10, 20, ..., 200.
pub fn gradient_timesteps() -> Vec<usize> {
    (1..=20).map(|i| i * 10).collect()
}

/// A classifier that exposes the gradient of its positive-class log-probability.
pub trait DifferentiableClassifier: Sync {
    /// Probability of the positive class, in `(0, 1)`.
    fn predict(&self, x: &ImageTensor) -> Result<f64>;

    fn log_prob(&self, x: &ImageTensor) -> Result<f64> {
        Ok(self.predict(x)?.ln())
    }

    /// `∂ log p / ∂x`, same shape as `x`.
    fn input_gradient(&self, x: &ImageTensor) -> Result<ImageTensor>;
}

/// `p = σ(⟨w, x⟩ + b)`; the input gradient of `log p` is `(1 - p)·w`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticClassifier {
    weights: ImageTensor,
    bias: f32,
}

pub fn toy_logistic_classifier(weights: ImageTensor, bias: f32) -> Result<LogisticClassifier> {
    LogisticClassifier::new(weights, bias)
}

impl LogisticClassifier {
    pub fn new(weights: ImageTensor, bias: f32) -> Result<Self> {
        if !weights.is_finite() || !bias.is_finite() {
            return Err(Error::Numerical("classifier parameters must be finite".into()));
        }
        Ok(Self { weights, bias })
    }

    pub fn weights(&self) -> &ImageTensor {
        &self.weights
    }

    pub fn bias(&self) -> f32 {
        self.bias
    }

    fn logit(&self, x: &ImageTensor) -> Result<f64> {
        if x.shape() != self.weights.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.weights.shape().to_vec(),
                found: x.shape().to_vec(),
            });
        }
        let dot: f64 = self
            .weights
            .data()
            .iter()
            .zip(x.data())
            .map(|(&w, &v)| w as f64 * v as f64)
            .sum();
        Ok(dot + self.bias as f64)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl DifferentiableClassifier for LogisticClassifier {
    fn predict(&self, x: &ImageTensor) -> Result<f64> {
        Ok(sigmoid(self.logit(x)?))
    }

    fn log_prob(&self, x: &ImageTensor) -> Result<f64> {
        let z = self.logit(x)?;
        // log σ(z) = -log(1 + e^{-z})
        Ok(if z >= 0.0 {
            -(-z).exp().ln_1p()
        } else {
            z - z.exp().ln_1p()
        })
    }

    fn input_gradient(&self, x: &ImageTensor) -> Result<ImageTensor> {
        let one_minus_p = sigmoid(-self.logit(x)?);
        let data = self
            .weights
            .data()
            .iter()
            .map(|&w| (one_minus_p * w as f64) as f32)
            .collect();
        ImageTensor::new(x.height(), x.width(), x.channels(), data)
    }
}

/// How the C-channel gradient at each timestep becomes a per-pixel score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientReduction {
    /// L2 norm over channels at each timestep, then mean over timesteps.
    #[default]
    Magnitude,
    /// Mean of the signed gradients over timesteps, then L2 norm over channels.
    Signed,
}

/// Average the classifier's input gradient over noisy copies of `x0` and min-max normalize.
pub fn mean_gradient_map(
    x0: &ImageTensor,
    clf: &dyn DifferentiableClassifier,
    schedule: &NoiseSchedule,
    timesteps: &[usize],
    seed: u64,
    reduction: GradientReduction,
) -> Result<ActivationMap> {
    check_image(x0)?;
    if timesteps.is_empty() {
        return Err(Error::EmptyInput("timesteps"));
    }
    let (h, w, c) = (x0.height(), x0.width(), x0.channels());
    let grads: Vec<ImageTensor> = timesteps
        .par_iter()
        .map(|&t| {
            let x_t = forward_noise(x0, t, schedule, timestep_seed(seed, t))?;
            let g = clf.input_gradient(&x_t)?;
            if g.shape() != x0.shape() {
                return Err(Error::Classifier(format!(
                    "gradient shape {:?} does not match input {:?}",
                    g.shape(),
                    x0.shape()
                )));
            }
            Ok(g)
        })
        .collect::<Result<_>>()?;

    let n = grads.len() as f64;
    let scores: Vec<f32> = match reduction {
        GradientReduction::Magnitude => {
            let mut acc = vec![0.0f64; h * w];
            for g in &grads {
                for (p, a) in acc.iter_mut().enumerate() {
                    let v = g.pixel_flat(p);
                    *a += v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                }
            }
            acc.into_iter().map(|a| (a / n) as f32).collect()
        }
        GradientReduction::Signed => {
            let mut acc = vec![0.0f64; h * w * c];
            for g in &grads {
                for (a, &x) in acc.iter_mut().zip(g.data()) {
                    *a += x as f64;
                }
            }
            acc.chunks_exact(c)
                .map(|px| (px.iter().map(|a| (a / n).powi(2)).sum::<f64>().sqrt()) as f32)
                .collect()
        }
    };
    ActivationMap::normalized(h, w, &scores, MapKind::MeanGradient)
}

/// Load an externally computed CAM (HW f32) and min-max normalize it.
pub fn load_cam(path: impl AsRef<Path>, height: usize, width: usize) -> Result<ActivationMap> {
    let t = read_tensor(path)?;
    let data = t
        .as_f32()
        .ok_or_else(|| Error::InvalidTensor("CAM files must be f32".into()))?;
    if t.layout != Layout::Hw {
        return Err(Error::InvalidTensor(format!("CAM files must be HW, got {:?}", t.layout)));
    }
    if t.shape != [height, width] {
        return Err(Error::ShapeMismatch {
            expected: vec![height, width],
            found: t.shape.clone(),
        });
    }
    ActivationMap::normalized(height, width, data, MapKind::Cam)
}
