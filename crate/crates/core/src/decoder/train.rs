//! Mini-batch SGD over seed pixels pooled from groups of images.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::LossReduction;
use super::{Gradients, PixelDecoder, DEFAULT_WIDTHS};
use crate::error::{Error, Result};
use crate::fusion::{sample_sorted, SeedSelection, DEFAULT_BACKGROUND_CAP};
use crate::raster::AggregatedFeatures;

/// Where the background sample cap is applied.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapMode {
    #[default]
    PerImage,
    PerBatch,
}

/// How seed pixels of the images in one batch form contrastive batches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// All images' pixels form a single contrastive batch.
    #[default]
    Batch,
    /// One contrastive batch per image; losses are combined.
    PerImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub tau: f64,
    pub lr: f32,
    pub epochs: usize,
    pub batch_images: usize,
    /// Hidden and output widths; the input width comes from the features.
    pub widths: Vec<usize>,
    pub normalize: bool,
    pub background_cap: usize,
    pub cap_mode: CapMode,
    pub reduction: LossReduction,
    pub pooling: Pooling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            // 1.0 collapses the ReLU decoder to a constant embedding with mean-reduced loss
            lr: 0.03,
            epochs: 5,
            batch_images: 4,
            widths: DEFAULT_WIDTHS.to_vec(),
            normalize: true,
            background_cap: DEFAULT_BACKGROUND_CAP,
            cap_mode: CapMode::PerImage,
            reduction: LossReduction::Mean,
            pooling: Pooling::Batch,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be non-negative, got {}", self.lr)));
        }
        if self.batch_images == 0 {
            return Err(Error::InvalidConfig("batch_images must be positive".into()));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::InvalidConfig(format!("invalid decoder widths {:?}", self.widths)));
        }
        Ok(())
    }

    /// Seed cap to use when selecting seeds for this configuration.
    pub fn selection_cap(&self) -> Option<usize> {
        match self.cap_mode {
            CapMode::PerImage => Some(self.background_cap),
            CapMode::PerBatch => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub batch_losses: Vec<f64>,
    pub epoch_means: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub decoder: PixelDecoder,
    pub trace: LossTrace,
}

/// Train a fresh decoder with widths `[D] ++ cfg.widths`.
pub fn train_decoder(
    dataset: &[(AggregatedFeatures, SeedSelection)],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = dataset.first().ok_or(Error::EmptyInput("training set"))?;
    let mut sizes = vec![first.0.dim()];
    sizes.extend(&cfg.widths);
    let net = PixelDecoder::new(&sizes, seed)?.with_normalize(cfg.normalize);
    train_from(net, dataset, cfg, seed)
}

struct Group {
    inputs: Vec<f32>,
    labels: Vec<u8>,
}

fn gather(features: &AggregatedFeatures, seeds: &SeedSelection, background: &[usize], group: &mut Group) {
    for &i in &seeds.foreground {
        group.inputs.extend_from_slice(features.data.pixel_flat(i));
        group.labels.push(1);
    }
    for &i in background {
        group.inputs.extend_from_slice(features.data.pixel_flat(i));
        group.labels.push(0);
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Continue training an existing decoder; `seed` drives shuffling and batch-level sampling.
pub fn train_from(
    mut net: PixelDecoder,
    dataset: &[(AggregatedFeatures, SeedSelection)],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    for (f, s) in dataset {
        if f.dim() != net.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: net.input_dim(),
                found: f.dim(),
            });
        }
        if f.data.height() != s.height || f.data.width() != s.width {
            return Err(Error::ShapeMismatch {
                expected: vec![f.data.height(), f.data.width()],
                found: vec![s.height, s.width],
            });
        }
    }
    let usable: Vec<usize> = (0..dataset.len()).filter(|&i| !dataset[i].1.skip()).collect();
    if usable.is_empty() {
        return Err(Error::NoSupervisoryPixels);
    }

    let mut trace = LossTrace::default();
    for epoch in 0..cfg.epochs {
        let mut order = usable.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64 + 1, 0)));
        let mut epoch_losses = Vec::new();
        for (b, batch) in order.chunks(cfg.batch_images).enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64 + 1, b as u64 + 1));
            let mut groups: Vec<Group> = Vec::new();
            match cfg.pooling {
                Pooling::Batch => {
                    let mut g = Group {
                        inputs: Vec::new(),
                        labels: Vec::new(),
                    };
                    if cfg.cap_mode == CapMode::PerBatch {
                        // sample the cap from the union of the batch's background pools
                        let pool: Vec<usize> = batch
                            .iter()
                            .enumerate()
                            .flat_map(|(k, &i)| (0..dataset[i].1.background.len()).map(move |j| (k << 32) | j))
                            .collect();
                        let picked = sample_sorted(&pool, cfg.background_cap, &mut rng);
                        for (k, &i) in batch.iter().enumerate() {
                            let (f, s) = &dataset[i];
                            let bg: Vec<usize> = picked
                                .iter()
                                .filter(|&&p| p >> 32 == k)
                                .map(|&p| s.background[p & 0xFFFF_FFFF])
                                .collect();
                            gather(f, s, &bg, &mut g);
                        }
                    } else {
                        for &i in batch {
                            let (f, s) = &dataset[i];
                            gather(f, s, &s.background, &mut g);
                        }
                    }
                    groups.push(g);
                }
                Pooling::PerImage => {
                    for &i in batch {
                        let (f, s) = &dataset[i];
                        let bg = match cfg.cap_mode {
                            CapMode::PerImage => s.background.clone(),
                            CapMode::PerBatch => sample_sorted(&s.background, cfg.background_cap, &mut rng),
                        };
                        let mut g = Group {
                            inputs: Vec::new(),
                            labels: Vec::new(),
                        };
                        gather(f, s, &bg, &mut g);
                        groups.push(g);
                    }
                }
            }
            groups.retain(|g| g.labels.len() >= 2);
            if groups.is_empty() {
                continue;
            }

            let mut total: Option<Gradients> = None;
            let mut loss = 0.0;
            for g in &groups {
                let (l, grads) = net.loss_and_gradients(&g.inputs, &g.labels, cfg.tau, cfg.reduction)?;
                if !(l.is_finite() && l >= -1e-9) {
                    return Err(Error::Numerical(format!("contrastive loss {l} at epoch {epoch}, batch {b}")));
                }
                loss += l;
                match &mut total {
                    Some(t) => t.add(&grads),
                    None => total = Some(grads),
                }
            }
            let mut grads = total.expect("non-empty groups");
            if cfg.reduction == LossReduction::Mean && groups.len() > 1 {
                let s = 1.0 / groups.len() as f64;
                grads.scale(s);
                loss *= s;
            }
            net.sgd_step(&grads, cfg.lr);
            if !net.is_finite() {
                return Err(Error::Numerical(format!(
                    "decoder parameters diverged at epoch {epoch}, batch {b}"
                )));
            }
            trace.batch_losses.push(loss);
            epoch_losses.push(loss);
        }
        let mean = if epoch_losses.is_empty() {
            0.0
        } else {
            epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64
        };
        trace.epoch_means.push(mean);
    }
    Ok(TrainOutcome { decoder: net, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::ImageTensor;
    use rand::Rng;

    fn toy_item(seed: u64, fg: Vec<usize>, bg: Vec<usize>) -> (AggregatedFeatures, SeedSelection) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = ImageTensor::from_fn(8, 8, 5, |r, _, ch| {
            let base = if r < 4 { 1.0 } else { -1.0 };
            base * (ch as f32 + 1.0) * 0.3 + rng.gen_range(-0.2..0.2)
        });
        (
            AggregatedFeatures {
                data,
                timesteps_used: vec![1],
            },
            SeedSelection {
                height: 8,
                width: 8,
                foreground: fg,
                background: bg,
            },
        )
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let data = vec![toy_item(1, (0..16).collect(), (40..64).collect())];
        let cfg = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        let net = PixelDecoder::new(&[5, 16, 16, 16, 16], 3).unwrap();
        let out = train_from(net.clone(), &data, &cfg, 0).unwrap();
        assert_eq!(out.decoder, net);
        assert_eq!(out.trace.epoch_means.len(), 5);
    }

    #[test]
    fn all_skipped_is_an_error() {
        let data = vec![toy_item(1, vec![], (40..64).collect()), toy_item(2, vec![], vec![1])];
        assert!(matches!(
            train_decoder(&data, &TrainConfig::default(), 0),
            Err(Error::NoSupervisoryPixels)
        ));
        assert!(matches!(train_decoder(&[], &TrainConfig::default(), 0), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn rejects_invalid_config() {
        let data = vec![toy_item(1, vec![0, 1], vec![60, 61])];
        for cfg in [
            TrainConfig { tau: 0.0, ..TrainConfig::default() },
            TrainConfig { lr: -1.0, ..TrainConfig::default() },
            TrainConfig { batch_images: 0, ..TrainConfig::default() },
        ] {
            assert!(matches!(train_decoder(&data, &cfg, 0), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let data: Vec<_> = (0..8)
            .map(|s| toy_item(s, (0..32).step_by(3).collect(), (32..64).step_by(2).collect()))
            .collect();
        let cfg = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let a = train_decoder(&data, &cfg, 4).unwrap();
        let b = train_decoder(&data, &cfg, 4).unwrap();
        assert_eq!(a.decoder, b.decoder);
        assert_eq!(a.trace, b.trace);
        assert!(a.trace.epoch_means.last().unwrap() < a.trace.epoch_means.first().unwrap());
        assert!(a.trace.batch_losses.iter().all(|&l| l >= 0.0));
    }

    #[test]
    fn alternative_pooling_and_cap_modes_train() {
        let data: Vec<_> = (0..6)
            .map(|s| toy_item(s, (0..32).step_by(3).collect(), (32..64).collect()))
            .collect();
        for (pooling, cap_mode) in [
            (Pooling::PerImage, CapMode::PerImage),
            (Pooling::Batch, CapMode::PerBatch),
            (Pooling::PerImage, CapMode::PerBatch),
        ] {
            let cfg = TrainConfig {
                pooling,
                cap_mode,
                background_cap: 10,
                epochs: 2,
                ..TrainConfig::default()
            };
            let out = train_decoder(&data, &cfg, 1).unwrap();
            assert!(out.decoder.is_finite());
            assert_eq!(out.trace.epoch_means.len(), 2);
        }
    }
}
