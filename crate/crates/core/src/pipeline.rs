//! Stage functions and the JSON run configuration shared by the CLI and tests.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cluster::{infer_mask, KMeansConfig};
use crate::decoder::{decode, train_decoder, PixelDecoder, TrainConfig, TrainOutcome};
use crate::diffusion::{extract_features, NoiseSchedule, ToyFeatureProvider, ToyProviderConfig, Upsample, FEATURE_TIMESTEPS};
use crate::error::{Error, Result};
use crate::fusion::{binarize, select_seeds, SeedSelection, Thresholds};
use crate::metrics::{evaluate, Evaluation};
use crate::raster::{ActivationMap, AggregatedFeatures, ImageTensor, SegmentationMask};
use crate::saliency::{gradient_timesteps, GradientReduction};
use crate::synth::{sample_seed, SynthConfig, SynthSample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub timesteps: Vec<usize>,
    pub upsample: Upsample,
    pub schedule: ScheduleConfig,
    pub toy: ToyProviderConfig,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            timesteps: FEATURE_TIMESTEPS.to_vec(),
            upsample: Upsample::Bilinear,
            schedule: ScheduleConfig::default(),
            toy: ToyProviderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaliencyConfig {
    pub timesteps: Vec<usize>,
    pub reduction: GradientReduction,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self {
            timesteps: gradient_timesteps(),
            reduction: GradientReduction::Magnitude,
        }
    }
}

/// Which maps supply the seed pixels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedSource {
    /// Foreground where both maps fire, background where neither does.
    #[default]
    Fused,
    CamOnly,
    GradientOnly,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub thresholds: Thresholds,
    pub source: SeedSource,
    pub foreground_cap: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub features: FeatureConfig,
    pub saliency: SaliencyConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub kmeans: KMeansConfig,
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingInput(path.display().to_string()),
            _ => Error::IoAt {
                path: path.to_path_buf(),
                source: e,
            },
        })?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.scene.validate()?;
        self.features.schedule.build()?;
        ToyFeatureProvider::new(self.features.toy.clone())?;
        for (name, t) in [("cam", self.fusion.thresholds.cam), ("gradient", self.fusion.thresholds.gradient)] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidConfig(format!("{name} threshold {t} outside [0, 1]")));
            }
        }
        if self.kmeans.k != 2 {
            return Err(Error::InvalidConfig(format!(
                "binary masks need k = 2, got {}",
                self.kmeans.k
            )));
        }
        Ok(())
    }

    /// Full configuration as JSON, embedded in reports and checkpoints.
    pub fn echo(&self) -> Value {
        // through text so f32 fields keep their shortest decimal form
        let text = serde_json::to_string(self).expect("config serializes");
        serde_json::from_str(&text).expect("config parses")
    }
}

/// Per-image random streams derived from the run seed.
pub mod stream {
    pub const FEATURES: u64 = 10;
    pub const SEEDS: u64 = 11;
    pub const KMEANS: u64 = 12;
    pub const SALIENCY: u64 = 13;
    pub const TRAIN: u64 = 0x7261_696E;
}

pub fn stage_seed(seed: u64, index: usize, stream: u64) -> u64 {
    sample_seed(seed, index, stream)
}

pub fn compute_features(image: &ImageTensor, cfg: &FeatureConfig, seed: u64) -> Result<AggregatedFeatures> {
    let provider = ToyFeatureProvider::new(cfg.toy.clone())?;
    let schedule = cfg.schedule.build()?;
    extract_features(image, &provider, &cfg.timesteps, &schedule, seed, cfg.upsample)
}

/// Binarize the maps and pick seeds according to `cfg.source`.
pub fn seeds_for(
    cam: &ActivationMap,
    gradient: &ActivationMap,
    cfg: &FusionConfig,
    background_cap: Option<usize>,
    seed: u64,
) -> Result<SeedSelection> {
    let c = binarize(cam, cfg.thresholds.cam);
    let g = binarize(gradient, cfg.thresholds.gradient);
    let (a, b) = match cfg.source {
        SeedSource::Fused => (&c, &g),
        SeedSource::CamOnly => (&c, &c),
        SeedSource::GradientOnly => (&g, &g),
    };
    select_seeds(a, b, background_cap, cfg.foreground_cap, seed)
}

pub fn infer(
    features: &AggregatedFeatures,
    net: &PixelDecoder,
    seeds: &SeedSelection,
    cfg: &KMeansConfig,
    seed: u64,
) -> Result<SegmentationMask> {
    infer_mask(&decode(features, net)?, seeds, cfg, seed)
}

/// Inputs of one image after the feature stage.
#[derive(Debug, Clone)]
pub struct PreparedImage {
    pub id: String,
    pub features: AggregatedFeatures,
    pub cam: ActivationMap,
    pub gradient: ActivationMap,
    pub gt: Option<SegmentationMask>,
}

pub fn prepare_synthetic(samples: &[SynthSample], cfg: &PipelineConfig) -> Result<Vec<PreparedImage>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(PreparedImage {
                id: s.id.clone(),
                features: compute_features(&s.scene.image, &cfg.features, stage_seed(cfg.seed, i, stream::FEATURES))?,
                cam: s.cam.clone(),
                gradient: s.gradient.clone(),
                gt: Some(s.scene.mask.clone()),
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub seeds: Vec<SeedSelection>,
    pub training: TrainOutcome,
    pub masks: Vec<SegmentationMask>,
    /// Present when every image carries ground truth.
    pub evaluation: Option<Evaluation>,
}

/// Seeds, decoder training and mask inference over prepared images.
pub fn run_prepared(images: &[PreparedImage], cfg: &PipelineConfig) -> Result<RunOutput> {
    let cap = cfg.train.selection_cap();
    let seeds: Vec<SeedSelection> = images
        .iter()
        .enumerate()
        .map(|(i, p)| seeds_for(&p.cam, &p.gradient, &cfg.fusion, cap, stage_seed(cfg.seed, i, stream::SEEDS)))
        .collect::<Result<_>>()?;
    let dataset: Vec<(AggregatedFeatures, SeedSelection)> = images
        .iter()
        .zip(&seeds)
        .map(|(p, s)| (p.features.clone(), s.clone()))
        .collect();
    let training = train_decoder(&dataset, &cfg.train, cfg.seed ^ stream::TRAIN)?;
    let masks: Vec<SegmentationMask> = images
        .iter()
        .zip(&seeds)
        .enumerate()
        .map(|(i, (p, s))| {
            infer(
                &p.features,
                &training.decoder,
                s,
                &cfg.kmeans,
                stage_seed(cfg.seed, i, stream::KMEANS),
            )
        })
        .collect::<Result<_>>()?;
    let evaluation = if images.iter().all(|p| p.gt.is_some()) && !images.is_empty() {
        Some(evaluate(
            images
                .iter()
                .zip(&masks)
                .map(|(p, m)| (p.id.clone(), m, p.gt.as_ref().expect("checked"))),
        )?)
    } else {
        None
    };
    Ok(RunOutput {
        seeds,
        training,
        masks,
        evaluation,
    })
}

/// Baseline: binarized CAM scored directly against ground truth.
pub fn cam_baseline(images: &[PreparedImage], thresholds: &Thresholds) -> Result<Evaluation> {
    let masks: Vec<SegmentationMask> = images.iter().map(|p| binarize(&p.cam, thresholds.cam)).collect();
    score(images, &masks)
}

pub fn score(images: &[PreparedImage], masks: &[SegmentationMask]) -> Result<Evaluation> {
    let gts = images
        .iter()
        .map(|p| {
            p.gt
                .as_ref()
                .ok_or_else(|| Error::MissingInput(format!("ground truth for {}", p.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(
        images
            .iter()
            .zip(masks)
            .zip(gts)
            .map(|((p, m), g)| (p.id.clone(), m, g)),
    )
}

pub const ABLATION_DIMS: [usize; 5] = [2, 4, 8, 16, 32];
pub const ABLATION_DEPTHS: [usize; 5] = [2, 3, 4, 5, 6];
pub const ABLATION_FIXED_DEPTH: usize = 4;
pub const ABLATION_FIXED_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `output_dim` or `depth`: which axis this row belongs to.
    pub sweep: String,
    pub output_dim: usize,
    pub depth: usize,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub iou_mean: f64,
    pub iou_std: f64,
}

/// Decoder widths for `depth` linear layers ending in `output_dim`, hidden width 16.
pub fn ablation_widths(depth: usize, output_dim: usize) -> Vec<usize> {
    let mut w = vec![ABLATION_FIXED_DIM; depth];
    if let Some(last) = w.last_mut() {
        *last = output_dim;
    }
    w
}

/// Output-dimension sweep at depth 4, then depth sweep at dimension 16.
/// Configurations shared by both sweeps are trained once.
pub fn ablate(images: &[PreparedImage], cfg: &PipelineConfig) -> Result<Vec<AblationRow>> {
    let mut grid: Vec<(&str, usize, usize)> = ABLATION_DIMS
        .iter()
        .map(|&d| ("output_dim", d, ABLATION_FIXED_DEPTH))
        .collect();
    grid.extend(ABLATION_DEPTHS.iter().map(|&l| ("depth", ABLATION_FIXED_DIM, l)));
    let mut cache: Vec<((usize, usize), Evaluation)> = Vec::new();
    let mut rows = Vec::with_capacity(grid.len());
    for (sweep, dim, depth) in grid {
        let ev = match cache.iter().find(|(k, _)| *k == (dim, depth)) {
            Some((_, ev)) => ev.clone(),
            None => {
                let mut c = cfg.clone();
                c.train.widths = ablation_widths(depth, dim);
                let out = run_prepared(images, &c)?;
                let ev = out
                    .evaluation
                    .ok_or_else(|| Error::MissingInput("ground truth for ablation".into()))?;
                cache.push(((dim, depth), ev.clone()));
                ev
            }
        };
        rows.push(AblationRow {
            sweep: sweep.to_string(),
            output_dim: dim,
            depth,
            dice_mean: ev.report.dice_mean,
            dice_std: ev.report.dice_std,
            iou_mean: ev.report.iou_mean,
            iou_std: ev.report.iou_std,
        });
    }
    Ok(rows)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let wrap = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    for r in rows {
        w.serialize(r).map_err(wrap)?;
    }
    w.flush().map_err(Error::at(path))?;
    Ok(())
}
