//! Closed-form DDPM forward noising and multi-timestep feature aggregation.
//!
//! For each timestep the clean image is noised, a [`FeatureProvider`] returns a
//! set of feature blocks at arbitrary resolutions, every block is resampled to
//! the image size and concatenated along channels. The per-timestep stacks are
//! then averaged with equal weights.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{AggregatedFeatures, ImageTensor};
use crate::tensor_io::{read_tensor, Layout};

/// Timesteps at which features are extracted.
pub const FEATURE_TIMESTEPS: [usize; 4] = [1, 10, 50, 100];

pub const MIN_IMAGE_SIDE: usize = 8;

pub(crate) fn check_image(x: &ImageTensor) -> Result<()> {
    if x.height() < MIN_IMAGE_SIDE || x.width() < MIN_IMAGE_SIDE {
        return Err(Error::InvalidTensor(format!(
            "images must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {}x{}",
            x.height(),
            x.width()
        )));
    }
    if !x.is_finite() {
        return Err(Error::Numerical("image holds non-finite values".into()));
    }
    Ok(())
}

/// Cumulative products ᾱ_t of a linear β schedule, indexed from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidConfig("schedule needs at least 2 steps".into()));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let mut acc = 1.0f64;
        let alphas_bar = (0..steps)
            .map(|i| {
                let beta = beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64;
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        Ok(Self { alphas_bar })
    }

    pub fn len(&self) -> usize {
        self.alphas_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas_bar.is_empty()
    }

    /// ᾱ_t for `1 <= t <= len()`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.alphas_bar.len() {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.alphas_bar.len(),
            });
        }
        Ok(self.alphas_bar[t - 1])
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule")
    }
}

/// `x_t = sqrt(ᾱ)·x0 + sqrt(1-ᾱ)·ε` for an explicit ᾱ.
pub fn forward_noise_with_alpha_bar(x0: &ImageTensor, alpha_bar: f64, seed: u64) -> ImageTensor {
    let signal = alpha_bar.sqrt() as f32;
    let noise = (1.0 - alpha_bar).max(0.0).sqrt() as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = x0
        .data()
        .iter()
        .map(|&x| {
            let eps: f32 = StandardNormal.sample(&mut rng);
            signal * x + noise * eps
        })
        .collect();
    ImageTensor::new(x0.height(), x0.width(), x0.channels(), data).expect("same shape")
}

pub fn forward_noise(
    x0: &ImageTensor,
    t: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<ImageTensor> {
    let alpha_bar = schedule.alpha_bar(t)?;
    if !x0.is_finite() {
        return Err(Error::Numerical("x0 holds non-finite values".into()));
    }
    Ok(forward_noise_with_alpha_bar(x0, alpha_bar, seed))
}

/// Per-timestep noise seed.
#[inline]
pub fn timestep_seed(seed: u64, t: usize) -> u64 {
    seed ^ t as u64
}

/// Source of per-layer features for a noisy image.
///
/// Implementations must return the same number of blocks with the same channel
/// counts on every call, and every block must be no larger than the image.
pub trait FeatureProvider: Sync {
    fn features(&self, x_t: &ImageTensor, t: usize) -> Result<Vec<ImageTensor>>;

    /// Providers that cannot be called concurrently return true.
    fn serial(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    /// Bilinear with corner-aligned sampling.
    #[default]
    Bilinear,
    Nearest,
}

#[inline]
fn lerp(a: f32, b: f32, w: f32) -> f32 {
    // exact when a == b and never leaves [min(a,b), max(a,b)]
    a + w * (b - a)
}

fn source_coord(i: usize, out_len: usize, in_len: usize) -> f64 {
    if out_len <= 1 || in_len <= 1 {
        0.0
    } else {
        i as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
    }
}

/// Resample a block to `height × width`.
pub fn upsample(block: &ImageTensor, height: usize, width: usize, mode: Upsample) -> ImageTensor {
    let (h, w, c) = (block.height(), block.width(), block.channels());
    if h == height && w == width {
        return block.clone();
    }
    let mut out = Vec::with_capacity(height * width * c);
    for r in 0..height {
        let sy = source_coord(r, height, h);
        let y0 = (sy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let wy = (sy - y0 as f64) as f32;
        for col in 0..width {
            let sx = source_coord(col, width, w);
            let x0 = (sx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let wx = (sx - x0 as f64) as f32;
            match mode {
                Upsample::Bilinear => {
                    for ch in 0..c {
                        let top = lerp(block.get(y0, x0, ch), block.get(y0, x1, ch), wx);
                        let bot = lerp(block.get(y1, x0, ch), block.get(y1, x1, ch), wx);
                        out.push(lerp(top, bot, wy));
                    }
                }
                Upsample::Nearest => {
                    let yy = if wy >= 0.5 { y1 } else { y0 };
                    let xx = if wx >= 0.5 { x1 } else { x0 };
                    out.extend_from_slice(block.pixel(yy, xx));
                }
            }
        }
    }
    ImageTensor::new(height, width, c, out).expect("upsample shape")
}

/// Upsample every block to the image size and concatenate channels (F_t).
pub fn concat_blocks(
    blocks: &[ImageTensor],
    height: usize,
    width: usize,
    mode: Upsample,
) -> Result<ImageTensor> {
    if blocks.is_empty() {
        return Err(Error::InconsistentFeatures("provider returned no blocks".into()));
    }
    for (i, b) in blocks.iter().enumerate() {
        if b.height() > height || b.width() > width {
            return Err(Error::InconsistentFeatures(format!(
                "block {i} is {}x{}, larger than the {height}x{width} image",
                b.height(),
                b.width()
            )));
        }
    }
    let resized: Vec<ImageTensor> = blocks.iter().map(|b| upsample(b, height, width, mode)).collect();
    let depth: usize = resized.iter().map(|b| b.channels()).sum();
    let mut out = Vec::with_capacity(height * width * depth);
    for p in 0..height * width {
        for b in &resized {
            out.extend_from_slice(b.pixel_flat(p));
        }
    }
    ImageTensor::new(height, width, depth, out)
}

fn channel_signature(blocks: &[ImageTensor]) -> Vec<usize> {
    blocks.iter().map(|b| b.channels()).collect()
}

/// Noise `x0` at each timestep, extract and concatenate provider features, and average.
pub fn extract_features(
    x0: &ImageTensor,
    provider: &dyn FeatureProvider,
    timesteps: &[usize],
    schedule: &NoiseSchedule,
    seed: u64,
    mode: Upsample,
) -> Result<AggregatedFeatures> {
    check_image(x0)?;
    if timesteps.is_empty() {
        return Err(Error::EmptyInput("timesteps"));
    }
    for &t in timesteps {
        schedule.alpha_bar(t)?;
    }
    let (h, w) = (x0.height(), x0.width());
    let per_step = |t: usize| -> Result<(Vec<usize>, ImageTensor)> {
        let x_t = forward_noise(x0, t, schedule, timestep_seed(seed, t))?;
        let blocks = provider.features(&x_t, t)?;
        Ok((channel_signature(&blocks), concat_blocks(&blocks, h, w, mode)?))
    };
    let stacks: Vec<(Vec<usize>, ImageTensor)> = if provider.serial() {
        timesteps.iter().map(|&t| per_step(t)).collect::<Result<_>>()?
    } else {
        timesteps.par_iter().map(|&t| per_step(t)).collect::<Result<_>>()?
    };

    let signature = &stacks[0].0;
    for (t, (sig, _)) in timesteps.iter().zip(&stacks) {
        if sig != signature {
            return Err(Error::InconsistentFeatures(format!(
                "timestep {t} returned channels {sig:?}, expected {signature:?}"
            )));
        }
    }
    let mut sum = vec![0.0f32; stacks[0].1.data().len()];
    for (_, f) in &stacks {
        for (s, v) in sum.iter_mut().zip(f.data()) {
            *s += v;
        }
    }
    let n = stacks.len() as f32;
    let depth = stacks[0].1.channels();
    let data = sum.into_iter().map(|s| s / n).collect();
    Ok(AggregatedFeatures {
        data: ImageTensor::new(h, w, depth, data)?,
        timesteps_used: timesteps.to_vec(),
    })
}

/// Multi-scale filter bank standing in for frozen denoiser features.
///
/// At each scale the image is average-pooled, then for every input channel
/// four maps are emitted: the pooled intensity, a box smoothing, a Gaussian
/// smoothing, and the gradient magnitude of the Gaussian smoothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyProviderConfig {
    pub scales: Vec<usize>,
    pub box_radius: usize,
    pub gaussian_sigma: f32,
}

impl Default for ToyProviderConfig {
    fn default() -> Self {
        Self {
            scales: vec![1, 2, 4],
            box_radius: 1,
            gaussian_sigma: 1.5,
        }
    }
}

pub const TOY_MAPS_PER_CHANNEL: usize = 4;

#[derive(Debug, Clone)]
pub struct ToyFeatureProvider {
    config: ToyProviderConfig,
    gaussian: Vec<f32>,
}

pub fn toy_feature_provider(config: ToyProviderConfig) -> Result<ToyFeatureProvider> {
    ToyFeatureProvider::new(config)
}

impl ToyFeatureProvider {
    pub fn new(config: ToyProviderConfig) -> Result<Self> {
        if config.scales.is_empty() || config.scales.contains(&0) {
            return Err(Error::InvalidConfig("toy provider scales must be positive".into()));
        }
        if config.gaussian_sigma.is_nan() || config.gaussian_sigma <= 0.0 {
            return Err(Error::InvalidConfig("gaussian_sigma must be positive".into()));
        }
        let radius = (3.0 * config.gaussian_sigma).ceil() as i64;
        let gaussian = (-radius..=radius)
            .map(|d| (-(d * d) as f32 / (2.0 * config.gaussian_sigma.powi(2))).exp())
            .collect();
        Ok(Self { config, gaussian })
    }

    pub fn config(&self) -> &ToyProviderConfig {
        &self.config
    }

    /// Feature dimension for a `channels`-channel input.
    pub fn dim(&self, channels: usize) -> usize {
        self.config.scales.len() * TOY_MAPS_PER_CHANNEL * channels
    }

    fn block(&self, x: &ImageTensor, scale: usize) -> ImageTensor {
        let pooled = avg_pool(x, scale);
        let (h, w, c) = (pooled.height(), pooled.width(), pooled.channels());
        let box_k = vec![1.0f32; 2 * self.config.box_radius + 1];
        let mut maps: Vec<Vec<f32>> = Vec::with_capacity(c * TOY_MAPS_PER_CHANNEL);
        for ch in 0..c {
            let plane = pooled.channel(ch).into_data();
            let boxed = separable_smooth(&plane, h, w, &box_k);
            let gauss = separable_smooth(&plane, h, w, &self.gaussian);
            let grad = gradient_magnitude(&gauss, h, w);
            maps.extend([plane, boxed, gauss, grad]);
        }
        let depth = maps.len();
        let mut data = Vec::with_capacity(h * w * depth);
        for p in 0..h * w {
            data.extend(maps.iter().map(|m| m[p]));
        }
        ImageTensor::new(h, w, depth, data).expect("toy block")
    }
}

impl FeatureProvider for ToyFeatureProvider {
    fn features(&self, x_t: &ImageTensor, _t: usize) -> Result<Vec<ImageTensor>> {
        Ok(self.config.scales.iter().map(|&s| self.block(x_t, s)).collect())
    }
}

/// Average pooling with `factor`×`factor` windows; edge windows may be partial.
///
/// Written as `first + mean(x - first)` so constant inputs map to the exact same constant.
pub(crate) fn avg_pool(x: &ImageTensor, factor: usize) -> ImageTensor {
    if factor == 1 {
        return x.clone();
    }
    let h = x.height().div_ceil(factor);
    let w = x.width().div_ceil(factor);
    ImageTensor::from_fn(h, w, x.channels(), |r, c, ch| {
        let r0 = r * factor;
        let c0 = c * factor;
        let anchor = x.get(r0, c0, ch);
        let mut acc = 0.0f32;
        let mut n = 0usize;
        for rr in r0..(r0 + factor).min(x.height()) {
            for cc in c0..(c0 + factor).min(x.width()) {
                acc += x.get(rr, cc, ch) - anchor;
                n += 1;
            }
        }
        anchor + acc / n as f32
    })
}

fn smooth_1d(src: &[f32], len: usize, stride: usize, offset: usize, kernel: &[f32], dst: &mut [f32]) {
    let radius = (kernel.len() / 2) as isize;
    for i in 0..len {
        let centre = src[offset + i * stride];
        let mut acc = 0.0f32;
        let mut norm = 0.0f32;
        for (k, &wk) in kernel.iter().enumerate() {
            let j = i as isize + k as isize - radius;
            if j < 0 || j >= len as isize {
                continue;
            }
            acc += wk * (src[offset + j as usize * stride] - centre);
            norm += wk;
        }
        dst[offset + i * stride] = centre + acc / norm;
    }
}

/// Edge-renormalized separable filter on an H×W plane.
pub(crate) fn separable_smooth(plane: &[f32], h: usize, w: usize, kernel: &[f32]) -> Vec<f32> {
    let mut tmp = vec![0.0f32; h * w];
    for r in 0..h {
        smooth_1d(plane, w, 1, r * w, kernel, &mut tmp);
    }
    let mut out = vec![0.0f32; h * w];
    for c in 0..w {
        smooth_1d(&tmp, h, w, c, kernel, &mut out);
    }
    out
}

/// Central differences in the interior, one-sided at the borders.
pub(crate) fn gradient_magnitude(plane: &[f32], h: usize, w: usize) -> Vec<f32> {
    let at = |r: usize, c: usize| plane[r * w + c];
    let diff = |a: f32, b: f32, span: usize| if span == 0 { 0.0 } else { (a - b) / span as f32 };
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (c_lo, c_hi) = (c.saturating_sub(1), (c + 1).min(w - 1));
            let (r_lo, r_hi) = (r.saturating_sub(1), (r + 1).min(h - 1));
            let gx = diff(at(r, c_hi), at(r, c_lo), c_hi - c_lo);
            let gy = diff(at(r_hi, c), at(r_lo, c), r_hi - r_lo);
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

/// Features exported by an external model, one `.cldf` file per timestep.
///
/// Each file is NHWC; the N entries are treated as N blocks of identical size.
/// The noisy input handed to [`FeatureProvider::features`] is ignored because
/// the exporter noised the image itself.
#[derive(Debug, Clone)]
pub struct FileFeatureProvider {
    blocks: BTreeMap<usize, Vec<ImageTensor>>,
}

impl FileFeatureProvider {
    pub fn open(files: &BTreeMap<usize, PathBuf>) -> Result<Self> {
        let mut blocks = BTreeMap::new();
        for (&t, path) in files {
            let tensor = read_tensor(path)?;
            if tensor.layout != Layout::Nhwc {
                return Err(Error::InvalidTensor(format!(
                    "{}: feature files must be NHWC, got {:?}",
                    path.display(),
                    tensor.layout
                )));
            }
            let data = tensor
                .as_f32()
                .ok_or_else(|| Error::InvalidTensor(format!("{}: expected f32", path.display())))?;
            let [n, h, w, c] = tensor.shape[..] else {
                unreachable!("NHWC validated as rank 4")
            };
            let per = h * w * c;
            let list = (0..n)
                .map(|i| ImageTensor::new(h, w, c, data[i * per..(i + 1) * per].to_vec()))
                .collect::<Result<Vec<_>>>()?;
            blocks.insert(t, list);
        }
        Ok(Self { blocks })
    }

    pub fn timesteps(&self) -> Vec<usize> {
        self.blocks.keys().copied().collect()
    }
}

impl FeatureProvider for FileFeatureProvider {
    fn features(&self, _x_t: &ImageTensor, t: usize) -> Result<Vec<ImageTensor>> {
        self.blocks
            .get(&t)
            .cloned()
            .ok_or_else(|| Error::MissingInput(format!("no exported features for timestep {t}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant {
        blocks: Vec<(usize, usize, usize, f32)>,
    }

    impl FeatureProvider for Constant {
        fn features(&self, _x: &ImageTensor, _t: usize) -> Result<Vec<ImageTensor>> {
            Ok(self
                .blocks
                .iter()
                .map(|&(h, w, c, v)| ImageTensor::filled(h, w, c, v))
                .collect())
        }
    }

    struct Drifting;

    impl FeatureProvider for Drifting {
        fn features(&self, _x: &ImageTensor, t: usize) -> Result<Vec<ImageTensor>> {
            Ok(vec![ImageTensor::zeros(4, 4, 1 + usize::from(t > 5))])
        }
    }

    fn image(h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_fn(h, w, 1, |r, c, _| (r * w + c) as f32 / (h * w) as f32)
    }

    #[test]
    fn schedule_is_strictly_decreasing_in_unit_interval() {
        let s = NoiseSchedule::default();
        assert_eq!(s.len(), 1000);
        let a1 = s.alpha_bar(1).unwrap();
        assert!(a1 < 1.0 && (a1 - (1.0 - 1e-4)).abs() < 1e-15);
        let mut prev = 1.0;
        for t in 1..=1000 {
            let a = s.alpha_bar(t).unwrap();
            assert!(a > 0.0 && a < prev);
            prev = a;
        }
        assert!(matches!(s.alpha_bar(0), Err(Error::TimestepOutOfRange { .. })));
        assert!(matches!(s.alpha_bar(1001), Err(Error::TimestepOutOfRange { .. })));
    }

    #[test]
    fn noiseless_and_pure_noise_limits() {
        let x0 = image(8, 8);
        assert_eq!(forward_noise_with_alpha_bar(&x0, 1.0, 3), x0);
        let eps = forward_noise_with_alpha_bar(&ImageTensor::zeros(8, 8, 1), 0.0, 3);
        let pure = forward_noise_with_alpha_bar(&x0, 0.0, 3);
        assert_eq!(pure, eps);
    }

    #[test]
    fn forward_noise_is_deterministic() {
        let s = NoiseSchedule::default();
        let x0 = image(8, 8);
        let a = forward_noise(&x0, 500, &s, 9).unwrap();
        let b = forward_noise(&x0, 500, &s, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, forward_noise(&x0, 500, &s, 10).unwrap());
        assert!(forward_noise(&x0, 1001, &s, 9).is_err());
    }

    #[test]
    fn constant_upsample() {
        let b = ImageTensor::filled(1, 1, 3, 0.25);
        let up = upsample(&b, 4, 4, Upsample::Bilinear);
        assert_eq!(up.shape(), [4, 4, 3]);
        assert!(up.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn bilinear_is_corner_aligned_and_bounded() {
        let b = ImageTensor::new(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let up = upsample(&b, 3, 3, Upsample::Bilinear);
        assert_eq!(up.data(), &[0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0]);
        let near = upsample(&b, 4, 4, Upsample::Nearest);
        assert!(near.data().iter().all(|v| [0.0, 1.0, 2.0, 3.0].contains(v)));
    }

    #[test]
    fn constant_provider_averages_to_constant() {
        let p = Constant {
            blocks: vec![(8, 8, 2, 0.7), (2, 2, 1, -1.5)],
        };
        let f = extract_features(
            &image(8, 8),
            &p,
            &FEATURE_TIMESTEPS,
            &NoiseSchedule::default(),
            1,
            Upsample::Bilinear,
        )
        .unwrap();
        assert_eq!(f.dim(), 3);
        for px in 0..64 {
            assert_eq!(f.data.pixel_flat(px), &[0.7, 0.7, -1.5]);
        }
        assert_eq!(f.timesteps_used, FEATURE_TIMESTEPS.to_vec());
    }

    #[test]
    fn concat_arithmetic() {
        let p = Constant {
            blocks: vec![(16, 16, 2, 1.0), (8, 8, 3, 2.0)],
        };
        let f = extract_features(&image(16, 16), &p, &[1], &NoiseSchedule::default(), 0, Upsample::Bilinear)
            .unwrap();
        assert_eq!(f.data.shape(), [16, 16, 5]);
    }

    #[test]
    fn inconsistent_channels_rejected() {
        let err = extract_features(
            &image(8, 8),
            &Drifting,
            &FEATURE_TIMESTEPS,
            &NoiseSchedule::default(),
            1,
            Upsample::Bilinear,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InconsistentFeatures(_)));
    }

    #[test]
    fn oversized_block_and_small_image_rejected() {
        let p = Constant {
            blocks: vec![(9, 8, 1, 0.0)],
        };
        assert!(extract_features(&image(8, 8), &p, &[1], &NoiseSchedule::default(), 0, Upsample::Bilinear)
            .is_err());
        let q = Constant {
            blocks: vec![(4, 4, 1, 0.0)],
        };
        assert!(extract_features(&image(4, 4), &q, &[1], &NoiseSchedule::default(), 0, Upsample::Bilinear)
            .is_err());
    }

    #[test]
    fn toy_provider_on_constant_image() {
        let p = toy_feature_provider(ToyProviderConfig::default()).unwrap();
        let x = ImageTensor::filled(16, 16, 1, 0.3);
        let blocks = p.features(&x, 1).unwrap();
        assert_eq!(blocks.len(), 3);
        let dim: usize = blocks.iter().map(|b| b.channels()).sum();
        assert_eq!(dim, p.dim(1));
        assert!(dim >= 8);
        for b in &blocks {
            for px in 0..b.height() * b.width() {
                let v = b.pixel_flat(px);
                assert_eq!(&v[..3], &[0.3, 0.3, 0.3]);
                assert_eq!(v[3], 0.0);
            }
        }
        assert_eq!(blocks, p.features(&x, 1).unwrap());
    }

    #[test]
    fn toy_provider_matches_direct_box_convolution() {
        let (h, w, radius) = (16usize, 16usize, 3.0f32);
        let disk = ImageTensor::from_fn(h, w, 1, |r, c, _| {
            let (dy, dx) = (r as f32 - 7.5, c as f32 - 7.5);
            if dy * dy + dx * dx <= radius * radius {
                1.0
            } else {
                0.0
            }
        });
        let cfg = ToyProviderConfig {
            scales: vec![1],
            box_radius: 2,
            gaussian_sigma: 1.0,
        };
        let p = ToyFeatureProvider::new(cfg).unwrap();
        let block = &p.features(&disk, 1).unwrap()[0];

        // direct 2-D window average over in-bounds neighbours
        let mut direct = vec![0.0f32; h * w];
        for r in 0..h as isize {
            for c in 0..w as isize {
                let (mut s, mut n) = (0.0f32, 0.0f32);
                for dr in -2..=2 {
                    for dc in -2..=2 {
                        let (rr, cc) = (r + dr, c + dc);
                        if rr >= 0 && cc >= 0 && rr < h as isize && cc < w as isize {
                            s += disk.get(rr as usize, cc as usize, 0);
                            n += 1.0;
                        }
                    }
                }
                direct[r as usize * w + c as usize] = s / n;
            }
        }
        for (i, d) in direct.iter().enumerate() {
            assert!((block.pixel_flat(i)[1] - d).abs() < 1e-5);
        }
        let argmax = (0..h * w)
            .max_by(|&a, &b| block.pixel_flat(a)[2].total_cmp(&block.pixel_flat(b)[2]))
            .unwrap();
        assert!(disk.data()[argmax] == 1.0, "gaussian peak must sit inside the disk");
    }

    #[test]
    fn file_provider_reads_nhwc_blocks() {
        use crate::tensor_io::{write_tensor, TensorContainer};
        let dir = tempfile::tempdir().unwrap();
        let mut files = BTreeMap::new();
        for t in [1usize, 10] {
            let path = dir.path().join(format!("t{t}.cldf"));
            let data: Vec<f32> = (0..2 * 4 * 4 * 3).map(|i| (i + t) as f32).collect();
            write_tensor(&path, &TensorContainer::f32(Layout::Nhwc, vec![2, 4, 4, 3], data).unwrap())
                .unwrap();
            files.insert(t, path);
        }
        let p = FileFeatureProvider::open(&files).unwrap();
        assert_eq!(p.timesteps(), vec![1, 10]);
        let f = extract_features(&image(8, 8), &p, &[1, 10], &NoiseSchedule::default(), 0, Upsample::Bilinear)
            .unwrap();
        assert_eq!(f.dim(), 6);
        assert!(p.features(&image(8, 8), 50).is_err());
    }
}
