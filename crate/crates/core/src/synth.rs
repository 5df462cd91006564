//! Synthetic scenes with exact ground truth and imitation CAM / gradient maps.
//!
//! CAMs localize but spill over boundaries and miss parts of the object; gradient
//! maps follow boundaries closely but fire on scattered background spots, which
//! preferentially land on clutter that looks like the target.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffusion::separable_smooth;
use crate::error::{Error, Result};
use crate::raster::{ActivationMap, ImageTensor, MapKind, SegmentationMask};
use crate::tensor_io::{read_tensor, write_tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_blobs: usize,
    /// Semi-axis range in pixels.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Intensity of target blobs above the local background.
    pub contrast: f32,
    /// Blobs that are not part of the target.
    pub n_clutter: usize,
    pub clutter_contrast: f32,
    pub noise_std: f32,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 1,
            n_blobs: 1,
            radius_min: 3.0,
            radius_max: 5.5,
            contrast: 1.0,
            n_clutter: 2,
            clutter_contrast: 0.5,
            noise_std: 0.05,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return bad(format!("empty scene {}x{}x{}", self.height, self.width, self.channels));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return bad(format!("invalid radius range [{}, {}]", self.radius_min, self.radius_max));
        }
        let span = 2.0 * self.radius_max.ceil() + 1.0;
        if (self.n_blobs + self.n_clutter) > 0 && span > self.height.min(self.width) as f64 {
            return bad(format!(
                "blobs of radius {} do not fit in {}x{}",
                self.radius_max, self.height, self.width
            ));
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return bad(format!("negative noise {}", self.noise_std));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Values in [-1, 1].
    pub image: ImageTensor,
    pub mask: SegmentationMask,
    pub clutter: SegmentationMask,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    pub a: f64,
    pub b: f64,
    pub angle: f64,
}

impl Ellipse {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    pub fn rasterize(&self, height: usize, width: usize) -> SegmentationMask {
        SegmentationMask::from_fn(height, width, |r, c| self.contains(r as f64, c as f64))
    }
}

fn random_ellipse(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Ellipse {
    let m = spec.radius_max.ceil();
    let cy = rng.gen_range(m..=spec.height as f64 - 1.0 - m);
    let cx = rng.gen_range(m..=spec.width as f64 - 1.0 - m);
    let a = rng.gen_range(spec.radius_min..=spec.radius_max);
    let b = rng.gen_range(spec.radius_min..=spec.radius_max);
    Ellipse {
        cy,
        cx,
        a,
        b,
        angle: rng.gen_range(0.0..PI),
    }
}

const PLACEMENT_ATTEMPTS: usize = 200;

/// Smooth background, elliptical target blobs, and non-overlapping clutter blobs.
pub fn gen_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut mask = SegmentationMask::zeros(h, w);
    for _ in 0..spec.n_blobs {
        let e = random_ellipse(spec, &mut rng);
        for (i, &v) in e.rasterize(h, w).data().iter().enumerate() {
            if v != 0 {
                mask.set(i / w, i % w, true);
            }
        }
    }
    let mut clutter = SegmentationMask::zeros(h, w);
    let margin = 2.0;
    for _ in 0..spec.n_clutter {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let e = random_ellipse(spec, &mut rng);
            let grown = Ellipse {
                a: e.a + margin,
                b: e.b + margin,
                ..e
            };
            let blocked = (0..h * w).any(|i| {
                (mask.data()[i] != 0 || clutter.data()[i] != 0) && grown.contains((i / w) as f64, (i % w) as f64)
            });
            if !blocked {
                for (i, &v) in e.rasterize(h, w).data().iter().enumerate() {
                    if v != 0 {
                        clutter.set(i / w, i % w, true);
                    }
                }
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InvalidConfig(format!(
                "could not place {} clutter blobs in a {h}x{w} scene",
                spec.n_clutter
            )));
        }
    }

    // low-frequency background: a tilted plane plus one broad bump
    let tilt_y = rng.gen_range(-0.2..0.2f32);
    let tilt_x = rng.gen_range(-0.2..0.2f32);
    let (by, bx) = (rng.gen_range(0.0..h as f32), rng.gen_range(0.0..w as f32));
    let bump = rng.gen_range(-0.15..0.15f32);
    let sigma = 0.5 * h.max(w) as f32;
    let base = -0.5f32;
    let noise = Normal::new(0.0f32, spec.noise_std.max(0.0)).expect("finite std");
    let mut image = ImageTensor::zeros(h, w, spec.channels);
    for r in 0..h {
        for c in 0..w {
            let ny = r as f32 / h as f32 - 0.5;
            let nx = c as f32 / w as f32 - 0.5;
            let d2 = (r as f32 - by).powi(2) + (c as f32 - bx).powi(2);
            let mut v = base + tilt_y * ny + tilt_x * nx + bump * (-d2 / (2.0 * sigma * sigma)).exp();
            if mask.get(r, c) {
                v += spec.contrast;
            } else if clutter.get(r, c) {
                v += spec.clutter_contrast;
            }
            for ch in 0..spec.channels {
                let n = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                image.set(r, c, ch, (v + n).clamp(-1.0, 1.0));
            }
        }
    }
    Ok(Scene { image, mask, clutter })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CamDegradation {
    pub dilate_px: f64,
    pub blur_sigma: f64,
    /// Fraction of the activated region removed, as a slab from a random side.
    pub miss_rate: f64,
}

impl Default for CamDegradation {
    fn default() -> Self {
        Self {
            dilate_px: 2.0,
            blur_sigma: 1.5,
            miss_rate: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradientDegradation {
    pub boundary_jitter_px: usize,
    pub speckle_count: usize,
    pub speckle_radius: f64,
    /// Probability that a speckle is centred on clutter rather than anywhere in the background.
    pub clutter_affinity: f64,
}

impl Default for GradientDegradation {
    fn default() -> Self {
        Self {
            boundary_jitter_px: 1,
            speckle_count: 6,
            speckle_radius: 1.5,
            clutter_affinity: 0.8,
        }
    }
}

/// Euclidean disk dilation.
pub fn dilate(mask: &SegmentationMask, radius: f64) -> SegmentationMask {
    if radius <= 0.0 {
        return mask.clone();
    }
    let (h, w) = (mask.height(), mask.width());
    let reach = radius.floor() as isize;
    let offsets: Vec<(isize, isize)> = (-reach..=reach)
        .flat_map(|dy| (-reach..=reach).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| ((dy * dy + dx * dx) as f64) <= radius * radius)
        .collect();
    SegmentationMask::from_fn(h, w, |r, c| {
        offsets.iter().any(|&(dy, dx)| {
            let (y, x) = (r as isize + dy, c as isize + dx);
            y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask.get(y as usize, x as usize)
        })
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter().map(|v| (v / s) as f32).collect()
}

/// Over-extended, partially missing, blurred activation.
pub fn degrade_cam(gt: &SegmentationMask, spec: &CamDegradation, seed: u64) -> Result<ActivationMap> {
    if !(spec.dilate_px >= 0.0 && spec.blur_sigma >= 0.0 && (0.0..=1.0).contains(&spec.miss_rate)) {
        return Err(Error::InvalidConfig(format!("invalid CAM degradation {spec:?}")));
    }
    let (h, w) = (gt.height(), gt.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grown = dilate(gt, spec.dilate_px);
    let mut values: Vec<f32> = grown.data().iter().map(|&v| v as f32).collect();

    let active: Vec<usize> = (0..h * w).filter(|&i| grown.data()[i] != 0).collect();
    let drop = (spec.miss_rate * active.len() as f64).round() as usize;
    if drop > 0 {
        let theta = rng.gen_range(0.0..2.0 * PI);
        let (s, c) = theta.sin_cos();
        let mut ranked: Vec<(f64, usize)> = active
            .iter()
            .map(|&i| ((i % w) as f64 * c + (i / w) as f64 * s, i))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i) in ranked.iter().take(drop) {
            values[i] = 0.0;
        }
    }
    if spec.blur_sigma > 0.0 {
        values = separable_smooth(&values, h, w, &gaussian_kernel(spec.blur_sigma));
    }
    ActivationMap::normalized(h, w, &values, MapKind::Cam)
}

/// Sharp but jittered boundary plus background speckles.
///
/// With `clutter`, each speckle is centred on a clutter pixel with probability
/// `clutter_affinity`; otherwise on any background pixel.
pub fn degrade_gradient(
    gt: &SegmentationMask,
    clutter: Option<&SegmentationMask>,
    spec: &GradientDegradation,
    seed: u64,
) -> Result<ActivationMap> {
    if !(spec.speckle_radius >= 0.0 && (0.0..=1.0).contains(&spec.clutter_affinity)) {
        return Err(Error::InvalidConfig(format!("invalid gradient degradation {spec:?}")));
    }
    let (h, w) = (gt.height(), gt.width());
    if let Some(c) = clutter {
        gt.same_shape(c)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = spec.boundary_jitter_px as isize;
    let mut values = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let (dy, dx) = if j > 0 {
                (rng.gen_range(-j..=j), rng.gen_range(-j..=j))
            } else {
                (0, 0)
            };
            let y = (r as isize + dy).clamp(0, h as isize - 1) as usize;
            let x = (c as isize + dx).clamp(0, w as isize - 1) as usize;
            values[r * w + c] = f32::from(gt.get(y, x));
        }
    }

    let background: Vec<usize> = (0..h * w).filter(|&i| gt.data()[i] == 0).collect();
    let on_clutter: Vec<usize> = clutter
        .map(|m| (0..h * w).filter(|&i| m.data()[i] != 0 && gt.data()[i] == 0).collect())
        .unwrap_or_default();
    let mut centres: Vec<usize> = Vec::new();
    for _ in 0..spec.speckle_count {
        let use_clutter = !on_clutter.is_empty() && rng.gen_bool(spec.clutter_affinity);
        let pool = if use_clutter { &on_clutter } else { &background };
        let free: Vec<usize> = pool.iter().copied().filter(|i| !centres.contains(i)).collect();
        let free = if free.is_empty() {
            background.iter().copied().filter(|i| !centres.contains(i)).collect()
        } else {
            free
        };
        if free.is_empty() {
            break;
        }
        centres.push(free[rng.gen_range(0..free.len())]);
    }
    let reach = spec.speckle_radius.floor() as isize;
    for &centre in &centres {
        let (cy, cx) = ((centre / w) as isize, (centre % w) as isize);
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (y, x) = (cy + dy, cx + dx);
                if (dy * dy + dx * dx) as f64 <= spec.speckle_radius.powi(2)
                    && y >= 0
                    && x >= 0
                    && (y as usize) < h
                    && (x as usize) < w
                {
                    values[y as usize * w + x as usize] = 1.0;
                }
            }
        }
    }
    ActivationMap::normalized(h, w, &values, MapKind::MeanGradient)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub count: usize,
    pub scene: SceneSpec,
    pub cam: CamDegradation,
    pub gradient: GradientDegradation,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 50,
            scene: SceneSpec::default(),
            cam: CamDegradation::default(),
            gradient: GradientDegradation::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub id: String,
    pub scene: Scene,
    pub cam: ActivationMap,
    pub gradient: ActivationMap,
}

pub fn sample_seed(seed: u64, index: usize, stream: u64) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93)
}

pub fn sample_id(index: usize) -> String {
    format!("scene_{index:04}")
}

pub fn generate_sample(cfg: &SynthConfig, seed: u64, index: usize) -> Result<SynthSample> {
    let scene = gen_scene(&cfg.scene, sample_seed(seed, index, 0))?;
    let cam = degrade_cam(&scene.mask, &cfg.cam, sample_seed(seed, index, 1))?;
    let gradient = degrade_gradient(&scene.mask, Some(&scene.clutter), &cfg.gradient, sample_seed(seed, index, 2))?;
    Ok(SynthSample {
        id: sample_id(index),
        scene,
        cam,
        gradient,
    })
}

pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<Vec<SynthSample>> {
    use rayon::prelude::*;
    (0..cfg.count)
        .into_par_iter()
        .map(|i| generate_sample(cfg, seed, i))
        .collect()
}

/// One image of a dataset; paths are relative to the dataset directory.
///
/// Only `image` and `cam` are required, so hand-written indices for real data
/// can omit ground truth or precomputed gradient maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub image: PathBuf,
    pub cam: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradient: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clutter: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<SynthConfig>,
    pub scenes: Vec<IndexEntry>,
}

pub const INDEX_FILE: &str = "index.json";

/// Write `images/`, `gt/`, `cam/`, `gradient/`, `clutter/` trees and `index.json`.
/// Paths in the index are relative to `dir`.
pub fn write_dataset(dir: &Path, cfg: &SynthConfig, seed: u64) -> Result<DatasetIndex> {
    let samples = generate(cfg, seed)?;
    for sub in ["images", "gt", "cam", "gradient", "clutter"] {
        fs::create_dir_all(dir.join(sub)).map_err(Error::at(dir.join(sub)))?;
    }
    let mut scenes = Vec::with_capacity(samples.len());
    for s in &samples {
        let file = format!("{}.cldf", s.id);
        let entry = IndexEntry {
            id: s.id.clone(),
            image: Path::new("images").join(&file),
            cam: Path::new("cam").join(&file),
            gt: Some(Path::new("gt").join(&file)),
            gradient: Some(Path::new("gradient").join(&file)),
            clutter: Some(Path::new("clutter").join(&file)),
        };
        write_tensor(dir.join(&entry.image), &s.scene.image.to_container())?;
        write_tensor(dir.join(&entry.cam), &s.cam.to_container())?;
        write_tensor(dir.join(Path::new("gt").join(&file)), &s.scene.mask.to_container())?;
        write_tensor(dir.join(Path::new("gradient").join(&file)), &s.gradient.to_container())?;
        write_tensor(dir.join(Path::new("clutter").join(&file)), &s.scene.clutter.to_container())?;
        scenes.push(entry);
    }
    let index = DatasetIndex {
        seed: Some(seed),
        config: Some(cfg.clone()),
        scenes,
    };
    let path = dir.join(INDEX_FILE);
    fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(Error::at(&path))?;
    Ok(index)
}

pub fn read_index(dir: &Path) -> Result<DatasetIndex> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(path.display().to_string()),
        _ => Error::IoAt {
            path: path.clone(),
            source: e,
        },
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Load an activation map written by [`write_dataset`] or the seeds stage.
pub fn read_map(path: &Path, kind: MapKind) -> Result<ActivationMap> {
    let t = read_tensor(path)?;
    let &[h, w] = t.shape.as_slice() else {
        return Err(Error::InvalidTensor(format!("activation maps are HW, got {:?}", t.shape)));
    };
    let data = t
        .as_f32()
        .ok_or_else(|| Error::InvalidTensor("activation maps must be f32".into()))?;
    ActivationMap::normalized(h, w, data, kind)
}
