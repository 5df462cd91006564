//! Seed selection: confident foreground is where CAM and mean gradient agree,
//! confident background is where neither fires.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ActivationMap, SegmentationMask};
use crate::tensor_io::{Layout, TensorContainer};

pub const DEFAULT_BACKGROUND_CAP: usize = 5000;
pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// Values of the seed debug dump.
pub const SEED_UNUSED: u8 = 0;
pub const SEED_FOREGROUND: u8 = 1;
pub const SEED_BACKGROUND: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub cam: f32,
    pub gradient: f32,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            cam: DEFAULT_THRESHOLD,
            gradient: DEFAULT_THRESHOLD,
        }
    }
}

/// Foreground/background pixel sets for one image, as sorted row-major flat indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedSelection {
    pub height: usize,
    pub width: usize,
    pub foreground: Vec<usize>,
    pub background: Vec<usize>,
}

impl SeedSelection {
    /// An image without confident foreground contributes nothing to training.
    pub fn skip(&self) -> bool {
        self.foreground.is_empty()
    }

    pub fn foreground_coords(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.foreground.iter().map(|&i| (i / self.width, i % self.width))
    }

    pub fn background_coords(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.background.iter().map(|&i| (i / self.width, i % self.width))
    }

    /// Encode as a u8 label image: 0 unused, 1 foreground, 2 background.
    pub fn to_container(&self) -> TensorContainer {
        let mut labels = vec![SEED_UNUSED; self.height * self.width];
        for &i in &self.foreground {
            labels[i] = SEED_FOREGROUND;
        }
        for &i in &self.background {
            labels[i] = SEED_BACKGROUND;
        }
        TensorContainer::u8(Layout::Hw, vec![self.height, self.width], labels).expect("valid seeds")
    }

    pub fn from_container(t: &TensorContainer) -> Result<Self> {
        let labels = t
            .as_u8()
            .ok_or_else(|| Error::InvalidTensor("seed files must be u8".into()))?;
        let &[height, width] = t.shape.as_slice() else {
            return Err(Error::InvalidTensor(format!("seed files must be HW, got {:?}", t.shape)));
        };
        let mut foreground = Vec::new();
        let mut background = Vec::new();
        for (i, &v) in labels.iter().enumerate() {
            match v {
                SEED_UNUSED => {}
                SEED_FOREGROUND => foreground.push(i),
                SEED_BACKGROUND => background.push(i),
                other => {
                    return Err(Error::InvalidTensor(format!("unknown seed label {other}")));
                }
            }
        }
        Ok(Self {
            height,
            width,
            foreground,
            background,
        })
    }
}

/// `mask[p] = 1` iff `map[p] >= threshold`.
pub fn binarize(map: &ActivationMap, threshold: f32) -> SegmentationMask {
    let data = map.data().iter().map(|&v| u8::from(v >= threshold)).collect();
    SegmentationMask::new(map.height(), map.width(), data).expect("map shape")
}

/// Uniform sample of `amount` elements of `pool` without replacement, kept in ascending order.
pub(crate) fn sample_sorted(pool: &[usize], amount: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if amount >= pool.len() {
        return pool.to_vec();
    }
    let mut picked: Vec<usize> = index::sample(rng, pool.len(), amount)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    picked.sort_unstable();
    picked
}

/// Fuse two binary masks into a seed selection.
///
/// `background_cap = None` keeps the whole background pool (used when the cap is
/// applied per batch instead of per image).
pub fn select_seeds(
    cam_mask: &SegmentationMask,
    mg_mask: &SegmentationMask,
    background_cap: Option<usize>,
    foreground_cap: Option<usize>,
    seed: u64,
) -> Result<SeedSelection> {
    cam_mask.same_shape(mg_mask)?;
    let mut foreground = Vec::new();
    let mut pool = Vec::new();
    for (i, (&a, &b)) in cam_mask.data().iter().zip(mg_mask.data()).enumerate() {
        match (a != 0, b != 0) {
            (true, true) => foreground.push(i),
            (false, false) => pool.push(i),
            _ => {}
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = sample_sorted(&pool, background_cap.unwrap_or(usize::MAX), &mut rng);
    if let Some(cap) = foreground_cap {
        foreground = sample_sorted(&foreground, cap, &mut rng);
    }
    Ok(SeedSelection {
        height: cam_mask.height(),
        width: cam_mask.width(),
        foreground,
        background,
    })
}
