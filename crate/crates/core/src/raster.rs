//! Row-major H×W×C rasters and the typed views the pipeline passes between stages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::{Layout, TensorContainer};

/// An H×W×C f32 raster, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidTensor(format!(
                "raster dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch {
                expected: vec![height, width, channels],
                found: vec![data.len()],
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0 && channels > 0);
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self::new(height, width, channels, data).expect("from_fn dimensions")
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f32) {
        self.data[(row * self.width + col) * self.channels + ch] = v;
    }

    /// Feature vector of one pixel.
    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn pixel_flat(&self, index: usize) -> &[f32] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of a single channel as an H×W×1 raster.
    pub fn channel(&self, ch: usize) -> ImageTensor {
        let data = self.data.iter().skip(ch).step_by(self.channels).copied().collect();
        ImageTensor::new(self.height, self.width, 1, data).expect("channel slice")
    }

    pub fn to_container(&self) -> TensorContainer {
        TensorContainer::f32(
            Layout::Hwc,
            vec![self.height, self.width, self.channels],
            self.data.clone(),
        )
        .expect("valid raster")
    }

    pub fn from_container(t: &TensorContainer) -> Result<Self> {
        let data = t
            .as_f32()
            .ok_or_else(|| Error::InvalidTensor("expected f32 raster".into()))?
            .to_vec();
        match (t.layout, t.shape.as_slice()) {
            (Layout::Hwc, &[h, w, c]) => Self::new(h, w, c, data),
            (Layout::Hw, &[h, w]) => Self::new(h, w, 1, data),
            _ => Err(Error::InvalidTensor(format!(
                "expected HWC or HW raster, got {:?} {:?}",
                t.layout, t.shape
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Cam,
    MeanGradient,
}

/// An H×W saliency map normalized to `[0, 1]`.
///
/// A map whose raw values were constant cannot be min-max normalized; it is
/// stored as all zeros with `degenerate` set.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
    kind: MapKind,
    degenerate: bool,
}

impl ActivationMap {
    /// Min-max normalize raw scores into a map.
    pub fn normalized(height: usize, width: usize, raw: &[f32], kind: MapKind) -> Result<Self> {
        if raw.len() != height * width || height == 0 || width == 0 {
            return Err(Error::ShapeMismatch {
                expected: vec![height, width],
                found: vec![raw.len()],
            });
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("activation map holds non-finite values".into()));
        }
        let (lo, hi) = raw
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if hi <= lo {
            return Ok(Self {
                height,
                width,
                data: vec![0.0; raw.len()],
                kind,
                degenerate: true,
            });
        }
        let span = hi - lo;
        let data = raw
            .iter()
            .map(|&v| ((v - lo) / span).clamp(0.0, 1.0))
            .collect();
        Ok(Self {
            height,
            width,
            data,
            kind,
            degenerate: false,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn kind(&self) -> MapKind {
        self.kind
    }

    /// True when the source values were constant and the map was zeroed.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn to_container(&self) -> TensorContainer {
        TensorContainer::f32(Layout::Hw, vec![self.height, self.width], self.data.clone())
            .expect("valid map")
            .with_seed_meta(serde_json::json!({
                "kind": self.kind,
                "degenerate": self.degenerate,
            }))
    }
}

/// A binary H×W mask with values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl SegmentationMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width || height == 0 || width == 0 {
            return Err(Error::ShapeMismatch {
                expected: vec![height, width],
                found: vec![data.len()],
            });
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidTensor("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(u8::from(f(r, c)));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] != 0
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.data[row * self.width + col] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn same_shape(&self, other: &SegmentationMask) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::ShapeMismatch {
                expected: vec![self.height, self.width],
                found: vec![other.height, other.width],
            });
        }
        Ok(())
    }

    pub fn to_container(&self) -> TensorContainer {
        TensorContainer::u8(Layout::Hw, vec![self.height, self.width], self.data.clone())
            .expect("valid mask")
    }

    pub fn from_container(t: &TensorContainer) -> Result<Self> {
        let data = t
            .as_u8()
            .ok_or_else(|| Error::InvalidTensor("expected u8 mask".into()))?;
        match (t.layout, t.shape.as_slice()) {
            (Layout::Hw, &[h, w]) => Self::new(h, w, data.to_vec()),
            _ => Err(Error::InvalidTensor(format!(
                "expected HW mask, got {:?} {:?}",
                t.layout, t.shape
            ))),
        }
    }

    /// Binary PGM (P5), foreground written as 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| if v != 0 { 255 } else { 0 }));
        out
    }
}

/// Per-pixel aggregated features (H×W×D) and the timesteps averaged into them.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedFeatures {
    pub data: ImageTensor,
    pub timesteps_used: Vec<usize>,
}

impl AggregatedFeatures {
    pub fn dim(&self) -> usize {
        self.data.channels()
    }

    pub fn to_container(&self) -> TensorContainer {
        self.data
            .to_container()
            .with_seed_meta(serde_json::json!({ "timesteps": self.timesteps_used }))
    }

    pub fn from_container(t: &TensorContainer) -> Result<Self> {
        let data = ImageTensor::from_container(t)?;
        let timesteps_used = t
            .seed_meta
            .as_ref()
            .and_then(|m| m.get("timesteps"))
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .unwrap_or_default();
        Ok(Self {
            data,
            timesteps_used,
        })
    }
}

/// H×W×O decoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelEmbeddingMap {
    pub data: ImageTensor,
    /// True when every pixel vector was successfully scaled to unit length.
    pub normalized: bool,
}

impl PixelEmbeddingMap {
    pub fn dim(&self) -> usize {
        self.data.channels()
    }
}
