//! Dice / IoU and dataset-level mean ± std reports.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::raster::SegmentationMask;

/// `(|P ∩ G|, |P|, |G|)`
fn overlap(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<(usize, usize, usize)> {
    pred.same_shape(gt)?;
    let mut inter = 0;
    let mut p = 0;
    let mut g = 0;
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let (a, b) = (a != 0, b != 0);
        inter += usize::from(a && b);
        p += usize::from(a);
        g += usize::from(b);
    }
    Ok((inter, p, g))
}

/// `2|P∩G| / (|P|+|G|)`; two empty masks score 1.
pub fn dice(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<f64> {
    let (i, p, g) = overlap(pred, gt)?;
    Ok(if p + g == 0 { 1.0 } else { 2.0 * i as f64 / (p + g) as f64 })
}

/// `|P∩G| / |P∪G|`; two empty masks score 1.
pub fn iou(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<f64> {
    let (i, p, g) = overlap(pred, gt)?;
    let union = p + g - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub dice: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dice_mean: f64,
    pub dice_std: f64,
    pub iou_mean: f64,
    pub iou_std: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<Value>,
}

/// Mean and population standard deviation, summed in order.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn from_samples(samples: &[SampleMetrics]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("evaluation pairs"));
        }
        let d: Vec<f64> = samples.iter().map(|s| s.dice).collect();
        let i: Vec<f64> = samples.iter().map(|s| s.iou).collect();
        let (dice_mean, dice_std) = mean_std(&d);
        let (iou_mean, iou_std) = mean_std(&i);
        Ok(Self {
            dice_mean,
            dice_std,
            iou_mean,
            iou_std,
            n: samples.len(),
            config: None,
        })
    }

    pub fn with_config(mut self, config: Value) -> Self {
        self.config = Some(config);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub samples: Vec<SampleMetrics>,
}

/// Score named `(id, pred, gt)` triples.
pub fn evaluate<'a, I>(pairs: I) -> Result<Evaluation>
where
    I: IntoIterator<Item = (String, &'a SegmentationMask, &'a SegmentationMask)>,
{
    let pairs: Vec<_> = pairs.into_iter().collect();
    let samples = pairs
        .into_par_iter()
        .map(|(id, p, g)| {
            Ok(SampleMetrics {
                dice: dice(p, g)?,
                iou: iou(p, g)?,
                id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport::from_samples(&samples)?;
    Ok(Evaluation { report, samples })
}

pub fn write_samples_csv(path: &Path, samples: &[SampleMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for s in samples {
        w.serialize(s).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(Error::at(path))?;
    Ok(())
}

pub fn read_samples_csv(path: &Path) -> Result<Vec<SampleMetrics>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

fn csv_error(path: &Path, source: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}
