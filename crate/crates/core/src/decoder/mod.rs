//! Pixel decoder: a ReLU MLP applied independently to every pixel's feature
//! vector, followed by L2 normalization of the output.

pub mod loss;
pub mod train;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::raster::{AggregatedFeatures, ImageTensor, PixelEmbeddingMap};
use crate::tensor_io::{read_tensor, write_tensor, Layout, TensorContainer};

pub use loss::{supcon_grad, supcon_loss, supcon_loss_and_grad, ContrastiveBatch, LossReduction};
pub use train::{train_decoder, train_from, CapMode, LossTrace, Pooling, TrainConfig, TrainOutcome};

/// Hidden and output widths of the default decoder; the input width is the feature dimension.
pub const DEFAULT_WIDTHS: [usize; 4] = [16, 16, 16, 16];

/// Norms below this are not divided; the pixel's embedding is zeroed instead.
pub const NORM_EPS: f64 = 1e-8;

/// Pixels per work unit; fixed so reductions do not depend on the thread count.
const CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    /// out_dim × in_dim, row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Dense {
    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias[o] as f64;
            for (w, v) in row.iter().zip(x) {
                acc += *w as f64 * v;
            }
            out.push(acc);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelDecoder {
    layers: Vec<Dense>,
    normalize: bool,
    seed: u64,
}

/// Parameter gradients, same layout as the decoder's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros_like(net: &PixelDecoder) -> Self {
        Self {
            weights: net.layers.iter().map(|l| vec![0.0; l.weight.len()]).collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    fn add(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    fn scale(&mut self, s: f64) {
        self.weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .flat_map(|v| v.iter_mut())
            .for_each(|x| *x *= s);
    }
}

/// Result of a forward pass over a set of pixels, kept for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Per layer, N × width activations (post-ReLU for hidden layers, raw for the output).
    activations: Vec<Vec<f64>>,
    /// N × out embeddings after normalization.
    pub embeddings: Vec<f32>,
    /// Pre-normalization output norms.
    norms: Vec<f64>,
    input: Vec<f32>,
}

impl PixelDecoder {
    /// `sizes = [D, h1, ..., O]`, Glorot-uniform weights and zero biases.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "decoder needs at least two positive layer sizes, got {sizes:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                Dense {
                    in_dim: fan_in,
                    out_dim: fan_out,
                    weight: (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..=limit)).collect(),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self {
            layers,
            normalize: true,
            seed,
        })
    }

    pub fn from_layers(layers: Vec<Dense>, normalize: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("decoder needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(Error::InvalidConfig(format!("layer {i} has inconsistent parameter sizes")));
            }
            if i > 0 && layers[i - 1].out_dim != l.in_dim {
                return Err(Error::DimensionMismatch {
                    expected: layers[i - 1].out_dim,
                    found: l.in_dim,
                });
            }
        }
        Ok(Self {
            layers,
            normalize,
            seed: 0,
        })
    }

    pub fn with_normalize(mut self, normalize: bool) -> Self {
        self.normalize = normalize;
        self
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].in_dim];
        s.extend(self.layers.iter().map(|l| l.out_dim));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn normalize(&self) -> bool {
        self.normalize
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Raw output (before normalization) and hidden activations for one pixel.
    fn forward_one(&self, x: &[f32], acts: &mut [Vec<f64>]) {
        let mut input: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let out = &mut acts[l];
            layer.forward(&input, out);
            if l != last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            input.clone_from(out);
        }
    }

    fn finish(&self, raw: &[f64], out: &mut [f32]) -> (f64, bool) {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !self.normalize {
            out.iter_mut().zip(raw).for_each(|(o, &r)| *o = r as f32);
            return (norm, true);
        }
        if norm < NORM_EPS {
            out.iter_mut().for_each(|o| *o = 0.0);
            return (norm, false);
        }
        out.iter_mut().zip(raw).for_each(|(o, &r)| *o = (r / norm) as f32);
        (norm, true)
    }

    /// Embed one feature vector; returns whether normalization succeeded.
    pub fn embed(&self, x: &[f32], out: &mut [f32]) -> Result<bool> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        let mut acts: Vec<Vec<f64>> = self.layers.iter().map(|l| Vec::with_capacity(l.out_dim)).collect();
        self.forward_one(x, &mut acts);
        Ok(self.finish(acts.last().expect("layers"), out).1)
    }

    /// Forward N×D inputs, keeping everything needed for [`Self::backward`].
    pub fn forward_batch(&self, inputs: &[f32]) -> Result<ForwardCache> {
        let d = self.input_dim();
        if !inputs.len().is_multiple_of(d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: inputs.len() % d,
            });
        }
        let n = inputs.len() / d;
        let o = self.output_dim();
        // per chunk: layer activations, embeddings, pre-normalization norms
        type Part = (Vec<Vec<f64>>, Vec<f32>, Vec<f64>);
        let parts: Vec<Part> = inputs
            .par_chunks(CHUNK * d)
            .map(|chunk| {
                let mut acts: Vec<Vec<f64>> = self.layers.iter().map(|_| Vec::new()).collect();
                let mut scratch: Vec<Vec<f64>> = self.layers.iter().map(|l| Vec::with_capacity(l.out_dim)).collect();
                let rows = chunk.len() / d;
                let mut emb = vec![0.0f32; rows * o];
                let mut norms = Vec::with_capacity(rows);
                for (r, x) in chunk.chunks_exact(d).enumerate() {
                    self.forward_one(x, &mut scratch);
                    for (a, s) in acts.iter_mut().zip(&scratch) {
                        a.extend_from_slice(s);
                    }
                    let (norm, _) = self.finish(scratch.last().expect("layers"), &mut emb[r * o..(r + 1) * o]);
                    norms.push(norm);
                }
                (acts, emb, norms)
            })
            .collect();
        let mut activations: Vec<Vec<f64>> = self.layers.iter().map(|l| Vec::with_capacity(n * l.out_dim)).collect();
        let mut embeddings = Vec::with_capacity(n * o);
        let mut norms = Vec::with_capacity(n);
        for (acts, emb, nm) in parts {
            for (dst, src) in activations.iter_mut().zip(acts) {
                dst.extend(src);
            }
            embeddings.extend(emb);
            norms.extend(nm);
        }
        Ok(ForwardCache {
            activations,
            embeddings,
            norms,
            input: inputs.to_vec(),
        })
    }

    /// Backpropagate `∂L/∂z` (N×O, w.r.t. the normalized embeddings) to parameter gradients.
    pub fn backward(&self, cache: &ForwardCache, d_embeddings: &[f64]) -> Result<Gradients> {
        let o = self.output_dim();
        let d = self.input_dim();
        let n = cache.norms.len();
        if d_embeddings.len() != n * o {
            return Err(Error::DimensionMismatch {
                expected: n * o,
                found: d_embeddings.len(),
            });
        }
        let last = self.layers.len() - 1;
        let partials: Vec<Gradients> = (0..n)
            .collect::<Vec<_>>()
            .par_chunks(CHUNK)
            .map(|rows| {
                let mut grads = Gradients::zeros_like(self);
                for &p in rows {
                    // through the normalization: dy = (dz - z⟨z, dz⟩) / ‖y‖
                    let raw = &cache.activations[last][p * o..(p + 1) * o];
                    let dz = &d_embeddings[p * o..(p + 1) * o];
                    let norm = cache.norms[p];
                    let mut delta: Vec<f64> = if !self.normalize {
                        dz.to_vec()
                    } else if norm < NORM_EPS {
                        vec![0.0; o]
                    } else {
                        let proj: f64 = raw.iter().zip(dz).map(|(y, g)| y / norm * g).sum();
                        raw.iter().zip(dz).map(|(y, g)| (g - y / norm * proj) / norm).collect()
                    };
                    for l in (0..=last).rev() {
                        let layer = &self.layers[l];
                        let input: Vec<f64> = if l == 0 {
                            cache.input[p * d..(p + 1) * d].iter().map(|&v| v as f64).collect()
                        } else {
                            let w = self.layers[l - 1].out_dim;
                            cache.activations[l - 1][p * w..(p + 1) * w].to_vec()
                        };
                        let gw = &mut grads.weights[l];
                        for (oi, &dv) in delta.iter().enumerate() {
                            if dv == 0.0 {
                                continue;
                            }
                            grads.biases[l][oi] += dv;
                            let row = &mut gw[oi * layer.in_dim..(oi + 1) * layer.in_dim];
                            row.iter_mut().zip(&input).for_each(|(g, x)| *g += dv * x);
                        }
                        if l == 0 {
                            break;
                        }
                        let mut prev = vec![0.0f64; layer.in_dim];
                        for (oi, &dv) in delta.iter().enumerate() {
                            if dv == 0.0 {
                                continue;
                            }
                            let row = &layer.weight[oi * layer.in_dim..(oi + 1) * layer.in_dim];
                            prev.iter_mut().zip(row).for_each(|(pv, &w)| *pv += dv * w as f64);
                        }
                        // ReLU: zero where the hidden activation was clamped
                        prev.iter_mut().zip(&input).for_each(|(pv, &a)| {
                            if a <= 0.0 {
                                *pv = 0.0;
                            }
                        });
                        delta = prev;
                    }
                }
                grads
            })
            .collect();
        let mut total = Gradients::zeros_like(self);
        for g in &partials {
            total.add(g);
        }
        Ok(total)
    }

    /// Contrastive loss of the decoded `inputs` (N×D) and its parameter gradients.
    pub fn loss_and_gradients(
        &self,
        inputs: &[f32],
        labels: &[u8],
        tau: f64,
        reduction: LossReduction,
    ) -> Result<(f64, Gradients)> {
        let cache = self.forward_batch(inputs)?;
        let batch = ContrastiveBatch::new(cache.embeddings.clone(), self.output_dim(), labels.to_vec(), false)?;
        let scale = reduction.scale(batch.len());
        let (loss, mut dz) = supcon_loss_and_grad(&batch, tau)?;
        let loss = loss * scale;
        dz.iter_mut().for_each(|g| *g *= scale);
        let grads = self.backward(&cache, &dz)?;
        Ok((loss, grads))
    }

    /// Plain SGD: `θ ← θ - lr·∇θ`.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f32) {
        let lr = lr as f64;
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (w, g) in layer.weight.iter_mut().zip(&grads.weights[l]) {
                *w = (*w as f64 - lr * g) as f32;
            }
            for (b, g) in layer.bias.iter_mut().zip(&grads.biases[l]) {
                *b = (*b as f64 - lr * g) as f32;
            }
        }
    }

    /// Write one `.cldf` per weight matrix and bias plus `manifest.json`.
    pub fn save(&self, dir: &Path, config_echo: Value) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::at(dir))?;
        let mut files = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let w_name = format!("layer{i}_weight.cldf");
            let b_name = format!("layer{i}_bias.cldf");
            write_tensor(
                dir.join(&w_name),
                &TensorContainer::f32(Layout::Hw, vec![l.out_dim, l.in_dim], l.weight.clone())?,
            )?;
            write_tensor(
                dir.join(&b_name),
                &TensorContainer::f32(Layout::Hw, vec![1, l.out_dim], l.bias.clone())?,
            )?;
            files.push(LayerFiles {
                weight: w_name,
                bias: b_name,
            });
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            layer_sizes: self.sizes(),
            activation: "relu".into(),
            normalize: self.normalize,
            seed: self.seed,
            layers: files,
            config: config_echo,
        };
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&path, text).map_err(Error::at(&path))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(Error::at(&path))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::InvalidConfig(format!("unknown checkpoint format {:?}", manifest.format)));
        }
        if manifest.activation != "relu" {
            return Err(Error::InvalidConfig(format!("unsupported activation {:?}", manifest.activation)));
        }
        if manifest.layer_sizes.len() != manifest.layers.len() + 1 {
            return Err(Error::InvalidConfig("manifest layer count disagrees with layer_sizes".into()));
        }
        let mut layers = Vec::with_capacity(manifest.layers.len());
        for (i, files) in manifest.layers.iter().enumerate() {
            let (in_dim, out_dim) = (manifest.layer_sizes[i], manifest.layer_sizes[i + 1]);
            let w = read_tensor(dir.join(&files.weight))?;
            let b = read_tensor(dir.join(&files.bias))?;
            if w.shape != [out_dim, in_dim] || b.shape != [1, out_dim] {
                return Err(Error::ShapeMismatch {
                    expected: vec![out_dim, in_dim],
                    found: w.shape.clone(),
                });
            }
            let f32_of = |t: &TensorContainer| {
                t.as_f32()
                    .map(<[f32]>::to_vec)
                    .ok_or_else(|| Error::InvalidTensor("checkpoint tensors must be f32".into()))
            };
            layers.push(Dense {
                in_dim,
                out_dim,
                weight: f32_of(&w)?,
                bias: f32_of(&b)?,
            });
        }
        let mut net = Self::from_layers(layers, manifest.normalize)?;
        net.seed = manifest.seed;
        Ok(net)
    }
}

const MANIFEST_FORMAT: &str = "cldf-decoder-v1";

#[derive(Debug, Serialize, Deserialize)]
struct LayerFiles {
    weight: String,
    bias: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    layer_sizes: Vec<usize>,
    activation: String,
    normalize: bool,
    seed: u64,
    layers: Vec<LayerFiles>,
    config: Value,
}

/// Run the decoder over every pixel of a feature map.
pub fn decode(features: &AggregatedFeatures, net: &PixelDecoder) -> Result<PixelEmbeddingMap> {
    if features.dim() != net.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: net.input_dim(),
            found: features.dim(),
        });
    }
    let (h, w) = (features.data.height(), features.data.width());
    let o = net.output_dim();
    let d = net.input_dim();
    let parts: Vec<(Vec<f32>, bool)> = features
        .data
        .data()
        .par_chunks(CHUNK * d)
        .map(|chunk| {
            let mut out = vec![0.0f32; chunk.len() / d * o];
            let mut ok = true;
            for (x, z) in chunk.chunks_exact(d).zip(out.chunks_exact_mut(o)) {
                ok &= net.embed(x, z).expect("dimension checked");
            }
            (out, ok)
        })
        .collect();
    let normalized = net.normalize() && parts.iter().all(|(_, ok)| *ok);
    let data: Vec<f32> = parts.into_iter().flat_map(|(v, _)| v).collect();
    Ok(PixelEmbeddingMap {
        data: ImageTensor::new(h, w, o, data)?,
        normalized,
    })
}
