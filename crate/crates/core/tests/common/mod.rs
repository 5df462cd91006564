//! Independent f64 reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn unit_vectors(rng: &mut impl Rng, n: usize, dim: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.extend(v.iter().map(|x| (x / norm) as f32));
    }
    out
}

pub fn widen(z: &[f32]) -> Vec<f64> {
    z.iter().map(|&v| v as f64).collect()
}

/// Direct double sum of the supervised contrastive loss, summed over anchors.
pub fn supcon_oracle(z: &[f64], dim: usize, labels: &[u8], tau: f64) -> f64 {
    let n = labels.len();
    let sim = |i: usize, j: usize| (0..dim).map(|k| z[i * dim + k] * z[j * dim + k]).sum::<f64>() / tau;
    let mut total = 0.0;
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        let denom: f64 = (0..n).filter(|&a| a != i).map(|a| sim(i, a).exp()).sum();
        let inner: f64 = positives.iter().map(|&p| (sim(i, p).exp() / denom).ln()).sum();
        total -= inner / positives.len() as f64;
    }
    total
}

/// One dense layer in f64: (weight out×in row-major, bias, in, out).
pub type Layer = (Vec<f64>, Vec<f64>, usize, usize);

/// ReLU MLP (no activation on the last layer) followed by L2 normalization.
pub fn mlp_oracle(layers: &[Layer], x: &[f32], n: usize) -> Vec<f64> {
    let d = layers[0].2;
    let mut out = Vec::new();
    for p in 0..n {
        let mut h: Vec<f64> = x[p * d..(p + 1) * d].iter().map(|&v| v as f64).collect();
        for (l, (w, b, din, dout)) in layers.iter().enumerate() {
            let mut y = vec![0.0; *dout];
            for o in 0..*dout {
                y[o] = b[o] + (0..*din).map(|i| w[o * din + i] * h[i]).sum::<f64>();
                if l + 1 < layers.len() {
                    y[o] = y[o].max(0.0);
                }
            }
            h = y;
        }
        let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.extend(h.iter().map(|v| v / norm));
    }
    out
}

pub fn layers_of(net: &cldf::decoder::PixelDecoder) -> Vec<Layer> {
    net.layers()
        .iter()
        .map(|l| (widen(&l.weight), widen(&l.bias), l.in_dim, l.out_dim))
        .collect()
}

/// Central-difference gradient of `f` with respect to every parameter, in layer order
/// (weights then bias of each layer).
pub fn fd_gradient(layers: &[Layer], h: f64, f: impl Fn(&[Layer]) -> f64) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for l in 0..layers.len() {
        for bias in [false, true] {
            let len = if bias { layers[l].1.len() } else { layers[l].0.len() };
            let mut g = Vec::with_capacity(len);
            for k in 0..len {
                let mut plus = layers.to_vec();
                let mut minus = layers.to_vec();
                let (p, m) = if bias {
                    (&mut plus[l].1[k], &mut minus[l].1[k])
                } else {
                    (&mut plus[l].0[k], &mut minus[l].0[k])
                };
                *p += h;
                *m -= h;
                g.push((f(&plus) - f(&minus)) / (2.0 * h));
            }
            out.push(g);
        }
    }
    out
}
