use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cldf::decoder::{train_from, LossReduction, PixelDecoder, TrainConfig};
use cldf::fusion::{binarize, SeedSelection};
use cldf::raster::{AggregatedFeatures, ImageTensor, MapKind, SegmentationMask};
use cldf::synth::{generate, read_map, SynthConfig};
use cldf::tensor_io::write_tensor;

mod common;
use common::{fd_gradient, layers_of, mlp_oracle, supcon_oracle, Layer};

fn flat_params(layers: &[Layer]) -> Vec<f64> {
    layers.iter().flat_map(|(w, b, _, _)| w.iter().chain(b).copied()).collect()
}

/// θ - lr·∇θ with the gradient from central differences of the f64 oracle (mean loss).
fn oracle_step(net: &PixelDecoder, x: &[f32], labels: &[u8], tau: f64, lr: f64) -> Vec<f64> {
    let n = labels.len();
    let base = layers_of(net);
    let dim = net.output_dim();
    let grad = fd_gradient(&base, 1e-6, |p| supcon_oracle(&mlp_oracle(p, x, n), dim, labels, tau) / n as f64);
    flat_params(&base)
        .iter()
        .zip(grad.iter().flatten())
        .map(|(t, g)| t - lr * g)
        .collect()
}

fn params_of(net: &PixelDecoder) -> Vec<f64> {
    flat_params(&layers_of(net))
}

#[test]
fn one_sgd_step_matches_f64_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let net = PixelDecoder::new(&[5, 8, 8, 4], 9).unwrap();
    let x: Vec<f32> = (0..4 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels = [1u8, 1, 0, 0];
    let (tau, lr) = (0.5, 0.1f32);
    let want = oracle_step(&net, &x, &labels, tau, lr as f64);

    let mut stepped = net.clone();
    let (_, grads) = stepped.loss_and_gradients(&x, &labels, tau, LossReduction::Mean).unwrap();
    stepped.sgd_step(&grads, lr);
    let got = params_of(&stepped);
    let worst = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-6, "max parameter deviation {worst:e}");
    assert_ne!(got, params_of(&net));
}

#[test]
fn trainer_single_step_matches_f64_oracle() {
    // one 2x2 image, two foreground and two background seeds, one epoch of one batch
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = PixelDecoder::new(&[3, 6, 3], 2).unwrap();
    let x: Vec<f32> = (0..4 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let features = AggregatedFeatures {
        data: ImageTensor::new(2, 2, 3, x.clone()).unwrap(),
        timesteps_used: vec![1],
    };
    let seeds = SeedSelection {
        height: 2,
        width: 2,
        foreground: vec![0, 3],
        background: vec![1, 2],
    };
    let cfg = TrainConfig {
        lr: 0.2,
        epochs: 1,
        batch_images: 1,
        widths: vec![6, 3],
        tau: 0.3,
        ..TrainConfig::default()
    };
    let out = train_from(net.clone(), &[(features, seeds)], &cfg, 1).unwrap();
    let labels = [1u8, 0, 0, 1];
    let want = oracle_step(&net, &x, &labels, cfg.tau, cfg.lr as f64);
    let got = params_of(&out.decoder);
    let worst = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-6, "max parameter deviation {worst:e}");
    let loss0 = supcon_oracle(&mlp_oracle(&layers_of(&net), &x, 4), 3, &labels, cfg.tau) / 4.0;
    assert!((out.trace.batch_losses[0] - loss0).abs() < 1e-6);
}

fn pooled(pred: &[SegmentationMask], gt: &[SegmentationMask]) -> (f64, f64) {
    let (mut tp, mut fp, mut neg) = (0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        for (&a, &b) in p.data().iter().zip(g.data()) {
            tp += usize::from(a != 0 && b != 0);
            fp += usize::from(a != 0 && b == 0);
            neg += usize::from(b == 0);
        }
    }
    (tp as f64 / (tp + fp).max(1) as f64, fp as f64 / neg as f64)
}

#[test]
fn intersection_seeds_are_more_precise_than_either_map() {
    let samples = generate(
        &SynthConfig {
            count: 50,
            ..SynthConfig::default()
        },
        21,
    )
    .unwrap();
    let gt: Vec<SegmentationMask> = samples.iter().map(|s| s.scene.mask.clone()).collect();
    let cam: Vec<SegmentationMask> = samples.iter().map(|s| binarize(&s.cam, 0.5)).collect();
    let mg: Vec<SegmentationMask> = samples.iter().map(|s| binarize(&s.gradient, 0.5)).collect();
    let both: Vec<SegmentationMask> = cam
        .iter()
        .zip(&mg)
        .map(|(a, b)| {
            SegmentationMask::new(
                a.height(),
                a.width(),
                a.data().iter().zip(b.data()).map(|(&x, &y)| x & y).collect(),
            )
            .unwrap()
        })
        .collect();
    let (p_cam, fpr_cam) = pooled(&cam, &gt);
    let (p_mg, fpr_mg) = pooled(&mg, &gt);
    let (p_both, fpr_both) = pooled(&both, &gt);
    assert!(p_both >= p_cam.max(p_mg), "precision {p_both} vs cam {p_cam}, mg {p_mg}");
    assert!(fpr_both < fpr_cam && fpr_both < fpr_mg, "fp rate {fpr_both} vs {fpr_cam}, {fpr_mg}");
}

#[test]
fn synthetic_cam_survives_a_file_round_trip() {
    let s = &generate(
        &SynthConfig {
            count: 1,
            ..SynthConfig::default()
        },
        8,
    )
    .unwrap()[0];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cam.cldf");
    write_tensor(&path, &s.cam.to_container()).unwrap();
    assert_eq!(read_map(&path, MapKind::Cam).unwrap(), s.cam);
}
