//! Helpers shared by integration test targets.
#![allow(dead_code)]

use hmg_core::gptcore::{
    Discretizer, HeadKind, InputNorm, LossKind, ModelCheckpoint, ModelConfig, Phase, Provenance, Weights,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(embed: usize, bins: usize, input_dim: usize, output_dim: usize) -> ModelConfig {
    ModelConfig {
        context: 4,
        embed,
        layers: 1,
        heads: 2,
        bins,
        input_dim,
        output_dim,
        head: HeadKind::Observation,
        dropout: 0.0,
    }
}

/// A checkpoint whose every parameter is drawn from N(0, scale²)-ish
/// uniform noise, so all gradient paths are exercised.
pub fn random_checkpoint(config: ModelConfig, seed: u64, scale: f64) -> ModelCheckpoint {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Weights::init(&config, seed).unwrap();
    for t in w.tensors_mut() {
        t.iter_mut().for_each(|v| *v = rng.gen_range(-scale..scale) + 0.5 * scale * f64::from(u8::from(*v == 1.0)));
    }
    let d = config.output_dim;
    ModelCheckpoint {
        discretizer: Discretizer::new(vec![-1.0; d], vec![1.5; d], config.bins).unwrap(),
        input_norm: InputNorm {
            mean: (0..config.input_dim).map(|i| 0.1 * i as f64).collect(),
            std: (0..config.input_dim).map(|i| 1.0 + 0.5 * i as f64).collect(),
        },
        provenance: Provenance {
            dataset: "synthetic".into(),
            steps: 0,
            phase: Phase::Pretrained,
        },
        config,
        weights: w,
    }
}

pub fn random_window(rows: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows).map(|_| (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect()
}

pub fn random_targets(rows: usize, dim: usize, bins: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows).map(|_| (0..dim).map(|_| rng.gen_range(0..bins)).collect()).collect()
}

/// Worst per-tensor relative error between analytic and central-difference
/// gradients, `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, floor)`, with the tensor's name.
pub fn worst_gradient_error(c: &ModelCheckpoint, window: &[Vec<f64>], targets: &[Vec<usize>], loss: LossKind, h: f64, floor: f64) -> (f64, String) {
    let (_, grads) = c.backward(window, targets, loss).unwrap();
    let names: Vec<String> = c.config.tensor_specs().into_iter().map(|s| s.name).collect();
    let mut probe = c.clone();
    let mut worst = (0.0, String::new());
    let analytic = grads.tensors();
    for (ti, name) in names.iter().enumerate() {
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for (i, &a) in analytic[ti].iter().enumerate() {
            let orig = probe.weights.tensors()[ti][i];
            probe.weights.tensors_mut()[ti][i] = orig + h;
            let up = probe.backward(window, targets, loss).unwrap().0;
            probe.weights.tensors_mut()[ti][i] = orig - h;
            let down = probe.backward(window, targets, loss).unwrap().0;
            probe.weights.tensors_mut()[ti][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        let rel = diff.sqrt() / na.sqrt().max(nn.sqrt()).max(floor);
        if rel > worst.0 {
            worst = (rel, name.clone());
        }
    }
    worst
}
