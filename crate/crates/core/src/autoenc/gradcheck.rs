//! Finite-difference verification of the analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::layers::{self, Activation, LayerSpec};
use super::Autoencoder;
use crate::error::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute rather than relative terms.
const REL_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerCheck {
    pub layer: usize,
    pub coords: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub layers: Vec<LayerCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.layers.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }

    pub fn total_coords(&self) -> usize {
        self.layers.iter().map(|l| l.coords).sum()
    }
}

/// Compares analytic and central-difference gradients of the reconstruction
/// loss on `per_layer` randomly chosen coordinates (weights and biases) of
/// each layer in `layer_subset`. Layers with fewer parameters are checked
/// exhaustively.
pub fn gradient_check(
    net: &Autoencoder<f64>,
    image: &[f64],
    layer_subset: &[usize],
    per_layer: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if let Some(&bad) = layer_subset.iter().find(|&&l| l >= net.layers.len()) {
        return Err(Error::invalid(format!("no layer {bad}")));
    }
    let (_, grads) = net.loss_and_grad(&[image])?;
    let mut probe = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Vec::new();

    for &l in layer_subset {
        let n_w = net.layers[l].weight.len();
        let n_total = n_w + net.layers[l].bias.len();
        let picks = sample(&mut rng, n_total, per_layer.min(n_total)).into_vec();
        let mut worst: f64 = 0.0;
        for idx in &picks {
            let idx = *idx;
            let (analytic, slot): (f64, &mut f64) = if idx < n_w {
                (grads.weight[l][idx], &mut probe.layers[l].weight[idx])
            } else {
                (grads.bias[l][idx - n_w], &mut probe.layers[l].bias[idx - n_w])
            };
            let orig = *slot;
            *slot = orig + FD_STEP;
            let plus = probe.loss(&[image])?;
            set(&mut probe, l, idx, n_w, orig - FD_STEP);
            let minus = probe.loss(&[image])?;
            set(&mut probe, l, idx, n_w, orig);
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic, numeric));
        }
        report.push(LayerCheck {
            layer: l,
            coords: picks.len(),
            max_rel_error: worst,
        });
    }
    Ok(GradCheckReport { layers: report })
}

fn set(net: &mut Autoencoder<f64>, l: usize, idx: usize, n_w: usize, v: f64) {
    if idx < n_w {
        net.layers[l].weight[idx] = v;
    } else {
        net.layers[l].bias[idx - n_w] = v;
    }
}

/// Gradient check of a lone fully connected layer under an MSE loss against
/// a random target; returns the worst relative error over all parameters.
pub fn dense_layer_check(n_in: usize, n_out: usize, batch: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = LayerSpec::dense(n_in, n_out, Activation::None);
    let mut uniform = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let mut weight = uniform(spec.weight_len());
    let mut bias = uniform(spec.bias_len());
    let input = uniform(batch * n_in);
    let target = uniform(batch * n_out);

    let loss = |w: &[f64], b: &[f64]| -> f64 {
        let out = layers::forward(&spec, w, b, &input, batch);
        out.iter().zip(&target).map(|(y, t)| (y - t).powi(2)).sum::<f64>() / out.len() as f64
    };
    let out = layers::forward(&spec, &weight, &bias, &input, batch);
    let scale = 2.0 / out.len() as f64;
    let d_out: Vec<f64> = out.iter().zip(&target).map(|(y, t)| scale * (y - t)).collect();
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; bias.len()];
    layers::backward(&spec, &weight, &input, &out, &d_out, batch, &mut dw, &mut db, false);

    let mut worst: f64 = 0.0;
    for i in 0..weight.len() {
        let orig = weight[i];
        weight[i] = orig + FD_STEP;
        let plus = loss(&weight, &bias);
        weight[i] = orig - FD_STEP;
        let minus = loss(&weight, &bias);
        weight[i] = orig;
        worst = worst.max(relative_error(dw[i], (plus - minus) / (2.0 * FD_STEP)));
    }
    for i in 0..bias.len() {
        let orig = bias[i];
        bias[i] = orig + FD_STEP;
        let plus = loss(&weight, &bias);
        bias[i] = orig - FD_STEP;
        let minus = loss(&weight, &bias);
        bias[i] = orig;
        worst = worst.max(relative_error(db[i], (plus - minus) / (2.0 * FD_STEP)));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::super::Arch;
    use super::*;

    #[test]
    fn lone_dense_layer() {
        assert!(dense_layer_check(12, 7, 3, 4) < 1e-6);
    }

    #[test]
    fn zero_everything_gives_zero_encoder_gradients() {
        let net = Autoencoder::<f64>::zeros(Arch::reduced(8)).unwrap();
        let (_, g) = net.loss_and_grad(&[&vec![0.0; 10_000]]).unwrap();
        for l in 0..4 {
            assert!(g.weight[l].iter().all(|&v| v == 0.0), "layer {l}");
        }
        // the output bias still receives gradient from the 0.5 vs 0 error
        assert!(g.bias[9][0] > 0.0);
    }

    #[test]
    fn reduced_net_small_sample() {
        let net = Autoencoder::<f64>::init(Arch::reduced(8), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        let report = gradient_check(&net, &img, &[0, 4, 9], 10, 2).unwrap();
        assert!(report.max_rel_error() < 1e-3, "{report:?}");
    }
}
