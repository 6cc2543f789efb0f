use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Autoencoder, Gradients, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 20,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.batch_size > 0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training configuration {self:?}")))
        }
    }
}

/// Loss before training and the mean training loss of every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(self.initial_loss)
    }
}

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub step: u64,
    m: Gradients<T>,
    v: Gradients<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(net: &Autoencoder<T>) -> Self {
        Self {
            step: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }
}

fn adam_update<T: Scalar>(p: &mut [T], g: &[T], m: &mut [T], v: &mut [T], coeffs: [T; 5]) {
    let [lr_t, b1, b2, eps, one] = coeffs;
    for i in 0..p.len() {
        let gi = g[i];
        m[i] = b1 * m[i] + (one - b1) * gi;
        v[i] = b2 * v[i] + (one - b2) * gi * gi;
        p[i] -= lr_t * m[i] / (v[i].sqrt() + eps);
    }
}

/// One Adam update using bias-corrected moments.
pub fn adam_step<T: Scalar>(
    net: &mut Autoencoder<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    // lr * m_hat / (sqrt(v_hat) + eps) with the corrections folded into the step
    // size and epsilon.
    let lr_t = cfg.learning_rate * c2.sqrt() / c1;
    let eps_t = cfg.eps * c2.sqrt();
    let coeffs = [
        T::from_f64(lr_t),
        T::from_f64(cfg.beta1),
        T::from_f64(cfg.beta2),
        T::from_f64(eps_t),
        T::ONE,
    ];
    for (i, layer) in net.layers.iter_mut().enumerate() {
        adam_update(
            &mut layer.weight,
            &grads.weight[i],
            &mut state.m.weight[i],
            &mut state.v.weight[i],
            coeffs,
        );
        adam_update(
            &mut layer.bias,
            &grads.bias[i],
            &mut state.m.bias[i],
            &mut state.v.bias[i],
            coeffs,
        );
    }
}

/// Mini-batch Adam training. The shuffle order is drawn from `cfg.seed`, so
/// the same seed, data and configuration reproduce the loss curve exactly.
pub fn train<T: Scalar>(net: &mut Autoencoder<T>, data: &[&[T]], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let initial_loss = batched_loss(net, data, cfg.batch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut state = AdamState::new(net);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&[T]> = idx.iter().map(|&i| data[i]).collect();
            let (loss, grads) = net.loss_and_grad(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "loss became {loss} at epoch {epoch}, batch {b} (learning rate {})",
                    cfg.learning_rate
                )));
            }
            total += loss * idx.len() as f64;
            adam_step(net, &grads, &mut state, cfg);
        }
        epoch_losses.push(total / data.len() as f64);
    }
    Ok(TrainReport {
        initial_loss,
        epoch_losses,
    })
}

fn batched_loss<T: Scalar>(net: &Autoencoder<T>, data: &[&[T]], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in data.chunks(batch) {
        total += net.loss(chunk)? * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}
