//! Adam and the shared minibatch training loop.

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Probability of feeding the ground-truth previous frame to the decoder.
    pub teacher_forcing_ratio: f64,
    pub seed: u64,
    /// Global-norm gradient clip; off when `None`.
    pub grad_clip: Option<f64>,
    /// Stop after this many epochs without relative improvement of
    /// `early_stop_tolerance` over the best epoch loss.
    pub early_stop_patience: Option<usize>,
    pub early_stop_tolerance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            epochs: 50,
            teacher_forcing_ratio: 1.0,
            seed: 0,
            grad_clip: None,
            early_stop_patience: Some(5),
            early_stop_tolerance: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.teacher_forcing_ratio) {
            return Err(Error::Config(format!(
                "teacher_forcing_ratio {} not in [0, 1]",
                self.teacher_forcing_ratio
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!("grad_clip {c} must be > 0")));
            }
        }
        Ok(())
    }
}

/// First and second moment estimates, one tensor per parameter in visiting order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new<P: Parameters<S>>(params: &P) -> Self {
        let zeros: Vec<Tensor<S>> = params
            .named()
            .into_iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Gradients are checked before any
/// parameter is touched, so a NaN leaves `params` and `state` unchanged.
pub fn adam_step<S: Scalar, P: Parameters<S>>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState<S>,
    cfg: &TrainConfig,
) -> Result<()> {
    let named = grads.named();
    if named.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "{} gradient tensors for {} moment tensors",
            named.len(),
            state.m.len()
        )));
    }
    for ((name, g), m) in named.iter().zip(&state.m) {
        if g.shape() != m.shape() {
            return Err(Error::Dimension(format!("gradient {name} has shape {:?}", g.shape())));
        }
        if !g.is_finite() {
            return Err(Error::Training(format!("non-finite gradient in parameter {name}")));
        }
    }
    state.step += 1;
    let (b1, b2) = (S::lit(cfg.beta1), S::lit(cfg.beta2));
    let lr = S::lit(cfg.learning_rate);
    let eps = S::lit(cfg.eps);
    let one = S::one();
    let c1 = one - b1.powi(state.step as i32);
    let c2 = one - b2.powi(state.step as i32);
    let mut k = 0;
    params.visit_mut(&mut |_, p| {
        let g = named[k].1.data();
        let m = state.m[k].data_mut();
        for (mi, &gi) in m.iter_mut().zip(g) {
            *mi = b1 * *mi + (one - b1) * gi;
        }
        let v = state.v[k].data_mut();
        for (vi, &gi) in v.iter_mut().zip(g) {
            *vi = b2 * *vi + (one - b2) * gi * gi;
        }
        let (m, v) = (state.m[k].data(), state.v[k].data());
        for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = mi / c1;
            let v_hat = vi / c2;
            *pi -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        k += 1;
    });
    Ok(())
}

/// Outcome of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-sample loss over the training set before any update.
    pub initial_loss: f64,
    /// Mean per-sample loss of each completed epoch (computed on the fly,
    /// before each batch's update).
    pub history: Vec<f64>,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.history.last().copied().unwrap_or(self.initial_loss)
    }

    /// `epoch,mean_loss` lines with header.
    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss\n");
        for (e, l) in self.history.iter().enumerate() {
            s.push_str(&format!("{},{l}\n", e + 1));
        }
        s
    }
}

/// Seed for sample `index` in `epoch`, for stochastic per-sample choices
/// such as teacher forcing.
pub fn sample_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    SeededRng::with_stream(seed, 0x5eed_0000_0000 + epoch as u64)
        .derive(index as u64)
        .next_u64()
}

/// Minibatch Adam over `n_samples`.
///
/// `sample_grad(model, index, sample_seed)` returns the loss of one sample
/// and its gradient. Per-sample work runs on the rayon pool; gradients are
/// summed in index order, so the result does not depend on thread count.
pub fn fit<S, P, F>(model: &mut P, n_samples: usize, cfg: &TrainConfig, sample_grad: F) -> Result<TrainReport>
where
    S: Scalar,
    P: Parameters<S> + Send + Sync,
    F: Fn(&P, usize, u64) -> Result<(S, P)> + Sync,
{
    cfg.validate()?;
    if n_samples == 0 {
        return Err(Error::Data("empty training set".into()));
    }
    let batch_loss = |model: &P, idx: &[usize], epoch: usize| -> Result<(f64, P)> {
        let parts: Vec<Result<(S, P)>> = idx
            .par_iter()
            .map(|&i| sample_grad(model, i, sample_seed(cfg.seed, epoch, i)))
            .collect();
        let mut total = model.zeros_like();
        let mut loss = 0.0;
        for part in parts {
            let (l, g) = part?;
            loss += l.f64();
            total.add_assign(&g);
        }
        total.scale(S::one() / S::lit(idx.len() as f64));
        Ok((loss, total))
    };

    let all: Vec<usize> = (0..n_samples).collect();
    let mut initial = 0.0;
    for chunk in all.chunks(cfg.batch_size.max(1)) {
        initial += batch_loss(model, chunk, 0)?.0;
    }
    let initial_loss = initial / n_samples as f64;
    if !initial_loss.is_finite() {
        return Err(Error::Training("initial loss is not finite".into()));
    }
    info!("initial loss {initial_loss:.6}");

    let mut adam = AdamState::new(model);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = initial_loss;
    let mut stale = 0;
    let mut stopped_early = false;
    let root = SeededRng::new(cfg.seed);
    for epoch in 1..=cfg.epochs {
        let mut order = all.clone();
        root.derive(epoch as u64).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, mut grads) = batch_loss(model, batch, epoch)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss in epoch {epoch}; parameters kept from the last good step"
                )));
            }
            if let Some(clip) = cfg.grad_clip {
                let norm = grads.global_norm().f64();
                if norm > clip {
                    grads.scale(S::lit(clip / norm));
                }
            }
            adam_step(model, &grads, &mut adam, cfg)?;
            epoch_loss += loss;
        }
        let mean = epoch_loss / n_samples as f64;
        debug!("epoch {epoch}: loss {mean:.6}");
        history.push(mean);
        if mean < best * (1.0 - cfg.early_stop_tolerance) {
            best = mean;
            stale = 0;
        } else {
            stale += 1;
        }
        if let Some(p) = cfg.early_stop_patience {
            if stale >= p {
                info!("early stop after epoch {epoch}: no improvement for {p} epochs");
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainReport {
        initial_loss,
        history,
        stopped_early,
    })
}
