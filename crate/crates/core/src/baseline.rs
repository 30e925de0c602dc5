//! Discriminative comparison model: an LSTM stack over the limited-channel
//! frame, pooled and mapped by an affine head to a single logit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::{dense_interpolate, dense_interpolate_backward, EmbeddingConfig};
use crate::error::{Error, Result};
use crate::ingest::{FrameTensor, Label};
use crate::lstm::StackedLstm;
use crate::optim::{fit, TrainConfig, TrainReport};
use crate::params::Parameters;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{sigmoid, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    LastHidden,
    DenseInterpolation(EmbeddingConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnClassifier<S> {
    pub stack: StackedLstm<S>,
    /// `[1, h]` for last-hidden pooling, `[1, M·h]` for dense interpolation.
    pub head_w: Tensor<S>,
    pub head_b: Tensor<S>,
    pub pooling: Pooling,
}

fn pooled_width(pooling: &Pooling, hidden: usize) -> usize {
    match pooling {
        Pooling::LastHidden => hidden,
        Pooling::DenseInterpolation(cfg) => cfg.m * hidden,
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus<S: Scalar>(z: S) -> S {
    z.max(S::zero()) + (-z.abs()).exp().ln_1p()
}

impl<S: Scalar> RnnClassifier<S> {
    pub fn init(input_size: usize, hidden: usize, layers: usize, pooling: Pooling, rng: &mut SeededRng) -> Result<Self> {
        if input_size == 0 || hidden == 0 || layers == 0 {
            return Err(Error::Config("classifier dims must be positive".into()));
        }
        let stack = StackedLstm::init(input_size, hidden, layers, rng);
        let width = pooled_width(&pooling, hidden);
        Ok(Self {
            stack,
            head_w: Tensor::uniform(&[1, width], 1.0 / (width as f64).sqrt(), rng),
            head_b: Tensor::zeros(&[1]),
            pooling,
        })
    }

    /// All-zero parameters of the given shape; used when loading checkpoints.
    pub fn zeros(input_size: usize, hidden: usize, layers: usize, pooling: Pooling) -> Self {
        Self {
            stack: StackedLstm::zeros(input_size, hidden, layers),
            head_w: Tensor::zeros(&[1, pooled_width(&pooling, hidden)]),
            head_b: Tensor::zeros(&[1]),
            pooling,
        }
    }

    fn pool(&self, hidden: &Tensor<S>) -> Result<Vec<S>> {
        match &self.pooling {
            Pooling::LastHidden => Ok(hidden.row(hidden.dim(0) - 1).to_vec()),
            Pooling::DenseInterpolation(cfg) => Ok(dense_interpolate(hidden, cfg)?.into_data()),
        }
    }

    fn check_frame(&self, x: &Tensor<S>) -> Result<()> {
        if x.rank() != 2 || x.dim(0) == 0 || x.dim(1) != self.stack.input_size() {
            return Err(Error::Dimension(format!(
                "classifier expects [T, {}], got {:?}",
                self.stack.input_size(),
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn logit(&self, x: &Tensor<S>) -> Result<S> {
        self.check_frame(x)?;
        let out = self.stack.forward(x, None)?;
        let feat = self.pool(&out.hidden)?;
        Ok(dot(self.head_w.data(), &feat) + self.head_b.data()[0])
    }

    /// `σ(logit)`, the probability of the abnormal class.
    pub fn score(&self, x: &Tensor<S>) -> Result<S> {
        Ok(sigmoid(self.logit(x)?))
    }

    /// Logistic loss `softplus(z) − t·z` with `t = 1` for abnormal, and its gradient.
    pub fn loss_and_grad(&self, x: &Tensor<S>, label: Label) -> Result<(S, Self)> {
        self.check_frame(x)?;
        let out = self.stack.forward(x, None)?;
        let feat = self.pool(&out.hidden)?;
        let z = dot(self.head_w.data(), &feat) + self.head_b.data()[0];
        let t = if label.is_positive() { S::one() } else { S::zero() };
        let loss = softplus(z) - t * z;
        let dz = sigmoid(z) - t;

        let mut grads = self.zeros_like();
        for (g, &f) in grads.head_w.data_mut().iter_mut().zip(&feat) {
            *g += dz * f;
        }
        grads.head_b.data_mut()[0] += dz;
        let d_feat: Vec<S> = self.head_w.data().iter().map(|&w| dz * w).collect();
        let (steps, h) = (out.hidden.dim(0), out.hidden.dim(1));
        let d_hidden = match &self.pooling {
            Pooling::LastHidden => {
                let mut g = Tensor::zeros(&[steps, h]);
                g.row_mut(steps - 1).copy_from_slice(&d_feat);
                g
            }
            Pooling::DenseInterpolation(cfg) => dense_interpolate_backward(&d_feat, steps, h, cfg)?,
        };
        self.stack.backward(&out.steps, &d_hidden, None, &mut grads.stack)?;
        Ok((loss, grads))
    }

    pub fn predict_scores(&self, data: &FrameTensor<S>) -> Result<Vec<f64>> {
        (0..data.len())
            .into_par_iter()
            .map(|n| self.score(&data.frame(n)).map(|s| s.f64()))
            .collect()
    }
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

impl<S: Scalar> Parameters<S> for RnnClassifier<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        self.stack.visit(&mut |n, t| f(format!("rnn.{n}"), t));
        f("head.W".into(), &self.head_w);
        f("head.b".into(), &self.head_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        self.stack.visit_mut(&mut |n, t| f(&format!("rnn.{n}"), t));
        f("head.W", &mut self.head_w);
        f("head.b", &mut self.head_b);
    }
}

/// Trains on the labelled frames of `data` (`K̂` channels).
pub fn train_rnn_classifier<S: Scalar>(
    model: &mut RnnClassifier<S>,
    data: &FrameTensor<S>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if data.width() != model.stack.input_size() {
        return Err(Error::Dimension(format!(
            "classifier reads {} channels, data has {}",
            model.stack.input_size(),
            data.width()
        )));
    }
    let rows: Vec<usize> = (0..data.len()).filter(|&n| data.labeled[n]).collect();
    let pos = rows.iter().filter(|&&n| data.labels[n].is_positive()).count();
    if pos == 0 || pos == rows.len() {
        return Err(Error::Data(format!(
            "classifier needs both classes, got {pos} abnormal of {} labelled frames",
            rows.len()
        )));
    }
    log::info!("standard RNN: {} parameters", model.num_params());
    fit(model, rows.len(), cfg, |m: &RnnClassifier<S>, i, _| {
        let n = rows[i];
        m.loss_and_grad(&data.frame(n), data.labels[n])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert_eq!(softplus(-1000.0f64), 0.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn scores_are_probabilities() {
        let mut rng = SeededRng::new(2);
        let m = RnnClassifier::<f64>::init(2, 4, 2, Pooling::LastHidden, &mut rng).unwrap();
        let x = Tensor::uniform(&[6, 2], 3.0, &mut rng);
        let s = m.score(&x).unwrap();
        assert!(s > 0.0 && s < 1.0);
        assert!(m.score(&Tensor::zeros(&[6, 3])).is_err());
        assert_eq!(m.head_w.shape(), &[1, 4]);
    }

    #[test]
    fn dense_pooling_head_width() {
        let pooling = Pooling::DenseInterpolation(EmbeddingConfig { m: 3, ..Default::default() });
        let m = RnnClassifier::<f64>::init(2, 4, 1, pooling, &mut SeededRng::new(0)).unwrap();
        assert_eq!(m.head_w.shape(), &[1, 12]);
        assert!(m.logit(&Tensor::zeros(&[2, 2])).is_err());
        assert!(m.logit(&Tensor::zeros(&[5, 2])).is_ok());
    }

    #[test]
    fn loss_matches_definition() {
        let mut rng = SeededRng::new(8);
        let m = RnnClassifier::<f64>::init(2, 3, 1, Pooling::LastHidden, &mut rng).unwrap();
        let x = Tensor::uniform(&[4, 2], 1.0, &mut rng);
        let p = m.score(&x).unwrap();
        let (lp, _) = m.loss_and_grad(&x, Label::Abnormal).unwrap();
        let (ln, _) = m.loss_and_grad(&x, Label::Normal).unwrap();
        assert!((lp + p.ln()).abs() < 1e-12);
        assert!((ln + (1.0 - p).ln()).abs() < 1e-12);
    }
}
