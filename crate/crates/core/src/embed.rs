//! Dense interpolation: order-preserving pooling of a `[T, h]` latent
//! sequence into `M` slots, flattened to an `M·h` feature vector.
//!
//! Time step `t` (1-based) sits at position `s_t = M·t/T`; its weight for slot
//! `m` (1-based) is `w = (1 − |s_t − m|/M)²`.
//!
//! * [`Interpolation::Raw`] accumulates `u_m = Σ_t w_{t,m} z_t` over all steps.
//! * [`Interpolation::Normalized`] (the default) only lets steps within one
//!   slot of `m` contribute and divides by their total weight. With `M == T`
//!   each slot receives exactly its own step, so the output is the plain
//!   concatenation of `z_1 … z_T`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{FrameTensor, Label, Provenance};
use crate::scalar::Scalar;
use crate::seq2seq::Seq2SeqModel;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Raw,
    #[default]
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    /// Dense interpolation factor `M`.
    pub m: usize,
    #[serde(default)]
    pub interpolation: Interpolation,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            m: 16,
            interpolation: Interpolation::Normalized,
        }
    }
}

/// Kernel weight of step `t` for slot `m`, both 1-based.
pub fn kernel_weight(t: usize, m: usize, steps: usize, slots: usize) -> f64 {
    let s = (slots * t) as f64 / steps as f64;
    let d = (s - m as f64).abs() / slots as f64;
    (1.0 - d) * (1.0 - d)
}

/// Row-major `[M, T]` weight matrix applied to `Z`.
pub fn interpolation_matrix(steps: usize, slots: usize, variant: Interpolation) -> Result<Vec<f64>> {
    if steps == 0 || slots == 0 || slots > steps {
        return Err(Error::Config(format!(
            "dense interpolation needs 1 <= M <= T, got M={slots} T={steps}"
        )));
    }
    let mut w = vec![0.0; slots * steps];
    for m in 1..=slots {
        let row = &mut w[(m - 1) * steps..m * steps];
        for t in 1..=steps {
            let s = (slots * t) as f64 / steps as f64;
            let keep = match variant {
                Interpolation::Raw => true,
                Interpolation::Normalized => (s - m as f64).abs() < 1.0,
            };
            if keep {
                row[t - 1] = kernel_weight(t, m, steps, slots);
            }
        }
        if variant == Interpolation::Normalized {
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= total);
        }
    }
    Ok(w)
}

fn apply<S: Scalar>(z: &Tensor<S>, weights: &[f64], slots: usize) -> Vec<S> {
    let (steps, h) = (z.dim(0), z.dim(1));
    let mut out = vec![S::zero(); slots * h];
    for m in 0..slots {
        let u = &mut out[m * h..(m + 1) * h];
        for t in 0..steps {
            let w = weights[m * steps + t];
            if w != 0.0 {
                let w = S::lit(w);
                for (o, &v) in u.iter_mut().zip(z.row(t)) {
                    *o += w * v;
                }
            }
        }
    }
    out
}

/// Pools `z` (`[T, h]`) into an `M·h` vector.
pub fn dense_interpolate<S: Scalar>(z: &Tensor<S>, cfg: &EmbeddingConfig) -> Result<Tensor<S>> {
    if z.rank() != 2 {
        return Err(Error::Dimension(format!("latent sequence must be [T, h], got {:?}", z.shape())));
    }
    let w = interpolation_matrix(z.dim(0), cfg.m, cfg.interpolation)?;
    Tensor::vector(apply(z, &w, cfg.m))
}

/// Backward of [`dense_interpolate`]: maps a gradient on the `M·h` output
/// back to `[T, h]`.
pub fn dense_interpolate_backward<S: Scalar>(
    grad: &[S],
    steps: usize,
    hidden: usize,
    cfg: &EmbeddingConfig,
) -> Result<Tensor<S>> {
    let w = interpolation_matrix(steps, cfg.m, cfg.interpolation)?;
    let mut out = vec![S::zero(); steps * hidden];
    for m in 0..cfg.m {
        let g = &grad[m * hidden..(m + 1) * hidden];
        for t in 0..steps {
            let wt = w[m * steps + t];
            if wt != 0.0 {
                let wt = S::lit(wt);
                for (o, &gv) in out[t * hidden..(t + 1) * hidden].iter_mut().zip(g) {
                    *o += wt * gv;
                }
            }
        }
    }
    Tensor::new(vec![steps, hidden], out)
}

/// Stage-2 design matrix `S` (`[N, M·h]`) with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedFeatures<S> {
    pub features: Tensor<S>,
    pub labels: Vec<Label>,
    pub provenance: Vec<Provenance>,
}

impl<S: Scalar> EmbeddedFeatures<S> {
    pub fn len(&self) -> usize {
        self.features.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.features.dim(1)
    }
}

/// Encodes every limited-channel frame and pools its latent sequence.
pub fn embed_dataset<S: Scalar>(
    model: &Seq2SeqModel<S>,
    data: &FrameTensor<S>,
    cfg: &EmbeddingConfig,
) -> Result<EmbeddedFeatures<S>> {
    let d = model.dims();
    if data.width() != d.limited_channels {
        return Err(Error::Dimension(format!(
            "model encodes {} channels, data has {}",
            d.limited_channels,
            data.width()
        )));
    }
    let w = interpolation_matrix(data.steps(), cfg.m, cfg.interpolation)?;
    let rows: Vec<Result<Vec<S>>> = (0..data.len())
        .into_par_iter()
        .map(|n| {
            let (z, _) = model.encode(&data.frame(n))?;
            Ok(apply(&z, &w, cfg.m))
        })
        .collect();
    let mut flat = Vec::with_capacity(data.len() * cfg.m * d.hidden);
    for r in rows {
        flat.extend(r?);
    }
    Ok(EmbeddedFeatures {
        features: Tensor::new(vec![data.len(), cfg.m * d.hidden], flat)?,
        labels: data.labels.clone(),
        provenance: data.provenance.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(m: usize) -> EmbeddingConfig {
        EmbeddingConfig { m, interpolation: Interpolation::Raw }
    }

    #[test]
    fn two_step_concatenation_limit() {
        let z = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let s = dense_interpolate(&z, &EmbeddingConfig { m: 2, ..Default::default() }).unwrap();
        assert_eq!(s.data(), &[1.0, 2.0]);
    }

    #[test]
    fn raw_accumulation_matches_double_loop() {
        let z = Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let s = dense_interpolate(&z, &raw(2)).unwrap();
        // independent loop over the kernel definition
        let mut expect = [0.0f64; 2];
        for t in 1..=3 {
            let pos = 2.0 * t as f64 / 3.0;
            for m in 1..=2 {
                let w = (1.0 - (pos - m as f64).abs() / 2.0).powi(2);
                expect[m - 1] += w * t as f64;
            }
        }
        assert!((s.data()[0] - expect[0]).abs() < 1e-12);
        assert!((s.data()[1] - expect[1]).abs() < 1e-12);
        assert!((s.data()[0] - 102.0 / 36.0).abs() < 1e-12);
        assert!((s.data()[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn constant_sequence_keeps_direction() {
        let c = [0.5f64, -2.0, 1.0];
        let z = Tensor::new(vec![9, 3], c.repeat(9)).unwrap();
        for cfg in [raw(4), EmbeddingConfig { m: 4, ..Default::default() }] {
            let s = dense_interpolate(&z, &cfg).unwrap();
            for slot in s.data().chunks(3) {
                let r = slot[0] / c[0];
                assert!(r > 0.0);
                for (a, b) in slot.iter().zip(&c) {
                    assert!((a - r * b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bad_factor_rejected() {
        let z = Tensor::<f64>::zeros(&[3, 2]);
        assert!(dense_interpolate(&z, &raw(4)).is_err());
        assert!(dense_interpolate(&z, &raw(0)).is_err());
    }

    #[test]
    fn weights_in_unit_interval_and_peak_at_nearest_slot() {
        for (steps, slots) in [(10, 3), (500, 16), (7, 7), (33, 5)] {
            for t in 1..=steps {
                let pos = (slots * t) as f64 / steps as f64;
                let ws: Vec<f64> = (1..=slots).map(|m| kernel_weight(t, m, steps, slots)).collect();
                assert!(ws.iter().all(|&w| (0.0..=1.0).contains(&w)));
                let nearest = (1..=slots)
                    .min_by(|&a, &b| (pos - a as f64).abs().total_cmp(&(pos - b as f64).abs()))
                    .unwrap();
                let best = ws.iter().copied().fold(f64::MIN, f64::max);
                assert_eq!(ws[nearest - 1], best);
            }
        }
    }

    #[test]
    fn backward_is_adjoint() {
        let mut rng = crate::rng::SeededRng::new(2);
        let z = Tensor::<f64>::uniform(&[11, 3], 1.0, &mut rng);
        let cfg = EmbeddingConfig { m: 4, ..Default::default() };
        let g = Tensor::<f64>::uniform(&[12], 1.0, &mut rng);
        let fwd = dense_interpolate(&z, &cfg).unwrap();
        let back = dense_interpolate_backward(g.data(), 11, 3, &cfg).unwrap();
        let lhs: f64 = fwd.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = z.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
