//! Encoder-decoder LSTM that reconstructs all `K` channels of a frame from
//! its `K̂`-channel restriction.
//!
//! The encoder's final per-layer states seed the decoder. The decoder sees a
//! zero vector at the first step and then either the ground-truth previous
//! frame row (teacher forcing) or its own previous output. Each output row is
//! an affine map of the top decoder hidden state, optionally concatenated
//! with a dot-product attention context over the encoder hidden sequence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::FrameTensor;
use crate::lstm::{gemv_acc, gemv_t_acc, outer_acc, LstmState, StackedLstm, StepCache};
use crate::optim::{fit, TrainConfig, TrainReport};
use crate::params::Parameters;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attention {
    #[default]
    Off,
    Dot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// `K̂`, encoder input width.
    pub limited_channels: usize,
    /// `K`, decoder input and output width.
    pub channels: usize,
    pub hidden: usize,
    pub layers: usize,
    pub attention: Attention,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.limited_channels == 0 || self.channels == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(Error::Config(format!("all model dims must be positive: {self:?}")));
        }
        Ok(())
    }

    fn feature_width(&self) -> usize {
        match self.attention {
            Attention::Off => self.hidden,
            Attention::Dot => 2 * self.hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seq2SeqModel<S> {
    pub encoder: StackedLstm<S>,
    pub decoder: StackedLstm<S>,
    /// `[K, h]`, or `[K, 2h]` with attention.
    pub output_w: Tensor<S>,
    /// `[K]`
    pub output_b: Tensor<S>,
    pub attention: Attention,
}

/// How the decoder input at step `t > 0` is chosen.
#[derive(Debug, Clone)]
pub enum DecodeMode {
    TeacherForced,
    Autoregressive,
    /// Teacher forcing with probability `ratio` per step.
    Mixed { ratio: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum InputSource {
    Zero,
    Target(usize),
    Prediction(usize),
}

/// Forward state kept for backpropagation.
pub struct EncodeTrace<S> {
    pub z: Tensor<S>,
    pub final_states: Vec<LstmState<S>>,
    steps: Vec<StepCache<S>>,
}

pub struct DecodeTrace<S> {
    pub prediction: Tensor<S>,
    /// Attention weights per step (empty when attention is off).
    pub attention_weights: Vec<Vec<S>>,
    steps: Vec<StepCache<S>>,
    sources: Vec<InputSource>,
    features: Vec<Vec<S>>,
}

impl<S: Scalar> Seq2SeqModel<S> {
    pub fn init(dims: ModelDims, rng: &mut SeededRng) -> Result<Self> {
        dims.validate()?;
        let encoder = StackedLstm::init(dims.limited_channels, dims.hidden, dims.layers, rng);
        let decoder = StackedLstm::init(dims.channels, dims.hidden, dims.layers, rng);
        let fw = dims.feature_width();
        let bound = 1.0 / (fw as f64).sqrt();
        Ok(Self {
            encoder,
            decoder,
            output_w: Tensor::uniform(&[dims.channels, fw], bound, rng),
            output_b: Tensor::zeros(&[dims.channels]),
            attention: dims.attention,
        })
    }

    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        Ok(Self {
            encoder: StackedLstm::zeros(dims.limited_channels, dims.hidden, dims.layers),
            decoder: StackedLstm::zeros(dims.channels, dims.hidden, dims.layers),
            output_w: Tensor::zeros(&[dims.channels, dims.feature_width()]),
            output_b: Tensor::zeros(&[dims.channels]),
            attention: dims.attention,
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            limited_channels: self.encoder.input_size(),
            channels: self.decoder.input_size(),
            hidden: self.encoder.hidden_size(),
            layers: self.encoder.num_layers(),
            attention: self.attention,
        }
    }

    /// Structural consistency check, used after loading parameters.
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        let d = self.dims();
        if self.decoder.hidden_size() != d.hidden || self.decoder.num_layers() != d.layers {
            return Err(Error::Dimension("encoder and decoder stacks differ in shape".into()));
        }
        if self.output_w.shape() != [d.channels, d.feature_width()] || self.output_b.shape() != [d.channels] {
            return Err(Error::Dimension(format!(
                "output projection {:?} + {:?} for K={} features={}",
                self.output_w.shape(),
                self.output_b.shape(),
                d.channels,
                d.feature_width()
            )));
        }
        Ok(())
    }

    pub fn encode_trace(&self, x_hat: &Tensor<S>) -> Result<EncodeTrace<S>> {
        if x_hat.rank() != 2 || x_hat.dim(1) != self.encoder.input_size() {
            return Err(Error::Dimension(format!(
                "encoder expects [T, {}], got {:?}",
                self.encoder.input_size(),
                x_hat.shape()
            )));
        }
        let out = self.encoder.forward(x_hat, None)?;
        Ok(EncodeTrace {
            z: out.hidden,
            final_states: out.final_states,
            steps: out.steps,
        })
    }

    /// Latent sequence `Z` (`[T, h]`) and the final per-layer encoder states.
    pub fn encode(&self, x_hat: &Tensor<S>) -> Result<(Tensor<S>, Vec<LstmState<S>>)> {
        let tr = self.encode_trace(x_hat)?;
        Ok((tr.z, tr.final_states))
    }

    fn attend(&self, h_top: &[S], z: &Tensor<S>) -> (Vec<S>, Vec<S>) {
        let t_enc = z.dim(0);
        let scores: Vec<S> = (0..t_enc)
            .map(|j| z.row(j).iter().zip(h_top).map(|(&a, &b)| a * b).sum())
            .collect();
        let max = scores.iter().copied().fold(S::neg_infinity(), S::max);
        let exps: Vec<S> = scores.iter().map(|&s| (s - max).exp()).collect();
        let total: S = exps.iter().copied().sum();
        let alpha: Vec<S> = exps.iter().map(|&e| e / total).collect();
        let mut ctx = vec![S::zero(); h_top.len()];
        for (j, &a) in alpha.iter().enumerate() {
            for (c, &zj) in ctx.iter_mut().zip(z.row(j)) {
                *c += a * zj;
            }
        }
        (alpha, ctx)
    }

    /// Runs the decoder for `steps` steps from `init`.
    pub fn decode_trace(
        &self,
        init: &[LstmState<S>],
        z: &Tensor<S>,
        steps: usize,
        target: Option<&Tensor<S>>,
        mode: &DecodeMode,
    ) -> Result<DecodeTrace<S>> {
        let k = self.decoder.input_size();
        let needs_target = !matches!(mode, DecodeMode::Autoregressive);
        match target {
            Some(t) if t.shape() != [steps, k] => {
                return Err(Error::Dimension(format!(
                    "decoder target {:?}, expected [{steps}, {k}]",
                    t.shape()
                )))
            }
            None if needs_target => {
                return Err(Error::Config("teacher forcing requires a target sequence".into()))
            }
            _ => {}
        }
        let mut mixed_rng = match mode {
            DecodeMode::Mixed { seed, .. } => Some(SeededRng::new(*seed)),
            _ => None,
        };
        let mut states = init.to_vec();
        let mut pred = Vec::with_capacity(steps * k);
        let mut trace = DecodeTrace {
            prediction: Tensor::zeros(&[1]),
            attention_weights: Vec::new(),
            steps: Vec::with_capacity(steps),
            sources: Vec::with_capacity(steps),
            features: Vec::with_capacity(steps),
        };
        let zero_in = vec![S::zero(); k];
        for t in 0..steps {
            let source = if t == 0 {
                InputSource::Zero
            } else {
                let forced = match mode {
                    DecodeMode::TeacherForced => true,
                    DecodeMode::Autoregressive => false,
                    DecodeMode::Mixed { ratio, .. } => mixed_rng.as_mut().unwrap().bernoulli(*ratio),
                };
                if forced {
                    InputSource::Target(t - 1)
                } else {
                    InputSource::Prediction(t - 1)
                }
            };
            let input: &[S] = match source {
                InputSource::Zero => &zero_in,
                InputSource::Target(p) => target.unwrap().row(p),
                InputSource::Prediction(p) => &pred[p * k..(p + 1) * k],
            };
            let (next, cache) = self.decoder.step(input, &states)?;
            let h_top = &next[next.len() - 1].h;
            let mut feat = h_top.clone();
            if self.attention == Attention::Dot {
                let (alpha, ctx) = self.attend(h_top, z);
                feat.extend_from_slice(&ctx);
                trace.attention_weights.push(alpha);
            }
            let mut out = self.output_b.data().to_vec();
            gemv_acc(&mut out, self.output_w.data(), &feat);
            pred.extend_from_slice(&out);
            trace.steps.push(cache);
            trace.sources.push(source);
            trace.features.push(feat);
            states = next;
        }
        trace.prediction = Tensor::new(vec![steps, k], pred)?;
        Ok(trace)
    }

    /// Decoder output `[T, K]` from encoder final states.
    pub fn decode(
        &self,
        final_states: &[LstmState<S>],
        z: &Tensor<S>,
        target: Option<&Tensor<S>>,
        teacher_forcing: bool,
    ) -> Result<Tensor<S>> {
        let mode = if teacher_forcing {
            DecodeMode::TeacherForced
        } else {
            DecodeMode::Autoregressive
        };
        let steps = target.map_or(z.dim(0), |t| t.dim(0));
        Ok(self.decode_trace(final_states, z, steps, target, &mode)?.prediction)
    }

    /// Reconstruction of the full frame from `x_hat` without teacher forcing.
    pub fn reconstruct(&self, x_hat: &Tensor<S>) -> Result<Tensor<S>> {
        let (z, fin) = self.encode(x_hat)?;
        self.decode(&fin, &z, None, false)
    }

    /// Loss of one `(x_hat, x)` pair and its gradient with respect to every
    /// parameter.
    pub fn loss_and_grad(&self, x_hat: &Tensor<S>, x: &Tensor<S>, mode: &DecodeMode) -> Result<(S, Self)> {
        let enc = self.encode_trace(x_hat)?;
        let steps = x.dim(0);
        let dec = self.decode_trace(&enc.final_states, &enc.z, steps, Some(x), mode)?;
        let loss = loss_l2(&dec.prediction, x)?;
        let k = self.decoder.input_size();
        let h = self.decoder.hidden_size();
        let scale = S::lit(2.0) / S::lit((steps * k) as f64);
        let mut grads = self.zeros_like();
        let mut d_pred: Vec<S> = dec
            .prediction
            .data()
            .iter()
            .zip(x.data())
            .map(|(&p, &y)| scale * (p - y))
            .collect();
        let mut d_z = vec![S::zero(); enc.z.len()];
        let mut carry = self.decoder.zero_states();
        for t in (0..steps).rev() {
            let dp = d_pred[t * k..(t + 1) * k].to_vec();
            let feat = &dec.features[t];
            outer_acc(grads.output_w.data_mut(), &dp, feat);
            for (b, &d) in grads.output_b.data_mut().iter_mut().zip(&dp) {
                *b += d;
            }
            let mut d_feat = vec![S::zero(); feat.len()];
            gemv_t_acc(&mut d_feat, self.output_w.data(), &dp);
            let mut dh_top = d_feat[..h].to_vec();
            if self.attention == Attention::Dot {
                let alpha = &dec.attention_weights[t];
                let d_ctx = &d_feat[h..];
                let h_top = &feat[..h];
                let d_alpha: Vec<S> = (0..alpha.len())
                    .map(|j| enc.z.row(j).iter().zip(d_ctx).map(|(&a, &b)| a * b).sum())
                    .collect();
                let mean: S = alpha.iter().zip(&d_alpha).map(|(&a, &d)| a * d).sum();
                for (j, (&a, &da)) in alpha.iter().zip(&d_alpha).enumerate() {
                    let d_score = a * (da - mean);
                    let zj = enc.z.row(j);
                    let dzj = &mut d_z[j * h..(j + 1) * h];
                    for q in 0..h {
                        dh_top[q] += d_score * zj[q];
                        dzj[q] += a * d_ctx[q] + d_score * h_top[q];
                    }
                }
            }
            let dx = self
                .decoder
                .step_backward(&dec.steps[t], &dh_top, &mut carry, &mut grads.decoder);
            if let InputSource::Prediction(p) = dec.sources[t] {
                for (d, &g) in d_pred[p * k..(p + 1) * k].iter_mut().zip(&dx) {
                    *d += g;
                }
            }
        }
        let d_z = Tensor::new(enc.z.shape().to_vec(), d_z)?;
        self.encoder
            .backward(&enc.steps, &d_z, Some(&carry), &mut grads.encoder)?;
        Ok((loss, grads))
    }
}

impl<S: Scalar> Parameters<S> for Seq2SeqModel<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        self.encoder.visit(&mut |n, t| f(format!("encoder.{n}"), t));
        self.decoder.visit(&mut |n, t| f(format!("decoder.{n}"), t));
        f("output.W".into(), &self.output_w);
        f("output.b".into(), &self.output_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        self.encoder.visit_mut(&mut |n, t| f(&format!("encoder.{n}"), t));
        self.decoder.visit_mut(&mut |n, t| f(&format!("decoder.{n}"), t));
        f("output.W", &mut self.output_w);
        f("output.b", &mut self.output_b);
    }
}

/// Mean squared error over all `T·K` entries.
pub fn loss_l2<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<S> {
    if pred.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "loss of {:?} against {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let mut acc = S::zero();
    for (&p, &y) in pred.data().iter().zip(target.data()) {
        let d = p - y;
        acc += d * d;
    }
    Ok(acc / S::lit(pred.len() as f64))
}

/// Trains `model` to map `inputs` (`X̂`) to `targets` (`X`) with Adam.
/// On a training error the model keeps the parameters of the last
/// successful update.
pub fn train_generative<S: Scalar>(
    model: &mut Seq2SeqModel<S>,
    inputs: &FrameTensor<S>,
    targets: &FrameTensor<S>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if inputs.len() != targets.len() || inputs.steps() != targets.steps() {
        return Err(Error::Dimension(format!(
            "inputs {:?} and targets {:?} are not frame-aligned",
            inputs.frames.shape(),
            targets.frames.shape()
        )));
    }
    if inputs.provenance != targets.provenance {
        return Err(Error::Data("inputs and targets come from different frames".into()));
    }
    let d = model.dims();
    if inputs.width() != d.limited_channels || targets.width() != d.channels {
        return Err(Error::Dimension(format!(
            "model maps {} -> {} channels, data has {} -> {}",
            d.limited_channels,
            d.channels,
            inputs.width(),
            targets.width()
        )));
    }
    let ratio = cfg.teacher_forcing_ratio;
    fit(model, inputs.len(), cfg, |m: &Seq2SeqModel<S>, i, seed| {
        let mode = if ratio >= 1.0 {
            DecodeMode::TeacherForced
        } else if ratio <= 0.0 {
            DecodeMode::Autoregressive
        } else {
            DecodeMode::Mixed { ratio, seed }
        };
        m.loss_and_grad(&inputs.frame(i), &targets.frame(i), &mode)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(attention: Attention) -> ModelDims {
        ModelDims { limited_channels: 2, channels: 3, hidden: 4, layers: 1, attention }
    }

    #[test]
    fn zero_model_encodes_and_decodes_zeros() {
        let m = Seq2SeqModel::<f64>::zeros(dims(Attention::Off)).unwrap();
        let mut rng = SeededRng::new(1);
        let x_hat = Tensor::uniform(&[6, 2], 1.0, &mut rng);
        let (z, fin) = m.encode(&x_hat).unwrap();
        assert_eq!(z.shape(), &[6, 4]);
        assert!(z.data().iter().all(|&v| v == 0.0));
        let y = m.decode(&fin, &z, None, false).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(m.decode(&fin, &z, None, true).is_err());
    }

    #[test]
    fn default_latent_shape() {
        let d = ModelDims { limited_channels: 3, channels: 12, hidden: 64, layers: 2, attention: Attention::Off };
        let m = Seq2SeqModel::<f64>::init(d, &mut SeededRng::new(0)).unwrap();
        let x = Tensor::uniform(&[500, 3], 1.0, &mut SeededRng::new(1));
        let (z, _) = m.encode(&x).unwrap();
        assert_eq!(z.shape(), &[500, 64]);
        assert_eq!(m.encode(&x).unwrap().0, z);
    }

    #[test]
    fn attention_weights_are_a_distribution() {
        let m = Seq2SeqModel::<f64>::init(dims(Attention::Dot), &mut SeededRng::new(3)).unwrap();
        let mut rng = SeededRng::new(4);
        let x_hat = Tensor::uniform(&[7, 2], 2.0, &mut rng);
        let x = Tensor::uniform(&[7, 3], 2.0, &mut rng);
        let enc = m.encode_trace(&x_hat).unwrap();
        let tr = m.decode_trace(&enc.final_states, &enc.z, 7, Some(&x), &DecodeMode::TeacherForced).unwrap();
        assert_eq!(tr.attention_weights.len(), 7);
        for a in &tr.attention_weights {
            assert!(a.iter().all(|&w| w >= 0.0));
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_examples() {
        let mut rng = SeededRng::new(9);
        let a = Tensor::<f64>::uniform(&[5, 3], 1.0, &mut rng);
        assert_eq!(loss_l2(&a, &a).unwrap(), 0.0);
        let shifted = Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| v + 1.0).collect()).unwrap();
        assert!((loss_l2(&shifted, &a).unwrap() - 1.0).abs() < 1e-15);
        let b = Tensor::<f64>::uniform(&[5, 3], 1.0, &mut rng);
        let mut brute = 0.0;
        for t in 0..5 {
            for c in 0..3 {
                brute += (a.data()[t * 3 + c] - b.data()[t * 3 + c]).powi(2);
            }
        }
        assert!((loss_l2(&a, &b).unwrap() - brute / 15.0).abs() < 1e-12);
        assert!(loss_l2(&a, &Tensor::zeros(&[3, 5])).is_err());
    }

    #[test]
    fn feedback_independent_decoder_matches_across_modes() {
        let mut m = Seq2SeqModel::<f64>::init(dims(Attention::Dot), &mut SeededRng::new(5)).unwrap();
        for g in &mut m.decoder.layers[0].gates {
            g.w = Tensor::zeros(g.w.shape());
        }
        let mut rng = SeededRng::new(6);
        let x_hat = Tensor::uniform(&[6, 2], 1.0, &mut rng);
        let x = Tensor::uniform(&[6, 3], 1.0, &mut rng);
        let (z, fin) = m.encode(&x_hat).unwrap();
        let tf = m.decode(&fin, &z, Some(&x), true).unwrap();
        let ar = m.decode(&fin, &z, Some(&x), false).unwrap();
        assert_eq!(tf, ar);
    }
}
