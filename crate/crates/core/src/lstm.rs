//! LSTM cell, stacked sequence unroll, and backpropagation through time.
//!
//! Per gate `g` in (input, forget, output, cell):
//!
//! ```text
//! i = σ(W_i x + U_i h + b_i)     f = σ(W_f x + U_f h + b_f)
//! o = σ(W_o x + U_o h + b_o)     g = tanh(W_c x + U_c h + b_c)
//! c' = f ⊙ c + i ⊙ g             h' = o ⊙ tanh(c')
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{sigmoid, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Input,
    Forget,
    Output,
    Cell,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Input, Gate::Forget, Gate::Output, Gate::Cell];

    pub fn tag(self) -> &'static str {
        match self {
            Gate::Input => "i",
            Gate::Forget => "f",
            Gate::Output => "o",
            Gate::Cell => "c",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateWeights<S> {
    /// `[h, d_in]`
    pub w: Tensor<S>,
    /// `[h, h]`
    pub u: Tensor<S>,
    /// `[h]`
    pub b: Tensor<S>,
}

/// One LSTM layer. Gates are indexed in [`Gate::ALL`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams<S> {
    pub gates: [GateWeights<S>; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<S> {
    pub h: Vec<S>,
    pub c: Vec<S>,
}

impl<S: Scalar> LstmState<S> {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: vec![S::zero(); hidden],
            c: vec![S::zero(); hidden],
        }
    }
}

/// Activations retained from a forward cell step.
#[derive(Debug, Clone)]
pub struct CellCache<S> {
    x: Vec<S>,
    h_prev: Vec<S>,
    c_prev: Vec<S>,
    i: Vec<S>,
    f: Vec<S>,
    o: Vec<S>,
    g: Vec<S>,
    tanh_c: Vec<S>,
}

impl<S: Scalar> CellCache<S> {
    pub fn gates(&self) -> (&[S], &[S], &[S], &[S]) {
        (&self.i, &self.f, &self.o, &self.g)
    }
}

/// `out[r] += Σ_c m[r, c] v[c]`
#[inline]
pub(crate) fn gemv_acc<S: Scalar>(out: &mut [S], m: &[S], v: &[S]) {
    let cols = v.len();
    for (o, row) in out.iter_mut().zip(m.chunks_exact(cols)) {
        let mut acc = S::zero();
        for (&a, &b) in row.iter().zip(v) {
            acc += a * b;
        }
        *o += acc;
    }
}

/// `out[c] += Σ_r m[r, c] v[r]`
#[inline]
pub(crate) fn gemv_t_acc<S: Scalar>(out: &mut [S], m: &[S], v: &[S]) {
    let cols = out.len();
    for (&vr, row) in v.iter().zip(m.chunks_exact(cols)) {
        for (o, &a) in out.iter_mut().zip(row) {
            *o += a * vr;
        }
    }
}

/// `m[r, c] += a[r] b[c]`
#[inline]
pub(crate) fn outer_acc<S: Scalar>(m: &mut [S], a: &[S], b: &[S]) {
    let cols = b.len();
    for (&ar, row) in a.iter().zip(m.chunks_exact_mut(cols)) {
        for (x, &bc) in row.iter_mut().zip(b) {
            *x += ar * bc;
        }
    }
}

impl<S: Scalar> LstmParams<S> {
    pub fn zeros(input_size: usize, hidden: usize) -> Self {
        let gate = || GateWeights {
            w: Tensor::zeros(&[hidden, input_size]),
            u: Tensor::zeros(&[hidden, hidden]),
            b: Tensor::zeros(&[hidden]),
        };
        Self {
            gates: [gate(), gate(), gate(), gate()],
        }
    }

    /// Weights uniform in `±1/√h`; forget-gate bias 1, other biases 0.
    pub fn init(input_size: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut p = Self::zeros(input_size, hidden);
        for (g, gw) in Gate::ALL.iter().zip(p.gates.iter_mut()) {
            gw.w = Tensor::uniform(&[hidden, input_size], bound, rng);
            gw.u = Tensor::uniform(&[hidden, hidden], bound, rng);
            if *g == Gate::Forget {
                gw.b = Tensor::filled(&[hidden], S::one());
            }
        }
        p
    }

    pub fn input_size(&self) -> usize {
        self.gates[0].w.dim(1)
    }

    pub fn hidden_size(&self) -> usize {
        self.gates[0].w.dim(0)
    }

    pub fn gate(&self, g: Gate) -> &GateWeights<S> {
        &self.gates[g as usize]
    }

    pub fn gate_mut(&mut self, g: Gate) -> &mut GateWeights<S> {
        &mut self.gates[g as usize]
    }

    fn check(&self) -> Result<()> {
        let (h, d) = (self.hidden_size(), self.input_size());
        for gw in &self.gates {
            if gw.w.shape() != [h, d] || gw.u.shape() != [h, h] || gw.b.shape() != [h] {
                return Err(Error::Dimension(format!(
                    "gate shapes W{:?} U{:?} b{:?} inconsistent with h={h}, d_in={d}",
                    gw.w.shape(),
                    gw.u.shape(),
                    gw.b.shape()
                )));
            }
        }
        Ok(())
    }

    /// One time step.
    pub fn cell_forward(&self, x: &[S], prev: &LstmState<S>) -> Result<(LstmState<S>, CellCache<S>)> {
        let h = self.hidden_size();
        if x.len() != self.input_size() || prev.h.len() != h || prev.c.len() != h {
            return Err(Error::Dimension(format!(
                "cell input {} / state {}+{} against d_in={} h={h}",
                x.len(),
                prev.h.len(),
                prev.c.len(),
                self.input_size()
            )));
        }
        let pre = |g: Gate| {
            let gw = self.gate(g);
            let mut z = gw.b.data().to_vec();
            gemv_acc(&mut z, gw.w.data(), x);
            gemv_acc(&mut z, gw.u.data(), &prev.h);
            z
        };
        let i: Vec<S> = pre(Gate::Input).into_iter().map(sigmoid).collect();
        let f: Vec<S> = pre(Gate::Forget).into_iter().map(sigmoid).collect();
        let o: Vec<S> = pre(Gate::Output).into_iter().map(sigmoid).collect();
        let g: Vec<S> = pre(Gate::Cell).into_iter().map(S::tanh).collect();
        let c: Vec<S> = (0..h).map(|k| f[k] * prev.c[k] + i[k] * g[k]).collect();
        let tanh_c: Vec<S> = c.iter().map(|v| v.tanh()).collect();
        let h_new: Vec<S> = (0..h).map(|k| o[k] * tanh_c[k]).collect();
        let cache = CellCache {
            x: x.to_vec(),
            h_prev: prev.h.clone(),
            c_prev: prev.c.clone(),
            i,
            f,
            o,
            g,
            tanh_c,
        };
        Ok((LstmState { h: h_new, c }, cache))
    }

    /// Backward through one step. `dh`/`dc` are the total gradients on the
    /// step's outputs; parameter gradients are accumulated into `grads`.
    /// Returns gradients on `(x, h_prev, c_prev)`.
    pub fn cell_backward(
        &self,
        cache: &CellCache<S>,
        dh: &[S],
        dc: &[S],
        grads: &mut LstmParams<S>,
    ) -> (Vec<S>, Vec<S>, Vec<S>) {
        let h = self.hidden_size();
        let one = S::one();
        let mut d_pre = [vec![S::zero(); h], vec![S::zero(); h], vec![S::zero(); h], vec![S::zero(); h]];
        let mut dc_prev = vec![S::zero(); h];
        for k in 0..h {
            let (i, f, o, g, tc) = (cache.i[k], cache.f[k], cache.o[k], cache.g[k], cache.tanh_c[k]);
            let d_o = dh[k] * tc;
            let d_c = dc[k] + dh[k] * o * (one - tc * tc);
            d_pre[0][k] = d_c * g * i * (one - i);
            d_pre[1][k] = d_c * cache.c_prev[k] * f * (one - f);
            d_pre[2][k] = d_o * o * (one - o);
            d_pre[3][k] = d_c * i * (one - g * g);
            dc_prev[k] = d_c * f;
        }
        let mut dx = vec![S::zero(); self.input_size()];
        let mut dh_prev = vec![S::zero(); h];
        for (q, dp) in d_pre.iter().enumerate() {
            let gw = &self.gates[q];
            let gg = &mut grads.gates[q];
            outer_acc(gg.w.data_mut(), dp, &cache.x);
            outer_acc(gg.u.data_mut(), dp, &cache.h_prev);
            for (b, &d) in gg.b.data_mut().iter_mut().zip(dp) {
                *b += d;
            }
            gemv_t_acc(&mut dx, gw.w.data(), dp);
            gemv_t_acc(&mut dh_prev, gw.u.data(), dp);
        }
        (dx, dh_prev, dc_prev)
    }
}

/// Layers applied bottom to top; layer `l > 0` reads layer `l - 1`'s hidden state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedLstm<S> {
    pub layers: Vec<LstmParams<S>>,
}

#[derive(Debug, Clone)]
pub struct StepCache<S> {
    pub cells: Vec<CellCache<S>>,
}

#[derive(Debug, Clone)]
pub struct SequenceOutput<S> {
    /// Top-layer hidden state at every step, `[T, h]`.
    pub hidden: Tensor<S>,
    pub final_states: Vec<LstmState<S>>,
    pub steps: Vec<StepCache<S>>,
}

impl<S: Scalar> StackedLstm<S> {
    pub fn init(input_size: usize, hidden: usize, num_layers: usize, rng: &mut SeededRng) -> Self {
        assert!(num_layers >= 1);
        let layers = (0..num_layers)
            .map(|l| LstmParams::init(if l == 0 { input_size } else { hidden }, hidden, rng))
            .collect();
        Self { layers }
    }

    pub fn zeros(input_size: usize, hidden: usize, num_layers: usize) -> Self {
        let layers = (0..num_layers)
            .map(|l| LstmParams::zeros(if l == 0 { input_size } else { hidden }, hidden))
            .collect();
        Self { layers }
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].input_size()
    }

    pub fn hidden_size(&self) -> usize {
        self.layers[0].hidden_size()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn zero_states(&self) -> Vec<LstmState<S>> {
        vec![LstmState::zeros(self.hidden_size()); self.num_layers()]
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden_size();
        for (l, p) in self.layers.iter().enumerate() {
            p.check()?;
            if p.hidden_size() != h || (l > 0 && p.input_size() != h) {
                return Err(Error::Dimension(format!(
                    "layer {l} has d_in={} h={}, stack hidden size is {h}",
                    p.input_size(),
                    p.hidden_size()
                )));
            }
        }
        Ok(())
    }

    /// One time step through every layer.
    pub fn step(&self, x: &[S], states: &[LstmState<S>]) -> Result<(Vec<LstmState<S>>, StepCache<S>)> {
        let mut next = Vec::with_capacity(self.num_layers());
        let mut cells = Vec::with_capacity(self.num_layers());
        let mut input = x.to_vec();
        for (layer, prev) in self.layers.iter().zip(states) {
            let (s, cache) = layer.cell_forward(&input, prev)?;
            input.clone_from(&s.h);
            next.push(s);
            cells.push(cache);
        }
        Ok((next, StepCache { cells }))
    }

    /// Backward through one step of [`step`](Self::step).
    ///
    /// `carry` holds, per layer, the gradient flowing into this step's output
    /// state from later steps; on return it holds the gradient on the
    /// previous state. `dh_top` is the extra gradient on the top hidden output.
    pub fn step_backward(
        &self,
        cache: &StepCache<S>,
        dh_top: &[S],
        carry: &mut [LstmState<S>],
        grads: &mut StackedLstm<S>,
    ) -> Vec<S> {
        let top = self.num_layers() - 1;
        let mut from_above: Vec<S> = dh_top.to_vec();
        for l in (0..=top).rev() {
            let dh: Vec<S> = carry[l].h.iter().zip(&from_above).map(|(&a, &b)| a + b).collect();
            let (dx, dh_prev, dc_prev) =
                self.layers[l].cell_backward(&cache.cells[l], &dh, &carry[l].c, &mut grads.layers[l]);
            carry[l] = LstmState { h: dh_prev, c: dc_prev };
            from_above = dx;
        }
        from_above
    }

    /// Unrolls over `seq` (`[T, d_in]`) from `init` (zeros when `None`).
    pub fn forward(&self, seq: &Tensor<S>, init: Option<&[LstmState<S>]>) -> Result<SequenceOutput<S>> {
        if seq.rank() != 2 || seq.dim(1) != self.input_size() {
            return Err(Error::Dimension(format!(
                "sequence shape {:?} for LSTM with d_in={}",
                seq.shape(),
                self.input_size()
            )));
        }
        let steps_n = seq.dim(0);
        let h = self.hidden_size();
        let mut states = match init {
            Some(s) if s.len() == self.num_layers() => s.to_vec(),
            Some(s) => {
                return Err(Error::Dimension(format!(
                    "{} initial states for {} layers",
                    s.len(),
                    self.num_layers()
                )))
            }
            None => self.zero_states(),
        };
        let mut hidden = Vec::with_capacity(steps_n * h);
        let mut steps = Vec::with_capacity(steps_n);
        for t in 0..steps_n {
            let (next, cache) = self.step(seq.row(t), &states)?;
            hidden.extend_from_slice(&next[self.num_layers() - 1].h);
            steps.push(cache);
            states = next;
        }
        Ok(SequenceOutput {
            hidden: Tensor::new(vec![steps_n, h], hidden)?,
            final_states: states,
            steps,
        })
    }

    /// Backpropagation through time for [`forward`](Self::forward).
    ///
    /// `grad_hidden` is `dL/d hidden` (`[T, h]`), `grad_final` the gradient on
    /// the final per-layer states. Parameter gradients accumulate into
    /// `grads`. Returns the input gradient `[T, d_in]` and the gradient on
    /// the initial states.
    pub fn backward(
        &self,
        steps: &[StepCache<S>],
        grad_hidden: &Tensor<S>,
        grad_final: Option<&[LstmState<S>]>,
        grads: &mut StackedLstm<S>,
    ) -> Result<(Tensor<S>, Vec<LstmState<S>>)> {
        let h = self.hidden_size();
        if grad_hidden.shape() != [steps.len(), h] {
            return Err(Error::Dimension(format!(
                "hidden gradient {:?} for {} cached steps of width {h}",
                grad_hidden.shape(),
                steps.len()
            )));
        }
        let mut carry = match grad_final {
            Some(g) if g.len() == self.num_layers() => g.to_vec(),
            Some(g) => {
                return Err(Error::Dimension(format!(
                    "{} final-state gradients for {} layers",
                    g.len(),
                    self.num_layers()
                )))
            }
            None => self.zero_states(),
        };
        let d_in = self.input_size();
        let mut grad_input = vec![S::zero(); steps.len() * d_in];
        for t in (0..steps.len()).rev() {
            let dx = self.step_backward(&steps[t], grad_hidden.row(t), &mut carry, grads);
            grad_input[t * d_in..(t + 1) * d_in].copy_from_slice(&dx);
        }
        Ok((Tensor::new(vec![steps.len(), d_in], grad_input)?, carry))
    }
}

impl<S: Scalar> Parameters<S> for StackedLstm<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        for (l, layer) in self.layers.iter().enumerate() {
            for (g, gw) in Gate::ALL.iter().zip(&layer.gates) {
                f(format!("layer{l}.W.{}", g.tag()), &gw.w);
                f(format!("layer{l}.U.{}", g.tag()), &gw.u);
                f(format!("layer{l}.b.{}", g.tag()), &gw.b);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (g, gw) in Gate::ALL.iter().zip(layer.gates.iter_mut()) {
                f(&format!("layer{l}.W.{}", g.tag()), &mut gw.w);
                f(&format!("layer{l}.U.{}", g.tag()), &mut gw.u);
                f(&format!("layer{l}.b.{}", g.tag()), &mut gw.b);
            }
        }
    }
}
