//! Uniform access to the named parameter tensors of a model.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A model whose trainable state is a fixed, ordered list of named tensors.
///
/// Visiting order is part of the contract: optimizer state, gradient
/// accumulators and checkpoints all rely on it being stable.
pub trait Parameters<S: Scalar>: Clone {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<S>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>));

    fn named(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t)));
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    /// Same structure, every entry zero. Used as a gradient accumulator.
    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|x| *x = S::zero()));
        z
    }

    /// `self += other`, tensor by tensor in visiting order.
    fn add_assign(&mut self, other: &Self) {
        let src: Vec<&Tensor<S>> = other.named().into_iter().map(|(_, t)| t).collect();
        let mut k = 0;
        self.visit_mut(&mut |_, t| {
            for (a, &b) in t.data_mut().iter_mut().zip(src[k].data()) {
                *a += b;
            }
            k += 1;
        });
    }

    fn scale(&mut self, alpha: S) {
        self.visit_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|x| *x *= alpha));
    }

    fn global_norm(&self) -> S {
        let mut s = S::zero();
        self.visit(&mut |_, t| {
            for &x in t.data() {
                s += x * x;
            }
        });
        s.sqrt()
    }

    /// Name of the first tensor holding a NaN or infinity.
    fn first_non_finite(&self) -> Option<String> {
        let mut bad = None;
        self.visit(&mut |n, t| {
            if bad.is_none() && !t.is_finite() {
                bad = Some(n);
            }
        });
        bad
    }

    /// All parameters flattened in visiting order.
    fn flatten(&self) -> Vec<S> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| out.extend_from_slice(t.data()));
        out
    }

    /// Mutable handle on the `idx`-th scalar in flattened order.
    fn with_flat_mut(&mut self, idx: usize, f: &mut dyn FnMut(&mut S)) {
        let mut offset = 0;
        let mut done = false;
        self.visit_mut(&mut |_, t| {
            if !done && idx < offset + t.len() {
                f(&mut t.data_mut()[idx - offset]);
                done = true;
            }
            offset += t.len();
        });
    }
}
