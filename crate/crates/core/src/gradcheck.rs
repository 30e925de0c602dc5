//! Central finite-difference verification of analytic gradients.

use crate::params::Parameters;
use crate::scalar::Scalar;

/// Smallest magnitude used as the denominator of the relative error, so
/// coordinates whose true gradient is zero are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// `(parameter name, index within it)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Compares `analytic` with `(L(θ+ε) − L(θ−ε)) / 2ε` for every scalar.
pub fn check_gradients<S, P, L>(model: &P, analytic: &P, eps: f64, loss: L) -> GradCheck
where
    S: Scalar,
    P: Parameters<S>,
    L: Fn(&P) -> f64,
{
    let names: Vec<(String, usize)> = model.named().into_iter().map(|(n, t)| (n, t.len())).collect();
    let grads = analytic.flatten();
    let mut probe = model.clone();
    let mut out = GradCheck { coordinates: grads.len(), max_rel_error: 0.0, worst: None };
    let mut name_idx = 0;
    let mut offset = 0;
    for (i, g) in grads.iter().enumerate() {
        while i >= offset + names[name_idx].1 {
            offset += names[name_idx].1;
            name_idx += 1;
        }
        let mut orig = S::zero();
        probe.with_flat_mut(i, &mut |v| {
            orig = *v;
            *v = orig + S::lit(eps);
        });
        let up = loss(&probe);
        probe.with_flat_mut(i, &mut |v| *v = orig - S::lit(eps));
        let down = loss(&probe);
        probe.with_flat_mut(i, &mut |v| *v = orig);
        let numeric = (up - down) / (2.0 * eps);
        let a = g.f64();
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel > out.max_rel_error || out.worst.is_none() {
            out.max_rel_error = rel;
            out.worst = Some((names[name_idx].0.clone(), i - offset));
        }
    }
    out
}
