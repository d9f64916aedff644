//! Central finite-difference oracle for analytic gradients.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::param::{ParamGrads, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Perturbation size.
    pub eps: f64,
    /// Lower bound on the denominator of the relative error, so gradients
    /// that are zero on both sides do not divide by zero.
    pub floor: f64,
    /// Check at most this many scalars per parameter (evenly strided).
    pub max_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, floor: 1e-6, max_per_param: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: Option<String>,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.entries.len()
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares analytic gradients from `f` against `(f(θ+ε) − f(θ−ε)) / 2ε` for
/// every trainable scalar. Frozen parameters are skipped.
///
/// `f(params, true)` must return the loss and its gradients; with `false`
/// only the loss is needed. `f` is called twice at the unperturbed point and
/// the two losses must agree bit for bit.
pub fn finite_difference_check<F>(params: &mut ParamStore, opts: GradCheckOptions, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, bool) -> Result<(f64, Option<ParamGrads>)>,
{
    if !(opts.eps > 0.0) || !opts.eps.is_finite() {
        return Err(Error::Parameter(alloc::format!("eps must be positive, got {}", opts.eps)));
    }
    let (l0, grads) = f(params, true)?;
    let grads = grads.ok_or(Error::Parameter("objective returned no gradients".into()))?;
    let (l1, _) = f(params, false)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(Error::NonDeterministic(l0, l1));
    }

    let mut report = GradCheckReport::default();
    let ids: Vec<_> = params.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let n = params.get(id).value.len();
        let stride = match opts.max_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let analytic = grads.get(id);
        for idx in (0..n).step_by(stride) {
            let orig = params.get(id).value.data()[idx];
            params.get_mut(id).value.data_mut()[idx] = orig + opts.eps;
            let (lp, _) = f(params, false)?;
            params.get_mut(id).value.data_mut()[idx] = orig - opts.eps;
            let (lm, _) = f(params, false)?;
            params.get_mut(id).value.data_mut()[idx] = orig;
            let numeric = (lp - lm) / (2.0 * opts.eps);
            let a = analytic.map_or(0.0, |g| g[idx]);
            let rel = relative_error(a, numeric, opts.floor);
            if report.worst_param.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = Some(params.get(id).name.clone());
            }
            report.entries.push(GradCheckEntry {
                param: params.get(id).name.clone(),
                index: idx,
                analytic: a,
                numeric,
                rel_err: rel,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn square_at_three() {
        let mut ps = ParamStore::new();
        ps.add("theta", Tensor::scalar(3.0)).unwrap();
        let report = finite_difference_check(&mut ps, GradCheckOptions::default(), |p, want| {
            let mut g = Graph::new(p);
            let t = g.param_named("theta")?;
            let y = g.mul(t, t)?;
            let y = g.sum(y)?;
            let loss = g.value(y).data()[0];
            let grads = if want { Some(g.backward(y)?.params) } else { None };
            Ok((loss, grads))
        })
        .unwrap();
        let e = &report.entries[0];
        assert!((e.analytic - 6.0).abs() < 1e-12);
        assert!((e.numeric - 6.0).abs() < 1e-8);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut ps = ParamStore::new();
        ps.add("a", Tensor::scalar(1.0)).unwrap();
        ps.add("b", Tensor::scalar(2.0)).unwrap();
        ps.by_name_mut("b").unwrap().trainable = false;
        let report = finite_difference_check(&mut ps, GradCheckOptions::default(), |p, want| {
            let mut g = Graph::new(p);
            let a = g.param_named("a")?;
            let b = g.param_named("b")?;
            let y = g.mul(a, b)?;
            let y = g.sum(y)?;
            Ok((g.value(y).data()[0], if want { Some(g.backward(y)?.params) } else { None }))
        })
        .unwrap();
        assert_eq!(report.checked(), 1);
        assert!(report.entries.iter().all(|e| e.param == "a"));
    }

    #[test]
    fn nondeterminism_is_detected() {
        let mut ps = ParamStore::new();
        ps.add("a", Tensor::scalar(1.0)).unwrap();
        let mut calls = 0.0;
        let err = finite_difference_check(&mut ps, GradCheckOptions::default(), |p, _| {
            calls += 1.0;
            Ok((p.value(crate::ParamId(0)).data()[0] + calls, Some(ParamGrads::new(1))))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic(..)));
    }

    #[test]
    fn zero_eps_is_rejected() {
        let mut ps = ParamStore::new();
        ps.add("a", Tensor::scalar(1.0)).unwrap();
        let opts = GradCheckOptions { eps: 0.0, ..Default::default() };
        assert!(finite_difference_check(&mut ps, opts, |_, _| Ok((0.0, None))).is_err());
    }
}
