//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;
use crate::params::ParamStore;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Label and coordinate of the worst entry.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    fn record(&mut self, label: &str, coord: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.coordinates += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some((label.to_string(), coord));
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        if other.max_rel_error >= self.max_rel_error && other.worst.is_some() {
            self.worst = other.worst;
        }
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.coordinates += other.coordinates;
    }
}

fn eval_scalar(f: &impl Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = f(&mut tape, xv)?;
    Ok(tape.item(y))
}

/// Checks the gradient of scalar-valued `f` at `x` over every coordinate.
pub fn grad_check(f: impl Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor, eps: f64) -> Result<GradCheckReport> {
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, eps, &coords)
}

/// Like [`grad_check`] but only over the listed coordinates.
pub fn grad_check_coords(
    f: impl Fn(&mut Tape, Var) -> Result<Var>,
    x: &Tensor,
    eps: f64,
    coords: &[usize],
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_requires_grad(true));
    let y = f(&mut tape, xv)?;
    let grads = tape.backward(y)?;
    let zeros = vec![0.0; x.numel()];
    let analytic = grads.get(xv).unwrap_or(&zeros);

    let mut report = GradCheckReport::default();
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        report.record("x", i, analytic[i], (plus - minus) / (2.0 * eps));
    }
    Ok(report)
}

/// Checks gradients of a loss built from named parameters.
///
/// `loss` builds a scalar on a fresh tape from the store; `targets` lists the
/// parameter names and coordinates to perturb. Every target is treated as
/// trainable for the duration of the check.
pub fn grad_check_params(
    store: &ParamStore,
    targets: &[(String, Vec<usize>)],
    eps: f64,
    loss: impl Fn(&mut Tape, &ParamStore) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut work = store.clone();
    work.reset_grads();
    for (name, _) in targets {
        work.require_mut(name)?.set_requires_grad(true);
    }
    let mut tape = Tape::new();
    let y = loss(&mut tape, &work)?;
    tape.backward_into(y, &mut work, 1.0)?;
    let analytic: Vec<Vec<f64>> = targets
        .iter()
        .map(|(name, _)| {
            let t = work.get(name).expect("checked above");
            t.grad().map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
        })
        .collect();

    let mut report = GradCheckReport::default();
    for ((name, coords), grad) in targets.iter().zip(&analytic) {
        for &i in coords {
            let orig = work.require(name)?.data()[i];
            let at = |v: f64, work: &mut ParamStore| -> Result<f64> {
                work.require_mut(name)?.data_mut()[i] = v;
                let mut tape = Tape::new();
                let y = loss(&mut tape, work)?;
                Ok(tape.item(y))
            };
            let plus = at(orig + eps, &mut work)?;
            let minus = at(orig - eps, &mut work)?;
            work.require_mut(name)?.data_mut()[i] = orig;
            report.record(name, i, grad[i], (plus - minus) / (2.0 * eps));
        }
    }
    Ok(report)
}
