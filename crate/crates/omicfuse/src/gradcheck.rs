//! Verification of reverse-mode gradients against central finite differences.
//!
//! The harness re-evaluates the supplied function from scratch for every
//! probe, so the function must be deterministic: same parameter values, same
//! loss, bit for bit.

use crate::error::{Error, Result};
use crate::tape::{Tape, TensorId};
use crate::tensor::DiffTensor;

/// Outcome for one checked parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub checked_elements: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for p in &self.params {
            out.push_str(&format!(
                "  {:<40} rel_err {:>12.3e}  ({} elements)\n",
                p.name, p.max_rel_err, p.checked_elements
            ));
        }
        out.push_str(&format!(
            "  => max rel err {:.3e} vs tol {:.1e}: {}\n",
            self.max_rel_err,
            self.tol,
            if self.passed { "PASS" } else { "FAIL" }
        ));
        out
    }
}

/// Relative error with an absolute floor of 1 so that near-zero gradients
/// are compared absolutely.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

fn eval_scalar<F>(params: &[(String, DiffTensor)], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params.iter().map(|(_, t)| tape.leaf(t)).collect();
    let loss = f(&mut tape, &ids)?;
    let v = tape.value(loss);
    if v.numel() != 1 {
        return Err(Error::config(format!(
            "grad_check function must return a scalar, got shape {:?}",
            v.shape()
        )));
    }
    let out = v.data()[0];
    if !out.is_finite() {
        return Err(Error::numeric("grad_check", format!("non-finite loss {out}")));
    }
    Ok(out)
}

/// Indices probed for a tensor: all of them, or an evenly spaced subset when
/// a cap is given (keeps full-model checks inside their time budget).
fn probe_indices(numel: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(k) if numel > k => {
            let stride = numel as f64 / k as f64;
            (0..k).map(|i| (i as f64 * stride) as usize).collect()
        }
        _ => (0..numel).collect(),
    }
}

/// Compare backward-pass gradients of `f` against central finite differences
/// for every named parameter. Passes iff every per-parameter max relative
/// error is at most `tol`.
pub fn grad_check<F>(
    params: &mut [(String, DiffTensor)],
    eps: f64,
    tol: f64,
    max_checks_per_param: Option<usize>,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::config(format!(
            "grad_check eps must lie in (0, 1e-2], got {eps}"
        )));
    }

    // Analytic gradients from one taped forward/backward pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params.iter().map(|(_, t)| tape.leaf(t)).collect();
    let loss = f(&mut tape, &ids)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::config(format!(
            "grad_check function must return a scalar, got shape {:?}",
            tape.value(loss).shape()
        )));
    }
    let loss_value = tape.value(loss).data()[0];
    if !loss_value.is_finite() {
        return Err(Error::numeric(
            "grad_check",
            format!("non-finite loss {loss_value}"),
        ));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(params.iter())
        .map(|(&id, (_, t))| grads.wrt(id, t.numel()))
        .collect();
    drop(tape);

    let mut checks = Vec::with_capacity(params.len());
    let mut overall: f64 = 0.0;
    for pi in 0..params.len() {
        let numel = params[pi].1.numel();
        let indices = probe_indices(numel, max_checks_per_param);
        let mut worst: f64 = 0.0;
        for &k in &indices {
            let original = params[pi].1.data()[k];
            params[pi].1.data_mut()[k] = original + eps;
            let f_plus = eval_scalar(params, &f)?;
            params[pi].1.data_mut()[k] = original - eps;
            let f_minus = eval_scalar(params, &f)?;
            params[pi].1.data_mut()[k] = original;
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            worst = worst.max(rel_err(analytic[pi][k], numeric));
        }
        overall = overall.max(worst);
        checks.push(ParamCheck {
            name: params[pi].0.clone(),
            max_rel_err: worst,
            checked_elements: indices.len(),
        });
    }

    Ok(GradCheckReport {
        params: checks,
        max_rel_err: overall,
        tol,
        passed: overall <= tol,
    })
}
