//! Central-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::{no_grad, Tensor};

/// Outcome of a [`grad_check`] run.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Label of the checked computation (for diagnostics).
    pub name: String,
    /// Largest relative error between analytic and numeric gradient,
    /// taken over every element of every input.
    pub max_rel_error: f64,
    /// Index of the input tensor holding the worst element.
    pub worst_input: usize,
    /// Flat element index of the worst element within that input.
    pub worst_element: usize,
    /// Step size used for central differences.
    pub eps: f64,
}

impl GradCheckReport {
    /// Convenience predicate against a tolerance.
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares the analytic gradient of `f` (a scalar-valued function of the
/// given inputs) against central finite differences.
///
/// Every element of every input is perturbed by ±`eps`; the relative error
/// uses the symmetric denominator `max(|analytic|, |numeric|, 1e-8)`.
/// A non-finite function value at any evaluation point aborts with
/// [`Error::NonFinite`] naming the offending input, rather than reporting a
/// meaningless error bound.
pub fn grad_check<F>(name: &str, inputs: &[Tensor], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Config(format!(
            "grad_check eps must be in (0, 1e-2], got {eps}"
        )));
    }
    if inputs.is_empty() {
        return Err(Error::Config("grad_check needs at least one input".to_string()));
    }

    // Fresh trainable leaves, so caller tensors keep their gradients and
    // graph state untouched.
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::param(t.shape(), t.data().to_vec()))
        .collect::<Result<_>>()?;

    let out = f(&leaves)?;
    let out_val = out.item()?;
    if !out_val.is_finite() {
        return Err(Error::NonFinite {
            context: format!("{name}: forward value {out_val}"),
        });
    }
    out.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|leaf| leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]))
        .collect();

    let mut report = GradCheckReport {
        name: name.to_string(),
        max_rel_error: 0.0,
        worst_input: 0,
        worst_element: 0,
        eps,
    };
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let numeric = {
                let eval = |delta: f64| -> Result<f64> {
                    let mut data = input.data().to_vec();
                    data[e] += delta;
                    let mut probe: Vec<Tensor> = leaves.clone();
                    probe[i] = Tensor::from_vec(input.shape(), data)?;
                    let v = no_grad(|| f(&probe))?.item()?;
                    if !v.is_finite() {
                        return Err(Error::NonFinite {
                            context: format!(
                                "{name}: forward value {v} with input {i} element {e} shifted by {delta:+e}"
                            ),
                        });
                    }
                    Ok(v)
                };
                (eval(eps)? - eval(-eps)?) / (2.0 * eps)
            };
            let a = analytic[i][e];
            let rel = (a - numeric).abs() / (a.abs().max(numeric.abs())).max(1e-8);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_input = i;
                report.worst_element = e;
            }
        }
    }
    Ok(report)
}
