//! Central finite-difference gradient checks in double precision.
//!
//! The numeric side only evaluates forward passes, so it is independent of
//! every backward implementation it is compared against.

use crate::error::Result;
use crate::param::Module;
use crate::tensor::Tensor;

/// Finite-difference step used throughout.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest per-element relative error.
    pub max_rel_err: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < tol
    }

    pub fn merge(&self, other: &GradCheckReport) -> GradCheckReport {
        GradCheckReport {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            checked: self.checked + other.checked,
        }
    }
}

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)` with
/// `floor = max(1e-3 * max_j |n_j|, 1e-8)`. The floor keeps entries that
/// are numerically zero from dominating the ratio.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Checks d f / d inputs for a scalar-valued `f`. Every element of every
/// input is perturbed.
pub fn check_inputs<F>(f: F, inputs: &[Tensor<f64>]) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.to_leaf()).collect();
    f(&leaves)?.backward()?;
    let mut analytic = Vec::new();
    for l in &leaves {
        match l.grad() {
            Some(g) => analytic.extend(g.to_vec()),
            None => analytic.extend(vec![0.0; l.numel()]),
        }
    }
    let mut numeric = Vec::with_capacity(analytic.len());
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let eval = |delta: f64| -> Result<f64> {
                let probe: Vec<Tensor<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, x)| {
                        if k != i {
                            return x.detach();
                        }
                        let mut v = x.to_vec();
                        v[j] += delta;
                        Tensor::from_vec(v, x.shape()).expect("same shape")
                    })
                    .collect();
                Ok(crate::tensor::no_grad(|| f(&probe))?.item())
            };
            numeric.push((eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP));
        }
    }
    Ok(GradCheckReport {
        max_rel_err: relative_error(&analytic, &numeric),
        checked: analytic.len(),
    })
}

/// Checks the gradient of `loss(module)` with respect to the listed
/// `(parameter index, element index)` entries.
pub fn check_module<M, F>(
    module: &mut M,
    loss: F,
    entries: &[(usize, usize)],
) -> Result<GradCheckReport>
where
    M: Module<f64>,
    F: Fn(&M) -> Result<Tensor<f64>>,
{
    module.zero_grad();
    loss(module)?.backward()?;
    let grads: Vec<Option<Vec<f64>>> = module
        .parameters()
        .iter()
        .map(|p| p.grad().map(|g| g.to_vec()))
        .collect();
    let analytic: Vec<f64> = entries
        .iter()
        .map(|&(p, e)| grads[p].as_ref().map_or(0.0, |g| g[e]))
        .collect();
    module.zero_grad();

    let mut numeric = Vec::with_capacity(entries.len());
    for &(p, e) in entries {
        let mut eval = |delta: f64| -> Result<f64> {
            nudge(module, p, e, delta);
            let v = crate::tensor::no_grad(|| loss(module)).map(|t| t.item());
            nudge(module, p, e, -delta);
            v
        };
        let plus = eval(FD_STEP)?;
        let minus = eval(-FD_STEP)?;
        numeric.push((plus - minus) / (2.0 * FD_STEP));
    }
    Ok(GradCheckReport {
        max_rel_err: relative_error(&analytic, &numeric),
        checked: entries.len(),
    })
}

fn nudge<M: Module<f64>>(module: &mut M, param: usize, elem: usize, delta: f64) {
    let mut idx = 0;
    module.visit_mut(&mut |p| {
        if idx == param {
            let mut v = p.value().to_vec();
            v[elem] += delta;
            p.set_data(v);
        }
        idx += 1;
    });
}
