//! Cosine learning-rate schedule and Adam with coupled L2 decay.

use dpm_tensor::{Element, Module};

use crate::error::{Error, Result};

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total))`, exact at both ends.
pub fn cosine_lr(step: u64, total: u64, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 || step > total {
        return Err(Error::Invalid(format!(
            "cosine_lr: step {step} outside [0, {total}] (total must be at least 1)"
        )));
    }
    if step == 0 {
        return Ok(lr_max);
    }
    if step == total {
        return Ok(lr_min);
    }
    let phase = std::f64::consts::PI * step as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments per parameter (visiting order) and the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Element> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new<M: Module<T>>(model: &M) -> Self {
        let sizes: Vec<usize> = model.parameters().iter().map(|p| p.numel()).collect();
        AdamState {
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        }
    }
}

/// One Adam update from the gradients currently held by `model`'s
/// parameters. Decay is added to the gradient before the moment updates.
pub fn adam_step<T: Element, M: Module<T>>(
    model: &mut M,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    // Collect gradients first so a missing one leaves everything untouched.
    let mut grads = Vec::new();
    let mut missing = None;
    model.visit(&mut |p| match p.grad() {
        Some(g) => grads.push(g),
        None => {
            if missing.is_none() {
                missing = Some(p.name().to_string());
            }
        }
    });
    if let Some(name) = missing {
        return Err(Error::Invalid(format!(
            "adam_step: parameter {name} has no gradient"
        )));
    }
    if grads.len() != state.m.len() {
        return Err(Error::Invalid(format!(
            "adam_step: optimizer tracks {} parameters, model has {}",
            state.m.len(),
            grads.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let mut idx = 0;
    let mut result = Ok(());
    model.visit_mut(&mut |p| {
        let (m, v) = (&mut state.m[idx], &mut state.v[idx]);
        let g = grads[idx].data();
        idx += 1;
        if m.len() != p.numel() {
            result = Err(Error::Invalid(format!(
                "adam_step: moment size mismatch for {}",
                p.name()
            )));
            return;
        }
        let theta: Vec<T> = p
            .value()
            .data()
            .iter()
            .enumerate()
            .map(|(i, &th)| {
                let th = th.as_f64();
                let gi = g[i].as_f64() + cfg.weight_decay * th;
                let mi = cfg.beta1 * m[i].as_f64() + (1.0 - cfg.beta1) * gi;
                let vi = cfg.beta2 * v[i].as_f64() + (1.0 - cfg.beta2) * gi * gi;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let step = lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
                T::from_f64(th - step)
            })
            .collect();
        p.set_data(theta);
    });
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use dpm_tensor::{Parameter, Tensor};

    const CFG: AdamConfig = AdamConfig {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };

    #[test]
    fn schedule_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 1000, 1e-4, 1e-6).unwrap(), 1e-4);
        assert_eq!(cosine_lr(1000, 1000, 1e-4, 1e-6).unwrap(), 1e-6);
        assert!((cosine_lr(500, 1000, 1e-4, 1e-6).unwrap() - 5.05e-5).abs() < 1e-18);
        assert!(cosine_lr(1001, 1000, 1e-4, 1e-6).is_err());
        assert!(cosine_lr(0, 0, 1e-4, 1e-6).is_err());
    }

    #[test]
    fn first_step_is_unit_scaled() {
        let mut p = Parameter::new("theta", Tensor::<f64>::scalar(0.0));
        let mut st = AdamState::new(&p);
        p.value().mul_scalar(1.0).sum().backward().unwrap();
        adam_step(&mut p, &mut st, 0.1, &CFG).unwrap();
        assert!((p.value().item() + 0.1).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = Parameter::new("w", Tensor::<f32>::from_vec(vec![0.5, -2.0], &[2]).unwrap());
        let mut st = AdamState::new(&p);
        p.value().mul_scalar(0.0).sum().backward().unwrap();
        adam_step(&mut p, &mut st, 0.1, &CFG).unwrap();
        assert_eq!(p.value().to_vec(), vec![0.5, -2.0]);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut p = Parameter::new("lonely", Tensor::<f32>::scalar(1.0));
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &mut st, 0.1, &CFG).unwrap_err();
        assert!(err.to_string().contains("lonely"));
        assert_eq!(st.t, 0);
    }
}
