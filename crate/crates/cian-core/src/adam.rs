//! Adam with bias correction. Weight decay is folded into the gradient
//! before the moment updates (L2 penalty, not decoupled).

use crate::error::{Error, Result};
use crate::graph::ParamSet;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 0.01, beta1: 0.9, beta2: 0.999, eps_hat: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    /// Per-parameter (first moment, second moment).
    moments: BTreeMap<String, (Tensor, Tensor)>,
    step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over every parameter in `params`.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    hp: &AdamHyper,
) -> Result<()> {
    if hp.lr <= 0.0 {
        return Err(Error::Parameter("adam_step: lr must be > 0".to_string()));
    }
    if !(0.0..1.0).contains(&hp.beta1) || !(0.0..1.0).contains(&hp.beta2) {
        return Err(Error::Parameter("adam_step: betas must be in [0, 1)".to_string()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);

    for (name, theta) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::dimension("adam_step", format!("missing gradient for '{name}'")))?;
        if g.shape() != theta.shape() {
            return Err(Error::dimension(
                "adam_step",
                format!("gradient shape {:?} != parameter '{name}' shape {:?}", g.shape(), theta.shape()),
            ));
        }
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (Tensor::zeros(theta.shape().to_vec()), Tensor::zeros(theta.shape().to_vec())));
        let md = m.data_mut();
        let vd = v.data_mut();
        let td = theta.data_mut();
        for i in 0..td.len() {
            let gi = g.data()[i] + hp.weight_decay * td[i];
            md[i] = hp.beta1 * md[i] + (1.0 - hp.beta1) * gi;
            vd[i] = hp.beta2 * vd[i] + (1.0 - hp.beta2) * gi * gi;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            td[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps_hat);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(x: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("theta".to_string(), Tensor::scalar(x));
        p
    }

    fn grad(g: f64) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("theta".to_string(), Tensor::scalar(g));
        m
    }

    #[test]
    fn first_step_closed_form() {
        let mut params = scalar_params(1.0);
        let mut state = AdamState::new();
        let hp = AdamHyper { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        let g = 0.5;
        adam_step(&mut params, &grad(g), &mut state, &hp).unwrap();
        let expected = 1.0 - hp.lr * g / (g.abs() + hp.eps_hat);
        assert!((params["theta"].item() - expected).abs() < 1e-12);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut params = scalar_params(3.5);
        let mut state = AdamState::new();
        let hp = AdamHyper { weight_decay: 0.0, ..Default::default() };
        for _ in 0..5 {
            adam_step(&mut params, &grad(0.0), &mut state, &hp).unwrap();
        }
        assert_eq!(params["theta"].item(), 3.5);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut params = scalar_params(0.0);
        let mut state = AdamState::new();
        let hp = AdamHyper { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        for _ in 0..500 {
            let g = 2.0 * (params["theta"].item() - 3.0);
            adam_step(&mut params, &grad(g), &mut state, &hp).unwrap();
        }
        assert!((params["theta"].item() - 3.0).abs() < 1e-2);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut params = scalar_params(0.0);
        let mut state = AdamState::new();
        let mut g = BTreeMap::new();
        g.insert("theta".to_string(), Tensor::vector(vec![1.0, 2.0]));
        let err = adam_step(&mut params, &g, &mut state, &AdamHyper::default()).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }
}
