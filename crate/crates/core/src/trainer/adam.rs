use std::collections::BTreeMap;

use crate::diffcore::{ParamStore, Tensor};
use crate::error::{contract_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments keyed by parameter path, plus the shared step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update over every parameter of `stores`, then
/// clears the gradients. All gradients are checked before anything moves.
pub fn adam_step(stores: &mut [&mut ParamStore], state: &mut OptimizerState, cfg: &AdamConfig) -> Result<()> {
    for store in stores.iter() {
        for (name, p) in store.iter() {
            if p.grad().is_none() {
                return Err(contract_err!("parameter '{name}' has no gradient"));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for store in stores.iter_mut() {
        for (name, p) in store.iter_mut() {
            let shape = p.shape().to_vec();
            let m = state
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(&shape));
            let v = state
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(&shape));
            let grad = p.grad().expect("checked above").to_vec();
            let (md, vd) = (m.data_mut(), v.data_mut());
            let values = p.data_mut();
            for i in 0..values.len() {
                let g = grad[i] as f64;
                let mi = cfg.beta1 * md[i] as f64 + (1.0 - cfg.beta1) * g;
                let vi = cfg.beta2 * vd[i] as f64 + (1.0 - cfg.beta2) * g * g;
                md[i] = mi as f32;
                vd[i] = vi as f32;
                let update = cfg.learning_rate * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
                values[i] = (values[i] as f64 - update) as f32;
            }
            if !(p.all_finite() && m.all_finite() && v.all_finite()) {
                return Err(Error::NonFinite(format!(
                    "parameter '{name}' or its Adam moments became non-finite at step {}",
                    state.step
                )));
            }
        }
        store.zero_grads();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with_grad(values: &[f32], grad: Option<&[f32]>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(&[values.len()], values.to_vec()).unwrap()).unwrap();
        if let Some(g) = grad {
            s.get_mut("w").unwrap().accumulate_grad(g).unwrap();
        }
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store_with_grad(&[0.5, -1.0], Some(&[0.0, 0.0]));
        let before = s.get("w").unwrap().data().to_vec();
        adam_step(&mut [&mut s], &mut OptimizerState::new(), &AdamConfig::default()).unwrap();
        assert_eq!(s.get("w").unwrap().data(), before);
        assert!(s.get("w").unwrap().grad().is_none());
    }

    #[test]
    fn first_step_with_unit_gradient() {
        let cfg = AdamConfig::default();
        let mut s = store_with_grad(&[0.0; 4], Some(&[1.0; 4]));
        let mut st = OptimizerState::new();
        adam_step(&mut [&mut s], &mut st, &cfg).unwrap();
        let want = -cfg.learning_rate / (1.0 + cfg.eps);
        for v in s.get("w").unwrap().data() {
            assert!((*v as f64 - want).abs() < 1e-10);
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn matches_scalar_reference_over_several_steps() {
        let cfg = AdamConfig {
            learning_rate: 0.01,
            ..AdamConfig::default()
        };
        let grads = [0.3, -1.2, 0.7, 2.0, -0.1];
        let mut s = store_with_grad(&[1.0], None);
        let mut st = OptimizerState::new();
        let (mut p, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            s.get_mut("w").unwrap().accumulate_grad(&[*g as f32]).unwrap();
            adam_step(&mut [&mut s], &mut st, &cfg).unwrap();
            m = 0.5 * m + 0.5 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.5f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            p -= 0.01 * mh / (vh.sqrt() + 1e-8);
            assert!((s.get("w").unwrap().data()[0] as f64 - p).abs() < 1e-6);
        }
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut s = store_with_grad(&[1.0], None);
        let err = adam_step(&mut [&mut s], &mut OptimizerState::new(), &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Contract(ref m) if m.contains("'w'")));
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let mut s = store_with_grad(&[1.0], Some(&[f32::NAN]));
        let err = adam_step(&mut [&mut s], &mut OptimizerState::new(), &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }
}
