use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{contract_err, Result};

/// Compares reverse-mode gradients of a scalar function with central
/// differences and returns the worst coordinate's
/// `|analytic − numeric| / max(1, |analytic| + |numeric|)`.
///
/// `f` is evaluated on fresh tapes; it must be scalar-valued. Inputs must sit
/// at least `eps` away from kinks (e.g. ReLU at zero), otherwise the numeric
/// side is meaningless.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f32) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad()))
        .collect();
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).len() != 1 {
        return Err(contract_err!("grad_check needs a scalar-valued function"));
    }
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vs)?;
        Ok(t.scalar(out) as f64)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("inputs require grad").to_vec();
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps as f64);
            let a = analytic[j] as f64;
            let err = (a - numeric).abs() / 1f64.max(a.abs() + numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
