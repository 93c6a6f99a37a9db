//! Reconstruction, KL, center and augmentation-consistency losses and their
//! weighted total.
//!
//! The `*_on` functions record onto a [`Tape`] for training; the plain
//! versions evaluate the same graph on constants.

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{config_err, dim_err, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub kl: f64,
    pub cen: f64,
    pub a: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            kl: 1.0,
            cen: 1.0,
            a: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("lambda_kl", self.kl), ("lambda_cen", self.cen), ("lambda_a", self.a)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(config_err!("{name} must be a finite non-negative number, got {w}"));
            }
        }
        Ok(())
    }
}

/// Loss components of one step with their weighted contributions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_r: f64,
    pub l_kl: f64,
    pub l_cen: f64,
    pub l_a: f64,
    pub weighted_kl: f64,
    pub weighted_cen: f64,
    pub weighted_a: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_r, self.l_kl, self.l_cen, self.l_a, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Combines the four components; negative weights are rejected.
pub fn total_loss(l_r: f64, l_kl: f64, l_cen: f64, l_a: f64, weights: &LossWeights) -> Result<LossReport> {
    weights.validate()?;
    let weighted_kl = weights.kl * l_kl;
    let weighted_cen = weights.cen * l_cen;
    let weighted_a = weights.a * l_a;
    Ok(LossReport {
        l_r,
        l_kl,
        l_cen,
        l_a,
        weighted_kl,
        weighted_cen,
        weighted_a,
        total: l_r + weighted_kl + weighted_cen + weighted_a,
    })
}

/// Component loss nodes on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_r: Var,
    pub l_kl: Var,
    pub l_cen: Var,
    pub l_a: Var,
}

/// Records the weighted total and returns it with the report.
pub fn total_loss_on(tape: &mut Tape, parts: LossVars, weights: &LossWeights) -> Result<(Var, LossReport)> {
    let report = total_loss(
        tape.scalar(parts.l_r) as f64,
        tape.scalar(parts.l_kl) as f64,
        tape.scalar(parts.l_cen) as f64,
        tape.scalar(parts.l_a) as f64,
        weights,
    )?;
    let kl = tape.scale(parts.l_kl, weights.kl as f32);
    let cen = tape.scale(parts.l_cen, weights.cen as f32);
    let a = tape.scale(parts.l_a, weights.a as f32);
    let t = tape.add(parts.l_r, kl)?;
    let t = tape.add(t, cen)?;
    let t = tape.add(t, a)?;
    Ok((t, report))
}

/// Squared error summed over every element of the batch.
pub fn recon_loss_on(tape: &mut Tape, x_hat: Var, x: Var) -> Result<Var> {
    let diff = tape.sub(x_hat, x)?;
    let sq = tape.square(diff);
    Ok(tape.sum(sq))
}

/// Closed-form KL to the standard normal, summed over dimensions and
/// averaged over the batch.
pub fn kl_loss_on(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    if tape.shape(mu) != tape.shape(logvar) || tape.shape(mu).len() != 2 {
        return Err(dim_err!(
            "kl_loss expects two B×d tensors, got {:?} and {:?}",
            tape.shape(mu),
            tape.shape(logvar)
        ));
    }
    let (b, d) = (tape.shape(mu)[0], tape.shape(mu)[1]);
    let mu2 = tape.square(mu);
    let var = tape.exp(logvar);
    let t = tape.add(mu2, var)?;
    let t = tape.sub(t, logvar)?;
    let s = tape.sum(t);
    let s = tape.add_scalar(s, -((b * d) as f32));
    Ok(tape.scale(s, 0.5 / b as f32))
}

/// `½ Σ_i Σ_j ‖P_j^i − C^i‖²` for `P` of shape `B×k×c` and `C` of shape `k×c`.
pub fn center_loss_on(tape: &mut Tape, p: Var, c: Var) -> Result<Var> {
    let ps = tape.shape(p).to_vec();
    if ps.len() != 3 || tape.shape(c) != &ps[1..] {
        return Err(dim_err!(
            "center_loss expects P B×k×c and C k×c, got {ps:?} and {:?}",
            tape.shape(c)
        ));
    }
    let diff = tape.sub_rows(p, c)?;
    let sq = tape.square(diff);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 0.5))
}

/// Masked feature-chunk distances plus the unmasked `z_u` distance, summed
/// over the batch. `mask[i]` set means attribute `i` was perturbed and its
/// chunk is excluded.
pub fn aug_consistency_loss_on(
    tape: &mut Tape,
    z_f: Var,
    a_f: Var,
    z_u: Var,
    a_u: Var,
    mask: &[bool],
) -> Result<Var> {
    let fs = tape.shape(z_f).to_vec();
    if fs.len() != 3 || tape.shape(a_f) != fs || fs[1] != mask.len() {
        return Err(dim_err!(
            "aug_consistency_loss: z_f {fs:?}, a_f {:?}, mask length {}",
            tape.shape(a_f),
            mask.len()
        ));
    }
    let (b, k, d) = (fs[0], fs[1], fs[2]);
    let keep = Tensor::from_fn(&fs, |idx| if mask[(idx / d) % k] { 0.0 } else { 1.0 });
    let keep = tape.constant(keep);
    let diff = tape.sub(z_f, a_f)?;
    let sq = tape.square(diff);
    let masked = tape.mul(sq, keep)?;
    let feature = tape.sum(masked);
    let du = tape.sub(z_u, a_u)?;
    if tape.shape(du) != [b, d] {
        return Err(dim_err!("z_u must be {b}×{d}, got {:?}", tape.shape(du)));
    }
    let squ = tape.square(du);
    let unspecified = tape.sum(squ);
    tape.add(feature, unspecified)
}

fn eval(f: impl FnOnce(&mut Tape, &[Var]) -> Result<Var>, inputs: &[&Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant((*t).clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.scalar(out) as f64)
}

pub fn recon_loss(x_hat: &Tensor, x: &Tensor) -> Result<f64> {
    if x_hat.shape() != x.shape() {
        return Err(dim_err!(
            "recon_loss: shapes {:?} and {:?} differ",
            x_hat.shape(),
            x.shape()
        ));
    }
    eval(|t, v| recon_loss_on(t, v[0], v[1]), &[x_hat, x])
}

pub fn kl_loss(mu: &Tensor, logvar: &Tensor) -> Result<f64> {
    eval(|t, v| kl_loss_on(t, v[0], v[1]), &[mu, logvar])
}

pub fn center_loss(p: &Tensor, c: &Tensor) -> Result<f64> {
    eval(|t, v| center_loss_on(t, v[0], v[1]), &[p, c])
}

pub fn aug_consistency_loss(z_f: &Tensor, a_f: &Tensor, z_u: &Tensor, a_u: &Tensor, mask: &[bool]) -> Result<f64> {
    eval(
        |t, v| aug_consistency_loss_on(t, v[0], v[1], v[2], v[3], mask),
        &[z_f, a_f, z_u, a_u],
    )
}
