use nalgebra::DMatrix;
use statrs::function::gamma::digamma;

use crate::error::{config_err, dim_err, Result};
use crate::rng::RngState;

pub const KSG_ESTIMATOR: &str = "ksg1";
const JITTER_SCALE: f64 = 1e-10;
const JITTER_SEED: u64 = 0x6a17;

/// A mutual-information estimate in nats.
#[derive(Debug, Clone, PartialEq)]
pub struct MIEstimate {
    /// Estimate clamped at zero.
    pub value: f64,
    /// Unclamped estimate; small negative values are estimator noise.
    pub raw: f64,
    pub estimator: &'static str,
    pub k_neighbors: usize,
    pub n: usize,
    /// Set when exact joint duplicates forced a tiny seeded jitter.
    pub jittered: bool,
}

fn max_dist(m: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    (0..m.ncols()).fold(0.0, |acc, c| acc.max((m[(i, c)] - m[(j, c)]).abs()))
}

/// Returns `None` if some point's k-th joint neighbor is at distance zero.
fn ksg_sum(x: &DMatrix<f64>, z: &DMatrix<f64>, k: usize) -> Option<f64> {
    let n = x.nrows();
    let mut dx = vec![0.0; n];
    let mut dz = vec![0.0; n];
    let mut joint = Vec::with_capacity(n);
    let mut total = 0.0;
    for i in 0..n {
        joint.clear();
        for j in 0..n {
            dx[j] = max_dist(x, i, j);
            dz[j] = max_dist(z, i, j);
            if j != i {
                joint.push(dx[j].max(dz[j]));
            }
        }
        let (_, eps, _) = joint.select_nth_unstable_by(k - 1, f64::total_cmp);
        let eps = *eps;
        if eps == 0.0 {
            return None;
        }
        let nx = (0..n).filter(|&j| j != i && dx[j] < eps).count();
        let nz = (0..n).filter(|&j| j != i && dz[j] < eps).count();
        total += digamma((nx + 1) as f64) + digamma((nz + 1) as f64);
    }
    Some(total / n as f64)
}

fn jitter(m: &DMatrix<f64>, rng: &mut RngState) -> DMatrix<f64> {
    let n = m.nrows() as f64;
    let mut out = m.clone();
    for c in 0..m.ncols() {
        let col = m.column(c);
        let mean = col.sum() / n;
        let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let scale = JITTER_SCALE * std.max(1.0);
        for r in 0..m.nrows() {
            out[(r, c)] += scale * rng.normal();
        }
    }
    out
}

/// Kraskov–Stögbauer–Grassberger estimator (first variant) with max-norm
/// distances, between row-aligned sample matrices.
pub fn estimate_mi_ksg(x: &DMatrix<f64>, z: &DMatrix<f64>, k_neighbors: usize) -> Result<MIEstimate> {
    let n = x.nrows();
    if z.nrows() != n {
        return Err(dim_err!("x has {n} samples but z has {}", z.nrows()));
    }
    if k_neighbors == 0 || k_neighbors >= n {
        return Err(config_err!("k_neighbors must be in 1..{n}, got {k_neighbors}"));
    }
    if x.ncols() == 0 || z.ncols() == 0 {
        return Err(dim_err!("samples need at least one dimension"));
    }
    if !(x.iter().all(|v| v.is_finite()) && z.iter().all(|v| v.is_finite())) {
        return Err(dim_err!("samples must be finite"));
    }
    let (mean_psi, jittered) = match ksg_sum(x, z, k_neighbors) {
        Some(s) => (s, false),
        None => {
            let mut rng = RngState::new(JITTER_SEED);
            let xj = jitter(x, &mut rng);
            let zj = jitter(z, &mut rng);
            let s = ksg_sum(&xj, &zj, k_neighbors)
                .ok_or_else(|| dim_err!("samples remain duplicated after jitter"))?;
            (s, true)
        }
    };
    let raw = digamma(k_neighbors as f64) + digamma(n as f64) - mean_psi;
    Ok(MIEstimate {
        value: raw.max(0.0),
        raw,
        estimator: KSG_ESTIMATOR,
        k_neighbors,
        n,
        jittered,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn column(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    fn gaussian_pair(rho: f64, n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = RngState::new(seed);
        (0..n)
            .map(|_| {
                let a = rng.normal();
                let b = rng.normal();
                (a, rho * a + (1.0 - rho * rho).sqrt() * b)
            })
            .unzip()
    }

    #[test]
    fn correlated_gaussians_match_the_analytic_value() {
        let (x, z) = gaussian_pair(0.9, 5000, 1);
        let est = estimate_mi_ksg(&column(&x), &column(&z), 3).unwrap();
        let truth = -0.5 * (1.0 - 0.81f64).ln();
        assert!((est.value - truth).abs() < 0.1, "{} vs {truth}", est.value);
        assert!(!est.jittered);
    }

    #[test]
    fn independent_gaussians_give_near_zero() {
        let (x, z) = gaussian_pair(0.0, 5000, 2);
        let est = estimate_mi_ksg(&column(&x), &column(&z), 3).unwrap();
        assert!(est.raw.abs() < 0.05, "{}", est.raw);
    }

    #[test]
    fn monotone_transform_barely_moves_the_estimate() {
        let (x, z) = gaussian_pair(0.7, 2000, 3);
        let cubed: Vec<f64> = x.iter().map(|v| v * v * v).collect();
        let a = estimate_mi_ksg(&column(&x), &column(&z), 3).unwrap();
        let b = estimate_mi_ksg(&column(&cubed), &column(&z), 3).unwrap();
        assert!((a.raw - b.raw).abs() < 0.05, "{} vs {}", a.raw, b.raw);
    }

    #[test]
    fn discrete_pair_matches_plug_in_histogram() {
        let mut rng = RngState::new(4);
        let n = 3000;
        let mut x = Vec::with_capacity(n);
        let mut z = Vec::with_capacity(n);
        for _ in 0..n {
            let a = rng.below(4);
            let b = if rng.bernoulli(0.7) { a } else { rng.below(4) };
            x.push(a as f64);
            z.push(b as f64);
        }
        let mut joint: HashMap<(u64, u64), f64> = HashMap::new();
        let mut px: HashMap<u64, f64> = HashMap::new();
        let mut pz: HashMap<u64, f64> = HashMap::new();
        for (a, b) in x.iter().zip(&z) {
            *joint.entry((*a as u64, *b as u64)).or_default() += 1.0 / n as f64;
            *px.entry(*a as u64).or_default() += 1.0 / n as f64;
            *pz.entry(*b as u64).or_default() += 1.0 / n as f64;
        }
        let oracle: f64 = joint
            .iter()
            .map(|((a, b), p)| p * (p / (px[a] * pz[b])).ln())
            .sum();
        let est = estimate_mi_ksg(&column(&x), &column(&z), 3).unwrap();
        assert!(est.jittered);
        assert!((est.value - oracle).abs() < 0.1 * oracle, "{} vs {oracle}", est.value);
    }

    #[test]
    fn constant_partner_gives_zero() {
        let (x, _) = gaussian_pair(0.0, 500, 5);
        let est = estimate_mi_ksg(&column(&x), &column(&vec![1.5; 500]), 3).unwrap();
        assert!(est.value < 0.05);
    }

    #[test]
    fn deterministic_and_validated() {
        let (x, z) = gaussian_pair(0.5, 300, 6);
        let a = estimate_mi_ksg(&column(&x), &column(&z), 4).unwrap();
        assert_eq!(a, estimate_mi_ksg(&column(&x), &column(&z), 4).unwrap());
        assert!(estimate_mi_ksg(&column(&x), &column(&z[..299]), 3).is_err());
        assert!(estimate_mi_ksg(&column(&x), &column(&z), 0).is_err());
    }
}
