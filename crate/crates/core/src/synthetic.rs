//! Synthetic benchmark data: AR(1)-correlated Gaussian covariates, randomly
//! permuted and augmented with an intercept, with a sparse linear signal.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backend::{logistic, Dataset, ResponseKind};
use crate::error::{Error, Result};
use crate::rng;

pub const CORRELATION: f64 = 0.75;
pub const INTERCEPT: f64 = -1.0;
pub const ACTIVE_SIGNS: [f64; 5] = [1.0, 1.0, 1.0, -1.0, -1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    Gaussian,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    /// Length `p + 1`; entry 0 is the intercept.
    pub beta_star: Vec<f64>,
    pub y_star: Vec<f64>,
    pub sigma_star: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi_star: Option<Vec<f64>>,
    /// Design column indices with nonzero true coefficients, intercept included.
    pub active: Vec<usize>,
}

fn sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

pub fn generate_synthetic(n: usize, p: usize, snr: f64, kind: SyntheticKind, seed: u64) -> Result<(Dataset, SyntheticTruth)> {
    if n < 10 {
        return Err(Error::input(format!("synthetic n must be at least 10, got {n}")));
    }
    if p < ACTIVE_SIGNS.len() + 1 {
        return Err(Error::input(format!("synthetic p must be at least 6, got {p}")));
    }
    if !(snr > 0.0 && snr.is_finite()) {
        return Err(Error::input(format!("SNR must be positive, got {snr}")));
    }
    let mut r = rng::seeded(seed);
    let innov = (1.0 - CORRELATION * CORRELATION).sqrt();
    let mut raw = DMatrix::zeros(n, p);
    for i in 0..n {
        let mut prev: f64 = r.sample(StandardNormal);
        raw[(i, 0)] = prev;
        for j in 1..p {
            let e: f64 = r.sample(StandardNormal);
            prev = CORRELATION * prev + innov * e;
            raw[(i, j)] = prev;
        }
    }
    let mut perm: Vec<usize> = (0..p).collect();
    perm.shuffle(&mut r);

    let x = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { raw[(i, perm[j - 1])] });
    let mut beta = vec![0.0; p + 1];
    beta[0] = INTERCEPT;
    beta[1..=ACTIVE_SIGNS.len()].copy_from_slice(&ACTIVE_SIGNS);
    let beta_v = DVector::from_column_slice(&beta);
    let y_star: Vec<f64> = (&x * &beta_v).iter().copied().collect();
    let sigma_star = sd(&y_star) / snr.sqrt();

    let (y, pi_star, kind) = match kind {
        SyntheticKind::Gaussian => {
            let y: Vec<f64> = y_star
                .iter()
                .map(|&m| {
                    let e: f64 = r.sample(StandardNormal);
                    m + sigma_star * e
                })
                .collect();
            (y, None, ResponseKind::Continuous)
        }
        SyntheticKind::Binary => {
            let pi: Vec<f64> = y_star.iter().map(|&m| logistic(m)).collect();
            let y = pi
                .iter()
                .map(|&q| {
                    let b = Bernoulli::new(q).expect("probability in [0, 1]");
                    if b.sample(&mut r) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            (y, Some(pi), ResponseKind::Binary)
        }
    };
    let mut names = vec!["intercept".to_string()];
    names.extend((1..=p).map(|j| format!("x{j}")));
    let data = Dataset::new(x, DVector::from_vec(y), names, kind)?;
    let truth = SyntheticTruth {
        active: (0..=ACTIVE_SIGNS.len()).collect(),
        beta_star: beta,
        y_star,
        sigma_star,
        pi_star,
    };
    Ok((data, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snr_one_gives_sd_of_signal() {
        let (_, t) = generate_synthetic(200, 10, 1.0, SyntheticKind::Gaussian, 3).unwrap();
        assert!((t.sigma_star - sd(&t.y_star)).abs() < 1e-12);
        let (_, q) = generate_synthetic(200, 10, 0.25, SyntheticKind::Gaussian, 3).unwrap();
        assert!((q.sigma_star - 2.0 * sd(&q.y_star)).abs() < 1e-12);
    }

    #[test]
    fn five_active_with_signs() {
        let (d, t) = generate_synthetic(50, 20, 1.0, SyntheticKind::Gaussian, 4).unwrap();
        assert_eq!(t.beta_star.len(), 21);
        assert_eq!(t.beta_star[0], -1.0);
        let nz: Vec<f64> = t.beta_star[1..].iter().copied().filter(|&b| b != 0.0).collect();
        assert_eq!(nz, vec![1.0, 1.0, 1.0, -1.0, -1.0]);
        assert_eq!(t.active, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(d.intercept_column(), Some(0));
    }

    #[test]
    fn deterministic_per_seed() {
        let (a, ta) = generate_synthetic(30, 8, 1.0, SyntheticKind::Binary, 9).unwrap();
        let (b, tb) = generate_synthetic(30, 8, 1.0, SyntheticKind::Binary, 9).unwrap();
        assert_eq!(a.x(), b.x());
        assert_eq!(a.y(), b.y());
        assert_eq!(ta, tb);
        let (c, _) = generate_synthetic(30, 8, 1.0, SyntheticKind::Binary, 10).unwrap();
        assert_ne!(a.x(), c.x());
    }

    #[test]
    fn correlation_structure_survives_permutation() {
        // Sample correlations between covariates should be powers of 0.75.
        let (d, _) = generate_synthetic(20000, 6, 1.0, SyntheticKind::Gaussian, 5).unwrap();
        let x = d.x().columns(1, 6).into_owned();
        let n = x.nrows() as f64;
        let mut powers = Vec::new();
        for a in 0..6 {
            for b in (a + 1)..6 {
                let ca = x.column(a);
                let cb = x.column(b);
                let (ma, mb) = (ca.mean(), cb.mean());
                let cov = ca.iter().zip(cb.iter()).map(|(u, v)| (u - ma) * (v - mb)).sum::<f64>() / n;
                let r = cov / (ca.variance().sqrt() * cb.variance().sqrt());
                let lag = (r.ln() / CORRELATION.ln()).round() as i32;
                assert!((r - CORRELATION.powi(lag)).abs() < 0.03, "r = {r}");
                powers.push(lag);
            }
        }
        powers.sort_unstable();
        assert_eq!(powers, vec![1, 1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 4, 4, 5]);
    }

    #[test]
    fn parameter_guards() {
        assert!(generate_synthetic(9, 10, 1.0, SyntheticKind::Gaussian, 1).is_err());
        assert!(generate_synthetic(10, 5, 1.0, SyntheticKind::Gaussian, 1).is_err());
        assert!(generate_synthetic(10, 6, 0.0, SyntheticKind::Gaussian, 1).is_err());
    }
}
