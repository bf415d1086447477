//! Shared helpers for integration tests: independent oracles and a Laplace
//! approximation to a logistic posterior (the library itself only ships the
//! conjugate Gaussian backend).
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use bss_core::backend::{
    fit_conjugate_gaussian, logistic, sample_posterior, Dataset, FunctionalSpec, LikelihoodSpec, ModelConfig,
    PosteriorDraws, ResponseKind,
};
use bss_core::evaluate::{fold_data, EvaluationConfig};
use bss_core::io::export_draws;
use bss_core::{make_folds, LossKind, WeightSpec, Weights};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(r: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| r.sample(StandardNormal))
}

pub fn with_intercept(x: DMatrix<f64>) -> DMatrix<f64> {
    let (n, p) = x.shape();
    DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] })
}

pub fn columns(x: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), cols.len(), |i, c| x[(i, cols[c])])
}

/// Weighted least squares through the normal equations and an LU solve.
pub fn dense_wls(x: &DMatrix<f64>, y: &DVector<f64>, w: &[f64], cols: &[usize]) -> DVector<f64> {
    let xs = columns(x, cols);
    let mut xtw = xs.transpose();
    for i in 0..xs.nrows() {
        xtw.column_mut(i).scale_mut(w[i]);
    }
    (&xtw * &xs).lu().solve(&(&xtw * y)).expect("nonsingular normal equations")
}

/// `Σ w_i [softplus(η_i) - h_i η_i]`, the cross-entropy up to a constant
/// free of the coefficients, written directly.
pub fn ce_objective(x: &DMatrix<f64>, h: &DVector<f64>, w: &[f64], b: &DVector<f64>) -> f64 {
    let eta = x * b;
    (0..x.nrows())
        .map(|i| {
            let e = eta[i];
            let sp = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            w[i] * (sp - h[i] * e)
        })
        .sum()
}

/// Exact weighted cross-entropy `-Σ w_i [h log π + (1-h) log(1-π)]`.
pub fn weighted_ce(x: &DMatrix<f64>, h: &DVector<f64>, w: &[f64], b: &DVector<f64>) -> f64 {
    let eta = x * b;
    (0..x.nrows())
        .map(|i| {
            let p = logistic(eta[i]);
            -w[i] * (h[i] * p.ln() + (1.0 - h[i]) * (1.0 - p).ln())
        })
        .sum()
}

/// Gradient descent with a fixed step `1/L`, `L` the Lipschitz bound of the
/// logistic gradient, plus Nesterov momentum. Purely first order.
pub fn gd_logistic(x: &DMatrix<f64>, h: &DVector<f64>, w: &[f64], iters: usize) -> DVector<f64> {
    let k = x.ncols();
    let mut xtw = x.transpose();
    for i in 0..x.nrows() {
        xtw.column_mut(i).scale_mut(w[i]);
    }
    let lip = 0.25 * (&xtw * x).symmetric_eigenvalues().max();
    let step = 1.0 / lip;
    let grad = |b: &DVector<f64>| {
        let r = (x * b).map(logistic) - h;
        &xtw * r
    };
    let mut b = DVector::zeros(k);
    let mut prev = b.clone();
    for t in 0..iters {
        let mom = (t as f64) / (t as f64 + 3.0);
        let v = &b + (&b - &prev) * mom;
        prev = b;
        b = &v - grad(&v) * step;
    }
    b
}

/// Laplace approximation to a logistic-regression posterior with
/// independent `N(0, prior_var)` priors: Newton to the mode, then Gaussian
/// draws with the inverse Hessian as covariance.
pub fn laplace_logistic_draws(data: &Dataset, count: usize, prior_var: f64, seed: u64) -> PosteriorDraws {
    let x = data.x();
    let y = data.y();
    let (n, p) = x.shape();
    let mut b = DVector::zeros(p);
    let mut hess = DMatrix::zeros(p, p);
    for _ in 0..100 {
        let pi = (x * &b).map(logistic);
        let g = x.transpose() * (&pi - y) + &b / prior_var;
        let mut xw = x.clone();
        for i in 0..n {
            xw.row_mut(i).scale_mut(pi[i] * (1.0 - pi[i]));
        }
        hess = x.transpose() * xw + DMatrix::identity(p, p) / prior_var;
        let step = hess.clone().cholesky().expect("positive definite Hessian").solve(&g);
        b -= &step;
        if step.amax() < 1e-12 {
            break;
        }
    }
    let chol = hess.cholesky().expect("positive definite Hessian");
    let upper = chol.l().transpose();
    let mut r = rng(seed);
    let beta = DMatrix::from_fn(count, p, |_, _| 0.0);
    let mut beta = beta;
    for s in 0..count {
        let z = DVector::from_fn(p, |_, _| r.sample::<f64, _>(StandardNormal));
        let d = upper.solve_upper_triangular(&z).expect("triangular solve");
        for j in 0..p {
            beta[(s, j)] = b[j] + d[j];
        }
    }
    PosteriorDraws::new(beta, None, Some(LikelihoodSpec::BernoulliLogit)).expect("valid draws")
}

/// Export draws next to a config and return the manifest path.
pub fn write_manifest(draws: &PosteriorDraws, dir: &Path) -> PathBuf {
    export_draws(draws, dir, "draws").expect("export draws")
}

fn rows(data: &Dataset, idx: &[usize]) -> Dataset {
    let x = DMatrix::from_fn(idx.len(), data.p(), |i, j| data.x()[(idx[i], j)]);
    let y = DVector::from_fn(idx.len(), |i, _| data.y()[idx[i]]);
    Dataset::new(x, y, data.column_names().to_vec(), ResponseKind::Continuous).unwrap()
}

pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(u, v)| (u - ma) * (v - mb)).sum();
    let va: f64 = a.iter().map(|u| (u - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|v| (v - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// SIR training-fold predictions against an exact conjugate refit on the
/// training rows. Returns per-fold (correlation, RMSE / sd(y)).
pub fn sir_vs_refit(n: usize, p: usize, draws: usize, k: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut r = rng(seed);
    let x = with_intercept(normal_matrix(&mut r, n, p - 1));
    let beta = DVector::from_fn(p, |_, _| r.random_range(-1.0..1.0));
    let y = &x * &beta + DVector::from_fn(n, |_, _| r.sample::<f64, _>(rand_distr::StandardNormal));
    let mut names = vec!["intercept".to_string()];
    names.extend((1..p).map(|j| format!("x{j}")));
    let data = Dataset::new(x, y, names, ResponseKind::Continuous).unwrap();
    let prior = ModelConfig {
        standardize: false,
        ..ModelConfig::default()
    };
    let post = sample_posterior(&fit_conjugate_gaussian(&data, &prior).unwrap(), draws, seed + 1).unwrap();
    let folds = make_folds(n, k, seed + 2).unwrap();
    let cfg = EvaluationConfig {
        loss_kind: LossKind::SquaredError,
        functional: FunctionalSpec::Identity,
        weights: WeightSpec::Uniform,
        s_tilde: draws / 2,
        seed: seed + 3,
    };
    let sd = data.y().variance().sqrt();
    (0..k)
        .map(|f| {
            let (fd, _) = fold_data(&data, &post, &folds, f, &cfg, &Weights::uniform(n)).unwrap();
            let train = folds.training_rows(f);
            let refit = fit_conjugate_gaussian(&rows(&data, &train), &prior).unwrap();
            let exact = &fd.x_train * &refit.mean;
            let sir: Vec<f64> = fd.target_train.iter().copied().collect();
            let ex: Vec<f64> = exact.iter().copied().collect();
            let rmse = (sir.iter().zip(&ex).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / ex.len() as f64).sqrt();
            (correlation(&sir, &ex), rmse / sd)
        })
        .collect()
}

