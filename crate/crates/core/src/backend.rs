//! Posterior and posterior-predictive draws: the only interface between a
//! Bayesian model and the decision engine.
//!
//! The built-in model is a conjugate normal / inverse-gamma linear
//! regression with a ridge-type prior. Draws from any other model enter
//! through [`crate::io`].

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::symmetric_condition;
use crate::rng;

/// Prior variance multiplier that leaves the intercept effectively unpenalized.
pub const INTERCEPT_PRIOR_FACTOR: f64 = 1e6;

/// Largest condition number of the posterior precision we accept.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseKind {
    Continuous,
    Binary,
}

/// Per-column affine map `x_std = (x - center) / scale`.
///
/// Continuous columns are scaled to standard deviation 0.5; 0/1 indicator
/// columns are only centered; constant columns are left alone. Centering
/// happens only when the design carries an intercept column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    pub fn fit(x: &DMatrix<f64>, center: bool) -> Self {
        let n = x.nrows();
        let mut centers = Vec::with_capacity(x.ncols());
        let mut scales = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let first = col[0];
            if col.iter().all(|&v| v == first) {
                centers.push(0.0);
                scales.push(1.0);
                continue;
            }
            let mean = col.sum() / n as f64;
            let indicator = col.iter().all(|&v| v == 0.0 || v == 1.0);
            centers.push(if center { mean } else { 0.0 });
            if indicator {
                scales.push(1.0);
            } else {
                let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
                scales.push(2.0 * var.sqrt());
            }
        }
        Standardization {
            center: centers,
            scale: scales,
        }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.center[j]) / self.scale[j])
    }
}

/// Observed data: an `n × p` design (column 0 is usually an all-ones
/// intercept) and a response vector.
#[derive(Debug, Clone)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
    column_names: Vec<String>,
    response_kind: ResponseKind,
    standardization: Option<Standardization>,
}

impl Dataset {
    pub fn new(
        x: DMatrix<f64>,
        y: DVector<f64>,
        column_names: Vec<String>,
        response_kind: ResponseKind,
    ) -> Result<Self> {
        let (n, p) = x.shape();
        if n == 0 || p == 0 {
            return Err(Error::input(format!("dataset must have n >= 1 and p >= 1, got {n}x{p}")));
        }
        if y.len() != n {
            return Err(Error::dim(format!("response has {} entries, design has {n} rows", y.len())));
        }
        if column_names.len() != p {
            return Err(Error::dim(format!("{} column names for {p} columns", column_names.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("design matrix".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("response".into()));
        }
        if response_kind == ResponseKind::Binary && y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::input("binary response must be coded 0/1"));
        }
        Ok(Dataset {
            x,
            y,
            column_names,
            response_kind,
            standardization: None,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn response_kind(&self) -> ResponseKind {
        self.response_kind
    }

    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    pub fn is_standardized(&self) -> bool {
        self.standardization.is_some()
    }

    pub fn intercept_column(&self) -> Option<usize> {
        intercept_column(&self.x)
    }

    /// Copy with standardized covariates (and a centered continuous
    /// response when an intercept is present).
    pub fn standardized(&self) -> Dataset {
        let icpt = self.intercept_column().is_some();
        let st = Standardization::fit(&self.x, icpt);
        let x = st.apply(&self.x);
        let y = if icpt && self.response_kind == ResponseKind::Continuous {
            let mean = self.y.mean();
            self.y.map(|v| v - mean)
        } else {
            self.y.clone()
        };
        Dataset {
            x,
            y,
            column_names: self.column_names.clone(),
            response_kind: self.response_kind,
            standardization: Some(st),
        }
    }
}

/// First column whose entries are all exactly one.
pub fn intercept_column(x: &DMatrix<f64>) -> Option<usize> {
    (0..x.ncols()).find(|&j| x.column(j).iter().all(|&v| v == 1.0))
}

/// Prior configuration of the conjugate model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Prior variance factor `g` on the non-intercept coefficients.
    pub prior_scale: f64,
    pub ig_shape: f64,
    pub ig_rate: f64,
    pub intercept_unpenalized: bool,
    /// Fit on standardized covariates and map the posterior back.
    pub standardize: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            prior_scale: 1.0,
            ig_shape: 0.01,
            ig_rate: 0.01,
            intercept_unpenalized: true,
            standardize: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("prior_scale", self.prior_scale),
            ("ig_shape", self.ig_shape),
            ("ig_rate", self.ig_rate),
        ] {
            if !(v > 0.0) || v.is_nan() {
                return Err(Error::input(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Closed-form normal / inverse-gamma posterior on the original covariate
/// scale: `σ² ~ IG(shape, rate)`, `β | σ² ~ N(mean, σ² F F')`.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub mean: DVector<f64>,
    pub cov_factor: DMatrix<f64>,
    pub shape: f64,
    pub rate: f64,
}

impl FittedModel {
    pub fn p(&self) -> usize {
        self.mean.len()
    }

    /// Posterior covariance of β with σ² integrated out (requires shape > 1).
    pub fn beta_covariance(&self) -> Option<DMatrix<f64>> {
        (self.shape > 1.0).then(|| &self.cov_factor * self.cov_factor.transpose() * (self.rate / (self.shape - 1.0)))
    }
}

pub fn fit_conjugate_gaussian(data: &Dataset, cfg: &ModelConfig) -> Result<FittedModel> {
    cfg.validate()?;
    if data.response_kind() != ResponseKind::Continuous {
        return Err(Error::input("conjugate Gaussian backend requires a continuous response"));
    }
    let (n, p) = data.x().shape();
    for (j, col) in data.x().column_iter().enumerate() {
        if col.iter().all(|&v| v == 0.0) {
            return Err(Error::input(format!("column {j} ({}) is all zero", data.column_names()[j])));
        }
    }

    let icol = data.intercept_column();
    let (xs, ys, transform) = if cfg.standardize {
        let st = Standardization::fit(data.x(), icol.is_some());
        let ybar = if icol.is_some() { data.y().mean() } else { 0.0 };
        (st.apply(data.x()), data.y().map(|v| v - ybar), Some((st, ybar)))
    } else {
        (data.x().clone(), data.y().clone(), None)
    };

    let prior_precision = DVector::from_fn(p, |j, _| {
        let factor = if cfg.intercept_unpenalized && Some(j) == icol {
            INTERCEPT_PRIOR_FACTOR
        } else {
            1.0
        };
        1.0 / (cfg.prior_scale * factor)
    });
    let mut precision = xs.transpose() * &xs;
    for j in 0..p {
        precision[(j, j)] += prior_precision[j];
    }
    let cond = symmetric_condition(&precision);
    if !(cond <= MAX_CONDITION) {
        return Err(Error::Singular(format!("posterior precision condition number {cond:.3e}")));
    }
    let chol = precision
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("posterior precision is not positive definite".into()))?;
    let mean_s = chol.solve(&(xs.transpose() * &ys));
    let resid = &ys - &xs * &mean_s;
    let penalty: f64 = mean_s.iter().zip(prior_precision.iter()).map(|(m, q)| q * m * m).sum();
    let shape = cfg.ig_shape + n as f64 / 2.0;
    let rate = cfg.ig_rate + 0.5 * (resid.norm_squared() + penalty);
    // F F' = Λ⁻¹ with F = L^{-T}.
    let factor_s = chol
        .l()
        .transpose()
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| Error::Singular("triangular solve failed".into()))?;

    let (mean, cov_factor) = match transform {
        None => (mean_s, factor_s),
        Some((st, ybar)) => {
            let mut a = DMatrix::zeros(p, p);
            let mut shift = DVector::zeros(p);
            for j in 0..p {
                a[(j, j)] = 1.0 / st.scale[j];
            }
            if let Some(i0) = icol {
                for j in 0..p {
                    if j != i0 {
                        a[(i0, j)] = -st.center[j] / st.scale[j];
                    }
                }
                shift[i0] = ybar;
            }
            (&a * mean_s + shift, &a * factor_s)
        }
    };
    Ok(FittedModel {
        mean,
        cov_factor,
        shape,
        rate,
    })
}

/// Observation model attached to posterior draws; needed to reweight draws
/// by held-out likelihood and to simulate predictive responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodSpec {
    /// `y ~ N(x'β, σ²)`; requires the per-draw sigma column.
    Gaussian,
    /// `y ~ Bernoulli(logistic(x'β))`.
    BernoulliLogit,
}

impl LikelihoodSpec {
    pub fn log_density(self, y: f64, eta: f64, sigma: f64) -> f64 {
        match self {
            LikelihoodSpec::Gaussian => {
                let r = (y - eta) / sigma;
                -0.5 * r * r - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
            }
            LikelihoodSpec::BernoulliLogit => y * eta - softplus(eta),
        }
    }

    pub fn sample(self, eta: f64, sigma: f64, rng: &mut rng::Rng) -> f64 {
        match self {
            LikelihoodSpec::Gaussian => {
                let e: f64 = StandardNormal.sample(rng);
                eta + sigma * e
            }
            LikelihoodSpec::BernoulliLogit => {
                let u: f64 = rng.random();
                if u < logistic(eta) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Coefficient draws `θ^s` (one row per draw), optional error-scale draws,
/// and the likelihood they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    beta: DMatrix<f64>,
    sigma: Option<DVector<f64>>,
    seed: Option<u64>,
    likelihood: Option<LikelihoodSpec>,
}

impl PosteriorDraws {
    pub fn new(
        beta: DMatrix<f64>,
        sigma: Option<DVector<f64>>,
        likelihood: Option<LikelihoodSpec>,
    ) -> Result<Self> {
        let s = beta.nrows();
        if s < 2 {
            return Err(Error::input(format!("need at least 2 posterior draws, got {s}")));
        }
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("coefficient draws".into()));
        }
        if let Some(sig) = &sigma {
            if sig.len() != s {
                return Err(Error::dim(format!("{} sigma draws for {s} coefficient draws", sig.len())));
            }
            if sig.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::input("sigma draws must be finite and non-negative"));
            }
        }
        if likelihood == Some(LikelihoodSpec::Gaussian) && sigma.is_none() {
            return Err(Error::input("Gaussian likelihood requires sigma draws"));
        }
        Ok(PosteriorDraws {
            beta,
            sigma,
            seed: None,
            likelihood,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn beta(&self) -> &DMatrix<f64> {
        &self.beta
    }

    pub fn sigma(&self) -> Option<&DVector<f64>> {
        self.sigma.as_ref()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn count(&self) -> usize {
        self.beta.nrows()
    }

    pub fn p(&self) -> usize {
        self.beta.ncols()
    }

    pub fn likelihood(&self) -> Option<LikelihoodSpec> {
        self.likelihood
    }

    /// Likelihood used for simulation: the declared one, else Gaussian when
    /// sigma draws are present.
    pub fn effective_likelihood(&self) -> Result<LikelihoodSpec> {
        match (self.likelihood, &self.sigma) {
            (Some(l), _) => Ok(l),
            (None, Some(_)) => Ok(LikelihoodSpec::Gaussian),
            (None, None) => Err(Error::input("posterior draws carry no likelihood specification")),
        }
    }

    pub fn sigma_at(&self, s: usize) -> f64 {
        self.sigma.as_ref().map_or(1.0, |v| v[s])
    }

    pub fn posterior_mean(&self) -> DVector<f64> {
        self.beta.row_mean().transpose()
    }
}

pub fn sample_posterior(model: &FittedModel, count: usize, seed: u64) -> Result<PosteriorDraws> {
    if count < 2 {
        return Err(Error::input(format!("need at least 2 posterior draws, got {count}")));
    }
    let p = model.p();
    let gamma = Gamma::new(model.shape, 1.0 / model.rate)
        .map_err(|e| Error::input(format!("invalid inverse-gamma posterior: {e}")))?;
    let mut rng = rng::seeded(seed);
    let mut beta = DMatrix::zeros(count, p);
    let mut sigma = DVector::zeros(count);
    let mut z = DVector::zeros(p);
    for s in 0..count {
        let precision: f64 = gamma.sample(&mut rng);
        let sd = (1.0 / precision).sqrt();
        for zj in z.iter_mut() {
            *zj = StandardNormal.sample(&mut rng);
        }
        let draw = &model.mean + (&model.cov_factor * &z) * sd;
        beta.row_mut(s).copy_from(&draw.transpose());
        sigma[s] = sd;
    }
    Ok(PosteriorDraws::new(beta, Some(sigma), Some(LikelihoodSpec::Gaussian))?.with_seed(seed))
}

/// Draws of the predictive variable at `ñ` target covariate rows; entry
/// `(s, i)` is the draw of `ỹ(x̃_i)` under `θ^s`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDraws {
    ytilde: DMatrix<f64>,
    covariates_ref: String,
}

impl PredictiveDraws {
    pub fn new(ytilde: DMatrix<f64>, covariates_ref: impl Into<String>) -> Result<Self> {
        if ytilde.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("predictive draws".into()));
        }
        Ok(PredictiveDraws {
            ytilde,
            covariates_ref: covariates_ref.into(),
        })
    }

    pub fn ytilde(&self) -> &DMatrix<f64> {
        &self.ytilde
    }

    pub fn count(&self) -> usize {
        self.ytilde.nrows()
    }

    pub fn n_targets(&self) -> usize {
        self.ytilde.ncols()
    }

    pub fn covariates_ref(&self) -> &str {
        &self.covariates_ref
    }
}

pub fn sample_predictive(draws: &PosteriorDraws, xtilde: &DMatrix<f64>, seed: u64) -> Result<PredictiveDraws> {
    if xtilde.ncols() != draws.p() {
        return Err(Error::dim(format!(
            "target covariates have {} columns, draws have {}",
            xtilde.ncols(),
            draws.p()
        )));
    }
    let lik = draws.effective_likelihood()?;
    let mut eta = draws.beta() * xtilde.transpose();
    let mut rng = rng::seeded(seed);
    for s in 0..eta.nrows() {
        let sigma = draws.sigma_at(s);
        for i in 0..eta.ncols() {
            eta[(s, i)] = lik.sample(eta[(s, i)], sigma, &mut rng);
        }
    }
    PredictiveDraws::new(eta, "xtilde")
}

/// Target functional `h` applied to predictive draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FunctionalSpec {
    #[default]
    Identity,
    /// `h(ỹ) = 1{ỹ ≥ τ}`.
    Threshold { tau: f64 },
}

impl FunctionalSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            FunctionalSpec::Threshold { tau } if !tau.is_finite() => {
                Err(Error::input("threshold functional requires a finite tau"))
            }
            _ => Ok(()),
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        match *self {
            FunctionalSpec::Identity => v,
            FunctionalSpec::Threshold { tau } => {
                if v >= tau {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn is_binary(&self) -> bool {
        matches!(self, FunctionalSpec::Threshold { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionKind {
    Continuous,
    Probability,
}

/// Posterior predictive expectations `ŷ_i` (or `ĥ_i` for binary functionals).
#[derive(Debug, Clone, PartialEq)]
pub struct PointPredictions {
    pub values: DVector<f64>,
    pub kind: PredictionKind,
}

impl PointPredictions {
    pub fn continuous(values: DVector<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point predictions".into()));
        }
        Ok(PointPredictions {
            values,
            kind: PredictionKind::Continuous,
        })
    }

    pub fn probability(values: DVector<f64>) -> Result<Self> {
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::input("probabilities must lie in [0, 1]"));
        }
        Ok(PointPredictions {
            values,
            kind: PredictionKind::Probability,
        })
    }

    /// Reinterpret continuous means of 0/1 draws as probabilities.
    pub fn into_probability(self) -> Result<Self> {
        Self::probability(self.values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn point_predictions(pred: &PredictiveDraws, h: &FunctionalSpec) -> Result<PointPredictions> {
    h.validate()?;
    let y = pred.ytilde();
    let s = y.nrows() as f64;
    let values = DVector::from_fn(y.ncols(), |i, _| y.column(i).iter().map(|&v| h.apply(v)).sum::<f64>() / s);
    match h {
        FunctionalSpec::Identity => PointPredictions::continuous(values),
        FunctionalSpec::Threshold { .. } => PointPredictions::probability(values),
    }
}
