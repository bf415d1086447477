//! Optimal linear actions for a given subset of covariates.
//!
//! Under weighted squared-error loss the optimal action is the weighted
//! least-squares fit of the posterior predictive means on the subset's
//! columns. Under weighted cross-entropy it is a logistic regression fit to
//! the posterior predictive probabilities, solved by IRLS. Removing the
//! posterior expectation gives one action per predictive draw, which is how
//! coefficient uncertainty is quantified.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{logistic, softplus, FunctionalSpec, PointPredictions, PredictionKind, PredictiveDraws};
use crate::error::{Error, Result};
use crate::linalg::{scale_rows, select_columns, weighted_rss, PivotedQr};

/// Probability clipping bound for logits and IRLS weights.
pub const PROB_CLIP: f64 = 1e-6;
/// Ridge jitter on the IRLS normal equations for the expected-loss action.
pub const IRLS_JITTER: f64 = 1e-8;
/// Ridge jitter for per-draw classification actions (binary targets can separate).
pub const DRAW_IRLS_JITTER: f64 = 1e-6;
pub const IRLS_TOL: f64 = 1e-10;
pub const IRLS_MAX_ITER: usize = 100;

/// Active covariate indices, strictly increasing, with an optional set of
/// members that every refinement must keep.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Subset {
    indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    forced: Vec<usize>,
}

impl Subset {
    pub fn new(mut indices: Vec<usize>, mut forced: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        forced.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::input("subset indices must be unique"));
        }
        if forced.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::input("forced indices must be unique"));
        }
        if let Some(f) = forced.iter().find(|f| indices.binary_search(f).is_err()) {
            return Err(Error::input(format!("forced index {f} is not in the subset")));
        }
        Ok(Subset { indices, forced })
    }

    pub fn of(indices: Vec<usize>) -> Result<Self> {
        Self::new(indices, Vec::new())
    }

    pub(crate) fn from_sorted(indices: Vec<usize>, forced: &[usize]) -> Self {
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        Subset {
            indices,
            forced: forced.to_vec(),
        }
    }

    pub fn full(p: usize) -> Self {
        Subset {
            indices: (0..p).collect(),
            forced: Vec::new(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn forced(&self) -> &[usize] {
        &self.forced
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.indices.binary_search(&j).is_ok()
    }

    pub fn map_indices(&self, map: &[usize]) -> Subset {
        let mut indices: Vec<usize> = self.indices.iter().map(|&j| map[j]).collect();
        let mut forced: Vec<usize> = self.forced.iter().map(|&j| map[j]).collect();
        indices.sort_unstable();
        forced.sort_unstable();
        Subset { indices, forced }
    }

    fn check_bounds(&self, p: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::input("empty subset"));
        }
        match self.indices.last() {
            Some(&j) if j >= p => Err(Error::dim(format!("subset index {j} out of range for {p} covariates"))),
            _ => Ok(()),
        }
    }
}

impl std::fmt::Display for Subset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{{")?;
        for (i, j) in self.indices.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{j}")?;
        }
        write!(f, "}}")
    }
}

/// How the local weights `ω(x̃_i)` are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightSpec {
    /// `ω = 1/ñ`.
    #[default]
    Uniform,
    /// `ω ∝ exp(-‖x̃ - x*‖² / ℓ)`.
    GaussianKernel { center: Vec<f64>, range: f64 },
    Explicit { values: Vec<f64> },
}

impl WeightSpec {
    pub fn realize(&self, xtilde: &DMatrix<f64>) -> Result<Weights> {
        let n = xtilde.nrows();
        let values = match self {
            WeightSpec::Uniform => DVector::from_element(n, 1.0 / n.max(1) as f64),
            WeightSpec::GaussianKernel { center, range } => {
                if center.len() != xtilde.ncols() {
                    return Err(Error::dim(format!(
                        "kernel center has {} entries, covariates have {}",
                        center.len(),
                        xtilde.ncols()
                    )));
                }
                if !(*range > 0.0) {
                    return Err(Error::input("kernel range must be positive"));
                }
                DVector::from_fn(n, |i, _| {
                    let d2: f64 = xtilde.row(i).iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                    (-d2 / range).exp()
                })
            }
            WeightSpec::Explicit { values } => {
                if values.len() != n {
                    return Err(Error::dim(format!("{} explicit weights for {n} rows", values.len())));
                }
                DVector::from_column_slice(values)
            }
        };
        Weights::new(values)
    }
}

/// Realized strictly positive weights, one per target row.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights(DVector<f64>);

impl Weights {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if values.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::input("weights must be finite and strictly positive"));
        }
        Ok(Weights(values))
    }

    pub fn uniform(n: usize) -> Self {
        Weights(DVector::from_element(n, 1.0 / n.max(1) as f64))
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn rows(&self, rows: &[usize]) -> Weights {
        Weights(DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.0[i])))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SquaredError,
    CrossEntropy,
}

/// A sparse linear action: coefficients on `subset`, zero elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearAction {
    pub subset: Subset,
    pub coefficients: Vec<f64>,
    pub loss_kind: LossKind,
    /// Weighted RSS on the pseudo-data, or the exact weighted cross-entropy.
    pub in_sample_criterion: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl LinearAction {
    /// Coefficients expanded to all `p` covariates.
    pub fn dense(&self, p: usize) -> DVector<f64> {
        let mut out = DVector::zeros(p);
        for (&j, &c) in self.subset.indices().iter().zip(&self.coefficients) {
            out[j] = c;
        }
        out
    }

    /// Linear predictor `x̃_i'δ` for every row.
    pub fn predict(&self, xtilde: &DMatrix<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(xtilde.nrows());
        for (&j, &c) in self.subset.indices().iter().zip(&self.coefficients) {
            out.axpy(c, &xtilde.column(j), 1.0);
        }
        out
    }
}

fn check_problem(xtilde: &DMatrix<f64>, targets: &DVector<f64>, w: &Weights, s: &Subset) -> Result<()> {
    s.check_bounds(xtilde.ncols())?;
    if targets.len() != xtilde.nrows() || w.len() != xtilde.nrows() {
        return Err(Error::dim(format!(
            "{} rows, {} targets, {} weights",
            xtilde.nrows(),
            targets.len(),
            w.len()
        )));
    }
    if xtilde.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("target covariates".into()));
    }
    if targets.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pseudo-data".into()));
    }
    Ok(())
}

/// Weighted least-squares action on arbitrary pseudo-data (shared by the
/// expected-loss action and the out-of-sample evaluation).
pub(crate) fn wls_action(xtilde: &DMatrix<f64>, y: &DVector<f64>, w: &Weights, s: &Subset) -> LinearAction {
    let xs = select_columns(xtilde, s.indices());
    let sw = w.values().map(f64::sqrt);
    let qr = PivotedQr::new(&scale_rows(&xs, &sw));
    let beta = qr.solve(&y.component_mul(&sw));
    let rss = weighted_rss(&xs, y, w.values(), &beta);
    LinearAction {
        subset: s.clone(),
        coefficients: beta.iter().copied().collect(),
        loss_kind: LossKind::SquaredError,
        in_sample_criterion: rss,
        converged: true,
        iterations: 0,
    }
}

pub fn optimal_linear_action(
    xtilde: &DMatrix<f64>,
    yhat: &PointPredictions,
    w: &Weights,
    s: &Subset,
) -> Result<LinearAction> {
    if yhat.kind != PredictionKind::Continuous {
        return Err(Error::input("squared-error action needs continuous point predictions"));
    }
    check_problem(xtilde, &yhat.values, w, s)?;
    Ok(wls_action(xtilde, &yhat.values, w, s))
}

/// Subset-invariant logistic pseudo-data: `ẑ = logit(ĥ)`, `ŵ = ω ĥ(1-ĥ)`,
/// with `ĥ` clipped to `[κ, 1-κ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticPseudoData {
    pub zhat: DVector<f64>,
    pub what: DVector<f64>,
    pub clip: f64,
}

pub fn logistic_pseudo_data(hhat: &PointPredictions, w: &Weights) -> Result<LogisticPseudoData> {
    if hhat.kind != PredictionKind::Probability {
        return Err(Error::input("logistic pseudo-data needs probability point predictions"));
    }
    if hhat.len() != w.len() {
        return Err(Error::dim(format!("{} probabilities, {} weights", hhat.len(), w.len())));
    }
    let h = hhat.values.map(clip_prob);
    let zhat = h.map(|v| (v / (1.0 - v)).ln());
    let what = DVector::from_fn(h.len(), |i, _| w.values()[i] * h[i] * (1.0 - h[i]));
    Ok(LogisticPseudoData {
        zhat,
        what,
        clip: PROB_CLIP,
    })
}

pub fn clip_prob(p: f64) -> f64 {
    p.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
}

/// Exact weighted cross-entropy `Σ ω_i [softplus(η_i) − h_i η_i]`, i.e. the
/// negative Bernoulli log-likelihood of targets `h` at linear predictor `η`.
pub fn weighted_cross_entropy(eta: &DVector<f64>, targets: &DVector<f64>, w: &DVector<f64>) -> f64 {
    eta.iter()
        .zip(targets.iter())
        .zip(w.iter())
        .map(|((&e, &h), &wi)| wi * (softplus(e) - h * e))
        .sum()
}

#[derive(Debug, Clone)]
pub(crate) struct IrlsFit {
    pub coef: DVector<f64>,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Ridge-stabilized IRLS for a logistic fit to probability targets.
///
/// Minimizes `CE(β) + jitter/2 ‖β‖²` by Newton steps on the weighted normal
/// equations with step halving; the reported objective is the unpenalized
/// cross-entropy.
pub(crate) fn irls_logistic(x: &DMatrix<f64>, targets: &DVector<f64>, w: &DVector<f64>, jitter: f64) -> IrlsFit {
    let k = x.ncols();
    let penalized = |beta: &DVector<f64>| -> (f64, DVector<f64>) {
        let eta = x * beta;
        let ce = weighted_cross_entropy(&eta, targets, w);
        (ce + 0.5 * jitter * beta.norm_squared(), eta)
    };

    // Start from the weighted least-squares fit to the clipped logits.
    let mut beta = {
        let h = targets.map(clip_prob);
        let z = h.map(|v| (v / (1.0 - v)).ln());
        let ww = DVector::from_fn(h.len(), |i, _| w[i] * h[i] * (1.0 - h[i]));
        let xtw = scale_rows(x, &ww).transpose();
        let mut a = &xtw * x;
        for j in 0..k {
            a[(j, j)] += jitter;
        }
        a.cholesky()
            .map(|c| c.solve(&(&xtw * z)))
            .unwrap_or_else(|| DVector::zeros(k))
    };
    let (mut f, mut eta) = penalized(&beta);
    let zero = DVector::zeros(k);
    let (f0, eta0) = penalized(&zero);
    if !(f <= f0) {
        beta = zero;
        f = f0;
        eta = eta0;
    }

    let floor = PROB_CLIP * (1.0 - PROB_CLIP);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < IRLS_MAX_ITER {
        iterations += 1;
        let pi = eta.map(logistic);
        let hw = DVector::from_fn(pi.len(), |i, _| w[i] * (pi[i] * (1.0 - pi[i])).max(floor));
        let resid = DVector::from_fn(pi.len(), |i, _| w[i] * (pi[i] - targets[i]));
        let grad = x.transpose() * resid + &beta * jitter;
        let mut hess = scale_rows(x, &hw).transpose() * x;
        for j in 0..k {
            hess[(j, j)] += jitter;
        }
        let step = match hess.clone().cholesky() {
            Some(c) => c.solve(&grad),
            None => match hess.lu().solve(&grad) {
                Some(s) => s,
                None => break,
            },
        };
        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-12 {
            let cand = &beta - &step * t;
            let (fc, ec) = penalized(&cand);
            if fc <= f {
                accepted = Some((cand, fc, ec));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, fc, ec)) = accepted else {
            // No descent possible at machine precision: already optimal.
            converged = true;
            break;
        };
        let rel = (f - fc).abs() / f.abs().max(f64::MIN_POSITIVE);
        beta = cand;
        f = fc;
        eta = ec;
        if rel < IRLS_TOL {
            converged = true;
            break;
        }
    }
    IrlsFit {
        objective: weighted_cross_entropy(&eta, targets, w),
        coef: beta,
        converged,
        iterations,
    }
}

/// Logistic action fit to probability targets on a subset's columns.
pub(crate) fn logistic_action(
    xtilde: &DMatrix<f64>,
    h: &DVector<f64>,
    w: &Weights,
    s: &Subset,
    jitter: f64,
) -> LinearAction {
    let xs = select_columns(xtilde, s.indices());
    let targets = h.map(clip_prob);
    let fit = irls_logistic(&xs, &targets, w.values(), jitter);
    LinearAction {
        subset: s.clone(),
        coefficients: fit.coef.iter().copied().collect(),
        loss_kind: LossKind::CrossEntropy,
        in_sample_criterion: fit.objective,
        converged: fit.converged,
        iterations: fit.iterations,
    }
}

/// Cross-entropy optimal action. Non-convergence is reported through
/// `converged = false` with the best iterate, not as an error.
pub fn optimal_logistic_action(
    xtilde: &DMatrix<f64>,
    hhat: &PointPredictions,
    w: &Weights,
    s: &Subset,
) -> Result<LinearAction> {
    if hhat.kind != PredictionKind::Probability {
        return Err(Error::input("cross-entropy action needs probability point predictions"));
    }
    check_problem(xtilde, &hhat.values, w, s)?;
    Ok(logistic_action(xtilde, &hhat.values, w, s, IRLS_JITTER))
}

/// Per-draw coefficients `δ̃_S`, one row per predictive draw.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDraws {
    pub subset: Subset,
    /// Total covariate count (excluded coefficients are identically zero).
    pub p: usize,
    pub coefficients: DMatrix<f64>,
    /// Draws whose solve failed; excluded from every summary.
    pub failed: Vec<usize>,
}

impl ActionDraws {
    fn successful_rows(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.coefficients.nrows()).filter(move |s| self.failed.binary_search(s).is_err())
    }

    pub fn successful(&self) -> usize {
        self.coefficients.nrows() - self.failed.len()
    }

    /// Mean over successful draws, expanded to all `p` covariates.
    pub fn mean(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.p);
        let m = self.successful() as f64;
        for s in self.successful_rows() {
            for (c, &j) in self.subset.indices().iter().enumerate() {
                out[j] += self.coefficients[(s, c)] / m;
            }
        }
        out
    }
}

pub fn predictive_action_draws(
    xtilde: &DMatrix<f64>,
    pred: &PredictiveDraws,
    w: &Weights,
    s: &Subset,
    loss: LossKind,
    h: &FunctionalSpec,
) -> Result<ActionDraws> {
    h.validate()?;
    let dummy = DVector::zeros(xtilde.nrows());
    check_problem(xtilde, &dummy, w, s)?;
    if pred.n_targets() != xtilde.nrows() {
        return Err(Error::dim(format!(
            "{} predictive targets for {} covariate rows",
            pred.n_targets(),
            xtilde.nrows()
        )));
    }
    let k = s.len();
    let xs = select_columns(xtilde, s.indices());
    let y = pred.ytilde();
    let rows: Vec<Option<Vec<f64>>> = match loss {
        LossKind::SquaredError => {
            let sw = w.values().map(f64::sqrt);
            let qr = PivotedQr::new(&scale_rows(&xs, &sw));
            (0..pred.count())
                .into_par_iter()
                .map(|d| {
                    let b = DVector::from_fn(y.ncols(), |i, _| h.apply(y[(d, i)]) * sw[i]);
                    let beta = qr.solve(&b);
                    beta.iter().all(|v| v.is_finite()).then(|| beta.iter().copied().collect())
                })
                .collect()
        }
        LossKind::CrossEntropy => (0..pred.count())
            .into_par_iter()
            .map(|d| {
                let targets = DVector::from_fn(y.ncols(), |i, _| clip_prob(h.apply(y[(d, i)])));
                let fit = irls_logistic(&xs, &targets, w.values(), DRAW_IRLS_JITTER);
                (fit.converged && fit.coef.iter().all(|v| v.is_finite())).then(|| fit.coef.iter().copied().collect())
            })
            .collect(),
    };
    let mut coefficients = DMatrix::from_element(pred.count(), k, f64::NAN);
    let mut failed = Vec::new();
    for (d, row) in rows.into_iter().enumerate() {
        match row {
            Some(r) => {
                for (c, v) in r.into_iter().enumerate() {
                    coefficients[(d, c)] = v;
                }
            }
            None => failed.push(d),
        }
    }
    Ok(ActionDraws {
        subset: s.clone(),
        p: xtilde.ncols(),
        coefficients,
        failed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

/// Rank (1-based) of the lower order statistic of an equal-tailed interval
/// over `m` sorted values: `max(1, ⌊m(1-level)/2⌋)`; the upper bound is the
/// order statistic of rank `m + 1 - r`. For `m = 1000`, `level = 0.9` that is
/// the 50th and 951st values.
pub fn interval_rank(m: usize, level: f64) -> usize {
    let tail = m as f64 * (1.0 - level) / 2.0;
    ((tail + 1e-9).floor() as usize).max(1)
}

/// Equal-tailed empirical intervals for all `p` coefficients; coefficients
/// outside the subset get exactly `[0, 0]`.
pub fn interval_estimate(draws: &ActionDraws, level: f64) -> Result<Vec<Interval>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::input(format!("interval level must lie in (0, 1), got {level}")));
    }
    let m = draws.successful();
    if m < 10 {
        return Err(Error::input(format!("need at least 10 successful draws, got {m}")));
    }
    let r = interval_rank(m, level);
    let mut out = vec![
        Interval {
            lower: 0.0,
            upper: 0.0
        };
        draws.p
    ];
    for (c, &j) in draws.subset.indices().iter().enumerate() {
        let mut col: Vec<f64> = draws.successful_rows().map(|s| draws.coefficients[(s, c)]).collect();
        col.sort_by(f64::total_cmp);
        out[j] = Interval {
            lower: col[r - 1],
            upper: col[m - r],
        };
    }
    Ok(out)
}
