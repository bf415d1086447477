//! Out-of-sample evaluation of candidate subsets and the acceptable family.
//!
//! Training-fold posteriors are approximated by sampling-importance-
//! resampling of the full-data draws, weighted by the held-out likelihood,
//! so the model is never refit per fold.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action::{clip_prob, logistic_action, wls_action, LossKind, Subset, WeightSpec, Weights, IRLS_JITTER};
use crate::backend::{logistic, Dataset, FunctionalSpec, PosteriorDraws, PredictiveDraws};
use crate::error::{Error, Result};
use crate::linalg::{select_columns, select_rows};
use crate::rng::{self, derive_seed};

pub const DEFAULT_FOLDS: usize = 10;
pub const DEFAULT_ETA: f64 = 0.0;
pub const DEFAULT_EPSILON: f64 = 0.1;
/// Effective sample sizes below this trigger a warning.
pub const MIN_ESS: f64 = 10.0;
/// Loss-draw denominators at or below this magnitude are excluded.
pub const DENOM_FLOOR: f64 = 1e-12;
/// Percent differences within this of zero count as ties with the reference.
pub const TIE_TOL: f64 = 1e-12;

pub const BOUNDARY_RULE: &str =
    "strict D < eta, with exact ties (|D| <= 1e-12, including self-comparison) counted as satisfying the event";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub k: usize,
    pub assignment: Vec<usize>,
    pub seed: u64,
}

impl FoldSpec {
    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn validation_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignment[i] == fold).collect()
    }

    pub fn training_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignment[i] != fold).collect()
    }
}

/// Random balanced partition: position `t` of a seeded permutation goes to
/// fold `t mod K`.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldSpec> {
    if k < 2 || k > n {
        return Err(Error::input(format!("fold count must satisfy 2 <= K <= n = {n}, got {k}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::seeded(seed));
    let mut assignment = vec![0; n];
    for (t, &i) in perm.iter().enumerate() {
        assignment[i] = t % k;
    }
    Ok(FoldSpec { k, assignment, seed })
}

/// Weighted sampling of `m` distinct indices with probabilities
/// proportional to `exp(log_w)`, by an exponential race: draw `E_s ~ Exp(1)`
/// and keep the `m` smallest `log E_s - log w_s`.
pub fn sample_without_replacement(log_w: &[f64], m: usize, rng: &mut rng::Rng) -> Vec<usize> {
    let mut keys: Vec<(f64, usize)> = log_w
        .iter()
        .enumerate()
        .map(|(s, &lw)| {
            let u: f64 = rng.random();
            let e = -(1.0 - u).ln();
            let key = if lw == f64::NEG_INFINITY { f64::INFINITY } else { e.ln() - lw };
            (key, s)
        })
        .collect();
    keys.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keys.into_iter().take(m).map(|(_, s)| s).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SirResample {
    pub indices: Vec<usize>,
    pub ess: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Importance weights for fold `rows`: `log w_s = -Σ_{i∈rows} log p(y_i | θ^s)`.
pub fn sir_log_weights(draws: &PosteriorDraws, data: &Dataset, rows: &[usize]) -> Result<Vec<f64>> {
    if draws.p() != data.p() {
        return Err(Error::dim(format!("draws have {} coefficients, data has {} covariates", draws.p(), data.p())));
    }
    let lik = draws.likelihood().ok_or_else(|| {
        Error::input("posterior draws need a likelihood specification for importance weighting")
    })?;
    let xv = select_rows(data.x(), rows);
    let eta = draws.beta() * xv.transpose();
    let lw: Vec<f64> = (0..draws.count())
        .map(|s| {
            let sigma = draws.sigma_at(s);
            -rows
                .iter()
                .enumerate()
                .map(|(c, &i)| lik.log_density(data.y()[i], eta[(s, c)], sigma))
                .sum::<f64>()
        })
        .collect();
    if lw.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("importance weights".into()));
    }
    Ok(lw)
}

pub fn sir_resample(
    draws: &PosteriorDraws,
    data: &Dataset,
    folds: &FoldSpec,
    fold: usize,
    s_tilde: usize,
    seed: u64,
) -> Result<SirResample> {
    if s_tilde == 0 || s_tilde > draws.count() {
        return Err(Error::input(format!(
            "resample size must lie in 1..={}, got {s_tilde}",
            draws.count()
        )));
    }
    if folds.n() != data.n() {
        return Err(Error::dim(format!("folds cover {} rows, data has {}", folds.n(), data.n())));
    }
    let rows = folds.validation_rows(fold);
    let mut lw = sir_log_weights(draws, data, &rows)?;
    let max = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::INFINITY {
        // Held-out data with zero density under some draws give those draws
        // unbounded weight; resample uniformly among them.
        for v in lw.iter_mut() {
            *v = if *v == f64::INFINITY { 0.0 } else { f64::NEG_INFINITY };
        }
    } else if max == f64::NEG_INFINITY {
        return Err(Error::NonFinite("importance weights".into()));
    } else {
        for v in lw.iter_mut() {
            *v -= max;
        }
    }
    let w: Vec<f64> = lw.iter().map(|v| v.exp()).collect();
    let sum: f64 = w.iter().sum();
    let ess = sum * sum / w.iter().map(|v| v * v).sum::<f64>();
    let warning = (ess < MIN_ESS).then(|| format!("fold {fold}: importance-weight effective sample size {ess:.2} < {MIN_ESS}"));
    let indices = sample_without_replacement(&lw, s_tilde, &mut rng::seeded(seed));
    Ok(SirResample { indices, ess, warning })
}

/// Everything one fold needs to score candidate subsets.
#[derive(Debug, Clone)]
pub struct FoldData {
    pub x_train: DMatrix<f64>,
    /// Training-row point predictions (means of `h(ỹ)` over resampled draws).
    pub target_train: DVector<f64>,
    pub w_train: Weights,
    pub x_val: DMatrix<f64>,
    /// `h(y_i)` at validation rows.
    pub observed_val: DVector<f64>,
    /// `h(ỹ_i^s)` at validation rows, one row per resampled draw.
    pub ytilde_val: DMatrix<f64>,
}

/// Loss `L(target, x'δ)`: squared error, or cross-entropy with the fitted
/// probability clipped to `[κ, 1-κ]`.
pub fn pointwise_loss(kind: LossKind, target: f64, eta: f64) -> f64 {
    match kind {
        LossKind::SquaredError => (target - eta) * (target - eta),
        LossKind::CrossEntropy => {
            let pi = clip_prob(logistic(eta));
            -(target * pi.ln() + (1.0 - target) * (1.0 - pi).ln())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldScore {
    pub empirical: f64,
    pub predictive: Vec<f64>,
}

/// Fit the subset's action on training rows and score validation rows.
/// Returns `None` when the fold has fewer training rows than the subset size.
pub fn score_fold(fd: &FoldData, s: &Subset, kind: LossKind) -> Option<FoldScore> {
    if fd.x_train.nrows() < s.len() {
        return None;
    }
    let action = match kind {
        LossKind::SquaredError => wls_action(&fd.x_train, &fd.target_train, &fd.w_train, s),
        LossKind::CrossEntropy => logistic_action(&fd.x_train, &fd.target_train, &fd.w_train, s, IRLS_JITTER),
    };
    let eta = action.predict(&fd.x_val);
    let nv = eta.len() as f64;
    let empirical = fd
        .observed_val
        .iter()
        .zip(eta.iter())
        .map(|(&y, &e)| pointwise_loss(kind, y, e))
        .sum::<f64>()
        / nv;
    let predictive = fd
        .ytilde_val
        .row_iter()
        .map(|row| row.iter().zip(eta.iter()).map(|(&y, &e)| pointwise_loss(kind, y, e)).sum::<f64>() / nv)
        .collect();
    Some(FoldScore { empirical, predictive })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedSubset {
    pub subset: Subset,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldDiagnostics {
    pub fold: usize,
    pub ess: f64,
    pub sir_seed: u64,
    pub predictive_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Out-of-sample losses for a list of subsets. Predictive loss draws are
/// paired: position `t` uses the same resampled draw in every subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetLosses {
    pub loss_kind: LossKind,
    pub subsets: Vec<Subset>,
    /// `L^out_S`; absent when no observed responses exist at the targets.
    pub empirical: Option<Vec<f64>>,
    /// `L̃^out_S`, one vector of length `S̃` per subset.
    pub predictive: Vec<Vec<f64>>,
    /// Per-subset, per-fold empirical losses.
    pub fold_empirical: Vec<Vec<f64>>,
    /// Per-subset, per-fold mean of the predictive loss draws.
    pub fold_predictive_mean: Vec<Vec<f64>>,
    pub dropped: Vec<DroppedSubset>,
    pub diagnostics: Vec<FoldDiagnostics>,
}

impl SubsetLosses {
    pub fn len(&self) -> usize {
        self.subsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsets.is_empty()
    }

    pub fn position(&self, s: &Subset) -> Option<usize> {
        self.subsets.iter().position(|t| t.indices() == s.indices())
    }

    pub fn empirical(&self) -> Result<&[f64]> {
        self.empirical
            .as_deref()
            .ok_or_else(|| Error::Unsupported("empirical losses are undefined without observed responses at the targets".into()))
    }

    pub fn predictive_mean(&self, i: usize) -> f64 {
        let v = &self.predictive[i];
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationConfig {
    pub loss_kind: LossKind,
    pub functional: FunctionalSpec,
    pub weights: WeightSpec,
    pub s_tilde: usize,
    pub seed: u64,
}

/// Build the fold inputs: resample draws, simulate predictive responses at
/// every row, and average them over training rows.
pub fn fold_data(
    data: &Dataset,
    draws: &PosteriorDraws,
    folds: &FoldSpec,
    fold: usize,
    cfg: &EvaluationConfig,
    weights: &Weights,
) -> Result<(FoldData, FoldDiagnostics)> {
    let sir_seed = derive_seed(cfg.seed, 2 * fold as u64);
    let predictive_seed = derive_seed(cfg.seed, 2 * fold as u64 + 1);
    let sir = sir_resample(draws, data, folds, fold, cfg.s_tilde, sir_seed)?;
    let lik = draws.effective_likelihood()?;
    let train = folds.training_rows(fold);
    let val = folds.validation_rows(fold);

    let beta = DMatrix::from_fn(sir.indices.len(), draws.p(), |t, j| draws.beta()[(sir.indices[t], j)]);
    let mut yt = &beta * data.x().transpose();
    let mut r = rng::seeded(predictive_seed);
    for (t, &s) in sir.indices.iter().enumerate() {
        let sigma = draws.sigma_at(s);
        for i in 0..yt.ncols() {
            yt[(t, i)] = cfg.functional.apply(lik.sample(yt[(t, i)], sigma, &mut r));
        }
    }
    let m = yt.nrows() as f64;
    let target_train = DVector::from_iterator(train.len(), train.iter().map(|&i| yt.column(i).sum() / m));
    let fd = FoldData {
        x_train: select_rows(data.x(), &train),
        target_train,
        w_train: weights.rows(&train),
        x_val: select_rows(data.x(), &val),
        observed_val: DVector::from_iterator(val.len(), val.iter().map(|&i| cfg.functional.apply(data.y()[i]))),
        ytilde_val: select_columns(&yt, &val),
    };
    let diag = FoldDiagnostics {
        fold,
        ess: sir.ess,
        sir_seed,
        predictive_seed,
        warning: sir.warning,
    };
    Ok((fd, diag))
}

/// Combine per-fold scores into `SubsetLosses`, dropping subsets that
/// could not be evaluated on some fold.
pub fn assemble_losses(kind: LossKind, subsets: &[Subset], per_fold: Vec<Vec<Option<FoldScore>>>, diagnostics: Vec<FoldDiagnostics>) -> SubsetLosses {
    let k = per_fold.len();
    let mut out = SubsetLosses {
        loss_kind: kind,
        subsets: Vec::new(),
        empirical: Some(Vec::new()),
        predictive: Vec::new(),
        fold_empirical: Vec::new(),
        fold_predictive_mean: Vec::new(),
        dropped: Vec::new(),
        diagnostics,
    };
    for (j, s) in subsets.iter().enumerate() {
        let scores: Option<Vec<&FoldScore>> = per_fold.iter().map(|f| f[j].as_ref()).collect();
        let Some(scores) = scores else {
            out.dropped.push(DroppedSubset {
                subset: s.clone(),
                reason: format!("a training fold has fewer rows than the subset size {}", s.len()),
            });
            continue;
        };
        let st = scores[0].predictive.len();
        let fold_emp: Vec<f64> = scores.iter().map(|f| f.empirical).collect();
        let fold_pred: Vec<f64> = scores
            .iter()
            .map(|f| f.predictive.iter().sum::<f64>() / st as f64)
            .collect();
        let pred: Vec<f64> = (0..st).map(|t| scores.iter().map(|f| f.predictive[t]).sum::<f64>() / k as f64).collect();
        if let Some(e) = out.empirical.as_mut() {
            e.push(fold_emp.iter().sum::<f64>() / k as f64);
        }
        out.subsets.push(s.clone());
        out.predictive.push(pred);
        out.fold_empirical.push(fold_emp);
        out.fold_predictive_mean.push(fold_pred);
    }
    out
}

/// K-fold empirical and predictive losses for every subset.
pub fn out_of_sample_losses(
    data: &Dataset,
    draws: &PosteriorDraws,
    folds: &FoldSpec,
    subsets: &[Subset],
    cfg: &EvaluationConfig,
) -> Result<SubsetLosses> {
    if subsets.is_empty() {
        return Err(Error::input("no candidate subsets to evaluate"));
    }
    cfg.functional.validate()?;
    if let Some(s) = subsets.iter().find(|s| s.indices().last().is_some_and(|&j| j >= data.p())) {
        return Err(Error::dim(format!("subset {s} out of range for {} covariates", data.p())));
    }
    if cfg.loss_kind == LossKind::CrossEntropy
        && !cfg.functional.is_binary()
        && data.response_kind() != crate::backend::ResponseKind::Binary
    {
        return Err(Error::input("cross-entropy loss needs a binary response or a threshold functional"));
    }
    let weights = cfg.weights.realize(data.x())?;
    let per_fold: Vec<Result<(Vec<Option<FoldScore>>, FoldDiagnostics)>> = (0..folds.k)
        .into_par_iter()
        .map(|fold| {
            let (fd, diag) = fold_data(data, draws, folds, fold, cfg, &weights)?;
            let scores = subsets.par_iter().map(|s| score_fold(&fd, s, cfg.loss_kind)).collect();
            Ok((scores, diag))
        })
        .collect();
    let mut scores = Vec::with_capacity(folds.k);
    let mut diags = Vec::with_capacity(folds.k);
    for r in per_fold {
        let (s, d) = r?;
        scores.push(s);
        diags.push(d);
    }
    let out = assemble_losses(cfg.loss_kind, subsets, scores, diags);
    if out.is_empty() {
        return Err(Error::input("no candidate subset could be evaluated on every fold"));
    }
    Ok(out)
}

/// `S_min`: smallest empirical loss, then smaller size, then lexicographic.
pub fn best_subset(losses: &SubsetLosses) -> Result<Subset> {
    let emp = losses.empirical()?;
    let i = (0..losses.len())
        .min_by(|&a, &b| {
            emp[a]
                .total_cmp(&emp[b])
                .then(losses.subsets[a].len().cmp(&losses.subsets[b].len()))
                .then(losses.subsets[a].indices().cmp(losses.subsets[b].indices()))
        })
        .ok_or_else(|| Error::input("empty loss table"))?;
    Ok(losses.subsets[i].clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DTilde {
    /// Percent increases on usable draws, in draw order.
    pub values: Vec<f64>,
    /// Draws dropped for a near-zero reference loss.
    pub excluded: usize,
}

/// `D̃ = 100 (L̃_{S2} - L̃_{S1}) / L̃_{S1}` on paired draws.
pub fn d_tilde_draws(losses: &SubsetLosses, s1: usize, s2: usize) -> DTilde {
    let a = &losses.predictive[s1];
    let b = &losses.predictive[s2];
    let mut values = Vec::with_capacity(a.len());
    let mut excluded = 0;
    for (&l1, &l2) in a.iter().zip(b) {
        if l1.abs() <= DENOM_FLOOR {
            excluded += 1;
            continue;
        }
        values.push(100.0 * (l2 - l1) / l1);
    }
    DTilde { values, excluded }
}

/// Estimated `P(D̃ < η)` with the tie rule of [`BOUNDARY_RULE`].
pub fn event_probability(d: &DTilde, eta: f64, same: bool) -> f64 {
    if d.values.is_empty() {
        return if same { 1.0 } else { 0.0 };
    }
    let hits = d.values.iter().filter(|&&v| v < eta || v.abs() <= TIE_TOL).count();
    hits as f64 / d.values.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptableFamily {
    pub members: Vec<Subset>,
    /// `P(D̃ < η)` for each member.
    pub probabilities: Vec<f64>,
    pub eta: f64,
    pub epsilon: f64,
    /// Subset every member is compared against: `S_min`, or the full set
    /// when no empirical losses exist.
    pub reference: Subset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_min: Option<Subset>,
    pub s_small: Subset,
    pub boundary_rule: String,
}

impl AcceptableFamily {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, s: &Subset) -> bool {
        self.members.iter().any(|m| m.indices() == s.indices())
    }
}

fn check_margins(eta: f64, epsilon: f64) -> Result<()> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::input(format!("eta must be a finite non-negative percent, got {eta}")));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::input(format!("epsilon must lie in [0, 1], got {epsilon}")));
    }
    Ok(())
}

/// Members and probabilities relative to subset `reference`; `s_small` is
/// the smallest member, ties by `tie_loss`, then lexicographic.
fn family_against(losses: &SubsetLosses, reference: usize, eta: f64, epsilon: f64, tie_loss: &[f64]) -> (Vec<usize>, Vec<f64>, usize) {
    let mut members = Vec::new();
    let mut probs = Vec::new();
    for j in 0..losses.len() {
        let d = d_tilde_draws(losses, reference, j);
        let p = event_probability(&d, eta, j == reference);
        if p >= epsilon || j == reference {
            members.push(j);
            probs.push(p);
        }
    }
    let small = *members
        .iter()
        .min_by(|&&a, &&b| {
            losses.subsets[a]
                .len()
                .cmp(&losses.subsets[b].len())
                .then(tie_loss[a].total_cmp(&tie_loss[b]))
                .then(losses.subsets[a].indices().cmp(losses.subsets[b].indices()))
        })
        .expect("reference is always a member");
    (members, probs, small)
}

pub fn acceptable_family(losses: &SubsetLosses, eta: f64, epsilon: f64) -> Result<AcceptableFamily> {
    check_margins(eta, epsilon)?;
    let s_min = best_subset(losses)?;
    let r = losses.position(&s_min).expect("S_min comes from the table");
    let (members, probabilities, small) = family_against(losses, r, eta, epsilon, losses.empirical()?);
    Ok(AcceptableFamily {
        members: members.iter().map(|&j| losses.subsets[j].clone()).collect(),
        probabilities,
        eta,
        epsilon,
        reference: s_min.clone(),
        s_min: Some(s_min),
        s_small: losses.subsets[small].clone(),
        boundary_rule: BOUNDARY_RULE.into(),
    })
}

/// Predictive losses at new covariates with no cross-validation: each
/// subset's action is fit to the point predictions at `X̃` and scored
/// against every predictive draw there.
pub fn predictive_losses_newx(
    xtilde: &DMatrix<f64>,
    pred: &PredictiveDraws,
    subsets: &[Subset],
    kind: LossKind,
    h: &FunctionalSpec,
    w: &Weights,
) -> Result<SubsetLosses> {
    h.validate()?;
    if pred.n_targets() != xtilde.nrows() || w.len() != xtilde.nrows() {
        return Err(Error::dim(format!(
            "{} covariate rows, {} predictive targets, {} weights",
            xtilde.nrows(),
            pred.n_targets(),
            w.len()
        )));
    }
    if let Some(s) = subsets.iter().find(|s| s.is_empty() || s.indices().last().is_some_and(|&j| j >= xtilde.ncols())) {
        return Err(Error::dim(format!("subset {s} invalid for {} covariates", xtilde.ncols())));
    }
    let ht = pred.ytilde().map(|v| h.apply(v));
    let m = ht.nrows() as f64;
    let target = DVector::from_fn(ht.ncols(), |i, _| ht.column(i).sum() / m);
    let fd = FoldData {
        x_train: xtilde.clone(),
        target_train: target,
        w_train: w.clone(),
        x_val: xtilde.clone(),
        observed_val: DVector::zeros(xtilde.nrows()),
        ytilde_val: ht,
    };
    let scores: Vec<Option<FoldScore>> = subsets.par_iter().map(|s| score_fold(&fd, s, kind)).collect();
    let mut out = assemble_losses(kind, subsets, vec![scores], Vec::new());
    out.empirical = None;
    out.fold_empirical.clear();
    Ok(out)
}

/// Acceptable family at new covariates, referenced to the full subset.
/// The full subset is evaluated alongside the candidates if missing.
pub fn acceptable_family_newx(
    xtilde: &DMatrix<f64>,
    pred: &PredictiveDraws,
    subsets: &[Subset],
    kind: LossKind,
    h: &FunctionalSpec,
    w: &Weights,
    eta: f64,
    epsilon: f64,
) -> Result<(SubsetLosses, AcceptableFamily)> {
    check_margins(eta, epsilon)?;
    let full = Subset::full(xtilde.ncols());
    let mut all = subsets.to_vec();
    if !all.iter().any(|s| s.indices() == full.indices()) {
        all.push(full.clone());
    }
    let losses = predictive_losses_newx(xtilde, pred, &all, kind, h, w)?;
    let fam = newx_family_from_losses(&losses, xtilde.ncols(), eta, epsilon)?;
    Ok((losses, fam))
}

/// Acceptable family against the full subset, from an existing loss table;
/// `s_small` ties are broken by mean predictive loss.
pub fn newx_family_from_losses(losses: &SubsetLosses, p: usize, eta: f64, epsilon: f64) -> Result<AcceptableFamily> {
    check_margins(eta, epsilon)?;
    let full = Subset::full(p);
    let r = losses
        .position(&full)
        .ok_or_else(|| Error::input("the full subset could not be evaluated at the targets"))?;
    let tie: Vec<f64> = (0..losses.len()).map(|j| losses.predictive_mean(j)).collect();
    let (members, probabilities, small) = family_against(losses, r, eta, epsilon, &tie);
    Ok(AcceptableFamily {
        members: members.iter().map(|&j| losses.subsets[j].clone()).collect(),
        probabilities,
        eta,
        epsilon,
        reference: full,
        s_min: None,
        s_small: losses.subsets[small].clone(),
        boundary_rule: BOUNDARY_RULE.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(pred: Vec<Vec<f64>>, emp: Vec<f64>, subsets: Vec<Vec<usize>>) -> SubsetLosses {
        let n = subsets.len();
        SubsetLosses {
            loss_kind: LossKind::SquaredError,
            subsets: subsets.into_iter().map(|s| Subset::of(s).unwrap()).collect(),
            empirical: Some(emp),
            predictive: pred,
            fold_empirical: vec![vec![]; n],
            fold_predictive_mean: vec![vec![]; n],
            dropped: vec![],
            diagnostics: vec![],
        }
    }

    #[test]
    fn folds_balanced() {
        let f = make_folds(10, 10, 1).unwrap();
        let mut a = f.assignment.clone();
        a.sort_unstable();
        assert_eq!(a, (0..10).collect::<Vec<_>>());
        let g = make_folds(103, 10, 2).unwrap();
        let mut sizes: Vec<usize> = (0..10).map(|k| g.validation_rows(k).len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![10, 10, 10, 10, 10, 10, 10, 11, 11, 11]);
        assert!(make_folds(5, 1, 0).is_err());
        assert!(make_folds(5, 6, 0).is_err());
        assert_eq!(make_folds(50, 10, 3).unwrap(), make_folds(50, 10, 3).unwrap());
        assert_eq!(DEFAULT_FOLDS, 10);
    }

    #[test]
    fn race_full_size_is_permutation() {
        let mut r = rng::seeded(4);
        let mut got = sample_without_replacement(&[0.0, -1.0, 2.0, 0.5, -3.0], 5, &mut r);
        got.sort_unstable();
        assert_eq!(got, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn race_two_draws_matches_enumeration() {
        // weights (1, e): P(first pick = 1) = e / (1 + e)
        let mut r = rng::seeded(5);
        let reps = 100_000;
        let hits = (0..reps).filter(|_| sample_without_replacement(&[0.0, 1.0], 1, &mut r)[0] == 1).count();
        let p = std::f64::consts::E / (1.0 + std::f64::consts::E);
        let se = (p * (1.0 - p) / reps as f64).sqrt();
        assert!((hits as f64 / reps as f64 - p).abs() < 4.0 * se);
    }

    #[test]
    fn d_tilde_arithmetic() {
        let t = table(vec![vec![2.0, 4.0], vec![3.0, 3.0]], vec![1.0, 1.0], vec![vec![0], vec![1]]);
        assert_eq!(d_tilde_draws(&t, 0, 1).values, vec![50.0, -25.0]);
        assert!(d_tilde_draws(&t, 0, 0).values.iter().all(|&v| v == 0.0));
        let z = table(vec![vec![0.0, 4.0], vec![3.0, 3.0]], vec![1.0, 1.0], vec![vec![0], vec![1]]);
        let d = d_tilde_draws(&z, 0, 1);
        assert_eq!((d.values.len(), d.excluded), (1, 1));
    }

    #[test]
    fn best_subset_ties() {
        let t = table(vec![vec![1.0]; 3], vec![1.0, 1.0, 2.0], vec![vec![0, 1], vec![2], vec![0]]);
        assert_eq!(best_subset(&t).unwrap().indices(), &[2]);
        let u = table(vec![vec![1.0]; 2], vec![1.0, 2.0], vec![vec![0], vec![1]]);
        assert_eq!(best_subset(&u).unwrap().indices(), &[0]);
    }

    #[test]
    fn hand_built_membership() {
        // S_min = {0,1} (lowest empirical). Draws of L̃:
        //   {0,1}: 1, 1, 1, 1
        //   {0}:   1.5, 0.9, 1.2, 1.0   -> D̃ = 50, -10, 20, 0 -> P(D̃<0 or tie) = 2/4
        //   {1}:   2, 2, 2, 0.99        -> D̃ = 100, 100, 100, -1 -> 1/4
        let t = table(
            vec![vec![1.0; 4], vec![1.5, 0.9, 1.2, 1.0], vec![2.0, 2.0, 2.0, 0.99]],
            vec![1.0, 1.1, 1.3],
            vec![vec![0, 1], vec![0], vec![1]],
        );
        let f = acceptable_family(&t, 0.0, 0.3).unwrap();
        assert_eq!(f.members.len(), 2);
        assert_eq!(f.probabilities, vec![1.0, 0.5]);
        assert_eq!(f.s_small.indices(), &[0]);
        let g = acceptable_family(&t, 0.0, 0.25).unwrap();
        assert_eq!(g.members.len(), 3);
        // smallest members tie on size; {0} has lower empirical loss
        assert_eq!(g.s_small.indices(), &[0]);
        let h = acceptable_family(&t, 30.0, 0.6).unwrap();
        assert_eq!(h.members.len(), 2);
        assert!(acceptable_family(&t, -1.0, 0.1).is_err());
        assert!(acceptable_family(&t, 0.0, 1.1).is_err());
    }

    #[test]
    fn newx_has_no_empirical_loss() {
        let t = SubsetLosses {
            empirical: None,
            ..table(vec![vec![1.0]], vec![], vec![vec![0]])
        };
        assert!(matches!(best_subset(&t), Err(Error::Unsupported(_))));
        assert!(matches!(acceptable_family(&t, 0.0, 0.1), Err(Error::Unsupported(_))));
    }

    #[test]
    fn cross_entropy_loss_is_clipped() {
        let v = pointwise_loss(LossKind::CrossEntropy, 1.0, -1e6);
        assert!((v - (1e-6f64).ln().abs()).abs() < 1e-9);
        assert!((pointwise_loss(LossKind::CrossEntropy, 1.0, 0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(pointwise_loss(LossKind::SquaredError, 3.0, 1.0), 4.0);
    }
}
