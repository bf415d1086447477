//! Covariate screening and per-size enumeration of the lowest-RSS subsets.
//!
//! The branch-and-bound search walks a deletion tree in the style of
//! Furnival and Wilson's leaps and bounds: each node holds an ordered
//! variable list whose first `fixed` entries may not be deleted, and child
//! `i` deletes entry `i` and fixes everything before it. Every subset of the
//! node's variables that contains the fixed prefix is visited exactly once,
//! and the RSS of a node is a lower bound for every subset in its subtree.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

use crate::action::{logistic_action, logistic_pseudo_data, wls_action, LinearAction, Subset, Weights, IRLS_JITTER};
use crate::backend::{intercept_column, PointPredictions, PredictionKind, Standardization};
use crate::error::{Error, Result};
use crate::linalg::{select_columns, symmetric_condition, GramSystem};

pub const DEFAULT_S_MAX: usize = 35;
pub const DEFAULT_M_K: usize = 15;
pub const LARGE_M_K: usize = 100;
pub const EXHAUSTIVE_LIMIT: usize = 16;
/// Relative (to the total weighted sum of squares) slack on pruning decisions.
pub const PRUNE_TOL: f64 = 1e-9;
/// Above this condition number of the equilibrated Gram matrix the search
/// recomputes every bound from scratch instead of downdating an inverse.
const FAST_MODE_MAX_CONDITION: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyEntry {
    pub subset: Subset,
    /// Weighted RSS of the pseudo-data, or the exact weighted cross-entropy
    /// for classification families.
    pub criterion: f64,
    /// Weighted RSS on the logistic pseudo-data (classification only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surrogate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateFamily {
    /// `by_size[k - 1]` holds the retained subsets of size `k`.
    pub by_size: Vec<Vec<FamilyEntry>>,
    pub m_k: usize,
    /// Original covariate index of every screened column.
    pub screen_map: Vec<usize>,
}

impl CandidateFamily {
    pub fn entries(&self) -> impl Iterator<Item = &FamilyEntry> {
        self.by_size.iter().flatten()
    }

    pub fn subsets(&self) -> Vec<Subset> {
        self.entries().map(|e| e.subset.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.by_size.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_size(&self) -> usize {
        self.entries().map(|e| e.subset.len()).max().unwrap_or(0)
    }

    /// Translate subsets from screened to original index space.
    pub fn remap(self, map: &[usize]) -> CandidateFamily {
        let by_size = self
            .by_size
            .into_iter()
            .map(|list| {
                list.into_iter()
                    .map(|e| FamilyEntry {
                        subset: e.subset.map_indices(map),
                        ..e
                    })
                    .collect()
            })
            .collect();
        CandidateFamily {
            by_size,
            m_k: self.m_k,
            screen_map: self.screen_map.iter().map(|&j| map[j]).collect(),
        }
    }
}

fn entry_order(a: &FamilyEntry, b: &FamilyEntry) -> Ordering {
    a.criterion
        .total_cmp(&b.criterion)
        .then_with(|| a.subset.indices().cmp(b.subset.indices()))
}

/// Screen to at most `s_max` covariates: forced indices and the intercept
/// first, then the largest absolute coefficients of `full_action`, ties to
/// the lower index. Returns sorted original indices.
pub fn screen(full_action: &LinearAction, p: usize, s_max: usize, forced: &[usize], intercept: Option<usize>) -> Result<Vec<usize>> {
    if s_max == 0 {
        return Err(Error::input("s_max must be positive"));
    }
    if let Some(&j) = forced.iter().find(|&&j| j >= p) {
        return Err(Error::dim(format!("forced index {j} out of range for {p} covariates")));
    }
    let mut keep: Vec<usize> = forced.to_vec();
    if let Some(i) = intercept {
        if !keep.contains(&i) {
            keep.push(i);
        }
    }
    keep.sort_unstable();
    keep.dedup();
    if keep.len() > s_max {
        return Err(Error::input(format!(
            "s_max = {s_max} is smaller than the {} forced covariates",
            keep.len()
        )));
    }
    if p <= s_max {
        return Ok((0..p).collect());
    }
    let coef = full_action.dense(p);
    let mut rest: Vec<usize> = (0..p).filter(|j| !keep.contains(j)).collect();
    rest.sort_by(|&a, &b| coef[b].abs().total_cmp(&coef[a].abs()).then(a.cmp(&b)));
    keep.extend(rest.into_iter().take(s_max - keep.len()));
    keep.sort_unstable();
    Ok(keep)
}

struct Incumbents {
    cap: usize,
    lists: Vec<Vec<FamilyEntry>>,
}

impl Incumbents {
    fn new(p: usize, cap: usize) -> Self {
        Incumbents {
            cap,
            lists: vec![Vec::new(); p],
        }
    }

    fn insert(&mut self, indices: Vec<usize>, forced: &[usize], rss: f64) {
        let k = indices.len();
        let entry = FamilyEntry {
            subset: Subset::from_sorted(indices, forced),
            criterion: rss,
            surrogate: None,
        };
        let list = &mut self.lists[k - 1];
        let pos = list.partition_point(|e| entry_order(e, &entry) == Ordering::Less);
        if pos >= self.cap {
            return;
        }
        list.insert(pos, entry);
        list.truncate(self.cap);
    }

    fn worst(&self, k: usize) -> Option<f64> {
        let list = &self.lists[k - 1];
        (list.len() == self.cap).then(|| list[list.len() - 1].criterion)
    }

    fn into_family(self) -> CandidateFamily {
        let p = self.lists.len();
        CandidateFamily {
            by_size: self.lists,
            m_k: self.cap,
            screen_map: (0..p).collect(),
        }
    }
}

fn check_search_input(x: &DMatrix<f64>, y: &DVector<f64>, w: &Weights, m_k: usize, forced: &[usize]) -> Result<()> {
    let p = x.ncols();
    if p == 0 {
        return Err(Error::input("no covariates to search"));
    }
    if m_k == 0 {
        return Err(Error::input("m_k must be at least 1"));
    }
    if y.len() != x.nrows() || w.len() != x.nrows() {
        return Err(Error::dim(format!("{} rows, {} responses, {} weights", x.nrows(), y.len(), w.len())));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pseudo-data".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariates".into()));
    }
    let mut f = forced.to_vec();
    f.sort_unstable();
    f.dedup();
    if f.len() != forced.len() {
        return Err(Error::input("forced indices must be unique"));
    }
    if let Some(&j) = f.last() {
        if j >= p {
            return Err(Error::dim(format!("forced index {j} out of range for {p} covariates")));
        }
    }
    Ok(())
}

fn sorted_forced(forced: &[usize]) -> Vec<usize> {
    let mut f = forced.to_vec();
    f.sort_unstable();
    f
}

/// Brute-force enumeration of every nonempty subset containing `forced`.
pub fn exhaustive_search(x: &DMatrix<f64>, y: &DVector<f64>, w: &Weights, m_k: usize, forced: &[usize]) -> Result<CandidateFamily> {
    check_search_input(x, y, w, m_k, forced)?;
    let p = x.ncols();
    if p > EXHAUSTIVE_LIMIT {
        return Err(Error::TooLarge(format!(
            "exhaustive search limited to {EXHAUSTIVE_LIMIT} covariates, got {p}"
        )));
    }
    let forced = sorted_forced(forced);
    let forced_mask: u32 = forced.iter().map(|&j| 1u32 << j).sum();
    let sys = GramSystem::new(x, y, w.values());
    let mut inc = Incumbents::new(p, m_k);
    for mask in 1u32..(1u32 << p) {
        if mask & forced_mask != forced_mask {
            continue;
        }
        let idx: Vec<usize> = (0..p).filter(|&j| mask & (1 << j) != 0).collect();
        let rss = sys.rss(&idx);
        inc.insert(idx, &forced, rss);
    }
    Ok(inc.into_family())
}

/// Inverse Gram matrix and coefficients of a node, in node variable order.
#[derive(Clone)]
struct FastState {
    inv: DMatrix<f64>,
    coef: DVector<f64>,
    rss: f64,
}

impl FastState {
    fn root(sys: &GramSystem, vars: &[usize]) -> Option<Self> {
        let g = DMatrix::from_fn(vars.len(), vars.len(), |a, b| sys.gram[(vars[a], vars[b])]);
        if symmetric_condition(&g) > FAST_MODE_MAX_CONDITION {
            return None;
        }
        let chol = g.cholesky()?;
        let inv = chol.inverse();
        let xty = DVector::from_iterator(vars.len(), vars.iter().map(|&j| sys.xty[j]));
        let coef = &inv * &xty;
        let rss = sys.yty - xty.dot(&coef);
        Some(FastState { inv, coef, rss })
    }

    fn deletion_rss(&self, i: usize) -> f64 {
        self.rss + self.coef[i] * self.coef[i] / self.inv[(i, i)]
    }

    fn permuted(&self, order: &[usize]) -> Self {
        let k = order.len();
        FastState {
            inv: DMatrix::from_fn(k, k, |a, b| self.inv[(order[a], order[b])]),
            coef: DVector::from_fn(k, |a, _| self.coef[order[a]]),
            rss: self.rss,
        }
    }

    fn delete(&self, i: usize) -> Self {
        let k = self.coef.len();
        let d = self.inv[(i, i)];
        let keep: Vec<usize> = (0..k).filter(|&a| a != i).collect();
        let inv = DMatrix::from_fn(k - 1, k - 1, |a, b| {
            let (ra, rb) = (keep[a], keep[b]);
            self.inv[(ra, rb)] - self.inv[(ra, i)] * self.inv[(i, rb)] / d
        });
        let coef = DVector::from_fn(k - 1, |a, _| self.coef[keep[a]] - self.inv[(keep[a], i)] * self.coef[i] / d);
        FastState {
            inv,
            coef,
            rss: self.deletion_rss(i),
        }
    }
}

struct Bba<'a> {
    sys: &'a GramSystem,
    inc: Incumbents,
    tol: f64,
    forced: Vec<usize>,
    nodes: usize,
}

impl Bba<'_> {
    fn canonical_rss(&self, vars: &[usize]) -> (Vec<usize>, f64) {
        let mut sorted = vars.to_vec();
        sorted.sort_unstable();
        let rss = self.sys.rss(&sorted);
        (sorted, rss)
    }

    fn prunable(&self, bound: f64, lo: usize, hi: usize) -> bool {
        (lo..=hi).all(|k| self.inc.worst(k).is_some_and(|w| bound > w + self.tol))
    }

    fn visit(&mut self, vars: Vec<usize>, fixed: usize, fast: Option<FastState>) {
        self.nodes += 1;
        let (sorted, rss) = self.canonical_rss(&vars);
        self.inc.insert(sorted, &self.forced, rss);
        let m = vars.len();
        if m <= 1 || fixed >= m {
            return;
        }

        // Bounds for every deletable position.
        let mut del: Vec<(usize, f64)> = (fixed..m)
            .map(|i| {
                let d = match &fast {
                    Some(st) if st.inv[(i, i)] > 0.0 => st.deletion_rss(i),
                    _ => {
                        let child: Vec<usize> = vars.iter().enumerate().filter(|&(a, _)| a != i).map(|(_, &v)| v).collect();
                        self.canonical_rss(&child).1
                    }
                };
                (i, d)
            })
            .collect();
        // Most important (largest deletion RSS) first, so the deepest
        // subtrees delete the least important variables.
        del.sort_by(|a, b| b.1.total_cmp(&a.1).then(vars[a.0].cmp(&vars[b.0])));

        let mut order: Vec<usize> = (0..fixed).collect();
        order.extend(del.iter().map(|&(i, _)| i));
        let vars: Vec<usize> = order.iter().map(|&a| vars[a]).collect();
        let fast = fast.map(|st| st.permuted(&order));
        let bounds: Vec<f64> = del.iter().map(|&(_, d)| d).collect();

        for i in (fixed..m).rev() {
            let bound = bounds[i - fixed];
            if self.prunable(bound, i.max(1), m - 1) {
                continue;
            }
            let mut child = vars.clone();
            child.remove(i);
            let child_fast = fast.as_ref().map(|st| st.delete(i));
            self.visit(child, i, child_fast);
        }
    }
}

/// Exact per-size `m_k` lowest weighted-RSS subsets by branch and bound.
pub fn bba_search(x: &DMatrix<f64>, y: &DVector<f64>, w: &Weights, m_k: usize, forced: &[usize]) -> Result<CandidateFamily> {
    Ok(bba_search_counted(x, y, w, m_k, forced)?.0)
}

/// As [`bba_search`], also returning the number of tree nodes visited.
pub fn bba_search_counted(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &Weights,
    m_k: usize,
    forced: &[usize],
) -> Result<(CandidateFamily, usize)> {
    check_search_input(x, y, w, m_k, forced)?;
    let p = x.ncols();
    let forced = sorted_forced(forced);
    let sys = GramSystem::new(x, y, w.values());
    let mut vars = forced.clone();
    vars.extend((0..p).filter(|j| forced.binary_search(j).is_err()));
    let fast = FastState::root(&sys, &vars);
    let mut bba = Bba {
        tol: PRUNE_TOL * sys.yty,
        sys: &sys,
        inc: Incumbents::new(p, m_k),
        forced: forced.clone(),
        nodes: 0,
    };
    bba.visit(vars, forced.len(), fast);
    let nodes = bba.nodes;
    Ok((bba.inc.into_family(), nodes))
}

fn standardized_full_action(xtilde: &DMatrix<f64>, y: &DVector<f64>, w: &Weights) -> (LinearAction, Option<usize>) {
    let icpt = intercept_column(xtilde);
    let xs = Standardization::fit(xtilde, icpt.is_some()).apply(xtilde);
    (wls_action(&xs, y, w, &Subset::full(xtilde.ncols())), icpt)
}

fn screened_search(
    xtilde: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &Weights,
    m_k: usize,
    s_max: usize,
    forced: &[usize],
) -> Result<CandidateFamily> {
    check_search_input(xtilde, y, w, m_k, forced)?;
    let (full, icpt) = standardized_full_action(xtilde, y, w);
    let keep = screen(&full, xtilde.ncols(), s_max, forced, icpt)?;
    let xs = select_columns(xtilde, &keep);
    let local_forced: Vec<usize> = forced.iter().map(|f| keep.binary_search(f).expect("forced survives screening")).collect();
    Ok(bba_search(&xs, y, w, m_k, &local_forced)?.remap(&keep))
}

/// Squared-error family: screen on the standardized full action, then
/// branch and bound on `ŷ`.
pub fn candidate_family_regression(
    xtilde: &DMatrix<f64>,
    yhat: &PointPredictions,
    w: &Weights,
    m_k: usize,
    s_max: usize,
    forced: &[usize],
) -> Result<CandidateFamily> {
    if yhat.kind != PredictionKind::Continuous {
        return Err(Error::input("squared-error search needs continuous point predictions"));
    }
    screened_search(xtilde, &yhat.values, w, m_k, s_max, forced)
}

/// Cross-entropy family: branch and bound on the logistic pseudo-data, then
/// each retained subset rescored by its exact weighted cross-entropy and
/// re-sorted within its size.
pub fn candidate_family_classification(
    xtilde: &DMatrix<f64>,
    hhat: &PointPredictions,
    w: &Weights,
    m_k: usize,
    s_max: usize,
    forced: &[usize],
) -> Result<CandidateFamily> {
    if hhat.kind != PredictionKind::Probability {
        return Err(Error::input("classification search needs probability point predictions"));
    }
    let pd = logistic_pseudo_data(hhat, w)?;
    let what = Weights::new(pd.what.clone())?;
    let mut fam = screened_search(xtilde, &pd.zhat, &what, m_k, s_max, forced)?;
    for list in &mut fam.by_size {
        for e in list.iter_mut() {
            let a = logistic_action(xtilde, &hhat.values, w, &e.subset, IRLS_JITTER);
            e.surrogate = Some(e.criterion);
            e.criterion = a.in_sample_criterion;
        }
        list.sort_by(entry_order);
    }
    Ok(fam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::{optimal_linear_action, LossKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(seed: u64, n: usize, p: usize) -> (DMatrix<f64>, DVector<f64>, Weights) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(n, |i, _| x.row(i).sum() * 0.5 + rng.random_range(-1.0..1.0));
        let w = Weights::new(DVector::from_fn(n, |_, _| rng.random_range(0.5..1.5))).unwrap();
        (x, y, w)
    }

    fn assert_same(a: &CandidateFamily, b: &CandidateFamily) {
        assert_eq!(a.by_size.len(), b.by_size.len());
        for (la, lb) in a.by_size.iter().zip(&b.by_size) {
            assert_eq!(la.len(), lb.len());
            for (ea, eb) in la.iter().zip(lb) {
                assert_eq!(ea.subset, eb.subset);
                assert!((ea.criterion - eb.criterion).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn screen_examples() {
        let act = LinearAction {
            subset: Subset::full(3),
            coefficients: vec![0.9, -1.1, 0.2],
            loss_kind: LossKind::SquaredError,
            in_sample_criterion: 0.0,
            converged: true,
            iterations: 0,
        };
        assert_eq!(screen(&act, 3, 2, &[], None).unwrap(), vec![0, 1]);
        assert_eq!(screen(&act, 3, 3, &[], None).unwrap(), vec![0, 1, 2]);
        assert_eq!(screen(&act, 3, 2, &[2], None).unwrap(), vec![1, 2]);
        assert_eq!(screen(&act, 3, 1, &[], Some(2)).unwrap(), vec![2]);
        assert!(screen(&act, 3, 1, &[0, 1], None).is_err());
        assert_eq!(DEFAULT_S_MAX, 35);
        assert_eq!((DEFAULT_M_K, LARGE_M_K), (15, 100));
    }

    #[test]
    fn screen_ties_go_to_lower_index() {
        let act = LinearAction {
            subset: Subset::full(4),
            coefficients: vec![1.0, -2.0, 2.0, 2.0],
            loss_kind: LossKind::SquaredError,
            in_sample_criterion: 0.0,
            converged: true,
            iterations: 0,
        };
        assert_eq!(screen(&act, 4, 2, &[], None).unwrap(), vec![1, 2]);
    }

    #[test]
    fn bba_matches_exhaustive_p8() {
        let (x, y, w) = random_problem(11, 40, 8);
        let a = bba_search(&x, &y, &w, 5, &[]).unwrap();
        let b = exhaustive_search(&x, &y, &w, 5, &[]).unwrap();
        assert_same(&a, &b);
        assert_eq!(a.len(), (1..=8).map(|k| binom(8, k).min(5)).sum::<usize>());
    }

    fn binom(n: usize, k: usize) -> usize {
        (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
    }

    #[test]
    fn bba_with_forced_matches_exhaustive() {
        let (x, y, w) = random_problem(12, 30, 7);
        let a = bba_search(&x, &y, &w, 3, &[4, 1]).unwrap();
        let b = exhaustive_search(&x, &y, &w, 3, &[1, 4]).unwrap();
        assert_same(&a, &b);
        assert!(a.by_size[0].is_empty());
        for e in a.entries() {
            assert!(e.subset.contains(1) && e.subset.contains(4));
        }
    }

    #[test]
    fn bba_handles_collinear_columns() {
        let (mut x, y, w) = random_problem(13, 25, 6);
        let c = x.column(0) * 2.0 - x.column(1);
        x.set_column(5, &c);
        let a = bba_search(&x, &y, &w, 4, &[]).unwrap();
        let b = exhaustive_search(&x, &y, &w, 4, &[]).unwrap();
        assert_same(&a, &b);
    }

    #[test]
    fn orthonormal_design_picks_largest_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let raw = DMatrix::from_fn(20, 5, |_, _| rng.random_range(-1.0..1.0));
        let q: DMatrix<f64> = raw.qr().q();
        let y = DVector::from_fn(20, |_, _| rng.random_range(-1.0..1.0));
        let proj = q.transpose() * &y;
        let mut order: Vec<usize> = (0..5).collect();
        order.sort_by(|&a, &b| proj[b].abs().total_cmp(&proj[a].abs()));
        let fam = bba_search(&q, &y, &Weights::uniform(20), 1, &[]).unwrap();
        for k in 1..=5 {
            let mut want = order[..k].to_vec();
            want.sort_unstable();
            assert_eq!(fam.by_size[k - 1][0].subset.indices(), &want[..]);
        }
    }

    #[test]
    fn exhaustive_guards() {
        let (x, y, w) = random_problem(15, 20, 17);
        assert!(matches!(exhaustive_search(&x, &y, &w, 1, &[]), Err(Error::TooLarge(_))));
        let (x1, y1, w1) = random_problem(16, 5, 1);
        assert_eq!(exhaustive_search(&x1, &y1, &w1, 3, &[]).unwrap().len(), 1);
    }

    #[test]
    fn non_finite_pseudo_data_rejected() {
        let (x, mut y, w) = random_problem(17, 10, 3);
        y[2] = f64::INFINITY;
        assert!(bba_search(&x, &y, &w, 2, &[]).is_err());
    }

    #[test]
    fn degenerate_half_probabilities() {
        let (x, _, w) = random_problem(18, 15, 3);
        let h = PointPredictions::probability(DVector::from_element(15, 0.5)).unwrap();
        let fam = candidate_family_classification(&x, &h, &w, 10, 35, &[]).unwrap();
        assert_eq!(fam.len(), 7);
        for list in &fam.by_size {
            for pair in list.windows(2) {
                assert!(pair[0].subset.indices() < pair[1].subset.indices());
            }
        }
        for e in fam.entries() {
            assert_eq!(e.surrogate, Some(0.0));
        }
    }

    #[test]
    fn cap_of_one_gives_one_per_size() {
        let (x, _, w) = random_problem(19, 25, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let h = PointPredictions::probability(DVector::from_fn(25, |_, _| rng.random_range(0.1..0.9))).unwrap();
        let fam = candidate_family_classification(&x, &h, &w, 1, 35, &[]).unwrap();
        assert_eq!(fam.len(), 3);
    }

    #[test]
    fn shared_search_reproduces_raw_least_squares() {
        let (x, y, w) = random_problem(21, 30, 5);
        let fam = bba_search(&x, &y, &w, 2, &[]).unwrap();
        let best = &fam.by_size[2][0];
        let yhat = PointPredictions::continuous(y.clone()).unwrap();
        let act = optimal_linear_action(&x, &yhat, &w, &best.subset).unwrap();
        assert!((act.in_sample_criterion - best.criterion).abs() < 1e-9 * w.values().dot(&y.component_mul(&y)));
    }
}
