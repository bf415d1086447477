//! Dense least-squares kernels shared by the action, search and evaluation code.

use nalgebra::{DMatrix, DVector};

/// Relative rank tolerance on the diagonal of the pivoted triangular factor.
pub const QR_RANK_TOL: f64 = 1e-10;

/// Relative pivot tolerance used by the Gram-matrix subset criterion. A
/// column whose squared residual (after projecting out the earlier columns)
/// falls below this fraction of its squared norm is treated as dependent.
pub const GRAM_PIVOT_TOL: f64 = 1e-11;

/// Householder QR with column pivoting, `A P = Q R`.
///
/// Solves least-squares problems, returning the minimum-norm solution when
/// `A` is numerically rank deficient (complete orthogonal decomposition of
/// the leading `rank` rows of `R`).
#[derive(Debug, Clone)]
pub struct PivotedQr {
    /// R in the upper triangle, Householder vectors (implicit unit head) below.
    packed: DMatrix<f64>,
    taus: Vec<f64>,
    perm: Vec<usize>,
    rank: usize,
    /// QR of the leading `rank` rows of R, transposed; only set when deficient.
    cod: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

impl PivotedQr {
    pub fn new(a: &DMatrix<f64>) -> Self {
        Self::with_tolerance(a, QR_RANK_TOL)
    }

    pub fn with_tolerance(a: &DMatrix<f64>, rtol: f64) -> Self {
        let (m, k) = a.shape();
        let mut r = a.clone();
        let mut perm: Vec<usize> = (0..k).collect();
        let steps = m.min(k);
        let mut taus = Vec::with_capacity(steps);
        let mut norms: Vec<f64> = (0..k).map(|c| r.column(c).norm_squared()).collect();

        for j in 0..steps {
            // Recompute the trailing norms exactly; k is small in every caller.
            for (c, slot) in norms.iter_mut().enumerate().skip(j) {
                *slot = r.view((j, c), (m - j, 1)).norm_squared();
            }
            let mut best = j;
            for c in j + 1..k {
                if norms[c] > norms[best] {
                    best = c;
                }
            }
            if best != j {
                r.swap_columns(j, best);
                perm.swap(j, best);
                norms.swap(j, best);
            }

            let alpha = norms[j].sqrt();
            if alpha == 0.0 {
                taus.push(0.0);
                continue;
            }
            let x0 = r[(j, j)];
            let beta = if x0 >= 0.0 { -alpha } else { alpha };
            let v0 = x0 - beta;
            for i in j + 1..m {
                r[(i, j)] /= v0;
            }
            let tau = (beta - x0) / beta;
            r[(j, j)] = beta;
            for c in j + 1..k {
                let mut w = r[(j, c)];
                for i in j + 1..m {
                    w += r[(i, j)] * r[(i, c)];
                }
                w *= tau;
                r[(j, c)] -= w;
                for i in j + 1..m {
                    let vi = r[(i, j)];
                    r[(i, c)] -= w * vi;
                }
            }
            taus.push(tau);
        }

        let lead = if steps > 0 { r[(0, 0)].abs() } else { 0.0 };
        let rank = if lead == 0.0 {
            0
        } else {
            (0..steps)
                .take_while(|&j| r[(j, j)].abs() > rtol * lead)
                .count()
        };

        let cod = if rank < k && rank > 0 {
            // R1 = [R11 R12] is rank x k; factor R1' = Q2 R2 so R1 = R2' Q2'.
            let mut r1t = DMatrix::zeros(k, rank);
            for i in 0..rank {
                for c in i..k {
                    r1t[(c, i)] = r[(i, c)];
                }
            }
            let qr = r1t.qr();
            Some((qr.q(), qr.r()))
        } else {
            None
        };

        PivotedQr {
            packed: r,
            taus,
            perm,
            rank,
            cod,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn ncols(&self) -> usize {
        self.packed.ncols()
    }

    fn apply_qt(&self, b: &mut DVector<f64>) {
        let m = self.packed.nrows();
        for (j, &tau) in self.taus.iter().enumerate() {
            if tau == 0.0 {
                continue;
            }
            let mut w = b[j];
            for i in j + 1..m {
                w += self.packed[(i, j)] * b[i];
            }
            w *= tau;
            b[j] -= w;
            for i in j + 1..m {
                b[i] -= w * self.packed[(i, j)];
            }
        }
    }

    /// Minimum-norm least-squares solution of `A x ≈ b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let k = self.ncols();
        let mut c = b.clone();
        self.apply_qt(&mut c);
        let r = self.rank;
        let mut y = DVector::zeros(k);
        if r == 0 {
            return y;
        }
        match &self.cod {
            None => {
                for i in (0..k).rev() {
                    let mut acc = c[i];
                    for t in i + 1..k {
                        acc -= self.packed[(i, t)] * y[t];
                    }
                    y[i] = acc / self.packed[(i, i)];
                }
            }
            Some((q2, r2)) => {
                // R2' w = c[..r], forward substitution.
                let mut w = DVector::zeros(r);
                for i in 0..r {
                    let mut acc = c[i];
                    for t in 0..i {
                        acc -= r2[(t, i)] * w[t];
                    }
                    w[i] = acc / r2[(i, i)];
                }
                y = q2 * w;
            }
        }
        let mut x = DVector::zeros(k);
        for (j, &pj) in self.perm.iter().enumerate() {
            x[pj] = y[j];
        }
        x
    }
}

/// Weighted least squares `argmin Σ w_i (y_i − x_i'β)²`, minimum-norm on
/// rank deficiency. Returns the coefficients and the weighted RSS.
pub fn weighted_least_squares(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &DVector<f64>,
) -> (DVector<f64>, f64) {
    let sw = w.map(f64::sqrt);
    let a = scale_rows(x, &sw);
    let b = y.component_mul(&sw);
    let qr = PivotedQr::new(&a);
    let beta = qr.solve(&b);
    let rss = weighted_rss(x, y, w, &beta);
    (beta, rss)
}

pub fn weighted_rss(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>, beta: &DVector<f64>) -> f64 {
    let fit = x * beta;
    y.iter()
        .zip(fit.iter())
        .zip(w.iter())
        .map(|((yi, fi), wi)| wi * (yi - fi) * (yi - fi))
        .sum()
}

pub fn scale_rows(x: &DMatrix<f64>, s: &DVector<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for (i, si) in s.iter().enumerate() {
        out.row_mut(i).scale_mut(*si);
    }
    out
}

pub fn select_columns(x: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), cols.len(), |i, j| x[(i, cols[j])])
}

pub fn select_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)])
}

pub fn select_entries(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

/// Weighted cross-products of a regression problem, column-equilibrated so
/// the Gram diagonal is one wherever the column is nonzero. Subset RSS is
/// invariant to column scaling, so criteria computed here equal those on the
/// raw columns.
#[derive(Debug, Clone)]
pub struct GramSystem {
    pub gram: DMatrix<f64>,
    pub xty: DVector<f64>,
    pub yty: f64,
}

impl GramSystem {
    pub fn new(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>) -> Self {
        let sw = w.map(f64::sqrt);
        let a = scale_rows(x, &sw);
        let b = y.component_mul(&sw);
        let mut gram = a.transpose() * &a;
        let mut xty = a.transpose() * &b;
        let p = gram.nrows();
        let scale: Vec<f64> = (0..p)
            .map(|j| {
                let d = gram[(j, j)];
                if d > 0.0 {
                    1.0 / d.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        for i in 0..p {
            for j in 0..p {
                gram[(i, j)] *= scale[i] * scale[j];
            }
            xty[i] *= scale[i];
        }
        GramSystem {
            gram,
            xty,
            yty: b.norm_squared(),
        }
    }

    pub fn dim(&self) -> usize {
        self.gram.nrows()
    }

    /// RSS of the projection of the response onto the span of `subset`,
    /// via an incremental Cholesky in the given column order that skips
    /// numerically dependent columns.
    pub fn rss(&self, subset: &[usize]) -> f64 {
        let k = subset.len();
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
        let mut accepted: Vec<usize> = Vec::with_capacity(k);
        let mut z: Vec<f64> = Vec::with_capacity(k);
        for &j in subset {
            let mut row = Vec::with_capacity(accepted.len() + 1);
            for (m, &am) in accepted.iter().enumerate() {
                let mut v = self.gram[(j, am)];
                for (t, rt) in row.iter().enumerate() {
                    v -= rt * rows[m][t];
                }
                row.push(v / rows[m][m]);
            }
            let gjj = self.gram[(j, j)];
            let d = gjj - row.iter().map(|v| v * v).sum::<f64>();
            if !(d > GRAM_PIVOT_TOL * gjj) || d <= 0.0 {
                continue;
            }
            let ljj = d.sqrt();
            let mut zj = self.xty[j];
            for (t, rt) in row.iter().enumerate() {
                zj -= rt * z[t];
            }
            z.push(zj / ljj);
            row.push(ljj);
            rows.push(row);
            accepted.push(j);
        }
        (self.yty - z.iter().map(|v| v * v).sum::<f64>()).max(0.0)
    }
}

/// Ratio of extreme eigenvalues of a symmetric matrix (infinite if singular).
pub fn symmetric_condition(a: &DMatrix<f64>) -> f64 {
    let eig = a.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}
