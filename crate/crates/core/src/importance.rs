//! Inclusion-based (co-)variable importance over an acceptable family.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::action::Subset;
use crate::error::{Error, Result};

pub const DEFAULT_REDUNDANCY_HI: f64 = 0.3;
pub const DEFAULT_REDUNDANCY_LO: f64 = 0.1;
/// Report labels for marginal importance tiers.
pub const TIER_MANY: f64 = 0.7;
pub const TIER_SOME: f64 = 0.3;

/// `VI(j, l)`: share of family members containing both `j` and `l`, kept
/// as integer counts over the family size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMatrix {
    pub counts: Vec<Vec<usize>>,
    pub family_size: usize,
}

impl ImportanceMatrix {
    pub fn p(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, j: usize, l: usize) -> f64 {
        self.counts[j][l] as f64 / self.family_size as f64
    }

    pub fn marginal(&self, j: usize) -> f64 {
        self.get(j, j)
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.p(), self.p(), |j, l| self.get(j, l))
    }
}

pub fn vi_matrix(members: &[Subset], p: usize) -> Result<ImportanceMatrix> {
    if members.is_empty() {
        return Err(Error::input("importance needs a nonempty family"));
    }
    let mut counts = vec![vec![0usize; p]; p];
    for s in members {
        if let Some(&j) = s.indices().last() {
            if j >= p {
                return Err(Error::dim(format!("subset {s} out of range for {p} covariates")));
            }
        }
        for &j in s.indices() {
            for &l in s.indices() {
                counts[j][l] += 1;
            }
        }
    }
    Ok(ImportanceMatrix {
        counts,
        family_size: members.len(),
    })
}

/// Covariates present in every member.
pub fn keystones(im: &ImportanceMatrix) -> Vec<usize> {
    (0..im.p()).filter(|&j| im.counts[j][j] == im.family_size).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundantPair {
    pub j: usize,
    pub l: usize,
    pub vi_j: f64,
    pub vi_l: f64,
    pub vi_joint: f64,
}

/// Pairs that are each often included yet rarely included together:
/// `VI(j), VI(l) ≥ hi` and `VI(j, l) ≤ lo`, sorted by joint importance.
pub fn redundancy_pairs(im: &ImportanceMatrix, hi: f64, lo: f64) -> Result<Vec<RedundantPair>> {
    if !(0.0 <= lo && lo <= hi && hi.is_finite()) {
        return Err(Error::input(format!("need 0 <= lo <= hi, got lo = {lo}, hi = {hi}")));
    }
    let mut out = Vec::new();
    for j in 0..im.p() {
        for l in (j + 1)..im.p() {
            let (a, b, c) = (im.marginal(j), im.marginal(l), im.get(j, l));
            if a >= hi && b >= hi && c <= lo {
                out.push(RedundantPair {
                    j,
                    l,
                    vi_j: a,
                    vi_l: b,
                    vi_joint: c,
                });
            }
        }
    }
    out.sort_by(|x, y| x.vi_joint.total_cmp(&y.vi_joint).then((x.j, x.l).cmp(&(y.j, y.l))));
    Ok(out)
}

/// `"keystone"`, `"many"` (> 70%), `"some"` (> 30%) or `"few"`.
pub fn tier_label(vi: f64, is_keystone: bool) -> &'static str {
    if is_keystone {
        "keystone"
    } else if vi > TIER_MANY {
        "many"
    } else if vi > TIER_SOME {
        "some"
    } else {
        "few"
    }
}
