mod support;

use bss_core::evaluate::{assemble_losses, d_tilde_draws, score_fold, FoldData, FoldDiagnostics};
use bss_core::{acceptable_family, best_subset, LossKind, Subset, Weights};
use nalgebra::{DMatrix, DVector};
use support::sir_vs_refit;

fn fold(x_train: &[f64], target: &[f64], x_val: &[f64], observed: f64, draws: &[f64]) -> FoldData {
    let nt = target.len();
    FoldData {
        x_train: DMatrix::from_row_slice(nt, 2, x_train),
        target_train: DVector::from_column_slice(target),
        w_train: Weights::uniform(nt),
        x_val: DMatrix::from_row_slice(1, 2, x_val),
        observed_val: DVector::from_element(1, observed),
        ytilde_val: DMatrix::from_column_slice(draws.len(), 1, draws),
    }
}

fn diag(k: usize) -> FoldDiagnostics {
    FoldDiagnostics {
        fold: k,
        ess: 2.0,
        sir_seed: 0,
        predictive_seed: 0,
        warning: None,
    }
}

#[test]
fn two_fold_instance_by_hand() {
    // Fold A: intercept-only action is 2, the line is 1 + x; validation x = 3.
    let a = fold(&[1., 0., 1., 1., 1., 2.], &[1., 2., 3.], &[1., 3.], 5.0, &[4.0, 6.0]);
    // Fold B: intercept-only action is 1, the line is x; validation x = 1.
    let b = fold(&[1., 0., 1., 2.], &[0., 2.], &[1., 1.], 2.0, &[1.0, 3.0]);
    let subsets = vec![Subset::of(vec![0]).unwrap(), Subset::of(vec![0, 1]).unwrap()];
    let per_fold: Vec<Vec<_>> = [&a, &b]
        .iter()
        .map(|f| subsets.iter().map(|s| score_fold(f, s, LossKind::SquaredError)).collect())
        .collect();

    let expect = [
        // (fold, subset) -> (empirical, predictive draws)
        ((0, 0), (9.0, [4.0, 16.0])),
        ((0, 1), (1.0, [0.0, 4.0])),
        ((1, 0), (1.0, [0.0, 4.0])),
        ((1, 1), (1.0, [0.0, 4.0])),
    ];
    for ((k, j), (emp, pred)) in expect {
        let sc = per_fold[k][j].as_ref().unwrap();
        assert!((sc.empirical - emp).abs() < 1e-12, "fold {k} subset {j}");
        for (g, w) in sc.predictive.iter().zip(pred) {
            assert!((g - w).abs() < 1e-12, "fold {k} subset {j}: {g} vs {w}");
        }
    }

    let losses = assemble_losses(LossKind::SquaredError, &subsets, per_fold, vec![diag(0), diag(1)]);
    let emp = losses.empirical().unwrap();
    assert!((emp[0] - 5.0).abs() < 1e-12 && (emp[1] - 1.0).abs() < 1e-12);
    let close = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(u, v)| (u - v).abs() < 1e-12);
    assert!(close(&losses.predictive[0], &[2.0, 10.0]));
    assert!(close(&losses.predictive[1], &[0.0, 4.0]));
    assert!(close(&losses.fold_predictive_mean[0], &[10.0, 2.0]));
    assert_eq!(best_subset(&losses).unwrap(), subsets[1]);

    // The zero reference loss on draw 1 is excluded; draw 2 gives +150%.
    let d = d_tilde_draws(&losses, 1, 0);
    assert_eq!(d.excluded, 1);
    assert!(close(&d.values, &[150.0]));
    let fam = acceptable_family(&losses, 0.0, 0.1).unwrap();
    assert_eq!(fam.members, vec![subsets[1].clone()]);
    let wide = acceptable_family(&losses, 200.0, 0.1).unwrap();
    assert_eq!(wide.members.len(), 2);
    assert_eq!(wide.s_small, subsets[0]);
}

#[test]
fn sir_tracks_exact_refit_small() {
    for (c, e) in sir_vs_refit(100, 4, 4000, 10, 21) {
        assert!(c > 0.99 && e < 0.05, "corr {c}, rel rmse {e}");
    }
}
