use bss_core::evaluate::{acceptable_family, SubsetLosses};
use bss_core::io::{parse_binary_matrix, write_binary_matrix};
use bss_core::{bba_search, exhaustive_search, keystones, vi_matrix, LossKind, Subset, Weights};
use bss_core::action::interval_rank;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn matrix(n: usize, p: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-3.0f64..3.0, n * p).prop_map(move |v| DMatrix::from_vec(n, p, v))
}

fn losses_table(pred: Vec<Vec<f64>>, emp: Vec<f64>, subsets: Vec<Subset>) -> SubsetLosses {
    SubsetLosses {
        loss_kind: LossKind::SquaredError,
        subsets,
        empirical: Some(emp.clone()),
        fold_empirical: emp.iter().map(|&e| vec![e]).collect(),
        fold_predictive_mean: pred.iter().map(|v| vec![v.iter().sum::<f64>() / v.len() as f64]).collect(),
        predictive: pred,
        dropped: Vec::new(),
        diagnostics: Vec::new(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bba_equals_exhaustive(x in matrix(20, 7), y in prop::collection::vec(-5.0f64..5.0, 20),
                             w in prop::collection::vec(0.1f64..3.0, 20), m_k in 1usize..6) {
        let y = DVector::from_vec(y);
        let w = Weights::new(DVector::from_vec(w)).unwrap();
        let a = bba_search(&x, &y, &w, m_k, &[]).unwrap();
        let b = exhaustive_search(&x, &y, &w, m_k, &[]).unwrap();
        prop_assert_eq!(a.by_size.len(), b.by_size.len());
        for (la, lb) in a.by_size.iter().zip(&b.by_size) {
            prop_assert_eq!(la.len(), lb.len());
            for (ea, eb) in la.iter().zip(lb) {
                prop_assert_eq!(&ea.subset, &eb.subset);
                prop_assert!((ea.criterion - eb.criterion).abs() <= 1e-9 * eb.criterion.abs().max(1.0));
            }
        }
    }

    #[test]
    fn subset_sorted_and_forced(v in prop::collection::btree_set(0usize..30, 1..10)) {
        let idx: Vec<usize> = v.iter().rev().copied().collect();
        let forced = vec![*v.iter().next().unwrap()];
        let s = Subset::new(idx, forced.clone()).unwrap();
        prop_assert!(s.indices().windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(s.forced(), &forced[..]);
        prop_assert!(Subset::new(vec![0, 0], vec![]).is_err());
        prop_assert!(Subset::new(vec![1], vec![2]).is_err());
    }

    #[test]
    fn interval_rank_bounds(m in 1usize..5000, level in 0.01f64..0.99) {
        let r = interval_rank(m, level);
        prop_assert!(r >= 1);
        prop_assert!(r <= m - r + 1);
    }

    #[test]
    fn importance_invariants(fam in prop::collection::vec(prop::collection::btree_set(0usize..8, 1..6), 1..12)) {
        let members: Vec<Subset> = fam.iter().map(|s| Subset::of(s.iter().copied().collect()).unwrap()).collect();
        let im = vi_matrix(&members, 8).unwrap();
        let m = im.to_matrix();
        for j in 0..8 {
            for l in 0..8 {
                prop_assert_eq!(m[(j, l)], m[(l, j)]);
                prop_assert!((0.0..=1.0).contains(&m[(j, l)]));
                prop_assert!(m[(j, l)] <= m[(j, j)].min(m[(l, l)]));
            }
        }
        for k in keystones(&im) {
            prop_assert_eq!(im.marginal(k), 1.0);
        }
    }

    #[test]
    fn families_nest_in_eta_and_epsilon(draws in prop::collection::vec(prop::collection::vec(0.5f64..2.0, 30), 2..8),
                                        emp_seed in prop::collection::vec(0.5f64..2.0, 8)) {
        let k = draws.len();
        let subsets: Vec<Subset> = (0..k).map(|j| Subset::of((0..=j).collect()).unwrap()).collect();
        let losses = losses_table(draws, emp_seed[..k].to_vec(), subsets);
        let etas = [0.0, 1.0, 5.0];
        let eps = [0.01, 0.1, 0.2];
        for (i, &e) in etas.iter().enumerate() {
            for (j, &q) in eps.iter().enumerate() {
                let f = acceptable_family(&losses, e, q).unwrap();
                prop_assert!(f.contains(f.s_min.as_ref().unwrap()));
                prop_assert!(f.s_small.len() <= f.s_min.as_ref().unwrap().len());
                if i + 1 < etas.len() {
                    let g = acceptable_family(&losses, etas[i + 1], q).unwrap();
                    prop_assert!(f.members.iter().all(|s| g.contains(s)));
                }
                if j + 1 < eps.len() {
                    let g = acceptable_family(&losses, e, eps[j + 1]).unwrap();
                    prop_assert!(g.members.iter().all(|s| f.contains(s)));
                }
            }
        }
    }

    #[test]
    fn binary_matrix_round_trip(m in matrix(5, 3)) {
        let bytes = write_binary_matrix(&m);
        prop_assert_eq!(parse_binary_matrix(&bytes).unwrap(), m);
    }
}
