mod support;

use bss_core::io::write_dataset;
use bss_core::pipeline::{
    run_pipeline, write_outputs, BackendConfig, DataSource, EvaluationMode, RunConfig, TargetsConfig,
};
use bss_core::{generate_synthetic, LossKind, SyntheticKind};
use bss_core::backend::FunctionalSpec;
use support::*;

fn small(seed: u64) -> RunConfig {
    let mut c = RunConfig::synthetic(120, 12, 1.0, SyntheticKind::Gaussian, seed);
    c.backend = BackendConfig::Conjugate {
        draws: 400,
        prior: Default::default(),
    };
    c
}

#[test]
fn seeded_runs_are_byte_identical() {
    let a = run_pipeline(&small(5)).unwrap();
    let b = run_pipeline(&small(5)).unwrap();
    assert_eq!(a.report.to_json(), b.report.to_json());
    assert_eq!(a.files(), b.files());
    let c = run_pipeline(&small(6)).unwrap();
    assert_ne!(a.report.to_json(), c.report.to_json());
}

#[test]
fn ingested_draws_reproduce_builtin_backend() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = generate_synthetic(100, 10, 1.0, SyntheticKind::Gaussian, 8).unwrap();
    std::fs::write(dir.path().join("data.csv"), write_dataset(&data, "y")).unwrap();
    let file = DataSource::File {
        path: dir.path().join("data.csv"),
        response: "y".into(),
        response_kind: bss_core::backend::ResponseKind::Continuous,
        add_intercept: false,
    };
    let mut builtin = small(3);
    builtin.data = file.clone();
    let (d, _) = bss_core::pipeline::load_data(&builtin).unwrap();
    let (draws, _) = bss_core::pipeline::fit_backend(&builtin, &d).unwrap();
    let manifest = write_manifest(&draws, dir.path());

    let mut ingested = builtin.clone();
    ingested.backend = BackendConfig::Ingested { manifest };
    let a = run_pipeline(&builtin).unwrap().report;
    let b = run_pipeline(&ingested).unwrap().report;
    assert_eq!(a.evaluated, b.evaluated);
    assert_eq!(a.acceptable_family, b.acceptable_family);
    assert_eq!(a.actions, b.actions);
    assert_eq!(a.importance, b.importance);
}

#[test]
fn threshold_functional_switches_to_cross_entropy() {
    let mut c = small(9);
    c.functional = FunctionalSpec::Threshold { tau: 0.0 };
    let out = run_pipeline(&c).unwrap();
    assert_eq!(out.report.loss_kind, LossKind::CrossEntropy);
    let m = out.report.metrics.as_ref().unwrap();
    assert!(m.cross_entropy_of("s_small").unwrap().is_finite());
    assert!(out.report.baseline.is_none());
}

#[test]
fn binary_response_needs_ingested_draws() {
    let c = RunConfig::synthetic(100, 10, 1.0, SyntheticKind::Binary, 2);
    let err = run_pipeline(&c).unwrap_err();
    assert_eq!(err.stage(), Some("fit"));
}

#[test]
fn binary_response_with_logistic_draws() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = RunConfig::synthetic(150, 10, 1.0, SyntheticKind::Binary, 4);
    let (data, _) = bss_core::pipeline::load_data(&c).unwrap();
    let draws = laplace_logistic_draws(&data, 400, 25.0, 1);
    c.backend = BackendConfig::Ingested {
        manifest: write_manifest(&draws, dir.path()),
    };
    let out = run_pipeline(&c).unwrap();
    assert_eq!(out.report.loss_kind, LossKind::CrossEntropy);
    assert!(out.report.acceptable_family.contains(out.report.acceptable_family.s_min.as_ref().unwrap()));
    assert!(out.report.metrics.as_ref().unwrap().cross_entropy_of("full").is_some());
}

#[test]
fn new_covariates_mode() {
    let dir = tempfile::tempdir().unwrap();
    let (other, _) = generate_synthetic(40, 12, 1.0, SyntheticKind::Gaussian, 77).unwrap();
    // Targets omit the intercept column; it is added back.
    let names: Vec<String> = other.column_names()[1..].to_vec();
    let m = other.x().columns(1, 12).into_owned();
    std::fs::write(dir.path().join("targets.csv"), bss_core::io::write_delimited_matrix(&names, &m)).unwrap();
    let mut c = small(10);
    c.targets = Some(TargetsConfig {
        path: dir.path().join("targets.csv"),
    });
    let out = run_pipeline(&c).unwrap();
    let r = &out.report;
    assert_eq!(r.mode, EvaluationMode::NewCovariates);
    assert_eq!(r.data.targets, 40);
    assert!(r.acceptable_family.s_min.is_none());
    assert!(r.metrics.is_none());
    assert!(r.evaluated.iter().all(|e| e.empirical.is_none()));
    assert!(r.acceptable_family.contains(&r.acceptable_family.reference));
}

#[test]
fn outputs_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_pipeline(&small(12)).unwrap();
    write_outputs(&out, dir.path()).unwrap();
    for f in ["report.json", "subsets.csv", "loss_table.csv", "loss_draws.csv", "vi_matrix.csv", "acceptable_family.csv"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let text = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let back: bss_core::pipeline::RunReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back.to_json(), text);
}

#[test]
fn loss_table_scan_gives_s_min() {
    let out = run_pipeline(&small(13)).unwrap();
    let subsets = bss_core::io::subsets_table(&out.losses);
    let meta: Vec<(usize, String)> = subsets
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1].parse().unwrap(), f[2].to_string())
        })
        .collect();
    let mut best: Option<(f64, usize, String)> = None;
    for line in bss_core::io::loss_table(&out.losses).lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f[1] != "all" || f[2] != "empirical" {
            continue;
        }
        let id: usize = f[0].parse().unwrap();
        let e: f64 = f[3].parse().unwrap();
        let (k, label) = &meta[id];
        let key = (e, *k, label.clone());
        let better = match &best {
            None => true,
            Some(b) => key.0 < b.0 || (key.0 == b.0 && (key.1 < b.1 || (key.1 == b.1 && key.2 < b.2))),
        };
        if better {
            best = Some(key);
        }
    }
    let s_min = out.report.acceptable_family.s_min.as_ref().unwrap();
    assert_eq!(best.unwrap().2, bss_core::io::subset_label(s_min.indices()));
}
