use std::path::Path;
use std::process::{Command, Output};

fn bss(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bss"))
        .args(args)
        .current_dir(dir)
        .env_remove("BSS_OUTPUT_DIR")
        .output()
        .expect("run bss")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const FILE_RUN: &str = r#"
seed = 4
[data]
source = "file"
path = "gen/data.csv"
response = "y"
add_intercept = false
[backend]
kind = "conjugate"
draws = 300
[evaluation]
folds = 5
"#;

#[test]
fn generate_fit_search_evaluate_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&bss(d, &["generate", "--n", "80", "--p", "8", "--seed", "3", "-o", "gen"]));
    assert!(d.join("gen/data.csv").is_file());
    assert!(d.join("gen/truth.json").is_file());
    std::fs::write(d.join("run.toml"), FILE_RUN).unwrap();

    ok(&bss(d, &["fit", "-c", "run.toml", "-o", "draws"]));
    let manifest = std::fs::read_to_string(d.join("draws/draws.toml")).unwrap();
    assert!(manifest.contains("likelihood = \"gaussian\""));

    let out = ok(&bss(d, &["search", "-c", "run.toml", "-o", "search"]));
    assert!(out.contains("candidate subsets"));
    assert!(std::fs::read_to_string(d.join("search/candidates.csv")).unwrap().starts_with("size,rank,indices,criterion"));

    let summary = ok(&bss(d, &["evaluate", "-c", "run.toml", "-o", "eval"]));
    assert!(summary.contains("S_small"));
    let report = ok(&bss(d, &["report", "-i", "eval"]));
    assert!(summary.starts_with(&report));

    // The exported draws reproduce the built-in run.
    std::fs::write(
        d.join("ingest.toml"),
        FILE_RUN.replace("kind = \"conjugate\"\ndraws = 300", "kind = \"ingested\"\nmanifest = \"draws/draws.toml\""),
    )
    .unwrap();
    let again = ok(&bss(d, &["evaluate", "-c", "ingest.toml", "-o", "eval2"]));
    assert_eq!(summary.lines().next(), again.lines().next());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&bss(d, &["generate", "--n", "60", "--p", "6", "-o", "gen"]));
    std::fs::write(d.join("run.toml"), FILE_RUN).unwrap();
    ok(&bss(d, &["evaluate", "-c", "run.toml", "-o", "a"]));
    ok(&bss(d, &["evaluate", "-c", "run.toml", "-o", "b"]));
    for f in ["report.json", "loss_draws.csv", "vi_matrix.csv"] {
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    ok(&bss(d, &["evaluate", "-c", "run.toml", "--seed", "5", "-o", "c"]));
    assert_ne!(std::fs::read(d.join("a/report.json")).unwrap(), std::fs::read(d.join("c/report.json")).unwrap());
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_bss"))
        .args(["generate", "--n", "30", "--p", "6"])
        .current_dir(dir.path())
        .env("BSS_OUTPUT_DIR", "from-env")
        .output()
        .unwrap();
    ok(&out);
    assert!(dir.path().join("from-env/data.csv").is_file());
}

#[test]
fn failures_exit_nonzero_with_stage() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = bss(d, &["evaluate", "-c", "absent.toml"]);
    assert!(!missing.status.success());

    std::fs::write(d.join("bad.toml"), "[data]\nsource = \"file\"\npath = \"nope.csv\"\nresponse = \"y\"\n").unwrap();
    let out = bss(d, &["evaluate", "-c", "bad.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage `data`"));

    std::fs::write(
        d.join("binary.toml"),
        "[data]\nsource = \"synthetic\"\nn = 40\np = 6\nsnr = 1.0\nkind = \"binary\"\n",
    )
    .unwrap();
    let out = bss(d, &["evaluate", "-c", "binary.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage `fit`"));

    std::fs::write(d.join("typo.toml"), "[data]\nsource = \"synthetic\"\nn = 40\np = 6\nsnr = 1.0\nsnrr = 2\n").unwrap();
    let out = bss(d, &["evaluate", "-c", "typo.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line"));
}

#[test]
fn sweep_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("sweep.toml"),
        "seed = 2\n[data]\nsource = \"synthetic\"\nn = 60\np = 8\nsnr = 1.0\n[backend]\nkind = \"conjugate\"\ndraws = 200\n[evaluation]\nfolds = 4\n",
    )
    .unwrap();
    ok(&bss(d, &["sweep", "-c", "sweep.toml", "--replicates", "2", "-o", "sw"]));
    let table = std::fs::read_to_string(d.join("sw/sweep.csv")).unwrap();
    assert!(table.lines().any(|l| l.starts_with("1,")));
    assert!(table.contains(",tpr,s_small,"));
}
