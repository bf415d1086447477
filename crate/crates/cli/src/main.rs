use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use bss_core::io::{export_draws, subset_label, write_dataset};
use bss_core::pipeline::{
    fit_backend, load_data, prepare, run_pipeline, run_sweep, search_family, sweep_table, write_atomic, write_outputs,
    BackendConfig, RunConfig, RunReport,
};
use bss_core::SyntheticKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

const OUTPUT_ENV: &str = "BSS_OUTPUT_DIR";
const DEFAULT_OUTPUT: &str = "bss-output";

/// Subset selection and uncertainty quantification from posterior draws.
#[derive(Parser)]
#[command(name = "bss", version)]
struct Cli {
    /// Output directory; overrides the config file and $BSS_OUTPUT_DIR.
    #[arg(long, short = 'o', global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a synthetic dataset and write it with its ground truth.
    Generate(GenerateArgs),
    /// Fit the configured backend and export its draws with a manifest.
    Fit(RunArgs),
    /// Screen and search, writing the candidate family.
    Search(RunArgs),
    /// Run the full analysis and write the report and tables.
    Evaluate(RunArgs),
    /// Print a summary of an existing report.
    Report(ReportArgs),
    /// Repeat a synthetic configuration over independent replicates.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Gaussian,
    Binary,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long, value_enum)]
    kind: Option<Kind>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    /// Posterior draws for the conjugate backend.
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    m_k: Option<usize>,
    #[arg(long)]
    s_max: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, short = 'c')]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct ReportArgs {
    /// A report.json file, or a directory containing one.
    #[arg(long, short = 'i')]
    input: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 10)]
    replicates: usize,
}

fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_file(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let o = &args.overrides;
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.draws {
        match &mut cfg.backend {
            BackendConfig::Conjugate { draws, .. } => *draws = v,
            BackendConfig::Ingested { .. } => anyhow::bail!("--draws applies only to the conjugate backend"),
        }
    }
    if let Some(v) = o.folds {
        cfg.evaluation.folds = v;
    }
    if let Some(v) = o.eta {
        cfg.evaluation.eta = v;
    }
    if let Some(v) = o.epsilon {
        cfg.evaluation.epsilon = v;
    }
    if let Some(v) = o.m_k {
        cfg.search.m_k = v;
    }
    if let Some(v) = o.s_max {
        cfg.search.s_max = v;
    }
    Ok(cfg)
}

fn output_dir(cli: Option<&Path>, cfg: Option<&RunConfig>) -> PathBuf {
    cli.map(Path::to_path_buf)
        .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
        .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT))
}

fn write(dir: &Path, name: &str, body: &str) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_atomic(&dir.join(name), body.as_bytes())?;
    Ok(())
}

fn json<T: serde::Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn generate(args: &GenerateArgs, out: Option<&Path>) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::synthetic(100, 10, 1.0, SyntheticKind::Gaussian, 1),
    };
    if let bss_core::pipeline::DataSource::Synthetic { n, p, snr, kind } = &mut cfg.data {
        *n = args.n.unwrap_or(*n);
        *p = args.p.unwrap_or(*p);
        *snr = args.snr.unwrap_or(*snr);
        if let Some(k) = args.kind {
            *kind = match k {
                Kind::Gaussian => SyntheticKind::Gaussian,
                Kind::Binary => SyntheticKind::Binary,
            };
        }
    } else {
        anyhow::bail!("generate needs a synthetic data source");
    }
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    let (data, truth) = load_data(&cfg).context("stage `data` failed")?;
    let dir = output_dir(out, Some(&cfg));
    write(&dir, "data.csv", &write_dataset(&data, "y"))?;
    write(&dir, "truth.json", &json(&truth)?)?;
    say(&format!("wrote {} rows, {} columns to {}\n", data.n(), data.p(), dir.display()));
    Ok(())
}

fn fit(args: &RunArgs, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(args)?;
    cfg.validate().context("stage `config` failed")?;
    let (data, _) = load_data(&cfg).context("stage `data` failed")?;
    let (draws, _) = fit_backend(&cfg, &data).context("stage `fit` failed")?;
    let dir = output_dir(out, Some(&cfg));
    let manifest = export_draws(&draws, &dir, "draws")?;
    say(&format!("wrote {} draws of {} coefficients; manifest {}\n", draws.count(), draws.p(), manifest.display()));
    Ok(())
}

fn search(args: &RunArgs, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(args)?;
    let pre = prepare(&cfg)?;
    let family = search_family(&cfg, &pre)?;
    let dir = output_dir(out, Some(&cfg));
    let mut table = String::from("size,rank,indices,criterion\n");
    for (k, list) in family.by_size.iter().enumerate() {
        for (r, e) in list.iter().enumerate() {
            table.push_str(&format!("{k},{r},{},{}\n", subset_label(e.subset.indices()), e.criterion));
        }
    }
    write(&dir, "candidates.csv", &table)?;
    write(&dir, "candidate_family.json", &json(&family)?)?;
    say(&format!("{} candidate subsets up to size {}; written to {}\n", family.len(), family.max_size(), dir.display()));
    Ok(())
}

fn evaluate(args: &RunArgs, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(args)?;
    let run = run_pipeline(&cfg)?;
    let dir = output_dir(out, Some(&cfg));
    write_outputs(&run, &dir)?;
    say(&summarize(&run.report));
    say(&format!("outputs in {}\n", dir.display()));
    Ok(())
}

fn report(args: &ReportArgs, out: Option<&Path>) -> Result<()> {
    let mut path = args.input.clone().unwrap_or_else(|| output_dir(out, None));
    if path.is_dir() {
        path = path.join("report.json");
    }
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let rep: RunReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    say(&summarize(&rep));
    Ok(())
}

fn sweep(args: &SweepArgs, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(&args.run)?;
    let runs = run_sweep(&cfg, args.replicates)?;
    let rows: Vec<_> = runs.into_iter().map(|(r, _)| r).collect();
    let dir = output_dir(out, Some(&cfg));
    write(&dir, "sweep.csv", &sweep_table(&rows))?;
    write(&dir, "replicates.json", &json(&rows)?)?;
    say(&format!("{} replicates written to {}\n", rows.len(), dir.display()));
    Ok(())
}

fn summarize(r: &RunReport) -> String {
    let names = &r.data.column_names;
    let label = |s: &bss_core::Subset| s.indices().iter().map(|&j| names[j].as_str()).collect::<Vec<_>>().join(" ");
    let a = &r.acceptable_family;
    let mut s = format!(
        "n = {}, p = {}, loss = {:?}, {} candidates, {} acceptable (eta = {}, epsilon = {})\n",
        r.data.n,
        r.data.p,
        r.loss_kind,
        r.evaluated.len(),
        a.members.len(),
        a.eta,
        a.epsilon
    );
    if let Some(m) = &a.s_min {
        s.push_str(&format!("S_min   ({:2}): {}\n", m.len(), label(m)));
    }
    s.push_str(&format!("S_small ({:2}): {}\n", a.s_small.len(), label(&a.s_small)));
    if !r.importance.keystones.is_empty() {
        let k: Vec<&str> = r.importance.keystones.iter().map(|&j| names[j].as_str()).collect();
        s.push_str(&format!("keystones: {}\n", k.join(" ")));
    }
    for w in &r.warnings {
        s.push_str(&format!("warning: {w}\n"));
    }
    s
}

/// The error chain, skipping causes already spelled out by their parent.
fn render_error(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut prev = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !prev.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
        prev = msg;
    }
    out
}

/// Print to stdout, tolerating a closed pipe.
fn say(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = cli.output_dir.as_deref();
    let result = match &cli.command {
        Command::Generate(a) => generate(a, out),
        Command::Fit(a) => fit(a, out),
        Command::Search(a) => search(a, out),
        Command::Evaluate(a) => evaluate(a, out),
        Command::Report(a) => report(a, out),
        Command::Sweep(a) => sweep(a, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render_error(&e));
            ExitCode::FAILURE
        }
    }
}
