//! End-to-end runs: data, posterior draws, point predictions, screening and
//! search, out-of-sample evaluation, acceptable family, importance and
//! predictive-action uncertainty, plus the classical baseline and
//! truth-based metrics for synthetic data.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::action::{
    interval_estimate, logistic_action, predictive_action_draws, wls_action, Interval, LossKind, Subset, WeightSpec,
    Weights, IRLS_JITTER,
};
use crate::backend::{
    fit_conjugate_gaussian, logistic, point_predictions, sample_posterior, sample_predictive, Dataset,
    FunctionalSpec, LikelihoodSpec, ModelConfig, PointPredictions, PosteriorDraws, PredictionKind, PredictiveDraws,
    ResponseKind,
};
use crate::error::{Error, Result, StageExt};
use crate::evaluate::{
    acceptable_family, make_folds, newx_family_from_losses, out_of_sample_losses, predictive_losses_newx,
    AcceptableFamily, DroppedSubset, EvaluationConfig, FoldDiagnostics, SubsetLosses, DEFAULT_EPSILON, DEFAULT_ETA,
    DEFAULT_FOLDS,
};
use crate::importance::{
    keystones, redundancy_pairs, tier_label, vi_matrix, RedundantPair, DEFAULT_REDUNDANCY_HI, DEFAULT_REDUNDANCY_LO,
};
use crate::io;
use crate::rng::derive_seed;
use crate::search::{
    candidate_family_classification, candidate_family_regression, CandidateFamily, DEFAULT_M_K, DEFAULT_S_MAX,
};
use crate::synthetic::{generate_synthetic, SyntheticKind, SyntheticTruth};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_DRAWS: usize = 1000;
pub const DEFAULT_INTERVAL_LEVEL: f64 = 0.9;
pub const DEFAULT_SEED: u64 = 1;
pub const RMSE_QUANTILES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

// Seed streams, one per random stage.
const STREAM_DATA: u64 = 1;
const STREAM_FIT: u64 = 2;
const STREAM_PREDICTIVE: u64 = 3;
const STREAM_FOLDS: u64 = 4;
const STREAM_EVALUATION: u64 = 5;
const STREAM_REPLICATE: u64 = 1000;

fn default_true() -> bool {
    true
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

fn default_synthetic_kind() -> SyntheticKind {
    SyntheticKind::Gaussian
}

fn default_response_kind() -> ResponseKind {
    ResponseKind::Continuous
}

fn default_draws() -> usize {
    DEFAULT_DRAWS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        n: usize,
        p: usize,
        snr: f64,
        #[serde(default = "default_synthetic_kind")]
        kind: SyntheticKind,
    },
    File {
        path: PathBuf,
        response: String,
        #[serde(default = "default_response_kind")]
        response_kind: ResponseKind,
        #[serde(default = "default_true")]
        add_intercept: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    Conjugate {
        #[serde(default = "default_draws")]
        draws: usize,
        #[serde(default)]
        prior: ModelConfig,
    },
    /// Externally produced draws described by a manifest.
    Ingested { manifest: PathBuf },
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Conjugate {
            draws: DEFAULT_DRAWS,
            prior: ModelConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub s_max: usize,
    pub m_k: usize,
    pub forced: Vec<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            s_max: DEFAULT_S_MAX,
            m_k: DEFAULT_M_K,
            forced: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationParams {
    pub folds: usize,
    pub eta: f64,
    pub epsilon: f64,
    /// Resampled draws per fold; defaults to half the posterior draws.
    pub s_tilde: Option<usize>,
    pub interval_level: f64,
    pub sensitivity_eta: Vec<f64>,
    pub sensitivity_epsilon: Vec<f64>,
    pub redundancy_hi: f64,
    pub redundancy_lo: f64,
    /// Also summarize the full-subset predictive action.
    pub full_action: bool,
}

impl Default for EvaluationParams {
    fn default() -> Self {
        EvaluationParams {
            folds: DEFAULT_FOLDS,
            eta: DEFAULT_ETA,
            epsilon: DEFAULT_EPSILON,
            s_tilde: None,
            interval_level: DEFAULT_INTERVAL_LEVEL,
            sensitivity_eta: vec![0.0, 1.0, 5.0],
            sensitivity_epsilon: vec![0.01, 0.1, 0.2],
            redundancy_hi: DEFAULT_REDUNDANCY_HI,
            redundancy_lo: DEFAULT_REDUNDANCY_LO,
            full_action: true,
        }
    }
}

/// New target covariates: a delimited file with the dataset's covariate
/// columns (the intercept is added when the dataset has one and the file
/// does not).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetsConfig {
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub data: DataSource,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub functional: FunctionalSpec,
    #[serde(default)]
    pub weights: WeightSpec,
    /// Defaults to cross-entropy for binary responses or threshold
    /// functionals, squared error otherwise.
    #[serde(default)]
    pub loss: Option<LossKind>,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub evaluation: EvaluationParams,
    #[serde(default)]
    pub targets: Option<TargetsConfig>,
    /// Run the AIC subset-selection baseline (continuous responses only).
    #[serde(default = "default_true")]
    pub baseline: bool,
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
}

pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    toml::from_str(text).map_err(|e| {
        let line = e.span().map_or(0, |s| text[..s.start.min(text.len())].lines().count().max(1));
        Error::parse(line, e.message().to_string())
    })
}

impl RunConfig {
    /// Synthetic-data configuration with every other setting at its default.
    pub fn synthetic(n: usize, p: usize, snr: f64, kind: SyntheticKind, seed: u64) -> Self {
        RunConfig {
            seed,
            data: DataSource::Synthetic { n, p, snr, kind },
            backend: BackendConfig::default(),
            functional: FunctionalSpec::Identity,
            weights: WeightSpec::Uniform,
            loss: None,
            search: SearchConfig::default(),
            evaluation: EvaluationParams::default(),
            targets: None,
            baseline: true,
            output_dir: None,
        }
    }

    /// Read a TOML config; relative paths inside it resolve against the
    /// config file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = parse_run_config(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DataSource::File { path, .. } = &mut cfg.data {
            fix(path);
        }
        if let BackendConfig::Ingested { manifest } = &mut cfg.backend {
            fix(manifest);
        }
        if let Some(t) = &mut cfg.targets {
            fix(&mut t.path);
        }
        if let Some(o) = &mut cfg.output_dir {
            fix(o);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.evaluation;
        if e.folds < 2 {
            return Err(Error::input("evaluation.folds must be at least 2"));
        }
        if !(e.eta >= 0.0) || !(0.0..=1.0).contains(&e.epsilon) {
            return Err(Error::input("need eta >= 0 and epsilon in [0, 1]"));
        }
        if !(e.interval_level > 0.0 && e.interval_level < 1.0) {
            return Err(Error::input("interval_level must lie in (0, 1)"));
        }
        if e.sensitivity_eta.iter().any(|v| !(*v >= 0.0)) || e.sensitivity_epsilon.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::input("sensitivity grid values out of range"));
        }
        if !(0.0 <= e.redundancy_lo && e.redundancy_lo <= e.redundancy_hi) {
            return Err(Error::input("need 0 <= redundancy_lo <= redundancy_hi"));
        }
        if self.search.m_k == 0 || self.search.s_max == 0 {
            return Err(Error::input("search.m_k and search.s_max must be positive"));
        }
        if let BackendConfig::Conjugate { draws, prior } = &self.backend {
            prior.validate()?;
            if *draws < 2 {
                return Err(Error::input("backend.draws must be at least 2"));
            }
        }
        self.functional.validate()
    }

    pub fn seeds(&self) -> SeedLog {
        SeedLog {
            base: self.seed,
            data: derive_seed(self.seed, STREAM_DATA),
            fit: derive_seed(self.seed, STREAM_FIT),
            predictive: derive_seed(self.seed, STREAM_PREDICTIVE),
            folds: derive_seed(self.seed, STREAM_FOLDS),
            evaluation: derive_seed(self.seed, STREAM_EVALUATION),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedLog {
    pub base: u64,
    pub data: u64,
    pub fit: u64,
    pub predictive: u64,
    pub folds: u64,
    pub evaluation: u64,
}

/// Stage 1: data (synthetic truth is returned alongside when available).
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Option<SyntheticTruth>)> {
    let r = match &cfg.data {
        DataSource::Synthetic { n, p, snr, kind } => {
            let (d, t) = generate_synthetic(*n, *p, *snr, *kind, cfg.seeds().data)?;
            (d, Some(t))
        }
        DataSource::File {
            path,
            response,
            response_kind,
            add_intercept,
        } => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            (io::parse_dataset(&text, response, *add_intercept, *response_kind)?, None)
        }
    };
    Ok(r)
}

/// Stage 2: posterior draws (and predictive draws if the manifest has them).
pub fn fit_backend(cfg: &RunConfig, data: &Dataset) -> Result<(PosteriorDraws, Option<PredictiveDraws>)> {
    match &cfg.backend {
        BackendConfig::Conjugate { draws, prior } => {
            if data.response_kind() != ResponseKind::Continuous {
                return Err(Error::Unsupported(
                    "the conjugate Gaussian backend needs a continuous response; supply ingested draws".into(),
                ));
            }
            let model = fit_conjugate_gaussian(data, prior)?;
            Ok((sample_posterior(&model, *draws, cfg.seeds().fit)?, None))
        }
        BackendConfig::Ingested { manifest } => {
            let ing = io::ingest_draws(manifest)?;
            if ing.posterior.p() != data.p() {
                return Err(Error::dim(format!(
                    "ingested draws have {} coefficients, data has {} covariates",
                    ing.posterior.p(),
                    data.p()
                )));
            }
            Ok((ing.posterior, ing.predictive))
        }
    }
}

fn load_targets(t: &TargetsConfig, data: &Dataset) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(&t.path).map_err(|e| Error::io(&t.path, e))?;
    let m = io::parse_delimited_matrix(&text)?;
    let icpt = data.intercept_column();
    let cols: Vec<Option<usize>> = data
        .column_names()
        .iter()
        .enumerate()
        .map(|(j, name)| match m.names.iter().position(|n| n == name) {
            Some(c) => Ok(Some(c)),
            None if Some(j) == icpt => Ok(None),
            None => Err(Error::input(format!("target covariates lack column `{name}`"))),
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(m.data.nrows(), data.p(), |i, j| cols[j].map_or(1.0, |c| m.data[(i, c)])))
}

fn resolve_loss(cfg: &RunConfig, data: &Dataset, draws: &PosteriorDraws) -> LossKind {
    cfg.loss.unwrap_or({
        let binary = cfg.functional.is_binary()
            || data.response_kind() == ResponseKind::Binary
            || draws.likelihood() == Some(LikelihoodSpec::BernoulliLogit);
        if binary {
            LossKind::CrossEntropy
        } else {
            LossKind::SquaredError
        }
    })
}

fn as_kind(p: PointPredictions, loss: LossKind) -> Result<PointPredictions> {
    match (loss, p.kind) {
        (LossKind::CrossEntropy, PredictionKind::Continuous) => p.into_probability(),
        (LossKind::SquaredError, PredictionKind::Probability) => PointPredictions::continuous(p.values),
        _ => Ok(p),
    }
}

/// Point action of a subset on the full targets.
fn point_action(x: &DMatrix<f64>, target: &PointPredictions, w: &Weights, s: &Subset, loss: LossKind) -> DVector<f64> {
    let a = match loss {
        LossKind::SquaredError => wls_action(x, &target.values, w, s),
        LossKind::CrossEntropy => logistic_action(x, &target.values, w, s, IRLS_JITTER),
    };
    a.dense(x.ncols())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluationMode {
    CrossValidated,
    NewCovariates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub n: usize,
    pub p: usize,
    pub column_names: Vec<String>,
    pub response_kind: ResponseKind,
    pub intercept: Option<usize>,
    pub targets: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatedSubset {
    pub id: usize,
    pub subset: Subset,
    pub empirical: Option<f64>,
    pub predictive_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityCell {
    pub eta: f64,
    pub epsilon: f64,
    pub members: Vec<usize>,
    pub s_small: Subset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateImportance {
    pub index: usize,
    pub name: String,
    pub vi: f64,
    pub tier: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub family_size: usize,
    pub counts: Vec<Vec<usize>>,
    pub keystones: Vec<usize>,
    pub redundancy: Vec<RedundantPair>,
    pub covariates: Vec<CovariateImportance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSummary {
    pub label: String,
    pub subset: Subset,
    /// Action on the point predictions, all `p` coefficients.
    pub point: Vec<f64>,
    /// Mean of the per-draw predictive actions.
    pub draw_mean: Vec<f64>,
    pub level: f64,
    pub intervals: Vec<Interval>,
    pub failed_draws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberAction {
    pub subset: Subset,
    pub coefficients: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSize {
    pub k: usize,
    pub subset: Subset,
    pub rss: f64,
    pub aic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub subset: Subset,
    pub aic: f64,
    pub coefficients: Vec<f64>,
    pub per_size: Vec<BaselineSize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledValue {
    pub label: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRates {
    pub label: String,
    pub tpr: f64,
    pub tnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalMetrics {
    pub label: String,
    pub level: f64,
    pub coverage: f64,
    pub mean_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    /// RMSE against `y*` at `q = 0, 0.25, 0.5, 0.75, 1` across family members.
    pub family_rmse_quantiles: Option<Vec<f64>>,
    pub rmse: Vec<LabeledValue>,
    pub selection: Vec<SelectionRates>,
    pub intervals: Vec<IntervalMetrics>,
    pub cross_entropy: Vec<LabeledValue>,
}

impl MetricsTable {
    fn find<'a>(v: &'a [LabeledValue], label: &str) -> Option<f64> {
        v.iter().find(|x| x.label == label).map(|x| x.value)
    }

    pub fn rmse_of(&self, label: &str) -> Option<f64> {
        Self::find(&self.rmse, label)
    }

    pub fn cross_entropy_of(&self, label: &str) -> Option<f64> {
        Self::find(&self.cross_entropy, label)
    }

    pub fn selection_of(&self, label: &str) -> Option<&SelectionRates> {
        self.selection.iter().find(|x| x.label == label)
    }

    pub fn intervals_of(&self, label: &str) -> Option<&IntervalMetrics> {
        self.intervals.iter().find(|x| x.label == label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config: RunConfig,
    pub seeds: SeedLog,
    pub data: DataSummary,
    pub mode: EvaluationMode,
    pub loss_kind: LossKind,
    pub posterior_draws: usize,
    pub candidate_family: CandidateFamily,
    pub evaluated: Vec<EvaluatedSubset>,
    pub dropped: Vec<DroppedSubset>,
    pub folds: Vec<FoldDiagnostics>,
    pub acceptable_family: AcceptableFamily,
    pub sensitivity: Vec<SensitivityCell>,
    pub importance: ImportanceReport,
    pub actions: Vec<ActionSummary>,
    pub member_actions: Vec<MemberAction>,
    pub baseline: Option<BaselineResult>,
    pub metrics: Option<MetricsTable>,
    pub warnings: Vec<String>,
}

impl RunReport {
    pub fn action(&self, label: &str) -> Option<&ActionSummary> {
        self.actions.iter().find(|a| a.label == label)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Everything a run produces: the report, flat tables, and the in-memory
/// inputs needed for further analysis.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub losses: SubsetLosses,
    pub data: Dataset,
    pub truth: Option<SyntheticTruth>,
}

impl RunOutput {
    /// `(file name, contents)` for every artifact, report first.
    pub fn files(&self) -> Vec<(String, String)> {
        let names = self.data.column_names();
        let mut out = vec![
            ("report.json".to_string(), self.report.to_json()),
            ("subsets.csv".to_string(), io::subsets_table(&self.losses)),
            ("loss_table.csv".to_string(), io::loss_table(&self.losses)),
            ("loss_draws.csv".to_string(), io::loss_draws_table(&self.losses)),
        ];
        let im = crate::importance::ImportanceMatrix {
            counts: self.report.importance.counts.clone(),
            family_size: self.report.importance.family_size,
        };
        out.push(("vi_matrix.csv".to_string(), io::vi_table(&im, names)));
        let mut fam = String::from("subset_id,indices,probability\n");
        for (s, p) in self.report.acceptable_family.members.iter().zip(&self.report.acceptable_family.probabilities) {
            let id = self.losses.position(s).expect("members come from the loss table");
            fam.push_str(&format!("{id},{},{p}\n", io::subset_label(s.indices())));
        }
        out.push(("acceptable_family.csv".to_string(), fam));
        for a in &self.report.actions {
            let mean = DVector::from_column_slice(&a.draw_mean);
            out.push((format!("coefficients_{}.csv", a.label), io::coefficient_table(names, &mean, &a.intervals)));
        }
        out
    }
}

/// Write to a temporary sibling, then rename over the target.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    std::fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_outputs(out: &RunOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    // Tables first, so a present report.json implies a complete output set.
    let files = out.files();
    for (name, body) in files.iter().skip(1) {
        write_atomic(&dir.join(name), body.as_bytes())?;
    }
    write_atomic(&dir.join(&files[0].0), files[0].1.as_bytes())
}

/// Inputs shared by every stage after fitting.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub data: Dataset,
    pub truth: Option<SyntheticTruth>,
    pub draws: PosteriorDraws,
    pub predictive: PredictiveDraws,
    pub xtilde: DMatrix<f64>,
    pub mode: EvaluationMode,
    pub loss: LossKind,
    pub point: PointPredictions,
    pub weights: Weights,
    pub warnings: Vec<String>,
}

/// Data, draws, targets and point predictions.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate().stage("config")?;
    let seeds = cfg.seeds();
    let (data, truth) = load_data(cfg).stage("data")?;
    let (draws, ingested_pred) = fit_backend(cfg, &data).stage("fit")?;
    let loss = resolve_loss(cfg, &data, &draws);
    let mut warnings = Vec::new();

    let (xtilde, mode) = match &cfg.targets {
        Some(t) => (load_targets(t, &data).stage("predict")?, EvaluationMode::NewCovariates),
        None => (data.x().clone(), EvaluationMode::CrossValidated),
    };
    let predictive = match ingested_pred {
        Some(p) if p.n_targets() == xtilde.nrows() => p,
        Some(p) => {
            warnings.push(format!(
                "ingested predictive draws cover {} targets, expected {}; simulating instead",
                p.n_targets(),
                xtilde.nrows()
            ));
            sample_predictive(&draws, &xtilde, seeds.predictive).stage("predict")?
        }
        None => sample_predictive(&draws, &xtilde, seeds.predictive).stage("predict")?,
    };
    let point = point_predictions(&predictive, &cfg.functional)
        .and_then(|p| as_kind(p, loss))
        .stage("predict")?;
    let weights = cfg.weights.realize(&xtilde).stage("predict")?;
    Ok(Prepared {
        data,
        truth,
        draws,
        predictive,
        xtilde,
        mode,
        loss,
        point,
        weights,
        warnings,
    })
}

/// Screening and branch-and-bound search on the point predictions.
pub fn search_family(cfg: &RunConfig, pre: &Prepared) -> Result<CandidateFamily> {
    let s = &cfg.search;
    match pre.loss {
        LossKind::SquaredError => candidate_family_regression(&pre.xtilde, &pre.point, &pre.weights, s.m_k, s.s_max, &s.forced),
        LossKind::CrossEntropy => {
            candidate_family_classification(&pre.xtilde, &pre.point, &pre.weights, s.m_k, s.s_max, &s.forced)
        }
    }
    .stage("search")
}

/// The full decision analysis.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunOutput> {
    let pre = prepare(cfg)?;
    let family = search_family(cfg, &pre)?;
    let seeds = cfg.seeds();
    let Prepared {
        data,
        truth,
        draws,
        predictive: pred,
        xtilde,
        mode,
        loss,
        point,
        weights,
        mut warnings,
    } = pre;
    let subsets = family.subsets();

    // Evaluation and acceptable family.
    let ev = &cfg.evaluation;
    let (losses, afam, sensitivity) = match mode {
        EvaluationMode::CrossValidated => {
            let folds = make_folds(data.n(), ev.folds, seeds.folds).stage("evaluate")?;
            let ecfg = EvaluationConfig {
                loss_kind: loss,
                functional: cfg.functional,
                weights: cfg.weights.clone(),
                s_tilde: ev.s_tilde.unwrap_or(draws.count() / 2),
                seed: seeds.evaluation,
            };
            let losses = out_of_sample_losses(&data, &draws, &folds, &subsets, &ecfg).stage("evaluate")?;
            let afam = acceptable_family(&losses, ev.eta, ev.epsilon).stage("evaluate")?;
            let grid = sensitivity_grid(&losses, ev, |e, p| acceptable_family(&losses, e, p)).stage("evaluate")?;
            (losses, afam, grid)
        }
        EvaluationMode::NewCovariates => {
            let full = Subset::full(xtilde.ncols());
            let mut all = subsets.clone();
            if !all.iter().any(|s| s.indices() == full.indices()) {
                all.push(full);
            }
            let losses = predictive_losses_newx(&xtilde, &pred, &all, loss, &cfg.functional, &weights).stage("evaluate")?;
            let p = xtilde.ncols();
            let afam = newx_family_from_losses(&losses, p, ev.eta, ev.epsilon).stage("evaluate")?;
            let grid = sensitivity_grid(&losses, ev, |e, q| newx_family_from_losses(&losses, p, e, q)).stage("evaluate")?;
            (losses, afam, grid)
        }
    };
    warnings.extend(losses.diagnostics.iter().filter_map(|d| d.warning.clone()));
    warnings.extend(losses.dropped.iter().map(|d| format!("subset {} dropped: {}", d.subset, d.reason)));

    // Importance.
    let importance = importance_report(&afam, &data, ev).stage("importance")?;

    // Actions for the key subsets.
    let mut keyed: Vec<(String, Subset)> = Vec::new();
    if let Some(s) = &afam.s_min {
        keyed.push(("s_min".into(), s.clone()));
    }
    keyed.push(("s_small".into(), afam.s_small.clone()));
    if ev.full_action {
        keyed.push(("full".into(), Subset::full(xtilde.ncols())));
    }
    let mut actions = Vec::with_capacity(keyed.len());
    for (label, s) in keyed {
        let d = predictive_action_draws(&xtilde, &pred, &weights, &s, loss, &cfg.functional).stage("actions")?;
        if !d.failed.is_empty() {
            warnings.push(format!("{label}: {} predictive-action draws failed and were excluded", d.failed.len()));
        }
        let intervals = interval_estimate(&d, ev.interval_level).stage("actions")?;
        actions.push(ActionSummary {
            point: point_action(&xtilde, &point, &weights, &s, loss).iter().copied().collect(),
            draw_mean: d.mean().iter().copied().collect(),
            failed_draws: d.failed.len(),
            label,
            subset: s,
            level: ev.interval_level,
            intervals,
        });
    }
    let member_actions: Vec<MemberAction> = afam
        .members
        .par_iter()
        .map(|s| MemberAction {
            subset: s.clone(),
            coefficients: point_action(&xtilde, &point, &weights, s, loss).iter().copied().collect(),
        })
        .collect();

    let baseline = if cfg.baseline && data.response_kind() == ResponseKind::Continuous && !cfg.functional.is_binary() {
        Some(classical_subset_baseline(&data, cfg.search.s_max).stage("baseline")?)
    } else {
        None
    };

    let mut report = RunReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        seeds,
        data: DataSummary {
            n: data.n(),
            p: data.p(),
            column_names: data.column_names().to_vec(),
            response_kind: data.response_kind(),
            intercept: data.intercept_column(),
            targets: xtilde.nrows(),
        },
        mode,
        loss_kind: loss,
        posterior_draws: draws.count(),
        candidate_family: family,
        evaluated: (0..losses.len())
            .map(|id| EvaluatedSubset {
                id,
                subset: losses.subsets[id].clone(),
                empirical: losses.empirical.as_ref().map(|e| e[id]),
                predictive_mean: losses.predictive_mean(id),
            })
            .collect(),
        dropped: losses.dropped.clone(),
        folds: losses.diagnostics.clone(),
        acceptable_family: afam,
        sensitivity,
        importance,
        actions,
        member_actions,
        baseline,
        metrics: None,
        warnings,
    };
    if let (Some(t), EvaluationMode::CrossValidated) = (&truth, mode) {
        report.metrics = Some(metrics(&report, &data, t).stage("metrics")?);
    }
    Ok(RunOutput {
        report,
        losses,
        data,
        truth,
    })
}

fn sensitivity_grid(
    losses: &SubsetLosses,
    ev: &EvaluationParams,
    family: impl Fn(f64, f64) -> Result<AcceptableFamily>,
) -> Result<Vec<SensitivityCell>> {
    let mut out = Vec::new();
    for &eta in &ev.sensitivity_eta {
        for &epsilon in &ev.sensitivity_epsilon {
            let f = family(eta, epsilon)?;
            out.push(SensitivityCell {
                eta,
                epsilon,
                members: f.members.iter().map(|s| losses.position(s).expect("member in table")).collect(),
                s_small: f.s_small,
            });
        }
    }
    Ok(out)
}

fn importance_report(afam: &AcceptableFamily, data: &Dataset, ev: &EvaluationParams) -> Result<ImportanceReport> {
    let im = vi_matrix(&afam.members, data.p())?;
    let keys = keystones(&im);
    let redundancy = redundancy_pairs(&im, ev.redundancy_hi, ev.redundancy_lo)?;
    let covariates = (0..data.p())
        .map(|j| CovariateImportance {
            index: j,
            name: data.column_names()[j].clone(),
            vi: im.marginal(j),
            tier: tier_label(im.marginal(j), keys.contains(&j)).into(),
        })
        .collect();
    Ok(ImportanceReport {
        family_size: im.family_size,
        counts: im.counts,
        keystones: keys,
        redundancy,
        covariates,
    })
}

/// Classical best-subset selection: the same branch and bound on the raw
/// response with uniform weights, one subset per size, AIC
/// `n log(RSS/n) + 2(k+1)` across sizes with ties to the smaller size.
pub fn classical_subset_baseline(data: &Dataset, s_max: usize) -> Result<BaselineResult> {
    if data.response_kind() != ResponseKind::Continuous {
        return Err(Error::Unsupported("the AIC baseline needs a continuous response".into()));
    }
    let n = data.n();
    let w = Weights::uniform(n);
    let y = PointPredictions::continuous(data.y().clone())?;
    let fam = candidate_family_regression(data.x(), &y, &w, 1, s_max, &[])?;
    let nf = n as f64;
    let mut per_size = Vec::new();
    for list in &fam.by_size {
        if let Some(e) = list.first() {
            // Uniform weights 1/n make the criterion RSS/n.
            let rss = e.criterion * nf;
            let k = e.subset.len();
            per_size.push(BaselineSize {
                k,
                subset: e.subset.clone(),
                rss,
                aic: nf * (rss / nf).ln() + 2.0 * (k as f64 + 1.0),
            });
        }
    }
    let best = per_size
        .iter()
        .fold(None::<&BaselineSize>, |acc, b| match acc {
            Some(a) if a.aic <= b.aic => Some(a),
            _ => Some(b),
        })
        .ok_or_else(|| Error::input("baseline search returned no subsets"))?
        .clone();
    let coefficients = wls_action(data.x(), data.y(), &w, &best.subset).dense(data.p()).iter().copied().collect();
    Ok(BaselineResult {
        subset: best.subset,
        aic: best.aic,
        coefficients,
        per_size,
    })
}

/// Linear-interpolation quantile of sorted values (`h = (m-1) q`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn rmse(a: &DVector<f64>, b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / b.len() as f64).sqrt()
}

/// True positive and true negative rates of `s` against `active` over `p`
/// coefficients.
pub fn selection_rates(s: &Subset, active: &[usize], p: usize) -> (f64, f64) {
    let pos = active.len();
    let neg = p - pos;
    let tp = active.iter().filter(|&&j| s.contains(j)).count();
    let tn = (0..p).filter(|j| !active.contains(j) && !s.contains(*j)).count();
    let tpr = if pos == 0 { 1.0 } else { tp as f64 / pos as f64 };
    let tnr = if neg == 0 { 1.0 } else { tn as f64 / neg as f64 };
    (tpr, tnr)
}

/// Mean of `-[π* log π + (1 - π*) log(1 - π)]` with clipped `π`.
pub fn cross_entropy_against(pi_star: &[f64], eta: &DVector<f64>) -> f64 {
    let m = pi_star.len() as f64;
    pi_star
        .iter()
        .zip(eta.iter())
        .map(|(&t, &e)| {
            let p = crate::action::clip_prob(logistic(e));
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / m
}

/// Truth-based summaries for synthetic runs.
pub fn metrics(report: &RunReport, data: &Dataset, truth: &SyntheticTruth) -> Result<MetricsTable> {
    let p = data.p();
    if truth.beta_star.len() != p || truth.y_star.len() != data.n() {
        return Err(Error::dim(format!(
            "truth has {} coefficients and {} rows, data has {p} and {}",
            truth.beta_star.len(),
            truth.y_star.len(),
            data.n()
        )));
    }
    let x = data.x();
    let fitted = |coef: &[f64]| x * DVector::from_column_slice(coef);
    let continuous_target = report.loss_kind == LossKind::SquaredError && !report.config.functional.is_binary();

    let mut out = MetricsTable {
        family_rmse_quantiles: None,
        rmse: Vec::new(),
        selection: Vec::new(),
        intervals: Vec::new(),
        cross_entropy: Vec::new(),
    };

    if continuous_target {
        let mut r: Vec<f64> = report.member_actions.iter().map(|m| rmse(&fitted(&m.coefficients), &truth.y_star)).collect();
        r.sort_by(f64::total_cmp);
        out.family_rmse_quantiles = Some(RMSE_QUANTILES.iter().map(|&q| quantile_sorted(&r, q)).collect());
        for a in &report.actions {
            out.rmse.push(LabeledValue {
                label: a.label.clone(),
                value: rmse(&fitted(&a.point), &truth.y_star),
            });
        }
        if let Some(b) = &report.baseline {
            out.rmse.push(LabeledValue {
                label: "baseline".into(),
                value: rmse(&fitted(&b.coefficients), &truth.y_star),
            });
        }
    } else {
        let pi_star: Vec<f64> = match (&truth.pi_star, report.config.functional) {
            (_, FunctionalSpec::Threshold { tau }) => {
                let z = Normal::new(0.0, 1.0).expect("standard normal");
                truth.y_star.iter().map(|&m| 1.0 - z.cdf((tau - m) / truth.sigma_star)).collect()
            }
            (Some(pi), _) => pi.clone(),
            (None, _) => return Err(Error::input("classification metrics need true probabilities")),
        };
        for a in &report.actions {
            out.cross_entropy.push(LabeledValue {
                label: a.label.clone(),
                value: cross_entropy_against(&pi_star, &fitted(&a.point)),
            });
        }
    }

    let mut key: Vec<(String, Subset)> = report.actions.iter().map(|a| (a.label.clone(), a.subset.clone())).collect();
    if let Some(b) = &report.baseline {
        key.push(("baseline".into(), b.subset.clone()));
    }
    for (label, s) in key {
        let (tpr, tnr) = selection_rates(&s, &truth.active, p);
        out.selection.push(SelectionRates { label, tpr, tnr });
    }

    if continuous_target {
        for a in &report.actions {
            let covered = a
                .intervals
                .iter()
                .zip(&truth.beta_star)
                .filter(|(iv, &b)| iv.contains(b))
                .count();
            out.intervals.push(IntervalMetrics {
                label: a.label.clone(),
                level: a.level,
                coverage: covered as f64 / p as f64,
                mean_width: a.intervals.iter().map(Interval::width).sum::<f64>() / p as f64,
            });
        }
    }
    Ok(out)
}

/// Per-replicate summary of a simulation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSummary {
    pub replicate: usize,
    pub seed: u64,
    pub family_size: usize,
    pub s_min: Option<Subset>,
    pub s_small: Subset,
    pub metrics: MetricsTable,
}

pub fn replicate_seed(base: u64, r: usize) -> u64 {
    derive_seed(base, STREAM_REPLICATE + r as u64)
}

/// Independent replicates of a synthetic configuration.
pub fn run_sweep(cfg: &RunConfig, replicates: usize) -> Result<Vec<(ReplicateSummary, RunOutput)>> {
    if !matches!(cfg.data, DataSource::Synthetic { .. }) {
        return Err(Error::Unsupported("sweeps need a synthetic data source".into()));
    }
    (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut c = cfg.clone();
            c.seed = replicate_seed(cfg.seed, r);
            let out = run_pipeline(&c)?;
            let metrics = out
                .report
                .metrics
                .clone()
                .ok_or_else(|| Error::input("sweep replicate produced no metrics"))?;
            Ok((
                ReplicateSummary {
                    replicate: r,
                    seed: c.seed,
                    family_size: out.report.acceptable_family.len(),
                    s_min: out.report.acceptable_family.s_min.clone(),
                    s_small: out.report.acceptable_family.s_small.clone(),
                    metrics,
                },
                out,
            ))
        })
        .collect()
}

/// Flat per-replicate table of the headline metrics.
pub fn sweep_table(rows: &[ReplicateSummary]) -> String {
    let mut out = String::from("replicate,seed,family_size,size_s_small,metric,label,value\n");
    for r in rows {
        let mut push = |metric: &str, label: &str, v: f64| {
            out.push_str(&format!("{},{},{},{},{metric},{label},{v}\n", r.replicate, r.seed, r.family_size, r.s_small.len()));
        };
        if let Some(q) = &r.metrics.family_rmse_quantiles {
            for (qq, v) in RMSE_QUANTILES.iter().zip(q) {
                push("family_rmse_quantile", &qq.to_string(), *v);
            }
        }
        for v in &r.metrics.rmse {
            push("rmse", &v.label, v.value);
        }
        for v in &r.metrics.cross_entropy {
            push("cross_entropy", &v.label, v.value);
        }
        for s in &r.metrics.selection {
            push("tpr", &s.label, s.tpr);
            push("tnr", &s.label, s.tnr);
        }
        for i in &r.metrics.intervals {
            push("coverage", &i.label, i.coverage);
            push("mean_width", &i.label, i.mean_width);
        }
    }
    out
}
