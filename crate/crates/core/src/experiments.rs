//! Declarative experiment specs, the built-in catalog, the runner and result
//! emission.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, TrainTest, FEATURES_PER_TASK, FULL_DIM, TASKS};
use crate::ensemble::{
    hard_vote, rep_seed, scores_to_probs, stack_max, stack_mean, LearnerBank, RepetitionStats, VoteCouncil,
};
use crate::error::{Error, Result};
use crate::layers::{Model, ModelConfig, ModelKind};
use crate::numerics::{derive_seed, Matrix, Rng};
use crate::parallel::{try_map, Execution};
use crate::training::{evaluate, metrics, predict_proba, train, ConfusionCounts, MetricsReport, TrainConfig};

/// Environment variable holding the default DARWIN CSV path.
pub const DATA_ENV: &str = "DARWIN_CSV";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    HiddenSweep,
    ExpertSweep,
    RankSweep,
    TaskLevel,
    DepthStudy,
    VoteByTask,
}

/// Which fixed parameter a sweep value replaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Hidden,
    Experts,
    Rank,
}

impl Protocol {
    pub fn sweep_param(self) -> SweepParam {
        match self {
            Protocol::ExpertSweep => SweepParam::Experts,
            Protocol::RankSweep => SweepParam::Rank,
            _ => SweepParam::Hidden,
        }
    }

    /// Model input width: the full subject vector or one task block.
    pub fn input_dim(self) -> usize {
        match self {
            Protocol::TaskLevel | Protocol::VoteByTask => FEATURES_PER_TASK,
            _ => FULL_DIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedParams {
    /// Block count including the output head.
    pub depth: usize,
    pub hidden: usize,
    pub n_experts: usize,
    pub rank: usize,
    pub alpha: f64,
    pub top_k: usize,
}

impl Default for FixedParams {
    fn default() -> Self {
        Self {
            depth: 2,
            hidden: 300,
            n_experts: 6,
            rank: 4,
            alpha: 1.0,
            top_k: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl OutputFormat {
    pub fn extension(self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub format: OutputFormat,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Wall-clock training time is inherently unrepeatable; turn this off for
    /// byte-identical outputs.
    pub record_time: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            format: OutputFormat::Csv,
            path: None,
            record_time: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub protocol: Protocol,
    pub architectures: Vec<ModelKind>,
    pub sweep: Vec<usize>,
    #[serde(default)]
    pub fixed: FixedParams,
    #[serde(default)]
    pub train: TrainConfig,
    pub repetitions: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_path: Option<PathBuf>,
    #[serde(default)]
    pub out: OutputConfig,
}

const ALL_KINDS: [ModelKind; 3] = [ModelKind::LoraMoe, ModelKind::Moe, ModelKind::Mlp];

fn range(lo: usize, hi: usize, step: usize) -> Vec<usize> {
    (lo..=hi).step_by(step).collect()
}

fn catalog_entry(name: &str, protocol: Protocol, sweep: Vec<usize>, fixed: FixedParams) -> ExperimentSpec {
    ExperimentSpec {
        name: name.into(),
        protocol,
        architectures: ALL_KINDS.to_vec(),
        sweep,
        fixed,
        train: TrainConfig::default(),
        repetitions: 20,
        seed: 0,
        data_path: None,
        out: OutputConfig::default(),
    }
}

/// The seven built-in experiments, in catalog order.
pub fn built_in_specs() -> Vec<ExperimentSpec> {
    let base = FixedParams::default();
    vec![
        catalog_entry(
            "hidden_sweep",
            Protocol::HiddenSweep,
            range(50, 400, 50),
            FixedParams {
                n_experts: 6,
                ..base.clone()
            },
        ),
        catalog_entry(
            "expert_sweep",
            Protocol::ExpertSweep,
            range(3, 10, 1),
            FixedParams {
                hidden: 300,
                ..base.clone()
            },
        ),
        catalog_entry(
            "rank_sweep",
            Protocol::RankSweep,
            range(1, 8, 1),
            FixedParams {
                hidden: 300,
                n_experts: 6,
                ..base.clone()
            },
        ),
        catalog_entry(
            "task_level",
            Protocol::TaskLevel,
            range(5, 40, 5),
            FixedParams {
                n_experts: 5,
                ..base.clone()
            },
        ),
        catalog_entry(
            "depth5",
            Protocol::DepthStudy,
            range(50, 400, 50),
            FixedParams {
                depth: 5,
                n_experts: 6,
                ..base.clone()
            },
        ),
        catalog_entry(
            "depth8",
            Protocol::DepthStudy,
            range(50, 400, 50),
            FixedParams {
                depth: 8,
                n_experts: 6,
                ..base.clone()
            },
        ),
        catalog_entry(
            "vote_by_task",
            Protocol::VoteByTask,
            range(5, 25, 5),
            FixedParams {
                depth: 3,
                n_experts: 5,
                rank: 1,
                alpha: 1.0,
                top_k: 1,
                ..base
            },
        ),
    ]
}

pub fn built_in(name: &str) -> Option<ExperimentSpec> {
    built_in_specs().into_iter().find(|s| s.name == name)
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentSpec {
    /// Parses a TOML config. Fields not given are taken from the built-in
    /// named by `base`, or else from the first built-in with the same
    /// `protocol`.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let base = match table.remove("base") {
            Some(toml::Value::String(name)) => {
                built_in(&name).ok_or_else(|| Error::Config(format!("unknown base spec `{name}`")))?
            }
            Some(other) => return Err(Error::Config(format!("`base` must be a string, got {other}"))),
            None => {
                let protocol: Protocol = table
                    .get("protocol")
                    .cloned()
                    .ok_or_else(|| Error::Config("config needs `base` or `protocol`".into()))?
                    .try_into()
                    .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
                let mut spec = built_in_specs()
                    .into_iter()
                    .find(|s| s.protocol == protocol)
                    .expect("every protocol has a built-in");
                spec.name = String::new();
                spec
            }
        };
        let mut value = toml::Value::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut value, toml::Value::Table(table));
        let mut spec: ExperimentSpec = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if spec.name.is_empty() {
            spec.name = format!("{:?}", spec.protocol).to_lowercase();
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// A file path, or the name of a built-in spec.
    pub fn load(source: impl AsRef<Path>) -> Result<Self> {
        let source = source.as_ref();
        if source.is_file() {
            let text = std::fs::read_to_string(source).map_err(|e| Error::io(source, e))?;
            return Self::from_toml_str(&text);
        }
        source
            .to_str()
            .and_then(built_in)
            .ok_or_else(|| Error::Config(format!("`{}` is neither a file nor a built-in spec", source.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.sweep.is_empty() {
            return Err(Error::Config("sweep values must not be empty".into()));
        }
        if self.architectures.is_empty() {
            return Err(Error::Config("at least one architecture is required".into()));
        }
        if self
            .architectures
            .iter()
            .map(|k| k.label())
            .collect::<BTreeSet<_>>()
            .len()
            != self.architectures.len()
        {
            return Err(Error::Config("architectures must be distinct".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        self.train.validate()?;
        for &kind in &self.architectures {
            for &v in &self.sweep {
                self.model_config(kind, v)
                    .validate()
                    .map_err(|e| Error::Config(format!("{} at sweep value {v}: {e}", kind.label())))?;
            }
        }
        Ok(())
    }

    /// Model built for architecture `kind` at one sweep value.
    pub fn model_config(&self, kind: ModelKind, value: usize) -> ModelConfig {
        let f = &self.fixed;
        let mut cfg = ModelConfig {
            depth: f.depth,
            n_experts: f.n_experts,
            top_k: f.top_k,
            rank: f.rank,
            alpha: f.alpha,
            ..ModelConfig::new(kind, self.protocol.input_dim(), f.hidden)
        };
        match self.protocol.sweep_param() {
            SweepParam::Hidden => cfg.hidden_dim = value,
            // sweeps over gated-only parameters leave the MLP unchanged
            SweepParam::Experts if kind != ModelKind::Mlp => cfg.n_experts = value,
            SweepParam::Rank if kind == ModelKind::LoraMoe => cfg.rank = value,
            _ => {}
        }
        cfg
    }

    /// Every (label, config) the spec can build.
    pub fn catalog_models(&self) -> Vec<(String, ModelConfig)> {
        self.architectures
            .iter()
            .flat_map(|&kind| {
                self.sweep
                    .iter()
                    .enumerate()
                    .map(move |(i, &v)| (format!("{} {}", kind.label(), bl_name(i)), self.model_config(kind, v)))
            })
            .collect()
    }

    /// Explicit path, else the `DARWIN_CSV` environment variable.
    pub fn resolve_data_path(&self) -> Option<PathBuf> {
        self.data_path
            .clone()
            .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
    }
}

fn bl_name(i: usize) -> String {
    format!("BL_{}", i + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub arch: String,
    pub model: String,
    pub stats: RepetitionStats,
    /// Mean training time; `None` for aggregated rows or when timing is off.
    pub time_s: Option<f64>,
}

impl ResultRow {
    pub fn metrics(&self) -> &MetricsReport {
        &self.stats.mean
    }

    /// Accuracy per second of training.
    pub fn efficiency(&self) -> Option<f64> {
        self.time_s.filter(|&t| t > 0.0).map(|t| self.stats.mean.accuracy / t)
    }
}

/// Single-task metrics of one vote member configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskRow {
    pub arch: String,
    pub model: String,
    /// One-based task number.
    pub task: usize,
    pub stats: RepetitionStats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultTable {
    pub spec: ExperimentSpec,
    pub rows: Vec<ResultRow>,
    pub task_rows: Vec<TaskRow>,
}

impl ResultTable {
    pub fn row(&self, arch: ModelKind, model: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.arch == arch.label() && r.model == model)
    }

    pub fn arch_rows(&self, arch: ModelKind) -> impl Iterator<Item = &ResultRow> {
        self.rows.iter().filter(move |r| r.arch == arch.label())
    }
}

pub fn run(spec: &ExperimentSpec, data: &Dataset) -> Result<ResultTable> {
    run_with(spec, data, Execution::Parallel)
}

/// Seed for the model trained in job `job` of a repetition.
fn job_seed(rep_seed: u64, job: usize) -> u64 {
    derive_seed(rep_seed, job as u64 + 1)
}

struct Fitted {
    probs: Matrix,
    time: f64,
}

fn fit(spec: &ExperimentSpec, cfg: &ModelConfig, tt: &TrainTest, seed: u64) -> Result<Fitted> {
    let mut rng = Rng::seed_from(seed);
    let model = Model::build(cfg, &mut rng)?;
    let tc = TrainConfig {
        seed: derive_seed(seed, 0),
        ..spec.train.clone()
    };
    let out = train(model, &tt.train.features, &tt.train.labels, &tc)?;
    Ok(Fitted {
        probs: predict_proba(&out.model, &tt.test.features)?,
        time: out.train_time_s,
    })
}

/// Runs every repetition of `spec` on `data`. The output does not depend on
/// `exec`.
pub fn run_with(spec: &ExperimentSpec, data: &Dataset, exec: Execution) -> Result<ResultTable> {
    spec.validate()?;
    if data.dim() != FULL_DIM {
        return Err(Error::shape("experiment data", FULL_DIM, data.dim()));
    }
    let reps = spec.repetitions;
    let prepared = (0..reps)
        .map(|rep| {
            let split = data::split_subjects(data.len(), rep_seed(spec.seed, rep))?;
            let tt = data::prepare(data, &split)?;
            Ok(match spec.protocol {
                Protocol::TaskLevel => vec![TrainTest {
                    train: data::stack_tasks(&tt.train)?,
                    test: data::stack_tasks(&tt.test)?,
                }],
                Protocol::VoteByTask => {
                    let tr = data::task_views(&tt.train)?;
                    let te = data::task_views(&tt.test)?;
                    tr.into_iter()
                        .zip(te)
                        .map(|(train, test)| TrainTest { train, test })
                        .collect()
                }
                _ => vec![tt],
            })
        })
        .collect::<Result<Vec<Vec<TrainTest>>>>()?;

    let n_arch = spec.architectures.len();
    let n_sweep = spec.sweep.len();
    let n_views = prepared[0].len();
    let per_rep = n_arch * n_sweep * n_views;
    log::info!("{}: {} models over {} repetitions", spec.name, per_rep * reps, reps);
    let fitted = try_map(exec, reps * per_rep, |job| {
        let (rep, j) = (job / per_rep, job % per_rep);
        let (a, rest) = (j / (n_sweep * n_views), j % (n_sweep * n_views));
        let (s, v) = (rest / n_views, rest % n_views);
        let cfg = spec.model_config(spec.architectures[a], spec.sweep[s]);
        fit(spec, &cfg, &prepared[rep][v], job_seed(rep_seed(spec.seed, rep), j))
    })?;
    let at = |rep: usize, a: usize, s: usize, v: usize| &fitted[rep * per_rep + (a * n_sweep + s) * n_views + v];

    let timed = |mut m: MetricsReport, t: f64| {
        m.train_time_s = if spec.out.record_time { t } else { 0.0 };
        m
    };
    let mut rows = Vec::new();
    let mut task_rows = Vec::new();
    for (a, &kind) in spec.architectures.iter().enumerate() {
        if spec.protocol == Protocol::VoteByTask {
            // per rep: vote metrics for each config, and single-task metrics
            let mut names: Vec<String> = spec.sweep.iter().map(|h| format!("{}-{h}", kind.short())).collect();
            names.push(format!("{}-Mean", kind.short()));
            names.push(format!("{}-Max", kind.short()));
            let mut vote_reports = vec![Vec::with_capacity(reps); names.len()];
            let mut task_reports = vec![vec![Vec::new(); TASKS]; names.len()];
            for (rep, views) in prepared.iter().enumerate() {
                let labels = &views[0].test.labels;
                // member probabilities per config, one matrix per task
                let mut per_config: Vec<Vec<Matrix>> = (0..n_sweep)
                    .map(|s| (0..n_views).map(|v| at(rep, a, s, v).probs.clone()).collect())
                    .collect();
                let mut times: Vec<f64> = (0..n_sweep)
                    .map(|s| (0..n_views).map(|v| at(rep, a, s, v).time).sum())
                    .collect();
                for stacker in [stack_mean, stack_max] {
                    per_config.push(
                        (0..n_views)
                            .map(|v| {
                                let bank =
                                    LearnerBank::new((0..n_sweep).map(|s| at(rep, a, s, v).probs.clone()).collect())?;
                                stacker(&bank)
                            })
                            .collect::<Result<Vec<_>>>()?,
                    );
                    times.push(0.0);
                }
                for (c, members) in per_config.iter().enumerate() {
                    let council = VoteCouncil::from_probs(members)?;
                    let votes = hard_vote(&council)?;
                    let fraction = council.patient_fraction()?;
                    // hard labels from the vote, scores from the vote share
                    let counts = ConfusionCounts::from_predictions(&votes, labels)?;
                    let m = metrics(&counts, &scores_to_probs(&fraction), labels)?;
                    vote_reports[c].push(timed(m, times[c]));
                    for (t, p) in members.iter().enumerate() {
                        task_reports[c][t].push(timed(evaluate(p, labels, 0.0)?, 0.0));
                    }
                }
            }
            for (c, name) in names.iter().enumerate() {
                let stats = RepetitionStats::from_reports(&vote_reports[c])?;
                let time_s = (spec.out.record_time && c < n_sweep).then_some(stats.mean.train_time_s);
                rows.push(ResultRow {
                    arch: kind.label().into(),
                    model: name.clone(),
                    stats,
                    time_s,
                });
                for (t, reports) in task_reports[c].iter().enumerate() {
                    task_rows.push(TaskRow {
                        arch: kind.label().into(),
                        model: name.clone(),
                        task: t + 1,
                        stats: RepetitionStats::from_reports(reports)?,
                    });
                }
            }
            continue;
        }

        let mut bl_reports = vec![Vec::with_capacity(reps); n_sweep];
        let mut stack_reports = [Vec::with_capacity(reps), Vec::with_capacity(reps)];
        for (rep, views) in prepared.iter().enumerate() {
            let labels = &views[0].test.labels;
            let mut bank = LearnerBank::default();
            for (s, reports) in bl_reports.iter_mut().enumerate() {
                let f = at(rep, a, s, 0);
                reports.push(timed(evaluate(&f.probs, labels, 0.0)?, f.time));
                bank.push(f.probs.clone())?;
            }
            stack_reports[0].push(evaluate(&stack_max(&bank)?, labels, 0.0)?);
            stack_reports[1].push(evaluate(&stack_mean(&bank)?, labels, 0.0)?);
        }
        for (s, reports) in bl_reports.iter().enumerate() {
            let stats = RepetitionStats::from_reports(reports)?;
            let time_s = spec.out.record_time.then_some(stats.mean.train_time_s);
            rows.push(ResultRow {
                arch: kind.label().into(),
                model: bl_name(s),
                stats,
                time_s,
            });
        }
        for (name, reports) in ["StackMax", "StackMean"].into_iter().zip(&stack_reports) {
            rows.push(ResultRow {
                arch: kind.label().into(),
                model: name.into(),
                stats: RepetitionStats::from_reports(reports)?,
                time_s: None,
            });
        }
    }
    Ok(ResultTable {
        spec: spec.clone(),
        rows,
        task_rows,
    })
}

pub const CSV_COLUMNS: [&str; 9] = [
    "arch",
    "model",
    "accuracy",
    "sensitivity",
    "specificity",
    "auc",
    "precision",
    "f1",
    "time_s",
];

const NA: &str = "NA";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_string(), |t| t.to_string())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn write_csv(path: &Path, header: &[&str], records: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in records {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct JsonMetadata<'a> {
    package: &'static str,
    version: &'static str,
    seed: u64,
    spec: &'a ExperimentSpec,
    notes: Vec<&'static str>,
}

#[derive(Serialize)]
struct JsonRow<'a> {
    #[serde(flatten)]
    row: &'a ResultRow,
    efficiency: Option<f64>,
}

#[derive(Serialize)]
struct JsonTable<'a> {
    metadata: JsonMetadata<'a>,
    rows: Vec<JsonRow<'a>>,
    task_rows: &'a [TaskRow],
}

const NOTES: [&str; 3] = [
    "metrics are means over seeded repetitions of a 75/25 subject split; std holds the population standard deviation",
    "StackMax and StackMean aggregate base-learner probabilities; they have no training time",
    "efficiency is accuracy divided by mean training seconds",
];

/// Writes the table. CSV output also writes `<stem>.std.csv` with the
/// spread over repetitions, `<stem>.efficiency.csv` when times were recorded
/// and `<stem>.tasks.csv` for per-task rows.
pub fn emit(table: &ResultTable, format: OutputFormat, path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut written = vec![path.to_path_buf()];
    match format {
        OutputFormat::Json => {
            let doc = JsonTable {
                metadata: JsonMetadata {
                    package: env!("CARGO_PKG_NAME"),
                    version: env!("CARGO_PKG_VERSION"),
                    seed: table.spec.seed,
                    spec: &table.spec,
                    notes: NOTES.to_vec(),
                },
                rows: table
                    .rows
                    .iter()
                    .map(|row| JsonRow {
                        row,
                        efficiency: row.efficiency(),
                    })
                    .collect(),
                task_rows: &table.task_rows,
            };
            let mut text = serde_json::to_string_pretty(&doc)?;
            text.push('\n');
            std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        }
        OutputFormat::Csv => {
            write_csv(
                path,
                &CSV_COLUMNS,
                table.rows.iter().map(|r| {
                    let m = r.metrics();
                    let mut rec = vec![r.arch.clone(), r.model.clone()];
                    rec.extend(m.values()[..6].iter().map(f64::to_string));
                    rec.push(fmt_opt(r.time_s));
                    rec
                }),
            )?;
            if !table.rows.is_empty() {
                let p = sibling(path, "std.csv");
                let mut header = vec!["arch", "model", "repetitions"];
                header.extend(&CSV_COLUMNS[2..8]);
                write_csv(
                    &p,
                    &header,
                    table.rows.iter().map(|r| {
                        let mut rec = vec![r.arch.clone(), r.model.clone(), r.stats.repetitions.to_string()];
                        rec.extend(r.stats.std.values()[..6].iter().map(f64::to_string));
                        rec
                    }),
                )?;
                written.push(p);
            }
            if table.rows.iter().any(|r| r.time_s.is_some()) {
                let p = sibling(path, "efficiency.csv");
                write_csv(
                    &p,
                    &["arch", "model", "accuracy", "time_s", "efficiency"],
                    table.rows.iter().filter(|r| r.time_s.is_some()).map(|r| {
                        vec![
                            r.arch.clone(),
                            r.model.clone(),
                            r.metrics().accuracy.to_string(),
                            fmt_opt(r.time_s),
                            fmt_opt(r.efficiency()),
                        ]
                    }),
                )?;
                written.push(p);
            }
            if !table.task_rows.is_empty() {
                let p = sibling(path, "tasks.csv");
                let mut header = vec!["arch", "model", "task"];
                header.extend(&CSV_COLUMNS[2..8]);
                write_csv(
                    &p,
                    &header,
                    table.task_rows.iter().map(|r| {
                        let mut rec = vec![r.arch.clone(), r.model.clone(), r.task.to_string()];
                        rec.extend(r.stats.mean.values()[..6].iter().map(f64::to_string));
                        rec
                    }),
                )?;
                written.push(p);
            }
        }
    }
    Ok(written)
}

/// One parsed line of an emitted CSV table.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub arch: String,
    pub model: String,
    /// accuracy, sensitivity, specificity, auc, precision, f1
    pub metrics: [f64; 6],
    pub time_s: Option<f64>,
}

pub fn read_csv_table(path: impl AsRef<Path>) -> Result<Vec<CsvRow>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != CSV_COLUMNS {
        return Err(Error::Data(format!("unexpected header {header:?}")));
    }
    let num = |row: usize, col: usize, s: &str| -> Result<f64> {
        s.parse().map_err(|_| Error::Parse {
            row,
            column: CSV_COLUMNS[col].into(),
            message: format!("`{s}` is not a number"),
        })
    };
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let mut metrics = [0.0; 6];
        for (k, m) in metrics.iter_mut().enumerate() {
            *m = num(i + 1, k + 2, &rec[k + 2])?;
        }
        let time_s = match &rec[8] {
            NA => None,
            s => Some(num(i + 1, 8, s)?),
        };
        out.push(CsvRow {
            arch: rec[0].into(),
            model: rec[1].into(),
            metrics,
            time_s,
        });
    }
    Ok(out)
}
