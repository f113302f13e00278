//! Experiment grids over (model configuration, seed) runs.
//!
//! Trained runs are memoized in a [`Runner`] so grids that share a
//! configuration (the full model appears in several tables) train it once.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use crate::data::{apply_shift, generate, ShiftKind, SynDataset, SyntheticSpec, TrainingView};
use crate::error::{Error, Result};
use crate::harness::config::{Experiment, RunConfig};
use crate::harness::report::{self, num, opt_num, Series, Table};
use crate::harness::train::{train, RunLog, TrainConfig};
use crate::metrics::{self, MetricsReport, SimilaritySummary};
use crate::model::{ConceptModel, ModelConfig, Variant};
use crate::parallel::par_map;
use crate::rng;

/// The three generated splits of one synthetic spec.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: SynDataset,
    pub val: SynDataset,
    pub test: SynDataset,
}

impl Datasets {
    pub fn generate(spec: &SyntheticSpec) -> Result<Self> {
        let (train, val, test) = generate(spec)?;
        Ok(Self { train, val, test })
    }
}

/// One training run to perform.
#[derive(Clone, Debug, PartialEq)]
pub struct Job {
    /// File-name-safe identifier of the configuration.
    pub id: String,
    /// Row label for tables and legends.
    pub label: String,
    pub model: ModelConfig,
    pub seed: u64,
}

#[derive(Debug)]
pub struct TrainedRun {
    pub job: Job,
    pub model: ConceptModel,
    pub log: RunLog,
}

/// Trains jobs against fixed data and optimizer settings, caching results.
pub struct Runner {
    pub data: Datasets,
    pub train: TrainConfig,
    /// When set, each run's epoch log is written to `runs/<id>_seed<seed>.csv` here.
    pub log_dir: Option<PathBuf>,
    cache: Mutex<HashMap<String, Arc<TrainedRun>>>,
}

fn cache_key(job: &Job) -> String {
    format!("{:?}|{}", job.model, job.seed)
}

impl Runner {
    pub fn new(data: Datasets, train: TrainConfig) -> Self {
        Self {
            data,
            train,
            log_dir: None,
            cache: Mutex::new(HashMap::new()),
        }
    }

    /// Runs every uncached job (in parallel when enabled) and returns all
    /// results in job order. The first failure is returned as the error.
    pub fn run(&self, jobs: &[Job]) -> Result<Vec<Arc<TrainedRun>>> {
        let pending: Vec<Job> = {
            let cache = self.cache.lock().expect("runner cache");
            let mut seen = std::collections::HashSet::new();
            jobs.iter()
                .filter(|j| !cache.contains_key(&cache_key(j)) && seen.insert(cache_key(j)))
                .cloned()
                .collect()
        };
        let trained = par_map(&pending, |job| self.train_one(job));
        {
            let mut cache = self.cache.lock().expect("runner cache");
            for run in trained {
                let run = run?;
                cache.insert(cache_key(&run.job), Arc::new(run));
            }
        }
        let cache = self.cache.lock().expect("runner cache");
        Ok(jobs
            .iter()
            .map(|j| {
                let hit = Arc::clone(&cache[&cache_key(j)]);
                if hit.job.label == j.label {
                    hit
                } else {
                    // Same configuration under another name.
                    Arc::new(TrainedRun {
                        job: j.clone(),
                        model: hit.model.clone(),
                        log: hit.log.clone(),
                    })
                }
            })
            .collect())
    }

    fn train_one(&self, job: &Job) -> Result<TrainedRun> {
        log::info!("training {} seed {}", job.label, job.seed);
        let out = train(
            &job.model,
            &self.train,
            TrainingView::new(&self.data.train)?,
            TrainingView::new(&self.data.val)?,
            job.seed,
        )?;
        if let Some(dir) = &self.log_dir {
            epoch_table(&out.log).write(&dir.join("runs").join(format!("{}_seed{}.csv", job.id, job.seed)), &[])?;
        }
        Ok(TrainedRun {
            job: job.clone(),
            model: out.model,
            log: out.log,
        })
    }
}

/// Per-epoch losses and validation metrics.
pub fn epoch_table(log: &RunLog) -> Table {
    let mut t = Table::new(&[
        "epoch",
        "task",
        "concept",
        "mixup",
        "cvd",
        "rec",
        "total",
        "val_task_accuracy",
        "val_concept_accuracy",
        "beta_hsic",
        "beta_mixup",
    ]);
    for e in &log.epochs {
        let l = &e.losses;
        t.push(vec![
            e.epoch.to_string(),
            num(l.task),
            num(l.concept),
            num(l.mixup),
            num(l.cvd),
            num(l.rec),
            num(l.total),
            num(e.val_task_accuracy),
            num(e.val_concept_accuracy),
            num(e.beta_hsic),
            num(e.beta_mixup),
        ]);
    }
    t
}

/// Metrics of one model on one shifted copy of the test set.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftRow {
    pub shift: ShiftKind,
    pub report: MetricsReport,
}

/// Metrics over the test set and each requested shift of it.
pub fn evaluate(model: &ConceptModel, test: &SynDataset, shifts: &[ShiftKind], seed: u64, with_ois: bool) -> Result<Vec<ShiftRow>> {
    check_dims(model, test)?;
    shifts
        .iter()
        .map(|&shift| {
            let ds = apply_shift(test, shift, seed)?;
            let report = metrics::report(model, &ds.features, &ds.concepts, ds.labels(), seed, with_ois)?;
            Ok(ShiftRow { shift, report })
        })
        .collect()
}

fn check_dims(model: &ConceptModel, ds: &SynDataset) -> Result<()> {
    let c = &model.config;
    if ds.features.shape()[1] != c.input_dim || ds.num_concepts() != c.num_concepts {
        return Err(Error::config(format!(
            "model expects {} features and {} concepts; dataset has {} and {}",
            c.input_dim,
            c.num_concepts,
            ds.features.shape()[1],
            ds.num_concepts()
        )));
    }
    Ok(())
}

fn mean_intra_variance(r: &MetricsReport) -> Option<f64> {
    let v: Vec<f64> = r.intra_variance.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn evaluation_table(rows: &[ShiftRow]) -> Table {
    let mut t = Table::new(&[
        "shift",
        "concept_accuracy",
        "task_accuracy",
        "cas",
        "ois",
        "mean_intra_variance",
    ]);
    for r in rows {
        t.push(vec![
            r.shift.as_str().to_string(),
            num(r.report.concept_accuracy),
            num(r.report.task_accuracy),
            opt_num(r.report.cas),
            opt_num(r.report.ois),
            opt_num(mean_intra_variance(&r.report)),
        ]);
    }
    t
}

/// Mean and 95% CI half-width.
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, 0.0);
    }
    (values.iter().sum::<f64>() / values.len() as f64, metrics::ci_half_width(values))
}

fn push_stat(row: &mut Vec<String>, values: &[f64]) {
    if values.is_empty() {
        row.extend([String::new(), String::new()]);
    } else {
        let (m, ci) = mean_ci(values);
        row.extend([num(m), num(ci)]);
    }
}

/// Test-set task accuracy under `shift`.
pub fn shift_accuracy(model: &ConceptModel, test: &SynDataset, shift: ShiftKind, seed: u64) -> Result<f64> {
    let ds = apply_shift(test, shift, seed)?;
    let snap = model.snapshot(&ds.features)?;
    metrics::task_accuracy(&snap.logits, ds.labels())
}

/// Mean task accuracy over the non-identity shifts in `shifts`.
pub fn shifted_accuracy(model: &ConceptModel, test: &SynDataset, shifts: &[ShiftKind], seed: u64) -> Result<Option<f64>> {
    let kinds: Vec<ShiftKind> = shifts.iter().copied().filter(|&s| s != ShiftKind::InDistribution).collect();
    if kinds.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for &k in &kinds {
        total += shift_accuracy(model, test, k, seed)?;
    }
    Ok(Some(total / kinds.len() as f64))
}

/// Jobs for `model` over every configured seed.
pub fn jobs(id: &str, label: &str, model: &ModelConfig, seeds: &[u64]) -> Vec<Job> {
    seeds
        .iter()
        .map(|&seed| Job {
            id: id.to_string(),
            label: label.to_string(),
            model: model.clone(),
            seed,
        })
        .collect()
}

/// Configuration of a named variant, keeping every other setting of `base`.
pub fn with_variant(base: &ModelConfig, variant: Variant, mechanisms: bool) -> ModelConfig {
    ModelConfig {
        variant,
        mechanisms,
        ..base.clone()
    }
}

/// The six baseline models: Bool/Fuzzy CBM with and without the mechanisms, CEM and RECEM.
pub fn baseline_models(base: &ModelConfig) -> Vec<ModelConfig> {
    vec![
        with_variant(base, Variant::BoolCbm, false),
        with_variant(base, Variant::FuzzyCbm, false),
        with_variant(base, Variant::Cem, false),
        with_variant(base, Variant::Recem, false),
        with_variant(base, Variant::BoolCbm, true),
        with_variant(base, Variant::FuzzyCbm, true),
    ]
}

/// Full RECEM plus the six single and pairwise loss removals.
pub fn ablation_models(base: &ModelConfig) -> Vec<(String, String, ModelConfig)> {
    let full = with_variant(base, Variant::Recem, false);
    let drop = |id: &str, label: &str, m: bool, c: bool, r: bool| {
        let mut cfg = full.clone();
        if m {
            cfg.weights.lambda_m = 0.0;
        }
        if c {
            cfg.weights.lambda_cvd = 0.0;
        }
        if r {
            cfg.weights.lambda_rec = 0.0;
        }
        (id.to_string(), label.to_string(), cfg)
    };
    vec![
        drop("full", "RECEM", false, false, false),
        drop("wo_m", "w/o L_m", true, false, false),
        drop("wo_rec", "w/o L_rec", false, false, true),
        drop("wo_cvd", "w/o L_cvd", false, true, false),
        drop("wo_cvd_rec", "w/o L_cvd, L_rec", false, true, true),
        drop("wo_cvd_m", "w/o L_cvd, L_m", true, true, false),
        drop("wo_rec_m", "w/o L_rec, L_m", true, false, true),
    ]
}

/// One-factor-at-a-time grid over the three auxiliary loss weights.
pub const WEIGHT_GRID: [(&str, [f64; 4]); 3] = [
    ("lambda_m", [0.01, 0.1, 0.5, 1.0]),
    ("lambda_cvd", [0.01, 0.05, 0.1, 0.5]),
    ("lambda_rec", [0.1, 0.5, 1.0, 5.0]),
];

/// Tables and charts produced by one experiment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentOutput {
    pub tables: Vec<(String, Table)>,
    /// Histogram files keyed by file name.
    pub histograms: Vec<(String, SimilaritySummary)>,
}

impl ExperimentOutput {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Writes tables, histogram files and derived charts into `dir`.
    pub fn emit(&self, dir: &Path, comments: &[String]) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for (name, table) in &self.tables {
            let path = dir.join(name);
            table.write(&path, comments)?;
            written.push(path);
        }
        for (name, summary) in &self.histograms {
            let path = dir.join(name);
            summary.write_histogram_csv(&path)?;
            written.push(path);
        }
        written.extend(render_charts(dir)?);
        Ok(written)
    }
}

fn series_by(table: &Table, group: &str, x: &str, y: &str) -> Vec<Series> {
    let (Some(g), Some(xi), Some(yi)) = (table.column(group), table.column(x), table.column(y)) else {
        return Vec::new();
    };
    let mut out: Vec<Series> = Vec::new();
    for row in &table.rows {
        let (Ok(xv), Ok(yv)) = (row[xi].parse::<f64>(), row[yi].parse::<f64>()) else {
            continue;
        };
        match out.iter_mut().find(|s| s.name == row[g]) {
            Some(s) => s.points.push((xv, yv)),
            None => out.push(Series {
                name: row[g].clone(),
                points: vec![(xv, yv)],
            }),
        }
    }
    out
}

/// (Re)builds every chart derivable from the CSV files in `dir`. Charts are
/// pure functions of the CSVs, so rerunning this is idempotent.
pub fn render_charts(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut chart = |name: &str, svg: Option<String>| -> Result<()> {
        let path = dir.join(name);
        if report::write_chart(&path, svg)? {
            written.push(path);
        }
        Ok(())
    };
    let intervention = dir.join("intervention.csv");
    if intervention.exists() {
        let t = Table::read(&intervention)?;
        let s = series_by(&t, "model", "ratio", "task_accuracy_mean");
        chart(
            "intervention.svg",
            report::line_chart_svg("Task accuracy under intervention", "intervention ratio", "task accuracy (%)", &s),
        )?;
    }
    let beta = dir.join("beta_sweep.csv");
    if beta.exists() {
        let t = Table::read(&beta)?;
        let mut s = series_by(&t, "model", "beta", "task_accuracy_mean");
        s.extend(
            series_by(&t, "model", "beta", "shifted_task_accuracy_mean")
                .into_iter()
                .map(|mut x| {
                    x.name = format!("{} (shifted)", x.name);
                    x
                }),
        );
        chart(
            "beta_sweep.svg",
            report::line_chart_svg("Task accuracy against beta", "beta", "task accuracy (%)", &s),
        )?;
    }
    // Histograms: hist_<model>_<diagnostic>.csv, one chart per diagnostic.
    let mut groups: Vec<(String, Vec<(String, PathBuf)>)> = Vec::new();
    if dir.exists() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("hist_") && n.ends_with(".csv"))
            })
            .collect();
        files.sort();
        for path in files {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("").trim_start_matches("hist_").to_string();
            let Some((model, diag)) = stem.split_once("__") else {
                continue;
            };
            match groups.iter_mut().find(|(d, _)| d == diag) {
                Some((_, v)) => v.push((model.to_string(), path.clone())),
                None => groups.push((diag.to_string(), vec![(model.to_string(), path.clone())])),
            }
        }
    }
    for (diag, members) in groups {
        let summaries = members
            .iter()
            .map(|(m, p)| Ok((m.clone(), SimilaritySummary::read_histogram_csv(p)?)))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<(String, &SimilaritySummary)> = summaries.iter().map(|(m, s)| (m.clone(), s)).collect();
        chart(
            &format!("consistency_{diag}.svg"),
            report::histogram_svg(&format!("Cosine similarity: {}", diag.replace('_', " ")), &refs),
        )?;
    }
    Ok(written)
}

/// Builds a runner for `cfg`, logging per-run epochs under the experiment directory.
pub fn runner_for(cfg: &RunConfig, log_dir: Option<PathBuf>) -> Result<Runner> {
    cfg.validate()?;
    let mut runner = Runner::new(Datasets::generate(&cfg.data)?, cfg.train);
    runner.log_dir = log_dir;
    Ok(runner)
}

/// Runs a named experiment with `runner` (whose data must match `cfg`).
pub fn run_experiment(name: Experiment, cfg: &RunConfig, runner: &Runner) -> Result<ExperimentOutput> {
    let base = cfg.model_config();
    match name {
        Experiment::Baselines => baselines(cfg, runner, &base),
        Experiment::Ablation => ablation(cfg, runner, &base),
        Experiment::BetaSweep => beta_sweep(cfg, runner, &base),
        Experiment::WeightSweep => weight_sweep(cfg, runner, &base),
        Experiment::Intervention => intervention(cfg, runner, &base),
        Experiment::Shift => shift(cfg, runner, &base),
        Experiment::Leakage => leakage(cfg, runner, &base),
        Experiment::Consistency => consistency(cfg, runner, &base),
    }
}

/// Generates data, runs the experiment and writes its files under
/// `<out_dir>/<experiment>/`.
pub fn run_and_emit(name: Experiment, cfg: &RunConfig) -> Result<(ExperimentOutput, Vec<PathBuf>)> {
    let dir = cfg.out_dir.join(name.as_str());
    let runner = runner_for(cfg, Some(dir.clone()))?;
    let out = run_experiment(name, cfg, &runner)?;
    let comments = vec![format!("experiment={}", name.as_str()), cfg.header()];
    let files = out.emit(&dir, &comments)?;
    Ok((out, files))
}

fn grouped<'a>(runs: &'a [Arc<TrainedRun>], n_seeds: usize) -> impl Iterator<Item = &'a [Arc<TrainedRun>]> {
    runs.chunks(n_seeds)
}

fn collect<F>(group: &[Arc<TrainedRun>], f: F) -> Result<Vec<f64>>
where
    F: Fn(&TrainedRun) -> Result<Option<f64>>,
{
    let mut out = Vec::new();
    for r in group {
        if let Some(v) = f(r)? {
            out.push(v);
        }
    }
    Ok(out)
}

fn accuracy_row(label: &str, group: &[Arc<TrainedRun>], cfg: &RunConfig, test: &SynDataset) -> Result<Vec<String>> {
    let mut row = vec![label.to_string()];
    let snaps = group
        .iter()
        .map(|r| r.model.snapshot(&test.features))
        .collect::<Result<Vec<_>>>()?;
    let concept = snaps
        .iter()
        .map(|s| metrics::concept_accuracy(&s.p_hat, &test.concepts))
        .collect::<Result<Vec<_>>>()?;
    let task = snaps
        .iter()
        .map(|s| metrics::task_accuracy(&s.logits, test.labels()))
        .collect::<Result<Vec<_>>>()?;
    push_stat(&mut row, &concept);
    push_stat(&mut row, &task);
    let shifted = collect(group, |r| shifted_accuracy(&r.model, test, &cfg.shifts, cfg.eval_seed))?;
    push_stat(&mut row, &shifted);
    Ok(row)
}

const ACC_HEADER: [&str; 7] = [
    "model",
    "concept_accuracy_mean",
    "concept_accuracy_ci",
    "task_accuracy_mean",
    "task_accuracy_ci",
    "shifted_task_accuracy_mean",
    "shifted_task_accuracy_ci",
];

fn baselines(cfg: &RunConfig, runner: &Runner, base: &ModelConfig) -> Result<ExperimentOutput> {
    let models = baseline_models(base);
    let all: Vec<Job> = models
        .iter()
        .flat_map(|m| jobs(&m.label().replace('+', "_"), &m.label(), m, &cfg.seeds))
        .collect();
    let runs = runner.run(&all)?;
    let mut header = ACC_HEADER.to_vec();
    header.extend(["cas_mean", "cas_ci"]);
    let mut t = Table::new(&header);
    for group in grouped(&runs, cfg.seeds.len()) {
        let mut row = accuracy_row(&group[0].job.label, group, cfg, &runner.data.test)?;
        let cas = collect(group, |r| {
            let snap = r.model.snapshot(&runner.data.test.features)?;
            snap.c_mixed
                .as_ref()
                .map(|e| metrics::cas(e, &runner.data.test.concepts, cfg.eval_seed))
                .transpose()
        })?;
        push_stat(&mut row, &cas);
        t.push(row);
    }
    Ok(ExperimentOutput {
        tables: vec![("baselines.csv".into(), t)],
        histograms: vec![],
    })
}

fn ablation(cfg: &RunConfig, runner: &Runner, base: &ModelConfig) -> Result<ExperimentOutput> {
    let grid = ablation_models(base);
    let all: Vec<Job> = grid.iter().flat_map(|(id, label, m)| jobs(id, label, m, &cfg.seeds)).collect();
    let runs = runner.run(&all)?;
    let mut t = Table::new(&ACC_HEADER);
    for group in grouped(&runs, cfg.seeds.len()) {
        t.push(accuracy_row(&group[0].job.label, group, cfg, &runner.data.test)?);
    }
    Ok(ExperimentOutput {
        tables: vec![("ablation.csv".into(), t)],
        histograms: vec![],
    })
}

fn beta_sweep(cfg: &RunConfig, runner: &Runner, base: &ModelConfig) -> Result<ExperimentOutput> {
    let recem = with_variant(base, Variant::Recem, false);
    let all: Vec<Job> = cfg
        .beta_values
        .iter()
        .flat_map(|&b| {
            let m = ModelConfig {
                beta_max: b,
                hsic_beta_max: None,
                mixup_beta_max: None,
                ..recem.clone()
            };
            jobs(&format!("beta_{b}"), "recem", &m, &cfg.seeds)
        })
        .collect();
    let runs = runner.run(&all)?;
    let mut header = vec!["beta"];
    header.extend(ACC_HEADER);
    let mut t = Table::new(&header);
    for (group, b) in grouped(&runs, cfg.seeds.len()).zip(&cfg.beta_values) {
        let mut row = vec![num(*b)];
        row.extend(accuracy_row("recem", group, cfg, &runner.data.test)?);
        t.push(row);
    }
    Ok(ExperimentOutput {
        tables: vec![("beta_sweep.csv".into(), t)],
        histograms: vec![],
    })
}

fn weight_sweep(cfg: &RunConfig, runner: &Runner, base: &ModelConfig) -> Result<ExperimentOutput> {
    let recem = with_variant(base, Variant::Recem, false);
    let mut all = Vec::new();
    let mut keys = Vec::new();
    for (param, values) in WEIGHT_GRID {
        for v in values {
            let mut m = recem.clone();
            match param {
                "lambda_m" => m.weights.lambda_m = v,
                "lambda_cvd" => m.weights.lambda_cvd = v,
                _ => m.weights.lambda_rec = v,
            }
            all.extend(jobs(&format!("{param}_{v}"), "recem", &m, &cfg.seeds));
            keys.push((param, v));
        }
    }
    let runs = runner.run(&all)?;
    let mut header = vec!["parameter", "value"];
    header.extend(ACC_HEADER);
    let mut t = Table::new(&header);
    for (group, (param, v)) in grouped(&runs, cfg.seeds.len()).zip(keys) {
        let mut row = vec![param.to_string(), num(v)];
        row.extend(accuracy_row("recem", group, cfg, &runner.data.test)?);
        t.push(row);
    }
    Ok(ExperimentOutput {
        tables: vec![("weight_sweep.csv".into(), t)],
        histograms: vec![],
    })
}

fn variant_runs(cfg: &RunConfig, runner: &Runner, base: &ModelConfig, variants: &[Variant]) -> Result<Vec<Arc<TrainedRun>>> {
    let all: Vec<Job> = variants
        .iter()
        .flat_map(|&v| {
            let m = with_variant(base, v, false);
            jobs(v.as_str(), v.as_str(), &m, &cfg.seeds)
        })
        .collect();
    runner.run(&all)
}

fn intervention(cfg: &RunConfig, runner: &Runner, base: &ModelConfig) -> Result<ExperimentOutput> {
    let runs = variant_runs(cfg, runner, base, &Variant::ALL)?;
    let test = &runner.data.test;
    let mut t = Table::new(&["model", "ratio", "task_accuracy_mean", "task_accuracy_ci"]);
    for group in grouped(&runs, cfg.seeds.len()) {
        let curves = group
            .iter()
            .map(|r| metrics::intervention_curve(&r.model, &test.features, &test.concepts, test.labels(), &cfg.ratios, &[cfg.eval_seed]))
            .collect::<Result<Vec<_>>>()?;
        let Some(first) = curves.first() else { continue };
        for (i, &(ratio, _)) in first.points.iter().enumerate() {
            let accs: Vec<f64> = curves.iter().map(|c| c.points[i].1).collect();
            let mut row = vec![group[0].job.label.clone(), num(ratio)];
            push_stat(&mut row, &accs);
            t.push(row);
        }
    }
    Ok(ExperimentOutput {
        tables: vec![("intervention.csv".into(), t)],
        histograms: vec![],
    })
}

fn shift(cfg: &RunConfig, runner: &Runner, base: &ModelConfig) -> Result<ExperimentOutput> {
    let runs = variant_runs(cfg, runner, base, &Variant::ALL)?;
    let test = &runner.data.test;
    let mut t = Table::new(&[
        "model",
        "shift",
        "task_accuracy_mean",
        "task_accuracy_ci",
        "concept_accuracy_mean",
        "concept_accuracy_ci",
    ]);
    for group in grouped(&runs, cfg.seeds.len()) {
        for &kind in &cfg.shifts {
            let ds = apply_shift(test, kind, cfg.eval_seed)?;
            let mut task = Vec::new();
            let mut concept = Vec::new();
            for r in group {
                let snap = r.model.snapshot(&ds.features)?;
                task.push(metrics::task_accuracy(&snap.logits, ds.labels())?);
                concept.push(metrics::concept_accuracy(&snap.p_hat, &ds.concepts)?);
            }
            let mut row = vec![group[0].job.label.clone(), kind.as_str().to_string()];
            push_stat(&mut row, &task);
            push_stat(&mut row, &concept);
            t.push(row);
        }
    }
    Ok(ExperimentOutput {
        tables: vec![("shift.csv".into(), t)],
        histograms: vec![],
    })
}

fn leakage(cfg: &RunConfig, runner: &Runner, base: &ModelConfig) -> Result<ExperimentOutput> {
    let runs = variant_runs(cfg, runner, base, &[Variant::Cem, Variant::Recem])?;
    let test = &runner.data.test;
    let mut t = Table::new(&["model", "cas_mean", "cas_ci", "ois_mean", "ois_ci"]);
    for group in grouped(&runs, cfg.seeds.len()) {
        let mut cas = Vec::new();
        let mut ois = Vec::new();
        for r in group {
            let snap = r.model.snapshot(&test.features)?;
            let emb = snap.c_mixed.as_ref().expect("embedding model");
            cas.push(metrics::cas(emb, &test.concepts, cfg.eval_seed)?);
            ois.push(metrics::ois(emb, &test.concepts, cfg.eval_seed)?.score);
        }
        let mut row = vec![group[0].job.label.clone()];
        push_stat(&mut row, &cas);
        push_stat(&mut row, &ois);
        t.push(row);
    }
    Ok(ExperimentOutput {
        tables: vec![("leakage.csv".into(), t)],
        histograms: vec![],
    })
}

/// Six distinct concepts drawn with `seed` (all of them when K < 6), ascending.
pub fn consistency_concepts(num_concepts: usize, seed: u64) -> Vec<usize> {
    let mut r = rng::stream(seed, "consistency-concepts");
    let mut picks = rand::seq::index::sample(&mut r, num_concepts, num_concepts.min(6)).into_vec();
    picks.sort_unstable();
    picks
}

/// Shift-similarity and same-concept similarity summaries of one model.
pub struct Consistency {
    pub shift: SimilaritySummary,
    pub concepts: Vec<(usize, SimilaritySummary)>,
}

/// Consistency diagnostics of one model on `test`, using `shift` for the
/// before/after comparison.
pub fn consistency_of(model: &ConceptModel, test: &SynDataset, shift: ShiftKind, concepts: &[usize], seed: u64) -> Result<Consistency> {
    let shifted = apply_shift(test, shift, seed)?;
    let before = model.snapshot(&test.features)?;
    let after = model.snapshot(&shifted.features)?;
    let (Some(b), Some(a)) = (before.c_mixed.as_ref(), after.c_mixed.as_ref()) else {
        return Err(Error::invalid(format!("{} has no concept embeddings", model.config.label())));
    };
    let shift_sim = metrics::cosine_shift_similarity(b, a)?;
    let per_concept = concepts
        .iter()
        .map(|&k| Ok((k, metrics::cosine_concept_consistency(b, &test.concepts, k, seed)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Consistency {
        shift: shift_sim,
        concepts: per_concept,
    })
}

fn consistency(cfg: &RunConfig, runner: &Runner, base: &ModelConfig) -> Result<ExperimentOutput> {
    let runs = variant_runs(cfg, runner, base, &[Variant::Cem, Variant::Recem])?;
    let test = &runner.data.test;
    let kind = cfg
        .shifts
        .iter()
        .copied()
        .find(|&s| s != ShiftKind::InDistribution)
        .unwrap_or(ShiftKind::RandomShift);
    let picks = consistency_concepts(test.num_concepts(), cfg.eval_seed);
    let mut t = Table::new(&["model", "diagnostic", "mean", "mean_ci", "pooled_std", "pairs", "skipped"]);
    let mut histograms = Vec::new();
    for group in grouped(&runs, cfg.seeds.len()) {
        let label = group[0].job.label.clone();
        let per_seed = group
            .iter()
            .map(|r| consistency_of(&r.model, test, kind, &picks, cfg.eval_seed))
            .collect::<Result<Vec<_>>>()?;
        let mut diags: Vec<(String, Vec<SimilaritySummary>)> =
            vec![(format!("shift_{}", kind.as_str()), per_seed.iter().map(|c| c.shift.clone()).collect())];
        for (i, &k) in picks.iter().enumerate() {
            diags.push((format!("concept_{k}"), per_seed.iter().map(|c| c.concepts[i].1.clone()).collect()));
        }
        for (diag, parts) in diags {
            let means: Vec<f64> = parts.iter().map(|p| p.mean).collect();
            let pooled = SimilaritySummary::merge(&parts);
            let mut row = vec![label.clone(), diag.clone()];
            push_stat(&mut row, &means);
            row.extend([num(pooled.std), pooled.count.to_string(), pooled.skipped.to_string()]);
            t.push(row);
            histograms.push((format!("hist_{label}__{diag}.csv"), pooled));
        }
    }
    Ok(ExperimentOutput {
        tables: vec![("consistency.csv".into(), t)],
        histograms,
    })
}
