//! Seeded studies, their reports, and comparison tables.
//!
//! A study runs one algorithm `runs` times against one objective kind. Run
//! `i` uses seed `base_seed + i`, so two studies with the same base seed face
//! identical objectives run for run. Everything a study writes is a pure
//! function of its configuration.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bandit::ZoomingState;
use crate::baselines::{default_grid_arms, GridBanditState, RandomSearch};
use crate::external::{evaluate_external, ExternalCommand};
use crate::objective::{
    auto_reward, best_found, best_trace, EvalError, EvalTrace, Evaluation, LrMap, Objective, RewardSource,
    RewardSpec, TuneHistory, DIVERGED_SENTINEL,
};
use crate::seeding::{run_seed, stream_rng, OBJECTIVE_STREAM};
use crate::teacher_student::{divergence_fraction, DivergenceSetup, NetConfig, TeacherStudentObjective};
use crate::tuner::{tune, TuneError, Tuner};

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("invalid study configuration: {0}")]
    Config(String),
    #[error("comparison needs at least two reports, got {0}")]
    NotEnoughReports(usize),
    #[error("reports use different budgets: {0}")]
    BudgetMismatch(String),
    #[error(transparent)]
    Tune(#[from] TuneError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Algorithm {
    Zooming {
        radius_scale: f64,
    },
    Random,
    /// Static grid; `arms = None` uses [`default_grid_arms`].
    Grid {
        arms: Option<usize>,
    },
}

impl Algorithm {
    pub fn zooming(radius_scale: f64) -> Self {
        Algorithm::Zooming { radius_scale }
    }

    pub fn label(&self) -> String {
        match self {
            Algorithm::Zooming { radius_scale } => format!("zooming(gamma={radius_scale})"),
            Algorithm::Random => "random".to_string(),
            Algorithm::Grid { arms: Some(k) } => format!("grid(K={k})"),
            Algorithm::Grid { arms: None } => "grid".to_string(),
        }
    }

    pub fn build(&self, budget: usize, seed: u64) -> Result<Box<dyn Tuner + Send>, StudyError> {
        Ok(match *self {
            Algorithm::Zooming { radius_scale } => Box::new(
                ZoomingState::new(radius_scale, seed).map_err(|e| StudyError::Config(e.to_string()))?,
            ),
            Algorithm::Random => Box::new(RandomSearch::new(seed)),
            Algorithm::Grid { arms } => {
                let k = arms.unwrap_or_else(|| default_grid_arms(budget));
                if k < 2 {
                    return Err(StudyError::Config("grid needs at least two arms".into()));
                }
                Box::new(GridBanditState::new(k))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectiveSpec {
    TeacherStudent {
        net: NetConfig,
    },
    /// Mean reward `1 - |x - optimum|` plus Gaussian noise, clipped to `[0, 1]`.
    Synthetic {
        optimum: f64,
        noise_sd: f64,
    },
    External {
        command: ExternalCommand,
    },
}

impl ObjectiveSpec {
    pub fn label(&self) -> String {
        match self {
            ObjectiveSpec::TeacherStudent { net } => format!(
                "teacher_student(d={},k={},{:?},N={})",
                net.d, net.k, net.activation, net.n
            )
            .to_lowercase(),
            ObjectiveSpec::Synthetic { optimum, noise_sd } => {
                format!("synthetic(optimum={optimum},noise={noise_sd})")
            }
            ObjectiveSpec::External { command } => format!("external({})", command.program),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub algorithm: Algorithm,
    pub lr_map: LrMap,
    pub budget_evals: usize,
    pub epochs_per_eval: usize,
    pub objective: ObjectiveSpec,
    pub runs: usize,
    pub base_seed: u64,
    /// Fixed reward normalisation; `None` anchors it on the first evaluation.
    #[serde(default)]
    pub reward: Option<RewardSpec>,
}

impl StudyConfig {
    pub fn new(algorithm: Algorithm, objective: ObjectiveSpec) -> Self {
        Self {
            algorithm,
            lr_map: LrMap::default(),
            budget_evals: 5,
            epochs_per_eval: 100,
            objective,
            runs: 50,
            base_seed: 0,
            reward: None,
        }
    }

    pub fn validate(&self) -> Result<(), StudyError> {
        let bad = |m: &str| Err(StudyError::Config(m.to_string()));
        if self.budget_evals < 1 {
            return bad("budget_evals must be at least 1");
        }
        if self.epochs_per_eval < 1 {
            return bad("epochs_per_eval must be at least 1");
        }
        if self.runs < 1 {
            return bad("runs must be at least 1");
        }
        if let Algorithm::Zooming { radius_scale } = self.algorithm {
            if !(radius_scale > 0.0 && radius_scale <= 1.0) {
                return bad("radius scale must lie in (0, 1]");
            }
        }
        match &self.objective {
            ObjectiveSpec::TeacherStudent { net } if net.d == 0 || net.k == 0 || net.n == 0 => {
                bad("network dimensions must be positive")
            }
            ObjectiveSpec::Synthetic { optimum, noise_sd }
                if !(0.0..=1.0).contains(optimum) || noise_sd.is_nan() || *noise_sd < 0.0 =>
            {
                bad("synthetic optimum must lie in [0, 1] and noise must be non-negative")
            }
            ObjectiveSpec::External { command } if command.program.trim().is_empty() => {
                bad("external objective needs a command")
            }
            _ => Ok(()),
        }
    }
}

/// Noisy synthetic landscape. Each trace repeats the observed loss
/// `1 - reward` for every epoch.
#[derive(Clone, Debug)]
pub struct SyntheticObjective {
    optimum: f64,
    noise_sd: f64,
    lr_map: LrMap,
    epochs: usize,
    rng: ChaCha8Rng,
}

impl SyntheticObjective {
    pub fn new(optimum: f64, noise_sd: f64, lr_map: LrMap, epochs: usize, seed: u64) -> Self {
        Self {
            optimum,
            noise_sd,
            lr_map,
            epochs,
            rng: stream_rng(seed, OBJECTIVE_STREAM),
        }
    }

    pub fn mean_reward(&self, coord: f64) -> f64 {
        1.0 - (coord - self.optimum).abs()
    }
}

impl Objective for SyntheticObjective {
    fn evaluate(&mut self, _round: usize, coord: f64) -> Result<Evaluation, EvalError> {
        let noise: f64 = self.rng.sample(StandardNormal);
        let reward = (self.mean_reward(coord) + self.noise_sd * noise).clamp(0.0, 1.0);
        let lr = self.lr_map.denormalize(coord);
        let trace = EvalTrace::from_losses(lr, &vec![1.0 - reward; self.epochs.max(1)]);
        Ok(Evaluation { lr, reward, trace })
    }
}

/// A failed evaluation that was recorded as diverged instead of aborting the run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalFailure {
    pub round: usize,
    pub message: String,
}

/// Objective backed by an external worker. Worker failures are kept as
/// diverged evaluations (reward 0) and logged in `failures`.
#[derive(Clone, Debug)]
pub struct ExternalObjective {
    command: ExternalCommand,
    lr_map: LrMap,
    epochs: usize,
    reward: Option<RewardSpec>,
    rng: ChaCha8Rng,
    failures: Vec<EvalFailure>,
}

impl ExternalObjective {
    pub fn new(
        command: ExternalCommand,
        lr_map: LrMap,
        epochs: usize,
        reward: Option<RewardSpec>,
        seed: u64,
    ) -> Self {
        Self {
            command,
            lr_map,
            epochs,
            reward,
            rng: stream_rng(seed, OBJECTIVE_STREAM),
            failures: Vec::new(),
        }
    }

    pub fn failures(&self) -> &[EvalFailure] {
        &self.failures
    }
}

impl Objective for ExternalObjective {
    fn evaluate(&mut self, round: usize, coord: f64) -> Result<Evaluation, EvalError> {
        let lr = self.lr_map.denormalize(coord);
        let seed = self.rng.next_u64();
        let trace = match evaluate_external(lr, self.epochs, round as u64, seed, &self.command) {
            Ok(trace) => trace,
            Err(err) => {
                self.failures.push(EvalFailure {
                    round,
                    message: err.to_string(),
                });
                *err.partial
            }
        };
        let reward = auto_reward(&mut self.reward, &trace)?;
        Ok(Evaluation { lr, reward, trace })
    }
}

/// Everything recorded for one run of a study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub history: TuneHistory,
    pub failures: Vec<EvalFailure>,
}

fn objective_for(config: &StudyConfig, seed: u64) -> Box<dyn Objective> {
    match &config.objective {
        ObjectiveSpec::TeacherStudent { net } => Box::new(TeacherStudentObjective::new(
            *net,
            seed,
            config.lr_map,
            config.epochs_per_eval,
            config.reward,
        )),
        ObjectiveSpec::Synthetic { optimum, noise_sd } => Box::new(SyntheticObjective::new(
            *optimum,
            *noise_sd,
            config.lr_map,
            config.epochs_per_eval,
            seed,
        )),
        ObjectiveSpec::External { command } => Box::new(ExternalObjective::new(
            command.clone(),
            config.lr_map,
            config.epochs_per_eval,
            config.reward,
            seed,
        )),
    }
}

/// Runs replication `run` of a study.
pub fn run_replication(config: &StudyConfig, run: usize) -> Result<RunRecord, StudyError> {
    let seed = run_seed(config.base_seed, run);
    let mut tuner = config.algorithm.build(config.budget_evals, seed)?;
    let mut failures = Vec::new();
    let history = match &config.objective {
        ObjectiveSpec::External { command } => {
            let mut objective = ExternalObjective::new(
                command.clone(),
                config.lr_map,
                config.epochs_per_eval,
                config.reward,
                seed,
            );
            let h = tune(&mut tuner, config.budget_evals, &mut objective);
            failures.extend_from_slice(objective.failures());
            h
        }
        _ => tune(&mut tuner, config.budget_evals, &mut *objective_for(config, seed)),
    };
    let history = match history {
        Ok(h) => h,
        Err(TuneError::Evaluation {
            round,
            source,
            history,
        }) => {
            failures.push(EvalFailure {
                round,
                message: source.to_string(),
            });
            *history
        }
        Err(other) => return Err(other.into()),
    };
    Ok(RunRecord {
        run,
        seed,
        history,
        failures,
    })
}

/// Number of distinct arms evaluated up to and including the best-trace
/// round; 0 for an empty history.
pub fn samples_to_best(history: &TuneHistory) -> usize {
    let Some(best) = best_trace(history) else {
        return 0;
    };
    history
        .entries()
        .iter()
        .take_while(|e| e.round <= best.entry.round)
        .map(|e| e.coord.to_bits())
        .collect::<HashSet<_>>()
        .len()
}

fn distinct_arms(history: &TuneHistory) -> usize {
    history.coords().map(f64::to_bits).collect::<HashSet<_>>().len()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestTraceSummary {
    pub run: usize,
    pub round: usize,
    pub coord: f64,
    pub lr: f64,
    pub auc: f64,
    pub diverged: bool,
    pub samples_to_best: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestFoundSummary {
    pub run: usize,
    pub round: usize,
    pub coord: f64,
    pub lr: f64,
    pub final_loss: f64,
    pub reward: f64,
    pub all_diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: usize,
    pub seed: u64,
    pub history_file: String,
    pub evaluations: usize,
    pub distinct_arms: usize,
    pub best_trace: Option<BestTraceSummary>,
    pub best_found: Option<BestFoundSummary>,
    pub failures: usize,
}

/// Aggregated outcome of a study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub algorithm: String,
    pub objective: String,
    pub budget_evals: usize,
    pub epochs_per_eval: usize,
    pub runs: usize,
    pub base_seed: u64,
    pub total_evaluations: usize,
    /// Fraction of runs whose best-trace entry diverged.
    pub divergence_fraction: f64,
    /// Minimal-AUC entry over all runs.
    pub best_trace: Option<BestTraceSummary>,
    pub best_found: Option<BestFoundSummary>,
    pub mean_samples_to_best: f64,
    pub per_run: Vec<RunSummary>,
}

pub fn history_file_name(run: usize) -> String {
    format!("runs/run_{run:04}.json")
}

fn summarize_run(record: &RunRecord) -> RunSummary {
    let h = &record.history;
    let best_trace = best_trace(h).map(|b| BestTraceSummary {
        run: record.run,
        round: b.entry.round,
        coord: b.entry.coord,
        lr: b.entry.lr,
        auc: b.auc,
        diverged: b.entry.trace.diverged(),
        samples_to_best: samples_to_best(h),
    });
    let best_found = best_found(h, RewardSource::NegativeLoss).map(|b| BestFoundSummary {
        run: record.run,
        round: b.entry.round,
        coord: b.entry.coord,
        lr: b.entry.lr,
        final_loss: b.entry.trace.final_loss(),
        reward: b.entry.reward,
        all_diverged: b.all_diverged,
    });
    RunSummary {
        run: record.run,
        seed: record.seed,
        history_file: history_file_name(record.run),
        evaluations: h.len(),
        distinct_arms: distinct_arms(h),
        best_trace,
        best_found,
        failures: record.failures.len(),
    }
}

/// Builds the report from stored run records; a pure function of its inputs.
pub fn summarize(config: &StudyConfig, records: &[RunRecord]) -> StudyReport {
    let per_run: Vec<RunSummary> = records.iter().map(summarize_run).collect();
    let diverged = per_run
        .iter()
        .filter(|r| r.best_trace.as_ref().is_some_and(|b| b.diverged))
        .count();
    let mut best_trace: Option<BestTraceSummary> = None;
    for b in per_run.iter().filter_map(|r| r.best_trace.as_ref()) {
        if best_trace.as_ref().is_none_or(|cur| b.auc < cur.auc) {
            best_trace = Some(b.clone());
        }
    }
    let mut best_found: Option<BestFoundSummary> = None;
    for b in per_run.iter().filter_map(|r| r.best_found.as_ref()) {
        let better = match &best_found {
            None => true,
            Some(cur) if cur.all_diverged => !b.all_diverged,
            Some(cur) => !b.all_diverged && b.final_loss < cur.final_loss,
        };
        if better {
            best_found = Some(b.clone());
        }
    }
    let samples: Vec<usize> = per_run
        .iter()
        .filter_map(|r| r.best_trace.as_ref().map(|b| b.samples_to_best))
        .collect();
    let mean_samples_to_best = if samples.is_empty() {
        0.0
    } else {
        samples.iter().sum::<usize>() as f64 / samples.len() as f64
    };
    StudyReport {
        algorithm: config.algorithm.label(),
        objective: config.objective.label(),
        budget_evals: config.budget_evals,
        epochs_per_eval: config.epochs_per_eval,
        runs: records.len(),
        base_seed: config.base_seed,
        total_evaluations: per_run.iter().map(|r| r.evaluations).sum(),
        divergence_fraction: if records.is_empty() {
            0.0
        } else {
            diverged as f64 / records.len() as f64
        },
        best_trace,
        best_found,
        mean_samples_to_best,
        per_run,
    }
}

/// A finished study: configuration, every run, and the report.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyOutput {
    pub config: StudyConfig,
    pub records: Vec<RunRecord>,
    pub report: StudyReport,
}

/// Runs every replication (in parallel across runs) and summarises them.
pub fn run_study(config: &StudyConfig) -> Result<StudyOutput, StudyError> {
    config.validate()?;
    let records = (0..config.runs)
        .into_par_iter()
        .map(|run| run_replication(config, run))
        .collect::<Result<Vec<_>, _>>()?;
    let report = summarize(config, &records);
    Ok(StudyOutput {
        config: config.clone(),
        records,
        report,
    })
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StudyError + '_ {
    move |source| StudyError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StudyError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| StudyError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, StudyError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| StudyError::Json {
        path: path.to_path_buf(),
        source,
    })
}

impl StudyOutput {
    /// Writes `config.json`, `summary.json`, and per run `runs/run_NNNN.json`
    /// plus `runs/run_NNNN.csv`.
    pub fn write(&self, dir: &Path) -> Result<(), StudyError> {
        let runs = dir.join("runs");
        fs::create_dir_all(&runs).map_err(io_err(&runs))?;
        write_json(&dir.join("config.json"), &self.config)?;
        for record in &self.records {
            let json = dir.join(history_file_name(record.run));
            write_json(&json, record)?;
            let csv_path = json.with_extension("csv");
            let file = fs::File::create(&csv_path).map_err(io_err(&csv_path))?;
            record.history.write_csv(io::BufWriter::new(file))?;
        }
        write_json(&dir.join("summary.json"), &self.report)
    }

    /// Reloads a study written by [`StudyOutput::write`], recomputing the
    /// report from the stored run records.
    pub fn load(dir: &Path) -> Result<Self, StudyError> {
        let config: StudyConfig = read_json(&dir.join("config.json"))?;
        let runs = dir.join("runs");
        let mut paths: Vec<PathBuf> = fs::read_dir(&runs)
            .map_err(io_err(&runs))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let mut records = Vec::with_capacity(paths.len());
        for p in &paths {
            records.push(read_json::<RunRecord>(p)?);
        }
        records.sort_by_key(|r| r.run);
        let report = summarize(&config, &records);
        Ok(Self {
            config,
            records,
            report,
        })
    }
}

/// Loads `summary.json` from a study directory.
pub fn load_report(dir: &Path) -> Result<StudyReport, StudyError> {
    read_json(&dir.join("summary.json"))
}

/// Recomputes a study's summary from its stored histories and rewrites
/// `summary.json`.
pub fn regenerate_report(dir: &Path) -> Result<StudyReport, StudyError> {
    let output = StudyOutput::load(dir)?;
    write_json(&dir.join("summary.json"), &output.report)?;
    Ok(output.report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub algorithm: String,
    pub lr: Option<f64>,
    pub auc: f64,
    pub samples_to_best: Option<usize>,
    pub winner: bool,
}

/// One row per study. The winner is the unique row with the strictly
/// smallest AUC; when the minimum is shared `tie` is set and nobody wins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub budget_evals: usize,
    pub rows: Vec<ComparisonRow>,
    pub tie: bool,
}

impl ComparisonTable {
    pub fn winner(&self) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.winner)
    }

    pub fn write_csv<W: io::Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["algorithm", "evals", "learning_rate", "auc", "samples", "best"])?;
        for r in &self.rows {
            let best = if r.winner {
                "winner"
            } else if self.tie && r.auc == self.min_auc() {
                "tie"
            } else {
                ""
            };
            w.write_record([
                r.algorithm.clone(),
                self.budget_evals.to_string(),
                r.lr.map(|v| v.to_string()).unwrap_or_default(),
                r.auc.to_string(),
                r.samples_to_best.map(|v| v.to_string()).unwrap_or_default(),
                best.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    fn min_auc(&self) -> f64 {
        self.rows.iter().map(|r| r.auc).fold(f64::INFINITY, f64::min)
    }
}

impl fmt::Display for ComparisonTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<24} {:>6} {:>14} {:>14} {:>8}  best",
            "algorithm", "evals", "learning rate", "AUC", "samples"
        )?;
        for r in &self.rows {
            let lr = r.lr.map(|v| format!("{v:.5}")).unwrap_or_else(|| "-".into());
            let auc = if r.auc >= DIVERGED_SENTINEL {
                "diverged".to_string()
            } else {
                format!("{:.4}", r.auc)
            };
            let samples = r
                .samples_to_best
                .map(|v| v.to_string())
                .unwrap_or_else(|| "-".into());
            let mark = if r.winner {
                "*"
            } else if self.tie && r.auc == self.min_auc() {
                "tie"
            } else {
                ""
            };
            writeln!(
                f,
                "{:<24} {:>6} {:>14} {:>14} {:>8}  {mark}",
                r.algorithm, self.budget_evals, lr, auc, samples
            )?;
        }
        Ok(())
    }
}

/// Compares studies run with the same evaluation budget by best-trace AUC.
pub fn compare(reports: &[StudyReport]) -> Result<ComparisonTable, StudyError> {
    if reports.len() < 2 {
        return Err(StudyError::NotEnoughReports(reports.len()));
    }
    let budget = reports[0].budget_evals;
    if let Some(other) = reports.iter().find(|r| r.budget_evals != budget) {
        return Err(StudyError::BudgetMismatch(format!(
            "{} uses {} evaluations, {} uses {}",
            reports[0].algorithm, budget, other.algorithm, other.budget_evals
        )));
    }
    let mut rows: Vec<ComparisonRow> = reports
        .iter()
        .map(|r| ComparisonRow {
            algorithm: r.algorithm.clone(),
            lr: r.best_trace.as_ref().map(|b| b.lr),
            auc: r.best_trace.as_ref().map_or(DIVERGED_SENTINEL, |b| b.auc),
            samples_to_best: r.best_trace.as_ref().map(|b| b.samples_to_best),
            winner: false,
        })
        .collect();
    let min = rows.iter().map(|r| r.auc).fold(f64::INFINITY, f64::min);
    let at_min = rows.iter().filter(|r| r.auc == min).count();
    let tie = at_min > 1;
    if !tie {
        if let Some(r) = rows.iter_mut().find(|r| r.auc == min) {
            r.winner = true;
        }
    }
    Ok(ComparisonTable {
        budget_evals: budget,
        rows,
        tie,
    })
}

/// Architectures and budgets of the ReLU divergence table. The default
/// learning-rate range reaches past the divergence threshold of all three
/// architectures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceTableConfig {
    pub architectures: Vec<(usize, usize)>,
    pub budgets: Vec<usize>,
    pub algorithms: Vec<Algorithm>,
    pub n: usize,
    pub epochs: usize,
    pub runs: usize,
    pub base_seed: u64,
    pub lr_map: LrMap,
}

impl Default for DivergenceTableConfig {
    fn default() -> Self {
        Self {
            architectures: vec![(10, 10), (20, 5), (5, 20)],
            budgets: vec![5, 10],
            algorithms: vec![
                Algorithm::Random,
                Algorithm::zooming(1.0),
                Algorithm::zooming(0.1),
            ],
            n: 1000,
            epochs: 100,
            runs: 50,
            base_seed: 0,
            lr_map: LrMap::linear(1e-4, 1.0).expect("valid range"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceRow {
    pub algorithm: String,
    pub d: usize,
    pub k: usize,
    pub evals: usize,
    pub fraction: f64,
}

impl DivergenceRow {
    pub fn matches(&self, algorithm: &Algorithm, d: usize, k: usize, evals: usize) -> bool {
        self.algorithm == algorithm.label() && self.d == d && self.k == k && self.evals == evals
    }
}

/// Fraction of diverged best-trace runs for every (algorithm, d, k, budget)
/// with ReLU teacher-student objectives.
pub fn divergence_table(config: &DivergenceTableConfig) -> Result<Vec<DivergenceRow>, StudyError> {
    let mut cells = Vec::new();
    for algorithm in &config.algorithms {
        for &(d, k) in &config.architectures {
            for &evals in &config.budgets {
                cells.push((algorithm.clone(), d, k, evals));
            }
        }
    }
    cells
        .into_par_iter()
        .map(|(algorithm, d, k, evals)| {
            let setup = DivergenceSetup {
                net: NetConfig::new(d, k, crate::teacher_student::Activation::Relu, config.n),
                evals,
                epochs: config.epochs,
                runs: config.runs,
                base_seed: config.base_seed,
                lr_map: config.lr_map,
            };
            algorithm.build(evals, 0)?;
            let fraction = divergence_fraction(&setup, |seed| {
                algorithm.build(evals, seed).expect("validated above")
            })?;
            Ok(DivergenceRow {
                algorithm: algorithm.label(),
                d,
                k,
                evals,
                fraction,
            })
        })
        .collect()
}

pub fn write_divergence_csv<W: io::Write>(rows: &[DivergenceRow], writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["algorithm", "d", "k", "evals", "divergence_fraction"])?;
    for r in rows {
        w.write_record([
            r.algorithm.clone(),
            r.d.to_string(),
            r.k.to_string(),
            r.evals.to_string(),
            r.fraction.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{HistoryEntry, TraceBuilder};
    use crate::teacher_student::Activation;

    fn entry(round: usize, coord: f64, losses: &[f64]) -> HistoryEntry {
        HistoryEntry {
            round,
            coord,
            lr: coord,
            reward: 0.5,
            trace: EvalTrace::from_losses(coord, losses),
        }
    }

    fn history(entries: Vec<HistoryEntry>) -> TuneHistory {
        let mut h = TuneHistory::new();
        for e in entries {
            h.push(e).unwrap();
        }
        h
    }

    fn report(algorithm: &str, budget: usize, auc: f64) -> StudyReport {
        StudyReport {
            algorithm: algorithm.into(),
            objective: "test".into(),
            budget_evals: budget,
            epochs_per_eval: 10,
            runs: 1,
            base_seed: 0,
            total_evaluations: budget,
            divergence_fraction: 0.0,
            best_trace: Some(BestTraceSummary {
                run: 0,
                round: 1,
                coord: 0.5,
                lr: 0.1,
                auc,
                diverged: false,
                samples_to_best: 1,
            }),
            best_found: None,
            mean_samples_to_best: 1.0,
            per_run: vec![],
        }
    }

    #[test]
    fn samples_to_best_examples() {
        assert_eq!(
            samples_to_best(&history(vec![entry(1, 0.3, &[1.0]), entry(2, 0.4, &[2.0])])),
            1
        );
        let three = history(vec![
            entry(1, 0.1, &[5.0]),
            entry(2, 0.5, &[4.0]),
            entry(3, 0.9, &[1.0]),
            entry(4, 0.9, &[1.5]),
        ]);
        assert_eq!(samples_to_best(&three), 3);
        let repeated = history(vec![
            entry(1, 0.2, &[3.0]),
            entry(2, 0.2, &[2.0]),
            entry(3, 0.2, &[1.0]),
        ]);
        assert_eq!(samples_to_best(&repeated), 1);
        assert_eq!(samples_to_best(&TuneHistory::new()), 0);
    }

    #[test]
    fn compare_examples() {
        let t = compare(&[report("zooming", 5, 68.4664), report("random", 5, 69.7590)]).unwrap();
        assert!(t.rows[0].winner && !t.rows[1].winner && !t.tie);
        assert_eq!(t.winner().unwrap().algorithm, "zooming");

        let tie = compare(&[report("a", 5, 3.0), report("b", 5, 3.0), report("c", 5, 4.0)]).unwrap();
        assert!(tie.tie && tie.winner().is_none());

        assert!(matches!(
            compare(&[report("a", 5, 1.0)]),
            Err(StudyError::NotEnoughReports(1))
        ));
        assert!(matches!(
            compare(&[report("a", 5, 1.0), report("b", 10, 2.0)]),
            Err(StudyError::BudgetMismatch(_))
        ));
    }

    #[test]
    fn winner_column_follows_auc() {
        for aucs in [[1.0, 2.0, 3.0], [3.0, 1.0, 2.0], [2.0, 2.0, 1.0]] {
            let reports: Vec<_> = aucs
                .iter()
                .enumerate()
                .map(|(i, &a)| report(&i.to_string(), 5, a))
                .collect();
            let t = compare(&reports).unwrap();
            let min = aucs.iter().cloned().fold(f64::INFINITY, f64::min);
            for (row, &a) in t.rows.iter().zip(&aucs) {
                assert_eq!(row.winner, a == min);
            }
        }
    }

    #[test]
    fn single_run_single_eval_study() {
        let mut cfg = StudyConfig::new(
            Algorithm::zooming(0.1),
            ObjectiveSpec::Synthetic {
                optimum: 0.7,
                noise_sd: 0.0,
            },
        );
        cfg.runs = 1;
        cfg.budget_evals = 1;
        cfg.epochs_per_eval = 3;
        let out = run_study(&cfg).unwrap();
        assert_eq!(out.report.total_evaluations, 1);
        let found = out.report.best_found.clone().unwrap();
        let entry = &out.records[0].history.entries()[0];
        assert_eq!((found.round, found.coord), (1, entry.coord));
        assert_eq!(out.report.best_trace.as_ref().unwrap().samples_to_best, 1);
    }

    #[test]
    fn config_validation() {
        let base = StudyConfig::new(
            Algorithm::Random,
            ObjectiveSpec::Synthetic {
                optimum: 0.7,
                noise_sd: 0.1,
            },
        );
        assert!(base.validate().is_ok());
        for broken in [
            StudyConfig {
                budget_evals: 0,
                ..base.clone()
            },
            StudyConfig {
                runs: 0,
                ..base.clone()
            },
            StudyConfig {
                epochs_per_eval: 0,
                ..base.clone()
            },
            StudyConfig {
                algorithm: Algorithm::zooming(0.0),
                ..base.clone()
            },
            StudyConfig {
                objective: ObjectiveSpec::Synthetic {
                    optimum: 1.5,
                    noise_sd: 0.1,
                },
                ..base.clone()
            },
            StudyConfig {
                objective: ObjectiveSpec::External {
                    command: ExternalCommand::new(" ", Vec::<String>::new()),
                },
                ..base.clone()
            },
        ] {
            assert!(matches!(run_study(&broken), Err(StudyError::Config(_))));
        }
    }

    #[test]
    fn budget_accounting_counts_diverged_evaluations() {
        let mut cfg = StudyConfig::new(
            Algorithm::Random,
            ObjectiveSpec::TeacherStudent {
                net: NetConfig::new(5, 20, Activation::Relu, 100),
            },
        );
        cfg.lr_map = LrMap::linear(0.0, 5.0).unwrap();
        cfg.runs = 3;
        cfg.budget_evals = 4;
        cfg.epochs_per_eval = 30;
        let out = run_study(&cfg).unwrap();
        assert_eq!(out.report.total_evaluations, 12);
        let diverged = out
            .records
            .iter()
            .flat_map(|r| r.history.entries())
            .filter(|e| e.trace.diverged())
            .count();
        assert!(diverged > 0);
    }

    #[test]
    fn divergence_table_agrees_with_study_reports() {
        let table = DivergenceTableConfig {
            architectures: vec![(5, 20)],
            budgets: vec![3],
            algorithms: vec![Algorithm::zooming(1.0)],
            n: 100,
            epochs: 30,
            runs: 6,
            base_seed: 11,
            lr_map: LrMap::linear(0.0, 1.0).unwrap(),
        };
        let rows = divergence_table(&table).unwrap();
        let mut cfg = StudyConfig::new(
            Algorithm::zooming(1.0),
            ObjectiveSpec::TeacherStudent {
                net: NetConfig::new(5, 20, Activation::Relu, 100),
            },
        );
        cfg.lr_map = table.lr_map;
        cfg.budget_evals = 3;
        cfg.epochs_per_eval = 30;
        cfg.runs = 6;
        cfg.base_seed = 11;
        let out = run_study(&cfg).unwrap();
        assert_eq!(rows[0].fraction, out.report.divergence_fraction);
    }

    #[test]
    fn report_survives_persistence() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = StudyConfig::new(
            Algorithm::Grid { arms: None },
            ObjectiveSpec::Synthetic {
                optimum: 0.3,
                noise_sd: 0.05,
            },
        );
        cfg.runs = 3;
        cfg.budget_evals = 6;
        cfg.epochs_per_eval = 2;
        let out = run_study(&cfg).unwrap();
        out.write(dir.path()).unwrap();
        let loaded = StudyOutput::load(dir.path()).unwrap();
        assert_eq!(loaded, out);
        assert_eq!(regenerate_report(dir.path()).unwrap(), out.report);
        assert_eq!(load_report(dir.path()).unwrap(), out.report);
    }

    #[test]
    fn mixed_divergence_in_report() {
        let mut b = TraceBuilder::new(1.0);
        b.record(f64::NAN, None);
        let diverged = HistoryEntry {
            round: 1,
            coord: 0.9,
            lr: 0.9,
            reward: 0.0,
            trace: b.finish(),
        };
        let records = vec![
            RunRecord {
                run: 0,
                seed: 0,
                history: history(vec![diverged.clone()]),
                failures: vec![],
            },
            RunRecord {
                run: 1,
                seed: 1,
                history: history(vec![diverged, entry(2, 0.2, &[2.0])]),
                failures: vec![],
            },
        ];
        let cfg = StudyConfig::new(
            Algorithm::Random,
            ObjectiveSpec::Synthetic {
                optimum: 0.5,
                noise_sd: 0.0,
            },
        );
        let r = summarize(&cfg, &records);
        assert_eq!(r.divergence_fraction, 0.5);
        assert!(!r.best_trace.unwrap().diverged);
        assert!(!r.best_found.unwrap().all_diverged);
    }
}
