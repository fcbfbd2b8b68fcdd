//! Evaluation traces, rewards and comparison metrics.

use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A loss this many times larger than the reference loss counts as divergence.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

/// Stand-in for the final loss and AUC of a diverged trace, so divergence
/// never wins a minimisation.
pub const DIVERGED_SENTINEL: f64 = f64::MAX;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("invalid learning-rate map [{lo}, {hi}] ({scale:?})")]
    InvalidLrMap { lo: f64, hi: f64, scale: LrScale },
    #[error("invalid reward clip range [{lo}, {hi}]")]
    InvalidClip { lo: f64, hi: f64 },
    #[error("trace records no epochs")]
    EmptyTrace,
    #[error("accuracy reward requested but the trace records no accuracy")]
    MissingAccuracy,
    #[error("history rounds must increase strictly (got {got} after {after})")]
    RoundOrder { got: usize, after: usize },
    #[error("history reward {0} outside [0, 1]")]
    RewardRange(f64),
}

/// Failure of a single evaluation. `partial` holds whatever the trainer
/// produced before failing, already flagged as diverged.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{message}")]
pub struct EvalError {
    pub message: String,
    pub partial: Option<Box<EvalTrace>>,
}

impl EvalError {
    pub fn new(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            partial: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrScale {
    Linear,
    Logarithmic,
}

/// Bijection between the arm space `[0, 1]` and `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrMap {
    lo: f64,
    hi: f64,
    scale: LrScale,
}

impl Default for LrMap {
    fn default() -> Self {
        Self {
            lo: 1e-4,
            hi: 0.2,
            scale: LrScale::Linear,
        }
    }
}

impl LrMap {
    /// A linear map accepts `lo = 0`; a logarithmic one needs `lo > 0`.
    pub fn new(lo: f64, hi: f64, scale: LrScale) -> Result<Self, ObjectiveError> {
        let lo_ok = match scale {
            LrScale::Linear => lo >= 0.0,
            LrScale::Logarithmic => lo > 0.0,
        };
        if lo_ok && hi.is_finite() && lo < hi {
            Ok(Self { lo, hi, scale })
        } else {
            Err(ObjectiveError::InvalidLrMap { lo, hi, scale })
        }
    }

    pub fn linear(lo: f64, hi: f64) -> Result<Self, ObjectiveError> {
        Self::new(lo, hi, LrScale::Linear)
    }

    pub fn logarithmic(lo: f64, hi: f64) -> Result<Self, ObjectiveError> {
        Self::new(lo, hi, LrScale::Logarithmic)
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn scale(&self) -> LrScale {
        self.scale
    }

    pub fn denormalize(&self, coord: f64) -> f64 {
        let c = coord.clamp(0.0, 1.0);
        match self.scale {
            LrScale::Linear => self.lo + c * (self.hi - self.lo),
            LrScale::Logarithmic => self.lo * (self.hi / self.lo).powf(c),
        }
    }

    pub fn normalize(&self, lr: f64) -> f64 {
        let c = match self.scale {
            LrScale::Linear => (lr - self.lo) / (self.hi - self.lo),
            LrScale::Logarithmic => (lr / self.lo).ln() / (self.hi / self.lo).ln(),
        };
        c.clamp(0.0, 1.0)
    }
}

pub fn denormalize(coord: f64, map: &LrMap) -> f64 {
    map.denormalize(coord)
}

/// Per-epoch record of one training run at a fixed learning rate.
///
/// Only finite losses are stored. A trace is diverged once a loss is
/// non-finite, exceeds [`DIVERGENCE_FACTOR`] times the reference loss, or the
/// trainer reports divergence itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTrace {
    lr: f64,
    /// Loss before the first update, when the trainer knows it.
    initial_loss: Option<f64>,
    epoch_losses: Vec<f64>,
    epoch_accuracies: Option<Vec<f64>>,
    diverged: bool,
    final_loss: f64,
    final_accuracy: Option<f64>,
}

impl EvalTrace {
    pub fn builder(lr: f64) -> TraceBuilder {
        TraceBuilder::new(lr)
    }

    /// Completed, non-diverged trace from a list of losses.
    pub fn from_losses(lr: f64, losses: &[f64]) -> Self {
        let mut b = TraceBuilder::new(lr);
        for &l in losses {
            b.record(l, None);
        }
        b.finish()
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.initial_loss
    }

    pub fn epoch_losses(&self) -> &[f64] {
        &self.epoch_losses
    }

    pub fn epoch_accuracies(&self) -> Option<&[f64]> {
        self.epoch_accuracies.as_deref()
    }

    pub fn epochs(&self) -> usize {
        self.epoch_losses.len()
    }

    pub fn diverged(&self) -> bool {
        self.diverged
    }

    pub fn final_loss(&self) -> f64 {
        self.final_loss
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.final_accuracy
    }

    /// Loss used to anchor reward normalisation: the pre-training loss, or
    /// the first recorded epoch when that is unknown.
    pub fn reference_loss(&self) -> Option<f64> {
        self.initial_loss.or_else(|| self.epoch_losses.first().copied())
    }

    /// Appends `other`'s epochs; used to check metric additivity.
    pub fn concat(&self, other: &EvalTrace) -> EvalTrace {
        let mut b = TraceBuilder::new(self.lr);
        if let Some(l) = self.initial_loss {
            b = b.with_initial_loss(l);
        }
        for t in [self, other] {
            for (i, &l) in t.epoch_losses.iter().enumerate() {
                b.record(l, t.epoch_accuracies.as_ref().map(|a| a[i]));
            }
        }
        if self.diverged || other.diverged {
            b.mark_diverged();
        }
        b.finish()
    }
}

/// Incremental construction of an [`EvalTrace`].
#[derive(Clone, Debug)]
pub struct TraceBuilder {
    lr: f64,
    initial_loss: Option<f64>,
    losses: Vec<f64>,
    accuracies: Vec<Option<f64>>,
    diverged: bool,
}

impl TraceBuilder {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            initial_loss: None,
            losses: Vec::new(),
            accuracies: Vec::new(),
            diverged: false,
        }
    }

    pub fn with_initial_loss(mut self, loss: f64) -> Self {
        if loss.is_finite() {
            self.initial_loss = Some(loss);
        } else {
            self.diverged = true;
        }
        self
    }

    fn threshold(&self) -> Option<f64> {
        self.initial_loss
            .or_else(|| self.losses.first().copied())
            .filter(|&r| r > 0.0)
            .map(|r| DIVERGENCE_FACTOR * r)
    }

    /// Records one epoch. Returns `false` once the trace has diverged; later
    /// records are ignored.
    pub fn record(&mut self, loss: f64, accuracy: Option<f64>) -> bool {
        if self.diverged {
            return false;
        }
        if !loss.is_finite() {
            self.diverged = true;
            return false;
        }
        if self.threshold().is_some_and(|t| loss > t) {
            self.diverged = true;
        }
        self.losses.push(loss);
        self.accuracies.push(accuracy);
        !self.diverged
    }

    pub fn mark_diverged(&mut self) {
        self.diverged = true;
    }

    pub fn is_diverged(&self) -> bool {
        self.diverged
    }

    pub fn epochs(&self) -> usize {
        self.losses.len()
    }

    pub fn finish(self) -> EvalTrace {
        let epoch_accuracies = if !self.accuracies.is_empty() && self.accuracies.iter().all(Option::is_some) {
            Some(self.accuracies.iter().map(|a| a.unwrap()).collect::<Vec<_>>())
        } else {
            None
        };
        let final_loss = match (self.diverged, self.losses.last()) {
            (false, Some(&l)) => l,
            (false, None) => self.initial_loss.unwrap_or(DIVERGED_SENTINEL),
            (true, _) => DIVERGED_SENTINEL,
        };
        let final_accuracy = epoch_accuracies.as_ref().and_then(|a| a.last().copied());
        EvalTrace {
            lr: self.lr,
            initial_loss: self.initial_loss,
            epoch_losses: self.losses,
            epoch_accuracies,
            diverged: self.diverged,
            final_loss,
            final_accuracy,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSource {
    NegativeLoss,
    Accuracy,
}

/// How a finished trace becomes a reward in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    source: RewardSource,
    clip_lo: f64,
    clip_hi: f64,
}

impl RewardSpec {
    pub fn new(source: RewardSource, clip_lo: f64, clip_hi: f64) -> Result<Self, ObjectiveError> {
        if clip_lo.is_finite() && clip_hi.is_finite() && clip_lo < clip_hi {
            Ok(Self {
                source,
                clip_lo,
                clip_hi,
            })
        } else {
            Err(ObjectiveError::InvalidClip {
                lo: clip_lo,
                hi: clip_hi,
            })
        }
    }

    pub fn negative_loss(clip_lo: f64, clip_hi: f64) -> Result<Self, ObjectiveError> {
        Self::new(RewardSource::NegativeLoss, clip_lo, clip_hi)
    }

    pub fn accuracy() -> Self {
        Self {
            source: RewardSource::Accuracy,
            clip_lo: 0.0,
            clip_hi: 100.0,
        }
    }

    pub fn source(&self) -> RewardSource {
        self.source
    }

    pub fn clip_lo(&self) -> f64 {
        self.clip_lo
    }

    pub fn clip_hi(&self) -> f64 {
        self.clip_hi
    }
}

/// Maps a trace to `[0, 1]`. Losses at or below `clip_lo` score 1, at or
/// above `clip_hi` score 0; accuracy is read as a percentage. Diverged
/// traces score 0.
pub fn reward_of(trace: &EvalTrace, spec: &RewardSpec) -> Result<f64, ObjectiveError> {
    if trace.diverged {
        return Ok(0.0);
    }
    let r = match spec.source {
        RewardSource::NegativeLoss => (spec.clip_hi - trace.final_loss) / (spec.clip_hi - spec.clip_lo),
        RewardSource::Accuracy => trace.final_accuracy.ok_or(ObjectiveError::MissingAccuracy)? / 100.0,
    };
    Ok(if r.is_nan() { 0.0 } else { r.clamp(0.0, 1.0) })
}

/// Area under the loss curve: the plain sum of per-epoch losses.
pub fn auc(trace: &EvalTrace) -> Result<f64, ObjectiveError> {
    if trace.diverged {
        return Ok(DIVERGED_SENTINEL);
    }
    if trace.epoch_losses.is_empty() {
        return Err(ObjectiveError::EmptyTrace);
    }
    Ok(trace.epoch_losses.iter().sum())
}

/// Scores `trace`, first fixing the clip range to `[0, reference loss]`
/// from this trace when `spec` is still unset.
pub fn auto_reward(spec: &mut Option<RewardSpec>, trace: &EvalTrace) -> Result<f64, EvalError> {
    if spec.is_none() {
        if let Some(r) = trace.reference_loss().filter(|r| r.is_finite() && *r > 0.0) {
            *spec = RewardSpec::negative_loss(0.0, r).ok();
        }
    }
    match spec {
        Some(s) => reward_of(trace, s).map_err(|e| EvalError::new(e.to_string())),
        None if trace.diverged() => Ok(0.0),
        // Zero reference loss: nothing left to learn.
        None => Ok(1.0),
    }
}

fn auc_or_sentinel(trace: &EvalTrace) -> f64 {
    auc(trace).unwrap_or(DIVERGED_SENTINEL)
}

/// Outcome of one objective evaluation as seen by a tuner.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub lr: f64,
    pub reward: f64,
    pub trace: EvalTrace,
}

/// Anything that turns an arm coordinate into a reward and a trace.
pub trait Objective {
    fn evaluate(&mut self, round: usize, coord: f64) -> Result<Evaluation, EvalError>;
}

impl<F> Objective for F
where
    F: FnMut(usize, f64) -> Result<Evaluation, EvalError>,
{
    fn evaluate(&mut self, round: usize, coord: f64) -> Result<Evaluation, EvalError> {
        self(round, coord)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub round: usize,
    pub coord: f64,
    pub lr: f64,
    pub reward: f64,
    pub trace: EvalTrace,
}

/// Ordered record of every evaluation in one study run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TuneHistory {
    entries: Vec<HistoryEntry>,
}

impl TuneHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: HistoryEntry) -> Result<(), ObjectiveError> {
        if let Some(last) = self.entries.last() {
            if entry.round <= last.round {
                return Err(ObjectiveError::RoundOrder {
                    got: entry.round,
                    after: last.round,
                });
            }
        }
        if !(0.0..=1.0).contains(&entry.reward) {
            return Err(ObjectiveError::RewardRange(entry.reward));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[HistoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn coords(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.coord)
    }

    /// One CSV row per recorded epoch: `round,coord,lr,epoch,loss,accuracy`.
    pub fn write_csv<W: io::Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["round", "coord", "lr", "epoch", "loss", "accuracy"])?;
        for e in &self.entries {
            let accs = e.trace.epoch_accuracies();
            for (i, loss) in e.trace.epoch_losses().iter().enumerate() {
                let acc = accs.map(|a| a[i].to_string()).unwrap_or_default();
                w.write_record([
                    e.round.to_string(),
                    e.coord.to_string(),
                    e.lr.to_string(),
                    (i + 1).to_string(),
                    loss.to_string(),
                    acc,
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// The entry with the smallest AUC in a history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BestTrace<'a> {
    pub entry: &'a HistoryEntry,
    pub auc: f64,
}

/// Minimal-AUC entry; ties go to the earliest round.
pub fn best_trace(history: &TuneHistory) -> Option<BestTrace<'_>> {
    let mut best: Option<BestTrace<'_>> = None;
    for entry in &history.entries {
        let a = auc_or_sentinel(&entry.trace);
        if best.is_none_or(|b| a < b.auc) {
            best = Some(BestTrace { entry, auc: a });
        }
    }
    best
}

/// Best-trace entry for each labelled history.
pub fn best_traces<'a>(histories: &[(&'a str, &'a TuneHistory)]) -> Vec<(&'a str, Option<BestTrace<'a>>)> {
    histories.iter().map(|&(name, h)| (name, best_trace(h))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BestFound<'a> {
    pub entry: &'a HistoryEntry,
    /// Set when every entry diverged; `entry` is then the first one.
    pub all_diverged: bool,
}

/// Entry with the lowest final loss (or highest final accuracy) among
/// non-diverged entries; ties go to the earliest round.
pub fn best_found(history: &TuneHistory, by: RewardSource) -> Option<BestFound<'_>> {
    let first = history.entries.first()?;
    let score = |e: &HistoryEntry| match by {
        RewardSource::NegativeLoss => -e.trace.final_loss,
        RewardSource::Accuracy => e.trace.final_accuracy.unwrap_or(f64::NEG_INFINITY),
    };
    let mut best: Option<(&HistoryEntry, f64)> = None;
    for e in history.entries.iter().filter(|e| !e.trace.diverged) {
        let s = score(e);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((e, s));
        }
    }
    Some(match best {
        Some((entry, _)) => BestFound {
            entry,
            all_diverged: false,
        },
        None => BestFound {
            entry: first,
            all_diverged: true,
        },
    })
}
