//! Learning-rate tuning as a continuum-armed Lipschitz bandit.
//!
//! The learning rate is mapped onto the arm space `[0, 1]` and searched with
//! the Zooming algorithm, which keeps a growing set of active arms whose
//! confidence balls cover the whole interval and always plays the arm with
//! the largest optimistic index. Random search and a static-grid UCB bandit
//! share the same [`Tuner`] interface so studies can compare them on equal
//! terms.
//!
//! Modules:
//!
//! - [`bandit`]: the Zooming state machine (activation, selection, update).
//! - [`objective`]: learning-rate maps, evaluation traces, rewards and the
//!   best-trace / best-found metrics.
//! - [`external`]: newline-delimited JSON protocol for out-of-process trainers.
//! - [`teacher_student`]: the synthetic single-hidden-layer benchmark.
//! - [`baselines`]: random search and static-grid UCB.
//! - [`experiments`]: seeded studies, reports and comparison tables.

pub mod bandit;
pub mod baselines;
pub mod experiments;
pub mod external;
pub mod objective;
pub mod seeding;
pub mod teacher_student;
pub mod tuner;

pub use bandit::{confidence_radius, ActiveArm, Ball, BanditError, Interval, ZoomingState, UNPLAYED_MEAN};
pub use baselines::{grid_ucb, random_search, GridBanditState, RandomSearch};
pub use experiments::{
    compare, run_study, samples_to_best, Algorithm, ComparisonTable, ObjectiveSpec, StudyConfig, StudyError,
    StudyOutput, StudyReport,
};
pub use external::{evaluate_external, ExternalCommand, ExternalError};
pub use objective::{
    auc, best_found, best_trace, denormalize, reward_of, EvalError, EvalTrace, Evaluation, HistoryEntry,
    LrMap, LrScale, Objective, RewardSource, RewardSpec, TuneHistory,
};
pub use teacher_student::{Activation, Dataset, NetConfig, Weights};
pub use tuner::{tune, TuneError, Tuner};
