//! The ask/tell interface shared by every search algorithm, and the
//! sequential loop that drives one study run.

use thiserror::Error;

use crate::bandit::BanditError;
use crate::objective::{EvalError, HistoryEntry, Objective, ObjectiveError, TuneHistory};

/// A sequential learning-rate search over the arm space `[0, 1]`.
pub trait Tuner {
    /// Next arm to evaluate.
    fn ask(&mut self) -> Result<f64, BanditError>;
    /// Reports the normalised reward observed at `coord`.
    fn tell(&mut self, coord: f64, reward: f64) -> Result<(), BanditError>;
}

impl<T: Tuner + ?Sized> Tuner for Box<T> {
    fn ask(&mut self) -> Result<f64, BanditError> {
        (**self).ask()
    }

    fn tell(&mut self, coord: f64, reward: f64) -> Result<(), BanditError> {
        (**self).tell(coord, reward)
    }
}

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("budget must be at least one evaluation")]
    EmptyBudget,
    #[error("evaluation failed at round {round}: {source}")]
    Evaluation {
        round: usize,
        #[source]
        source: Box<EvalError>,
        /// Rounds completed before the failure.
        history: Box<TuneHistory>,
    },
    #[error(transparent)]
    Bandit(#[from] BanditError),
    #[error(transparent)]
    History(#[from] ObjectiveError),
}

/// Runs exactly `budget` ask / evaluate / tell rounds.
pub fn tune<T, O>(tuner: &mut T, budget: usize, objective: &mut O) -> Result<TuneHistory, TuneError>
where
    T: Tuner + ?Sized,
    O: Objective + ?Sized,
{
    if budget == 0 {
        return Err(TuneError::EmptyBudget);
    }
    let mut history = TuneHistory::new();
    for round in 1..=budget {
        let coord = tuner.ask()?;
        let eval = match objective.evaluate(round, coord) {
            Ok(eval) => eval,
            Err(source) => {
                return Err(TuneError::Evaluation {
                    round,
                    source: Box::new(source),
                    history: Box::new(history),
                })
            }
        };
        tuner.tell(coord, eval.reward)?;
        history.push(HistoryEntry {
            round,
            coord,
            lr: eval.lr,
            reward: eval.reward,
            trace: eval.trace,
        })?;
    }
    Ok(history)
}
