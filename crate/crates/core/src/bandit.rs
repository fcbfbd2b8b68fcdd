//! The Zooming algorithm over the arm space `[0, 1]`.
//!
//! The metric is `D(x, y) = |x - y|`. Each active arm owns a closed
//! confidence ball whose radius shrinks with its play count. Every round
//! first activates arms until the balls cover `[0, 1]`, then plays the
//! active arm with the largest index `mean + 2 * radius`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objective::{Objective, TuneHistory};
use crate::seeding::{stream_rng, TUNER_STREAM};
use crate::tuner::{tune, TuneError, Tuner};

/// Radius scale used when none is given: the shrunken-radius variant.
pub const DEFAULT_RADIUS_SCALE: f64 = 0.1;

/// Mean assigned to an arm before its first play: the upper end of the
/// normalised reward range.
pub const UNPLAYED_MEAN: f64 = 1.0;

/// Rejection attempts before a sliver of uncovered region is treated as
/// floating-point noise.
const MAX_ACTIVATION_DRAWS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BanditError {
    #[error("select before activation: the active set is empty")]
    NoActiveArms,
    #[error("arm not active: {0}")]
    ArmNotActive(f64),
    #[error("unnormalized reward {0}: rewards must lie in [0, 1]")]
    UnnormalizedReward(f64),
    #[error("radius scale {0} outside (0, 1]")]
    InvalidRadiusScale(f64),
    #[error("invalid state snapshot: {0}")]
    Snapshot(String),
}

/// `min(1, scale * sqrt(2 / (plays + 1)))`.
///
/// The clamp makes a fresh arm's radius exactly 1, which already covers the
/// whole arm space from any centre.
pub fn confidence_radius(plays: u64, radius_scale: f64) -> f64 {
    (radius_scale * (2.0 / (plays as f64 + 1.0)).sqrt()).min(1.0)
}

pub(crate) fn check_reward(reward: f64) -> Result<(), BanditError> {
    if (0.0..=1.0).contains(&reward) {
        Ok(())
    } else {
        Err(BanditError::UnnormalizedReward(reward))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActiveArm {
    coord: f64,
    plays: u64,
    reward_sum: f64,
}

impl ActiveArm {
    pub fn new(coord: f64) -> Self {
        assert!(
            (0.0..=1.0).contains(&coord),
            "arm coordinate {coord} outside [0, 1]"
        );
        Self {
            coord,
            plays: 0,
            reward_sum: 0.0,
        }
    }

    /// An arm with existing statistics, mostly useful for tests and replays.
    pub fn with_stats(coord: f64, plays: u64, reward_sum: f64) -> Self {
        assert!(reward_sum.is_finite());
        Self {
            plays,
            reward_sum,
            ..Self::new(coord)
        }
    }

    pub fn coord(&self) -> f64 {
        self.coord
    }

    pub fn plays(&self) -> u64 {
        self.plays
    }

    pub fn reward_sum(&self) -> f64 {
        self.reward_sum
    }

    /// Empirical mean reward; [`UNPLAYED_MEAN`] for an arm that has never
    /// been played.
    pub fn mean(&self) -> f64 {
        if self.plays == 0 {
            UNPLAYED_MEAN
        } else {
            self.reward_sum / self.plays as f64
        }
    }
}

/// Closed ball `{y : |y - center| <= radius}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ball {
    center: f64,
    radius: f64,
}

impl Ball {
    pub fn new(center: f64, radius: f64) -> Option<Self> {
        (radius > 0.0).then_some(Self { center, radius })
    }

    pub fn center(&self) -> f64 {
        self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn contains(&self, x: f64) -> bool {
        (x - self.center).abs() <= self.radius
    }
}

/// A sub-interval of `[0, 1]` with `lo < hi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn is_empty(&self) -> bool {
        self.hi <= self.lo
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

/// Active arms (sorted by coordinate), the round counter, the radius scale
/// and the activation RNG.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ZoomingState {
    active: Vec<ActiveArm>,
    round: u64,
    radius_scale: f64,
    seed: u64,
    rng: ChaCha8Rng,
}

impl PartialEq for ZoomingState {
    fn eq(&self, other: &Self) -> bool {
        self.active == other.active
            && self.round == other.round
            && self.radius_scale == other.radius_scale
            && self.seed == other.seed
            && self.rng == other.rng
    }
}

impl ZoomingState {
    pub fn new(radius_scale: f64, seed: u64) -> Result<Self, BanditError> {
        if !(radius_scale > 0.0 && radius_scale <= 1.0) {
            return Err(BanditError::InvalidRadiusScale(radius_scale));
        }
        Ok(Self {
            active: Vec::new(),
            round: 1,
            radius_scale,
            seed,
            rng: stream_rng(seed, TUNER_STREAM),
        })
    }

    /// Builds a state from existing arms. Round is set to one past the total
    /// play count so the round invariant holds.
    pub fn with_arms(
        radius_scale: f64,
        seed: u64,
        arms: impl IntoIterator<Item = ActiveArm>,
    ) -> Result<Self, BanditError> {
        let mut state = Self::new(radius_scale, seed)?;
        for arm in arms {
            state.insert(arm);
        }
        state.round = 1 + state.total_plays();
        Ok(state)
    }

    pub fn active(&self) -> &[ActiveArm] {
        &self.active
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn radius_scale(&self) -> f64 {
        self.radius_scale
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn total_plays(&self) -> u64 {
        self.active.iter().map(|a| a.plays).sum()
    }

    pub fn radius(&self, arm: &ActiveArm) -> f64 {
        confidence_radius(arm.plays, self.radius_scale)
    }

    pub fn ball(&self, arm: &ActiveArm) -> Ball {
        Ball {
            center: arm.coord,
            radius: self.radius(arm),
        }
    }

    /// `mean + 2 * radius`.
    pub fn index(&self, arm: &ActiveArm) -> f64 {
        arm.mean() + 2.0 * self.radius(arm)
    }

    pub fn is_covered(&self, x: f64) -> bool {
        self.active.iter().any(|a| self.ball(a).contains(x))
    }

    /// Maximal sorted sub-intervals of `[0, 1]` outside every confidence
    /// ball. Interval endpoints touching a ball are themselves covered.
    pub fn uncovered_region(&self) -> Vec<Interval> {
        let mut spans: Vec<(f64, f64)> = self
            .active
            .iter()
            .map(|a| {
                let r = self.radius(a);
                (a.coord - r, a.coord + r)
            })
            .collect();
        spans.sort_by(|a, b| a.0.total_cmp(&b.0));

        let mut gaps = Vec::new();
        // Everything below `reach` is covered, except 0 itself before the first ball.
        let mut reach = 0.0_f64;
        for (lo, hi) in spans {
            if lo > reach {
                gaps.push(Interval {
                    lo: reach,
                    hi: lo.min(1.0),
                });
            }
            reach = reach.max(hi);
            if reach >= 1.0 {
                break;
            }
        }
        if reach < 1.0 {
            gaps.push(Interval { lo: reach, hi: 1.0 });
        }
        // Drop slivers that only exist because of rounding at ball edges.
        gaps.retain(|g| !g.is_empty() && !self.is_covered(0.5 * (g.lo + g.hi)));
        gaps
    }

    /// Activates one uncovered arm drawn uniformly from the uncovered region.
    /// Returns `None` (leaving the state untouched) when `[0, 1]` is covered.
    pub fn activation_step(&mut self) -> Option<ActiveArm> {
        let region = self.uncovered_region();
        let total: f64 = region.iter().map(Interval::len).sum();
        if region.is_empty() || total <= 0.0 {
            return None;
        }
        for _ in 0..MAX_ACTIVATION_DRAWS {
            let mut offset = self.rng.random::<f64>() * total;
            let mut x = region[region.len() - 1].hi;
            for interval in &region {
                if offset <= interval.len() {
                    x = (interval.lo + offset).min(interval.hi);
                    break;
                }
                offset -= interval.len();
            }
            if !self.is_covered(x) {
                let arm = ActiveArm::new(x);
                self.insert(arm.clone());
                return Some(arm);
            }
        }
        None
    }

    /// Runs the activation rule until `[0, 1]` is covered; returns how many
    /// arms were activated.
    pub fn activate_until_covered(&mut self) -> usize {
        let mut count = 0;
        while self.activation_step().is_some() {
            count += 1;
        }
        count
    }

    /// Coordinate of the active arm with the largest index; ties go to the
    /// smallest coordinate.
    pub fn select_arm(&self) -> Result<f64, BanditError> {
        let mut best: Option<(f64, f64)> = None;
        for arm in &self.active {
            let index = self.index(arm);
            match best {
                Some((_, b)) if index <= b => {}
                _ => best = Some((arm.coord, index)),
            }
        }
        best.map(|(c, _)| c).ok_or(BanditError::NoActiveArms)
    }

    pub fn update(&mut self, coord: f64, reward: f64) -> Result<(), BanditError> {
        check_reward(reward)?;
        let pos = self.position(coord).ok_or(BanditError::ArmNotActive(coord))?;
        let arm = &mut self.active[pos];
        arm.plays += 1;
        arm.reward_sum += reward;
        self.round += 1;
        Ok(())
    }

    /// Runs `budget` rounds against `objective`.
    pub fn run<O: Objective + ?Sized>(
        &mut self,
        budget: usize,
        objective: &mut O,
    ) -> Result<TuneHistory, TuneError> {
        tune(self, budget, objective)
    }

    /// JSON snapshot including the RNG position, suitable for resuming.
    pub fn snapshot(&self) -> String {
        serde_json::to_string(self).expect("zooming state serializes")
    }

    pub fn from_snapshot(text: &str) -> Result<Self, BanditError> {
        let state: Self = serde_json::from_str(text).map_err(|e| BanditError::Snapshot(e.to_string()))?;
        if !(state.radius_scale > 0.0 && state.radius_scale <= 1.0) {
            return Err(BanditError::InvalidRadiusScale(state.radius_scale));
        }
        let sorted = state.active.windows(2).all(|w| w[0].coord < w[1].coord);
        let in_range = state.active.iter().all(|a| (0.0..=1.0).contains(&a.coord));
        if !sorted || !in_range || state.round != 1 + state.total_plays() {
            return Err(BanditError::Snapshot("inconsistent arm set".into()));
        }
        Ok(state)
    }

    fn position(&self, coord: f64) -> Option<usize> {
        self.active.binary_search_by(|a| a.coord.total_cmp(&coord)).ok()
    }

    fn insert(&mut self, arm: ActiveArm) {
        match self.active.binary_search_by(|a| a.coord.total_cmp(&arm.coord)) {
            Ok(_) => {}
            Err(pos) => self.active.insert(pos, arm),
        }
    }
}

impl Tuner for ZoomingState {
    fn ask(&mut self) -> Result<f64, BanditError> {
        self.activate_until_covered();
        self.select_arm()
    }

    fn tell(&mut self, coord: f64, reward: f64) -> Result<(), BanditError> {
        self.update(coord, reward)
    }
}
