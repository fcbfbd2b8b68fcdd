//! Comparison tuners: uniform random search and a static-grid UCB bandit.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bandit::{check_reward, confidence_radius, BanditError};
use crate::objective::{Objective, TuneHistory};
use crate::seeding::{stream_rng, TUNER_STREAM};
use crate::tuner::{tune, TuneError, Tuner};

/// Independent uniform draws from `[0, 1)`.
#[derive(Clone, Debug)]
pub struct RandomSearch {
    rng: ChaCha8Rng,
}

impl RandomSearch {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: stream_rng(seed, TUNER_STREAM),
        }
    }
}

impl Tuner for RandomSearch {
    fn ask(&mut self) -> Result<f64, BanditError> {
        Ok(self.rng.random::<f64>())
    }

    fn tell(&mut self, _coord: f64, reward: f64) -> Result<(), BanditError> {
        check_reward(reward)
    }
}

pub fn random_search<O: Objective + ?Sized>(
    budget: usize,
    objective: &mut O,
    seed: u64,
) -> Result<TuneHistory, TuneError> {
    tune(&mut RandomSearch::new(seed), budget, objective)
}

/// Default grid size for a budget: half the budget rounded up, at least 2.
pub fn default_grid_arms(budget: usize) -> usize {
    budget.div_ceil(2).max(2)
}

/// `K` equally spaced arms `i / (K - 1)`. Each is played once in order, then
/// the arm maximising `mean + 2 * sqrt(2 / (n + 1))` is played, with ties to
/// the smallest coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridBanditState {
    coords: Vec<f64>,
    plays: Vec<u64>,
    reward_sums: Vec<f64>,
    round: u64,
}

impl GridBanditState {
    pub fn new(arms: usize) -> Self {
        assert!(arms >= 2, "a grid needs at least two arms");
        let last = (arms - 1) as f64;
        Self {
            coords: (0..arms).map(|i| i as f64 / last).collect(),
            plays: vec![0; arms],
            reward_sums: vec![0.0; arms],
            round: 1,
        }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn plays(&self) -> &[u64] {
        &self.plays
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn mean(&self, arm: usize) -> f64 {
        if self.plays[arm] == 0 {
            0.0
        } else {
            self.reward_sums[arm] / self.plays[arm] as f64
        }
    }

    pub fn index(&self, arm: usize) -> f64 {
        self.mean(arm) + 2.0 * confidence_radius(self.plays[arm], 1.0)
    }

    fn select(&self) -> usize {
        if let Some(unplayed) = self.plays.iter().position(|&n| n == 0) {
            return unplayed;
        }
        let mut best = 0;
        for arm in 1..self.coords.len() {
            if self.index(arm) > self.index(best) {
                best = arm;
            }
        }
        best
    }
}

impl Tuner for GridBanditState {
    fn ask(&mut self) -> Result<f64, BanditError> {
        Ok(self.coords[self.select()])
    }

    fn tell(&mut self, coord: f64, reward: f64) -> Result<(), BanditError> {
        check_reward(reward)?;
        let arm = self
            .coords
            .iter()
            .position(|&c| c == coord)
            .ok_or(BanditError::ArmNotActive(coord))?;
        self.plays[arm] += 1;
        self.reward_sums[arm] += reward;
        self.round += 1;
        Ok(())
    }
}

pub fn grid_ucb<O: Objective + ?Sized>(
    budget: usize,
    arms: usize,
    objective: &mut O,
) -> Result<TuneHistory, TuneError> {
    tune(&mut GridBanditState::new(arms), budget, objective)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{EvalError, EvalTrace, Evaluation};

    fn deterministic(mu: impl Fn(f64) -> f64) -> impl FnMut(usize, f64) -> Result<Evaluation, EvalError> {
        move |_, c| {
            let r = mu(c);
            Ok(Evaluation {
                lr: c,
                reward: r,
                trace: EvalTrace::from_losses(c, &[1.0 - r]),
            })
        }
    }

    #[test]
    fn random_search_is_seeded_and_in_range() {
        let mut obj = deterministic(|c| c);
        let a = random_search(20, &mut obj, 4).unwrap();
        let b = random_search(20, &mut obj, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.coords().all(|c| (0.0..1.0).contains(&c)));
        assert_eq!(random_search(1, &mut obj, 4).unwrap().len(), 1);
        let c = random_search(20, &mut obj, 5).unwrap();
        assert_ne!(a.coords().collect::<Vec<_>>(), c.coords().collect::<Vec<_>>());
    }

    #[test]
    fn random_search_mean_is_one_half() {
        let mut t = RandomSearch::new(77);
        let n = 10_000;
        let mean = (0..n).map(|_| t.ask().unwrap()).sum::<f64>() / n as f64;
        // 3 sigma of the mean of uniforms is 3 * sqrt(1/12) / 100 ~ 0.0087
        assert!((mean - 0.5).abs() < 0.015, "{mean}");
    }

    #[test]
    fn grid_layout_and_warm_up() {
        let g = GridBanditState::new(5);
        assert_eq!(g.coords(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        let mut obj = deterministic(|c| c);
        let h = grid_ucb(5, 5, &mut obj).unwrap();
        assert_eq!(h.coords().collect::<Vec<_>>(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(default_grid_arms(5), 3);
        assert_eq!(default_grid_arms(1), 2);
        assert_eq!(default_grid_arms(10), 5);
    }

    #[test]
    fn grid_index_prefers_less_played_arm() {
        let mut g = GridBanditState::new(2);
        g.plays = vec![7, 49];
        g.reward_sums = vec![0.6 * 7.0, 0.9 * 49.0];
        assert!((g.index(0) - 1.6).abs() < 1e-12);
        assert!((g.index(1) - 1.3).abs() < 1e-12);
        assert_eq!(g.ask().unwrap(), 0.0);
    }

    #[test]
    fn grid_concentrates_on_better_arm() {
        // Oracle: replay the index recursion by hand with plain arrays.
        let rewards = [0.2, 0.9];
        let mut n = [0u64; 2];
        let mut s = [0.0f64; 2];
        let mut expected = Vec::new();
        for _ in 0..20 {
            let arm = if let Some(a) = n.iter().position(|&x| x == 0) {
                a
            } else {
                let idx = |a: usize| s[a] / n[a] as f64 + 2.0 * (2.0 / (n[a] as f64 + 1.0)).sqrt();
                if idx(1) > idx(0) {
                    1
                } else {
                    0
                }
            };
            n[arm] += 1;
            s[arm] += rewards[arm];
            expected.push(arm as f64);
        }
        let mut obj = deterministic(|c| if c == 0.0 { 0.2 } else { 0.9 });
        let h = grid_ucb(20, 2, &mut obj).unwrap();
        assert_eq!(h.coords().collect::<Vec<_>>(), expected);
        assert!(n[1] >= 12, "{n:?}");
    }

    #[test]
    fn grid_rejects_off_grid_and_unnormalized() {
        let mut g = GridBanditState::new(3);
        assert_eq!(g.tell(0.3, 0.5), Err(BanditError::ArmNotActive(0.3)));
        assert!(g.tell(0.5, -0.1).is_err());
        assert!(RandomSearch::new(0).tell(0.5, 2.0).is_err());
    }
}
