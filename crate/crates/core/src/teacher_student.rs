//! Teacher-student benchmark: a planted single-hidden-layer network.
//!
//! Both networks compute `f(x) = sum_j act(w_j . x)` with a fixed all-ones
//! output layer and no biases; only the first-layer matrix `W` (k x d) is
//! learned. Teacher weights, inputs and student initialisations are i.i.d.
//! standard normal. The student is fitted with full-batch gradient descent on
//! the mean squared error against the teacher's outputs.

use ndarray::{Array1, Array2, ArrayView1, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::objective::{auto_reward, best_trace, EvalError, EvalTrace, Evaluation, LrMap, Objective};
use crate::objective::{RewardSpec, TraceBuilder};
use crate::seeding::{run_seed, stream_rng, INIT_STREAM, OBJECTIVE_STREAM};
use crate::tuner::{tune, TuneError, Tuner};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative; the ReLU subgradient at 0 is taken as 0.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = self.apply(z);
                s * (1.0 - s)
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(format!("unknown activation `{other}` (expected relu or sigmoid)")),
        }
    }
}

/// Network and dataset dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Input width.
    pub d: usize,
    /// Hidden width.
    pub k: usize,
    pub activation: Activation,
    /// Number of samples.
    pub n: usize,
}

impl NetConfig {
    pub fn new(d: usize, k: usize, activation: Activation, n: usize) -> Self {
        assert!(d >= 1 && k >= 1 && n >= 1, "network dimensions must be positive");
        Self { d, k, activation, n }
    }
}

/// First-layer weight matrix, one row per hidden unit.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights(pub Array2<f64>);

impl Weights {
    pub fn zeros(k: usize, d: usize) -> Self {
        Self(Array2::zeros((k, d)))
    }

    pub fn standard_normal<R: Rng + ?Sized>(k: usize, d: usize, rng: &mut R) -> Self {
        Self(Array2::from_shape_simple_fn((k, d), || {
            rng.sample(StandardNormal)
        }))
    }

    pub fn hidden(&self) -> usize {
        self.0.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.0.ncols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// N x d inputs.
    pub x: Array2<f64>,
    /// Teacher outputs.
    pub y: Array1<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Problem {
    pub teacher: Weights,
    pub data: Dataset,
    pub student_init: Weights,
}

/// Samples teacher, inputs and a student initialisation, in that order, from
/// one seeded stream.
pub fn generate(config: &NetConfig, seed: u64) -> Problem {
    let mut rng = stream_rng(seed, OBJECTIVE_STREAM);
    let teacher = Weights::standard_normal(config.k, config.d, &mut rng);
    let x = Array2::from_shape_simple_fn((config.n, config.d), || rng.sample(StandardNormal));
    let y = outputs(&teacher, &x, config.activation);
    let student_init = Weights::standard_normal(config.k, config.d, &mut rng);
    Problem {
        teacher,
        data: Dataset { x, y },
        student_init,
    }
}

fn outputs(w: &Weights, x: &Array2<f64>, act: Activation) -> Array1<f64> {
    let mut pre = x.dot(&w.0.t());
    pre.mapv_inplace(|z| act.apply(z));
    pre.sum_axis(Axis(1))
}

pub fn forward(w: &Weights, x: ArrayView1<'_, f64>, act: Activation) -> f64 {
    w.0.rows().into_iter().map(|row| act.apply(row.dot(&x))).sum()
}

pub fn mse(w: &Weights, data: &Dataset, act: Activation) -> f64 {
    let pred = outputs(w, &data.x, act);
    let n = data.len() as f64;
    Zip::from(&pred)
        .and(&data.y)
        .fold(0.0, |acc, &p, &y| acc + (p - y) * (p - y))
        / n
}

/// Loss and gradient with respect to `W` in one pass.
pub fn mse_and_grad(w: &Weights, data: &Dataset, act: Activation) -> (f64, Array2<f64>) {
    let n = data.len() as f64;
    let mut pre = data.x.dot(&w.0.t());
    let pred: Array1<f64> = pre.map(|&z| act.apply(z)).sum_axis(Axis(1));
    let resid = &pred - &data.y;
    let loss = resid.dot(&resid) / n;
    // pre becomes residual * act'(pre), row by row.
    Zip::from(pre.rows_mut()).and(&resid).for_each(|mut row, &r| {
        row.mapv_inplace(|z| r * act.derivative(z));
    });
    let mut grad = pre.t().dot(&data.x);
    grad *= 2.0 / n;
    (loss, grad)
}

pub fn grad_mse(w: &Weights, data: &Dataset, act: Activation) -> Array2<f64> {
    mse_and_grad(w, data, act).1
}

/// Full-batch gradient descent. Records the loss after every epoch and stops
/// at the first divergent epoch.
pub fn train_gd(student: &Weights, data: &Dataset, lr: f64, epochs: usize, act: Activation) -> EvalTrace {
    let mut w = student.clone();
    let (initial, mut grad) = mse_and_grad(&w, data, act);
    let mut trace = TraceBuilder::new(lr).with_initial_loss(initial);
    if trace.is_diverged() {
        return trace.finish();
    }
    for _ in 0..epochs {
        w.0.scaled_add(-lr, &grad);
        let (loss, g) = mse_and_grad(&w, data, act);
        grad = g;
        if !trace.record(loss, None) {
            break;
        }
    }
    trace.finish()
}

/// In-process objective: each evaluation trains a freshly initialised student
/// on the run's fixed teacher dataset.
#[derive(Clone, Debug)]
pub struct TeacherStudentObjective {
    config: NetConfig,
    problem: Problem,
    lr_map: LrMap,
    epochs: usize,
    reward: Option<RewardSpec>,
    init_rng: rand_chacha::ChaCha8Rng,
}

impl TeacherStudentObjective {
    /// `reward = None` normalises losses against the initial loss of the first
    /// evaluation.
    pub fn new(
        config: NetConfig,
        seed: u64,
        lr_map: LrMap,
        epochs: usize,
        reward: Option<RewardSpec>,
    ) -> Self {
        Self {
            config,
            problem: generate(&config, seed),
            lr_map,
            epochs,
            reward,
            init_rng: stream_rng(seed, INIT_STREAM),
        }
    }

    pub fn problem(&self) -> &Problem {
        &self.problem
    }

    pub fn reward_spec(&self) -> Option<RewardSpec> {
        self.reward
    }
}

impl Objective for TeacherStudentObjective {
    fn evaluate(&mut self, _round: usize, coord: f64) -> Result<Evaluation, EvalError> {
        let lr = self.lr_map.denormalize(coord);
        let student = Weights::standard_normal(self.config.k, self.config.d, &mut self.init_rng);
        let trace = train_gd(
            &student,
            &self.problem.data,
            lr,
            self.epochs,
            self.config.activation,
        );
        let reward = auto_reward(&mut self.reward, &trace)?;
        Ok(Evaluation { lr, reward, trace })
    }
}

/// Settings shared by the runs of a divergence-fraction experiment.
#[derive(Clone, Copy, Debug)]
pub struct DivergenceSetup {
    pub net: NetConfig,
    pub evals: usize,
    pub epochs: usize,
    pub runs: usize,
    pub base_seed: u64,
    pub lr_map: LrMap,
}

/// Fraction of runs whose best-trace learning rate diverged. `make_tuner`
/// receives the run seed.
pub fn divergence_fraction<T, F>(setup: &DivergenceSetup, mut make_tuner: F) -> Result<f64, TuneError>
where
    T: Tuner,
    F: FnMut(u64) -> T,
{
    assert!(setup.runs >= 1, "at least one run is required");
    let mut diverged = 0usize;
    for run in 0..setup.runs {
        let seed = run_seed(setup.base_seed, run);
        let mut objective = TeacherStudentObjective::new(setup.net, seed, setup.lr_map, setup.epochs, None);
        let mut tuner = make_tuner(seed);
        let history = tune(&mut tuner, setup.evals, &mut objective)?;
        if best_trace(&history).is_some_and(|b| b.entry.trace.diverged()) {
            diverged += 1;
        }
    }
    Ok(diverged as f64 / setup.runs as f64)
}
