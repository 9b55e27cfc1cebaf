//! Exhaustive grid search over network shape, activation, learning rate and
//! loss weights.

use std::fmt::Write as _;
use std::time::Instant;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradient::predict_terminal;
use crate::integrator::IntegratorConfig;
use crate::nn::{Activation, MlpSpec};
use crate::rng::RandomStream;
use crate::synthetic::Dataset;
use crate::training::{terminal_mse, train, LossConfig, TrainConfig};

/// Tolerance used to score trials.
pub const TUNING_TOL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_term: f64,
    pub lambda_coll: f64,
    pub lambda_wd: f64,
}

impl LossWeights {
    pub fn new(lambda_term: f64, lambda_coll: f64, lambda_wd: f64) -> Self {
        LossWeights {
            lambda_term,
            lambda_coll,
            lambda_wd,
        }
    }

    pub fn apply(&self, base: &LossConfig) -> LossConfig {
        LossConfig {
            lambda_term: self.lambda_term,
            lambda_coll: self.lambda_coll,
            lambda_wd: self.lambda_wd,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub h1_options: Vec<usize>,
    pub h2_options: Vec<usize>,
    pub activations: Vec<Activation>,
    pub learning_rates: Vec<f64>,
    pub loss_weight_options: Vec<LossWeights>,
    /// (Adam iterations, L-BFGS iterations) per trial.
    pub trial_budget: (usize, usize),
}

impl SearchSpace {
    /// The 2 x 2 x 2 x 2 base grid with fixed loss weights.
    pub fn base(weights: LossWeights, budget: (usize, usize)) -> Self {
        SearchSpace {
            h1_options: vec![32, 64],
            h2_options: vec![16, 32],
            activations: vec![Activation::Tanh, Activation::Gelu],
            learning_rates: vec![3e-3, 5e-3],
            loss_weight_options: vec![weights],
            trial_budget: budget,
        }
    }

    pub fn trial_count(&self) -> usize {
        self.h1_options.len()
            * self.h2_options.len()
            * self.activations.len()
            * self.learning_rates.len()
            * self.loss_weight_options.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.trial_count() == 0 {
            return Err(Error::invalid("every search option list must be non-empty"));
        }
        if self.h1_options.iter().chain(&self.h2_options).any(|&h| h == 0) {
            return Err(Error::invalid("layer widths must be at least 1"));
        }
        if self.learning_rates.iter().any(|&lr| !(lr > 0.0)) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub id: usize,
    pub h1: usize,
    pub h2: usize,
    pub activation: Activation,
    pub lr: f64,
    pub weights: LossWeights,
}

impl TrialConfig {
    pub fn mlp(&self) -> MlpSpec {
        MlpSpec {
            h1: self.h1,
            h2: self.h2,
            activation: self.activation,
        }
    }

    /// Identifies the hyperparameters independently of enumeration order;
    /// used to key the trial's random stream.
    pub fn key(&self) -> String {
        format!(
            "h1={},h2={},act={},lr={:e},w={:e}/{:e}/{:e}",
            self.h1,
            self.h2,
            self.activation,
            self.lr,
            self.weights.lambda_term,
            self.weights.lambda_coll,
            self.weights.lambda_wd
        )
    }

    pub fn param_count(&self) -> usize {
        2 * self.mlp().param_count()
    }
}

/// Lexicographic over (h1, h2, activation, lr, weights) in option order.
pub fn enumerate_trials(space: &SearchSpace) -> Vec<TrialConfig> {
    let mut out = Vec::with_capacity(space.trial_count());
    for &h1 in &space.h1_options {
        for &h2 in &space.h2_options {
            for &activation in &space.activations {
                for &lr in &space.learning_rates {
                    for &weights in &space.loss_weight_options {
                        out.push(TrialConfig {
                            id: out.len(),
                            h1,
                            h2,
                            activation,
                            lr,
                            weights,
                        });
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum TrialStatus {
    Ok,
    Failed { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub config: TrialConfig,
    /// Terminal MSE against the training target at the tuning tolerance.
    pub loss: f64,
    pub train_loss: f64,
    pub iterations: usize,
    pub seed: u64,
    pub wall_ms: f64,
    pub status: TrialStatus,
}

impl TrialResult {
    pub fn is_ok(&self) -> bool {
        self.status == TrialStatus::Ok
    }
}

/// Orders trials best first: successful before failed, then by loss,
/// parameter count, learning rate and id.
pub fn compare_trials(a: &TrialResult, b: &TrialResult) -> std::cmp::Ordering {
    (!a.is_ok())
        .cmp(&!b.is_ok())
        .then(a.loss.total_cmp(&b.loss))
        .then(a.config.param_count().cmp(&b.config.param_count()))
        .then(a.config.lr.total_cmp(&b.config.lr))
        .then(a.config.id.cmp(&b.config.id))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: TrialConfig,
    pub results: Vec<TrialResult>,
}

impl SearchOutcome {
    pub fn best_result(&self) -> &TrialResult {
        &self.results[self.best.id]
    }

    /// Sweep table; the timing column is optional so the remainder can be
    /// compared byte for byte.
    pub fn to_csv(&self, with_timing: bool) -> String {
        let mut s = String::from("id,h1,h2,activation,lr,lambda_term,lambda_coll,lambda_wd,seed,loss,train_loss,iterations,status");
        s.push_str(if with_timing { ",wall_ms\n" } else { "\n" });
        for r in &self.results {
            let c = &r.config;
            let status = match &r.status {
                TrialStatus::Ok => "ok".to_string(),
                TrialStatus::Failed { reason } => format!("failed: {}", reason.replace(',', ";")),
            };
            let _ = write!(
                s,
                "{},{},{},{},{:e},{:e},{:e},{:e},{},{:e},{:e},{},{}",
                c.id,
                c.h1,
                c.h2,
                c.activation,
                c.lr,
                c.weights.lambda_term,
                c.weights.lambda_coll,
                c.weights.lambda_wd,
                r.seed,
                r.loss,
                r.train_loss,
                r.iterations,
                status
            );
            if with_timing {
                let _ = write!(s, ",{:.1}", r.wall_ms);
            }
            s.push('\n');
        }
        s
    }
}

/// Per-trial training seed derived from the sweep seed and the trial's
/// hyperparameters, so adding or removing trials never reseeds the others.
pub fn trial_seed(seed: u64, trial: &TrialConfig) -> u64 {
    RandomStream::new(seed, format!("trial/{}", trial.key())).rng().next_u64()
}

pub fn run_trial(
    trial: &TrialConfig,
    space: &SearchSpace,
    dataset: &Dataset,
    base_loss: &LossConfig,
    base_train: &TrainConfig,
) -> TrialResult {
    let clock = Instant::now();
    let seed = trial_seed(base_train.seed, trial);
    let loss_cfg = trial.weights.apply(base_loss);
    let cfg = TrainConfig {
        adam_lr: trial.lr,
        adam_iters: space.trial_budget.0,
        lbfgs_iters: space.trial_budget.1,
        seed,
        ..base_train.clone()
    };
    let (params, history) = train(dataset, &trial.mlp(), &loss_cfg, &cfg);
    let eval = IntegratorConfig::tsit5(TUNING_TOL, TUNING_TOL).with_precision(cfg.precision);
    let (loss, status) = match predict_terminal(&params, dataset, &eval) {
        Some(pred) => match terminal_mse(&pred, &dataset.target_profile) {
            Ok(l) if l.is_finite() => (l, TrialStatus::Ok),
            Ok(l) => (
                f64::INFINITY,
                TrialStatus::Failed {
                    reason: format!("non-finite loss {l}"),
                },
            ),
            Err(e) => (f64::INFINITY, TrialStatus::Failed { reason: e.to_string() }),
        },
        None => (
            f64::INFINITY,
            TrialStatus::Failed {
                reason: "evaluation solve failed".into(),
            },
        ),
    };
    TrialResult {
        config: trial.clone(),
        loss,
        train_loss: history.best_loss().unwrap_or(f64::NAN),
        iterations: history.len(),
        seed,
        wall_ms: clock.elapsed().as_secs_f64() * 1e3,
        status,
    }
}

/// Picks the best of `results` by [`compare_trials`].
pub fn select_best(results: &[TrialResult]) -> Option<&TrialResult> {
    results.iter().min_by(|a, b| compare_trials(a, b))
}

/// Runs every trial on a pool of `workers` threads. Results come back in
/// trial-id order whatever the scheduling.
pub fn run_search(
    space: &SearchSpace,
    dataset: &Dataset,
    base_loss: &LossConfig,
    base_train: &TrainConfig,
    workers: usize,
) -> Result<SearchOutcome> {
    space.validate()?;
    let trials = enumerate_trials(space);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let results: Vec<TrialResult> = pool.install(|| {
        trials
            .par_iter()
            .map(|t| run_trial(t, space, dataset, base_loss, base_train))
            .collect()
    });
    let best = select_best(&results).expect("non-empty sweep").config.clone();
    Ok(SearchOutcome { best, results })
}
