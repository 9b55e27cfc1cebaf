//! The six experiment cases, evaluation metrics and the case driver.

use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradient::predict_terminal;
use crate::integrator::{safe_solve, IntegratorConfig};
use crate::matrix::Matrix;
use crate::nn::{Activation, UdeParams};
use crate::pde::RhsContext;
use crate::rng::RandomStream;
use crate::synthetic::{build_dataset, Dataset, DatasetSpec, NoiseSpec};
use crate::training::{train, LossConfig, TrainConfig, TrainHistory};
use crate::tuning::{run_search, LossWeights, SearchOutcome, SearchSpace, TrialConfig};

/// Tolerance of the final evaluation solve.
pub const EVAL_TOL: f64 = 1e-6;
/// (Adam, L-BFGS) iterations per tuning trial.
pub const DEFAULT_TUNING_BUDGET: (usize, usize) = (60, 30);
pub const DEFAULT_AR1_RHO: f64 = 0.8;
/// Uniform save times for the depth-time heatmaps.
pub const HEATMAP_TIMES: usize = 51;

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::invalid(format!(
            "metric needs equal non-empty lengths, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    mse(pred, truth).map(f64::sqrt)
}

/// `1 - SSE / SST` with SST about the truth mean; may be negative.
pub fn r_squared(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if truth.len() < 2 {
        return Err(Error::UndefinedMetric("R^2 needs at least two points".into()));
    }
    let sse = mse(pred, truth)? * truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let sst: f64 = truth.iter().map(|t| (t - mean) * (t - mean)).sum();
    if sst == 0.0 {
        return Err(Error::UndefinedMetric("R^2 of a constant truth".into()));
    }
    Ok(1.0 - sse / sst)
}

pub fn residual_profile(pred: &[f64], truth: &[f64]) -> Result<Vec<f64>> {
    if pred.len() != truth.len() {
        return Err(Error::invalid(format!("lengths differ: {} vs {}", pred.len(), truth.len())));
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| p - t).collect())
}

/// Network shape, optimiser rate and loss weights of one training run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub h1: usize,
    pub h2: usize,
    pub activation: Activation,
    pub lr: f64,
    pub weights: LossWeights,
}

impl From<&TrialConfig> for HyperParams {
    fn from(t: &TrialConfig) -> Self {
        HyperParams {
            h1: t.h1,
            h2: t.h2,
            activation: t.activation,
            lr: t.lr,
            weights: t.weights,
        }
    }
}

impl HyperParams {
    pub fn mlp(&self) -> crate::nn::MlpSpec {
        crate::nn::MlpSpec {
            h1: self.h1,
            h2: self.h2,
            activation: self.activation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseSpec {
    pub id: u8,
    pub dataset: DatasetSpec,
    pub search_space: SearchSpace,
    pub final_budget: TrainConfig,
    pub loss: LossConfig,
    /// Configuration trained when the sweep is skipped.
    pub reference: HyperParams,
}

impl CaseSpec {
    /// Case `id` (1-6) with noise seeded by `seed`.
    pub fn standard(id: u8, seed: u64) -> Result<CaseSpec> {
        CaseSpec::with_defaults(id, seed, &DatasetSpec::default(), &LossConfig::default(), &TrainConfig::default(), DEFAULT_TUNING_BUDGET)
    }

    /// Case `id` on top of caller-supplied defaults for the dataset,
    /// collocation layout, optimiser settings and tuning budget.
    pub fn with_defaults(
        id: u8,
        seed: u64,
        base_data: &DatasetSpec,
        base_loss: &LossConfig,
        base_train: &TrainConfig,
        tuning_budget: (usize, usize),
    ) -> Result<CaseSpec> {
        use Activation::{Gelu, Tanh};
        let (target_time, level) = match id {
            1 => (0.0, 0.0),
            2 => (0.0, 0.07),
            3 => (0.0, 0.35),
            4 => (base_data.t_end, 0.0),
            5 => (base_data.t_end, 0.07),
            6 => (base_data.t_end, 0.35),
            _ => return Err(Error::invalid(format!("case id must be 1-6, got {id}"))),
        };
        let weights = match id {
            1 | 4 => LossWeights::new(1.0, 1.0, 1e-4),
            2 | 5 => LossWeights::new(1.5, 1.0, 1e-3),
            3 => LossWeights::new(1.0, 1.0, 1e-3),
            _ => LossWeights::new(2.0, 1.0, 1e-4),
        };
        let (h1, h2, activation, lr) = match id {
            1 => (32, 16, Tanh, 3e-3),
            2 => (32, 32, Tanh, 3e-3),
            3 => (32, 16, Tanh, 1e-3),
            4 => (32, 16, Gelu, 3e-3),
            5 => (32, 16, Tanh, 3e-3),
            _ => (64, 32, Tanh, 3e-3),
        };
        let reference = HyperParams {
            h1,
            h2,
            activation,
            lr,
            weights: if id == 3 { LossWeights::new(0.25, 5.0, 1e-3) } else { weights },
        };
        let mut space = SearchSpace::base(weights, tuning_budget);
        if id == 3 {
            space.learning_rates = vec![1e-3, 3e-3, 5e-3];
            space.loss_weight_options = [1e-4, 1e-3, 1e-2]
                .iter()
                .flat_map(|&wd| [LossWeights::new(1.0, 1.0, wd), LossWeights::new(0.25, 5.0, wd)])
                .collect();
        }
        let (adam, lbfgs) = if id == 6 { (400, 800) } else { (200, 400) };
        let noise = |stream_seed| (level > 0.0).then_some(stream_seed);
        let dataset = DatasetSpec {
            target_time,
            driver_noise: noise(seed).map(|s| NoiseSpec::ar1(level, DEFAULT_AR1_RHO, s).with_floor(Some(0.0))),
            target_noise: noise(seed).map(|s| NoiseSpec::iid(level, s).with_floor(Some(0.0))),
            ..base_data.clone()
        };
        Ok(CaseSpec {
            id,
            dataset,
            search_space: space,
            final_budget: TrainConfig {
                adam_lr: lr,
                adam_iters: adam,
                lbfgs_iters: lbfgs,
                seed,
                ..base_train.clone()
            },
            loss: weights.apply(base_loss),
            reference,
        })
    }

    pub fn seed(&self) -> u64 {
        self.final_budget.seed
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    TuneThenFinal,
    FinalOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub mse_noisy: f64,
    pub rmse_noisy: f64,
    pub r2_noisy: f64,
    pub mse_clean: f64,
    pub rmse_clean: f64,
    pub r2_clean: f64,
    pub max_abs_residual: f64,
}

impl CaseMetrics {
    pub fn compute(pred: &[f64], target: &[f64], clean: &[f64]) -> Result<CaseMetrics> {
        let mse_noisy = mse(pred, target)?;
        let mse_clean = mse(pred, clean)?;
        Ok(CaseMetrics {
            mse_noisy,
            rmse_noisy: mse_noisy.sqrt(),
            r2_noisy: r_squared(pred, target)?,
            mse_clean,
            rmse_clean: mse_clean.sqrt(),
            r2_clean: r_squared(pred, clean)?,
            max_abs_residual: residual_profile(pred, clean)?.iter().fold(0.0, |m, r| m.max(r.abs())),
        })
    }
}

/// Depth x time fields for the [true | pred | residual] heatmap.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub times: Vec<f64>,
    pub truth: Matrix,
    pub pred: Matrix,
}

impl Heatmap {
    pub fn residual(&self) -> Matrix {
        self.pred.zip_map(&self.truth, |p, t| p - t)
    }
}

#[derive(Clone, Debug)]
pub struct CaseReport {
    pub spec: CaseSpec,
    pub mode: RunMode,
    pub dataset: Dataset,
    pub sweep: Option<SearchOutcome>,
    pub chosen: HyperParams,
    pub params: UdeParams,
    pub history: TrainHistory,
    pub prediction: Vec<f64>,
    pub metrics: Option<CaseMetrics>,
    pub heatmap: Option<Heatmap>,
    pub status: Result<(), String>,
    pub sweep_ms: f64,
    pub train_ms: f64,
}

impl CaseReport {
    pub fn is_ok(&self) -> bool {
        self.status.is_ok()
    }
}

/// Training configuration for the final run of `hp`.
pub fn final_train_config(spec: &CaseSpec, hp: &HyperParams) -> TrainConfig {
    TrainConfig {
        adam_lr: hp.lr,
        seed: RandomStream::new(spec.seed(), "final").rng().next_u64(),
        ..spec.final_budget.clone()
    }
}

/// Clean-truth and model trajectories on uniform save times.
pub fn heatmap_fields(spec: &DatasetSpec, dataset: &Dataset, params: &UdeParams, tol: f64) -> Option<Heatmap> {
    let (t0, t1) = dataset.t_span;
    let n = HEATMAP_TIMES;
    let times: Vec<f64> = (0..n).map(|i| t0 + (t1 - t0) * i as f64 / (n - 1) as f64).collect();
    let cfg = IntegratorConfig::tsit5(tol, tol);
    let truth_ctx = RhsContext::transport_only(&dataset.grid, dataset.transport);
    let initial_clean = crate::synthetic::initial_soc(&dataset.grid, spec.c0, spec.k_decay, spec.depth_scale);
    let clean = safe_solve(&truth_ctx, &initial_clean, (t0, t1), &times, &cfg);
    let model_ctx = RhsContext::with_source(&dataset.grid, dataset.transport, params, &dataset.drivers).ok()?;
    let model = safe_solve(&model_ctx, &dataset.initial_profile, (t0, t1), &times, &cfg);
    let (_, clean) = clean.into_result().ok()?;
    let (_, model) = model.into_result().ok()?;
    let nz = dataset.grid.nz();
    Some(Heatmap {
        truth: Matrix::from_fn(nz, n, |r, c| clean[c].values[r]),
        pred: Matrix::from_fn(nz, n, |r, c| model[c].values[r]),
        times,
    })
}

/// Builds the dataset, optionally sweeps, trains the chosen configuration
/// and evaluates it against both the training target and the clean truth.
/// Failures are recorded in the report rather than returned.
pub fn run_case(spec: &CaseSpec, mode: RunMode, workers: usize) -> Result<CaseReport> {
    run_case_on(spec, mode, build_dataset(&spec.dataset)?, workers)
}

/// [`run_case`] on an already built (for example frozen) dataset.
pub fn run_case_on(spec: &CaseSpec, mode: RunMode, dataset: Dataset, workers: usize) -> Result<CaseReport> {
    spec.loss.validate(dataset.t_span.1)?;
    spec.final_budget.validate()?;
    let clock = Instant::now();
    let sweep = match mode {
        RunMode::TuneThenFinal => Some(run_search(&spec.search_space, &dataset, &spec.loss, &spec.final_budget, workers)?),
        RunMode::FinalOnly => None,
    };
    let sweep_ms = clock.elapsed().as_secs_f64() * 1e3;
    let chosen = sweep.as_ref().map(|s| HyperParams::from(&s.best)).unwrap_or(spec.reference);
    Ok(train_and_evaluate(spec, mode, dataset, sweep, chosen, sweep_ms))
}

/// Final training and evaluation of `chosen` on an already built dataset.
pub fn train_and_evaluate(
    spec: &CaseSpec,
    mode: RunMode,
    dataset: Dataset,
    sweep: Option<SearchOutcome>,
    chosen: HyperParams,
    sweep_ms: f64,
) -> CaseReport {
    let clock = Instant::now();
    let loss_cfg = chosen.weights.apply(&spec.loss);
    let cfg = final_train_config(spec, &chosen);
    let (params, history) = train(&dataset, &chosen.mlp(), &loss_cfg, &cfg);
    let train_ms = clock.elapsed().as_secs_f64() * 1e3;
    let mut report = CaseReport {
        spec: spec.clone(),
        mode,
        dataset,
        sweep,
        chosen,
        params,
        history,
        prediction: Vec::new(),
        metrics: None,
        heatmap: None,
        status: Ok(()),
        sweep_ms,
        train_ms,
    };
    evaluate_into(&mut report);
    report
}

/// Fills prediction, metrics and heatmap of `report` from its parameters.
pub fn evaluate_into(report: &mut CaseReport) {
    let ds = &report.dataset;
    let eval = IntegratorConfig::tsit5(EVAL_TOL, EVAL_TOL).with_precision(report.spec.final_budget.precision);
    let Some(pred) = predict_terminal(&report.params, ds, &eval) else {
        report.status = Err("evaluation solve failed".into());
        return;
    };
    match CaseMetrics::compute(&pred.values, &ds.target_profile.values, &ds.clean_target.values) {
        Ok(m) => report.metrics = Some(m),
        Err(e) => report.status = Err(e.to_string()),
    }
    report.prediction = pred.values;
    report.heatmap = heatmap_fields(&report.spec.dataset, ds, &report.params, EVAL_TOL);
    if report.heatmap.is_none() && report.status.is_ok() {
        report.status = Err("heatmap trajectory solve failed".into());
    }
}
