//! Exact gradients of the training loss through the fixed-step RK4 solve
//! (discretize-then-optimize), plus a central-difference oracle.
//!
//! The forward pass keeps every step state; the reverse pass recomputes the
//! four stage evaluations of each step from its stored start state and
//! pulls the adjoint back through them.

use serde::{Deserialize, Serialize};

use crate::grid::{SocProfile, TransportParams};
use crate::integrator::{rk4_step_count, rk4_time, IntegratorConfig, Precision, Rk4Stepper};
use crate::nn::{init_params, Activation, MlpSpec, UdeParams};
use crate::pde::{FaultInjection, RhsContext, RhsWorkspace};
use crate::rng::RandomStream;
use crate::synthetic::{build_dataset, Dataset, DatasetSpec, NoiseSpec};
use crate::training::LossConfig;

/// Loss assigned to any parameter vector whose solve fails.
pub const FAILURE_LOSS: f64 = 1e6;

pub const DEFAULT_TRAIN_DT: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub terminal: f64,
    pub collocation: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub grad: Vec<f64>,
    pub loss: f64,
    pub solver_failed: bool,
    pub parts: LossBreakdown,
}

impl GradientReport {
    fn failed(n: usize) -> Self {
        GradientReport {
            grad: vec![0.0; n],
            loss: FAILURE_LOSS,
            solver_failed: true,
            parts: LossBreakdown::default(),
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// The training objective for one dataset: what to integrate and how.
#[derive(Clone, Debug)]
pub struct Objective<'a> {
    pub dataset: &'a Dataset,
    pub loss: &'a LossConfig,
    pub dt: f64,
    pub precision: Precision,
    pub fault: Option<FaultInjection>,
}

/// Linear interpolation weights of time `s` on the RK4 step lattice.
struct Lattice {
    t0: f64,
    t1: f64,
    dt: f64,
    steps: usize,
}

impl Lattice {
    fn time(&self, k: usize) -> f64 {
        rk4_time(self.t0, self.t1, self.dt, self.steps, k)
    }

    /// `u(s) = (1 - w) U[j] + w U[j + 1]`.
    fn locate(&self, s: f64) -> (usize, f64) {
        if s >= self.t1 {
            return (self.steps - 1, 1.0);
        }
        let mut j = (((s - self.t0) / self.dt).floor().max(0.0) as usize).min(self.steps - 1);
        while j > 0 && self.time(j) > s {
            j -= 1;
        }
        while j + 1 < self.steps && self.time(j + 1) <= s {
            j += 1;
        }
        let (ta, tb) = (self.time(j), self.time(j + 1));
        (j, (s - ta) / (tb - ta))
    }

    fn state(&self, states: &[Vec<f64>], s: f64, out: &mut [f64]) {
        let (j, w) = self.locate(s);
        for i in 0..out.len() {
            out[i] = (1.0 - w) * states[j][i] + w * states[j + 1][i];
        }
    }

    fn inject(&self, adj: &mut [Vec<f64>], s: f64, coef: f64, node: usize) {
        let (j, w) = self.locate(s);
        adj[j][node] += (1.0 - w) * coef;
        adj[j + 1][node] += w * coef;
    }
}

/// Finite-difference stencil for the time derivative at `t`: pairs of
/// (offset time, weight) such that `u_t ~ sum w u(t + offset)`.
pub(crate) fn time_stencil(t: f64, delta: f64, t0: f64, t1: f64) -> Vec<(f64, f64)> {
    if t + delta <= t1 && t - delta >= t0 {
        vec![(t + delta, 0.5 / delta), (t - delta, -0.5 / delta)]
    } else if t - 2.0 * delta >= t0 {
        vec![(t, 1.5 / delta), (t - delta, -2.0 / delta), (t - 2.0 * delta, 0.5 / delta)]
    } else {
        vec![(t + 2.0 * delta, -0.5 / delta), (t + delta, 2.0 / delta), (t, -1.5 / delta)]
    }
}

impl<'a> Objective<'a> {
    pub fn new(dataset: &'a Dataset, loss: &'a LossConfig) -> Self {
        Objective {
            dataset,
            loss,
            dt: DEFAULT_TRAIN_DT,
            precision: Precision::F64,
            fault: None,
        }
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn with_fault(mut self, fault: Option<FaultInjection>) -> Self {
        self.fault = fault;
        self
    }

    fn needs_solve(&self) -> bool {
        self.loss.lambda_coll > 0.0 || (self.loss.lambda_term > 0.0 && self.dataset.target_time > 0.0)
    }

    fn horizon(&self) -> f64 {
        if self.loss.lambda_coll > 0.0 {
            self.dataset.t_span.1
        } else {
            self.dataset.target_time
        }
    }

    /// Loss only (no reverse pass).
    pub fn value(&self, params: &UdeParams) -> f64 {
        self.evaluate(params, false).loss
    }

    pub fn loss_and_grad(&self, params: &UdeParams) -> GradientReport {
        self.evaluate(params, true)
    }

    /// Trajectory of the training solve at the lattice step states, or
    /// `None` on failure.
    pub fn forward_states(&self, params: &UdeParams) -> Option<(Vec<f64>, Vec<Vec<f64>>)> {
        let ds = self.dataset;
        let ctx = RhsContext::with_source(&ds.grid, ds.transport, params, &ds.drivers)
            .ok()?
            .with_fault(self.fault);
        let (t0, t1) = (ds.t_span.0, self.horizon());
        if !(t1 > t0) {
            return Some((vec![t0], vec![ds.initial_profile.values.clone()]));
        }
        let steps = rk4_step_count(t1 - t0, self.dt);
        let lat = Lattice { t0, t1, dt: self.dt, steps };
        let mut stepper = Rk4Stepper::new(&ctx);
        let mut states = Vec::with_capacity(steps + 1);
        let mut u = ds.initial_profile.values.clone();
        self.precision.round_slice(&mut u);
        states.push(u);
        for k in 0..steps {
            let mut next = vec![0.0; ds.grid.nz()];
            let (ta, tb) = (lat.time(k), lat.time(k + 1));
            stepper.step(&ctx, &states[k], ta, tb - ta, &mut next).ok()?;
            self.precision.round_slice(&mut next);
            if next.iter().any(|v| !v.is_finite()) {
                return None;
            }
            states.push(next);
        }
        Some(((0..=steps).map(|k| lat.time(k)).collect(), states))
    }

    fn evaluate(&self, params: &UdeParams, want_grad: bool) -> GradientReport {
        let n_par = params.len();
        let cfg = self.loss;
        let ds = self.dataset;
        let theta = params.flat();
        let mut grad = vec![0.0; n_par];
        let mut parts = LossBreakdown::default();
        if cfg.lambda_wd > 0.0 {
            parts.weight_decay = cfg.lambda_wd * params.norm_sq();
            if want_grad {
                for (g, t) in grad.iter_mut().zip(&theta) {
                    *g = 2.0 * cfg.lambda_wd * t;
                }
            }
        }
        if !self.needs_solve() {
            if cfg.lambda_term > 0.0 {
                let mse = mean_sq_diff(&ds.initial_profile.values, &ds.target_profile.values);
                parts.terminal = cfg.lambda_term * mse;
            }
            return finish(grad, parts);
        }

        let Ok(ctx) = RhsContext::with_source(&ds.grid, ds.transport, params, &ds.drivers) else {
            return GradientReport::failed(n_par);
        };
        let ctx = ctx.with_fault(self.fault);
        let (t0, t1) = (ds.t_span.0, self.horizon());
        let Some((_, states)) = self.forward_states(params) else {
            return GradientReport::failed(n_par);
        };
        let steps = states.len() - 1;
        let lat = Lattice { t0, t1, dt: self.dt, steps };
        let nz = ds.grid.nz();
        let mut adj: Vec<Vec<f64>> = if want_grad { vec![vec![0.0; nz]; steps + 1] } else { Vec::new() };

        if cfg.lambda_term > 0.0 {
            let target = &ds.target_profile.values;
            let pred: &[f64] = if ds.target_time > 0.0 {
                let (j, w) = lat.locate(ds.target_time);
                debug_assert!(j + 1 == steps && w == 1.0);
                &states[steps]
            } else {
                &states[0]
            };
            parts.terminal = cfg.lambda_term * mean_sq_diff(pred, target);
            if want_grad && ds.target_time > 0.0 {
                for i in 0..nz {
                    adj[steps][i] += cfg.lambda_term * 2.0 * (pred[i] - target[i]) / nz as f64;
                }
            }
        }

        if cfg.lambda_coll > 0.0 {
            let nodes: Vec<usize> = (0..nz).step_by(cfg.collocation_stride.max(1)).collect();
            let count = (cfg.collocation_times.len() * nodes.len()) as f64;
            let mut ws = RhsWorkspace::new(&ctx);
            let mut u_t = vec![0.0; nz];
            let mut u_s = vec![0.0; nz];
            let mut f = vec![0.0; nz];
            let mut sum = 0.0;
            for &tc in &cfg.collocation_times {
                let stencil = time_stencil(tc, cfg.collocation_delta, t0, t1);
                let mut fd = vec![0.0; nz];
                for &(s, w) in &stencil {
                    lat.state(&states, s, &mut u_s);
                    for i in 0..nz {
                        fd[i] += w * u_s[i];
                    }
                }
                lat.state(&states, tc, &mut u_t);
                ctx.eval_into(&u_t, tc, &mut ws, &mut f);
                let mut lam = vec![0.0; nz];
                for &i in &nodes {
                    let r = fd[i] - f[i];
                    sum += r * r;
                    lam[i] = cfg.lambda_coll * 2.0 * r / count;
                }
                if !want_grad {
                    continue;
                }
                for &i in &nodes {
                    for &(s, w) in &stencil {
                        lat.inject(&mut adj, s, w * lam[i], i);
                    }
                }
                // d(-f)/d(u, theta) with seed lam
                let neg: Vec<f64> = lam.iter().map(|l| -l).collect();
                let mut gu = vec![0.0; nz];
                ctx.vjp(&mut ws, &neg, &mut gu, &mut grad);
                for i in 0..nz {
                    if gu[i] != 0.0 {
                        lat.inject(&mut adj, tc, gu[i], i);
                    }
                }
            }
            parts.collocation = cfg.lambda_coll * sum / count;
        }

        if want_grad {
            reverse_sweep(&ctx, &lat, &states, &mut adj, &mut grad);
        }
        finish(grad, parts)
    }
}

fn finish(grad: Vec<f64>, parts: LossBreakdown) -> GradientReport {
    let loss = parts.terminal + parts.collocation + parts.weight_decay;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return GradientReport::failed(grad.len());
    }
    GradientReport {
        grad,
        loss,
        solver_failed: false,
        parts,
    }
}

fn mean_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Pulls the state adjoints `adj` (loss injections per step state) back to
/// t0, accumulating parameter gradients into `grad`.
fn reverse_sweep(
    ctx: &RhsContext,
    lat: &Lattice,
    states: &[Vec<f64>],
    adj: &mut [Vec<f64>],
    grad: &mut [f64],
) {
    let nz = states[0].len();
    let mut stepper = Rk4Stepper::new(ctx);
    let mut scratch_out = vec![0.0; nz];
    let mut ubar = adj[lat.steps].clone();
    let mut kbar: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; nz]);
    let mut ybar = vec![0.0; nz];
    for n in (0..lat.steps).rev() {
        let (ta, tb) = (lat.time(n), lat.time(n + 1));
        let h = tb - ta;
        // recompute the stage tapes of this step
        let _ = stepper.step(ctx, &states[n], ta, h, &mut scratch_out);
        for i in 0..nz {
            kbar[0][i] = h / 6.0 * ubar[i];
            kbar[1][i] = h / 3.0 * ubar[i];
            kbar[2][i] = h / 3.0 * ubar[i];
            kbar[3][i] = h / 6.0 * ubar[i];
        }
        let back = [h / 2.0, h / 2.0, h];
        for s in (0..4).rev() {
            ybar.fill(0.0);
            ctx.vjp(&mut stepper.scratch[s], &kbar[s], &mut ybar, grad);
            for i in 0..nz {
                ubar[i] += ybar[i];
            }
            if s > 0 {
                let c = back[s - 1];
                let (lo, hi) = kbar.split_at_mut(s);
                let _ = hi;
                for i in 0..nz {
                    lo[s - 1][i] += c * ybar[i];
                }
            }
        }
        for i in 0..nz {
            ubar[i] += adj[n][i];
        }
    }
}

/// Loss and gradient with the default training step.
pub fn loss_and_grad(params: &UdeParams, dataset: &Dataset, loss_cfg: &LossConfig) -> GradientReport {
    Objective::new(dataset, loss_cfg).loss_and_grad(params)
}

/// Central differences `(L(theta + h e_i) - L(theta - h e_i)) / 2h` on the
/// requested coordinates.
pub fn finite_diff_grad(
    params: &UdeParams,
    dataset: &Dataset,
    loss_cfg: &LossConfig,
    coords: &[usize],
    h: f64,
) -> Vec<f64> {
    finite_diff_with(&Objective::new(dataset, loss_cfg), params, coords, h)
}

pub fn finite_diff_with(obj: &Objective, params: &UdeParams, coords: &[usize], h: f64) -> Vec<f64> {
    let flat = params.flat();
    let mut probe = params.clone();
    coords
        .iter()
        .map(|&i| {
            let mut x = flat.clone();
            x[i] = flat[i] + h;
            probe.set_flat(&x).expect("same length");
            let fp = obj.value(&probe);
            x[i] = flat[i] - h;
            probe.set_flat(&x).expect("same length");
            let fm = obj.value(&probe);
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Outcome of [`gradcheck`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub activation: Activation,
    pub coords: Vec<usize>,
    pub reverse: Vec<f64>,
    pub finite_diff: Vec<f64>,
    pub max_rel_error: f64,
}

/// Relative error with a floor on the denominator so coordinates whose
/// gradient is essentially zero are judged on an absolute scale.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Small problem for gradient checks: 5 nodes, ten RK4 steps of 0.1 yr,
/// 4x4 hidden layers, noisy target and every loss term switched on.
pub fn gradcheck_problem(activation: Activation, seed: u64) -> (Dataset, LossConfig, UdeParams) {
    let spec = DatasetSpec {
        nz: 5,
        t_end: 1.0,
        target_time: 1.0,
        driver_lattice: 11,
        transport: TransportParams { diffusion_d: 0.01, advection_v: 0.02 },
        target_noise: Some(NoiseSpec::iid(0.1, seed)),
        truth_tol: 1e-12,
        ..DatasetSpec::default()
    };
    let dataset = build_dataset(&spec).expect("valid gradcheck dataset");
    let loss = LossConfig {
        lambda_term: 1.0,
        lambda_coll: 0.5,
        lambda_wd: 1e-3,
        collocation_times: vec![0.5, 1.0],
        collocation_stride: 2,
        collocation_delta: 0.25,
    };
    let mlp = MlpSpec { h1: 4, h2: 4, activation };
    let params = init_params(&mlp, &RandomStream::new(seed, "gradcheck/init")).with_rate_scale(1.0);
    (dataset, loss, params)
}

/// Reverse-mode gradient against central differences on `n_coords`
/// randomly chosen parameters of [`gradcheck_problem`].
pub fn gradcheck(activation: Activation, seed: u64, n_coords: usize) -> GradCheck {
    let (dataset, loss, params) = gradcheck_problem(activation, seed);
    let rep = loss_and_grad(&params, &dataset, &loss);
    let mut rng = RandomStream::new(seed, "gradcheck/coords").rng();
    let coords: Vec<usize> = rand::seq::index::sample(&mut rng, params.len(), n_coords.min(params.len())).into_vec();
    let finite_diff = finite_diff_grad(&params, &dataset, &loss, &coords, 1e-6);
    let reverse: Vec<f64> = coords.iter().map(|&i| rep.grad[i]).collect();
    let max_rel_error = reverse
        .iter()
        .zip(&finite_diff)
        .map(|(a, b)| relative_error(*a, *b))
        .fold(if rep.solver_failed { f64::INFINITY } else { 0.0 }, f64::max);
    GradCheck {
        activation,
        coords,
        reverse,
        finite_diff,
        max_rel_error,
    }
}

/// Evaluation-tolerance terminal prediction used for metrics and tuning.
pub fn predict_terminal(params: &UdeParams, dataset: &Dataset, cfg: &IntegratorConfig) -> Option<SocProfile> {
    if dataset.target_time == 0.0 {
        return Some(dataset.initial_profile.clone());
    }
    let ctx = RhsContext::with_source(&dataset.grid, dataset.transport, params, &dataset.drivers).ok()?;
    let out = crate::integrator::safe_solve(
        &ctx,
        &dataset.initial_profile,
        (dataset.t_span.0, dataset.target_time),
        &[],
        cfg,
    );
    out.terminal
}
