//! Explicit Runge-Kutta integration: fixed-step RK4 (the training path, whose
//! step sequence the adjoint replays) and adaptive Tsitouras 5(4).

use std::panic::{catch_unwind, AssertUnwindSafe};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::SocProfile;
use crate::pde::{RhsContext, RhsWorkspace};

/// A semi-discrete system `du/dt = f(u, t)`.
pub trait OdeRhs {
    type Scratch;
    fn dim(&self) -> usize;
    fn scratch(&self) -> Self::Scratch;
    fn eval(&self, u: &[f64], t: f64, scratch: &mut Self::Scratch, out: &mut [f64]);
}

impl OdeRhs for RhsContext<'_> {
    type Scratch = RhsWorkspace;

    fn dim(&self) -> usize {
        self.nz()
    }

    fn scratch(&self) -> RhsWorkspace {
        RhsWorkspace::new(self)
    }

    fn eval(&self, u: &[f64], t: f64, scratch: &mut RhsWorkspace, out: &mut [f64]) {
        self.eval_into(u, t, scratch, out)
    }
}

/// Closure-backed system, handy for analytic test problems.
pub struct FnRhs<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64], f64, &mut [f64])> OdeRhs for FnRhs<F> {
    type Scratch = ();

    fn dim(&self) -> usize {
        self.dim
    }

    fn scratch(&self) {}

    fn eval(&self, u: &[f64], t: f64, _: &mut (), out: &mut [f64]) {
        (self.f)(u, t, out)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    /// Rounds to the working precision. In f32 mode state and parameters are
    /// stored at single precision while arithmetic stays in f64.
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F64 => v,
            Precision::F32 => v as f32 as f64,
        }
    }

    pub fn round_slice(self, values: &mut [f64]) {
        if self == Precision::F32 {
            for v in values {
                *v = *v as f32 as f64;
            }
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::invalid(format!("unknown precision {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Method {
    Rk4Fixed { dt: f64 },
    Tsit5 { rtol: f64, atol: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub method: Method,
    pub max_steps: usize,
    #[serde(default)]
    pub precision: Precision,
}

impl IntegratorConfig {
    pub fn rk4(dt: f64) -> Self {
        IntegratorConfig {
            method: Method::Rk4Fixed { dt },
            max_steps: 1_000_000,
            precision: Precision::F64,
        }
    }

    pub fn tsit5(rtol: f64, atol: f64) -> Self {
        IntegratorConfig {
            method: Method::Tsit5 { rtol, atol },
            max_steps: 100_000,
            precision: Precision::F64,
        }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        self.max_steps = max_steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::invalid("max_steps must be at least 1"));
        }
        match self.method {
            Method::Rk4Fixed { dt } if !(dt > 0.0 && dt.is_finite()) => {
                Err(Error::invalid(format!("dt must be positive, got {dt}")))
            }
            Method::Tsit5 { rtol, atol } if !(rtol > 0.0 && atol > 0.0) => Err(Error::invalid(
                format!("tolerances must be positive, got rtol={rtol} atol={atol}"),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SolveStatus {
    Ok,
    Failed { time: f64, reason: String },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SolveStats {
    pub steps: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
}

#[derive(Clone, Debug)]
pub struct SolveOutcome {
    pub status: SolveStatus,
    pub terminal: Option<SocProfile>,
    /// One profile per requested save time, in request order.
    pub trajectory: Vec<SocProfile>,
    pub stats: SolveStats,
}

impl SolveOutcome {
    fn failed(time: f64, reason: impl Into<String>, stats: SolveStats) -> Self {
        SolveOutcome {
            status: SolveStatus::Failed {
                time,
                reason: reason.into(),
            },
            terminal: None,
            trajectory: Vec::new(),
            stats,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == SolveStatus::Ok
    }

    pub fn into_result(self) -> Result<(SocProfile, Vec<SocProfile>)> {
        match self.status {
            SolveStatus::Ok => Ok((self.terminal.expect("ok solve has a terminal state"), self.trajectory)),
            SolveStatus::Failed { time, reason } => Err(Error::SolverFailure { time, reason }),
        }
    }
}

/// Number of RK4 steps covering `span` with nominal step `dt`; the last step
/// is truncated to land on the end point.
pub fn rk4_step_count(span: f64, dt: f64) -> usize {
    let n = (span / dt).ceil();
    // guard against ceil(500.0000000001) from rounding in span / dt
    if n > 1.0 && (span / dt - (n - 1.0)).abs() <= 1e-9 * n {
        (n - 1.0) as usize
    } else {
        n.max(1.0) as usize
    }
}

/// Time of RK4 step boundary `k` for `steps` steps from `t0` to `t1`.
pub fn rk4_time(t0: f64, t1: f64, dt: f64, steps: usize, k: usize) -> f64 {
    if k >= steps {
        t1
    } else {
        t0 + k as f64 * dt
    }
}

/// Classical RK4 step with separate scratch per stage, so the stage
/// evaluations stay available to the adjoint after the call.
pub struct Rk4Stepper<S> {
    pub k: [Vec<f64>; 4],
    pub y: Vec<f64>,
    pub scratch: [S; 4],
}

impl<S> Rk4Stepper<S> {
    pub fn new<R: OdeRhs<Scratch = S>>(sys: &R) -> Self {
        let n = sys.dim();
        Rk4Stepper {
            k: std::array::from_fn(|_| vec![0.0; n]),
            y: vec![0.0; n],
            scratch: std::array::from_fn(|_| sys.scratch()),
        }
    }

    /// Advances `u` from `t` by `h` into `out`. On a non-finite stage
    /// derivative returns the time of that stage.
    pub fn step<R: OdeRhs<Scratch = S>>(
        &mut self,
        sys: &R,
        u: &[f64],
        t: f64,
        h: f64,
        out: &mut [f64],
    ) -> std::result::Result<(), f64> {
        let n = u.len();
        let stage_t = [t, t + 0.5 * h, t + 0.5 * h, t + h];
        let stage_c = [0.5 * h, 0.5 * h, h];
        for s in 0..4 {
            let (head, tail) = self.k.split_at_mut(s);
            let ks = &mut tail[0];
            if s == 0 {
                sys.eval(u, stage_t[0], &mut self.scratch[0], ks);
            } else {
                let prev = &head[s - 1];
                for i in 0..n {
                    self.y[i] = u[i] + stage_c[s - 1] * prev[i];
                }
                sys.eval(&self.y, stage_t[s], &mut self.scratch[s], ks);
            }
            if ks.iter().any(|v| !v.is_finite()) {
                return Err(stage_t[s]);
            }
        }
        let [k1, k2, k3, k4] = &self.k;
        let h6 = h / 6.0;
        for i in 0..n {
            out[i] = u[i] + h6 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        Ok(())
    }
}

fn check_inputs(u0: &SocProfile, dim: usize, t_span: (f64, f64), save_at: &[f64]) -> Option<String> {
    let (t0, t1) = t_span;
    if !(t0 < t1) || !t0.is_finite() || !t1.is_finite() {
        return Some(format!("invalid time span ({t0}, {t1})"));
    }
    if u0.len() != dim {
        return Some(format!("initial state has {} nodes, system has {dim}", u0.len()));
    }
    if !u0.is_finite() {
        return Some("non-finite initial state".into());
    }
    if let Some(s) = save_at.iter().find(|&&s| !(s >= t0 && s <= t1)) {
        return Some(format!("save time {s} outside ({t0}, {t1})"));
    }
    None
}

/// Integrates `sys` over `t_span`. Failures are reported in the outcome.
pub fn integrate<R: OdeRhs>(
    sys: &R,
    u0: &SocProfile,
    t_span: (f64, f64),
    save_at: &[f64],
    cfg: &IntegratorConfig,
) -> SolveOutcome {
    if let Err(e) = cfg.validate() {
        return SolveOutcome::failed(t_span.0, e.to_string(), SolveStats::default());
    }
    if let Some(reason) = check_inputs(u0, sys.dim(), t_span, save_at) {
        return SolveOutcome::failed(t_span.0, reason, SolveStats::default());
    }
    match cfg.method {
        Method::Rk4Fixed { dt } => solve_rk4(sys, u0, t_span, save_at, dt, cfg),
        Method::Tsit5 { rtol, atol } => solve_tsit5(sys, u0, t_span, save_at, rtol, atol, cfg),
    }
}

/// [`integrate`] behind a panic barrier: never unwinds into the caller.
pub fn safe_solve<R: OdeRhs>(
    sys: &R,
    u0: &SocProfile,
    t_span: (f64, f64),
    save_at: &[f64],
    cfg: &IntegratorConfig,
) -> SolveOutcome {
    match catch_unwind(AssertUnwindSafe(|| integrate(sys, u0, t_span, save_at, cfg))) {
        Ok(out) => out,
        Err(payload) => {
            let reason = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic in right-hand side".into());
            SolveOutcome::failed(t_span.0, format!("panic: {reason}"), SolveStats::default())
        }
    }
}

/// Hands out save times in ascending order while remembering request order.
struct SaveQueue {
    order: Vec<usize>,
    times: Vec<f64>,
    next: usize,
    out: Vec<Option<SocProfile>>,
}

impl SaveQueue {
    fn new(save_at: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..save_at.len()).collect();
        order.sort_by(|&a, &b| save_at[a].total_cmp(&save_at[b]));
        SaveQueue {
            order,
            times: save_at.to_vec(),
            next: 0,
            out: vec![None; save_at.len()],
        }
    }

    fn peek(&self) -> Option<f64> {
        self.order.get(self.next).map(|&i| self.times[i])
    }

    /// Records every pending save time in `[ta, tb]` by linear interpolation
    /// between the two states (exact copies at the end points).
    fn drain(&mut self, ta: f64, ua: &[f64], tb: f64, ub: &[f64]) {
        while let Some(s) = self.peek() {
            if s > tb {
                break;
            }
            let values = if s == tb {
                ub.to_vec()
            } else if s <= ta {
                ua.to_vec()
            } else {
                let w = (s - ta) / (tb - ta);
                ua.iter().zip(ub).map(|(a, b)| a + w * (b - a)).collect()
            };
            let idx = self.order[self.next];
            self.out[idx] = Some(SocProfile::new(values, s));
            self.next += 1;
        }
    }

    fn finish(self) -> Vec<SocProfile> {
        self.out.into_iter().map(|p| p.expect("all save times visited")).collect()
    }
}

fn solve_rk4<R: OdeRhs>(
    sys: &R,
    u0: &SocProfile,
    (t0, t1): (f64, f64),
    save_at: &[f64],
    dt: f64,
    cfg: &IntegratorConfig,
) -> SolveOutcome {
    let steps = rk4_step_count(t1 - t0, dt);
    let mut stats = SolveStats::default();
    if steps > cfg.max_steps {
        return SolveOutcome::failed(t0, format!("{steps} steps exceed max_steps {}", cfg.max_steps), stats);
    }
    let mut stepper = Rk4Stepper::new(sys);
    let mut saves = SaveQueue::new(save_at);
    let mut u = u0.values.clone();
    cfg.precision.round_slice(&mut u);
    let mut next = vec![0.0; u.len()];
    saves.drain(t0, &u, t0, &u);
    for k in 0..steps {
        let ta = rk4_time(t0, t1, dt, steps, k);
        let tb = rk4_time(t0, t1, dt, steps, k + 1);
        stats.rhs_evals += 4;
        if let Err(t_bad) = stepper.step(sys, &u, ta, tb - ta, &mut next) {
            return SolveOutcome::failed(t_bad, "non-finite derivative", stats);
        }
        cfg.precision.round_slice(&mut next);
        if next.iter().any(|v| !v.is_finite()) {
            return SolveOutcome::failed(tb, "non-finite state", stats);
        }
        stats.steps += 1;
        saves.drain(ta, &u, tb, &next);
        std::mem::swap(&mut u, &mut next);
    }
    SolveOutcome {
        status: SolveStatus::Ok,
        terminal: Some(SocProfile::new(u, t1)),
        trajectory: saves.finish(),
        stats,
    }
}

// Tsitouras (2011) 5(4) pair; stage 7 is evaluated at the new point (FSAL).
const C: [f64; 6] = [0.161, 0.327, 0.9, 0.9800255409045097, 1.0, 1.0];
const A: [&[f64]; 6] = [
    &[0.161],
    &[-0.008480655492356989, 0.335480655492357],
    &[2.897153057105493, -6.359448489975075, 4.3622954328695815],
    &[5.325864828439257, -11.748883564062828, 7.4955393428898365, -0.09249506636175525],
    &[
        5.86145544294642,
        -12.92096931784711,
        8.159367898576159,
        -0.071584973281401,
        -0.028269050394068383,
    ],
    &[
        0.09646076681806523,
        0.01,
        0.4798896504144996,
        1.379008574103742,
        -3.290069515436081,
        2.324710524099774,
    ],
];
const BTILDE: [f64; 7] = [
    -0.00178001105222577714,
    -0.0008164344596567469,
    0.007880878010261995,
    -0.1447110071732629,
    0.5823571654525552,
    -0.45808210592918697,
    0.015151515151515152,
];

const SAFETY: f64 = 0.9;
const BETA1: f64 = 0.7 / 5.0;
const BETA2: f64 = 0.4 / 5.0;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;

fn error_norm(err: &[f64], u: &[f64], v: &[f64], rtol: f64, atol: f64) -> f64 {
    let sum: f64 = err
        .iter()
        .zip(u.iter().zip(v))
        .map(|(e, (a, b))| {
            let sc = atol + rtol * a.abs().max(b.abs());
            (e / sc) * (e / sc)
        })
        .sum();
    (sum / err.len() as f64).sqrt()
}

fn initial_step<R: OdeRhs>(
    sys: &R,
    scratch: &mut R::Scratch,
    u0: &[f64],
    f0: &[f64],
    t0: f64,
    span: f64,
    rtol: f64,
    atol: f64,
    stats: &mut SolveStats,
) -> f64 {
    let zeros = vec![0.0; u0.len()];
    let d0 = error_norm(u0, u0, &zeros, rtol, atol);
    let d1 = error_norm(f0, u0, &zeros, rtol, atol);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span);
    let u1: Vec<f64> = u0.iter().zip(f0).map(|(u, f)| u + h0 * f).collect();
    let mut f1 = vec![0.0; u0.len()];
    sys.eval(&u1, t0 + h0, scratch, &mut f1);
    stats.rhs_evals += 1;
    let df: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = error_norm(&df, u0, &zeros, rtol, atol) / h0;
    let h1 = if !d2.is_finite() {
        h0
    } else if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    (100.0 * h0).min(h1).min(span)
}

fn solve_tsit5<R: OdeRhs>(
    sys: &R,
    u0: &SocProfile,
    (t0, t1): (f64, f64),
    save_at: &[f64],
    rtol: f64,
    atol: f64,
    cfg: &IntegratorConfig,
) -> SolveOutcome {
    let n = u0.len();
    let mut stats = SolveStats::default();
    let mut scratch = sys.scratch();
    let mut saves = SaveQueue::new(save_at);
    let mut u = u0.values.clone();
    cfg.precision.round_slice(&mut u);
    saves.drain(t0, &u, t0, &u);

    let mut k: [Vec<f64>; 7] = std::array::from_fn(|_| vec![0.0; n]);
    let mut y = vec![0.0; n];
    let mut unew = vec![0.0; n];
    let mut err = vec![0.0; n];

    sys.eval(&u, t0, &mut scratch, &mut k[0]);
    stats.rhs_evals += 1;
    if k[0].iter().any(|v| !v.is_finite()) {
        return SolveOutcome::failed(t0, "non-finite derivative", stats);
    }
    let mut h = initial_step(sys, &mut scratch, &u, &k[0], t0, t1 - t0, rtol, atol, &mut stats);
    let mut t = t0;
    let mut err_prev: f64 = 1e-4;
    let mut attempts = 0usize;

    while t < t1 {
        attempts += 1;
        if attempts > cfg.max_steps {
            return SolveOutcome::failed(t, format!("exceeded max_steps {}", cfg.max_steps), stats);
        }
        let h_min = 1e-12 * t.abs().max(t1.abs()).max(1.0);
        // never step past the next save time or the end
        let stop = saves.peek().filter(|&s| s > t).unwrap_or(t1).min(t1);
        let landing = t + h >= stop - 1e-12 * stop.abs().max(1.0);
        let hs = if landing { stop - t } else { h };

        let mut bad: Option<f64> = None;
        for s in 0..6 {
            let row = A[s];
            for i in 0..n {
                let mut acc = 0.0;
                for (j, a) in row.iter().enumerate() {
                    acc += a * k[j][i];
                }
                y[i] = u[i] + hs * acc;
            }
            let ts = if s == 5 { t + hs } else { t + C[s] * hs };
            let (done, rest) = k.split_at_mut(s + 1);
            let _ = done;
            sys.eval(&y, ts, &mut scratch, &mut rest[0]);
            stats.rhs_evals += 1;
            if s == 5 {
                unew.copy_from_slice(&y);
            }
            if rest[0].iter().any(|v| !v.is_finite()) {
                bad = Some(ts);
                break;
            }
        }
        if let Some(t_bad) = bad {
            // retreat towards the last good state before giving up
            stats.rejected += 1;
            h = 0.25 * hs;
            if h < h_min {
                return SolveOutcome::failed(t_bad, "non-finite derivative", stats);
            }
            continue;
        }
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..7 {
                acc += BTILDE[j] * k[j][i];
            }
            err[i] = hs * acc;
        }
        let en = error_norm(&err, &u, &unew, rtol, atol);
        if !en.is_finite() {
            stats.rejected += 1;
            h = 0.25 * hs;
            if h < h_min {
                return SolveOutcome::failed(t, "non-finite error estimate", stats);
            }
            continue;
        }
        if en <= 1.0 {
            let t_new = if landing { stop } else { t + hs };
            cfg.precision.round_slice(&mut unew);
            saves.drain(t, &u, t_new, &unew);
            std::mem::swap(&mut u, &mut unew);
            k.swap(0, 6);
            if cfg.precision == Precision::F32 {
                sys.eval(&u, t_new, &mut scratch, &mut k[0]);
                stats.rhs_evals += 1;
            }
            t = t_new;
            stats.steps += 1;
            let en_c = en.max(1e-10);
            let fac = (SAFETY * en_c.powf(-BETA1) * err_prev.powf(BETA2)).clamp(FAC_MIN, FAC_MAX);
            err_prev = en_c;
            // a step shortened to hit a save point should not shrink the next one
            h = if landing { h.max(hs * fac) } else { hs * fac };
        } else {
            stats.rejected += 1;
            let fac = (SAFETY * en.powf(-1.0 / 5.0)).max(FAC_MIN);
            h = hs * fac;
            if h < h_min {
                return SolveOutcome::failed(t, "step size underflow", stats);
            }
        }
    }
    SolveOutcome {
        status: SolveStatus::Ok,
        terminal: Some(SocProfile::new(u, t1)),
        trajectory: saves.finish(),
        stats,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_grid, TransportParams};
    use crate::pde::FaultInjection;
    use crate::synthetic::{initial_soc, DEPTH_SCALE, K_DECAY, SURFACE_SOC};

    fn decay(dim: usize) -> FnRhs<impl Fn(&[f64], f64, &mut [f64])> {
        FnRhs {
            dim,
            f: |u: &[f64], _t: f64, out: &mut [f64]| {
                for (o, v) in out.iter_mut().zip(u) {
                    *o = -v;
                }
            },
        }
    }

    fn exp_error(cfg: &IntegratorConfig) -> f64 {
        let u0 = SocProfile::new(vec![1.0, 2.0, 0.5], 0.0);
        let out = integrate(&decay(3), &u0, (0.0, 1.0), &[], cfg);
        let term = out.terminal.unwrap();
        term.values
            .iter()
            .zip(&u0.values)
            .map(|(a, b)| (a - b * (-1.0f64).exp()).abs() / (b * (-1.0f64).exp()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_rhs_keeps_state_exactly() {
        let sys = FnRhs {
            dim: 4,
            f: |_: &[f64], _: f64, out: &mut [f64]| out.fill(0.0),
        };
        let u0 = SocProfile::new(vec![0.1, 0.2, 0.3, 0.4], 0.0);
        for cfg in [IntegratorConfig::rk4(0.1), IntegratorConfig::tsit5(1e-6, 1e-6)] {
            let out = integrate(&sys, &u0, (0.0, 5.0), &[], &cfg);
            assert_eq!(out.terminal.unwrap().values, u0.values);
        }
    }

    #[test]
    fn exponential_decay_is_accurate() {
        assert!(exp_error(&IntegratorConfig::tsit5(1e-6, 1e-6)) <= 1e-6);
        assert!(exp_error(&IntegratorConfig::rk4(0.01)) <= 1e-9);
    }

    #[test]
    fn rk4_order_is_four() {
        let errs: Vec<f64> = [0.1, 0.05, 0.025]
            .iter()
            .map(|&dt| exp_error(&IntegratorConfig::rk4(dt)))
            .collect();
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!(order >= 3.9, "observed order {order}");
        }
    }

    #[test]
    fn tsit5_tableau_has_fifth_order() {
        // one step on the exponential, halving h: local error ~ h^6
        let local = |h: f64| {
            let cfg = IntegratorConfig::tsit5(1e3, 1e3);
            let u0 = SocProfile::new(vec![1.0], 0.0);
            let out = integrate(&decay(1), &u0, (0.0, h), &[], &cfg);
            assert_eq!(out.stats.steps, 1);
            (out.terminal.unwrap().values[0] - (-h).exp()).abs()
        };
        let order = (local(0.2) / local(0.1)).log2();
        assert!(order >= 5.7, "local error order {order}");
    }

    #[test]
    fn tightening_tolerance_does_not_hurt() {
        let loose = exp_error(&IntegratorConfig::tsit5(1e-5, 1e-5));
        let tight = exp_error(&IntegratorConfig::tsit5(1e-6, 1e-6));
        assert!(tight <= loose);
    }

    #[test]
    fn time_dependent_forcing() {
        // du/dt = cos t  =>  u(T) = sin T
        let sys = FnRhs {
            dim: 1,
            f: |_: &[f64], t: f64, out: &mut [f64]| out[0] = t.cos(),
        };
        let u0 = SocProfile::new(vec![0.0], 0.0);
        let out = integrate(&sys, &u0, (0.0, 3.0), &[], &IntegratorConfig::tsit5(1e-8, 1e-8));
        assert!((out.terminal.unwrap().values[0] - 3.0f64.sin()).abs() < 1e-7);
    }

    #[test]
    fn save_points_in_request_order() {
        let u0 = SocProfile::new(vec![1.0], 0.0);
        let save = [0.7, 0.0, 0.25, 1.0];
        for cfg in [IntegratorConfig::rk4(0.1), IntegratorConfig::tsit5(1e-8, 1e-8)] {
            let out = integrate(&decay(1), &u0, (0.0, 1.0), &save, &cfg);
            assert_eq!(out.trajectory.len(), 4);
            for (p, &s) in out.trajectory.iter().zip(&save) {
                assert_eq!(p.time, s);
                assert!((p.values[0] - (-s).exp()).abs() < 2e-3, "{s}: {}", p.values[0]);
            }
            assert_eq!(out.trajectory[3].values, out.terminal.as_ref().unwrap().values);
            assert_eq!(out.trajectory[1].values, vec![1.0]);
        }
        // step-aligned adaptive saves are accurate, not interpolated
        let out = integrate(&decay(1), &u0, (0.0, 1.0), &save, &IntegratorConfig::tsit5(1e-9, 1e-9));
        assert!((out.trajectory[2].values[0] - (-0.25f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn rk4_last_step_is_truncated() {
        assert_eq!(rk4_step_count(50.0, 0.1), 500);
        assert_eq!(rk4_step_count(1.0, 0.3), 4);
        let u0 = SocProfile::new(vec![1.0], 0.0);
        let out = integrate(&decay(1), &u0, (0.0, 1.0), &[], &IntegratorConfig::rk4(0.3));
        assert_eq!(out.stats.steps, 4);
        assert!((out.terminal.unwrap().values[0] - (-1.0f64).exp()).abs() < 1e-4);
    }

    #[test]
    fn bad_inputs_fail_without_panicking() {
        let u0 = SocProfile::new(vec![1.0], 0.0);
        let cfg = IntegratorConfig::rk4(0.1);
        assert!(!integrate(&decay(1), &u0, (1.0, 0.0), &[], &cfg).is_ok());
        assert!(!integrate(&decay(1), &u0, (0.0, 1.0), &[2.0], &cfg).is_ok());
        assert!(!integrate(&decay(2), &u0, (0.0, 1.0), &[], &cfg).is_ok());
        let nan = SocProfile::new(vec![f64::NAN], 0.0);
        assert!(!integrate(&decay(1), &nan, (0.0, 1.0), &[], &cfg).is_ok());
        assert!(!integrate(&decay(1), &u0, (0.0, 1.0), &[], &IntegratorConfig::rk4(-1.0)).is_ok());
        let few = IntegratorConfig::rk4(0.1).with_max_steps(5);
        assert!(!integrate(&decay(1), &u0, (0.0, 1.0), &[], &few).is_ok());
    }

    #[test]
    fn injected_failure_reports_its_time() {
        let g = make_grid(10, 0.0, 1.0).unwrap();
        let ctx = RhsContext::transport_only(&g, TransportParams::default())
            .with_fault(Some(FaultInjection { after_time: 10.0 }));
        let u0 = initial_soc(&g, SURFACE_SOC, K_DECAY, DEPTH_SCALE);
        for cfg in [IntegratorConfig::rk4(0.1), IntegratorConfig::tsit5(1e-6, 1e-6)] {
            let out = safe_solve(&ctx, &u0, (0.0, 50.0), &[], &cfg);
            match out.status {
                SolveStatus::Failed { time, .. } => assert!((time - 10.0).abs() < 0.2, "{time}"),
                SolveStatus::Ok => panic!("expected failure"),
            }
            assert!(out.terminal.is_none());
        }
    }

    #[test]
    fn safe_solve_absorbs_panics() {
        let sys = FnRhs {
            dim: 1,
            f: |_: &[f64], t: f64, out: &mut [f64]| {
                if t > 0.5 {
                    panic!("boom");
                }
                out[0] = 0.0;
            },
        };
        let u0 = SocProfile::new(vec![1.0], 0.0);
        let prev = std::panic::take_hook();
        std::panic::set_hook(Box::new(|_| {}));
        let out = safe_solve(&sys, &u0, (0.0, 1.0), &[], &IntegratorConfig::rk4(0.1));
        std::panic::set_hook(prev);
        assert!(matches!(out.status, SolveStatus::Failed { ref reason, .. } if reason.contains("boom")));
    }

    #[test]
    fn safe_solve_passes_healthy_results_through() {
        let g = make_grid(30, 0.0, 1.0).unwrap();
        let ctx = RhsContext::transport_only(&g, TransportParams::default());
        let u0 = initial_soc(&g, SURFACE_SOC, K_DECAY, DEPTH_SCALE);
        let cfg = IntegratorConfig::tsit5(1e-6, 1e-6);
        let a = integrate(&ctx, &u0, (0.0, 50.0), &[10.0, 20.0], &cfg);
        let b = safe_solve(&ctx, &u0, (0.0, 50.0), &[10.0, 20.0], &cfg);
        assert_eq!(a.terminal, b.terminal);
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.stats, b.stats);
    }

    #[test]
    fn pure_diffusion_conserves_mass() {
        let g = make_grid(30, 0.0, 1.0).unwrap();
        let ctx = RhsContext::transport_only(&g, TransportParams::new(1e-3, 0.0).unwrap());
        let u0 = initial_soc(&g, SURFACE_SOC, K_DECAY, DEPTH_SCALE);
        let m0 = g.mass(&u0.values);
        for cfg in [IntegratorConfig::rk4(0.1), IntegratorConfig::tsit5(1e-6, 1e-6)] {
            let out = integrate(&ctx, &u0, (0.0, 50.0), &[], &cfg);
            let m1 = g.mass(&out.terminal.unwrap().values);
            assert!(((m1 - m0) / m0).abs() <= 1e-6);
        }
    }

    #[test]
    fn rk4_and_tsit5_agree_on_baseline() {
        let g = make_grid(30, 0.0, 1.0).unwrap();
        let ctx = RhsContext::transport_only(&g, TransportParams::default());
        let u0 = initial_soc(&g, SURFACE_SOC, K_DECAY, DEPTH_SCALE);
        let a = integrate(&ctx, &u0, (0.0, 50.0), &[], &IntegratorConfig::rk4(0.05));
        let b = integrate(&ctx, &u0, (0.0, 50.0), &[], &IntegratorConfig::tsit5(1e-6, 1e-6));
        let (a, b) = (a.terminal.unwrap(), b.terminal.unwrap());
        let diff = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-5, "{diff}");
    }

    #[test]
    fn f32_mode_rounds_state() {
        let u0 = SocProfile::new(vec![1.0, 0.3], 0.0);
        let cfg = IntegratorConfig::rk4(0.1).with_precision(Precision::F32);
        let out = integrate(&decay(2), &u0, (0.0, 1.0), &[], &cfg);
        for v in out.terminal.unwrap().values {
            assert_eq!(v, v as f32 as f64);
        }
        assert!(exp_error(&cfg) < 1e-5);
    }
}
