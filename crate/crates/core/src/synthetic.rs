//! Synthetic soil drivers, initial SOC profile, noise models and the
//! zero-source ground truth used for supervision.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DepthGrid, DriverSample, SocProfile, TransportParams};
use crate::integrator::{safe_solve, IntegratorConfig, SolveStatus};
use crate::matrix::Matrix;
use crate::pde::RhsContext;
use crate::rng::{gaussian_draws, RandomStream};

pub const SURFACE_SOC: f64 = 1.2;
pub const K_DECAY: f64 = 0.02;
pub const DEPTH_SCALE: f64 = 100.0;

/// Exponentially decaying initial profile `c0 * exp(-k * z * L)`.
pub fn initial_soc(grid: &DepthGrid, c0: f64, k_decay: f64, depth_scale_l: f64) -> SocProfile {
    let values = grid
        .nodes()
        .iter()
        .map(|z| c0 * (-k_decay * z * depth_scale_l).exp())
        .collect();
    SocProfile::new(values, 0.0)
}

pub fn ph_at(z: f64, t: f64) -> f64 {
    ph_depth(z) + ph_season(t)
}

pub fn cec_at(z: f64, t: f64) -> f64 {
    cec_depth(z) + cec_cycle(t)
}

pub fn clay_at(z: f64, t: f64) -> f64 {
    clay_depth(z) + clay_cycle(t)
}

// The driver formulas are separable; the split lets the RHS hoist the
// depth parts out of the time loop.
fn ph_depth(z: f64) -> f64 {
    6.5 - 0.5 * z
}
fn ph_season(t: f64) -> f64 {
    0.10 * (2.0 * PI * t / 1.0).sin()
}
fn cec_depth(z: f64) -> f64 {
    0.5 + 0.1 * (2.0 * PI * z).sin()
}
fn cec_cycle(t: f64) -> f64 {
    0.05 * (2.0 * PI * t / 5.0).cos()
}
fn clay_depth(z: f64) -> f64 {
    25.0 + 5.0 * (2.0 * PI * z).cos()
}
fn clay_cycle(t: f64) -> f64 {
    0.5 * (2.0 * PI * t / 10.0).sin()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    MultiplicativeIid,
    MultiplicativeAr1,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Relative level; 0.07 means 7 %.
    pub level: f64,
    /// Lag-one correlation across depth (AR-1 only).
    pub rho: f64,
    pub seed: u64,
    /// Lower clip applied after noising, if any.
    pub floor: Option<f64>,
}

impl NoiseSpec {
    pub fn iid(level: f64, seed: u64) -> Self {
        NoiseSpec {
            kind: NoiseKind::MultiplicativeIid,
            level,
            rho: 0.0,
            seed,
            floor: None,
        }
    }

    pub fn ar1(level: f64, rho: f64, seed: u64) -> Self {
        NoiseSpec {
            kind: NoiseKind::MultiplicativeAr1,
            level,
            rho,
            seed,
            floor: None,
        }
    }

    pub fn with_floor(mut self, floor: Option<f64>) -> Self {
        self.floor = floor;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.level) {
            return Err(Error::invalid(format!("noise level {} outside [0, 1]", self.level)));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::invalid(format!("AR-1 rho {} outside [0, 1)", self.rho)));
        }
        Ok(())
    }
}

/// Standard-normal innovations reshaped to the field, correlated along each
/// row for the AR-1 kind.
fn noise_field(rows: usize, cols: usize, spec: &NoiseSpec, stream: &RandomStream) -> Matrix {
    let xi = gaussian_draws(stream, rows * cols);
    let mut eps = Matrix::zeros(rows, cols);
    match spec.kind {
        NoiseKind::MultiplicativeIid => eps.as_mut_slice().copy_from_slice(&xi),
        NoiseKind::MultiplicativeAr1 => {
            let innov = (1.0 - spec.rho * spec.rho).sqrt();
            for r in 0..rows {
                let src = &xi[r * cols..(r + 1) * cols];
                let row = eps.row_mut(r);
                let mut prev = 0.0;
                for (c, x) in src.iter().enumerate() {
                    prev = if c == 0 { *x } else { spec.rho * prev + innov * x };
                    row[c] = prev;
                }
            }
        }
    }
    eps
}

fn factors(rows: usize, cols: usize, spec: &NoiseSpec, stream: &RandomStream) -> Matrix {
    let mut f = noise_field(rows, cols, spec, stream);
    for v in f.as_mut_slice() {
        *v = 1.0 + spec.level * *v;
    }
    f
}

fn apply_factors(field: &Matrix, factors: &Matrix, floor: Option<f64>) -> Matrix {
    field.zip_map(factors, |x, f| {
        let y = x * f;
        match floor {
            Some(lo) => y.max(lo),
            None => y,
        }
    })
}

/// `x * (1 + level * eps)` with independent standard-normal `eps` per entry.
pub fn apply_multiplicative_noise(
    field: &Matrix,
    spec: &NoiseSpec,
    stream: &RandomStream,
) -> Result<Matrix> {
    spec.validate()?;
    if spec.kind != NoiseKind::MultiplicativeIid {
        return Err(Error::invalid("apply_multiplicative_noise needs the iid kind"));
    }
    let f = factors(field.rows(), field.cols(), spec, stream);
    Ok(apply_factors(field, &f, spec.floor))
}

/// Multiplicative noise whose `eps` follows a unit-variance AR-1 process
/// along each row (depth), independent between rows (times).
pub fn apply_ar1_noise(field: &Matrix, spec: &NoiseSpec, stream: &RandomStream) -> Result<Matrix> {
    spec.validate()?;
    if spec.kind != NoiseKind::MultiplicativeAr1 {
        return Err(Error::invalid("apply_ar1_noise needs the AR-1 kind"));
    }
    let f = factors(field.rows(), field.cols(), spec, stream);
    Ok(apply_factors(field, &f, spec.floor))
}

fn apply_noise(field: &Matrix, spec: &NoiseSpec, stream: &RandomStream) -> Result<Matrix> {
    match spec.kind {
        NoiseKind::MultiplicativeIid => apply_multiplicative_noise(field, spec, stream),
        NoiseKind::MultiplicativeAr1 => apply_ar1_noise(field, spec, stream),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    Clean,
    Noisy {
        noise: NoiseKind,
        level: f64,
        seed: u64,
    },
}

/// Multiplicative noise factors for the three drivers on a `[time x depth]`
/// lattice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DriverNoise {
    ph: Matrix,
    cec: Matrix,
    clay: Matrix,
    floor: Option<f64>,
}

/// pH, CEC and clay over `(time, depth)`.
///
/// The lattice matrices hold the values at `times`. Off-lattice queries
/// through [`DriverField::fill`] evaluate the closed forms exactly and, for
/// a noisy field, multiply by the noise factor interpolated linearly in
/// time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriverField {
    grid: DepthGrid,
    times: Vec<f64>,
    ph: Matrix,
    cec: Matrix,
    clay: Matrix,
    noise: Option<DriverNoise>,
    provenance: Provenance,
    #[serde(skip)]
    depth_parts: Vec<[f64; 3]>,
}

/// Clean drivers evaluated on the `times x grid` lattice.
pub fn sample_drivers(grid: &DepthGrid, times: &[f64]) -> Result<DriverField> {
    if times.is_empty() {
        return Err(Error::invalid("driver sampling needs at least one time"));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) || times.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid("driver times must be finite and strictly ascending"));
    }
    let z = grid.nodes();
    let nt = times.len();
    let nz = grid.nz();
    let field = DriverField {
        grid: grid.clone(),
        times: times.to_vec(),
        ph: Matrix::from_fn(nt, nz, |r, c| ph_at(z[c], times[r])),
        cec: Matrix::from_fn(nt, nz, |r, c| cec_at(z[c], times[r])),
        clay: Matrix::from_fn(nt, nz, |r, c| clay_at(z[c], times[r])),
        noise: None,
        provenance: Provenance::Clean,
        depth_parts: Vec::new(),
    };
    Ok(field.with_depth_parts())
}

impl DriverField {
    fn with_depth_parts(mut self) -> Self {
        self.depth_parts = self
            .grid
            .nodes()
            .iter()
            .map(|&z| [ph_depth(z), cec_depth(z), clay_depth(z)])
            .collect();
        self
    }

    /// Rebuilds caches skipped by serde.
    pub fn restore(self) -> Self {
        self.with_depth_parts()
    }

    /// Applies one noise realisation to all three drivers. pH, CEC and clay
    /// use separate child streams of `stream`.
    pub fn with_noise(&self, spec: &NoiseSpec, stream: &RandomStream) -> Result<DriverField> {
        spec.validate()?;
        let (nt, nz) = self.ph.shape();
        let ph = factors(nt, nz, spec, &stream.child("ph"));
        let cec = factors(nt, nz, spec, &stream.child("cec"));
        let clay = factors(nt, nz, spec, &stream.child("clay"));
        let mut out = self.clone();
        out.ph = apply_factors(&self.ph, &ph, spec.floor);
        out.cec = apply_factors(&self.cec, &cec, spec.floor);
        out.clay = apply_factors(&self.clay, &clay, spec.floor);
        out.noise = Some(DriverNoise {
            ph,
            cec,
            clay,
            floor: spec.floor,
        });
        out.provenance = Provenance::Noisy {
            noise: spec.kind,
            level: spec.level,
            seed: spec.seed,
        };
        Ok(out)
    }

    pub fn grid(&self) -> &DepthGrid {
        &self.grid
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn ph(&self) -> &Matrix {
        &self.ph
    }

    pub fn cec(&self) -> &Matrix {
        &self.cec
    }

    pub fn clay(&self) -> &Matrix {
        &self.clay
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn is_clean(&self) -> bool {
        self.noise.is_none()
    }

    /// Drivers at every grid node at time `t`.
    pub fn fill(&self, t: f64, out: &mut [DriverSample]) {
        debug_assert_eq!(out.len(), self.grid.nz());
        let (s_ph, s_cec, s_clay) = (ph_season(t), cec_cycle(t), clay_cycle(t));
        for (o, d) in out.iter_mut().zip(&self.depth_parts) {
            *o = DriverSample {
                ph: d[0] + s_ph,
                cec: d[1] + s_cec,
                clay: d[2] + s_clay,
            };
        }
        if let Some(noise) = &self.noise {
            let (r0, r1, w) = self.bracket(t);
            let lerp = |m: &Matrix, c: usize| (1.0 - w) * m.get(r0, c) + w * m.get(r1, c);
            for (c, o) in out.iter_mut().enumerate() {
                o.ph *= lerp(&noise.ph, c);
                o.cec *= lerp(&noise.cec, c);
                o.clay *= lerp(&noise.clay, c);
                if let Some(lo) = noise.floor {
                    o.ph = o.ph.max(lo);
                    o.cec = o.cec.max(lo);
                    o.clay = o.clay.max(lo);
                }
            }
        }
    }

    pub fn sample(&self, node: usize, t: f64) -> DriverSample {
        let mut row = vec![
            DriverSample {
                ph: 0.0,
                cec: 0.0,
                clay: 0.0
            };
            self.grid.nz()
        ];
        self.fill(t, &mut row);
        row[node]
    }

    /// Lattice rows around `t` and the weight of the upper one; clamps
    /// outside the lattice.
    fn bracket(&self, t: f64) -> (usize, usize, f64) {
        let times = &self.times;
        let last = times.len() - 1;
        if last == 0 || t <= times[0] {
            return (0, 0, 0.0);
        }
        if t >= times[last] {
            return (last, last, 0.0);
        }
        let hi = times.partition_point(|&x| x <= t).min(last);
        let lo = hi - 1;
        let w = (t - times[lo]) / (times[hi] - times[lo]);
        (lo, hi, w)
    }
}

/// Everything needed to build one synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub nz: usize,
    pub z_min: f64,
    pub z_max: f64,
    pub t_end: f64,
    pub target_time: f64,
    pub c0: f64,
    pub k_decay: f64,
    pub depth_scale: f64,
    pub transport: TransportParams,
    /// Number of uniform lattice times on `[0, t_end]` for driver noise.
    pub driver_lattice: usize,
    pub driver_noise: Option<NoiseSpec>,
    pub target_noise: Option<NoiseSpec>,
    /// Relative/absolute tolerance of the ground-truth solve.
    pub truth_tol: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            nz: 30,
            z_min: 0.0,
            z_max: 1.0,
            t_end: 50.0,
            target_time: 50.0,
            c0: SURFACE_SOC,
            k_decay: K_DECAY,
            depth_scale: DEPTH_SCALE,
            transport: TransportParams::default(),
            driver_lattice: 51,
            driver_noise: None,
            target_noise: None,
            truth_tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub grid: DepthGrid,
    pub t_span: (f64, f64),
    pub transport: TransportParams,
    pub drivers: DriverField,
    /// Initial condition handed to the model.
    pub initial_profile: SocProfile,
    /// Observation the loss is fitted against.
    pub target_profile: SocProfile,
    pub target_time: f64,
    /// Noise-free zero-source solution at `target_time`.
    pub clean_target: SocProfile,
}

/// Integrates the transport-only equation (no neural source) to `t_end`.
pub fn generate_clean_target(
    grid: &DepthGrid,
    transport: TransportParams,
    u0: &SocProfile,
    t_end: f64,
    tol: f64,
) -> Result<SocProfile> {
    if !(t_end >= 0.0) {
        return Err(Error::invalid(format!("t_end must be non-negative, got {t_end}")));
    }
    if t_end == 0.0 {
        return Ok(u0.clone());
    }
    let ctx = RhsContext::transport_only(grid, transport);
    let out = safe_solve(&ctx, u0, (0.0, t_end), &[], &IntegratorConfig::tsit5(tol, tol));
    match out.status {
        SolveStatus::Ok => Ok(out.terminal.expect("ok solve has a terminal state")),
        SolveStatus::Failed { time, reason } => Err(Error::SolverFailure { time, reason }),
    }
}

/// Builds drivers, the clean truth and the (possibly noisy) observation.
///
/// Noise is applied after the clean simulation, so `clean_target` never
/// depends on the noise settings. When the target time is 0 the observation
/// is the initial profile itself and the model starts from it.
pub fn build_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if !(spec.target_time == 0.0 || spec.target_time == spec.t_end) {
        return Err(Error::invalid(format!(
            "target time must be 0 or {}, got {}",
            spec.t_end, spec.target_time
        )));
    }
    let grid = DepthGrid::new(spec.nz, spec.z_min, spec.z_max)?;
    let transport = TransportParams::new(spec.transport.diffusion_d, spec.transport.advection_v)?;
    let lattice: Vec<f64> = if spec.driver_lattice < 2 {
        vec![0.0]
    } else {
        let n = spec.driver_lattice;
        (0..n).map(|i| spec.t_end * i as f64 / (n - 1) as f64).collect()
    };
    let clean_drivers = sample_drivers(&grid, &lattice)?;
    let drivers = match &spec.driver_noise {
        Some(noise) => clean_drivers.with_noise(noise, &RandomStream::new(noise.seed, "noise/drivers"))?,
        None => clean_drivers,
    };

    let clean_initial = initial_soc(&grid, spec.c0, spec.k_decay, spec.depth_scale);
    let clean_target =
        generate_clean_target(&grid, transport, &clean_initial, spec.target_time, spec.truth_tol)?;

    let target_profile = match &spec.target_noise {
        Some(noise) => {
            let row = Matrix::from_rows(&[clean_target.values.clone()]);
            let noisy = apply_noise(&row, noise, &RandomStream::new(noise.seed, "noise/target"))?;
            SocProfile::new(noisy.row(0).to_vec(), spec.target_time)
        }
        None => clean_target.clone(),
    };
    let initial_profile = if spec.target_time == 0.0 {
        SocProfile::new(target_profile.values.clone(), 0.0)
    } else {
        clean_initial
    };

    Ok(Dataset {
        grid,
        t_span: (0.0, spec.t_end),
        transport,
        drivers,
        initial_profile,
        target_profile,
        target_time: spec.target_time,
        clean_target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn initial_profile_values() {
        let g = make_grid(3, 0.0, 1.0).unwrap();
        let p = initial_soc(&g, SURFACE_SOC, K_DECAY, DEPTH_SCALE);
        assert_eq!(p.time, 0.0);
        assert_eq!(p.values[0], 1.2);
        assert!(close(p.values[1], 0.441455, 1e-6));
        assert!(close(p.values[2], 0.162402, 1e-6));
        assert!(close(p.values[1], 1.2 * (-1.0f64).exp(), 1e-14));
    }

    #[test]
    fn driver_formula_examples() {
        assert_eq!(ph_at(0.0, 0.0), 6.5);
        assert_eq!(ph_at(1.0, 0.0), 6.0);
        assert!(close(ph_at(0.5, 0.25), 6.35, 1e-12));
        assert!(close(cec_at(0.0, 0.0), 0.55, 1e-12));
        assert!(close(cec_at(0.25, 0.0), 0.65, 1e-12));
        assert!(close(cec_at(0.5, 1.25), 0.5, 1e-12));
        assert!(close(clay_at(0.0, 0.0), 30.0, 1e-12));
        assert!(close(clay_at(0.5, 0.0), 20.0, 1e-12));
        assert!(close(clay_at(0.25, 2.5), 25.5, 1e-12));
    }

    #[test]
    fn sampled_driver_rows() {
        let g = make_grid(3, 0.0, 1.0).unwrap();
        let d = sample_drivers(&g, &[0.0]).unwrap();
        assert_eq!(d.ph().row(0), &[6.5, 6.25, 6.0]);
        let clay = d.clay().row(0);
        assert!(close(clay[0], 30.0, 1e-12) && close(clay[2], 30.0, 1e-12));
        assert_eq!(d.provenance(), &Provenance::Clean);
        assert!(sample_drivers(&g, &[]).is_err());
        assert!(sample_drivers(&g, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn fill_matches_closed_form_off_lattice() {
        let g = make_grid(30, 0.0, 1.0).unwrap();
        let d = sample_drivers(&g, &[0.0, 50.0]).unwrap();
        for &t in &[0.0, 0.13, 7.77, 49.9] {
            for node in [0, 11, 29] {
                let s = d.sample(node, t);
                let z = g.nodes()[node];
                assert!(close(s.ph, ph_at(z, t), 1e-12));
                assert!(close(s.cec, cec_at(z, t), 1e-12));
                assert!(close(s.clay, clay_at(z, t), 1e-12));
            }
        }
    }

    #[test]
    fn zero_level_noise_is_identity() {
        let m = Matrix::from_fn(4, 7, |r, c| 1.0 + r as f64 + 0.1 * c as f64);
        let s = RandomStream::new(1, "n");
        assert_eq!(apply_multiplicative_noise(&m, &NoiseSpec::iid(0.0, 1), &s).unwrap(), m);
        assert_eq!(apply_ar1_noise(&m, &NoiseSpec::ar1(0.0, 0.8, 1), &s).unwrap(), m);
    }

    #[test]
    fn pinned_draw_formula() {
        // x * (1 + eta * eps) with eps = 1
        let spec = NoiseSpec::iid(0.07, 0);
        let f = 1.0 + spec.level * 1.0;
        assert!(close(2.0 * f, 2.14, 1e-12));
        // and the library path reproduces x*(1+eta*eps) for the stream's own draw
        let s = RandomStream::new(5, "pin");
        let eps = gaussian_draws(&s, 1)[0];
        let out = apply_multiplicative_noise(&Matrix::from_rows(&[vec![2.0]]), &spec, &s).unwrap();
        assert_eq!(out.get(0, 0), 2.0 * (1.0 + 0.07 * eps));
    }

    #[test]
    fn kind_mismatch_rejected() {
        let m = Matrix::zeros(1, 3);
        let s = RandomStream::new(1, "n");
        assert!(apply_multiplicative_noise(&m, &NoiseSpec::ar1(0.1, 0.5, 1), &s).is_err());
        assert!(apply_ar1_noise(&m, &NoiseSpec::iid(0.1, 1), &s).is_err());
        assert!(apply_ar1_noise(&m, &NoiseSpec::ar1(0.1, 1.0, 1), &s).is_err());
        assert!(apply_multiplicative_noise(&m, &NoiseSpec::iid(1.5, 1), &s).is_err());
    }

    #[test]
    fn ar1_with_zero_rho_matches_iid() {
        let m = Matrix::from_fn(3, 20, |_, c| 1.0 + c as f64);
        let s = RandomStream::new(11, "n");
        let a = apply_multiplicative_noise(&m, &NoiseSpec::iid(0.2, 11), &s).unwrap();
        let b = apply_ar1_noise(&m, &NoiseSpec::ar1(0.2, 0.0, 11), &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn iid_relative_spread() {
        let n = 100_000;
        let m = Matrix::from_fn(1, n, |_, c| 0.5 + (c % 17) as f64);
        let noisy = apply_multiplicative_noise(&m, &NoiseSpec::iid(0.35, 3), &RandomStream::new(3, "n")).unwrap();
        let rel: Vec<f64> = (0..n).map(|c| noisy.get(0, c) / m.get(0, c) - 1.0).collect();
        let mean = rel.iter().sum::<f64>() / n as f64;
        let sd = (rel.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((sd - 0.35).abs() <= 0.01, "sd {sd}");
        // unbiased: mean of x~/x within 3 eta / sqrt(n)
        assert!(mean.abs() <= 3.0 * 0.35 / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn ar1_autocorrelation_and_variance() {
        let spec = NoiseSpec::ar1(1.0, 0.8, 0);
        let eps = noise_field(1, 100_000, &spec, &RandomStream::new(8, "ar"));
        let e = eps.row(0);
        let n = e.len() as f64;
        let mean = e.iter().sum::<f64>() / n;
        let var = e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let lag1 = e.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / (n - 1.0) / var;
        assert!((lag1 - 0.8).abs() <= 0.02, "lag-1 {lag1}");

        // marginal variance per node over many independent rows
        let rows = 100_000;
        let eps = noise_field(rows, 6, &spec, &RandomStream::new(9, "ar"));
        for c in 0..6 {
            let v = (0..rows).map(|r| eps.get(r, c).powi(2)).sum::<f64>() / rows as f64;
            assert!((v - 1.0).abs() <= 0.02, "node {c}: var {v}");
        }
    }

    #[test]
    fn floor_clips() {
        let m = Matrix::from_fn(1, 1000, |_, _| 1.0);
        let spec = NoiseSpec::iid(1.0, 2).with_floor(Some(0.0));
        let out = apply_multiplicative_noise(&m, &spec, &RandomStream::new(2, "f")).unwrap();
        assert!(out.min() >= 0.0);
        assert!(out.as_slice().iter().any(|&v| v == 0.0));
    }

    #[test]
    fn noisy_field_interpolates_factors() {
        let g = make_grid(5, 0.0, 1.0).unwrap();
        let times: Vec<f64> = (0..11).map(|i| i as f64 * 5.0).collect();
        let clean = sample_drivers(&g, &times).unwrap();
        let noisy = clean
            .with_noise(&NoiseSpec::ar1(0.07, 0.8, 4), &RandomStream::new(4, "noise/drivers"))
            .unwrap();
        assert!(matches!(noisy.provenance(), Provenance::Noisy { .. }));
        // on-lattice query equals lattice value
        let s = noisy.sample(2, 10.0);
        assert!(close(s.ph, noisy.ph().get(2, 2), 1e-12));
        assert!(close(s.clay, noisy.clay().get(2, 2), 1e-12));
        // off-lattice keeps the seasonal term of the closed form
        let t = 12.25;
        let s = noisy.sample(1, t);
        let z = g.nodes()[1];
        let f_lo = noisy.ph().get(2, 1) / ph_at(z, 10.0);
        let f_hi = noisy.ph().get(3, 1) / ph_at(z, 15.0);
        let f = 0.55 * f_lo + 0.45 * f_hi;
        assert!(close(s.ph, ph_at(z, t) * f, 1e-12));
    }

    #[test]
    fn clean_target_at_zero_is_initial() {
        let g = make_grid(30, 0.0, 1.0).unwrap();
        let u0 = initial_soc(&g, SURFACE_SOC, K_DECAY, DEPTH_SCALE);
        let out = generate_clean_target(&g, TransportParams::default(), &u0, 0.0, 1e-6).unwrap();
        assert_eq!(out, u0);
        assert!(generate_clean_target(&g, TransportParams::default(), &u0, -1.0, 1e-6).is_err());
    }

    #[test]
    fn zero_transport_keeps_initial() {
        let g = make_grid(30, 0.0, 1.0).unwrap();
        let u0 = initial_soc(&g, SURFACE_SOC, K_DECAY, DEPTH_SCALE);
        let out = generate_clean_target(&g, TransportParams::none(), &u0, 50.0, 1e-6).unwrap();
        for (a, b) in out.values.iter().zip(&u0.values) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert_eq!(out.time, 50.0);
    }

    #[test]
    fn pure_diffusion_conserves_mass() {
        let g = make_grid(30, 0.0, 1.0).unwrap();
        let u0 = initial_soc(&g, SURFACE_SOC, K_DECAY, DEPTH_SCALE);
        let tp = TransportParams::new(1e-3, 0.0).unwrap();
        let out = generate_clean_target(&g, tp, &u0, 50.0, 1e-6).unwrap();
        let (m0, m1) = (g.mass(&u0.values), g.mass(&out.values));
        assert!(((m1 - m0) / m0).abs() <= 1e-6);
        assert!(out.values.iter().all(|v| *v >= 0.0));
        assert!(out.values.iter().zip(&u0.values).any(|(a, b)| (a - b).abs() > 1e-3));
    }

    #[test]
    fn dataset_build_contracts() {
        let mut spec = DatasetSpec {
            target_time: 0.0,
            ..DatasetSpec::default()
        };
        let d1 = build_dataset(&spec).unwrap();
        assert_eq!(d1.drivers.provenance(), &Provenance::Clean);
        assert_eq!(d1.target_profile, d1.clean_target);
        assert_eq!(d1.initial_profile.values, d1.target_profile.values);

        spec.target_time = 50.0;
        let clean = build_dataset(&spec).unwrap();
        spec.driver_noise = Some(NoiseSpec::ar1(0.07, 0.8, 7));
        spec.target_noise = Some(NoiseSpec::iid(0.07, 7).with_floor(Some(0.0)));
        let noisy = build_dataset(&spec).unwrap();
        assert_eq!(noisy.clean_target, clean.clean_target);
        assert_ne!(noisy.target_profile, noisy.clean_target);
        assert_eq!(noisy.initial_profile, clean.initial_profile);
        assert_eq!(noisy, build_dataset(&spec).unwrap());

        spec.target_time = 25.0;
        assert!(build_dataset(&spec).is_err());
    }
}
