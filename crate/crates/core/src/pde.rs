//! Method-of-lines right-hand side: centred transport stencils with
//! reflected ghost nodes (zero gradient at both ends) plus the neural
//! source term.

use crate::error::{Error, Result};
use crate::grid::{DepthGrid, DriverSample, TransportParams};
use crate::nn::{backward_batch, forward_batch, Tape, UdeParams, INPUT_DIM};
use crate::synthetic::DriverField;

fn check_len(values: &[f64]) -> Result<()> {
    if values.len() < 3 {
        return Err(Error::invalid(format!(
            "stencil needs at least 3 nodes, got {}",
            values.len()
        )));
    }
    Ok(())
}

/// `u_zz` with ghosts `u[-1] = u[1]`, `u[n] = u[n-2]`.
pub fn second_derivative(values: &[f64], dz: f64) -> Result<Vec<f64>> {
    check_len(values)?;
    let mut out = vec![0.0; values.len()];
    transport_into(values, dz, 1.0, 0.0, &mut out);
    Ok(out)
}

/// Centred `u_z`; zero at both boundary nodes under the same reflection.
pub fn first_derivative(values: &[f64], dz: f64) -> Result<Vec<f64>> {
    check_len(values)?;
    let mut out = vec![0.0; values.len()];
    transport_into(values, dz, 0.0, -1.0, &mut out);
    Ok(out)
}

/// `out = d * u_zz - v * u_z`.
pub(crate) fn transport_into(u: &[f64], dz: f64, d: f64, v: f64, out: &mut [f64]) {
    let n = u.len();
    let cd = d / (dz * dz);
    let ca = v / (2.0 * dz);
    out[0] = cd * 2.0 * (u[1] - u[0]);
    for i in 1..n - 1 {
        out[i] = cd * (u[i + 1] - 2.0 * u[i] + u[i - 1]) - ca * (u[i + 1] - u[i - 1]);
    }
    out[n - 1] = cd * 2.0 * (u[n - 2] - u[n - 1]);
}

/// `out += T^T lam` for the transport operator `T` of [`transport_into`].
pub(crate) fn transport_vjp_add(lam: &[f64], dz: f64, d: f64, v: f64, out: &mut [f64]) {
    let n = lam.len();
    let cd = d / (dz * dz);
    let ca = v / (2.0 * dz);
    out[0] -= 2.0 * cd * lam[0];
    out[1] += 2.0 * cd * lam[0];
    for i in 1..n - 1 {
        let l = lam[i];
        out[i + 1] += (cd - ca) * l;
        out[i] -= 2.0 * cd * l;
        out[i - 1] += (cd + ca) * l;
    }
    out[n - 2] += 2.0 * cd * lam[n - 1];
    out[n - 1] -= 2.0 * cd * lam[n - 1];
}

/// Makes the right-hand side return NaN from `after_time` onwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaultInjection {
    pub after_time: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct NeuralSource<'a> {
    pub params: &'a UdeParams,
    pub drivers: &'a DriverField,
}

/// Everything the right-hand side reads besides state and time. Without a
/// source the production/respiration terms are identically zero.
#[derive(Clone, Copy, Debug)]
pub struct RhsContext<'a> {
    pub grid: &'a DepthGrid,
    pub transport: TransportParams,
    pub source: Option<NeuralSource<'a>>,
    pub fault: Option<FaultInjection>,
}

impl<'a> RhsContext<'a> {
    pub fn transport_only(grid: &'a DepthGrid, transport: TransportParams) -> Self {
        RhsContext {
            grid,
            transport,
            source: None,
            fault: None,
        }
    }

    pub fn with_source(
        grid: &'a DepthGrid,
        transport: TransportParams,
        params: &'a UdeParams,
        drivers: &'a DriverField,
    ) -> Result<Self> {
        if drivers.grid() != grid {
            return Err(Error::invalid("driver field grid differs from the model grid"));
        }
        Ok(RhsContext {
            grid,
            transport,
            source: Some(NeuralSource { params, drivers }),
            fault: None,
        })
    }

    pub fn with_fault(mut self, fault: Option<FaultInjection>) -> Self {
        self.fault = fault;
        self
    }

    pub fn nz(&self) -> usize {
        self.grid.nz()
    }

    /// Evaluates the right-hand side into `out`, recording what the
    /// vector-Jacobian product needs in `ws`.
    pub fn eval_into(&self, u: &[f64], t: f64, ws: &mut RhsWorkspace, out: &mut [f64]) {
        let tp = &self.transport;
        transport_into(u, self.grid.dz(), tp.diffusion_d, tp.advection_v, out);
        if let Some(src) = &self.source {
            let p = src.params;
            let nz = u.len();
            src.drivers.fill(t, &mut ws.samples);
            let (tape_p, tape_r) = ws.tapes.as_mut().expect("workspace built for a neural source");
            let z = self.grid.nodes();
            for n in 0..nz {
                let d = &ws.samples[n];
                let x = p.scaling.apply(&UdeParams::raw_input(u[n], d, z[n], t));
                tape_p.x[n * INPUT_DIM..(n + 1) * INPUT_DIM].copy_from_slice(&x);
            }
            tape_r.x.copy_from_slice(&tape_p.x);
            forward_batch(&p.theta_p, &p.spec, tape_p);
            forward_batch(&p.theta_r, &p.spec, tape_r);
            for n in 0..nz {
                out[n] += p.rate_scale * (tape_p.out[n] - tape_r.out[n]);
            }
        }
        if let Some(f) = self.fault {
            if t >= f.after_time {
                out.fill(f64::NAN);
            }
        }
    }

    /// Accumulates `J_u^T lam` into `grad_state` and `J_theta^T lam` into
    /// `grad_params` (layout of [`UdeParams::flat`]) for the evaluation last
    /// recorded in `ws`.
    pub fn vjp(
        &self,
        ws: &mut RhsWorkspace,
        lam: &[f64],
        grad_state: &mut [f64],
        grad_params: &mut [f64],
    ) {
        let tp = &self.transport;
        transport_vjp_add(lam, self.grid.dz(), tp.diffusion_d, tp.advection_v, grad_state);
        let Some(src) = &self.source else {
            return;
        };
        let p = src.params;
        let nz = lam.len();
        let np = p.theta_p.len();
        let (gp, gr) = grad_params.split_at_mut(np);
        let (tape_p, tape_r) = ws.tapes.as_mut().expect("workspace built for a neural source");
        for n in 0..nz {
            ws.seed[n] = p.rate_scale * lam[n];
        }
        backward_batch(&p.theta_p, &p.spec, tape_p, &ws.seed, gp, Some(&mut ws.gx_p));
        for s in ws.seed.iter_mut() {
            *s = -*s;
        }
        backward_batch(&p.theta_r, &p.spec, tape_r, &ws.seed, gr, Some(&mut ws.gx_r));
        let oc_scale = p.scaling.scale[1];
        for n in 0..nz {
            grad_state[n] += (ws.gx_p[n * INPUT_DIM + 1] + ws.gx_r[n * INPUT_DIM + 1]) / oc_scale;
        }
    }
}

/// Scratch for one right-hand-side evaluation.
#[derive(Clone, Debug)]
pub struct RhsWorkspace {
    samples: Vec<DriverSample>,
    tapes: Option<(Tape, Tape)>,
    seed: Vec<f64>,
    gx_p: Vec<f64>,
    gx_r: Vec<f64>,
}

impl RhsWorkspace {
    pub fn new(ctx: &RhsContext) -> Self {
        let nz = ctx.nz();
        let zero = DriverSample {
            ph: 0.0,
            cec: 0.0,
            clay: 0.0,
        };
        RhsWorkspace {
            samples: vec![zero; nz],
            tapes: ctx
                .source
                .map(|s| (Tape::new(&s.params.spec, nz), Tape::new(&s.params.spec, nz))),
            seed: vec![0.0; nz],
            gx_p: vec![0.0; nz * INPUT_DIM],
            gx_r: vec![0.0; nz * INPUT_DIM],
        }
    }
}

/// Out-of-place right-hand side. A non-finite state is reported as a
/// solver failure.
pub fn rhs(state: &[f64], t: f64, ctx: &RhsContext) -> Result<Vec<f64>> {
    check_len(state)?;
    if state.len() != ctx.nz() {
        return Err(Error::invalid(format!(
            "state has {} nodes, grid has {}",
            state.len(),
            ctx.nz()
        )));
    }
    if state.iter().any(|v| !v.is_finite()) {
        return Err(Error::SolverFailure {
            time: t,
            reason: "non-finite state".into(),
        });
    }
    let mut ws = RhsWorkspace::new(ctx);
    let mut out = vec![0.0; state.len()];
    ctx.eval_into(state, t, &mut ws, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::nn::{init_params, Activation, MlpSpec};
    use crate::rng::RandomStream;
    use crate::synthetic::sample_drivers;

    #[test]
    fn stencil_examples() {
        assert_eq!(second_derivative(&[1.0, 2.0, 4.0], 1.0).unwrap(), vec![2.0, 1.0, -4.0]);
        assert_eq!(first_derivative(&[1.0, 2.0, 4.0], 1.0).unwrap(), vec![0.0, 1.5, 0.0]);
        assert!(second_derivative(&[1.0, 2.0], 1.0).is_err());
        assert!(first_derivative(&[], 1.0).is_err());
    }

    #[test]
    fn constants_and_linears() {
        let c = vec![3.3; 12];
        assert!(second_derivative(&c, 0.1).unwrap().iter().all(|&v| v == 0.0));
        assert!(first_derivative(&c, 0.1).unwrap().iter().all(|&v| v == 0.0));
        let g = make_grid(30, 0.0, 1.0).unwrap();
        let lin: Vec<f64> = g.nodes().iter().map(|z| 0.7 - 2.5 * z).collect();
        let d2 = second_derivative(&lin, g.dz()).unwrap();
        let d1 = first_derivative(&lin, g.dz()).unwrap();
        for i in 1..29 {
            assert!(d2[i].abs() <= 1e-10);
            assert!((d1[i] + 2.5).abs() <= 1e-10);
        }
    }

    #[test]
    fn transport_only_rhs_examples() {
        let g = make_grid(3, 0.0, 2.0).unwrap(); // dz = 1
        let ctx = RhsContext::transport_only(&g, TransportParams::new(1.0, 1.0).unwrap());
        assert_eq!(rhs(&[1.0, 2.0, 4.0], 0.0, &ctx).unwrap(), vec![2.0, -0.5, -4.0]);
        assert_eq!(rhs(&[5.0; 3], 0.0, &ctx).unwrap(), vec![0.0; 3]);
        assert!(matches!(
            rhs(&[1.0, f64::NAN, 0.0], 0.0, &ctx),
            Err(Error::SolverFailure { .. })
        ));
    }

    #[test]
    fn rhs_does_not_touch_input() {
        let g = make_grid(5, 0.0, 1.0).unwrap();
        let ctx = RhsContext::transport_only(&g, TransportParams::default());
        let u = vec![1.0, 0.5, 0.2, 0.1, 0.05];
        let copy = u.clone();
        let _ = rhs(&u, 1.0, &ctx).unwrap();
        assert_eq!(u, copy);
    }

    #[test]
    fn zero_params_source_cancels() {
        let g = make_grid(30, 0.0, 1.0).unwrap();
        let drivers = sample_drivers(&g, &[0.0, 50.0]).unwrap();
        let params = UdeParams::zeros(MlpSpec::new(4, 3, Activation::Tanh).unwrap());
        let tp = TransportParams::default();
        let with = RhsContext::with_source(&g, tp, &params, &drivers).unwrap();
        let without = RhsContext::transport_only(&g, tp);
        let u: Vec<f64> = g.nodes().iter().map(|z| 1.2 * (-2.0 * z).exp()).collect();
        assert_eq!(rhs(&u, 3.0, &with).unwrap(), rhs(&u, 3.0, &without).unwrap());
    }

    #[test]
    fn diffusion_sum_is_conserved_with_trapezoid_weights() {
        let g = make_grid(30, 0.0, 1.0).unwrap();
        let ctx = RhsContext::transport_only(&g, TransportParams::new(0.7, 0.0).unwrap());
        let u: Vec<f64> = g.nodes().iter().map(|z| (3.0 * z).sin() + 2.0 * z * z).collect();
        let r = rhs(&u, 0.0, &ctx).unwrap();
        let scale = r.iter().map(|v| v.abs()).sum::<f64>();
        assert!(g.mass(&r).abs() / g.dz() <= 1e-12 * scale);
    }

    #[test]
    fn euler_step_obeys_maximum_principle() {
        let g = make_grid(30, 0.0, 1.0).unwrap();
        let d = 1e-3;
        let ctx = RhsContext::transport_only(&g, TransportParams::new(d, 0.0).unwrap());
        let dt = g.dz() * g.dz() / (2.0 * d);
        let u: Vec<f64> = (0..30).map(|i| ((i * 37) % 11) as f64).collect();
        let r = rhs(&u, 0.0, &ctx).unwrap();
        let next: Vec<f64> = u.iter().zip(&r).map(|(a, b)| a + dt * b).collect();
        let (lo, hi) = (u.iter().cloned().fold(f64::INFINITY, f64::min), u.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        assert!(next.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn transport_is_linear() {
        let g = make_grid(17, 0.0, 1.0).unwrap();
        let ctx = RhsContext::transport_only(&g, TransportParams::new(2e-3, 5e-3).unwrap());
        let u: Vec<f64> = (0..17).map(|i| (i as f64 * 0.37).cos()).collect();
        let a = -3.7;
        let ua: Vec<f64> = u.iter().map(|v| a * v).collect();
        let r = rhs(&u, 0.0, &ctx).unwrap();
        let ra = rhs(&ua, 0.0, &ctx).unwrap();
        for (x, y) in r.iter().zip(&ra) {
            assert!((a * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn second_order_spatial_convergence() {
        // smooth profile satisfying the zero-gradient ends: cos(pi z)
        let err = |nz: usize| {
            let g = make_grid(nz, 0.0, 1.0).unwrap();
            let (d, v) = (1e-3, 1e-3);
            let ctx = RhsContext::transport_only(&g, TransportParams::new(d, v).unwrap());
            let pi = std::f64::consts::PI;
            let u: Vec<f64> = g.nodes().iter().map(|z| (pi * z).cos()).collect();
            let r = rhs(&u, 0.0, &ctx).unwrap();
            g.nodes()
                .iter()
                .zip(&r)
                .map(|(z, ri)| {
                    let exact = -d * pi * pi * (pi * z).cos() + v * pi * (pi * z).sin();
                    (ri - exact).abs()
                })
                .fold(0.0, f64::max)
        };
        let (e30, e60, e120) = (err(30), err(60), err(120));
        let o1 = (e30 / e60).ln() / (59.0f64 / 29.0).ln();
        let o2 = (e60 / e120).ln() / (119.0f64 / 59.0).ln();
        assert!(o1 >= 1.9 && o2 >= 1.9, "orders {o1} {o2}");
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let g = make_grid(6, 0.0, 1.0).unwrap();
        let drivers = sample_drivers(&g, &[0.0, 50.0]).unwrap();
        let spec = MlpSpec::new(4, 3, Activation::Gelu).unwrap();
        let params = init_params(&spec, &RandomStream::new(4, "vjp")).with_rate_scale(0.3);
        let tp = TransportParams::new(0.02, 0.05).unwrap();
        let u: Vec<f64> = g.nodes().iter().map(|z| 1.2 * (-2.0 * z).exp()).collect();
        let lam: Vec<f64> = (0..6).map(|i| 0.3 - 0.1 * i as f64).collect();
        let t = 7.3;

        let ctx = RhsContext::with_source(&g, tp, &params, &drivers).unwrap();
        let mut ws = RhsWorkspace::new(&ctx);
        let mut out = vec![0.0; 6];
        ctx.eval_into(&u, t, &mut ws, &mut out);
        let mut gu = vec![0.0; 6];
        let mut gth = vec![0.0; params.len()];
        ctx.vjp(&mut ws, &lam, &mut gu, &mut gth);

        let objective = |u: &[f64], p: &UdeParams| -> f64 {
            let c = RhsContext::with_source(&g, tp, p, &drivers).unwrap();
            rhs(u, t, &c).unwrap().iter().zip(&lam).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in 0..6 {
            let mut up = u.clone();
            up[i] += h;
            let mut um = u.clone();
            um[i] -= h;
            let fd = (objective(&up, &params) - objective(&um, &params)) / (2.0 * h);
            assert!((fd - gu[i]).abs() <= 1e-7 * (1.0 + fd.abs()), "state {i}: {fd} vs {}", gu[i]);
        }
        let flat = params.flat();
        for i in (0..flat.len()).step_by(7) {
            let mut fp = flat.clone();
            fp[i] += h;
            let mut fm = flat.clone();
            fm[i] -= h;
            let fd = (objective(&u, &params.with_flat(&fp).unwrap())
                - objective(&u, &params.with_flat(&fm).unwrap()))
                / (2.0 * h);
            assert!((fd - gth[i]).abs() <= 1e-7 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", gth[i]);
        }
    }

    #[test]
    fn fault_injection_poisons_after_time() {
        let g = make_grid(5, 0.0, 1.0).unwrap();
        let ctx = RhsContext::transport_only(&g, TransportParams::default())
            .with_fault(Some(FaultInjection { after_time: 10.0 }));
        assert!(rhs(&[1.0; 5], 9.9, &ctx).unwrap().iter().all(|v| v.is_finite()));
        assert!(rhs(&[1.0; 5], 10.0, &ctx).unwrap().iter().all(|v| v.is_nan()));
    }
}
