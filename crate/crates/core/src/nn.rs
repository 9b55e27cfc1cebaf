//! The production and respiration networks.
//!
//! Each network is a 6 -> h1 -> h2 -> 1 perceptron with a softplus head, so
//! its output is a non-negative rate. Parameters live in one flat vector per
//! network; weights are stored input-major (`w[k * out + j]` connects input
//! `k` to output `j`) so that the batched kernels below stream over
//! contiguous output rows.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::DriverSample;
use crate::rng::{uniform_draws, RandomStream};

pub const INPUT_DIM: usize = 6;

/// Input order shared by both networks.
pub const FEATURES: [&str; INPUT_DIM] = ["ph", "oc", "cec", "clay", "z", "t"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    /// Value and derivative at `z`. GELU uses the tanh approximation.
    #[inline(always)]
    pub fn eval(self, z: f64) -> (f64, f64) {
        match self {
            Activation::Tanh => {
                let a = crate::fastmath::tanh(z);
                (a, 1.0 - a * a)
            }
            Activation::Gelu => {
                let z2 = z * z;
                let u = GELU_C * z * (1.0 + GELU_A * z2);
                let t = crate::fastmath::tanh(u);
                let a = 0.5 * z * (1.0 + t);
                let du = GELU_C * (1.0 + 3.0 * GELU_A * z2);
                (a, 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * du)
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Gelu => "gelu",
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tanh" => Ok(Activation::Tanh),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::invalid(format!("unknown activation {other:?}"))),
        }
    }
}

#[inline(always)]
fn softplus(y: f64) -> f64 {
    y.max(0.0) + (-y.abs()).exp().ln_1p()
}

#[inline(always)]
fn sigmoid(y: f64) -> f64 {
    if y >= 0.0 {
        1.0 / (1.0 + (-y).exp())
    } else {
        let e = y.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MlpSpec {
    pub h1: usize,
    pub h2: usize,
    pub activation: Activation,
}

/// Offsets of each block inside one network's flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
    pub w3: Range<usize>,
    pub b3: Range<usize>,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.b3.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn biases(&self) -> [Range<usize>; 3] {
        [self.b1.clone(), self.b2.clone(), self.b3.clone()]
    }
}

impl MlpSpec {
    pub fn new(h1: usize, h2: usize, activation: Activation) -> Result<Self> {
        if h1 == 0 || h2 == 0 {
            return Err(Error::invalid(format!("hidden widths must be >= 1, got ({h1}, {h2})")));
        }
        Ok(MlpSpec { h1, h2, activation })
    }

    pub fn layout(&self) -> Layout {
        let (h1, h2) = (self.h1, self.h2);
        let w1 = 0..INPUT_DIM * h1;
        let b1 = w1.end..w1.end + h1;
        let w2 = b1.end..b1.end + h1 * h2;
        let b2 = w2.end..w2.end + h2;
        let w3 = b2.end..b2.end + h2;
        let b3 = w3.end..w3.end + 1;
        Layout {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
        }
    }

    /// Parameters in one network.
    pub fn param_count(&self) -> usize {
        self.layout().len()
    }
}

/// Fixed affine maps `(x - center) / scale` applied to the raw inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaling {
    pub center: [f64; INPUT_DIM],
    pub scale: [f64; INPUT_DIM],
}

impl Default for FeatureScaling {
    fn default() -> Self {
        FeatureScaling {
            center: [6.0, 0.0, 0.5, 25.0, 0.0, 0.0],
            scale: [1.0, 1.2, 0.2, 5.0, 1.0, 50.0],
        }
    }
}

impl FeatureScaling {
    #[inline]
    pub fn apply(&self, raw: &[f64; INPUT_DIM]) -> [f64; INPUT_DIM] {
        let mut x = [0.0; INPUT_DIM];
        for k in 0..INPUT_DIM {
            x[k] = (raw[k] - self.center[k]) / self.scale[k];
        }
        x
    }
}

pub const DEFAULT_RATE_SCALE: f64 = 0.05;

/// Trainable parameters of both networks plus the fixed model constants
/// that give them meaning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UdeParams {
    pub spec: MlpSpec,
    pub theta_p: Vec<f64>,
    pub theta_r: Vec<f64>,
    pub scaling: FeatureScaling,
    /// Multiplier on the network difference, per year.
    pub rate_scale: f64,
}

impl UdeParams {
    pub fn zeros(spec: MlpSpec) -> Self {
        let n = spec.param_count();
        UdeParams {
            spec,
            theta_p: vec![0.0; n],
            theta_r: vec![0.0; n],
            scaling: FeatureScaling::default(),
            rate_scale: DEFAULT_RATE_SCALE,
        }
    }

    pub fn with_rate_scale(mut self, rate_scale: f64) -> Self {
        self.rate_scale = rate_scale;
        self
    }

    pub fn with_scaling(mut self, scaling: FeatureScaling) -> Self {
        self.scaling = scaling;
        self
    }

    pub fn layout(&self) -> Layout {
        self.spec.layout()
    }

    /// Total trainable parameters across both networks.
    pub fn len(&self) -> usize {
        self.theta_p.len() + self.theta_r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `theta_p` followed by `theta_r`.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.theta_p);
        v.extend_from_slice(&self.theta_r);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::invalid(format!(
                "flat vector has {} entries, expected {}",
                flat.len(),
                self.len()
            )));
        }
        let n = self.theta_p.len();
        self.theta_p.copy_from_slice(&flat[..n]);
        self.theta_r.copy_from_slice(&flat[n..]);
        Ok(())
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        let mut p = self.clone();
        p.set_flat(flat)?;
        Ok(p)
    }

    pub fn norm_sq(&self) -> f64 {
        self.theta_p.iter().chain(&self.theta_r).map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.theta_p.iter().chain(&self.theta_r).all(|x| x.is_finite())
    }

    /// Raw (unscaled) input vector for one node.
    pub fn raw_input(oc: f64, drivers: &DriverSample, z: f64, t: f64) -> [f64; INPUT_DIM] {
        [drivers.ph, oc, drivers.cec, drivers.clay, z, t]
    }
}

fn glorot(stream: &RandomStream, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform_draws(stream, fan_in * fan_out, a)
}

fn init_network(spec: &MlpSpec, stream: &RandomStream) -> Vec<f64> {
    let l = spec.layout();
    let mut theta = vec![0.0; l.len()];
    theta[l.w1].copy_from_slice(&glorot(&stream.child("w1"), INPUT_DIM, spec.h1));
    theta[l.w2].copy_from_slice(&glorot(&stream.child("w2"), spec.h1, spec.h2));
    theta[l.w3].copy_from_slice(&glorot(&stream.child("w3"), spec.h2, 1));
    theta
}

/// Glorot-uniform weights, zero biases, default feature scaling and rate
/// scale.
pub fn init_params(spec: &MlpSpec, stream: &RandomStream) -> UdeParams {
    UdeParams {
        spec: *spec,
        theta_p: init_network(spec, &stream.child("P")),
        theta_r: init_network(spec, &stream.child("R")),
        scaling: FeatureScaling::default(),
        rate_scale: DEFAULT_RATE_SCALE,
    }
}

/// Output of one network for an already-scaled input vector.
pub fn forward(net: &[f64], spec: &MlpSpec, input: &[f64; INPUT_DIM]) -> Result<f64> {
    if input.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("network input must be finite"));
    }
    if net.len() != spec.param_count() {
        return Err(Error::invalid(format!(
            "network has {} parameters, spec needs {}",
            net.len(),
            spec.param_count()
        )));
    }
    let mut tape = Tape::new(spec, 1);
    tape.x.copy_from_slice(input);
    forward_batch(net, spec, &mut tape);
    Ok(tape.out[0])
}

/// `rate_scale * (NN_P(x) - NN_R(x))` with the shared, scaled input `x`.
pub fn net_source(
    params: &UdeParams,
    state_oc: f64,
    drivers: &DriverSample,
    z: f64,
    t: f64,
) -> Result<f64> {
    let x = params.scaling.apply(&UdeParams::raw_input(state_oc, drivers, z, t));
    let p = forward(&params.theta_p, &params.spec, &x)?;
    let r = forward(&params.theta_r, &params.spec, &x)?;
    Ok(params.rate_scale * (p - r))
}

/// Activations recorded by a batched forward pass, reused by the backward
/// pass. Also carries the backward scratch so no call allocates.
#[derive(Clone, Debug)]
pub struct Tape {
    pub n: usize,
    /// Scaled inputs, `n x 6`.
    pub x: Vec<f64>,
    a1: Vec<f64>,
    d1: Vec<f64>,
    a2: Vec<f64>,
    d2: Vec<f64>,
    y: Vec<f64>,
    pub out: Vec<f64>,
    g1: Vec<f64>,
    g2: Vec<f64>,
    gy: Vec<f64>,
    xt: Vec<f64>,
    a1t: Vec<f64>,
    w1t: Vec<f64>,
    w2t: Vec<f64>,
}

impl Tape {
    pub fn new(spec: &MlpSpec, n: usize) -> Self {
        let (h1, h2) = (spec.h1, spec.h2);
        Tape {
            n,
            x: vec![0.0; n * INPUT_DIM],
            a1: vec![0.0; n * h1],
            d1: vec![0.0; n * h1],
            a2: vec![0.0; n * h2],
            d2: vec![0.0; n * h2],
            y: vec![0.0; n],
            out: vec![0.0; n],
            g1: vec![0.0; n * h1],
            g2: vec![0.0; n * h2],
            gy: vec![0.0; n],
            xt: vec![0.0; n * INPUT_DIM],
            a1t: vec![0.0; n * h1],
            w1t: vec![0.0; INPUT_DIM * h1],
            w2t: vec![0.0; h1 * h2],
        }
    }
}

#[inline(always)]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = alpha.mul_add(*xi, *yi);
    }
}

#[inline(always)]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] = x[0].mul_add(y[0], acc[0]);
        acc[1] = x[1].mul_add(y[1], acc[1]);
        acc[2] = x[2].mul_add(y[2], acc[2]);
        acc[3] = x[3].mul_add(y[3], acc[3]);
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s = x.mul_add(*y, s);
    }
    s
}

/// `dst (cols x rows) = src (rows x cols)^T`, both row-major.
#[inline(always)]
fn transpose(rows: usize, cols: usize, src: &[f64], dst: &mut [f64]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// `c += a * b` for row-major `a` (m x k), `b` (k x n) and `c` (m x n).
/// Every entry accumulates its k products in increasing order, so the
/// result does not depend on the blocking.
#[inline(always)]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    const MR: usize = 4;
    const NR: usize = 8;
    let (a, b, c) = (&a[..m * k], &b[..k * n], &mut c[..m * n]);
    let mut i = 0;
    while i + MR <= m {
        let rows: [&[f64]; MR] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[0.0; NR]; MR];
            for r in 0..MR {
                acc[r].copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + NR]);
            }
            for p in 0..k {
                let bp: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().expect("NR columns");
                for r in 0..MR {
                    let ar = rows[r][p];
                    for q in 0..NR {
                        acc[r][q] = ar.mul_add(bp[q], acc[r][q]);
                    }
                }
            }
            for r in 0..MR {
                c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(&acc[r]);
            }
            j += NR;
        }
        for r in i..i + MR {
            gemm_row_tail(k, n, j, &a[r * k..(r + 1) * k], b, &mut c[r * n..(r + 1) * n]);
        }
        i += MR;
    }
    for r in i..m {
        gemm_row_tail(k, n, 0, &a[r * k..(r + 1) * k], b, &mut c[r * n..(r + 1) * n]);
    }
}

#[inline(always)]
fn gemm_row_tail(k: usize, n: usize, from: usize, a_row: &[f64], b: &[f64], c_row: &mut [f64]) {
    for q in from..n {
        let mut s = c_row[q];
        for p in 0..k {
            s = a_row[p].mul_add(b[p * n + q], s);
        }
        c_row[q] = s;
    }
}

#[inline(always)]
fn activate_layer(act: Activation, a: &mut [f64], d: &mut [f64]) {
    match act {
        Activation::Tanh => {
            for (av, dv) in a.iter_mut().zip(d.iter_mut()) {
                let t = crate::fastmath::tanh(*av);
                *av = t;
                *dv = 1.0 - t * t;
            }
        }
        Activation::Gelu => {
            for (av, dv) in a.iter_mut().zip(d.iter_mut()) {
                let (v, g) = Activation::Gelu.eval(*av);
                *av = v;
                *dv = g;
            }
        }
    }
}

/// Forward pass for `tape.n` inputs already stored in `tape.x`.
pub fn forward_batch(net: &[f64], spec: &MlpSpec, tape: &mut Tape) {
    #[cfg(target_arch = "x86_64")]
    if wide_simd() {
        // SAFETY: the CPU supports AVX2 and FMA (checked at run time).
        unsafe { forward_batch_avx2(net, spec, tape) };
        return;
    }
    forward_batch_portable(net, spec, tape)
}

/// Whether the AVX2+FMA kernels can run. The kernels only use explicit
/// fused multiply-adds, which round identically in hardware and in the
/// software fallback, so both paths produce bit-identical results.
#[cfg(target_arch = "x86_64")]
fn wide_simd() -> bool {
    static AVX2: std::sync::OnceLock<bool> = std::sync::OnceLock::new();
    *AVX2.get_or_init(|| std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma"))
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn forward_batch_avx2(net: &[f64], spec: &MlpSpec, tape: &mut Tape) {
    forward_batch_portable(net, spec, tape)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn backward_batch_avx2(
    net: &[f64],
    spec: &MlpSpec,
    tape: &mut Tape,
    seed: &[f64],
    grad_net: &mut [f64],
    grad_x: Option<&mut [f64]>,
) {
    backward_batch_portable(net, spec, tape, seed, grad_net, grad_x)
}

#[inline(always)]
pub(crate) fn forward_batch_portable(net: &[f64], spec: &MlpSpec, tape: &mut Tape) {
    let l = spec.layout();
    let (h1, h2) = (spec.h1, spec.h2);
    let (w1, b1) = (&net[l.w1], &net[l.b1]);
    let (w2, b2) = (&net[l.w2], &net[l.b2]);
    let (w3, b3) = (&net[l.w3], net[l.b3.start]);
    let act = spec.activation;
    let n = tape.n;
    for z1 in tape.a1[..n * h1].chunks_exact_mut(h1) {
        z1.copy_from_slice(b1);
    }
    gemm_acc(n, INPUT_DIM, h1, &tape.x, w1, &mut tape.a1);
    activate_layer(act, &mut tape.a1[..n * h1], &mut tape.d1[..n * h1]);
    for z2 in tape.a2[..n * h2].chunks_exact_mut(h2) {
        z2.copy_from_slice(b2);
    }
    gemm_acc(n, h1, h2, &tape.a1, w2, &mut tape.a2);
    activate_layer(act, &mut tape.a2[..n * h2], &mut tape.d2[..n * h2]);
    for i in 0..n {
        let y = b3 + dot(&tape.a2[i * h2..(i + 1) * h2], w3);
        tape.y[i] = y;
        tape.out[i] = softplus(y);
    }
}

/// Reverse pass: accumulates `sum_n seed[n] * d out[n] / d theta` into
/// `grad_net` and writes `d out[n] / d x[n]` scaled by `seed[n]` into
/// `grad_x` (`n x 6`), if given.
pub fn backward_batch(
    net: &[f64],
    spec: &MlpSpec,
    tape: &mut Tape,
    seed: &[f64],
    grad_net: &mut [f64],
    grad_x: Option<&mut [f64]>,
) {
    #[cfg(target_arch = "x86_64")]
    if wide_simd() {
        // SAFETY: the CPU supports AVX2 and FMA (checked at run time).
        unsafe { backward_batch_avx2(net, spec, tape, seed, grad_net, grad_x) };
        return;
    }
    backward_batch_portable(net, spec, tape, seed, grad_net, grad_x)
}

#[inline(always)]
pub(crate) fn backward_batch_portable(
    net: &[f64],
    spec: &MlpSpec,
    tape: &mut Tape,
    seed: &[f64],
    grad_net: &mut [f64],
    grad_x: Option<&mut [f64]>,
) {
    let l = spec.layout();
    let (h1, h2) = (spec.h1, spec.h2);
    let n = tape.n;
    let (w1, w2, w3) = (&net[l.w1.clone()], &net[l.w2.clone()], &net[l.w3.clone()]);
    let (gw1, rest) = grad_net.split_at_mut(l.b1.start);
    let (gb1, rest) = rest.split_at_mut(h1);
    let (gw2, rest) = rest.split_at_mut(h1 * h2);
    let (gb2, rest) = rest.split_at_mut(h2);
    let (gw3, gb3) = rest.split_at_mut(h2);
    for i in 0..n {
        let gy = seed[i] * sigmoid(tape.y[i]);
        tape.gy[i] = gy;
        gb3[0] += gy;
        let a2 = &tape.a2[i * h2..(i + 1) * h2];
        axpy(gy, a2, gw3);
        let d2 = &tape.d2[i * h2..(i + 1) * h2];
        let g2 = &mut tape.g2[i * h2..(i + 1) * h2];
        for j in 0..h2 {
            g2[j] = gy * w3[j] * d2[j];
        }
        for (b, g) in gb2.iter_mut().zip(g2.iter()) {
            *b += g;
        }
    }
    transpose(h1, h2, w2, &mut tape.w2t);
    tape.g1[..n * h1].fill(0.0);
    gemm_acc(n, h2, h1, &tape.g2, &tape.w2t, &mut tape.g1);
    for (g, d) in tape.g1[..n * h1].iter_mut().zip(&tape.d1[..n * h1]) {
        *g *= d;
    }
    for g1 in tape.g1[..n * h1].chunks_exact(h1) {
        for (b, g) in gb1.iter_mut().zip(g1) {
            *b += g;
        }
    }
    transpose(n, h1, &tape.a1, &mut tape.a1t);
    gemm_acc(h1, n, h2, &tape.a1t, &tape.g2, gw2);
    transpose(n, INPUT_DIM, &tape.x, &mut tape.xt);
    gemm_acc(INPUT_DIM, n, h1, &tape.xt, &tape.g1, gw1);
    if let Some(gx) = grad_x {
        transpose(INPUT_DIM, h1, w1, &mut tape.w1t);
        gx[..n * INPUT_DIM].fill(0.0);
        gemm_acc(n, h1, INPUT_DIM, &tape.g1, &tape.w1t, gx);
    }
}
