//! Separable least-squares fit of CYCLOPS difference traces.
//!
//! Every trace `k` is modelled as
//! `a_k e^{-g1 t} q_k(2 W t + phi) - b_k e^{-g2 t}` with `q_k = cos` for Y
//! and `sin` for ZY combinations. The amplitudes are eliminated by
//! variable projection and Levenberg-Marquardt runs on the shared
//! nonlinear parameters.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::observables::CyclopsVariant;
use crate::signal::{check_grid, SignalTrace};

pub const MAX_ITERATIONS: usize = 500;
pub const COST_TOL: f64 = 1e-12;
pub const STEP_TOL: f64 = 1e-10;
/// Minimum samples per trace for spectral initialisation.
pub const MIN_SAMPLES: usize = 64;

/// Which oscillating quadrature survives in a difference trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quadrature {
    Cos,
    Sin,
}

impl From<CyclopsVariant> for Quadrature {
    fn from(v: CyclopsVariant) -> Self {
        match v {
            CyclopsVariant::Y => Quadrature::Cos,
            CyclopsVariant::ZY => Quadrature::Sin,
        }
    }
}

impl Quadrature {
    fn eval(self, x: f64) -> (f64, f64) {
        let (s, c) = x.sin_cos();
        match self {
            Quadrature::Cos => (c, -s),
            Quadrature::Sin => (s, c),
        }
    }
}

/// Shared nonlinear parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonlinearParams {
    pub gamma1: f64,
    pub gamma2: f64,
    #[serde(rename = "omega_L")]
    pub omega_l: f64,
    pub phi: f64,
}

impl NonlinearParams {
    fn to_array(self) -> [f64; 4] {
        [self.gamma1, self.gamma2, self.omega_l, self.phi]
    }

    fn from_array(a: [f64; 4]) -> Self {
        Self {
            gamma1: a[0],
            gamma2: a[1],
            omega_l: a[2],
            phi: a[3],
        }
    }

    fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && self.gamma1 > 0.0 && self.gamma2 > 0.0
    }
}

/// Which nonlinear parameters the fit may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreeParams {
    pub gamma1: bool,
    pub gamma2: bool,
    #[serde(rename = "omega_L")]
    pub omega_l: bool,
    pub phi: bool,
}

impl Default for FreeParams {
    fn default() -> Self {
        Self {
            gamma1: true,
            gamma2: true,
            omega_l: true,
            phi: true,
        }
    }
}

impl FreeParams {
    fn indices(&self) -> Vec<usize> {
        [self.gamma1, self.gamma2, self.omega_l, self.phi]
            .iter()
            .enumerate()
            .filter_map(|(i, f)| f.then_some(i))
            .collect()
    }
}

/// Traces to fit jointly, with calibrated scale factors used to express
/// amplitudes in observable units.
#[derive(Debug, Clone)]
pub struct FitModelSpec {
    pub traces: Vec<SignalTrace>,
    pub quadratures: Vec<Quadrature>,
    pub free: FreeParams,
    pub eta: f64,
    pub zeta: f64,
}

impl FitModelSpec {
    /// Selects the quadrature of every trace from its CYCLOPS variant.
    pub fn from_combined(traces: Vec<SignalTrace>, eta: f64, zeta: f64) -> Result<Self> {
        let quadratures = traces
            .iter()
            .map(|t| {
                t.meta.variant.map(Quadrature::from).ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "trace for pulse '{}' is not a CYCLOPS difference",
                        t.meta.pulse
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = Self {
            traces,
            quadratures,
            free: FreeParams::default(),
            eta,
            zeta,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.traces.is_empty() {
            return Err(Error::InvalidInput("no traces to fit".into()));
        }
        if self.quadratures.len() != self.traces.len() {
            return Err(Error::DimensionMismatch {
                expected: self.traces.len(),
                found: self.quadratures.len(),
            });
        }
        if !(self.eta.is_finite() && self.eta != 0.0 && self.zeta.is_finite()) {
            return Err(Error::InvalidInput("eta must be finite and nonzero, zeta finite".into()));
        }
        for t in &self.traces {
            check_grid(&t.times)?;
            if t.values.len() != t.times.len() {
                return Err(Error::DimensionMismatch {
                    expected: t.times.len(),
                    found: t.values.len(),
                });
            }
            if t.times.len() < 3 {
                return Err(Error::SingularDesign(format!(
                    "trace '{}' has only {} samples",
                    t.meta.pulse,
                    t.times.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharedFit {
    pub gamma1: Estimate,
    pub gamma2: Estimate,
    #[serde(rename = "omega_L")]
    pub omega_l: Estimate,
    pub phi: Estimate,
}

impl SharedFit {
    pub fn params(&self) -> NonlinearParams {
        NonlinearParams {
            gamma1: self.gamma1.value,
            gamma2: self.gamma2.value,
            omega_l: self.omega_l.value,
            phi: self.phi.value,
        }
    }
}

/// Amplitudes of one trace. `a`, `b` are in trace units; the `observable_*`
/// fields are `a / 2 eta` and `b / 2 eta zeta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFit {
    pub pulse: String,
    pub variant: Option<CyclopsVariant>,
    pub quadrature: Quadrature,
    pub a: f64,
    pub b: f64,
    pub a_stderr: f64,
    pub b_stderr: f64,
    /// Covariance of `(a, b)`.
    pub covariance: [[f64; 2]; 2],
    pub observable_a: f64,
    pub observable_a_stderr: f64,
    pub observable_b: f64,
    pub observable_b_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub shared: SharedFit,
    pub per_trace: Vec<TraceFit>,
    pub residual_rms: f64,
    pub converged: bool,
    pub iterations: usize,
    pub eta: f64,
    pub zeta: f64,
}

impl FitResult {
    /// Moves `phi` into `(phi_ref - pi/2, phi_ref + pi/2]`, flipping the
    /// oscillation amplitudes when an odd multiple of pi is removed.
    pub fn fold_phase(&mut self, phi_ref: f64) {
        let k = ((self.shared.phi.value - phi_ref) / PI).round();
        let mut shifted = self.shared.phi.value - k * PI;
        let mut flips = k as i64;
        if shifted <= phi_ref - PI / 2.0 {
            shifted += PI;
            flips -= 1;
        }
        self.shared.phi.value = shifted;
        if flips.rem_euclid(2) == 1 {
            for t in &mut self.per_trace {
                t.a = -t.a;
                t.observable_a = -t.observable_a;
                t.covariance[0][1] = -t.covariance[0][1];
                t.covariance[1][0] = -t.covariance[1][0];
            }
        }
    }
}

/// Design columns of one trace at fixed nonlinear parameters.
fn columns(times: &[f64], q: Quadrature, p: &NonlinearParams) -> (Vec<f64>, Vec<f64>) {
    times
        .iter()
        .map(|&t| {
            let osc = (-p.gamma1 * t).exp() * q.eval(2.0 * p.omega_l * t + p.phi).0;
            (osc, -(-p.gamma2 * t).exp())
        })
        .unzip()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Variable-projection view of a fit problem.
pub struct FitProblem<'a> {
    spec: &'a FitModelSpec,
    base: NonlinearParams,
    free: Vec<usize>,
    /// Traces sharing a time grid and quadrature share design columns:
    /// `group[k]` indexes `representatives`.
    group: Vec<usize>,
    representatives: Vec<usize>,
}

/// Design columns of one (grid, quadrature) pair and their Gram matrix.
struct Design {
    c1: Vec<f64>,
    c2: Vec<f64>,
    gram: (f64, f64, f64),
}

impl Design {
    fn new(times: &[f64], q: Quadrature, p: &NonlinearParams) -> Self {
        let (c1, c2) = columns(times, q, p);
        let gram = (dot(&c1, &c1), dot(&c1, &c2), dot(&c2, &c2));
        Self { c1, c2, gram }
    }

    fn solve(&self, y: &[f64]) -> Result<(f64, f64)> {
        let (g11, g12, g22) = self.gram;
        let (r1, r2) = (dot(&self.c1, y), dot(&self.c2, y));
        let det = g11 * g22 - g12 * g12;
        if !(det > 1e-14 * g11 * g22) {
            return Err(Error::SingularDesign(
                "oscillation and decay columns are collinear".into(),
            ));
        }
        Ok(((g22 * r1 - g12 * r2) / det, (g11 * r2 - g12 * r1) / det))
    }
}

impl<'a> FitProblem<'a> {
    pub fn new(spec: &'a FitModelSpec, init: NonlinearParams) -> Result<Self> {
        spec.validate()?;
        if !init.is_valid() {
            return Err(Error::InvalidInput(
                "initial parameters must be finite with positive rates".into(),
            ));
        }
        let mut group = Vec::with_capacity(spec.traces.len());
        let mut representatives: Vec<usize> = Vec::new();
        for (k, t) in spec.traces.iter().enumerate() {
            let found = representatives.iter().position(|&r| {
                spec.quadratures[r] == spec.quadratures[k] && spec.traces[r].times == t.times
            });
            group.push(found.unwrap_or_else(|| {
                representatives.push(k);
                representatives.len() - 1
            }));
        }
        Ok(Self {
            spec,
            base: init,
            free: spec.free.indices(),
            group,
            representatives,
        })
    }

    fn designs(&self, p: &NonlinearParams) -> Vec<Design> {
        self.representatives
            .iter()
            .map(|&r| Design::new(&self.spec.traces[r].times, self.spec.quadratures[r], p))
            .collect()
    }

    pub fn free_count(&self) -> usize {
        self.free.len()
    }

    pub fn residual_len(&self) -> usize {
        self.spec.traces.iter().map(|t| t.len()).sum()
    }

    /// Full parameters with the free slots replaced by `theta`.
    pub fn expand(&self, theta: &[f64]) -> NonlinearParams {
        let mut a = self.base.to_array();
        for (slot, v) in self.free.iter().zip(theta) {
            a[*slot] = *v;
        }
        NonlinearParams::from_array(a)
    }

    pub fn initial_theta(&self) -> Vec<f64> {
        let a = self.base.to_array();
        self.free.iter().map(|&i| a[i]).collect()
    }

    /// Optimal amplitudes per trace at `p`.
    pub fn amplitudes(&self, p: &NonlinearParams) -> Result<Vec<(f64, f64)>> {
        let designs = self.designs(p);
        self.spec
            .traces
            .iter()
            .zip(&self.group)
            .map(|(t, &g)| designs[g].solve(&t.values))
            .collect()
    }

    /// Projected residual `y - P(theta) y`, all traces concatenated.
    pub fn residual(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let p = self.expand(theta);
        let designs = self.designs(&p);
        let mut out = Vec::with_capacity(self.residual_len());
        for (t, &g) in self.spec.traces.iter().zip(&self.group) {
            let d = &designs[g];
            let (a, b) = d.solve(&t.values)?;
            out.extend(
                t.values
                    .iter()
                    .zip(d.c1.iter().zip(&d.c2))
                    .map(|(y, (x1, x2))| y - a * x1 - b * x2),
            );
        }
        Ok(out)
    }

    pub fn cost(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.residual(theta)?.iter().map(|r| r * r).sum())
    }

    /// Central-difference step used for parameter `theta_i`.
    pub fn default_step(theta_i: f64) -> f64 {
        1e-6 * theta_i.abs().max(1.0)
    }

    /// Central-difference Jacobian of the projected residual, with steps
    /// `step_scale * default_step`.
    pub fn jacobian(&self, theta: &[f64], step_scale: f64) -> Result<DMatrix<f64>> {
        numeric_jacobian(|t| self.residual(t), theta, step_scale)
    }
}

/// Initial nonlinear parameters from the spectra and envelopes of the traces.
pub fn estimate_initial(traces: &[SignalTrace]) -> Result<NonlinearParams> {
    if traces.is_empty() {
        return Err(Error::InvalidInput("no traces".into()));
    }
    for t in traces {
        check_grid(&t.times)?;
        if t.len() < MIN_SAMPLES {
            return Err(Error::InvalidInput(format!(
                "trace '{}' has {} samples, need at least {MIN_SAMPLES}",
                t.meta.pulse,
                t.len()
            )));
        }
    }
    let freq = spectral_peak(traces)?;
    let omega_l = PI * freq;
    let first = &traces[0];
    let duration = first.times[first.len() - 1] - first.times[0];
    let fallback = 3.0 / duration;
    let dt = duration / (first.len() - 1) as f64;
    let period = ((1.0 / freq) / dt).round().max(1.0) as usize;

    let split: Vec<(Vec<f64>, Vec<f64>)> = traces
        .iter()
        .map(|t| {
            let low = moving_average(&t.values, period);
            let high = t.values.iter().zip(&low).map(|(y, l)| y - l).collect();
            (low, high)
        })
        .collect();
    let energy = |v: &[f64]| dot(v, v);
    let osc = split
        .iter()
        .enumerate()
        .max_by(|a, b| energy(&a.1 .1).total_cmp(&energy(&b.1 .1)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let dc = split
        .iter()
        .enumerate()
        .max_by(|a, b| {
            energy(&period_differences(&a.1 .0, period))
                .total_cmp(&energy(&period_differences(&b.1 .0, period)))
        })
        .map(|(i, _)| i)
        .unwrap_or(0);

    let gamma1 = envelope_rate(&traces[osc].times, &split[osc].1, period).unwrap_or(fallback);
    let gamma2 = lowpass_rate(&traces[dc].times, &split[dc].0, period).unwrap_or(fallback);
    Ok(NonlinearParams {
        gamma1,
        gamma2,
        omega_l,
        phi: 0.0,
    })
}

/// Summed power spectrum of the mean-removed, Hann-windowed traces,
/// zero-padded to `size` points.
fn power_spectrum(traces: &[SignalTrace], size: usize) -> Vec<f64> {
    let fft = FftPlanner::<f64>::new().plan_fft_forward(size);
    let mut power = vec![0.0; size / 2];
    for t in traces {
        let m = t.len().min(size);
        let mean = t.values.iter().sum::<f64>() / t.len() as f64;
        let mut buf = vec![Complex::new(0.0, 0.0); size];
        for (i, v) in t.values.iter().take(m).enumerate() {
            let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / (m - 1) as f64).cos();
            buf[i] = Complex::new((v - mean) * w, 0.0);
        }
        fft.process(&mut buf);
        for (p, z) in power.iter_mut().zip(&buf) {
            *p += z.norm_sqr();
        }
    }
    power
}

/// Frequency (Hz) of the dominant oscillation across all traces.
///
/// The line is detected at native resolution, where window sidelobes are
/// not resolved, then located on a 16x zero-padded spectrum.
fn spectral_peak(traces: &[SignalTrace]) -> Result<f64> {
    let first = &traces[0];
    let n = first.len();
    let dt = (first.times[n - 1] - first.times[0]) / (n - 1) as f64;

    let coarse = power_spectrum(traces, n);
    // Ignore components slower than two cycles per record.
    let lo = 2;
    let hi = coarse.len().saturating_sub(1);
    if lo + 2 >= hi {
        return Err(Error::NoSpectralPeak);
    }
    let mut candidates = Vec::new();
    for k in (lo + 1)..hi {
        if coarse[k] > coarse[k - 1] && coarse[k] > coarse[k + 1] {
            let valley = coarse[lo..k].iter().copied().fold(f64::INFINITY, f64::min);
            // A genuine line stands well clear of the decaying background.
            if coarse[k] > 4.0 * valley {
                candidates.push(k);
            }
        }
    }
    let best = candidates.iter().map(|&k| coarse[k]).fold(0.0, f64::max);
    if !(best > 0.0) {
        return Err(Error::NoSpectralPeak);
    }
    // Lowest frequency among peaks within 1% (in magnitude) of the largest.
    let k0 = *candidates
        .iter()
        .find(|&&k| coarse[k].sqrt() >= 0.99 * best.sqrt())
        .expect("best is a candidate");
    let f0 = k0 as f64 / (n as f64 * dt);

    let padded = 16 * n.next_power_of_two();
    let fine = power_spectrum(traces, padded);
    let df = 1.0 / (padded as f64 * dt);
    let width = 1.0 / (n as f64 * dt) / df;
    let centre = f0 / df;
    let from = ((centre - width).floor().max(1.0)) as usize;
    let to = ((centre + width).ceil() as usize).min(fine.len() - 2);
    let k = (from..=to)
        .max_by(|&a, &b| fine[a].total_cmp(&fine[b]))
        .ok_or(Error::NoSpectralPeak)?;
    let (l, c, r) = (fine[k - 1].ln(), fine[k].ln(), fine[k + 1].ln());
    let denom = l - 2.0 * c + r;
    let delta = if denom < 0.0 { 0.5 * (l - r) / denom } else { 0.0 };
    Ok((k as f64 + delta.clamp(-0.5, 0.5)) * df)
}

fn moving_average(v: &[f64], width: usize) -> Vec<f64> {
    let n = v.len();
    let half = width / 2;
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + v[i];
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Decay rate from a least-squares line through `(t, ln y)`.
fn log_linear_rate(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 3 {
        return None;
    }
    let n = points.len() as f64;
    let (st, sy) = points
        .iter()
        .fold((0.0, 0.0), |(a, b), (t, y)| (a + t, b + y.ln()));
    let (mt, my) = (st / n, sy / n);
    let (mut num, mut den) = (0.0, 0.0);
    for (t, y) in points {
        num += (t - mt) * (y.ln() - my);
        den += (t - mt) * (t - mt);
    }
    let rate = -num / den;
    (rate.is_finite() && rate > 0.0).then_some(rate)
}

fn envelope_rate(times: &[f64], osc: &[f64], period: usize) -> Option<f64> {
    let peak = osc.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let edge = period;
    let points: Vec<(f64, f64)> = (edge.max(1)..osc.len().saturating_sub(edge + 1))
        .filter(|&i| {
            let a = osc[i].abs();
            a >= osc[i - 1].abs() && a > osc[i + 1].abs() && a > 0.05 * peak
        })
        .map(|i| (times[i], osc[i].abs()))
        .collect();
    log_linear_rate(&points)
}

fn lowpass_rate(times: &[f64], low: &[f64], period: usize) -> Option<f64> {
    // One-period differences of the low-passed trace decay at the same rate
    // and carry no constant offset.
    let diff = period_differences(low, period);
    let peak = diff.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let points: Vec<(f64, f64)> = (period..diff.len().saturating_sub(period))
        .filter(|&i| diff[i].abs() > 0.05 * peak)
        .map(|i| (times[i], diff[i].abs()))
        .collect();
    log_linear_rate(&points)
}

fn period_differences(low: &[f64], period: usize) -> Vec<f64> {
    (0..low.len().saturating_sub(period))
        .map(|i| low[i + period] - low[i])
        .collect()
}

/// Damped Gauss-Newton (Levenberg-Marquardt) fit with the amplitudes
/// projected out.
pub fn joint_fit(spec: &FitModelSpec, init: NonlinearParams) -> Result<FitResult> {
    let problem = FitProblem::new(spec, init)?;
    let mut theta = problem.initial_theta();
    let mut cost = problem.cost(&theta)?;

    // The projected cost is pi-periodic in phi; start from the best of a
    // coarse scan so the iteration cannot stall on a maximum.
    if let Some(k) = problem.free.iter().position(|&i| i == 3) {
        let start = theta[k];
        for s in 1..8 {
            let mut probe = theta.clone();
            probe[k] = start + s as f64 * PI / 8.0;
            let c = problem.cost(&probe)?;
            if c < cost {
                cost = c;
                theta = probe;
            }
        }
    }

    let outcome = if problem.free.is_empty() {
        LmOutcome {
            theta,
            cost,
            converged: true,
            iterations: 0,
        }
    } else {
        levenberg_marquardt(
            |t| problem.residual(t),
            |t| problem.expand(t).is_valid(),
            theta,
        )?
    };
    summarize(
        &problem,
        &outcome.theta,
        outcome.cost,
        outcome.converged,
        outcome.iterations,
    )
}

pub(crate) struct LmOutcome {
    pub theta: Vec<f64>,
    pub cost: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Central-difference Jacobian of `residual`, steps `step_scale * default_step`.
pub(crate) fn numeric_jacobian<F>(residual: F, theta: &[f64], step_scale: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut probe = theta.to_vec();
    let mut columns = Vec::with_capacity(theta.len());
    for c in 0..theta.len() {
        let h = step_scale * FitProblem::default_step(theta[c]);
        probe[c] = theta[c] + h;
        let plus = residual(&probe)?;
        probe[c] = theta[c] - h;
        let minus = residual(&probe)?;
        probe[c] = theta[c];
        columns.push(DVector::from_iterator(
            plus.len(),
            plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * h)),
        ));
    }
    Ok(DMatrix::from_columns(&columns))
}

/// Levenberg-Marquardt on `|residual|^2`. Steps leaving the `valid` region
/// are rejected like uphill steps.
pub(crate) fn levenberg_marquardt<F, V>(residual: F, valid: V, theta0: Vec<f64>) -> Result<LmOutcome>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
    V: Fn(&[f64]) -> bool,
{
    let sq = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();
    let mut theta = theta0;
    let mut cost = sq(&residual(&theta)?);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        if cost == 0.0 {
            converged = true;
            break;
        }
        iterations += 1;
        let r = DVector::from_vec(residual(&theta)?);
        let j = numeric_jacobian(&residual, &theta, 1.0)?;
        let jtj = j.transpose() * &j;
        let g = j.transpose() * r;
        let diag_floor = 1e-12 * jtj.diagonal().max().max(f64::MIN_POSITIVE);

        let mut accepted = None;
        while lambda < 1e30 {
            let mut a = jtj.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += lambda * jtj[(i, i)].max(diag_floor);
            }
            if let Some(chol) = a.cholesky() {
                let step = chol.solve(&(-&g));
                let candidate: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, d)| t + d).collect();
                if valid(&candidate) {
                    if let Ok(rc) = residual(&candidate) {
                        let c = sq(&rc);
                        if c < cost {
                            accepted = Some((candidate, c, step.norm()));
                            break;
                        }
                    }
                }
            }
            lambda *= 4.0;
        }
        let Some((candidate, new_cost, step_norm)) = accepted else {
            // No damped step lowers the cost any further.
            converged = true;
            break;
        };
        let rel_change = (cost - new_cost) / cost;
        let theta_norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
        theta = candidate;
        cost = new_cost;
        lambda = (lambda / 3.0).max(1e-12);
        if rel_change < COST_TOL || step_norm < STEP_TOL * (theta_norm + STEP_TOL) {
            converged = true;
            break;
        }
    }
    Ok(LmOutcome {
        theta,
        cost,
        converged,
        iterations,
    })
}

/// `s^2 (J^T J)^+` with `s^2 = cost / (n - p)`.
pub(crate) fn scaled_covariance(j: &DMatrix<f64>, cost: f64) -> Result<DMatrix<f64>> {
    let dof = j.nrows().saturating_sub(j.ncols()).max(1) as f64;
    let jtj = j.transpose() * j;
    let tol = 1e-13 * jtj.norm().max(f64::MIN_POSITIVE);
    let inv = jtj
        .pseudo_inverse(tol)
        .map_err(|e| Error::FitFailed(e.to_string()))?;
    Ok(inv * (cost / dof))
}

/// Small dense least squares `min |X c - y|` by normal equations, with the
/// columns of `X` given separately.
pub(crate) fn least_squares(columns: &[Vec<f64>], y: &[f64]) -> Result<Vec<f64>> {
    let p = columns.len();
    let mut g = DMatrix::<f64>::zeros(p, p);
    let mut r = DVector::<f64>::zeros(p);
    for i in 0..p {
        r[i] = dot(&columns[i], y);
        for j in 0..=i {
            let v = dot(&columns[i], &columns[j]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    // Equilibrate so the singularity test is scale free.
    let d: Vec<f64> = (0..p).map(|i| g[(i, i)].sqrt()).collect();
    if d.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::SingularDesign("a design column is identically zero".into()));
    }
    let scaled = DMatrix::from_fn(p, p, |i, j| g[(i, j)] / (d[i] * d[j]));
    let rs = DVector::from_fn(p, |i, _| r[i] / d[i]);
    let svd = scaled.svd(true, true);
    let smin = svd.singular_values.min();
    let smax = svd.singular_values.max();
    if !(smin > 1e-13 * smax) {
        return Err(Error::SingularDesign("design columns are linearly dependent".into()));
    }
    let c = svd
        .solve(&rs, 0.0)
        .map_err(|e| Error::SingularDesign(e.to_string()))?;
    Ok((0..p).map(|i| c[i] / d[i]).collect())
}

fn summarize(
    problem: &FitProblem<'_>,
    theta: &[f64],
    cost: f64,
    converged: bool,
    iterations: usize,
) -> Result<FitResult> {
    let spec = problem.spec;
    let p = problem.expand(theta);
    let amps = problem.amplitudes(&p)?;
    let n = problem.residual_len();
    let nfree = problem.free.len();
    let ncols = nfree + 2 * amps.len();

    // Model Jacobian in (free nonlinear, a_0, b_0, a_1, b_1, ...).
    let mut j = DMatrix::zeros(n, ncols);
    let mut row = 0;
    for (k, (t, &q)) in spec.traces.iter().zip(&spec.quadratures).enumerate() {
        let (a, b) = amps[k];
        for &time in &t.times {
            let e1 = (-p.gamma1 * time).exp();
            let e2 = (-p.gamma2 * time).exp();
            let (qv, dq) = q.eval(2.0 * p.omega_l * time + p.phi);
            let partials = [
                -time * a * e1 * qv,
                time * b * e2,
                2.0 * time * a * e1 * dq,
                a * e1 * dq,
            ];
            for (c, &slot) in problem.free.iter().enumerate() {
                j[(row, c)] = partials[slot];
            }
            j[(row, nfree + 2 * k)] = e1 * qv;
            j[(row, nfree + 2 * k + 1)] = -e2;
            row += 1;
        }
    }
    let cov = scaled_covariance(&j, cost)?;
    let sd = |i: usize| cov[(i, i)].max(0.0).sqrt();

    let mut shared_err = [0.0; 4];
    for (c, &slot) in problem.free.iter().enumerate() {
        shared_err[slot] = sd(c);
    }
    let est = |i: usize, v: f64| Estimate {
        value: v,
        stderr: shared_err[i],
    };
    let shared = SharedFit {
        gamma1: est(0, p.gamma1),
        gamma2: est(1, p.gamma2),
        omega_l: est(2, p.omega_l),
        phi: est(3, p.phi),
    };

    let scale_a = 2.0 * spec.eta;
    let scale_b = 2.0 * spec.eta * spec.zeta;
    let per_trace = spec
        .traces
        .iter()
        .zip(&spec.quadratures)
        .enumerate()
        .map(|(k, (t, &q))| {
            let (ia, ib) = (nfree + 2 * k, nfree + 2 * k + 1);
            let (a, b) = amps[k];
            let covariance = [
                [cov[(ia, ia)], cov[(ia, ib)]],
                [cov[(ib, ia)], cov[(ib, ib)]],
            ];
            TraceFit {
                pulse: t.meta.pulse.clone(),
                variant: t.meta.variant,
                quadrature: q,
                a,
                b,
                a_stderr: sd(ia),
                b_stderr: sd(ib),
                covariance,
                observable_a: a / scale_a,
                observable_a_stderr: sd(ia) / scale_a.abs(),
                observable_b: b / scale_b,
                observable_b_stderr: sd(ib) / scale_b.abs(),
            }
        })
        .collect();

    Ok(FitResult {
        shared,
        per_trace,
        residual_rms: (cost / n as f64).sqrt(),
        converged,
        iterations,
        eta: spec.eta,
        zeta: spec.zeta,
    })
}

/// `estimate_initial` followed by `joint_fit`, falling back to `fallback`
/// when the spectrum has no usable peak.
pub fn fit_combined(spec: &FitModelSpec, fallback: NonlinearParams) -> Result<FitResult> {
    let init = match estimate_initial(&spec.traces) {
        Ok(p) => p,
        Err(Error::NoSpectralPeak) => fallback,
        Err(e) => return Err(e),
    };
    joint_fit(spec, init)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observables::{default_observables, MeasurementPlan};
    use crate::qutrit::random_state;
    use crate::signal::{synthesize_plan, uniform_grid, SignalParams, TraceMeta};

    fn truth() -> SignalParams {
        SignalParams {
            eta: 0.9,
            zeta: 0.3,
            gamma1: 2.5,
            gamma2: 3.5,
            omega_l: 2.0 * PI * 20.0,
            phi: 0.3,
            offset: 0.05,
            detuning_hz: 0.0,
        }
    }

    fn combined(seed: u64, p: &SignalParams, sigma: f64) -> Vec<SignalTrace> {
        let plan = MeasurementPlan::default_with_zeta(p.zeta);
        synthesize_plan(&random_state(seed), &plan, &default_observables(), p, &uniform_grid(4096, 1.0), sigma, seed)
            .unwrap()
            .combined()
            .unwrap()
    }

    fn bare(times: Vec<f64>, values: Vec<f64>, variant: Option<CyclopsVariant>) -> SignalTrace {
        SignalTrace {
            times,
            values,
            meta: TraceMeta {
                params: SignalParams::default(),
                pulse: "t".into(),
                variant,
                seed: 0,
            },
        }
    }

    #[test]
    fn initial_frequency_within_two_percent() {
        let p = truth();
        let init = estimate_initial(&combined(3, &p, 0.0)).unwrap();
        assert!((init.omega_l / p.omega_l - 1.0).abs() < 0.02, "{init:?}");
        assert_eq!(init.phi, 0.0);
        assert!(init.gamma1 > 0.0 && init.gamma2 > 0.0);
    }

    #[test]
    fn pure_decay_has_no_peak() {
        let times = uniform_grid(1024, 1.0);
        let values = times.iter().map(|t| (-3.0 * t).exp()).collect();
        let tr = bare(times, values, Some(CyclopsVariant::Y));
        let r = estimate_initial(&[tr]);
        assert!(matches!(r, Err(Error::NoSpectralPeak)), "{r:?}");
    }

    #[test]
    fn flat_trace_has_no_peak() {
        let times = uniform_grid(256, 1.0);
        let tr = bare(times, vec![0.0; 256], Some(CyclopsVariant::Y));
        assert!(matches!(estimate_initial(&[tr]), Err(Error::NoSpectralPeak)));
    }

    #[test]
    fn noiseless_fit_recovers_truth() {
        let p = truth();
        let traces = combined(5, &p, 0.0);
        let spec = FitModelSpec::from_combined(traces, p.eta, p.zeta).unwrap();
        let init = estimate_initial(&spec.traces).unwrap();
        let mut fit = joint_fit(&spec, init).unwrap();
        fit.fold_phase(p.phi);
        assert!(fit.converged);
        let s = fit.shared.params();
        assert!((s.gamma1 / p.gamma1 - 1.0).abs() < 1e-6);
        assert!((s.gamma2 / p.gamma2 - 1.0).abs() < 1e-6);
        assert!((s.omega_l / p.omega_l - 1.0).abs() < 1e-6);
        assert!((s.phi - p.phi).abs() < 1e-6);

        let obs = default_observables();
        let plan = MeasurementPlan::default_with_zeta(p.zeta);
        let rho = random_state(5);
        for (k, entry) in plan.entries.iter().enumerate() {
            let u = entry.pulse.unitary().unwrap();
            let e = obs.expectations(&crate::qutrit::apply_pulse(&rho, &u));
            for (j, v) in CyclopsVariant::ALL.iter().enumerate() {
                let tf = &fit.per_trace[2 * k + j];
                let expected_a = match v {
                    CyclopsVariant::Y => e[1],
                    CyclopsVariant::ZY => e[0],
                };
                assert!((tf.observable_a - expected_a).abs() < 1e-8, "{tf:?}");
                assert!((tf.observable_b - e[2]).abs() < 1e-8, "{tf:?}");
            }
        }
    }

    #[test]
    fn zero_traces_give_zero_amplitudes() {
        let times = uniform_grid(512, 1.0);
        let traces = vec![
            bare(times.clone(), vec![0.0; 512], Some(CyclopsVariant::Y)),
            bare(times, vec![0.0; 512], Some(CyclopsVariant::ZY)),
        ];
        let spec = FitModelSpec::from_combined(traces, 1.0, 0.3).unwrap();
        let init = NonlinearParams {
            gamma1: 3.0,
            gamma2: 3.0,
            omega_l: 100.0,
            phi: 0.0,
        };
        let fit = joint_fit(&spec, init).unwrap();
        assert!(fit.converged);
        assert!(fit.per_trace.iter().all(|t| t.a == 0.0 && t.b == 0.0));
        assert_eq!(fit.residual_rms, 0.0);
    }

    #[test]
    fn separability_is_exact_at_optimum() {
        let p = truth();
        let spec = FitModelSpec::from_combined(combined(7, &p, 1e-4), p.eta, p.zeta).unwrap();
        let fit = joint_fit(&spec, estimate_initial(&spec.traces).unwrap()).unwrap();
        let problem = FitProblem::new(&spec, fit.shared.params()).unwrap();
        let amps = problem.amplitudes(&fit.shared.params()).unwrap();
        for (t, (a, b)) in fit.per_trace.iter().zip(amps) {
            assert!((t.a - a).abs() < 1e-14 && (t.b - b).abs() < 1e-14);
        }
    }

    #[test]
    fn numeric_jacobian_is_stable_under_step_halving() {
        let p = truth();
        let spec = FitModelSpec::from_combined(combined(9, &p, 1e-3), p.eta, p.zeta).unwrap();
        let init = NonlinearParams {
            gamma1: 2.4,
            gamma2: 3.6,
            omega_l: p.omega_l * 1.0001,
            phi: 0.25,
        };
        let problem = FitProblem::new(&spec, init).unwrap();
        let theta = problem.initial_theta();
        let j1 = problem.jacobian(&theta, 1.0).unwrap();
        let j2 = problem.jacobian(&theta, 0.5).unwrap();
        for c in 0..j1.ncols() {
            let (a, b) = (j1.column(c), j2.column(c));
            assert!((a - b).norm() <= 1e-5 * b.norm(), "column {c}");
        }
    }

    #[test]
    fn fold_phase_flips_amplitudes() {
        let p = truth();
        let spec = FitModelSpec::from_combined(combined(2, &p, 0.0), p.eta, p.zeta).unwrap();
        let fit = joint_fit(&spec, estimate_initial(&spec.traces).unwrap()).unwrap();
        let mut a = fit.clone();
        a.fold_phase(p.phi);
        let mut b = fit.clone();
        b.fold_phase(p.phi + PI);
        assert!((b.shared.phi.value - a.shared.phi.value - PI).abs() < 1e-12);
        for (x, y) in a.per_trace.iter().zip(&b.per_trace) {
            assert_eq!(x.a, -y.a);
            assert_eq!(x.b, y.b);
        }
    }

    #[test]
    fn rejects_raw_traces() {
        let times = uniform_grid(128, 1.0);
        let tr = bare(times, vec![0.0; 128], None);
        assert!(FitModelSpec::from_combined(vec![tr], 1.0, 0.3).is_err());
    }

    #[test]
    fn degenerate_grid_is_singular() {
        let tr = bare(vec![0.0, 0.5], vec![1.0, 0.5], Some(CyclopsVariant::Y));
        assert!(matches!(
            FitModelSpec::from_combined(vec![tr], 1.0, 0.3),
            Err(Error::SingularDesign(_))
        ));
    }
}
