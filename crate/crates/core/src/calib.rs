//! Voigt lineshape and the calibration of the global (eta) and local (zeta)
//! scaling factors.

use std::f64::consts::{FRAC_2_SQRT_PI as TWO_OVER_SQRT_PI, PI, SQRT_2};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::{
    estimate_initial, least_squares, levenberg_marquardt, numeric_jacobian, scaled_covariance,
    NonlinearParams,
};
use crate::observables::ObservableSet;
use crate::qutrit::{stretched_state, Axis, StretchedSpec};
use crate::signal::SignalTrace;

/// Prefactor of the absorption-ratio formula for eta.
pub const ETA_ABSORPTION_FACTOR: f64 = 27.0 / 16.0;

/// `zeta = STRETCHED_RATIO * A_z / A_x` for the default observables, where
/// `A_z`, `A_x` are the t = 0 amplitudes of the stretched-state signals.
pub const STRETCHED_RATIO: f64 = 1.0 / 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LineshapeParams {
    /// Doppler (Gaussian) standard deviation, Hz.
    #[serde(rename = "sigma_D")]
    pub sigma_d: f64,
    /// Lorentzian half-width, Hz.
    #[serde(rename = "gamma_L")]
    pub gamma_l: f64,
    /// Overall scale absorbed into eta.
    pub chi: f64,
}

impl Default for LineshapeParams {
    fn default() -> Self {
        Self {
            sigma_d: 230e6,
            gamma_l: 3e6,
            chi: 1.0,
        }
    }
}

impl LineshapeParams {
    pub fn new(sigma_d: f64, gamma_l: f64, chi: f64) -> Result<Self> {
        let lp = Self {
            sigma_d,
            gamma_l,
            chi,
        };
        lp.validate()?;
        Ok(lp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_d > 0.0 && self.sigma_d.is_finite()) {
            return Err(Error::InvalidInput("sigma_D must be positive".into()));
        }
        if !(self.gamma_l > 0.0 && self.gamma_l.is_finite()) {
            return Err(Error::InvalidInput("gamma_L must be positive".into()));
        }
        if !self.chi.is_finite() {
            return Err(Error::InvalidInput("chi must be finite".into()));
        }
        Ok(())
    }
}

/// Faddeeva function `w(z) = exp(-z^2) erfc(-iz)`.
///
/// Poppe & Wijers, ACM TOMS 680: power series near the origin, continued
/// fraction (with Laplace continued-fraction truncation) elsewhere.
pub fn faddeeva(z: Complex64) -> Complex64 {
    if z.im < 0.0 {
        // w(z) = 2 exp(-z^2) - w(-z)
        return 2.0 * (-z * z).exp() - faddeeva(-z);
    }
    let (xi, yi) = (z.re, z.im);
    let (xabs, yabs) = (xi.abs(), yi);
    let x = xabs / 6.3;
    let y = yabs / 4.4;
    let mut qrho = x * x + y * y;
    let xquad = xabs * xabs - yabs * yabs;
    let yquad = 2.0 * xabs * yabs;

    let (u, mut v);
    if qrho < 0.085264 {
        qrho = (1.0 - 0.85 * y) * qrho.sqrt();
        let n = (6.0 + 72.0 * qrho).round() as i32;
        let mut j = 2 * n + 1;
        let mut xsum = 1.0 / j as f64;
        let mut ysum = 0.0;
        for i in (1..=n).rev() {
            j -= 2;
            let xaux = (xsum * xquad - ysum * yquad) / i as f64;
            ysum = (xsum * yquad + ysum * xquad) / i as f64;
            xsum = xaux + 1.0 / j as f64;
        }
        let u1 = -TWO_OVER_SQRT_PI * (xsum * yabs + ysum * xabs) + 1.0;
        let v1 = TWO_OVER_SQRT_PI * (xsum * xabs - ysum * yabs);
        let daux = (-xquad).exp();
        let u2 = daux * yquad.cos();
        let v2 = -daux * yquad.sin();
        u = u1 * u2 - v1 * v2;
        v = u1 * v2 + v1 * u2;
    } else {
        let (h, kapn, nu);
        if qrho > 1.0 {
            h = 0.0;
            kapn = 0;
            qrho = qrho.sqrt();
            nu = (3.0 + 1442.0 / (26.0 * qrho + 77.0)) as i32;
        } else {
            qrho = (1.0 - y) * (1.0 - qrho).sqrt();
            h = 1.88 * qrho;
            kapn = (7.0 + 34.0 * qrho).round() as i32;
            nu = (16.0 + 26.0 * qrho).round() as i32;
        }
        let h2 = 2.0 * h;
        let laplace = h > 0.0;
        let mut qlambda = if laplace { h2.powi(kapn) } else { 0.0 };
        let (mut rx, mut ry, mut sx, mut sy) = (0.0, 0.0, 0.0, 0.0);
        for n in (0..=nu).rev() {
            let np1 = (n + 1) as f64;
            let tx = yabs + h + np1 * rx;
            let ty = xabs - np1 * ry;
            let c = 0.5 / (tx * tx + ty * ty);
            rx = c * tx;
            ry = c * ty;
            if laplace && n <= kapn {
                let tx = qlambda + sx;
                sx = rx * tx - ry * sy;
                sy = ry * tx + rx * sy;
                qlambda /= h2;
            }
        }
        if laplace {
            u = TWO_OVER_SQRT_PI * sx;
            v = TWO_OVER_SQRT_PI * sy;
        } else {
            u = if yabs == 0.0 { (-xabs * xabs).exp() } else { TWO_OVER_SQRT_PI * rx };
            v = TWO_OVER_SQRT_PI * ry;
        }
    }
    if xi < 0.0 {
        v = -v;
    }
    Complex64::new(u, v)
}

/// Complex Voigt profile `V_R + i V_I = w(z) / (sigma_D sqrt(2 pi))` with
/// `z = (delta + i gamma_L) / (sigma_D sqrt 2)`; `V_R` is normalised to unit
/// area in `delta`.
pub fn voigt(delta_hz: f64, lp: &LineshapeParams) -> Complex64 {
    let s = lp.sigma_d * SQRT_2;
    faddeeva(Complex64::new(delta_hz / s, lp.gamma_l / s)) / (lp.sigma_d * (2.0 * PI).sqrt())
}

/// `eta(delta) = chi V_R(delta)`.
pub fn eta_theoretical(delta_hz: f64, lp: &LineshapeParams) -> f64 {
    lp.chi * voigt(delta_hz, lp).re
}

/// `V_I / V_R`.
pub fn zeta_theoretical(delta_hz: f64, lp: &LineshapeParams) -> Result<f64> {
    let v = voigt(delta_hz, lp);
    if v.re.abs() < 1e-300 {
        return Err(Error::DivisionNearZero { value: v.re });
    }
    Ok(v.im / v.re)
}

/// Blue detuning at which `zeta_theoretical` equals `target > 0`, by
/// bisection on `(0, upper]`.
pub fn detuning_for_zeta(target: f64, lp: &LineshapeParams) -> Result<f64> {
    lp.validate()?;
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::InvalidInput("target zeta must be positive".into()));
    }
    let mut hi = lp.sigma_d;
    while zeta_theoretical(hi, lp)? < target {
        hi *= 2.0;
        if hi > 1e6 * lp.sigma_d {
            return Err(Error::InvalidInput(format!("zeta {target} is not reached")));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if zeta_theoretical(mid, lp)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Photodetector voltages in front of (`u1`) and behind (`u2`) the cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbsorptionSample {
    #[serde(rename = "U1")]
    pub u1: f64,
    #[serde(rename = "U2")]
    pub u2: f64,
}

impl AbsorptionSample {
    fn ratio(&self) -> Result<f64> {
        if !(self.u1 > 0.0 && self.u2 > 0.0) {
            return Err(Error::NonPositiveVoltage);
        }
        Ok(self.u2 / self.u1)
    }
}

/// `27/16 (sqrt(r_probe / r_far) - 1)` with `r = U2 / U1`.
pub fn eta_from_absorption(probe: &AbsorptionSample, far: &AbsorptionSample) -> Result<f64> {
    let ratio = probe.ratio()? / far.ratio()?;
    Ok(ETA_ABSORPTION_FACTOR * (ratio.sqrt() - 1.0))
}

/// Probe sample that `eta_from_absorption` maps to `eta` against `far`.
pub fn absorption_for_eta(eta: f64, far: &AbsorptionSample) -> Result<AbsorptionSample> {
    let root = 1.0 + eta / ETA_ABSORPTION_FACTOR;
    if !(root > 0.0) {
        return Err(Error::InvalidInput(format!("eta {eta} has no absorption preimage")));
    }
    far.ratio()?;
    Ok(AbsorptionSample {
        u1: far.u1,
        u2: far.u2 * root * root,
    })
}

/// Ratio `k` in `zeta = k A_z / A_x` for an observable set, with `A_x`
/// signed like the dominant x-stretched coherence.
pub fn stretched_ratio(obs: &ObservableSet) -> Result<f64> {
    let z = obs.expectations(&stretched_state(&StretchedSpec::new(Axis::Z, 0.0)?));
    let x = obs.expectations(&stretched_state(&StretchedSpec::new(Axis::X, 0.0)?));
    let signed = signed_coherence(x);
    if z[2] == 0.0 || signed == 0.0 {
        return Err(Error::InvalidInput(
            "observables give no stretched-state signal".into(),
        ));
    }
    Ok(-signed / z[2])
}

/// `|(a_R, a_I)|` carrying the sign of the larger component.
fn signed_coherence(e: [f64; 3]) -> f64 {
    let dominant = if e[0].abs() >= e[1].abs() { e[0] } else { e[1] };
    dominant.signum() * e[0].hypot(e[1])
}

/// Outcome of the stretched-state calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StretchedCalibration {
    pub zeta: f64,
    pub zeta_stderr: f64,
    /// Instrument phase, in `(-pi, pi]`.
    pub phi: f64,
    /// DC amplitude of the z trace at t = 0.
    pub a_z: f64,
    /// Signed oscillation amplitude of the x trace at t = 0.
    pub a_x: f64,
    pub a_x_stderr: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    #[serde(rename = "omega_L")]
    pub omega_l: f64,
    pub converged: bool,
}

/// Columns `[e^{-g2 t}, e^{-g1 t} cos 2Wt, e^{-g1 t} sin 2Wt, 1]`.
fn stretched_columns(times: &[f64], theta: &[f64]) -> Vec<Vec<f64>> {
    let (g1, g2, w) = (theta[0], theta[1], theta[2]);
    let mut cols: Vec<Vec<f64>> = (0..4).map(|_| Vec::with_capacity(times.len())).collect();
    for &t in times {
        let e1 = (-g1 * t).exp();
        let (s, c) = (2.0 * w * t).sin_cos();
        cols[0].push((-g2 * t).exp());
        cols[1].push(e1 * c);
        cols[2].push(e1 * s);
        cols[3].push(1.0);
    }
    cols
}

/// Local scaling factor from raw z- and x-stretched traces.
///
/// Both traces share `(gamma1, gamma2, Omega_L)` and each gets a decay, two
/// oscillation quadratures and a constant offset; the nuisance components
/// are discarded. The x trace also fixes the instrument phase, given
/// `eta > 0`.
pub fn zeta_from_stretched(
    trace_z: &SignalTrace,
    trace_x: &SignalTrace,
    obs: &ObservableSet,
) -> Result<StretchedCalibration> {
    let k = stretched_ratio(obs)?;
    let x_exp = obs.expectations(&stretched_state(&StretchedSpec::new(Axis::X, 0.0)?));
    let psi = x_exp[1].atan2(x_exp[0]);
    let sign_x = signed_coherence(x_exp).signum();

    let init: NonlinearParams = estimate_initial(&[trace_x.clone(), trace_z.clone()])?;
    let traces = [trace_z, trace_x];
    let residual = |theta: &[f64]| -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for t in traces {
            let cols = stretched_columns(&t.times, theta);
            let c = least_squares(&cols, &t.values)?;
            out.extend(t.values.iter().enumerate().map(|(i, y)| {
                y - cols.iter().zip(&c).map(|(col, ci)| col[i] * ci).sum::<f64>()
            }));
        }
        Ok(out)
    };
    let valid = |t: &[f64]| t.iter().all(|v| v.is_finite()) && t[0] > 0.0 && t[1] > 0.0;
    let theta0 = vec![init.gamma1, init.gamma2, init.omega_l];
    let lm = levenberg_marquardt(residual, valid, theta0)
        .map_err(|e| Error::FitFailed(e.to_string()))?;
    let theta = lm.theta;

    // Full model Jacobian: nonlinear part numerically at fixed coefficients.
    let coefs: Vec<Vec<f64>> = traces
        .iter()
        .map(|t| least_squares(&stretched_columns(&t.times, &theta), &t.values))
        .collect::<Result<_>>()?;
    let model = |th: &[f64]| -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for (t, c) in traces.iter().zip(&coefs) {
            let cols = stretched_columns(&t.times, th);
            out.extend((0..t.len()).map(|i| cols.iter().zip(c).map(|(col, ci)| col[i] * ci).sum::<f64>()));
        }
        Ok(out)
    };
    let jn = numeric_jacobian(model, &theta, 1.0)?;
    let n: usize = traces.iter().map(|t| t.len()).sum();
    let mut j = nalgebra::DMatrix::zeros(n, 3 + 8);
    j.view_mut((0, 0), (n, 3)).copy_from(&jn);
    let mut row = 0;
    for (ti, t) in traces.iter().enumerate() {
        let cols = stretched_columns(&t.times, &theta);
        for i in 0..t.len() {
            for (ci, col) in cols.iter().enumerate() {
                j[(row, 3 + 4 * ti + ci)] = col[i];
            }
            row += 1;
        }
    }
    let cov = scaled_covariance(&j, lm.cost)?;

    let a_z = coefs[0][0];
    let (c, s) = (coefs[1][1], coefs[1][2]);
    let magnitude = c.hypot(s);
    // Indices of (A_z, c_x, s_x) in the parameter vector.
    let (iz, ic, is) = (3, 3 + 4 + 1, 3 + 4 + 2);
    let var_mag = if magnitude > 0.0 {
        let g = [c / magnitude, s / magnitude];
        let idx = [ic, is];
        let mut v = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                v += g[a] * g[b] * cov[(idx[a], idx[b])];
            }
        }
        v
    } else {
        cov[(ic, ic)].max(cov[(is, is)])
    };
    let mag_stderr = var_mag.max(0.0).sqrt();
    if !(magnitude >= 5.0 * mag_stderr) || magnitude == 0.0 {
        return Err(Error::AmplitudeNearZero {
            amplitude: magnitude,
            stderr: mag_stderr,
        });
    }
    let a_x = sign_x * magnitude;
    let zeta = k * a_z / a_x;

    // Delta method on zeta(A_z, c, s).
    let grad = [
        (iz, k / a_x),
        (ic, -zeta / a_x * sign_x * c / magnitude),
        (is, -zeta / a_x * sign_x * s / magnitude),
    ];
    let mut var = 0.0;
    for (i, gi) in grad {
        for (j2, gj) in grad {
            var += gi * gj * cov[(i, j2)];
        }
    }

    let mut phi = c.atan2(s) - psi;
    phi = (phi + PI).rem_euclid(2.0 * PI) - PI;
    if phi <= -PI {
        phi += 2.0 * PI;
    }
    Ok(StretchedCalibration {
        zeta,
        zeta_stderr: var.max(0.0).sqrt(),
        phi,
        a_z,
        a_x,
        a_x_stderr: mag_stderr,
        gamma1: theta[0],
        gamma2: theta[1],
        omega_l: theta[2],
        converged: lm.converged,
    })
}

/// Scale factors consumed by `reconstruct`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub eta: f64,
    pub zeta: f64,
    pub zeta_stderr: f64,
    pub detuning_hz: f64,
    pub lineshape: LineshapeParams,
    /// Instrument phase from the x-stretched trace, when measured.
    #[serde(default)]
    pub phi: Option<f64>,
}

impl CalibrationRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta != 0.0) {
            return Err(Error::InvalidInput("calibrated eta must be finite and nonzero".into()));
        }
        if !self.zeta.is_finite() {
            return Err(Error::InvalidInput("calibrated zeta must be finite".into()));
        }
        Ok(())
    }
}
