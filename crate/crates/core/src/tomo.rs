//! Linear-inversion tomography: coefficient matrix, normal equations,
//! solution, physical projection and error bounds.

use nalgebra::{DMatrix, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::calib::CalibrationRecord;
use crate::error::{Error, Result};
use crate::fitting::{fit_combined, FitModelSpec, FitResult, NonlinearParams, TraceFit};
use crate::observables::{
    rotated_row, validate_cyclops, BetaRows, CyclopsVariant, MeasurementPlan, ObservableKind,
    ObservableSet,
};
use crate::qutrit::{devectorize, project_to_physical, DensityMatrix, StateVector8};
use crate::signal::TraceSet;

pub type Matrix8 = SMatrix<f64, 8, 8>;
pub type Vector8 = SVector<f64, 8>;

/// Relative singular-value threshold below which `C` counts as singular.
pub const SINGULAR_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowLabel {
    pub pulse: String,
    pub observable: ObservableKind,
    /// CYCLOPS combination the row is read from; `None` for merged beta rows.
    pub variant: Option<CyclopsVariant>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMatrix {
    /// `M x 8`.
    pub o: DMatrix<f64>,
    pub offsets: Vec<f64>,
    pub labels: Vec<RowLabel>,
    pub weights: Vec<u32>,
    /// Numerical rank of `W^{1/2} O`.
    pub rank: usize,
}

impl CoefficientMatrix {
    pub fn new(o: DMatrix<f64>, offsets: Vec<f64>, labels: Vec<RowLabel>, weights: Vec<u32>) -> Result<Self> {
        let m = o.nrows();
        if o.ncols() != 8 {
            return Err(Error::DimensionMismatch {
                expected: 8,
                found: o.ncols(),
            });
        }
        for len in [offsets.len(), labels.len(), weights.len()] {
            if len != m {
                return Err(Error::DimensionMismatch { expected: m, found: len });
            }
        }
        if weights.contains(&0) {
            return Err(Error::InvalidInput("row weights must be positive".into()));
        }
        let rank = weighted_rank(&o, &weights);
        Ok(Self {
            o,
            offsets,
            labels,
            weights,
            rank,
        })
    }

    pub fn rows(&self) -> usize {
        self.o.nrows()
    }

    pub fn is_full_rank(&self) -> bool {
        self.rank == 8
    }

    /// `Err(RankDeficient)` unless the matrix has rank 8.
    pub fn check_rank(&self) -> Result<()> {
        if self.is_full_rank() {
            Ok(())
        } else {
            Err(Error::RankDeficient { rank: self.rank })
        }
    }

    pub fn with_weights(&self, weights: Vec<u32>) -> Result<Self> {
        Self::new(self.o.clone(), self.offsets.clone(), self.labels.clone(), weights)
    }

    /// `O^T diag(weights) O` for arbitrary weights.
    pub fn normal_matrix(&self, weights: &[u32]) -> Matrix8 {
        let mut c = Matrix8::zeros();
        for (i, w) in weights.iter().enumerate() {
            let r = self.o.row(i);
            for a in 0..8 {
                for b in 0..8 {
                    c[(a, b)] += *w as f64 * r[a] * r[b];
                }
            }
        }
        c
    }
}

fn weighted_rank(o: &DMatrix<f64>, weights: &[u32]) -> usize {
    let mut w = o.clone();
    for (i, wi) in weights.iter().enumerate() {
        w.row_mut(i).scale_mut((*wi as f64).sqrt());
    }
    let sv = w.singular_values();
    let max = sv.max();
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|s| **s > SINGULAR_TOL * max).count()
}

/// Rows per plan entry, in order: `alpha_R` (from ZY), `alpha_I` (from Y),
/// then `zeta beta` once (merged) or per combination (Y, ZY).
pub fn build_coefficient_matrix(
    plan: &MeasurementPlan,
    obs: &ObservableSet,
    allow_nonstandard: bool,
) -> Result<CoefficientMatrix> {
    plan.validate()?;
    let report = validate_cyclops(obs);
    if !report.passed() && !allow_nonstandard {
        return Err(Error::CyclopsConventionMismatch(Box::new(report)));
    }
    let mut rows = Vec::new();
    let mut offsets = Vec::new();
    let mut labels = Vec::new();
    let mut weights = Vec::new();
    for entry in &plan.entries {
        let u = entry.pulse.unitary()?;
        let mut push = |kind: ObservableKind, variant: Option<CyclopsVariant>, scale: f64| {
            let r = rotated_row(obs.get(kind), &u, scale);
            rows.push(r.row);
            offsets.push(r.offset);
            labels.push(RowLabel {
                pulse: entry.pulse.tag.clone(),
                observable: kind,
                variant,
            });
            weights.push(entry.repetitions);
        };
        push(ObservableKind::AlphaR, Some(CyclopsVariant::ZY), 1.0);
        push(ObservableKind::AlphaI, Some(CyclopsVariant::Y), 1.0);
        match plan.beta_rows {
            BetaRows::Merged => push(ObservableKind::Beta, None, plan.zeta),
            BetaRows::PerCombination => {
                push(ObservableKind::Beta, Some(CyclopsVariant::Y), plan.zeta);
                push(ObservableKind::Beta, Some(CyclopsVariant::ZY), plan.zeta);
            }
        }
    }
    let o = DMatrix::from_fn(rows.len(), 8, |i, j| rows[i][j]);
    CoefficientMatrix::new(o, offsets, labels, weights)
}

/// Measured row values with offsets already subtracted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationVector {
    pub b: Vec<f64>,
    pub sigma_b: Vec<f64>,
}

/// Row values from a fit of the plan's difference traces.
///
/// Oscillation amplitudes give `<alpha> = a / 2 eta`, decay amplitudes give
/// `zeta <beta> = b / 2 eta`; merged beta rows take the inverse-variance mean
/// of the Y and ZY estimates.
pub fn observations_from_fit(cm: &CoefficientMatrix, fit: &FitResult) -> Result<ObservationVector> {
    let find = |pulse: &str, v: CyclopsVariant| -> Result<&TraceFit> {
        fit.per_trace
            .iter()
            .find(|t| t.pulse == pulse && t.variant == Some(v))
            .ok_or_else(|| Error::MetadataMismatch(format!("no {} trace for pulse '{pulse}'", v.tag())))
    };
    let scale = 2.0 * fit.eta;
    let mut b = Vec::with_capacity(cm.rows());
    let mut sigma = Vec::with_capacity(cm.rows());
    for (label, offset) in cm.labels.iter().zip(&cm.offsets) {
        let (value, err) = match (label.observable, label.variant) {
            (ObservableKind::Beta, None) => {
                let y = find(&label.pulse, CyclopsVariant::Y)?;
                let zy = find(&label.pulse, CyclopsVariant::ZY)?;
                let (vy, vzy) = (y.b_stderr.powi(2), zy.b_stderr.powi(2));
                let (wy, wzy) = if vy > 0.0 && vzy > 0.0 {
                    (1.0 / vy, 1.0 / vzy)
                } else {
                    (1.0, 1.0)
                };
                let mean = (wy * y.b + wzy * zy.b) / (wy + wzy);
                let var = (wy * wy * vy + wzy * wzy * vzy) / ((wy + wzy) * (wy + wzy));
                (mean / scale, var.sqrt() / scale.abs())
            }
            (ObservableKind::Beta, Some(v)) => {
                let t = find(&label.pulse, v)?;
                (t.b / scale, t.b_stderr / scale.abs())
            }
            (kind, variant) => {
                let v = variant.unwrap_or(match kind {
                    ObservableKind::AlphaR => CyclopsVariant::ZY,
                    _ => CyclopsVariant::Y,
                });
                let t = find(&label.pulse, v)?;
                (t.a / scale, t.a_stderr / scale.abs())
            }
        };
        b.push(value - offset);
        sigma.push(err);
    }
    Ok(ObservationVector { b, sigma_b: sigma })
}

/// `C = O^T W O`, `b~ = O^T W b`.
pub fn normal_equations(cm: &CoefficientMatrix, ov: &ObservationVector) -> Result<(Matrix8, Vector8)> {
    if ov.b.len() != cm.rows() {
        return Err(Error::DimensionMismatch {
            expected: cm.rows(),
            found: ov.b.len(),
        });
    }
    if ov.sigma_b.len() != cm.rows() {
        return Err(Error::DimensionMismatch {
            expected: cm.rows(),
            found: ov.sigma_b.len(),
        });
    }
    Ok((cm.normal_matrix(&cm.weights), weighted_transpose(cm, &ov.b)))
}

/// `O^T W v`.
fn weighted_transpose(cm: &CoefficientMatrix, v: &[f64]) -> Vector8 {
    let mut out = Vector8::zeros();
    for (i, (w, vi)) in cm.weights.iter().zip(v).enumerate() {
        for a in 0..8 {
            out[a] += *w as f64 * cm.o[(i, a)] * vi;
        }
    }
    out
}

/// `C^{-1} b~` through the SVD of `C`.
pub fn solve_state(c: &Matrix8, b: &Vector8) -> Result<StateVector8> {
    let svd = c.svd(true, true);
    let (smin, smax) = (svd.singular_values.min(), svd.singular_values.max());
    if !(smin > SINGULAR_TOL * smax) {
        return Err(Error::SingularSystem {
            min_singular_value: smin,
            max_singular_value: smax,
        });
    }
    let x = svd.solve(b, 0.0).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut out = [0.0; 8];
    out.copy_from_slice(x.as_slice());
    Ok(StateVector8(out))
}

/// `sigma_max / sigma_min`.
pub fn condition_number(c: &Matrix8) -> Result<f64> {
    let sv = c.singular_values();
    let (smin, smax) = (sv.min(), sv.max());
    if !(smin > SINGULAR_TOL * smax) {
        return Err(Error::SingularSystem {
            min_singular_value: smin,
            max_singular_value: smax,
        });
    }
    Ok(smax / smin)
}

/// Bounds on `|d rho_V| / |rho_V|` given `|d b~| / |b~|`.
pub fn atkinson_bounds(kappa: f64, rel_db: f64) -> Result<(f64, f64)> {
    if !(kappa >= 1.0) || !(rel_db >= 0.0) {
        return Err(Error::InvalidInput("need kappa >= 1 and rel_db >= 0".into()));
    }
    Ok((rel_db / kappa, kappa * rel_db))
}

/// Upper bound when `C` is perturbed too.
pub fn atkinson_perturbed(kappa: f64, rel_db: f64, rel_dc: f64) -> Result<f64> {
    if !(kappa >= 1.0) || !(rel_db >= 0.0) || !(rel_dc >= 0.0) {
        return Err(Error::InvalidInput("need kappa >= 1 and nonnegative perturbations".into()));
    }
    let product = kappa * rel_dc;
    if product >= 1.0 {
        return Err(Error::BoundInvalid { product });
    }
    Ok(kappa / (1.0 - product) * (rel_db + rel_dc))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtkinsonReport {
    pub lower: f64,
    pub upper: f64,
    /// `|O^T W sigma_b| / |b~|`.
    pub rel_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub kappa: f64,
    pub atkinson: AtkinsonReport,
    pub projection_distance_frobenius: f64,
    pub rank: usize,
    pub fit: FitResult,
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub rho: DensityMatrix,
    pub rho_v: StateVector8,
    pub observations: ObservationVector,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Copy)]
pub struct ReconstructOptions {
    /// Starting point when the spectra show no usable peak.
    pub fallback: NonlinearParams,
    pub allow_nonstandard: bool,
}

impl Default for ReconstructOptions {
    fn default() -> Self {
        let p = crate::signal::SignalParams::default();
        Self {
            fallback: NonlinearParams {
                gamma1: p.gamma1,
                gamma2: p.gamma2,
                omega_l: p.omega_l,
                phi: 0.0,
            },
            allow_nonstandard: false,
        }
    }
}

/// Full pipeline: CYCLOPS differences, joint fit, linear inversion and
/// projection onto physical states.
///
/// The fitted instrument phase is folded next to `calib.phi` (or 0), which
/// fixes the sign of the oscillation amplitudes.
pub fn reconstruct(
    traces: &TraceSet,
    plan: &MeasurementPlan,
    obs: &ObservableSet,
    calib: &CalibrationRecord,
    options: &ReconstructOptions,
) -> Result<Reconstruction> {
    calib.validate()?;
    let plan = plan.with_zeta(calib.zeta);
    let cm = build_coefficient_matrix(&plan, obs, options.allow_nonstandard)?;
    if traces.entries.len() != plan.entries.len() {
        return Err(Error::MetadataMismatch(format!(
            "trace set has {} pulses, plan has {}",
            traces.entries.len(),
            plan.entries.len()
        )));
    }
    for (e, p) in traces.entries.iter().zip(&plan.entries) {
        if e.base.meta.pulse != p.pulse.tag {
            return Err(Error::MetadataMismatch(format!(
                "trace pulse '{}' does not match plan pulse '{}'",
                e.base.meta.pulse, p.pulse.tag
            )));
        }
    }
    let spec = FitModelSpec::from_combined(traces.combined()?, calib.eta, calib.zeta)?;
    let mut fit = fit_combined(&spec, options.fallback)?;
    fit.fold_phase(calib.phi.unwrap_or(0.0));

    let ov = observations_from_fit(&cm, &fit)?;
    let (c, bt) = normal_equations(&cm, &ov)?;
    let rho_v = solve_state(&c, &bt)?;
    let kappa = condition_number(&c)?;
    let raw = devectorize(&rho_v);
    let rho = project_to_physical(&raw)?;
    let projection_distance_frobenius = (rho.matrix() - raw).norm();

    let db = weighted_transpose(&cm, &ov.sigma_b).norm();
    let rel_db = if bt.norm() > 0.0 { db / bt.norm() } else { 0.0 };
    let (lower, upper) = atkinson_bounds(kappa, rel_db)?;
    Ok(Reconstruction {
        rho,
        rho_v,
        observations: ov,
        diagnostics: Diagnostics {
            kappa,
            atkinson: AtkinsonReport { lower, upper, rel_db },
            projection_distance_frobenius,
            rank: cm.rank,
            fit,
        },
    })
}
