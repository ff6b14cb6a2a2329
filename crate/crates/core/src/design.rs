//! Conditioning of the normal matrix and experiment design: the analytic
//! spectrum, kappa versus zeta and detuning, and repetition weighting.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::calib::{zeta_theoretical, LineshapeParams};
use crate::error::{Error, Result};
use crate::tomo::{CoefficientMatrix, SINGULAR_TOL};

/// Blue-detuned search window, Hz.
pub const DEFAULT_BLUE_RANGE: (f64, f64) = (50e6, 400e6);
/// Detuning grid spacing of `minimize_kappa`, Hz.
pub const SCAN_RESOLUTION_HZ: f64 = 1e3;
/// Default beam width of `optimize_repetitions`.
pub const DEFAULT_BEAM_WIDTH: usize = 8;

/// Eigenvalues of `C` for the reference configuration, ascending.
pub fn analytic_spectrum(zeta: f64) -> [f64; 8] {
    let z2 = zeta * zeta;
    let mut v = [
        1.0 / 100.0,
        1.0 / 150.0,
        1.0 / 225.0,
        1.0 / 225.0,
        1.0 / 225.0,
        z2 / 18.0,
        z2 / 9.0,
        z2 / 9.0,
    ];
    v.sort_by(f64::total_cmp);
    v
}

pub fn kappa_of_zeta(zeta: f64) -> Result<f64> {
    let s = analytic_spectrum(zeta);
    if !(s[0] > 0.0) || !zeta.is_finite() {
        return Err(Error::SingularSystem {
            min_singular_value: s[0],
            max_singular_value: s[7],
        });
    }
    Ok(s[7] / s[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaOptimum {
    pub detuning_hz: f64,
    pub zeta: f64,
    pub kappa: f64,
}

fn kappa_at(delta: f64, lp: &LineshapeParams) -> f64 {
    zeta_theoretical(delta, lp)
        .and_then(kappa_of_zeta)
        .unwrap_or(f64::INFINITY)
}

/// Detuning in `[lo, hi]` minimising `kappa(zeta_theoretical(delta))`: a
/// 1 kHz grid scan refined by golden-section search.
pub fn minimize_kappa(lp: &LineshapeParams, range: (f64, f64)) -> Result<KappaOptimum> {
    lp.validate()?;
    let (lo, hi) = range;
    if !(lo.is_finite() && hi.is_finite()) || lo > hi {
        return Err(Error::EmptyRange);
    }
    let steps = ((hi - lo) / SCAN_RESOLUTION_HZ).ceil() as usize;
    let at = |i: usize| if i >= steps { hi } else { lo + i as f64 * SCAN_RESOLUTION_HZ };
    let mut best = (lo, kappa_at(lo, lp));
    for i in 1..=steps {
        let d = at(i);
        let k = kappa_at(d, lp);
        if k < best.1 {
            best = (d, k);
        }
    }
    // Golden section on the bracketing cells.
    let (mut a, mut b) = (
        (best.0 - SCAN_RESOLUTION_HZ).max(lo),
        (best.0 + SCAN_RESOLUTION_HZ).min(hi),
    );
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (kappa_at(c, lp), kappa_at(d, lp));
    for _ in 0..80 {
        if b - a <= 1e-9 * b.abs().max(1.0) {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = kappa_at(c, lp);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = kappa_at(d, lp);
        }
    }
    for (x, fx) in [(c, fc), (d, fd)] {
        if fx < best.1 {
            best = (x, fx);
        }
    }
    if !best.1.is_finite() {
        return Err(Error::SingularSystem {
            min_singular_value: 0.0,
            max_singular_value: 0.0,
        });
    }
    Ok(KappaOptimum {
        detuning_hz: best.0,
        zeta: zeta_theoretical(best.0, lp)?,
        kappa: best.1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub detuning_hz: f64,
    pub zeta: f64,
    pub kappa: f64,
}

/// `points` evenly spaced detunings over `[lo, hi]`; kappa is infinite
/// where `zeta = 0`.
pub fn condition_scan(lp: &LineshapeParams, range: (f64, f64), points: usize) -> Result<Vec<ScanRow>> {
    lp.validate()?;
    let (lo, hi) = range;
    if !(lo.is_finite() && hi.is_finite()) || lo > hi || points == 0 {
        return Err(Error::EmptyRange);
    }
    (0..points)
        .map(|i| {
            let d = if points == 1 {
                lo
            } else {
                lo + (hi - lo) * i as f64 / (points - 1) as f64
            };
            let zeta = zeta_theoretical(d, lp)?;
            Ok(ScanRow {
                detuning_hz: d,
                zeta,
                kappa: kappa_of_zeta(zeta).unwrap_or(f64::INFINITY),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Eigenvalues of `O^T O`, ascending.
    pub eigenvalues: Vec<f64>,
    pub analytic: Vec<f64>,
    /// Least-squares scale in log space, `eigenvalues ~ scale * analytic`.
    pub scale: f64,
    pub max_relative_deviation: f64,
    pub kappa_matrix: f64,
    pub kappa_analytic: f64,
}

/// Compares the unit-weight spectrum of `cm` with `analytic_spectrum(zeta)`
/// up to one global scale.
pub fn kappa_from_matrix_vs_analytic(cm: &CoefficientMatrix, zeta: f64) -> SpectrumReport {
    let c = cm.normal_matrix(&vec![1; cm.rows()]);
    let mut eig: Vec<f64> = SymmetricEigen::new(c).eigenvalues.iter().copied().collect();
    eig.sort_by(f64::total_cmp);
    let analytic = analytic_spectrum(zeta).to_vec();
    let positive = eig.iter().chain(&analytic).all(|v| *v > 0.0);
    let (scale, dev) = if positive {
        let log_scale = eig
            .iter()
            .zip(&analytic)
            .map(|(e, a)| e.ln() - a.ln())
            .sum::<f64>()
            / 8.0;
        let s = log_scale.exp();
        let dev = eig
            .iter()
            .zip(&analytic)
            .map(|(e, a)| ((e - s * a) / (s * a)).abs())
            .fold(0.0, f64::max);
        (s, dev)
    } else {
        (f64::NAN, f64::INFINITY)
    };
    SpectrumReport {
        kappa_matrix: if eig[0] > 0.0 { eig[7] / eig[0] } else { f64::INFINITY },
        kappa_analytic: kappa_of_zeta(zeta).unwrap_or(f64::INFINITY),
        eigenvalues: eig,
        analytic,
        scale,
        max_relative_deviation: dev,
    }
}

/// `kappa(O^T W O)` for any `M x n` matrix `O`, infinite when singular.
pub fn weighted_kappa(o: &DMatrix<f64>, counts: &[u32]) -> f64 {
    let mut w = o.clone();
    for (i, c) in counts.iter().enumerate() {
        w.row_mut(i).scale_mut(*c as f64);
    }
    let e = SymmetricEigen::new(o.transpose() * w).eigenvalues;
    let (lo, hi) = (e.min(), e.max());
    if lo > SINGULAR_TOL * hi {
        hi / lo
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionAssignment {
    pub counts: Vec<u32>,
    /// `sum(counts)`.
    pub budget: u32,
    /// Entry `n`: lowest kappa found with at most `rows + n` repetitions.
    pub kappa_trace: Vec<f64>,
}

/// Repetition counts (each >= 1, total <= `budget`) minimising kappa.
///
/// Starts from one repetition per row and adds one repetition at a time,
/// keeping the `beam_width` best assignments per total (ties broken by
/// lexicographic order of the counts). `beam_width = 1` is plain greedy.
pub fn optimize_repetitions(
    cm: &CoefficientMatrix,
    budget: usize,
    beam_width: usize,
) -> Result<RepetitionAssignment> {
    optimize_repetitions_matrix(&cm.o, budget, beam_width)
}

/// `optimize_repetitions` on a bare `M x n` matrix.
pub fn optimize_repetitions_matrix(
    o: &DMatrix<f64>,
    budget: usize,
    beam_width: usize,
) -> Result<RepetitionAssignment> {
    let m = o.nrows();
    if budget < m {
        return Err(Error::BudgetTooSmall { budget, rows: m });
    }
    if beam_width == 0 {
        return Err(Error::InvalidInput("beam width must be positive".into()));
    }
    let start = vec![1u32; m];
    let k0 = weighted_kappa(o, &start);
    if !k0.is_finite() {
        return Err(Error::SingularSystem {
            min_singular_value: 0.0,
            max_singular_value: 0.0,
        });
    }
    let mut best = (k0, start.clone());
    let mut trace = vec![k0];
    let mut beam = vec![(k0, start)];
    for _ in m..budget {
        let mut seen = BTreeSet::new();
        let mut next: Vec<(f64, Vec<u32>)> = Vec::new();
        for (_, counts) in &beam {
            for row in 0..m {
                let mut c = counts.clone();
                c[row] += 1;
                if seen.insert(c.clone()) {
                    next.push((weighted_kappa(o, &c), c));
                }
            }
        }
        next.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        next.truncate(beam_width);
        if next[0].0 < best.0 {
            best = next[0].clone();
        }
        trace.push(best.0);
        beam = next;
    }
    Ok(RepetitionAssignment {
        budget: best.1.iter().sum(),
        counts: best.1,
        kappa_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observables::{default_observables, MeasurementPlan};
    use crate::tomo::build_coefficient_matrix;

    #[test]
    fn spectrum_examples() {
        let s = analytic_spectrum(0.3);
        let expected = [1.0 / 225.0, 1.0 / 225.0, 1.0 / 225.0, 0.005, 1.0 / 150.0, 0.01, 0.01, 0.01];
        for (a, b) in s.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(analytic_spectrum(0.0).iter().filter(|v| **v == 0.0).count(), 3);
        assert_eq!(analytic_spectrum(-0.7), analytic_spectrum(0.7));
    }

    #[test]
    fn kappa_examples() {
        assert!((kappa_of_zeta(0.09f64.sqrt()).unwrap() - 2.25).abs() < 1e-12);
        assert!((kappa_of_zeta(0.08f64.sqrt()).unwrap() - 2.25).abs() < 1e-12);
        assert!((kappa_of_zeta(0.2).unwrap() - 4.5).abs() < 1e-12);
        assert!(matches!(kappa_of_zeta(0.0), Err(Error::SingularSystem { .. })));
    }

    #[test]
    fn minimize_kappa_examples() {
        let lp = LineshapeParams::default();
        let lo = crate::calib::detuning_for_zeta(0.1, &lp).unwrap();
        let hi = crate::calib::detuning_for_zeta(0.6, &lp).unwrap();
        let opt = minimize_kappa(&lp, (lo, hi)).unwrap();
        assert!((opt.kappa - 2.25).abs() < 1e-9);
        assert!(opt.zeta >= 0.2828 && opt.zeta <= 0.3001, "{opt:?}");

        let edge = crate::calib::detuning_for_zeta(0.05, &lp).unwrap();
        let low = minimize_kappa(&lp, (edge / 2.0, edge)).unwrap();
        assert!(low.kappa > 2.25);
        assert!((low.detuning_hz - edge).abs() < 1.0);

        let single = minimize_kappa(&lp, (80e6, 80e6)).unwrap();
        assert_eq!(single.detuning_hz, 80e6);
        assert!(matches!(minimize_kappa(&lp, (2.0, 1.0)), Err(Error::EmptyRange)));
    }

    #[test]
    fn report_is_scale_and_order_invariant() {
        let obs = default_observables();
        let cm = build_coefficient_matrix(&MeasurementPlan::default_with_zeta(0.3), &obs, false).unwrap();
        let r = kappa_from_matrix_vs_analytic(&cm, 0.3);
        assert!(r.max_relative_deviation < 1e-9, "{r:?}");
        let mut scaled = cm.clone();
        scaled.o *= 3.0;
        let rs = kappa_from_matrix_vs_analytic(&scaled, 0.3);
        assert!((rs.max_relative_deviation - r.max_relative_deviation).abs() < 1e-9);
        let mut shuffled = cm.clone();
        shuffled.o.swap_rows(0, 8);
        shuffled.o.swap_rows(2, 4);
        let rp = kappa_from_matrix_vs_analytic(&shuffled, 0.3);
        assert!((rp.max_relative_deviation - r.max_relative_deviation).abs() < 1e-9);
    }

    #[test]
    fn toy_diagonal_reaches_one() {
        let o = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let r = optimize_repetitions_matrix(&o, 5, 1).unwrap();
        assert_eq!(r.counts, vec![1, 4]);
        assert_eq!(r.budget, 5);
        assert!((r.kappa_trace.last().unwrap() - 1.0).abs() < 1e-12);
        assert!(r.kappa_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn budget_checks() {
        let obs = default_observables();
        let cm = build_coefficient_matrix(&MeasurementPlan::default_with_zeta(0.3), &obs, false).unwrap();
        assert!(matches!(optimize_repetitions(&cm, 5, 1), Err(Error::BudgetTooSmall { .. })));
        let r = optimize_repetitions(&cm, 9, 1).unwrap();
        assert_eq!(r.counts, vec![1; 9]);
        assert!((r.kappa_trace[0] - weighted_kappa(&cm.o, &[1; 9])).abs() < 1e-12);
    }
}
