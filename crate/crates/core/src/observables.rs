//! Measurement operators, CYCLOPS sign identities and the affine map from an
//! observable to a row acting on [`StateVector8`](crate::qutrit::StateVector8).

use std::fmt;
use std::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::serde_matrix;
use crate::qutrit::{
    coordinate_basis, coordinate_origin, hermitian_residual, level, Axis,
    DensityMatrix, Matrix3c, PulseUnitary, Rotation,
};

/// Tolerance used for operator identities and support checks.
pub const OPERATOR_TOL: f64 = 1e-12;

/// The three measured operators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableSet {
    #[serde(rename = "alpha_R", with = "serde_matrix")]
    pub alpha_r: Matrix3c,
    #[serde(rename = "alpha_I", with = "serde_matrix")]
    pub alpha_i: Matrix3c,
    #[serde(with = "serde_matrix")]
    pub beta: Matrix3c,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObservableKind {
    #[serde(rename = "alpha_R")]
    AlphaR,
    #[serde(rename = "alpha_I")]
    AlphaI,
    #[serde(rename = "beta")]
    Beta,
}

impl fmt::Display for ObservableKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ObservableKind::AlphaR => "alpha_R",
            ObservableKind::AlphaI => "alpha_I",
            ObservableKind::Beta => "beta",
        })
    }
}

impl ObservableSet {
    /// Checks Hermiticity and the support of each operator.
    pub fn new(alpha_r: Matrix3c, alpha_i: Matrix3c, beta: Matrix3c) -> Result<Self> {
        let set = Self {
            alpha_r,
            alpha_i,
            beta,
        };
        set.check_invariants()?;
        Ok(set)
    }

    pub fn check_invariants(&self) -> Result<()> {
        for (_, a) in self.iter() {
            let residual = hermitian_residual(a);
            if residual > OPERATOR_TOL {
                return Err(Error::NotHermitian { residual });
            }
        }
        let (lo, hi) = (level(-1), level(1));
        for (kind, a) in [
            (ObservableKind::AlphaR, &self.alpha_r),
            (ObservableKind::AlphaI, &self.alpha_i),
        ] {
            for i in 0..3 {
                for j in 0..3 {
                    let coherence = (i, j) == (lo, hi) || (i, j) == (hi, lo);
                    if !coherence && a[(i, j)].norm() > OPERATOR_TOL {
                        return Err(Error::InvalidInput(format!(
                            "{kind} has support outside the (-1, +1) coherence block"
                        )));
                    }
                }
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                if i != j && self.beta[(i, j)].norm() > OPERATOR_TOL {
                    return Err(Error::InvalidInput("beta is not diagonal".into()));
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, kind: ObservableKind) -> &Matrix3c {
        match kind {
            ObservableKind::AlphaR => &self.alpha_r,
            ObservableKind::AlphaI => &self.alpha_i,
            ObservableKind::Beta => &self.beta,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ObservableKind, &Matrix3c)> {
        [
            ObservableKind::AlphaR,
            ObservableKind::AlphaI,
            ObservableKind::Beta,
        ]
        .into_iter()
        .map(move |k| (k, self.get(k)))
    }

    /// `(<alpha_R>, <alpha_I>, <beta>)` for a state.
    pub fn expectations(&self, rho: &DensityMatrix) -> [f64; 3] {
        let e = |a: &Matrix3c| (rho.matrix() * a).trace().re;
        [e(&self.alpha_r), e(&self.alpha_i), e(&self.beta)]
    }

    /// Parses the observable configuration and enforces the CYCLOPS identities
    /// unless `allow_nonstandard` is set.
    pub fn from_json(text: &str, allow_nonstandard: bool) -> Result<Self> {
        let set: ObservableSet = serde_json::from_str(text)?;
        set.check_invariants()?;
        let report = validate_cyclops(&set);
        if !report.passed() && !allow_nonstandard {
            return Err(Error::CyclopsConventionMismatch(Box::new(report)));
        }
        Ok(set)
    }
}

/// Reference operators.
///
/// `beta = (5/24) diag(-1, 0, +1)`, so the z-stretched state gives `<beta> = 5/24`.
/// The coherence operators act on the `(-1, +1)` block with
/// `<alpha_R> = -Re rho(-1,+1) / 12` and `<alpha_I> = -Im rho(-1,+1) / 12`;
/// the x-stretched state therefore gives `<alpha_R> = -1/48`, and a pi rotation
/// about y reverses `<alpha_I>` and `<beta>` while leaving `<alpha_R>` intact.
pub fn default_observables() -> ObservableSet {
    let (lo, hi) = (level(-1), level(1));
    let mut flip = Matrix3c::zeros();
    flip[(lo, hi)] = Complex64::new(1.0, 0.0);
    flip[(hi, lo)] = Complex64::new(1.0, 0.0);
    let mut skew = Matrix3c::zeros();
    skew[(lo, hi)] = Complex64::new(0.0, 1.0);
    skew[(hi, lo)] = Complex64::new(0.0, -1.0);
    let mut beta = Matrix3c::zeros();
    beta[(lo, lo)] = Complex64::new(-5.0 / 24.0, 0.0);
    beta[(hi, hi)] = Complex64::new(5.0 / 24.0, 0.0);
    ObservableSet {
        alpha_r: flip.map(|z| z * (-1.0 / 24.0)),
        alpha_i: skew.map(|z| z * (-1.0 / 24.0)),
        beta,
    }
}

/// `Tr(rho A)`; the imaginary part is discarded.
pub fn expectation(rho: &DensityMatrix, a: &Matrix3c) -> Result<f64> {
    let residual = hermitian_residual(a);
    if residual > OPERATOR_TOL {
        return Err(Error::NotHermitian { residual });
    }
    Ok((rho.matrix() * a).trace().re)
}

/// `Tr(rho A) = row . rho_V + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineRow {
    pub row: [f64; 8],
    pub offset: f64,
}

impl AffineRow {
    pub fn evaluate(&self, v: &crate::qutrit::StateVector8) -> f64 {
        self.row.iter().zip(v.0.iter()).map(|(a, b)| a * b).sum::<f64>() + self.offset
    }
}

/// Row for the observable `scale * U^dag A U`.
pub fn rotated_row(a: &Matrix3c, pulse: &PulseUnitary, scale: f64) -> AffineRow {
    let rotated = pulse.conjugate(a).map(|z| z * scale);
    let basis = coordinate_basis();
    let mut row = [0.0; 8];
    for (r, b) in row.iter_mut().zip(basis.iter()) {
        *r = (b * rotated).trace().re;
    }
    let offset = (coordinate_origin() * rotated).trace().re;
    AffineRow { row, offset }
}

/// Phase-cycling transform applied right before probing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CyclopsVariant {
    /// pi about y.
    Y,
    /// pi/2 about z, then pi about y.
    ZY,
}

impl CyclopsVariant {
    pub const ALL: [CyclopsVariant; 2] = [CyclopsVariant::Y, CyclopsVariant::ZY];

    pub fn unitary(self) -> PulseUnitary {
        PulseUnitary::from_rotations(&self.rotations()).expect("unit axes")
    }

    pub fn rotations(self) -> Vec<Rotation> {
        match self {
            CyclopsVariant::Y => vec![Rotation::about(Axis::Y, PI)],
            CyclopsVariant::ZY => vec![
                Rotation::about(Axis::Z, FRAC_PI_2),
                Rotation::about(Axis::Y, PI),
            ],
        }
    }

    /// Expected sign of `U^dag A U` relative to `A`.
    pub fn expected_sign(self, kind: ObservableKind) -> f64 {
        match (self, kind) {
            (CyclopsVariant::Y, ObservableKind::AlphaR) => 1.0,
            (CyclopsVariant::Y, ObservableKind::AlphaI) => -1.0,
            (CyclopsVariant::ZY, ObservableKind::AlphaR) => -1.0,
            (CyclopsVariant::ZY, ObservableKind::AlphaI) => 1.0,
            (_, ObservableKind::Beta) => -1.0,
        }
    }

    /// Coherence observable surviving in the difference trace.
    pub fn surviving(self) -> ObservableKind {
        match self {
            CyclopsVariant::Y => ObservableKind::AlphaI,
            CyclopsVariant::ZY => ObservableKind::AlphaR,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            CyclopsVariant::Y => "Y",
            CyclopsVariant::ZY => "ZY",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CyclopsCheck {
    pub variant: CyclopsVariant,
    pub observable: ObservableKind,
    pub expected_sign: f64,
    pub residual: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CyclopsReport {
    pub checks: Vec<CyclopsCheck>,
}

impl CyclopsReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CyclopsCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for CyclopsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{:>2}: U^dag {} U = {:+} {}  residual {:.3e}  {}",
                c.variant.tag(),
                c.observable,
                c.expected_sign,
                c.observable,
                c.residual,
                if c.passed { "ok" } else { "VIOLATED" }
            )?;
        }
        Ok(())
    }
}

/// Checks the six sign identities the CYCLOPS combination relies on.
pub fn validate_cyclops(obs: &ObservableSet) -> CyclopsReport {
    let mut checks = Vec::with_capacity(6);
    for variant in CyclopsVariant::ALL {
        let u = variant.unitary();
        for (kind, a) in obs.iter() {
            let sign = variant.expected_sign(kind);
            let diff = u.conjugate(a) - a.map(|z| z * sign);
            let residual = diff.iter().map(|z| z.norm()).fold(0.0, f64::max);
            checks.push(CyclopsCheck {
                variant,
                observable: kind,
                expected_sign: sign,
                residual,
                passed: residual <= OPERATOR_TOL,
            });
        }
    }
    CyclopsReport { checks }
}

/// A named control pulse built from rotations applied in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPulse {
    pub tag: String,
    pub rotations: Vec<Rotation>,
}

impl ControlPulse {
    pub fn new(tag: impl Into<String>, rotations: Vec<Rotation>) -> Self {
        Self {
            tag: tag.into(),
            rotations,
        }
    }

    pub fn unitary(&self) -> Result<PulseUnitary> {
        PulseUnitary::from_rotations(&self.rotations)
    }
}

/// How the beta observable enters the coefficient matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BetaRows {
    /// One row per control pulse; the Y and ZY estimates are averaged.
    #[default]
    Merged,
    /// One row per CYCLOPS combination.
    PerCombination,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub pulse: ControlPulse,
    pub repetitions: u32,
}

/// Control pulses to probe with. Every entry implies three acquisitions:
/// the bare signal and the Y and ZY phase-cycled repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementPlan {
    pub entries: Vec<PlanEntry>,
    pub zeta: f64,
    #[serde(default)]
    pub beta_rows: BetaRows,
}

impl MeasurementPlan {
    pub fn new(entries: Vec<PlanEntry>, zeta: f64, beta_rows: BetaRows) -> Result<Self> {
        let plan = Self {
            entries,
            zeta,
            beta_rows,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Identity, pi/2 about x and pi/2 about y, one repetition each.
    pub fn default_with_zeta(zeta: f64) -> Self {
        let entry = |tag: &str, rotations: Vec<Rotation>| PlanEntry {
            pulse: ControlPulse::new(tag, rotations),
            repetitions: 1,
        };
        Self {
            entries: vec![
                entry("identity", vec![]),
                entry("x90", vec![Rotation::about(Axis::X, FRAC_PI_2)]),
                entry("y90", vec![Rotation::about(Axis::Y, FRAC_PI_2)]),
            ],
            zeta,
            beta_rows: BetaRows::Merged,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::InvalidInput("measurement plan has no entries".into()));
        }
        if !self.zeta.is_finite() {
            return Err(Error::InvalidInput("zeta must be finite".into()));
        }
        for (i, e) in self.entries.iter().enumerate() {
            if e.repetitions == 0 {
                return Err(Error::InvalidInput(format!(
                    "plan entry '{}' has zero repetitions",
                    e.pulse.tag
                )));
            }
            if self.entries[..i].iter().any(|o| o.pulse.tag == e.pulse.tag) {
                return Err(Error::InvalidInput(format!(
                    "duplicate pulse tag '{}'",
                    e.pulse.tag
                )));
            }
            e.pulse.unitary()?;
        }
        Ok(())
    }

    pub fn with_zeta(&self, zeta: f64) -> Self {
        Self {
            zeta,
            ..self.clone()
        }
    }

    /// Number of coefficient-matrix rows this plan produces.
    pub fn row_count(&self) -> usize {
        let per_pulse = match self.beta_rows {
            BetaRows::Merged => 3,
            BetaRows::PerCombination => 4,
        };
        per_pulse * self.entries.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qutrit::{random_state, stretched_state, vectorize, StretchedSpec, spin1_rotation};

    fn diag(a: f64, b: f64, c: f64) -> Matrix3c {
        let mut m = Matrix3c::zeros();
        m[(0, 0)] = Complex64::new(a, 0.0);
        m[(1, 1)] = Complex64::new(b, 0.0);
        m[(2, 2)] = Complex64::new(c, 0.0);
        m
    }

    #[test]
    fn default_set_is_valid() {
        let obs = default_observables();
        obs.check_invariants().unwrap();
    }

    #[test]
    fn stretched_amplitudes() {
        let obs = default_observables();
        let z = stretched_state(&StretchedSpec::new(Axis::Z, 0.0).unwrap());
        let [_, _, b] = obs.expectations(&z);
        assert!((b - 5.0 / 24.0).abs() < 1e-15);

        let x = stretched_state(&StretchedSpec::new(Axis::X, 0.0).unwrap());
        let [ar, ai, b] = obs.expectations(&x);
        assert!((ar + 1.0 / 48.0).abs() < 1e-15);
        assert!(ai.abs() < 1e-15);
        assert!(b.abs() < 1e-15);

        let half = stretched_state(&StretchedSpec::new(Axis::Z, 0.5).unwrap());
        assert!((obs.expectations(&half)[2] - 0.5 * 5.0 / 24.0).abs() < 1e-15);

        let mixed = DensityMatrix::maximally_mixed();
        for e in obs.expectations(&mixed) {
            assert!(e.abs() < 1e-16);
        }
    }

    #[test]
    fn expectation_examples() {
        let obs = default_observables();
        let rho = random_state(5);
        assert!((expectation(&rho, &Matrix3c::identity()).unwrap() - 1.0).abs() < 1e-14);
        let down = DensityMatrix::new(diag(1.0, 0.0, 0.0)).unwrap();
        assert!((expectation(&down, &obs.beta).unwrap() + 5.0 / 24.0).abs() < 1e-15);
        // real coherence: only alpha_R sees it
        let x = stretched_state(&StretchedSpec::new(Axis::X, 0.0).unwrap());
        assert!(expectation(&x, &obs.alpha_i).unwrap().abs() < 1e-16);
        let mut nh = Matrix3c::zeros();
        nh[(0, 1)] = Complex64::new(1.0, 0.0);
        assert!(matches!(
            expectation(&rho, &nh),
            Err(Error::NotHermitian { .. })
        ));
    }

    #[test]
    fn rotated_row_examples() {
        let obs = default_observables();
        let id = PulseUnitary::identity();
        let zeta = 0.3;
        let r = rotated_row(&obs.beta, &id, zeta);
        for (k, v) in r.row.iter().enumerate() {
            if k == 0 || k == 5 {
                assert!(v.abs() > 0.0);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
        assert!((r.row[0] + zeta * 5.0 / 24.0).abs() < 1e-16);
        assert!((r.row[5] - zeta * 5.0 / 24.0).abs() < 1e-16);
        // beta has no weight on m = 0, so eliminating rho(0,0) leaves no offset
        assert_eq!(r.offset, 0.0);

        let r = rotated_row(&obs.alpha_r, &id, 1.0);
        assert_eq!(r.row.iter().filter(|v| **v != 0.0).count(), 1);
        assert!((r.row[3] + 1.0 / 12.0).abs() < 1e-16);
        let r = rotated_row(&obs.alpha_i, &id, 1.0);
        assert_eq!(r.row.iter().filter(|v| **v != 0.0).count(), 1);
        assert!((r.row[4] + 1.0 / 12.0).abs() < 1e-16);

        let r = rotated_row(&obs.alpha_r, &spin1_rotation([0.0, 1.0, 0.0], 0.4).unwrap(), 0.0);
        assert!(r.row.iter().all(|v| *v == 0.0) && r.offset == 0.0);

        // identity observable is the pure offset 1
        let r = rotated_row(&Matrix3c::identity(), &id, 1.0);
        assert!(r.row.iter().all(|v| v.abs() < 1e-16));
        assert!((r.offset - 1.0).abs() < 1e-16);
    }

    #[test]
    fn rotated_row_reproduces_expectation() {
        let obs = default_observables();
        for seed in 0..100 {
            let rho = random_state(seed);
            let u = spin1_rotation([0.0, 0.6, 0.8], 0.1 * seed as f64).unwrap();
            for (_, a) in obs.iter() {
                let r = rotated_row(a, &u, 0.7);
                let direct = expectation(&rho, &u.conjugate(a).map(|z| z * 0.7)).unwrap();
                assert!((r.evaluate(&vectorize(&rho)) - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cyclops_identities_hold_for_defaults() {
        let report = validate_cyclops(&default_observables());
        assert_eq!(report.checks.len(), 6);
        assert!(report.passed(), "{report}");
        for c in &report.checks {
            assert!(c.residual <= 1e-15);
        }
    }

    #[test]
    fn cyclops_detects_even_beta() {
        let mut obs = default_observables();
        obs.beta = diag(1.0, -2.0, 1.0);
        let report = validate_cyclops(&obs);
        assert!(!report.passed());
        assert!(report.failures().any(|c| c.variant == CyclopsVariant::Y
            && c.observable == ObservableKind::Beta));
    }

    #[test]
    fn cyclops_vacuous_for_zero_operators() {
        let zero = ObservableSet {
            alpha_r: Matrix3c::zeros(),
            alpha_i: Matrix3c::zeros(),
            beta: Matrix3c::zeros(),
        };
        assert!(validate_cyclops(&zero).passed());
    }

    #[test]
    fn spec_phase_convention_fails_the_identities() {
        // The alternative phase (alpha_R <-> alpha_I roles swapped) is rejected.
        let d = default_observables();
        let swapped = ObservableSet {
            alpha_r: d.alpha_i.map(|z| -z),
            alpha_i: d.alpha_r,
            beta: d.beta,
        };
        swapped.check_invariants().unwrap();
        let report = validate_cyclops(&swapped);
        assert_eq!(report.failures().count(), 4);
        let json = serde_json::to_string(&swapped).unwrap();
        assert!(matches!(
            ObservableSet::from_json(&json, false),
            Err(Error::CyclopsConventionMismatch(_))
        ));
        assert!(ObservableSet::from_json(&json, true).is_ok());
    }

    #[test]
    fn support_violations_are_rejected() {
        let d = default_observables();
        assert!(ObservableSet::new(d.alpha_r, d.alpha_i, Matrix3c::identity()).is_ok());
        let mut off = Matrix3c::zeros();
        off[(0, 1)] = Complex64::new(1.0, 0.0);
        off[(1, 0)] = Complex64::new(1.0, 0.0);
        assert!(ObservableSet::new(d.alpha_r, d.alpha_i, off).is_err());
        assert!(ObservableSet::new(off, d.alpha_i, d.beta).is_err());
    }

    #[test]
    fn default_plan_shape() {
        let plan = MeasurementPlan::default_with_zeta(0.3);
        plan.validate().unwrap();
        assert_eq!(plan.row_count(), 9);
        let per = MeasurementPlan {
            beta_rows: BetaRows::PerCombination,
            ..plan.clone()
        };
        assert_eq!(per.row_count(), 12);
        let mut bad = plan.clone();
        bad.entries[1].repetitions = 0;
        assert!(bad.validate().is_err());
        let mut dup = plan;
        dup.entries[1].pulse.tag = "identity".into();
        assert!(dup.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn rotated_row_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, angle in -3.0f64..3.0, s in -1.0f64..1.0) {
                let obs = default_observables();
                let u = spin1_rotation([0.0, 0.0, 1.0], angle).unwrap()
                    .then(&spin1_rotation([1.0, 0.0, 0.0], 0.5 * angle).unwrap());
                let combo = obs.alpha_r.map(|z| z * a) + obs.beta.map(|z| z * b);
                let lhs = rotated_row(&combo, &u, s);
                let ra = rotated_row(&obs.alpha_r, &u, s);
                let rb = rotated_row(&obs.beta, &u, s);
                for k in 0..8 {
                    prop_assert!((lhs.row[k] - (a * ra.row[k] + b * rb.row[k])).abs() < 1e-14);
                }
                prop_assert!((lhs.offset - (a * ra.offset + b * rb.offset)).abs() < 1e-14);
            }
        }
    }
}
