//! Spin-1 state algebra.
//!
//! All matrices are written in the Zeeman basis ordered `m = (-1, 0, +1)`,
//! and the angular-momentum matrices follow the Condon-Shortley phase
//! convention (real, positive matrix elements of `F_+`).

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix3c = Matrix3<Complex64>;

/// Hermiticity tolerance applied when validating density matrices.
pub const HERMITIAN_TOL: f64 = 1e-12;
/// Trace tolerance applied when validating density matrices.
pub const TRACE_TOL: f64 = 1e-12;
/// Smallest eigenvalue accepted as positive semidefinite.
pub const PSD_TOL: f64 = 1e-10;

const C0: Complex64 = Complex64::new(0.0, 0.0);
const C1: Complex64 = Complex64::new(1.0, 0.0);

/// Index of a magnetic sublevel in the `(-1, 0, +1)` basis.
pub const fn level(m: i32) -> usize {
    (m + 1) as usize
}

/// Largest entrywise modulus of `a - a^dag`.
pub fn hermitian_residual(a: &Matrix3c) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            worst = worst.max((a[(i, j)] - a[(j, i)].conj()).norm());
        }
    }
    worst
}

pub(crate) fn hermitize(a: &Matrix3c) -> Matrix3c {
    (a + a.adjoint()).map(|z| z * 0.5)
}

fn is_finite(a: &Matrix3c) -> bool {
    a.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

/// Eigen-decomposition of a Hermitian matrix, eigenvalues ascending.
pub(crate) fn hermitian_eigen(a: &Matrix3c) -> (Vector3<f64>, Matrix3c) {
    let eig = hermitize(a).symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
    let values = Vector3::from_fn(|i, _| eig.eigenvalues[order[i]]);
    let vectors = Matrix3c::from_fn(|r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

fn recompose(values: &Vector3<f64>, vectors: &Matrix3c) -> Matrix3c {
    let d = Matrix3c::from_diagonal(&values.map(|v| Complex64::new(v, 0.0)));
    hermitize(&(vectors * d * vectors.adjoint()))
}

/// A validated qutrit density matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix(Matrix3c);

impl DensityMatrix {
    /// Validates Hermiticity, unit trace and positivity.
    pub fn new(raw: Matrix3c) -> Result<Self> {
        if !is_finite(&raw) {
            return Err(Error::NonFinite);
        }
        let residual = hermitian_residual(&raw);
        if residual > HERMITIAN_TOL {
            return Err(Error::NotHermitian { residual });
        }
        let deviation = (raw.trace() - C1).norm();
        if deviation > TRACE_TOL {
            return Err(Error::TraceNotOne { deviation });
        }
        let (values, _) = hermitian_eigen(&raw);
        if values[0] < -PSD_TOL {
            return Err(Error::NotPsd {
                min_eigenvalue: values[0],
            });
        }
        Ok(Self(raw))
    }

    /// The maximally mixed state `I/3`.
    pub fn maximally_mixed() -> Self {
        Self(Matrix3c::identity().map(|z| z / 3.0))
    }

    /// Pure state `|psi><psi|` from an unnormalised vector.
    pub fn pure(psi: &Vector3<Complex64>) -> Result<Self> {
        let norm = psi.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::InvalidInput("zero state vector".into()));
        }
        let v = psi.unscale(norm);
        Ok(Self(hermitize(&(v * v.adjoint()))))
    }

    pub fn matrix(&self) -> &Matrix3c {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix3c {
        self.0
    }

    /// Entry by magnetic quantum numbers, e.g. `entry(-1, 1)`.
    pub fn entry(&self, m: i32, n: i32) -> Complex64 {
        self.0[(level(m), level(n))]
    }

    pub fn eigenvalues(&self) -> [f64; 3] {
        let (values, _) = hermitian_eigen(&self.0);
        [values[0], values[1], values[2]]
    }

    pub fn purity(&self) -> f64 {
        (self.0 * self.0).trace().re
    }

    pub fn frobenius_distance(&self, other: &DensityMatrix) -> f64 {
        (self.0 - other.0).norm()
    }
}

/// Eight real parameters of a unit-trace Hermitian 3x3 matrix.
///
/// Order: `[rho(-1,-1), Re rho(-1,0), Im rho(-1,0), Re rho(-1,+1), Im rho(-1,+1),
/// rho(+1,+1), Re rho(0,+1), Im rho(0,+1)]`. The population `rho(0,0)` is implied
/// by the trace. Eliminating the `m = 0` population keeps the coordinate metric
/// block diagonal between the vector and the alignment parts of the state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateVector8(pub [f64; 8]);

impl StateVector8 {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl std::ops::Index<usize> for StateVector8 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Matrix basis element `B_k` such that `rho = E(0,0) + sum_k v_k B_k`.
pub(crate) fn coordinate_basis() -> [Matrix3c; 8] {
    let e = |i: usize, j: usize| {
        let mut m = Matrix3c::zeros();
        m[(i, j)] = C1;
        m
    };
    let i = Complex64::i();
    let (lo, mid, hi) = (level(-1), level(0), level(1));
    let sym = |a: usize, b: usize| e(a, b) + e(b, a);
    let asym = |a: usize, b: usize| (e(a, b) - e(b, a)).map(|z| z * i);
    [
        e(lo, lo) - e(mid, mid),
        sym(lo, mid),
        asym(lo, mid),
        sym(lo, hi),
        asym(lo, hi),
        e(hi, hi) - e(mid, mid),
        sym(mid, hi),
        asym(mid, hi),
    ]
}

/// Matrix contributing the constant part of the parametrisation (`|0><0|`).
pub(crate) fn coordinate_origin() -> Matrix3c {
    let mut m = Matrix3c::zeros();
    m[(level(0), level(0))] = C1;
    m
}

pub fn vectorize(rho: &DensityMatrix) -> StateVector8 {
    vectorize_matrix(rho.matrix())
}

/// Reads the eight parameters from any 3x3 matrix (Hermitian part assumed).
pub fn vectorize_matrix(m: &Matrix3c) -> StateVector8 {
    let (lo, mid, hi) = (level(-1), level(0), level(1));
    StateVector8([
        m[(lo, lo)].re,
        m[(lo, mid)].re,
        m[(lo, mid)].im,
        m[(lo, hi)].re,
        m[(lo, hi)].im,
        m[(hi, hi)].re,
        m[(mid, hi)].re,
        m[(mid, hi)].im,
    ])
}

/// Hermitian unit-trace matrix from its parameters. Not necessarily PSD.
pub fn devectorize(v: &StateVector8) -> Matrix3c {
    let (lo, mid, hi) = (level(-1), level(0), level(1));
    let c = Complex64::new;
    let mut m = Matrix3c::zeros();
    m[(lo, lo)] = c(v[0], 0.0);
    m[(hi, hi)] = c(v[5], 0.0);
    m[(mid, mid)] = c(1.0 - v[0] - v[5], 0.0);
    m[(lo, mid)] = c(v[1], v[2]);
    m[(mid, lo)] = c(v[1], -v[2]);
    m[(lo, hi)] = c(v[3], v[4]);
    m[(hi, lo)] = c(v[3], -v[4]);
    m[(mid, hi)] = c(v[6], v[7]);
    m[(hi, mid)] = c(v[6], -v[7]);
    m
}

/// Spin-1 angular momentum matrices `(F_x, F_y, F_z)`.
pub fn spin_matrices() -> [Matrix3c; 3] {
    let s = std::f64::consts::SQRT_2;
    let mut raise = Matrix3c::zeros();
    raise[(level(0), level(-1))] = Complex64::new(s, 0.0);
    raise[(level(1), level(0))] = Complex64::new(s, 0.0);
    let lower = raise.adjoint();
    let fx = (raise + lower).map(|z| z * 0.5);
    let fy = (raise - lower).map(|z| z / Complex64::new(0.0, 2.0));
    let mut fz = Matrix3c::zeros();
    fz[(level(-1), level(-1))] = Complex64::new(-1.0, 0.0);
    fz[(level(1), level(1))] = C1;
    [fx, fy, fz]
}

/// One rotation: unit axis and angle in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation {
    pub axis: [f64; 3],
    pub angle: f64,
}

impl Rotation {
    pub fn about(axis: Axis, angle: f64) -> Self {
        Self {
            axis: axis.unit(),
            angle,
        }
    }
}

/// Cartesian axis label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn unit(self) -> [f64; 3] {
        match self {
            Axis::X => [1.0, 0.0, 0.0],
            Axis::Y => [0.0, 1.0, 0.0],
            Axis::Z => [0.0, 0.0, 1.0],
        }
    }
}

/// A unitary acting on the qutrit, with the rotations it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseUnitary {
    matrix: Matrix3c,
    provenance: Vec<Rotation>,
}

impl PulseUnitary {
    pub fn identity() -> Self {
        Self {
            matrix: Matrix3c::identity(),
            provenance: Vec::new(),
        }
    }

    /// Rotations applied in order (first element acts first).
    pub fn from_rotations(rotations: &[Rotation]) -> Result<Self> {
        rotations
            .iter()
            .try_fold(Self::identity(), |acc, r| {
                Ok(acc.then(&spin1_rotation(r.axis, r.angle)?))
            })
    }

    pub fn matrix(&self) -> &Matrix3c {
        &self.matrix
    }

    pub fn provenance(&self) -> &[Rotation] {
        &self.provenance
    }

    /// `self` followed by `next`, i.e. the matrix `next * self`.
    pub fn then(&self, next: &PulseUnitary) -> PulseUnitary {
        let mut provenance = self.provenance.clone();
        provenance.extend_from_slice(&next.provenance);
        PulseUnitary {
            matrix: next.matrix * self.matrix,
            provenance,
        }
    }

    pub fn inverse(&self) -> PulseUnitary {
        PulseUnitary {
            matrix: self.matrix.adjoint(),
            provenance: self
                .provenance
                .iter()
                .rev()
                .map(|r| Rotation {
                    axis: r.axis,
                    angle: -r.angle,
                })
                .collect(),
        }
    }

    /// Heisenberg-picture conjugation `U^dag A U`.
    pub fn conjugate(&self, a: &Matrix3c) -> Matrix3c {
        self.matrix.adjoint() * a * self.matrix
    }
}

/// `exp(-i angle (n . F))`.
///
/// Uses the closed form valid for any spin-1 generator `S` with `S^3 = S`:
/// `exp(-i a S) = 1 - i sin(a) S + (cos(a) - 1) S^2`.
pub fn spin1_rotation(axis: [f64; 3], angle: f64) -> Result<PulseUnitary> {
    let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    if !((norm - 1.0).abs() <= 1e-9) {
        return Err(Error::NonUnitAxis { norm });
    }
    let [fx, fy, fz] = spin_matrices();
    let s = fx * Complex64::new(axis[0], 0.0)
        + fy * Complex64::new(axis[1], 0.0)
        + fz * Complex64::new(axis[2], 0.0);
    let s2 = s * s;
    let matrix = Matrix3c::identity() - s * Complex64::new(0.0, angle.sin())
        + s2 * Complex64::new(angle.cos() - 1.0, 0.0);
    Ok(PulseUnitary {
        matrix,
        provenance: vec![Rotation { axis, angle }],
    })
}

/// `U rho U^dag`.
pub fn apply_pulse(rho: &DensityMatrix, pulse: &PulseUnitary) -> DensityMatrix {
    let u = pulse.matrix();
    DensityMatrix(hermitize(&(u * rho.matrix() * u.adjoint())))
}

/// Stretched state along an axis with an isotropic admixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StretchedSpec {
    pub axis: Axis,
    pub epsilon: f64,
}

impl StretchedSpec {
    pub fn new(axis: Axis, epsilon: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::InvalidInput(format!(
                "isotropic fraction {epsilon} outside [0, 1]"
            )));
        }
        Ok(Self { axis, epsilon })
    }
}

/// `(1 - eps)|m_axis = +1><m_axis = +1| + eps I/3`.
pub fn stretched_state(spec: &StretchedSpec) -> DensityMatrix {
    use std::f64::consts::FRAC_PI_2;
    let up = Vector3::new(C0, C0, C1);
    let to_axis = match spec.axis {
        Axis::Z => PulseUnitary::identity(),
        Axis::X => spin1_rotation(Axis::Y.unit(), FRAC_PI_2).expect("unit axis"),
        Axis::Y => spin1_rotation(Axis::X.unit(), -FRAC_PI_2).expect("unit axis"),
    };
    let psi = to_axis.matrix() * up;
    let pure = psi * psi.adjoint();
    let eps = spec.epsilon;
    let m = pure.map(|z| z * (1.0 - eps)) + Matrix3c::identity().map(|z| z * (eps / 3.0));
    DensityMatrix(hermitize(&m))
}

/// Ginibre-induced random state, deterministic in `seed`.
pub fn random_state(seed: u64) -> DensityMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Matrix3c::from_fn(|_, _| {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        Complex64::new(re, im)
    });
    let w = g * g.adjoint();
    let tr = w.trace().re;
    DensityMatrix(hermitize(&w.map(|z| z / tr)))
}

fn psd_sqrt(a: &Matrix3c) -> Matrix3c {
    let (values, vectors) = hermitian_eigen(a);
    recompose(&values.map(|v| v.max(0.0).sqrt()), &vectors)
}

/// Uhlmann fidelity in the squared convention, `[Tr sqrt(sqrt(rho) sigma sqrt(rho))]^2`.
pub fn fidelity(rho: &DensityMatrix, sigma: &DensityMatrix) -> f64 {
    let root = psd_sqrt(rho.matrix());
    let inner = root * sigma.matrix() * root;
    let (values, _) = hermitian_eigen(&inner);
    let cutoff = 16.0 * f64::EPSILON * values[2].abs();
    let tr: f64 = values
        .iter()
        .map(|&v| if v > cutoff { v.sqrt() } else { 0.0 })
        .sum();
    (tr * tr).clamp(0.0, 1.0)
}

/// Euclidean projection of `values` onto the probability simplex.
pub fn project_to_simplex(values: &[f64]) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut shift = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - 1.0) / (j + 1) as f64;
        if u - candidate > 0.0 {
            shift = candidate;
        }
    }
    values.iter().map(|&v| (v - shift).max(0.0)).collect()
}

/// Closest (Frobenius) density matrix to a Hermitian unit-trace matrix.
pub fn project_to_physical(h: &Matrix3c) -> Result<DensityMatrix> {
    if !is_finite(h) {
        return Err(Error::NonFinite);
    }
    let residual = hermitian_residual(h);
    if residual > 1e-9 {
        return Err(Error::NotHermitian { residual });
    }
    let deviation = (h.trace() - C1).norm();
    if deviation > 1e-9 {
        return Err(Error::TraceNotOne { deviation });
    }
    let (values, vectors) = hermitian_eigen(h);
    if values[0] >= 0.0 {
        return Ok(DensityMatrix(hermitize(h)));
    }
    let projected = project_to_simplex(values.as_slice());
    let m = recompose(&Vector3::from_column_slice(&projected), &vectors);
    Ok(DensityMatrix(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn diag(a: f64, b: f64, c: f64) -> Matrix3c {
        Matrix3c::from_diagonal(&Vector3::new(a, b, c).map(|v| Complex64::new(v, 0.0)))
    }

    fn expect(rho: &DensityMatrix, a: &Matrix3c) -> f64 {
        (rho.matrix() * a).trace().re
    }

    /// Scaling-and-squaring Taylor series, independent of the closed form.
    fn expm_taylor(a: &Matrix3c) -> Matrix3c {
        let squarings = 8;
        let scaled = a.map(|z| z / f64::from(1u32 << squarings));
        let mut term = Matrix3c::identity();
        let mut sum = Matrix3c::identity();
        for k in 1..=12 {
            term = term * scaled / Complex64::new(k as f64, 0.0);
            sum += term;
        }
        for _ in 0..squarings {
            sum = sum * sum;
        }
        sum
    }

    #[test]
    fn validation_accepts_and_rejects() {
        assert!(DensityMatrix::new(diag(1.0, 1.0, 1.0).map(|z| z / 3.0)).is_ok());
        assert!(DensityMatrix::new(diag(1.0, 0.0, 0.0)).is_ok());
        match DensityMatrix::new(diag(1.1, 0.0, -0.1)) {
            Err(Error::NotPsd { min_eigenvalue }) => assert!((min_eigenvalue + 0.1).abs() < 1e-12),
            other => panic!("expected NotPsd, got {other:?}"),
        }
        assert!(matches!(
            DensityMatrix::new(diag(0.5, 0.0, 0.0)),
            Err(Error::TraceNotOne { .. })
        ));
        let mut m = diag(0.5, 0.5, 0.0);
        m[(0, 1)] = Complex64::new(0.1, 0.0);
        assert!(matches!(
            DensityMatrix::new(m),
            Err(Error::NotHermitian { .. })
        ));
    }

    #[test]
    fn vectorization_examples() {
        let v = vectorize(&DensityMatrix::maximally_mixed());
        let third = 1.0 / 3.0;
        assert_eq!(v.0, [third, 0.0, 0.0, 0.0, 0.0, third, 0.0, 0.0]);
        assert_eq!(devectorize(&StateVector8([0.0; 8])), diag(0.0, 1.0, 0.0));
        for seed in 0..20 {
            let rho = random_state(seed);
            let v = vectorize(&rho);
            let back = vectorize_matrix(&devectorize(&v));
            assert_eq!(v, back);
            assert!((devectorize(&v) - rho.matrix()).norm() < 1e-15);
        }
    }

    #[test]
    fn coordinate_basis_reproduces_devectorize() {
        let rho = random_state(7);
        let v = vectorize(&rho);
        let basis = coordinate_basis();
        let mut m = coordinate_origin();
        for (k, b) in basis.iter().enumerate() {
            m += b * Complex64::new(v[k], 0.0);
        }
        assert!((m - devectorize(&v)).norm() < 1e-15);
    }

    #[test]
    fn rotation_examples() {
        let u = spin1_rotation([0.0, 0.0, 1.0], 0.0).unwrap();
        assert!((u.matrix() - Matrix3c::identity()).norm() < 1e-15);

        let theta = 0.7;
        let u = spin1_rotation([0.0, 0.0, 1.0], theta).unwrap();
        let expected = Matrix3c::from_diagonal(&Vector3::new(
            Complex64::from_polar(1.0, theta),
            C1,
            Complex64::from_polar(1.0, -theta),
        ));
        assert!((u.matrix() - expected).norm() < 1e-15);

        assert!(matches!(
            spin1_rotation([1.0, 1.0, 0.0], 1.0),
            Err(Error::NonUnitAxis { .. })
        ));
    }

    #[test]
    fn rotation_matches_taylor_oracle() {
        let [fx, fy, fz] = spin_matrices();
        for (axis, angle) in [([0.0, 1.0, 0.0], PI), ([0.6, 0.0, 0.8], 2.3), ([0.0, 0.0, 1.0], -1.1)] {
            let gen = fx * Complex64::new(axis[0], 0.0)
                + fy * Complex64::new(axis[1], 0.0)
                + fz * Complex64::new(axis[2], 0.0);
            let oracle = expm_taylor(&gen.map(|z| z * Complex64::new(0.0, -angle)));
            let u = spin1_rotation(axis, angle).unwrap();
            assert!((u.matrix() - oracle).norm() < 1e-12);
        }
        let up = stretched_state(&StretchedSpec::new(Axis::Z, 0.0).unwrap());
        assert!((expect(&up, &fz) - 1.0).abs() < 1e-14);
        let flipped = apply_pulse(&up, &spin1_rotation([0.0, 1.0, 0.0], PI).unwrap());
        assert!((expect(&flipped, &fz) + 1.0).abs() < 1e-14);
    }

    #[test]
    fn spin_matrices_satisfy_commutators() {
        let [fx, fy, fz] = spin_matrices();
        let i = Complex64::i();
        assert!((fx * fy - fy * fx - fz * i).norm() < 1e-14);
        assert!((fy * fz - fz * fy - fx * i).norm() < 1e-14);
        let casimir = fx * fx + fy * fy + fz * fz;
        assert!((casimir - Matrix3c::identity() * Complex64::new(2.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn stretched_examples() {
        let z = stretched_state(&StretchedSpec::new(Axis::Z, 0.0).unwrap());
        assert!((z.matrix() - diag(0.0, 0.0, 1.0)).norm() < 1e-15);
        for axis in [Axis::X, Axis::Y, Axis::Z] {
            let iso = stretched_state(&StretchedSpec::new(axis, 1.0).unwrap());
            assert!(iso.frobenius_distance(&DensityMatrix::maximally_mixed()) < 1e-15);
        }
        let x = stretched_state(&StretchedSpec::new(Axis::X, 0.0).unwrap());
        assert!((x.entry(-1, -1).re - 0.25).abs() < 1e-15);
        assert!((x.entry(0, 0).re - 0.5).abs() < 1e-15);
        assert!((x.entry(1, 1).re - 0.25).abs() < 1e-15);
        assert!((x.entry(-1, 1).norm() - 0.25).abs() < 1e-15);
        let [fx, fy, _] = spin_matrices();
        assert!((expect(&x, &fx) - 1.0).abs() < 1e-14);
        let y = stretched_state(&StretchedSpec::new(Axis::Y, 0.0).unwrap());
        assert!((expect(&y, &fy) - 1.0).abs() < 1e-14);
        assert!(StretchedSpec::new(Axis::X, 1.5).is_err());
    }

    #[test]
    fn random_states_are_valid_and_deterministic() {
        assert_eq!(random_state(42), random_state(42));
        assert_ne!(random_state(42), random_state(43));
        for seed in 0..200 {
            let rho = random_state(seed);
            DensityMatrix::new(*rho.matrix()).unwrap();
        }
    }

    #[test]
    fn fidelity_examples() {
        let rho = random_state(3);
        assert!((fidelity(&rho, &rho) - 1.0).abs() < 1e-12);
        let up = DensityMatrix::new(diag(0.0, 0.0, 1.0)).unwrap();
        let down = DensityMatrix::new(diag(1.0, 0.0, 0.0)).unwrap();
        assert!(fidelity(&up, &down) < 1e-15);
        let mixed = DensityMatrix::maximally_mixed();
        assert!((fidelity(&mixed, &up) - 1.0 / 3.0).abs() < 1e-14);
        assert!((fidelity(&up, &mixed) - 1.0 / 3.0).abs() < 1e-14);
        for seed in 0..50 {
            let a = random_state(seed);
            let b = random_state(seed + 1000);
            assert!((fidelity(&a, &b) - fidelity(&b, &a)).abs() < 1e-10);
        }
    }

    #[test]
    fn projection_examples() {
        let rho = random_state(11);
        let p = project_to_physical(rho.matrix()).unwrap();
        assert_eq!(p.frobenius_distance(&rho), 0.0);

        let p = project_to_physical(&diag(1.2, 0.1, -0.3)).unwrap();
        assert!((p.matrix() - diag(1.0, 0.0, 0.0)).norm() < 1e-15);

        let mut bad = diag(0.5, 0.5, 0.0);
        bad[(0, 1)] = Complex64::new(0.0, 0.3);
        assert!(matches!(
            project_to_physical(&bad),
            Err(Error::NotHermitian { .. })
        ));
    }

    #[test]
    fn simplex_projection_by_hand() {
        assert_eq!(project_to_simplex(&[1.2, 0.1, -0.3]), vec![1.0, 0.0, 0.0]);
        let p = project_to_simplex(&[0.6, 0.6, -0.2]);
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15 && p[2] == 0.0);
        let p = project_to_simplex(&[0.2, 0.3, 0.5]);
        assert_eq!(p, vec![0.2, 0.3, 0.5]);
    }

    #[test]
    fn pulse_composition_and_inverse() {
        let a = spin1_rotation([1.0, 0.0, 0.0], FRAC_PI_2).unwrap();
        let b = spin1_rotation([0.0, 1.0, 0.0], 0.3).unwrap();
        let ab = a.then(&b);
        assert!((ab.matrix() - b.matrix() * a.matrix()).norm() < 1e-15);
        assert_eq!(ab.provenance().len(), 2);
        let rebuilt = PulseUnitary::from_rotations(ab.provenance()).unwrap();
        assert!((rebuilt.matrix() - ab.matrix()).norm() < 1e-15);
        let id = ab.then(&ab.inverse());
        assert!((id.matrix() - Matrix3c::identity()).norm() < 1e-14);
    }
}
