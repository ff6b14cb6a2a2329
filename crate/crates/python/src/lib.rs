//! Python bindings: states, synthesis, reconstruction, calibration and
//! experiment design.

use num_complex::Complex64;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use alkatomo_core::calib::{self, AbsorptionSample, CalibrationRecord, LineshapeParams};
use alkatomo_core::design;
use alkatomo_core::io::{state_from_json, state_to_json, to_json_string};
use alkatomo_core::observables::{default_observables, BetaRows, MeasurementPlan};
use alkatomo_core::qutrit::{self, stretched_state, vectorize, Axis, DensityMatrix, Matrix3c, StretchedSpec};
use alkatomo_core::signal::{self, uniform_grid, SignalParams, SignalTrace, TraceSet};
use alkatomo_core::tomo::{self, build_coefficient_matrix, ReconstructOptions};
use alkatomo_core::Error;

create_exception!(alkatomo, AlkatomoError, PyException);

fn err(e: Error) -> PyErr {
    AlkatomoError::new_err(e.to_string())
}

fn to_rows(m: &Matrix3c) -> Vec<Vec<Complex64>> {
    (0..3).map(|i| (0..3).map(|j| m[(i, j)]).collect()).collect()
}

fn from_rows(rows: &[Vec<Complex64>]) -> PyResult<Matrix3c> {
    if rows.len() != 3 || rows.iter().any(|r| r.len() != 3) {
        return Err(AlkatomoError::new_err("expected a 3x3 nested list"));
    }
    Ok(Matrix3c::from_fn(|i, j| rows[i][j]))
}

fn parse_axis(axis: &str) -> PyResult<Axis> {
    match axis {
        "x" | "X" => Ok(Axis::X),
        "y" | "Y" => Ok(Axis::Y),
        "z" | "Z" => Ok(Axis::Z),
        _ => Err(AlkatomoError::new_err(format!("unknown axis '{axis}'"))),
    }
}

/// Qutrit density matrix in the basis m = -1, 0, +1.
#[pyclass(name = "DensityMatrix", module = "alkatomo", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyDensityMatrix {
    inner: DensityMatrix,
}

#[pymethods]
impl PyDensityMatrix {
    #[new]
    fn new(rows: Vec<Vec<Complex64>>) -> PyResult<Self> {
        Ok(Self {
            inner: DensityMatrix::new(from_rows(&rows)?).map_err(err)?,
        })
    }

    /// Ginibre-induced random state.
    #[staticmethod]
    fn random(seed: u64) -> Self {
        Self {
            inner: qutrit::random_state(seed),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (axis, epsilon = 0.0))]
    fn stretched(axis: &str, epsilon: f64) -> PyResult<Self> {
        let spec = StretchedSpec::new(parse_axis(axis)?, epsilon).map_err(err)?;
        Ok(Self {
            inner: stretched_state(&spec),
        })
    }

    #[staticmethod]
    fn maximally_mixed() -> Self {
        Self {
            inner: DensityMatrix::maximally_mixed(),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: state_from_json(text).map_err(err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        state_to_json(&self.inner).map_err(err)
    }

    fn matrix(&self) -> Vec<Vec<Complex64>> {
        to_rows(self.inner.matrix())
    }

    fn eigenvalues(&self) -> Vec<f64> {
        self.inner.eigenvalues().to_vec()
    }

    fn purity(&self) -> f64 {
        self.inner.purity()
    }

    fn fidelity(&self, other: PyRef<'_, PyDensityMatrix>) -> f64 {
        qutrit::fidelity(&self.inner, &other.inner)
    }

    /// The eight real coordinates used by the linear inversion.
    fn vectorize(&self) -> Vec<f64> {
        vectorize(&self.inner).0.to_vec()
    }

    fn __repr__(&self) -> String {
        let rows: Vec<String> = to_rows(self.inner.matrix())
            .iter()
            .map(|r| {
                let cells: Vec<String> = r.iter().map(|z| format!("{:+.6}{:+.6}j", z.re, z.im)).collect();
                format!("[{}]", cells.join(", "))
            })
            .collect();
        format!("DensityMatrix([{}])", rows.join(", "))
    }
}

/// Signal model parameters; omitted arguments take the library defaults.
#[pyclass(name = "SignalParams", module = "alkatomo", get_all, set_all, skip_from_py_object)]
#[derive(Clone)]
struct PySignalParams {
    eta: f64,
    zeta: f64,
    gamma1: f64,
    gamma2: f64,
    omega_l: f64,
    phi: f64,
    offset: f64,
    detuning_hz: f64,
}

impl From<SignalParams> for PySignalParams {
    fn from(p: SignalParams) -> Self {
        Self {
            eta: p.eta,
            zeta: p.zeta,
            gamma1: p.gamma1,
            gamma2: p.gamma2,
            omega_l: p.omega_l,
            phi: p.phi,
            offset: p.offset,
            detuning_hz: p.detuning_hz,
        }
    }
}

impl PySignalParams {
    fn core(&self) -> SignalParams {
        SignalParams {
            eta: self.eta,
            zeta: self.zeta,
            gamma1: self.gamma1,
            gamma2: self.gamma2,
            omega_l: self.omega_l,
            phi: self.phi,
            offset: self.offset,
            detuning_hz: self.detuning_hz,
        }
    }
}

#[pymethods]
impl PySignalParams {
    #[new]
    #[pyo3(signature = (eta=None, zeta=None, gamma1=None, gamma2=None, omega_l=None, phi=None, offset=None, detuning_hz=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        eta: Option<f64>,
        zeta: Option<f64>,
        gamma1: Option<f64>,
        gamma2: Option<f64>,
        omega_l: Option<f64>,
        phi: Option<f64>,
        offset: Option<f64>,
        detuning_hz: Option<f64>,
    ) -> PyResult<Self> {
        let d = SignalParams::default();
        let p = SignalParams {
            eta: eta.unwrap_or(d.eta),
            zeta: zeta.unwrap_or(d.zeta),
            gamma1: gamma1.unwrap_or(d.gamma1),
            gamma2: gamma2.unwrap_or(d.gamma2),
            omega_l: omega_l.unwrap_or(d.omega_l),
            phi: phi.unwrap_or(d.phi),
            offset: offset.unwrap_or(d.offset),
            detuning_hz: detuning_hz.unwrap_or(d.detuning_hz),
        };
        p.validate().map_err(err)?;
        Ok(p.into())
    }

    fn __repr__(&self) -> String {
        format!(
            "SignalParams(eta={}, zeta={}, gamma1={}, gamma2={}, omega_l={}, phi={}, offset={}, detuning_hz={})",
            self.eta, self.zeta, self.gamma1, self.gamma2, self.omega_l, self.phi, self.offset, self.detuning_hz
        )
    }
}

fn trace_tuple(t: &SignalTrace) -> (String, Option<&'static str>, Vec<f64>, Vec<f64>) {
    (
        t.meta.pulse.clone(),
        t.meta.variant.map(|v| v.tag()),
        t.times.clone(),
        t.values.clone(),
    )
}

/// Raw and phase-cycled traces of the default plan.
#[pyclass(name = "TraceSet", module = "alkatomo", frozen)]
struct PyTraceSet {
    inner: TraceSet,
}

type TraceTuple = (String, Option<&'static str>, Vec<f64>, Vec<f64>);

#[pymethods]
impl PyTraceSet {
    /// `(pulse, variant, times, values)` for every raw acquisition.
    fn raw(&self) -> Vec<TraceTuple> {
        self.inner.raw().map(trace_tuple).collect()
    }

    /// `(pulse, variant, times, values)` for every CYCLOPS difference.
    fn combined(&self) -> PyResult<Vec<TraceTuple>> {
        Ok(self.inner.combined().map_err(err)?.iter().map(trace_tuple).collect())
    }

    fn __len__(&self) -> usize {
        self.inner.entries.len()
    }
}

/// Result of `reconstruct`.
#[pyclass(name = "Reconstruction", module = "alkatomo", frozen)]
struct PyReconstruction {
    #[pyo3(get)]
    rho: PyDensityMatrix,
    #[pyo3(get)]
    kappa: f64,
    #[pyo3(get)]
    atkinson_lower: f64,
    #[pyo3(get)]
    atkinson_upper: f64,
    #[pyo3(get)]
    projection_distance: f64,
    #[pyo3(get)]
    converged: bool,
    #[pyo3(get)]
    observations: Vec<f64>,
    fit_json: String,
}

#[pymethods]
impl PyReconstruction {
    /// Full fit report as JSON.
    fn fit_json(&self) -> String {
        self.fit_json.clone()
    }
}

fn params_or_default(params: Option<PyRef<'_, PySignalParams>>) -> SignalParams {
    params.map_or_else(SignalParams::default, |p| p.core())
}

fn plan_for(zeta: f64, per_combination: bool) -> MeasurementPlan {
    let mut plan = MeasurementPlan::default_with_zeta(zeta);
    if per_combination {
        plan.beta_rows = BetaRows::PerCombination;
    }
    plan
}

/// Synthesizes the default plan for a state.
#[pyfunction]
#[pyo3(signature = (rho, params=None, samples=4096, duration=1.0, relative_sigma=0.0, seed=0))]
fn synthesize(
    rho: PyRef<'_, PyDensityMatrix>,
    params: Option<PyRef<'_, PySignalParams>>,
    samples: usize,
    duration: f64,
    relative_sigma: f64,
    seed: u64,
) -> PyResult<PyTraceSet> {
    let p = params_or_default(params);
    let obs = default_observables();
    let plan = MeasurementPlan::default_with_zeta(p.zeta);
    let times = uniform_grid(samples, duration);
    let sigma = relative_sigma * signal::peak_amplitude(&rho.inner, &plan, &obs, &p, &times).map_err(err)?;
    let inner = signal::synthesize_plan(&rho.inner, &plan, &obs, &p, &times, sigma, seed).map_err(err)?;
    Ok(PyTraceSet { inner })
}

/// Fits the traces and inverts for the state, given calibrated eta and zeta.
#[pyfunction]
#[pyo3(signature = (traces, eta, zeta, phi=None))]
fn reconstruct(traces: PyRef<'_, PyTraceSet>, eta: f64, zeta: f64, phi: Option<f64>) -> PyResult<PyReconstruction> {
    let record = CalibrationRecord {
        eta,
        zeta,
        zeta_stderr: 0.0,
        detuning_hz: 0.0,
        lineshape: LineshapeParams::default(),
        phi,
    };
    let plan = MeasurementPlan::default_with_zeta(zeta);
    let rec = tomo::reconstruct(&traces.inner, &plan, &default_observables(), &record, &ReconstructOptions::default())
        .map_err(err)?;
    let d = rec.diagnostics;
    Ok(PyReconstruction {
        rho: PyDensityMatrix { inner: rec.rho },
        kappa: d.kappa,
        atkinson_lower: d.atkinson.lower,
        atkinson_upper: d.atkinson.upper,
        projection_distance: d.projection_distance_frobenius,
        converged: d.fit.converged,
        observations: rec.observations.b,
        fit_json: to_json_string(&d.fit).map_err(err)?,
    })
}

/// Synthesizes the stretched-state pair and fits zeta and the instrument phase.
#[pyfunction]
#[pyo3(signature = (params=None, epsilon=0.0, samples=4096, duration=1.0, sigma=0.0, seed=0))]
fn calibrate_stretched<'py>(
    py: Python<'py>,
    params: Option<PyRef<'_, PySignalParams>>,
    epsilon: f64,
    samples: usize,
    duration: f64,
    sigma: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let p = params_or_default(params);
    let obs = default_observables();
    let times = uniform_grid(samples, duration);
    let (z, x) = signal::synthesize_stretched_pair(epsilon, &obs, &p, &times, sigma, seed).map_err(err)?;
    let c = calib::zeta_from_stretched(&z, &x, &obs).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("zeta", c.zeta)?;
    d.set_item("zeta_stderr", c.zeta_stderr)?;
    d.set_item("phi", c.phi)?;
    d.set_item("a_z", c.a_z)?;
    d.set_item("a_x", c.a_x)?;
    d.set_item("gamma1", c.gamma1)?;
    d.set_item("gamma2", c.gamma2)?;
    d.set_item("omega_l", c.omega_l)?;
    d.set_item("converged", c.converged)?;
    Ok(d)
}

#[pyfunction]
fn fidelity(a: PyRef<'_, PyDensityMatrix>, b: PyRef<'_, PyDensityMatrix>) -> f64 {
    qutrit::fidelity(&a.inner, &b.inner)
}

/// Nearest density matrix in Frobenius norm to a Hermitian 3x3 matrix.
#[pyfunction]
fn project_to_physical(rows: Vec<Vec<Complex64>>) -> PyResult<PyDensityMatrix> {
    Ok(PyDensityMatrix {
        inner: qutrit::project_to_physical(&from_rows(&rows)?).map_err(err)?,
    })
}

fn lineshape(sigma_d: f64, gamma_l: f64) -> PyResult<LineshapeParams> {
    LineshapeParams::new(sigma_d, gamma_l, 1.0).map_err(err)
}

/// Complex Voigt profile at a detuning in Hz.
#[pyfunction]
#[pyo3(signature = (delta_hz, sigma_d=230e6, gamma_l=3e6))]
fn voigt(delta_hz: f64, sigma_d: f64, gamma_l: f64) -> PyResult<Complex64> {
    Ok(calib::voigt(delta_hz, &lineshape(sigma_d, gamma_l)?))
}

#[pyfunction]
#[pyo3(signature = (delta_hz, sigma_d=230e6, gamma_l=3e6))]
fn zeta_theoretical(delta_hz: f64, sigma_d: f64, gamma_l: f64) -> PyResult<f64> {
    calib::zeta_theoretical(delta_hz, &lineshape(sigma_d, gamma_l)?).map_err(err)
}

/// Eta from probe and far-detuned photodetector voltages `(U1, U2)`.
#[pyfunction]
fn eta_from_absorption(probe: (f64, f64), far: (f64, f64)) -> PyResult<f64> {
    let s = |(u1, u2): (f64, f64)| AbsorptionSample { u1, u2 };
    calib::eta_from_absorption(&s(probe), &s(far)).map_err(err)
}

#[pyfunction]
fn kappa_of_zeta(zeta: f64) -> PyResult<f64> {
    design::kappa_of_zeta(zeta).map_err(err)
}

/// Detuning in `[lo, hi]` Hz with the smallest condition number.
#[pyfunction]
#[pyo3(signature = (lo=design::DEFAULT_BLUE_RANGE.0, hi=design::DEFAULT_BLUE_RANGE.1, sigma_d=230e6, gamma_l=3e6))]
fn minimize_kappa<'py>(py: Python<'py>, lo: f64, hi: f64, sigma_d: f64, gamma_l: f64) -> PyResult<Bound<'py, PyDict>> {
    let o = design::minimize_kappa(&lineshape(sigma_d, gamma_l)?, (lo, hi)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("detuning_hz", o.detuning_hz)?;
    d.set_item("zeta", o.zeta)?;
    d.set_item("kappa", o.kappa)?;
    Ok(d)
}

/// Repetition counts for the default plan minimising the condition number.
#[pyfunction]
#[pyo3(signature = (budget, zeta=0.3, beam_width=design::DEFAULT_BEAM_WIDTH, per_combination=false))]
fn optimize_repetitions<'py>(
    py: Python<'py>,
    budget: usize,
    zeta: f64,
    beam_width: usize,
    per_combination: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let cm = build_coefficient_matrix(&plan_for(zeta, per_combination), &default_observables(), false).map_err(err)?;
    let a = design::optimize_repetitions(&cm, budget, beam_width).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("counts", a.counts)?;
    d.set_item("budget", a.budget)?;
    d.set_item("kappa_trace", a.kappa_trace)?;
    Ok(d)
}

#[pymodule]
fn alkatomo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("AlkatomoError", m.py().get_type::<AlkatomoError>())?;
    m.add_class::<PyDensityMatrix>()?;
    m.add_class::<PySignalParams>()?;
    m.add_class::<PyTraceSet>()?;
    m.add_class::<PyReconstruction>()?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_stretched, m)?)?;
    m.add_function(wrap_pyfunction!(fidelity, m)?)?;
    m.add_function(wrap_pyfunction!(project_to_physical, m)?)?;
    m.add_function(wrap_pyfunction!(voigt, m)?)?;
    m.add_function(wrap_pyfunction!(zeta_theoretical, m)?)?;
    m.add_function(wrap_pyfunction!(eta_from_absorption, m)?)?;
    m.add_function(wrap_pyfunction!(kappa_of_zeta, m)?)?;
    m.add_function(wrap_pyfunction!(minimize_kappa, m)?)?;
    m.add_function(wrap_pyfunction!(optimize_repetitions, m)?)?;
    Ok(())
}
