use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use alkatomo_core::calib::{
    absorption_for_eta, eta_from_absorption, zeta_from_stretched, CalibrationRecord,
    StretchedCalibration,
};
use alkatomo_core::config::{Provenance, RunConfig};
use alkatomo_core::design::{condition_scan as scan, minimize_kappa, optimize_repetitions, KappaOptimum};
use alkatomo_core::fitting::{fit_combined, FitModelSpec, FitResult, NonlinearParams};
use alkatomo_core::io::{read_json, read_state, serde_matrix, state_to_json, to_json_string, write_atomic, BASIS_LABEL};
use alkatomo_core::observables::MeasurementPlan;
use alkatomo_core::qutrit::{fidelity, random_state, stretched_state, Axis, DensityMatrix, Matrix3c, StretchedSpec};
use alkatomo_core::signal::{peak_amplitude, split_seed, synthesize_plan, synthesize_stretched_pair, SignalParams};
use alkatomo_core::tomo::{build_coefficient_matrix, reconstruct as run_reconstruct, AtkinsonReport, ObservationVector, RowLabel, ReconstructOptions};
use alkatomo_core::Error;

use crate::traceset::{
    load_manifest, load_trace, load_trace_set, trace_csv, trace_file_name, AbsorptionFile,
    CalibrationFiles, Manifest, MANIFEST,
};
use crate::{CliError, GlobalArgs, Preset};

type Result<T> = std::result::Result<T, CliError>;

/// Noise stream of the calibration traces, disjoint from the plan traces.
const CALIBRATION_STREAM: u64 = 1 << 32;
/// Isotropic fraction of the `mixed` preset.
const MIXED_EPSILON: f64 = 0.5;

fn load_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.master_seed = seed;
    }
    Ok(cfg)
}

/// Writes every file or none: collisions are checked before the first write.
fn commit(g: &GlobalArgs, files: Vec<(PathBuf, Vec<u8>)>) -> Result<()> {
    let files: Vec<_> = files.into_iter().map(|(p, c)| (g.out.join(p), c)).collect();
    if !g.force {
        if let Some((p, _)) = files.iter().find(|(p, _)| p.exists()) {
            return Err(CliError::Exists(p.clone()));
        }
    }
    for (path, contents) in &files {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|source| Error::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        write_atomic(path, contents)?;
    }
    Ok(())
}

fn json<T: Serialize>(name: &str, value: &T) -> Result<(PathBuf, Vec<u8>)> {
    Ok((PathBuf::from(name), to_json_string(value)?.into_bytes()))
}

fn fallback(params: &SignalParams) -> NonlinearParams {
    NonlinearParams {
        gamma1: params.gamma1,
        gamma2: params.gamma2,
        omega_l: params.omega_l,
        phi: 0.0,
    }
}

fn check_plan(cfg: &MeasurementPlan, manifest: &MeasurementPlan) -> Result<()> {
    let tags = |p: &MeasurementPlan| p.entries.iter().map(|e| e.pulse.tag.clone()).collect::<Vec<_>>();
    let same = cfg.entries.len() == manifest.entries.len()
        && cfg
            .entries
            .iter()
            .zip(&manifest.entries)
            .all(|(a, b)| a.pulse == b.pulse);
    if !same {
        return Err(Error::MetadataMismatch(format!(
            "configured plan {:?} differs from the trace-set plan {:?}",
            tags(cfg),
            tags(manifest)
        ))
        .into());
    }
    Ok(())
}

fn preset_state(preset: Preset, seed: u64) -> Result<DensityMatrix> {
    let stretched = |axis, eps| -> Result<DensityMatrix> { Ok(stretched_state(&StretchedSpec::new(axis, eps)?)) };
    match preset {
        Preset::Random => Ok(random_state(seed)),
        Preset::StretchedX => stretched(Axis::X, 0.0),
        Preset::StretchedY => stretched(Axis::Y, 0.0),
        Preset::StretchedZ => stretched(Axis::Z, 0.0),
        Preset::Mixed => stretched(Axis::X, MIXED_EPSILON),
    }
}

fn preset_name(preset: Preset) -> &'static str {
    match preset {
        Preset::Random => "random",
        Preset::StretchedX => "stretched-x",
        Preset::StretchedY => "stretched-y",
        Preset::StretchedZ => "stretched-z",
        Preset::Mixed => "mixed",
    }
}

pub fn synth(g: &GlobalArgs, preset: Preset, state: Option<&Path>) -> Result<()> {
    let cfg = load_config(g)?;
    let provenance = Provenance::of(&cfg)?;
    let obs = cfg.load_observables(g.allow_nonstandard)?;
    let (rho, state_source) = match state {
        Some(path) => (read_state(path)?, format!("file:{}", path.display())),
        None => (preset_state(preset, cfg.master_seed)?, format!("preset:{}", preset_name(preset))),
    };
    let params = cfg.signal;
    let times = cfg.grid.times();
    let sigma = cfg.noise.relative_sigma * peak_amplitude(&rho, &cfg.plan, &obs, &params, &times)?;
    let set = synthesize_plan(&rho, &cfg.plan, &obs, &params, &times, sigma, cfg.master_seed)?;

    let mut files = Vec::new();
    let mut raw = Vec::new();
    for (i, t) in set.raw().enumerate() {
        let name = trace_file_name(i / 3, t, false);
        files.push((PathBuf::from(&name), trace_csv(t).into_bytes()));
        raw.push(name);
    }
    let mut combined = Vec::new();
    for (i, t) in set.combined()?.iter().enumerate() {
        let name = trace_file_name(i / 2, t, true);
        files.push((PathBuf::from(&name), trace_csv(t).into_bytes()));
        combined.push(name);
    }

    let (z, x) = synthesize_stretched_pair(
        cfg.calibration.stretched_epsilon,
        &obs,
        &params,
        &times,
        sigma,
        split_seed(cfg.master_seed, CALIBRATION_STREAM),
    )?;
    let calibration = CalibrationFiles {
        stretched_z: "calibration/stretched-z.csv".into(),
        stretched_x: "calibration/stretched-x.csv".into(),
        absorption: "calibration/absorption.json".into(),
    };
    files.push((PathBuf::from(&calibration.stretched_z), trace_csv(&z).into_bytes()));
    files.push((PathBuf::from(&calibration.stretched_x), trace_csv(&x).into_bytes()));
    let far = cfg.calibration.absorption_far;
    files.push(json(
        &calibration.absorption,
        &AbsorptionFile {
            provenance: provenance.clone(),
            detuning_hz: params.detuning_hz,
            probe: absorption_for_eta(params.eta, &far)?,
            far,
        },
    )?);
    files.push((PathBuf::from("truth.json"), state_to_json(&rho)?.into_bytes()));
    let manifest = Manifest {
        provenance,
        master_seed: cfg.master_seed,
        state_source,
        params,
        plan: cfg.plan.clone(),
        noise_sigma: sigma,
        raw,
        combined,
        truth: "truth.json".into(),
        calibration,
    };
    files.push(json(MANIFEST, &manifest)?);
    commit(g, files)
}

#[derive(Serialize)]
struct CalibrationOutput {
    #[serde(flatten)]
    record: CalibrationRecord,
    stretched: StretchedCalibration,
    provenance: Provenance,
}

pub fn calibrate(g: &GlobalArgs, traces: &Path) -> Result<()> {
    let cfg = load_config(g)?;
    let obs = cfg.load_observables(g.allow_nonstandard)?;
    let manifest = load_manifest(traces)?;
    let files = &manifest.calibration;
    let z = load_trace(&traces.join(&files.stretched_z), &manifest.params)?;
    let x = load_trace(&traces.join(&files.stretched_x), &manifest.params)?;
    let stretched = zeta_from_stretched(&z, &x, &obs)?;
    let absorption: AbsorptionFile = read_json(&traces.join(&files.absorption))?;
    let record = CalibrationRecord {
        eta: eta_from_absorption(&absorption.probe, &absorption.far)?,
        zeta: stretched.zeta,
        zeta_stderr: stretched.zeta_stderr,
        detuning_hz: absorption.detuning_hz,
        lineshape: cfg.lineshape,
        phi: Some(stretched.phi),
    };
    let out = CalibrationOutput {
        record,
        stretched,
        provenance: Provenance::of(&cfg)?,
    };
    commit(g, vec![json("calibration.json", &out)?])?;
    if !stretched.converged {
        return Err(CliError::NotConverged("calibration fit"));
    }
    Ok(())
}

fn load_calibration(path: &Path) -> Result<CalibrationRecord> {
    let record: CalibrationRecord = read_json(path)?;
    record.validate()?;
    Ok(record)
}

#[derive(Serialize)]
struct FitOutput {
    #[serde(flatten)]
    fit: FitResult,
    provenance: Provenance,
}

pub fn fit(g: &GlobalArgs, traces: &Path, calibration: &Path) -> Result<()> {
    let cfg = load_config(g)?;
    let manifest = load_manifest(traces)?;
    check_plan(&cfg.plan, &manifest.plan)?;
    let set = load_trace_set(traces, &manifest)?;
    let record = load_calibration(calibration)?;
    let spec = FitModelSpec::from_combined(set.combined()?, record.eta, record.zeta)?;
    let mut fit = fit_combined(&spec, fallback(&cfg.signal))?;
    fit.fold_phase(record.phi.unwrap_or(0.0));
    let converged = fit.converged;
    commit(
        g,
        vec![json(
            "fit.json",
            &FitOutput {
                fit,
                provenance: Provenance::of(&cfg)?,
            },
        )?],
    )?;
    if !converged {
        return Err(CliError::NotConverged("joint fit"));
    }
    Ok(())
}

#[derive(Serialize)]
struct ReconstructionOutput {
    basis: &'static str,
    #[serde(with = "serde_matrix")]
    rho: Matrix3c,
    #[serde(skip_serializing_if = "Option::is_none")]
    fidelity_vs_truth: Option<f64>,
    kappa: f64,
    atkinson: AtkinsonReport,
    projection_distance_frobenius: f64,
    rank: usize,
    observations: ObservationVector,
    fit: FitResult,
    provenance: Provenance,
}

pub fn reconstruct(g: &GlobalArgs, traces: &Path, calibration: &Path, truth: Option<&Path>) -> Result<()> {
    let cfg = load_config(g)?;
    let obs = cfg.load_observables(g.allow_nonstandard)?;
    let manifest = load_manifest(traces)?;
    check_plan(&cfg.plan, &manifest.plan)?;
    let set = load_trace_set(traces, &manifest)?;
    let record = load_calibration(calibration)?;
    let options = ReconstructOptions {
        fallback: fallback(&cfg.signal),
        allow_nonstandard: g.allow_nonstandard,
    };
    let rec = run_reconstruct(&set, &cfg.plan, &obs, &record, &options)?;
    let fidelity_vs_truth = match truth {
        Some(path) => Some(fidelity(&read_state(path)?, &rec.rho)),
        None => None,
    };
    let d = rec.diagnostics;
    let converged = d.fit.converged;
    let out = ReconstructionOutput {
        basis: BASIS_LABEL,
        rho: rec.rho.into_matrix(),
        fidelity_vs_truth,
        kappa: d.kappa,
        atkinson: d.atkinson,
        projection_distance_frobenius: d.projection_distance_frobenius,
        rank: d.rank,
        observations: rec.observations,
        fit: d.fit,
        provenance: Provenance::of(&cfg)?,
    };
    commit(g, vec![json("reconstruction.json", &out)?])?;
    if !converged {
        return Err(CliError::NotConverged("joint fit"));
    }
    Ok(())
}

#[derive(Serialize)]
struct OptimumOutput {
    #[serde(flatten)]
    optimum: KappaOptimum,
    detuning_range_hz: (f64, f64),
    provenance: Provenance,
}

pub fn condition_scan(g: &GlobalArgs, points: Option<usize>) -> Result<()> {
    let cfg = load_config(g)?;
    let provenance = Provenance::of(&cfg)?;
    let range = cfg.design.detuning_range_hz;
    let rows = scan(&cfg.lineshape, range, points.unwrap_or(cfg.design.scan_points))?;
    let mut csv = format!(
        "# config_hash={}; tool_version={}\ndetuning_hz,zeta,kappa\n",
        provenance.config_hash, provenance.tool_version
    );
    for r in &rows {
        csv.push_str(&format!("{:.16e},{:.16e},{:.16e}\n", r.detuning_hz, r.zeta, r.kappa));
    }
    let optimum = OptimumOutput {
        optimum: minimize_kappa(&cfg.lineshape, range)?,
        detuning_range_hz: range,
        provenance,
    };
    commit(
        g,
        vec![
            (PathBuf::from("condition_scan.csv"), csv.into_bytes()),
            json("kappa_optimum.json", &optimum)?,
        ],
    )
}

#[derive(Serialize)]
struct RepetitionOutput {
    rows: Vec<RowLabel>,
    counts: Vec<u32>,
    budget: u32,
    kappa_trace: Vec<f64>,
    provenance: Provenance,
}

pub fn optimize_reps(g: &GlobalArgs, budget: Option<usize>) -> Result<()> {
    let cfg = load_config(g)?;
    let obs = cfg.load_observables(g.allow_nonstandard)?;
    let cm = build_coefficient_matrix(&cfg.plan, &obs, g.allow_nonstandard)?;
    cm.check_rank()?;
    let a = optimize_repetitions(&cm, budget.unwrap_or(cfg.design.budget), cfg.design.beam_width)?;
    let out = RepetitionOutput {
        rows: cm.labels.clone(),
        counts: a.counts,
        budget: a.budget,
        kappa_trace: a.kappa_trace,
        provenance: Provenance::of(&cfg)?,
    };
    commit(g, vec![json("optimize_reps.json", &out)?])
}

#[derive(Serialize)]
struct BenchOutput {
    states: usize,
    relative_sigma: f64,
    fidelities: Vec<f64>,
    min_fidelity: f64,
    median_fidelity: f64,
    all_converged: bool,
    provenance: Provenance,
}

pub fn roundtrip_bench(g: &GlobalArgs, states: usize) -> Result<()> {
    let cfg = load_config(g)?;
    let obs = cfg.load_observables(g.allow_nonstandard)?;
    if states == 0 {
        return Err(Error::InvalidInput("--states must be positive".into()).into());
    }
    let params = cfg.signal;
    let times = cfg.grid.times();
    let record = CalibrationRecord {
        eta: params.eta,
        zeta: params.zeta,
        zeta_stderr: 0.0,
        detuning_hz: params.detuning_hz,
        lineshape: cfg.lineshape,
        phi: Some(params.phi),
    };
    let options = ReconstructOptions {
        fallback: fallback(&params),
        allow_nonstandard: g.allow_nonstandard,
    };
    let start = Instant::now();
    let mut fidelities = Vec::with_capacity(states);
    let mut all_converged = true;
    for k in 0..states as u64 {
        let seed = split_seed(cfg.master_seed, k);
        let rho = random_state(seed);
        let sigma = cfg.noise.relative_sigma * peak_amplitude(&rho, &cfg.plan, &obs, &params, &times)?;
        let set = synthesize_plan(&rho, &cfg.plan, &obs, &params, &times, sigma, seed)?;
        let rec = run_reconstruct(&set, &cfg.plan, &obs, &record, &options)?;
        all_converged &= rec.diagnostics.fit.converged;
        fidelities.push(fidelity(&rho, &rec.rho));
    }
    let mut sorted = fidelities.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    eprintln!(
        "roundtrip-bench: {states} states in {:.2} s, median fidelity {median:.6}",
        start.elapsed().as_secs_f64()
    );
    let out = BenchOutput {
        states,
        relative_sigma: cfg.noise.relative_sigma,
        min_fidelity: sorted[0],
        median_fidelity: median,
        fidelities,
        all_converged,
        provenance: Provenance::of(&cfg)?,
    };
    commit(g, vec![json("roundtrip_bench.json", &out)?])
}
