use alkatomo_core::calib::{CalibrationRecord, LineshapeParams};
use alkatomo_core::observables::{default_observables, MeasurementPlan};
use alkatomo_core::qutrit::{fidelity, random_state, DensityMatrix};
use alkatomo_core::signal::{peak_amplitude, synthesize_plan, uniform_grid, SignalParams};
use alkatomo_core::tomo::{reconstruct, ReconstructOptions};

fn record(p: &SignalParams) -> CalibrationRecord {
    CalibrationRecord {
        eta: p.eta,
        zeta: p.zeta,
        zeta_stderr: 0.0,
        detuning_hz: p.detuning_hz,
        lineshape: LineshapeParams::default(),
        phi: Some(p.phi),
    }
}

fn round_trip(rho: &DensityMatrix, p: &SignalParams, sigma_frac: f64, seed: u64) -> f64 {
    let obs = default_observables();
    let plan = MeasurementPlan::default_with_zeta(p.zeta);
    let times = uniform_grid(4096, 1.0);
    let sigma = sigma_frac * peak_amplitude(rho, &plan, &obs, p, &times).unwrap();
    let set = synthesize_plan(rho, &plan, &obs, p, &times, sigma, seed).unwrap();
    let rec = reconstruct(&set, &plan, &obs, &record(p), &ReconstructOptions::default()).unwrap();
    fidelity(&rec.rho, rho)
}

#[test]
fn noiseless_round_trip_examples() {
    let p = SignalParams { phi: 0.4, offset: 0.01, ..SignalParams::default() };
    for seed in 0..5 {
        let f = round_trip(&random_state(seed), &p, 0.0, seed);
        assert!(f >= 1.0 - 1e-8, "seed {seed}: {f}");
    }
    let f = round_trip(&DensityMatrix::maximally_mixed(), &p, 0.0, 0);
    assert!(f >= 1.0 - 1e-8, "{f}");
}

#[test]
fn noisy_round_trip_examples() {
    let p = SignalParams::default();
    let mut fs: Vec<f64> = (0..10).map(|s| round_trip(&random_state(100 + s), &p, 0.01, s)).collect();
    fs.sort_by(f64::total_cmp);
    eprintln!("{fs:?}");
    assert!(fs[5] >= 0.99);
}
