//! On-disk trace sets: a manifest plus one CSV per trace.

use std::path::Path;

use serde::{Deserialize, Serialize};

use alkatomo_core::calib::AbsorptionSample;
use alkatomo_core::config::Provenance;
use alkatomo_core::io::{read_json, read_to_string, trace_from_csv, trace_to_csv, TraceHeader};
use alkatomo_core::observables::{CyclopsVariant, MeasurementPlan};
use alkatomo_core::signal::{PulseTraces, SignalParams, SignalTrace, TraceMeta, TraceSet};
use alkatomo_core::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFiles {
    pub stretched_z: String,
    pub stretched_x: String,
    pub absorption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub provenance: Provenance,
    pub master_seed: u64,
    pub state_source: String,
    pub params: SignalParams,
    pub plan: MeasurementPlan,
    /// Absolute per-sample noise standard deviation, rad.
    pub noise_sigma: f64,
    /// Three files per plan entry: bare, Y, ZY.
    pub raw: Vec<String>,
    /// Two difference traces per plan entry: Y, ZY.
    pub combined: Vec<String>,
    pub truth: String,
    pub calibration: CalibrationFiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsorptionFile {
    pub provenance: Provenance,
    pub detuning_hz: f64,
    pub probe: AbsorptionSample,
    pub far: AbsorptionSample,
}

/// `<plan entry>-<pulse>-<variant>[-combined].csv`.
pub fn trace_file_name(entry: usize, trace: &SignalTrace, combined: bool) -> String {
    let variant = trace.meta.variant.map_or("bare", CyclopsVariant::tag);
    let suffix = if combined { "-combined" } else { "" };
    format!("{entry:02}-{}-{variant}{suffix}.csv", trace.meta.pulse)
}

pub fn trace_csv(trace: &SignalTrace) -> String {
    let header = TraceHeader {
        pulse: trace.meta.pulse.clone(),
        variant: trace.meta.variant,
        seed: trace.meta.seed,
    };
    trace_to_csv(&header, &trace.times, &trace.values)
}

pub fn load_trace(path: &Path, params: &SignalParams) -> Result<SignalTrace> {
    let text = read_to_string(path)?;
    let (header, times, values) = trace_from_csv(path, &text)?;
    SignalTrace::new(
        times,
        values,
        TraceMeta {
            params: *params,
            pulse: header.pulse,
            variant: header.variant,
            seed: header.seed,
        },
    )
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    read_json(&dir.join(MANIFEST))
}

/// Raw traces of a trace set, checked against the manifest plan.
pub fn load_trace_set(dir: &Path, manifest: &Manifest) -> Result<TraceSet> {
    let entries = &manifest.plan.entries;
    if manifest.raw.len() != 3 * entries.len() {
        return Err(Error::MetadataMismatch(format!(
            "manifest lists {} raw traces for {} plan entries",
            manifest.raw.len(),
            entries.len()
        )));
    }
    let slots = [None, Some(CyclopsVariant::Y), Some(CyclopsVariant::ZY)];
    let mut out = Vec::with_capacity(entries.len());
    for (i, entry) in entries.iter().enumerate() {
        let mut traces = Vec::with_capacity(3);
        for (k, variant) in slots.iter().enumerate() {
            let name = &manifest.raw[3 * i + k];
            let t = load_trace(&dir.join(name), &manifest.params)?;
            if t.meta.pulse != entry.pulse.tag || t.meta.variant != *variant {
                return Err(Error::MetadataMismatch(format!(
                    "{name}: header names pulse '{}' variant {}, expected '{}' {}",
                    t.meta.pulse,
                    t.meta.variant.map_or("none", CyclopsVariant::tag),
                    entry.pulse.tag,
                    variant.map_or("none", CyclopsVariant::tag)
                )));
            }
            traces.push(t);
        }
        let zy = traces.pop().expect("three traces");
        let y = traces.pop().expect("three traces");
        let base = traces.pop().expect("three traces");
        out.push(PulseTraces { base, y, zy });
    }
    Ok(TraceSet { entries: out })
}
