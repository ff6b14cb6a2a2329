//! Forward model of the polarization-rotation signal and the CYCLOPS
//! difference traces.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::observables::{CyclopsVariant, MeasurementPlan, ObservableSet};
use crate::qutrit::{apply_pulse, stretched_state, Axis, DensityMatrix, PulseUnitary, StretchedSpec};

/// Model parameters shared by every trace of an acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SignalParams {
    /// Global scaling factor.
    pub eta: f64,
    /// Local scaling factor.
    pub zeta: f64,
    /// Coherence relaxation rate, 1/s.
    pub gamma1: f64,
    /// Orientation relaxation rate, 1/s.
    pub gamma2: f64,
    /// Larmor angular frequency, rad/s.
    #[serde(rename = "omega_L")]
    pub omega_l: f64,
    /// Instrument phase, rad.
    pub phi: f64,
    /// Polarimeter imbalance, rad.
    pub offset: f64,
    /// Probe detuning, Hz (metadata only).
    pub detuning_hz: f64,
}

impl Default for SignalParams {
    fn default() -> Self {
        Self {
            eta: 1.0,
            zeta: 0.3,
            gamma1: 3.0,
            gamma2: 3.0,
            // 2 Omega_L / 2 pi = 40 Hz
            omega_l: 2.0 * std::f64::consts::PI * 20.0,
            phi: 0.0,
            offset: 0.0,
            detuning_hz: 0.0,
        }
    }
}

impl SignalParams {
    pub fn validate(&self) -> Result<()> {
        let all_finite = [
            self.eta,
            self.zeta,
            self.gamma1,
            self.gamma2,
            self.omega_l,
            self.phi,
            self.offset,
            self.detuning_hz,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::InvalidInput("signal parameters must be finite".into()));
        }
        if !(self.gamma1 > 0.0 && self.gamma2 > 0.0) {
            return Err(Error::InvalidInput("relaxation rates must be positive".into()));
        }
        if !(self.omega_l > 0.0) {
            return Err(Error::InvalidInput("Larmor frequency must be positive".into()));
        }
        if self.eta == 0.0 {
            return Err(Error::InvalidInput("eta must be nonzero".into()));
        }
        Ok(())
    }

    /// Noiseless value at time `t` for expectations `(a_R, a_I, b)`.
    pub fn model(&self, t: f64, expectations: [f64; 3]) -> f64 {
        let [ar, ai, b] = expectations;
        let arg = 2.0 * self.omega_l * t + self.phi;
        let (s, c) = arg.sin_cos();
        self.eta
            * ((-self.gamma1 * t).exp() * (ar * s + ai * c)
                - self.zeta * (-self.gamma2 * t).exp() * b)
            + self.offset
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self { sigma: 0.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub params: SignalParams,
    pub pulse: String,
    pub variant: Option<CyclopsVariant>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalTrace {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub meta: TraceMeta,
}

impl SignalTrace {
    pub fn new(times: Vec<f64>, values: Vec<f64>, meta: TraceMeta) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::DimensionMismatch {
                expected: times.len(),
                found: values.len(),
            });
        }
        check_grid(&times)?;
        Ok(Self {
            times,
            values,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

pub(crate) fn check_grid(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if let Some(i) = times.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(Error::NonMonotonicGrid { index: i + 1 });
    }
    if !times.iter().all(|t| t.is_finite()) {
        return Err(Error::InvalidInput("non-finite sample time".into()));
    }
    Ok(())
}

/// `samples` instants `0, dt, ..., (samples - 1) dt` with `dt = duration / samples`.
pub fn uniform_grid(samples: usize, duration: f64) -> Vec<f64> {
    let dt = duration / samples as f64;
    (0..samples).map(|i| i as f64 * dt).collect()
}

/// Mixes a master seed with a stream index (SplitMix64 finaliser).
pub fn split_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Which acquisition a trace represents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceLabel {
    pub pulse: String,
    pub variant: Option<CyclopsVariant>,
}

/// Applies `pulses` in order, then samples the signal model plus noise.
pub fn synthesize_trace(
    rho: &DensityMatrix,
    pulses: &[PulseUnitary],
    obs: &ObservableSet,
    params: &SignalParams,
    times: &[f64],
    noise: &NoiseSpec,
    label: TraceLabel,
) -> Result<SignalTrace> {
    params.validate()?;
    check_grid(times)?;
    let horizon = 10.0 / params.gamma1.min(params.gamma2);
    if times[0] < 0.0 || times[times.len() - 1] > horizon {
        return Err(Error::InvalidInput(format!(
            "time grid must lie within [0, {horizon}] s"
        )));
    }
    if !(noise.sigma >= 0.0 && noise.sigma.is_finite()) {
        return Err(Error::InvalidInput("noise sigma must be >= 0".into()));
    }
    let state = pulses
        .iter()
        .fold(rho.clone(), |state, u| apply_pulse(&state, u));
    let expectations = obs.expectations(&state);
    let mut values: Vec<f64> = times
        .iter()
        .map(|&t| params.model(t, expectations))
        .collect();
    if noise.sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
        let normal = Normal::new(0.0, noise.sigma).expect("finite sigma");
        for v in &mut values {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(SignalTrace {
        times: times.to_vec(),
        values,
        meta: TraceMeta {
            params: *params,
            pulse: label.pulse,
            variant: label.variant,
            seed: noise.seed,
        },
    })
}

/// `base - cycled`; the polarimeter offset cancels.
pub fn combine_cyclops(
    base: &SignalTrace,
    cycled: &SignalTrace,
    variant: CyclopsVariant,
) -> Result<SignalTrace> {
    if base.times != cycled.times {
        return Err(Error::GridMismatch);
    }
    if base.meta.params != cycled.meta.params {
        return Err(Error::MetadataMismatch(
            "signal parameters differ between base and cycled trace".into(),
        ));
    }
    if base.meta.pulse != cycled.meta.pulse {
        return Err(Error::MetadataMismatch(format!(
            "control pulse '{}' vs '{}'",
            base.meta.pulse, cycled.meta.pulse
        )));
    }
    if base.meta.variant.is_some() {
        return Err(Error::MetadataMismatch("base trace is already phase cycled".into()));
    }
    if cycled.meta.variant != Some(variant) {
        return Err(Error::MetadataMismatch(format!(
            "cycled trace is not a {} acquisition",
            variant.tag()
        )));
    }
    let values = base
        .values
        .iter()
        .zip(&cycled.values)
        .map(|(a, b)| a - b)
        .collect();
    Ok(SignalTrace {
        times: base.times.clone(),
        values,
        meta: TraceMeta {
            variant: Some(variant),
            ..base.meta.clone()
        },
    })
}

/// The three raw acquisitions belonging to one control pulse.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseTraces {
    pub base: SignalTrace,
    pub y: SignalTrace,
    pub zy: SignalTrace,
}

impl PulseTraces {
    pub fn cycled(&self, variant: CyclopsVariant) -> &SignalTrace {
        match variant {
            CyclopsVariant::Y => &self.y,
            CyclopsVariant::ZY => &self.zy,
        }
    }

    pub fn combined(&self, variant: CyclopsVariant) -> Result<SignalTrace> {
        combine_cyclops(&self.base, self.cycled(variant), variant)
    }
}

/// Raw traces for every entry of a plan, in plan order.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    pub entries: Vec<PulseTraces>,
}

impl TraceSet {
    /// Difference traces ordered `[entry0 Y, entry0 ZY, entry1 Y, ...]`.
    pub fn combined(&self) -> Result<Vec<SignalTrace>> {
        let mut out = Vec::with_capacity(2 * self.entries.len());
        for e in &self.entries {
            for v in CyclopsVariant::ALL {
                out.push(e.combined(v)?);
            }
        }
        Ok(out)
    }

    pub fn raw(&self) -> impl Iterator<Item = &SignalTrace> {
        self.entries.iter().flat_map(|e| [&e.base, &e.y, &e.zy])
    }
}

/// Synthesizes the bare and phase-cycled traces for every plan entry.
///
/// Raw trace `j` (three per entry, in the order bare, Y, ZY) draws its noise
/// from `split_seed(master_seed, j)`.
pub fn synthesize_plan(
    rho: &DensityMatrix,
    plan: &MeasurementPlan,
    obs: &ObservableSet,
    params: &SignalParams,
    times: &[f64],
    sigma: f64,
    master_seed: u64,
) -> Result<TraceSet> {
    plan.validate()?;
    let mut entries = Vec::with_capacity(plan.entries.len());
    for (i, entry) in plan.entries.iter().enumerate() {
        let control = entry.pulse.unitary()?;
        let make = |slot: u64, variant: Option<CyclopsVariant>| {
            let mut pulses = vec![control.clone()];
            if let Some(v) = variant {
                pulses.push(v.unitary());
            }
            let noise = NoiseSpec {
                sigma,
                seed: split_seed(master_seed, 3 * i as u64 + slot),
            };
            synthesize_trace(
                rho,
                &pulses,
                obs,
                params,
                times,
                &noise,
                TraceLabel {
                    pulse: entry.pulse.tag.clone(),
                    variant,
                },
            )
        };
        entries.push(PulseTraces {
            base: make(0, None)?,
            y: make(1, Some(CyclopsVariant::Y))?,
            zy: make(2, Some(CyclopsVariant::ZY))?,
        });
    }
    Ok(TraceSet { entries })
}

/// Largest `|value|` over the noiseless, offset-free raw traces of a plan.
pub fn peak_amplitude(
    rho: &DensityMatrix,
    plan: &MeasurementPlan,
    obs: &ObservableSet,
    params: &SignalParams,
    times: &[f64],
) -> Result<f64> {
    let clean = SignalParams {
        offset: 0.0,
        ..*params
    };
    let set = synthesize_plan(rho, plan, obs, &clean, times, 0.0, 0)?;
    Ok(set
        .raw()
        .flat_map(|t| t.values.iter())
        .fold(0.0, |m, v| m.max(v.abs())))
}

/// Raw traces of the z- and x-stretched states used for calibration.
pub fn synthesize_stretched_pair(
    epsilon: f64,
    obs: &ObservableSet,
    params: &SignalParams,
    times: &[f64],
    sigma: f64,
    master_seed: u64,
) -> Result<(SignalTrace, SignalTrace)> {
    let make = |axis: Axis, index: u64, tag: &str| {
        let rho = stretched_state(&StretchedSpec::new(axis, epsilon)?);
        synthesize_trace(
            &rho,
            &[],
            obs,
            params,
            times,
            &NoiseSpec {
                sigma,
                seed: split_seed(master_seed, index),
            },
            TraceLabel {
                pulse: tag.into(),
                variant: None,
            },
        )
    };
    Ok((make(Axis::Z, 0, "stretched-z")?, make(Axis::X, 1, "stretched-x")?))
}
