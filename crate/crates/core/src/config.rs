//! Run configuration shared by the command-line tool and the bindings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calib::{AbsorptionSample, LineshapeParams};
use crate::design::{DEFAULT_BEAM_WIDTH, DEFAULT_BLUE_RANGE};
use crate::error::{Error, Result};
use crate::io::{read_to_string, to_json_string};
use crate::observables::{default_observables, MeasurementPlan, ObservableSet};
use crate::signal::{uniform_grid, SignalParams};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub samples: usize,
    pub duration_s: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            samples: 4096,
            duration_s: 1.0,
        }
    }
}

impl GridConfig {
    pub fn times(&self) -> Vec<f64> {
        uniform_grid(self.samples, self.duration_s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Per-sample noise as a fraction of the largest noiseless trace amplitude.
    pub relative_sigma: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { relative_sigma: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Isotropic fraction of the synthesized stretched states.
    pub stretched_epsilon: f64,
    /// Far-detuned absorption reference.
    pub absorption_far: AbsorptionSample,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            stretched_epsilon: 0.0,
            absorption_far: AbsorptionSample { u1: 1.0, u2: 0.2 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignConfig {
    pub detuning_range_hz: (f64, f64),
    pub scan_points: usize,
    pub budget: usize,
    pub beam_width: usize,
}

impl Default for DesignConfig {
    fn default() -> Self {
        Self {
            detuning_range_hz: DEFAULT_BLUE_RANGE,
            scan_points: 3501,
            budget: 30,
            beam_width: DEFAULT_BEAM_WIDTH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    pub lineshape: LineshapeParams,
    /// Parameters used for synthesis.
    pub signal: SignalParams,
    pub grid: GridConfig,
    pub noise: NoiseConfig,
    pub plan: MeasurementPlan,
    /// `"default"` or a path to an observable-set JSON file.
    pub observables: String,
    pub calibration: CalibrationConfig,
    pub design: DesignConfig,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let signal = SignalParams::default();
        Self {
            master_seed: 0,
            lineshape: LineshapeParams::default(),
            signal,
            grid: GridConfig::default(),
            noise: NoiseConfig::default(),
            plan: MeasurementPlan::default_with_zeta(signal.zeta),
            observables: "default".into(),
            calibration: CalibrationConfig::default(),
            design: DesignConfig::default(),
            base_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates; relative observable paths resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.lineshape.validate()?;
        self.signal.validate()?;
        self.plan.validate()?;
        if self.grid.samples < 2 || !(self.grid.duration_s > 0.0) {
            return Err(Error::InvalidInput("grid needs >= 2 samples and a positive duration".into()));
        }
        if !(self.noise.relative_sigma >= 0.0 && self.noise.relative_sigma.is_finite()) {
            return Err(Error::InvalidInput("noise.relative_sigma must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.calibration.stretched_epsilon) {
            return Err(Error::InvalidInput("stretched_epsilon must lie in [0, 1]".into()));
        }
        if self.design.beam_width == 0 {
            return Err(Error::InvalidInput("design.beam_width must be positive".into()));
        }
        if let Some(path) = self.observables_path() {
            if !path.exists() {
                return Err(Error::InvalidInput(format!(
                    "observables file {} does not exist",
                    path.display()
                )));
            }
        }
        Ok(())
    }

    fn observables_path(&self) -> Option<PathBuf> {
        if self.observables == "default" {
            return None;
        }
        let p = PathBuf::from(&self.observables);
        Some(match (&self.base_dir, p.is_relative()) {
            (Some(base), true) => base.join(p),
            _ => p,
        })
    }

    pub fn load_observables(&self, allow_nonstandard: bool) -> Result<ObservableSet> {
        match self.observables_path() {
            None => Ok(default_observables()),
            Some(path) => ObservableSet::from_json(&read_to_string(&path)?, allow_nonstandard),
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let canonical = to_json_string(self)?;
        Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
    }
}

/// Provenance block attached to every output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub tool_version: String,
}

impl Provenance {
    pub fn of(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            config_hash: cfg.hash()?,
            tool_version: TOOL_VERSION.into(),
        })
    }
}
