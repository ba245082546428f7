use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stablefreq_core::lyapunov::CertifyOptions;
use stablefreq_core::sim::{DisturbanceEvent, InitSpec, Integrator};
use stablefreq_core::train::{DroopConfig, PgConfig, TrainConfig};
use stablefreq_core::{bundled, load_case, AnyController, MonotoneParams, NetworkCase};

use crate::CliError;

/// One experiment file. Relative paths resolve against the file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Case file path, or `bundled:<name>`.
    pub case: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub pg: PgConfig,
    #[serde(default)]
    pub droop: DroopConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certify: Option<CertifySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateSection>,
    #[serde(default)]
    pub compare: CompareSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub approx_fit: Option<ApproxFitSection>,

    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifySection {
    /// Controller file (monotone params or a tabulated response).
    pub controller: PathBuf,
    #[serde(default)]
    pub options: CertifyOptions,
}

/// Controller used by `simulate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerSpec {
    Zero,
    /// Per-bus droop gains (or a single shared gain).
    Droop(Vec<f64>),
    File(PathBuf),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub controller: ControllerSpec,
    #[serde(default = "default_sim_steps")]
    pub steps: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub integrator: Integrator,
    #[serde(default)]
    pub events: Vec<DisturbanceEvent>,
    /// Number of sampled initial states around the operating point.
    #[serde(default = "default_one")]
    pub rollouts: usize,
    #[serde(default)]
    pub init_states: InitSpec,
    /// Replaces the case's action bounds by `±wide_bounds` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wide_bounds: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    /// Half-widths of the initial-frequency ranges (Hz).
    pub omega_bars_hz: Vec<f64>,
    /// Half-width of the initial-angle range (rad).
    pub delta_half_width: f64,
    pub test_batch: usize,
    /// Start BPTT training from the optimized droop gains.
    pub warm_start: bool,
    /// Breakpoint spacing (rad/s) of the warm-start embedding.
    pub warm_start_spacing: f64,
    pub step_load: DisturbanceEvent,
    pub step_load_steps: usize,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            omega_bars_hz: (0..=6).map(|j| 0.025 * j as f64).collect(),
            delta_half_width: 0.1,
            test_batch: 200,
            warm_start: true,
            warm_start_spacing: 0.05,
            step_load: DisturbanceEvent { bus: 0, delta_p: -0.05, t_on: 0.3, t_off: 5.3 },
            step_load_steps: 800,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// `tanh(a x)`.
    Tanh(f64),
    /// `a x`.
    Linear(f64),
    /// `clamp(k x, lo, hi)` as `[k, lo, hi]`.
    ClampedLinear([f64; 3]),
}

impl Target {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Target::Tanh(a) => (a * x).tanh(),
            Target::Linear(a) => a * x,
            Target::ClampedLinear([k, lo, hi]) => (k * x).clamp(lo, hi),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApproxFitSection {
    pub target: Target,
    pub x_lo: f64,
    pub x_hi: f64,
    pub grid_n: usize,
}

fn default_sim_steps() -> usize {
    1000
}

fn default_dt() -> f64 {
    0.01
}

fn default_one() -> usize {
    1
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn load_case(&self) -> Result<NetworkCase, CliError> {
        if let Some(name) = self.case.strip_prefix("bundled:") {
            return bundled::by_name(name).ok_or_else(|| CliError::Config(format!("unknown bundled case '{name}'")));
        }
        let path = self.resolve(Path::new(&self.case));
        if !path.exists() {
            return Err(CliError::Config(format!("case file not found: {}", path.display())));
        }
        load_case(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn load_controller(&self, p: &Path) -> Result<AnyController, CliError> {
        let path = self.resolve(p);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Config(format!("cannot read controller {}: {e}", path.display())))?;
        AnyController::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Seed for stochastic commands; missing seeds are a configuration error.
    pub fn require_seed(&self) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Config("a seed is required (set \"seed\" or pass --seed)".into()))
    }

    /// Training config with the experiment seed applied.
    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        Ok(TrainConfig { seed: self.require_seed()?, ..self.train.clone() })
    }

    pub fn out_dir(&self) -> Result<PathBuf, CliError> {
        match &self.out {
            Some(o) if o.is_absolute() => Ok(o.clone()),
            Some(o) => Ok(self.base_dir.join(o)),
            None => Err(CliError::Config("no output directory (set \"out\" or pass --out)".into())),
        }
    }

    /// Canonical serialization the config hash is computed from.
    pub fn canonical_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("config serializes")
    }
}

impl ControllerSpec {
    pub fn build(&self, cfg: &ExperimentConfig, case: &NetworkCase) -> Result<AnyController, CliError> {
        match self {
            ControllerSpec::Zero => Ok(AnyController::Monotone(
                MonotoneParams::droop(case, &vec![0.0; case.n]).map_err(CliError::core)?,
            )),
            ControllerSpec::Droop(k) => {
                let gains = if k.len() == 1 { vec![k[0]; case.n] } else { k.clone() };
                Ok(AnyController::Monotone(MonotoneParams::droop(case, &gains).map_err(CliError::core)?))
            }
            ControllerSpec::File(p) => cfg.load_controller(p),
        }
    }
}
