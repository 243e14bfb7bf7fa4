//! TOML experiment configuration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gp::{BaseKernelParams, DEFAULT_JITTER};
use crate::plant::{AccParams, RoadProfile, SuspensionParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("serialize error: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub plant: PlantConfig,
    pub hocbf: HocbfConfig,
    pub gp: GpConfig,
    pub filter: FilterConfig,
    pub sim: SimSection,
    pub episodic: EpisodicConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlantConfig {
    /// Gap keeping behind a lead vehicle; `h = z - threshold`.
    Acc {
        nominal: AccParams,
        truth: AccParams,
        desired_speed: f64,
        clf_rate: f64,
    },
    /// Quarter car under a road input; `h = threshold - x1`.
    Suspension {
        nominal: SuspensionParams,
        truth: SuspensionParams,
        road: RoadProfile,
        lqr_q: f64,
        lqr_r: f64,
    },
    /// Damped integrator chain pushed toward `x1 = threshold` by a constant input.
    Synthetic {
        relative_degree: usize,
        /// Scale of the cubic drift and input-gain mismatch of the true model.
        mismatch: f64,
        push_input: f64,
    },
}

impl PlantConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            PlantConfig::Acc { .. } => "acc",
            PlantConfig::Suspension { .. } => "suspension",
            PlantConfig::Synthetic { .. } => "synthetic",
        }
    }
}

/// Either `gains` or the characteristic-polynomial `characteristic = [e_1, .., e_r]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HocbfConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gains: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub characteristic: Option<Vec<f64>>,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpConfig {
    /// One squared-exponential kernel per regressor coordinate: `r` certificate terms, then `m` inputs.
    pub kernels: Vec<BaseKernelParams>,
    pub noise_floor: f64,
    pub jitter: Vec<f64>,
    #[serde(default)]
    pub refine_factors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub beta: f64,
    /// Confidence parameters only used to report the theoretical bound.
    pub delta: f64,
    pub eta: f64,
    pub kappa: f64,
    pub soft_weight: f64,
    pub tol: f64,
    pub max_iter: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub dt: f64,
    pub control_period: f64,
    pub horizon: f64,
    pub initial_state: Vec<f64>,
    pub seed: u64,
    pub infeasible_abort: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodicConfig {
    pub max_episodes: usize,
    pub label_stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: String,
    /// Adds solver trace columns to episode CSVs.
    #[serde(default)]
    pub trace: bool,
}

fn kernel(signal_variance: f64, lengthscales: &[f64]) -> BaseKernelParams {
    BaseKernelParams { signal_variance, lengthscales: lengthscales.to_vec() }
}

impl ExperimentConfig {
    pub fn acc_default() -> Self {
        let ls = [10.0, 100.0];
        Self {
            name: "acc".into(),
            plant: PlantConfig::Acc {
                nominal: AccParams::NOMINAL,
                truth: AccParams::TRUE,
                desired_speed: 24.0,
                clf_rate: 10.0,
            },
            hocbf: HocbfConfig { gains: None, characteristic: Some(vec![4.0, 3.75]), threshold: 30.0 },
            gp: GpConfig {
                kernels: vec![kernel(1.0, &ls), kernel(1.0, &ls), kernel(1e-5, &ls)],
                noise_floor: 1e-6,
                jitter: DEFAULT_JITTER.to_vec(),
                refine_factors: Vec::new(),
            },
            filter: FilterConfig::default(),
            sim: SimSection {
                dt: 1e-3,
                control_period: 1e-2,
                horizon: 20.0,
                initial_state: vec![20.0, 100.0],
                seed: 0,
                infeasible_abort: 5,
            },
            episodic: EpisodicConfig { max_episodes: 6, label_stride: 10 },
            output: OutputConfig { directory: "results/acc".into(), trace: false },
        }
    }

    pub fn suspension_default() -> Self {
        let ls = [1.0, 1.0, 10.0, 10.0];
        Self {
            name: "suspension".into(),
            plant: PlantConfig::Suspension {
                nominal: SuspensionParams::NOMINAL,
                truth: SuspensionParams::TRUE,
                road: RoadProfile::default(),
                lqr_q: 10.0,
                lqr_r: 1.0,
            },
            hocbf: HocbfConfig { gains: None, characteristic: Some(vec![41.0, 395.0]), threshold: 0.06 },
            gp: GpConfig {
                kernels: vec![kernel(1.0, &ls), kernel(1.0, &ls), kernel(4e-6, &ls)],
                noise_floor: 1e-6,
                jitter: DEFAULT_JITTER.to_vec(),
                refine_factors: Vec::new(),
            },
            filter: FilterConfig::default(),
            sim: SimSection {
                dt: 1e-3,
                control_period: 1e-2,
                horizon: 10.0,
                initial_state: vec![0.0; 4],
                seed: 0,
                infeasible_abort: 5,
            },
            episodic: EpisodicConfig { max_episodes: 6, label_stride: 2 },
            output: OutputConfig { directory: "results/suspension".into(), trace: false },
        }
    }

    pub fn synthetic_default() -> Self {
        let ls = [1.0, 1.0];
        Self {
            name: "synthetic".into(),
            plant: PlantConfig::Synthetic { relative_degree: 2, mismatch: 0.5, push_input: 1.5 },
            hocbf: HocbfConfig { gains: Some(vec![1.0, 2.0]), characteristic: None, threshold: 1.0 },
            gp: GpConfig {
                kernels: vec![kernel(1.0, &ls), kernel(1.0, &ls), kernel(1.0, &ls)],
                noise_floor: 1e-6,
                jitter: DEFAULT_JITTER.to_vec(),
                refine_factors: Vec::new(),
            },
            filter: FilterConfig::default(),
            sim: SimSection {
                dt: 1e-3,
                control_period: 1e-2,
                horizon: 10.0,
                initial_state: vec![0.0, 0.0],
                seed: 0,
                infeasible_abort: 5,
            },
            episodic: EpisodicConfig { max_episodes: 4, label_stride: 5 },
            output: OutputConfig { directory: "results/synthetic".into(), trace: false },
        }
    }

    pub fn default_for(kind: &str) -> Option<Self> {
        match kind {
            "acc" => Some(Self::acc_default()),
            "suspension" => Some(Self::suspension_default()),
            "synthetic" => Some(Self::synthetic_default()),
            _ => None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    pub fn state_dim(&self) -> usize {
        match &self.plant {
            PlantConfig::Acc { .. } => 2,
            PlantConfig::Suspension { .. } => 4,
            PlantConfig::Synthetic { relative_degree, .. } => *relative_degree,
        }
    }

    pub fn relative_degree(&self) -> usize {
        match &self.plant {
            PlantConfig::Acc { .. } | PlantConfig::Suspension { .. } => 2,
            PlantConfig::Synthetic { relative_degree, .. } => *relative_degree,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        let pos = |v: f64| v > 0.0 && v.is_finite();
        match &self.plant {
            PlantConfig::Acc { nominal, truth, desired_speed, clf_rate } => {
                for p in [nominal, truth] {
                    p.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
                }
                if !desired_speed.is_finite() || !pos(*clf_rate) {
                    return bad("acc: desired_speed must be finite and clf_rate positive".into());
                }
            }
            PlantConfig::Suspension { nominal, truth, road, lqr_q, lqr_r } => {
                for p in [nominal, truth] {
                    p.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
                }
                if !pos(*lqr_q) || !pos(*lqr_r) {
                    return bad("suspension: lqr_q and lqr_r must be positive".into());
                }
                if let RoadProfile::Bump { amplitude, start, width } = road {
                    if !amplitude.is_finite() || !start.is_finite() || !pos(*width) {
                        return bad("suspension: road bump needs finite amplitude/start and positive width".into());
                    }
                }
            }
            PlantConfig::Synthetic { relative_degree, mismatch, push_input } => {
                if !(1..=4).contains(relative_degree) {
                    return bad("synthetic: relative_degree must be in 1..=4".into());
                }
                if !mismatch.is_finite() || !push_input.is_finite() || *mismatch < 0.0 {
                    return bad("synthetic: mismatch must be non-negative and push_input finite".into());
                }
            }
        }
        let r = self.relative_degree();
        match (&self.hocbf.gains, &self.hocbf.characteristic) {
            (Some(g), None) => {
                if g.len() != r || g.iter().any(|k| !pos(*k)) {
                    return bad(format!("hocbf.gains must hold {r} positive values"));
                }
            }
            (None, Some(c)) => {
                if c.len() != r {
                    return bad(format!("hocbf.characteristic must hold {r} values"));
                }
                crate::barrier::gains_from_characteristic(c).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            }
            _ => return bad("hocbf: set exactly one of gains or characteristic".into()),
        }
        if !self.hocbf.threshold.is_finite() {
            return bad("hocbf.threshold must be finite".into());
        }
        let n = self.state_dim();
        if self.gp.kernels.len() != r + 1 {
            return bad(format!("gp.kernels must hold {} entries (certificate terms then input)", r + 1));
        }
        for k in &self.gp.kernels {
            k.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            if k.lengthscales.len() != n {
                return bad(format!("gp kernel lengthscales must have {n} entries"));
            }
        }
        if !(self.gp.noise_floor >= 0.0) || self.gp.jitter.iter().any(|j| !(*j >= 0.0)) {
            return bad("gp.noise_floor and jitter must be non-negative".into());
        }
        if self.gp.refine_factors.iter().any(|f| !pos(*f)) {
            return bad("gp.refine_factors must be positive".into());
        }
        let f = &self.filter;
        if !(f.beta >= 0.0 && f.beta.is_finite()) {
            return bad("filter.beta must be non-negative".into());
        }
        if !(f.delta > 0.0 && f.delta < 1.0) || !(f.eta >= 0.0) || !(f.kappa >= 0.0) {
            return bad("filter: delta in (0,1), eta and kappa non-negative".into());
        }
        if !(f.soft_weight >= 0.0) || !pos(f.tol) || f.max_iter == 0 {
            return bad("filter: soft_weight >= 0, tol > 0, max_iter >= 1".into());
        }
        let s = &self.sim;
        if !pos(s.dt) || !pos(s.control_period) || !(s.horizon >= 0.0 && s.horizon.is_finite()) {
            return bad("sim: dt and control_period positive, horizon non-negative".into());
        }
        let ratio = s.control_period / s.dt;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio || ratio.round() < (2 * r) as f64 {
            return bad(format!("sim.control_period must be an integer multiple (>= {}) of dt", 2 * r));
        }
        if s.initial_state.len() != n || s.initial_state.iter().any(|v| !v.is_finite()) {
            return bad(format!("sim.initial_state must hold {n} finite values"));
        }
        if self.episodic.max_episodes == 0 || self.episodic.label_stride == 0 {
            return bad("episodic: max_episodes and label_stride must be at least 1".into());
        }
        if self.output.directory.is_empty() {
            return bad("output.directory must be set".into());
        }
        Ok(())
    }
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { beta: 2.0, delta: 0.05, eta: 1.0, kappa: 0.0, soft_weight: 10.0, tol: 1e-8, max_iter: 100 }
    }
}
