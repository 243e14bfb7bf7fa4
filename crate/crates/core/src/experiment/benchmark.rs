//! Three-arm benchmark: nominal QP, oracle QP on the true model, and the episodically
//! trained GP-SOCP filter.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{ConfigError, ExperimentConfig};
use super::{Scenario, ScenarioError};
use crate::episodic::{episodic_train, run_episode, EpisodeError, EpisodeLog, Termination};
use crate::filter::QpFilter;
use crate::gp::{beta_bound, ConfidenceParams, GpError, ResidualDataset};

#[derive(Debug, Error)]
pub enum BenchmarkError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl BenchmarkError {
    /// 2 for configuration problems, 1 for anything that fails at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchmarkError::Config(_) | BenchmarkError::Scenario(ScenarioError::Config(_)) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub termination: String,
    pub steps: usize,
    pub min_h: Option<f64>,
    pub violation_time: Option<f64>,
    pub mean_iterations: f64,
    pub infeasible_steps: usize,
}

impl ArmSummary {
    pub fn from_log(log: &EpisodeLog) -> Self {
        Self {
            termination: log.termination.as_str().into(),
            steps: log.records.len(),
            min_h: log.min_h(),
            violation_time: log.violation_time,
            mean_iterations: log.mean_iterations(),
            infeasible_steps: log.infeasible_steps(),
        }
    }

    pub fn completed(&self) -> bool {
        self.termination == Termination::Completed.as_str()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub name: String,
    pub plant: String,
    pub nominal: ArmSummary,
    pub oracle: ArmSummary,
    /// Final training episode.
    pub gp: ArmSummary,
    pub gp_trained: bool,
    pub episodes: usize,
    pub dataset_size: usize,
    pub noise_variance: f64,
    pub beta: f64,
    /// Confidence scale implied by the configured `delta`, `eta`, `kappa` at this dataset size.
    pub beta_bound: f64,
    pub rms_nominal_vs_oracle: f64,
    pub rms_gp_vs_oracle: f64,
    pub all_complete: bool,
}

/// Every artifact of a benchmark run.
#[derive(Debug, Clone)]
pub struct BenchmarkRun {
    pub summary: BenchmarkSummary,
    pub nominal: EpisodeLog,
    pub oracle: EpisodeLog,
    pub gp_logs: Vec<EpisodeLog>,
    pub dataset: ResidualDataset,
}

/// Root-mean-square input difference over the steps both logs share.
pub fn rms_deviation(a: &EpisodeLog, b: &EpisodeLog) -> f64 {
    let n = a.records.len().min(b.records.len());
    if n == 0 {
        return 0.0;
    }
    let sum: f64 = a.records[..n]
        .iter()
        .zip(&b.records[..n])
        .map(|(ra, rb)| ra.u.iter().zip(&rb.u).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
        .sum();
    (sum / n as f64).sqrt()
}

/// Arm CSVs land in `out = Some((dir, trace))` as soon as each arm finishes, so a
/// failing run still leaves the earlier arms behind.
pub fn run_arms(cfg: &ExperimentConfig, out: Option<(&Path, bool)>) -> Result<BenchmarkRun, BenchmarkError> {
    let sc = Scenario::build(cfg)?;
    if let Some((dir, _)) = out {
        std::fs::create_dir_all(dir)?;
    }
    let save = |log: &EpisodeLog, name: &str| -> Result<(), BenchmarkError> {
        if let Some((dir, trace)) = out {
            log.save_csv(&dir.join(name), trace)?;
        }
        Ok(())
    };
    let controller = sc.controller.as_ref();
    let nominal = run_episode(&sc.plant, &sc.design, controller, &QpFilter { design: sc.design.clone() }, &sc.sim, false)?;
    save(&nominal, "nominal.csv")?;
    let oracle = run_episode(&sc.plant, &sc.design, controller, &QpFilter { design: sc.oracle.clone() }, &sc.sim, false)?;
    save(&oracle, "oracle.csv")?;
    let (gp_logs, dataset, trained, episodes) = match episodic_train(&sc.plant, &sc.design, controller, &sc.sim, &sc.training) {
        Ok(out) => (out.logs, out.dataset, true, out.episodes),
        Err(EpisodeError::Exhausted { episodes, failure }) => (failure.logs, failure.dataset, false, episodes),
        Err(e) => return Err(e.into()),
    };
    for (k, log) in gp_logs.iter().enumerate() {
        save(log, &format!("gp_episode_{}.csv", k + 1))?;
    }
    let last = gp_logs.last().expect("training runs at least one episode");
    save(last, "gp.csv")?;
    if let Some((dir, _)) = out {
        dataset.save_csv(&dir.join("dataset.csv"))?;
    }
    let confidence = ConfidenceParams {
        beta: cfg.filter.beta,
        delta: cfg.filter.delta,
        eta: cfg.filter.eta,
        kappa: cfg.filter.kappa,
    };
    let nominal_summary = ArmSummary::from_log(&nominal);
    let oracle_summary = ArmSummary::from_log(&oracle);
    let gp_summary = ArmSummary::from_log(last);
    let all_complete = trained && nominal_summary.completed() && oracle_summary.completed() && gp_summary.completed();
    let summary = BenchmarkSummary {
        name: cfg.name.clone(),
        plant: cfg.plant.kind().into(),
        rms_nominal_vs_oracle: rms_deviation(&nominal, &oracle),
        rms_gp_vs_oracle: rms_deviation(last, &oracle),
        nominal: nominal_summary,
        oracle: oracle_summary,
        gp: gp_summary,
        gp_trained: trained,
        episodes,
        dataset_size: dataset.len(),
        noise_variance: dataset.noise_variance,
        beta: cfg.filter.beta,
        beta_bound: beta_bound(&confidence, dataset.len())?,
        all_complete,
    };
    if let Some((dir, _)) = out {
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(BenchmarkRun { summary, nominal, oracle, gp_logs, dataset })
}

/// Writes `nominal.csv`, `oracle.csv`, `gp_episode_<k>.csv`, `gp.csv`, `dataset.csv` and
/// `summary.json` into `dir`; `all_complete` in the summary decides the exit status.
pub fn run_benchmark(cfg: &ExperimentConfig, dir: &Path) -> Result<BenchmarkSummary, BenchmarkError> {
    cfg.validate()?;
    Ok(run_arms(cfg, Some((dir, cfg.output.trace)))?.summary)
}
