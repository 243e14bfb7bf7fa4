//! Closed-loop episodes, finite-difference residual labels and episodic training.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::barrier::{BarrierError, HocbfDesign};
use crate::filter::{FilterError, FilterStatus, GpSocpFilter, QpFilter, SafetyFilter};
use crate::gp::{refine_lengthscales, BaseKernelParams, CompositeGpModel, GpError, ResidualDataset};
use crate::plant::{rk4_step, NominalController, PlantModel};
use crate::socp::SolverSettings;

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("invalid simulation settings: {0}")]
    InvalidSim(String),
    #[error("finite-difference window has {got} samples, order {order} needs {needed}")]
    InsufficientSamples { order: usize, needed: usize, got: usize },
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Barrier(#[from] BarrierError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("no violation-free episode within {episodes} episodes")]
    Exhausted { episodes: usize, failure: Box<TrainingFailure> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Integration step (s).
    pub dt: f64,
    /// Zero-order-hold control period (s); an integer multiple of `dt`.
    pub control_period: f64,
    pub horizon: f64,
    pub initial_state: Vec<f64>,
    /// Consecutive non-optimal filter steps that abort an episode.
    pub infeasible_abort: usize,
}

impl SimConfig {
    pub fn substeps(&self) -> Result<usize, EpisodeError> {
        if !(self.dt > 0.0) || !(self.control_period > 0.0) || !(self.horizon >= 0.0) {
            return Err(EpisodeError::InvalidSim("dt and control period must be positive, horizon non-negative".into()));
        }
        let ratio = self.control_period / self.dt;
        let k = ratio.round();
        if k < 1.0 || (ratio - k).abs() > 1e-9 * ratio {
            return Err(EpisodeError::InvalidSim(format!(
                "control period {} is not a multiple of dt {}",
                self.control_period, self.dt
            )));
        }
        Ok(k as usize)
    }

    pub fn control_steps(&self) -> usize {
        (self.horizon / self.control_period).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Completed,
    SafetyViolation,
    InfeasibleAbort,
    Diverged,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::Completed => "completed",
            Termination::SafetyViolation => "safety_violation",
            Termination::InfeasibleAbort => "infeasible_abort",
            Termination::Diverged => "diverged",
        }
    }
}

/// One control step.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub t: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub u_nom: Vec<f64>,
    pub h: f64,
    pub zeta: Vec<f64>,
    pub sigma: f64,
    pub status: FilterStatus,
    pub necessary_value: f64,
    pub sufficient_eig: f64,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// States at every integration step from `t` to the next control step, inclusive.
    pub segment: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub records: Vec<EpisodeRecord>,
    pub dt: f64,
    pub termination: Termination,
    pub violation_time: Option<f64>,
}

impl EpisodeLog {
    pub fn min_h(&self) -> Option<f64> {
        self.records.iter().map(|r| r.h).reduce(f64::min)
    }

    pub fn mean_iterations(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.iterations as f64).sum::<f64>() / self.records.len() as f64
    }

    pub fn infeasible_steps(&self) -> usize {
        self.records.iter().filter(|r| r.status != FilterStatus::Optimal).count()
    }

    /// CSV with `t, x_*, u_*, h, zeta_*, sigma, status, necessary_value, sufficient_eig,
    /// iterations`, plus solver trace columns when `trace` is set.
    pub fn write_csv<W: Write>(&self, w: W, trace: bool) -> Result<(), EpisodeError> {
        let mut out = csv::Writer::from_writer(w);
        let (n, m, r) = match self.records.first() {
            Some(rec) => (rec.x.len(), rec.u.len(), rec.zeta.len()),
            None => (0, 0, 0),
        };
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x_{i}")));
        header.extend((1..=m).map(|i| format!("u_{i}")));
        header.push("h".into());
        header.extend((0..r).map(|i| format!("zeta_{i}")));
        header.extend(["sigma", "status", "necessary_value", "sufficient_eig", "iterations"].map(String::from));
        if trace {
            header.extend(["primal_residual", "dual_residual"].map(String::from));
            header.extend((1..=m).map(|i| format!("u_nom_{i}")));
        }
        out.write_record(&header)?;
        for rec in &self.records {
            let mut row = vec![fmt(rec.t)];
            row.extend(rec.x.iter().chain(&rec.u).map(|v| fmt(*v)));
            row.push(fmt(rec.h));
            row.extend(rec.zeta.iter().map(|v| fmt(*v)));
            row.push(fmt(rec.sigma));
            row.push(rec.status.as_str().into());
            row.push(fmt(rec.necessary_value));
            row.push(fmt(rec.sufficient_eig));
            row.push(rec.iterations.to_string());
            if trace {
                row.push(fmt(rec.primal_residual));
                row.push(fmt(rec.dual_residual));
                row.extend(rec.u_nom.iter().map(|v| fmt(*v)));
            }
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path, trace: bool) -> Result<(), EpisodeError> {
        self.write_csv(std::fs::File::create(path)?, trace)
    }
}

fn fmt(v: f64) -> String {
    format!("{v:e}")
}

/// Runs the true plant with `filter` in the loop.
pub fn run_episode(
    plant: &PlantModel,
    design: &HocbfDesign,
    controller: &dyn NominalController,
    filter: &dyn SafetyFilter,
    sim: &SimConfig,
    stop_on_violation: bool,
) -> Result<EpisodeLog, EpisodeError> {
    let substeps = sim.substeps()?;
    if sim.initial_state.len() != plant.state_dim() {
        return Err(EpisodeError::InvalidSim(format!(
            "initial state has {} entries, plant has {}",
            sim.initial_state.len(),
            plant.state_dim()
        )));
    }
    let steps = sim.control_steps();
    let mut x = sim.initial_state.clone();
    let mut log = EpisodeLog {
        records: Vec::with_capacity(steps),
        dt: sim.dt,
        termination: Termination::Completed,
        violation_time: None,
    };
    let mut consecutive = 0usize;
    for k in 0..steps {
        let t = k as f64 * sim.control_period;
        let h = design.barrier(&x);
        let zeta = design.zeta_chain(&x);
        let u_nom = controller.input(t, &x);
        let soft = controller.soft_constraints(&x);
        let step = filter.filter(&x, &u_nom, &soft)?;
        let mut rec = EpisodeRecord {
            t,
            x: x.clone(),
            u: step.u.clone(),
            u_nom,
            h,
            zeta,
            sigma: step.sigma,
            status: step.status,
            necessary_value: step.necessary_value,
            sufficient_eig: step.sufficient_eig,
            iterations: step.iterations,
            primal_residual: step.primal_residual,
            dual_residual: step.dual_residual,
            segment: Vec::new(),
        };
        if h < 0.0 && log.violation_time.is_none() {
            log.violation_time = Some(t);
        }
        if h < 0.0 && stop_on_violation {
            log.records.push(rec);
            log.termination = Termination::SafetyViolation;
            return Ok(log);
        }
        if step.status == FilterStatus::Optimal {
            consecutive = 0;
        } else {
            consecutive += 1;
        }
        let mut segment = Vec::with_capacity(substeps + 1);
        segment.push(x.clone());
        let mut diverged = false;
        for j in 0..substeps {
            let tj = t + j as f64 * sim.dt;
            let field = |x: &[f64], u: &[f64], t: f64| plant.truth.field(x, u, t);
            match rk4_step(field, &x, &step.u, tj, sim.dt) {
                Ok(next) => {
                    x = next;
                    segment.push(x.clone());
                }
                Err(_) => {
                    diverged = true;
                    break;
                }
            }
        }
        rec.segment = segment;
        log.records.push(rec);
        if diverged {
            log.termination = Termination::Diverged;
            return Ok(log);
        }
        if sim.infeasible_abort > 0 && consecutive >= sim.infeasible_abort {
            log.termination = Termination::InfeasibleAbort;
            return Ok(log);
        }
    }
    Ok(log)
}

/// Central-difference stencil settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdConfig {
    pub dt: f64,
    /// Samples per window, `2 r + 1`.
    pub window: usize,
}

impl FdConfig {
    pub fn for_degree(dt: f64, r: usize) -> Self {
        Self { dt, window: 2 * r + 1 }
    }
}

/// Order-`j` derivative at the window center by `j` nested central differences
/// (stencil half-width `j` samples).
pub fn fd_derivative(samples: &[f64], order: usize, dt: f64) -> Result<f64, EpisodeError> {
    if !(dt > 0.0) {
        return Err(EpisodeError::InvalidSim(format!("dt must be positive, got {dt}")));
    }
    let needed = 2 * order + 1;
    if samples.len() < needed || samples.len() % 2 == 0 {
        return Err(EpisodeError::InsufficientSamples { order, needed, got: samples.len() });
    }
    let c = samples.len() / 2;
    let mut acc = 0.0;
    let mut binom = 1.0;
    for i in 0..=order {
        let idx = c + order - 2 * i;
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        acc += sign * binom * samples[idx];
        binom = binom * (order - i) as f64 / (i + 1) as f64;
    }
    Ok(acc / (2.0 * dt).powi(order as i32))
}

/// One labeled residual sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRow {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: f64,
    /// Leading-order truncation error estimate of `z`.
    pub truncation: f64,
}

/// Labels from one control interval: the window is centered mid-interval so the input
/// is constant across it.
pub fn label_window(
    segment: &[Vec<f64>],
    u: &[f64],
    design: &HocbfDesign,
    fd: &FdConfig,
) -> Result<LabelRow, EpisodeError> {
    let r = design.relative_degree();
    let half = fd.window / 2;
    if fd.window % 2 == 0 || half < r {
        return Err(EpisodeError::InsufficientSamples { order: r, needed: 2 * r + 1, got: fd.window });
    }
    if segment.len() < 2 * half + 1 {
        return Err(EpisodeError::InsufficientSamples { order: r, needed: fd.window, got: segment.len() });
    }
    let center = (segment.len() - 1) / 2;
    if center < half || center + half >= segment.len() {
        return Err(EpisodeError::InsufficientSamples { order: r, needed: fd.window, got: segment.len() });
    }
    let h: Vec<f64> = segment.iter().map(|x| design.barrier(x)).collect();
    let window = &h[center - half..=center + half];
    let x = segment[center].clone();
    let cert = design.certificate_terms(&x)?;
    let gamma = design.gamma();
    let mut z = 0.0;
    let mut truncation = 0.0;
    let wide_half = center.min(segment.len() - 1 - center);
    let wide = &h[center - wide_half..=center + wide_half];
    for j in 1..=r {
        let mut delta = fd_derivative(window, j, fd.dt)? - cert.zf[j - 1];
        if j == r {
            delta -= cert.zg.iter().zip(u).map(|(a, b)| a * b).sum::<f64>();
        }
        z += gamma[j - 1] * delta;
        if j + 2 <= wide_half {
            let higher = fd_derivative(wide, j + 2, fd.dt)?;
            truncation += gamma[j - 1] * j as f64 * fd.dt * fd.dt / 6.0 * higher.abs();
        }
    }
    let mut y = gamma.to_vec();
    y.extend_from_slice(u);
    Ok(LabelRow { x, y, z, truncation })
}

/// Labels every `stride`-th complete control interval of an episode.
pub fn label_residual(
    log: &EpisodeLog,
    design: &HocbfDesign,
    fd: &FdConfig,
    stride: usize,
) -> Result<Vec<LabelRow>, EpisodeError> {
    let stride = stride.max(1);
    let mut rows = Vec::new();
    for (k, rec) in log.records.iter().enumerate() {
        if k % stride != 0 || rec.segment.len() < fd.window {
            continue;
        }
        rows.push(label_window(&rec.segment, &rec.u, design, fd)?);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpSettings {
    /// One base kernel per regressor coordinate (`r + m`).
    pub kernels: Vec<BaseKernelParams>,
    pub noise_floor: f64,
    pub jitter: Vec<f64>,
    /// Lengthscale multipliers tried by marginal-likelihood refinement; empty disables it.
    pub refine_factors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub gp: GpSettings,
    pub beta: f64,
    pub solver: SolverSettings,
    pub max_episodes: usize,
    /// Control intervals between labeled rows.
    pub label_stride: usize,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub model: Arc<CompositeGpModel>,
    pub logs: Vec<EpisodeLog>,
    pub dataset: ResidualDataset,
    pub episodes: usize,
}

impl TrainingOutcome {
    /// The violation-free episode that ended training.
    pub fn final_log(&self) -> &EpisodeLog {
        self.logs.last().expect("at least one episode")
    }
}

#[derive(Debug, Clone)]
pub struct TrainingFailure {
    pub logs: Vec<EpisodeLog>,
    pub dataset: ResidualDataset,
}

/// Noise variance `max(floor, mean truncation^2)`.
pub fn noise_variance(rows: &[LabelRow], floor: f64) -> f64 {
    if rows.is_empty() {
        return floor;
    }
    let mean = rows.iter().map(|r| r.truncation * r.truncation).sum::<f64>() / rows.len() as f64;
    floor.max(mean)
}

/// Episode 1 runs the nominal QP filter; later episodes run the SOCP filter with a model
/// refit on all labels so far. Stops at the first episode that completes without a
/// violation or abort.
pub fn episodic_train(
    plant: &PlantModel,
    design: &HocbfDesign,
    controller: &dyn NominalController,
    sim: &SimConfig,
    cfg: &TrainingConfig,
) -> Result<TrainingOutcome, EpisodeError> {
    if cfg.max_episodes == 0 {
        return Err(EpisodeError::InvalidSim("max_episodes must be at least 1".into()));
    }
    let r = design.relative_degree();
    let m = design.input_dim();
    let fd = FdConfig::for_degree(sim.dt, r);
    let mut rows: Vec<LabelRow> = Vec::new();
    let mut dataset = ResidualDataset::empty(plant.state_dim(), r + m, cfg.gp.noise_floor)?;
    let mut model = Arc::new(CompositeGpModel::fit(
        Arc::new(dataset.clone()),
        cfg.gp.kernels.clone(),
        &cfg.gp.jitter,
    )?);
    let mut logs = Vec::new();
    for episode in 1..=cfg.max_episodes {
        let log = if episode == 1 {
            let qp = QpFilter { design: design.clone() };
            run_episode(plant, design, controller, &qp, sim, true)?
        } else {
            let socp = GpSocpFilter {
                design: design.clone(),
                model: model.clone(),
                beta: cfg.beta,
                settings: cfg.solver,
            };
            run_episode(plant, design, controller, &socp, sim, true)?
        };
        let safe = log.termination == Termination::Completed && log.violation_time.is_none();
        if !safe {
            rows.extend(label_residual(&log, design, &fd, cfg.label_stride)?);
        }
        logs.push(log);
        if safe {
            return Ok(TrainingOutcome { model, logs, dataset, episodes: episode });
        }
        dataset = ResidualDataset::empty(plant.state_dim(), r + m, noise_variance(&rows, cfg.gp.noise_floor))?;
        for row in &rows {
            dataset.push(row.x.clone(), row.y.clone(), row.z)?;
        }
        let shared = Arc::new(dataset.clone());
        let kernels = refine_lengthscales(shared.clone(), &cfg.gp.kernels, &cfg.gp.refine_factors, &cfg.gp.jitter)?;
        model = Arc::new(CompositeGpModel::fit(shared, kernels, &cfg.gp.jitter)?);
    }
    Err(EpisodeError::Exhausted {
        episodes: cfg.max_episodes,
        failure: Box::new(TrainingFailure { logs, dataset }),
    })
}
