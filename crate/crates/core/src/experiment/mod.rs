//! Experiment assembly: configuration, benchmark arms and validation suites.

pub mod benchmark;
pub mod config;
pub mod validation;

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::barrier::{BarrierError, HocbfDesign, LieChain};
use crate::episodic::{GpSettings, SimConfig, TrainingConfig};
use crate::filter::SoftConstraint;
use crate::plant::{
    lqr_gain, AccCruiseController, AccGapChain, AccModel, LinearFeedback, NominalController, PlantError,
    PlantModel, SuspensionModel, SuspensionTravelChain,
};
use crate::poly::{Poly, PolyChain, PolySystem};
use crate::socp::SolverSettings;

pub use config::{ConfigError, ExperimentConfig, PlantConfig};

/// Constant input, used to push the synthetic plant into its barrier.
#[derive(Debug, Clone)]
pub struct ConstantInput {
    pub u: Vec<f64>,
}

impl NominalController for ConstantInput {
    fn input(&self, _t: f64, _x: &[f64]) -> Vec<f64> {
        self.u.clone()
    }

    fn soft_constraints(&self, _x: &[f64]) -> Vec<SoftConstraint> {
        Vec::new()
    }
}

/// Everything a benchmark needs, built from a validated config.
pub struct Scenario {
    pub plant: PlantModel,
    /// Design on the nominal model.
    pub design: HocbfDesign,
    /// Same gains on the true model.
    pub oracle: HocbfDesign,
    pub controller: Arc<dyn NominalController>,
    pub sim: SimConfig,
    pub training: TrainingConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Barrier(#[from] BarrierError),
}

/// Damped integrator chain `x_i' = x_{i+1}`, `x_r' = -x_r + u`; the true model adds
/// `mismatch * x_1^3` to the last drift entry and `mismatch * x_1^2` to the input gain.
pub fn synthetic_system(r: usize, mismatch: f64) -> PolySystem {
    let mut drift: Vec<Poly> = (0..r)
        .map(|i| if i + 1 < r { Poly::var(r, i + 1) } else { Poly::var(r, r - 1).scale(-1.0) })
        .collect();
    let mut input = vec![vec![Poly::zero(r)]; r];
    input[r - 1][0] = Poly::constant(r, 1.0);
    if mismatch != 0.0 {
        let mut cube = vec![0; r];
        cube[0] = 3;
        drift[r - 1].add_term(cube, mismatch);
        let mut square = vec![0; r];
        square[0] = 2;
        input[r - 1][0].add_term(square, mismatch);
    }
    PolySystem::new(drift, input).expect("integrator chain is well formed")
}

impl Scenario {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self, ScenarioError> {
        cfg.validate()?;
        let threshold = cfg.hocbf.threshold;
        let (plant, nominal_chain, true_chain, controller): (
            PlantModel,
            Arc<dyn LieChain>,
            Arc<dyn LieChain>,
            Arc<dyn NominalController>,
        ) = match &cfg.plant {
            PlantConfig::Acc { nominal, truth, desired_speed, clf_rate } => (
                PlantModel::new(
                    "acc",
                    Arc::new(AccModel { params: *truth }),
                    Arc::new(AccModel { params: *nominal }),
                )?,
                Arc::new(AccGapChain { params: *nominal, min_gap: threshold }),
                Arc::new(AccGapChain { params: *truth, min_gap: threshold }),
                Arc::new(AccCruiseController {
                    params: *nominal,
                    v_d: *desired_speed,
                    lambda_rate: *clf_rate,
                    soft_weight: cfg.filter.soft_weight,
                }),
            ),
            PlantConfig::Suspension { nominal, truth, road, lqr_q, lqr_r } => {
                let (a, b) = nominal.linearization();
                let q = DMatrix::identity(4, 4) * *lqr_q;
                let r = DMatrix::identity(1, 1) * *lqr_r;
                let (gain, _) = lqr_gain(&a, &b, &q, &r)?;
                (
                    PlantModel::new(
                        "suspension",
                        Arc::new(SuspensionModel { params: *truth, road: Some(road.clone()) }),
                        Arc::new(SuspensionModel { params: *nominal, road: None }),
                    )?,
                    Arc::new(SuspensionTravelChain { params: *nominal, max_travel: threshold }),
                    Arc::new(SuspensionTravelChain { params: *truth, max_travel: threshold }),
                    Arc::new(LinearFeedback { gain }),
                )
            }
            PlantConfig::Synthetic { relative_degree, mismatch, push_input } => {
                let r = *relative_degree;
                let nominal = synthetic_system(r, 0.0);
                let truth = synthetic_system(r, *mismatch);
                let h = Poly::constant(r, threshold).sub(&Poly::var(r, 0));
                (
                    PlantModel::new("synthetic", Arc::new(truth.clone()), Arc::new(nominal.clone()))?,
                    Arc::new(PolyChain::new(&nominal, h.clone(), r)?),
                    Arc::new(PolyChain::new(&truth, h, r)?),
                    Arc::new(ConstantInput { u: vec![*push_input] }),
                )
            }
        };
        let design = match (&cfg.hocbf.gains, &cfg.hocbf.characteristic) {
            (Some(g), _) => HocbfDesign::new(nominal_chain, g.clone())?,
            (None, Some(c)) => HocbfDesign::from_characteristic(nominal_chain, c)?,
            (None, None) => unreachable!("validated config sets gains or characteristic"),
        };
        let oracle = design.with_chain(true_chain)?;
        let sim = SimConfig {
            dt: cfg.sim.dt,
            control_period: cfg.sim.control_period,
            horizon: cfg.sim.horizon,
            initial_state: cfg.sim.initial_state.clone(),
            infeasible_abort: cfg.sim.infeasible_abort,
        };
        let training = TrainingConfig {
            gp: GpSettings {
                kernels: cfg.gp.kernels.clone(),
                noise_floor: cfg.gp.noise_floor,
                jitter: cfg.gp.jitter.clone(),
                refine_factors: cfg.gp.refine_factors.clone(),
            },
            beta: cfg.filter.beta,
            solver: SolverSettings { tol: cfg.filter.tol, max_iter: cfg.filter.max_iter },
            max_episodes: cfg.episodic.max_episodes,
            label_stride: cfg.episodic.label_stride,
        };
        Ok(Self { plant, design, oracle, controller, sim, training })
    }
}
