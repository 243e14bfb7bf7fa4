//! Seeded property suites with a machine-readable report.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::ExperimentConfig;
use super::{Scenario, ScenarioError};
use crate::barrier::{halfspace_qp_filter, CertificateTerms};
use crate::episodic::{label_residual, noise_variance, run_episode, EpisodeError, FdConfig};
use crate::filter::{
    assemble_safety_cone, build_program, feasibility_necessary, feasibility_sufficient, filter_step, s_matrix,
    solve, FilterError, FilterStatus, GpSocpFilter, QpFilter, SafetyFilter,
};
use crate::gp::{composite_kernel, gram_matrix, BaseKernelParams, CompositeGpModel, GpError, ResidualDataset};
use crate::poly::{recursive_certificate, SyntheticPair};
use crate::socp::SolverSettings;

#[derive(Debug, Error)]
pub enum ValidationError {
    #[error("unknown suite {0:?} (expected kernel, solver, decomposition, feasibility or all)")]
    UnknownSuite(String),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Barrier(#[from] crate::barrier::BarrierError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Kernel,
    Solver,
    Decomposition,
    Feasibility,
    All,
}

impl FromStr for Suite {
    type Err = ValidationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "kernel" => Ok(Suite::Kernel),
            "solver" => Ok(Suite::Solver),
            "decomposition" => Ok(Suite::Decomposition),
            "feasibility" => Ok(Suite::Feasibility),
            "all" => Ok(Suite::All),
            other => Err(ValidationError::UnknownSuite(other.into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub passed: bool,
    pub cases: usize,
    /// First failing cases, one line each.
    pub failures: Vec<String>,
    pub failure_count: usize,
    pub stats: BTreeMap<String, f64>,
}

impl SuiteReport {
    fn new(name: &str) -> Self {
        Self {
            suite: name.into(),
            passed: true,
            cases: 0,
            failures: Vec::new(),
            failure_count: 0,
            stats: BTreeMap::new(),
        }
    }

    fn check(&mut self, ok: bool, describe: impl FnOnce() -> String) {
        self.cases += 1;
        if !ok {
            self.passed = false;
            self.failure_count += 1;
            if self.failures.len() < 20 {
                self.failures.push(describe());
            }
        }
    }

    fn stat(&mut self, key: &str, value: f64) {
        self.stats.insert(key.into(), value);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub seed: u64,
    pub passed: bool,
    pub suites: Vec<SuiteReport>,
}

pub fn run_validation(suite: Suite, seed: u64) -> Result<ValidationReport, ValidationError> {
    let suites = match suite {
        Suite::Kernel => vec![kernel_suite(seed)?],
        Suite::Solver => vec![solver_suite(seed)?],
        Suite::Decomposition => vec![decomposition_suite(seed)?],
        Suite::Feasibility => vec![feasibility_suite(seed)?],
        Suite::All => vec![
            kernel_suite(seed)?,
            solver_suite(seed)?,
            decomposition_suite(seed)?,
            feasibility_suite(seed)?,
        ],
    };
    Ok(ValidationReport { seed, passed: suites.iter().all(|s| s.passed), suites })
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn random_kernels(rng: &mut ChaCha8Rng, q: usize, n: usize) -> Vec<BaseKernelParams> {
    (0..q)
        .map(|_| BaseKernelParams {
            signal_variance: rng.random_range(0.1..=2.0),
            lengthscales: (0..n).map(|_| rng.random_range(0.3..=3.0)).collect(),
        })
        .collect()
}

fn random_dataset(rng: &mut ChaCha8Rng, rows: usize, n: usize, q: usize, noise: f64) -> ResidualDataset {
    let mut ds = ResidualDataset::empty(n, q, noise).expect("non-negative noise");
    for _ in 0..rows {
        let x = (0..n).map(|_| rng.random_range(-2.0..=2.0)).collect();
        let y = (0..q).map(|_| rng.random_range(-2.0..=2.0)).collect();
        ds.push(x, y, rng.random_range(-1.0..=1.0)).expect("consistent dimensions");
    }
    ds
}

/// Plain GP on stacked inputs `(x, y)` with the composite kernel, solved by LU.
fn stacked_posterior(ds: &ResidualDataset, params: &[BaseKernelParams], x: &[f64], y: &[f64]) -> Result<(f64, f64), GpError> {
    let n = ds.len();
    let mut k = DMatrix::zeros(n, n);
    let mut ks = DVector::zeros(n);
    for i in 0..n {
        for j in 0..n {
            k[(i, j)] = composite_kernel(&ds.states[i], &ds.regressors[i], &ds.states[j], &ds.regressors[j], params)?;
        }
        k[(i, i)] += ds.noise_variance;
        ks[i] = composite_kernel(x, y, &ds.states[i], &ds.regressors[i], params)?;
    }
    let lu = k.lu();
    let z = DVector::from_column_slice(&ds.labels);
    let alpha = lu.solve(&z).ok_or(GpError::IllConditioned(0.0))?;
    let v = lu.solve(&ks).ok_or(GpError::IllConditioned(0.0))?;
    let prior = composite_kernel(x, y, x, y, params)?;
    Ok((ks.dot(&alpha), prior - ks.dot(&v)))
}

/// Gram positive semidefiniteness, posterior homogeneity in `y`, and agreement with a
/// stacked-input GP.
pub fn kernel_suite(seed: u64) -> Result<SuiteReport, ValidationError> {
    let mut rep = SuiteReport::new("kernel");
    let mut rng = rng_for(seed, 1);
    let mut min_eig = f64::INFINITY;
    for case in 0..200 {
        let rows = rng.random_range(1..=20);
        let n = rng.random_range(1..=4);
        let q = rng.random_range(1..=4);
        let params = random_kernels(&mut rng, q, n);
        let ds = random_dataset(&mut rng, rows, n, q, 0.0);
        let k = gram_matrix(&ds, &params);
        let eig = k.symmetric_eigenvalues().min();
        min_eig = min_eig.min(eig);
        rep.check(eig >= -1e-8, || format!("gram {case}: min eigenvalue {eig:e}"));
    }
    rep.stat("min_gram_eigenvalue", min_eig);

    let mut worst_homog = 0.0f64;
    let mut worst_oracle = 0.0f64;
    for case in 0..50 {
        let rows = rng.random_range(1..=15);
        let n = rng.random_range(1..=3);
        let q = rng.random_range(2..=4);
        let params = random_kernels(&mut rng, q, n);
        let noise = rng.random_range(0.01..=0.2);
        let ds = Arc::new(random_dataset(&mut rng, rows, n, q, noise));
        let model = CompositeGpModel::fit(ds.clone(), params.clone(), &[0.0])?;
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..=2.0)).collect();
        let y: Vec<f64> = (0..q).map(|_| rng.random_range(-2.0..=2.0)).collect();
        let alpha = rng.random_range(-3.0..=3.0);
        let ya: Vec<f64> = y.iter().map(|v| alpha * v).collect();
        let (m1, v1) = (model.mean(&x, &y)?, model.variance(&x, &y)?);
        let (m2, v2) = (model.mean(&x, &ya)?, model.variance(&x, &ya)?);
        let homog = (m2 - alpha * m1).abs().max((v2 - alpha * alpha * v1).abs());
        worst_homog = worst_homog.max(homog);
        rep.check(homog <= 1e-10, || format!("homogeneity {case}: error {homog:e}"));
        let (mo, vo) = stacked_posterior(&ds, &params, &x, &y)?;
        let err = (m1 - mo).abs().max((v1 - vo).abs());
        worst_oracle = worst_oracle.max(err);
        rep.check(err <= 1e-8, || format!("stacked oracle {case}: error {err:e}"));
    }
    rep.stat("max_homogeneity_error", worst_homog);
    rep.stat("max_stacked_oracle_error", worst_oracle);
    Ok(rep)
}

/// Smallest-norm point of the feasible interval by exhaustive search on `[-lim, lim]`.
pub fn grid_projection(slack: impl Fn(f64) -> f64, u_nom: f64, lim: f64, step: f64) -> Option<f64> {
    let n = (2.0 * lim / step).round() as i64;
    let mut best: Option<f64> = None;
    for i in 0..=n {
        let u = -lim + i as f64 * step;
        if slack(u) >= 0.0 && best.is_none_or(|b| (u - u_nom).abs() < (b - u_nom).abs()) {
            best = Some(u);
        }
    }
    best
}

/// Random single-input cone problems against a grid search with step `1e-4`.
pub fn solver_suite(seed: u64) -> Result<SuiteReport, ValidationError> {
    let mut rep = SuiteReport::new("solver");
    let mut rng = rng_for(seed, 2);
    let settings = SolverSettings::default();
    let (lim, step) = (10.0, 1e-4);
    let mut worst = 0.0f64;
    let mut iterations = 0usize;
    let mut drawn = 0usize;
    while rep.cases < 500 {
        drawn += 1;
        let cert = CertificateTerms {
            zf: vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
            zg: vec![rng.random_range(-2.0..2.0)],
            constant: rng.random_range(-2.0..2.0),
        };
        let b = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let sigma = b.transpose() * &b * 0.3 + DMatrix::identity(3, 3) * 0.05;
        let mu = DVector::from_fn(3, |_, _| rng.random_range(-0.5..0.5));
        let beta = rng.random_range(0.1..3.0);
        let gamma = [rng.random_range(0.5..5.0), 1.0];
        let safety = assemble_safety_cone(&cert, &mu, &sigma, beta, &gamma)?;
        let u_nom = rng.random_range(-5.0..5.0);
        let Some(ug) = grid_projection(|u| safety.slack(&[u]), u_nom, lim, step) else { continue };
        if ug.abs() > lim - 0.01 {
            continue;
        }
        let out = filter_step(&[u_nom], &safety, &[], &settings)?;
        iterations += out.iterations;
        let err = (out.u[0] - ug).abs();
        worst = worst.max(err);
        let case = rep.cases;
        rep.check(out.status == FilterStatus::Optimal && err <= 2e-4, || {
            format!("instance {case}: u {} grid {ug} status {}", out.u[0], out.status.as_str())
        });
    }
    rep.stat("max_abs_error", worst);
    rep.stat("mean_iterations", iterations as f64 / rep.cases as f64);
    rep.stat("instances_drawn", drawn as f64);
    Ok(rep)
}

/// True-model certificate against nominal certificate plus the aggregated residual.
pub fn decomposition_suite(seed: u64) -> Result<SuiteReport, ValidationError> {
    let mut rep = SuiteReport::new("decomposition");
    let mut rng = rng_for(seed, 3);
    let mut worst = 0.0f64;
    for r in 2..=4 {
        let pair = SyntheticPair::random(r, &mut rng);
        let gains: Vec<f64> = (0..r).map(|_| rng.random_range(0.5..=3.0)).collect();
        let design = crate::barrier::HocbfDesign::new(Arc::new(pair.nominal_chain()?), gains.clone())?;
        let gamma = design.gamma().to_vec();
        for case in 0..100 {
            let x: Vec<f64> = (0..r).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let u = [rng.random_range(-2.0..=2.0)];
            let truth = recursive_certificate(&pair.truth, &pair.barrier, &gains, &x, &u);
            let nominal = design.certificate_terms(&x)?.evaluate(&gamma, &u);
            let (df, dg) = pair.residuals(&x)?;
            let delta: f64 =
                gamma.iter().zip(&df).map(|(g, d)| g * d).sum::<f64>() + dg.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>();
            let err = (truth - (nominal + delta)).abs();
            worst = worst.max(err);
            rep.check(err <= 1e-8, || format!("r={r} case {case}: error {err:e}"));
        }
    }
    rep.stat("max_abs_error", worst);
    Ok(rep)
}

/// Filter states drawn around both benchmarks' nominal-filter trajectories, with a
/// residual model fit on that episode's labels.
struct StateSampler {
    filter: GpSocpFilter,
    states: Vec<Vec<f64>>,
    spread: Vec<f64>,
    controller: Arc<dyn crate::plant::NominalController>,
}

fn sampler(cfg: &ExperimentConfig) -> Result<StateSampler, ValidationError> {
    let sc = Scenario::build(cfg)?;
    let qp = QpFilter { design: sc.design.clone() };
    let log = run_episode(&sc.plant, &sc.design, sc.controller.as_ref(), &qp, &sc.sim, true)?;
    let fd = FdConfig::for_degree(sc.sim.dt, sc.design.relative_degree());
    let rows = label_residual(&log, &sc.design, &fd, sc.training.label_stride)?;
    let mut ds = ResidualDataset::empty(
        sc.plant.state_dim(),
        sc.design.relative_degree() + sc.design.input_dim(),
        noise_variance(&rows, sc.training.gp.noise_floor),
    )?;
    for row in rows {
        ds.push(row.x, row.y, row.z)?;
    }
    let model = CompositeGpModel::fit(Arc::new(ds), sc.training.gp.kernels.clone(), &sc.training.gp.jitter)?;
    let states: Vec<Vec<f64>> = log.records.iter().map(|r| r.x.clone()).collect();
    let n = sc.plant.state_dim();
    let spread = (0..n)
        .map(|i| {
            let (lo, hi) = states.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x[i]), hi.max(x[i])));
            0.1 * (hi - lo).max(1e-3)
        })
        .collect();
    Ok(StateSampler {
        filter: GpSocpFilter {
            design: sc.design.clone(),
            model: Arc::new(model),
            beta: cfg.filter.beta,
            settings: sc.training.solver,
        },
        states,
        spread,
        controller: sc.controller.clone(),
    })
}

impl StateSampler {
    fn draw(&self, rng: &mut ChaCha8Rng) -> (Vec<f64>, f64) {
        let base = &self.states[rng.random_range(0..self.states.len())];
        let x: Vec<f64> = base.iter().zip(&self.spread).map(|(v, s)| v + rng.random_range(-1.0..=1.0) * s).collect();
        let u = self.controller.input(0.0, &x)[0];
        let u_nom = u + rng.random_range(-1.0..=1.0) * (1.0 + u.abs());
        (x, u_nom)
    }
}

/// Necessary/sufficient feasibility conditions against the raw solver, and the
/// zero-confidence reduction to the closed-form projection.
pub fn feasibility_suite(seed: u64) -> Result<SuiteReport, ValidationError> {
    let mut rep = SuiteReport::new("feasibility");
    let mut rng = rng_for(seed, 4);
    let samplers = [sampler(&ExperimentConfig::acc_default())?, sampler(&ExperimentConfig::suspension_default())?];
    let mut optimal = 0usize;
    let mut certified = 0usize;
    let mut infeasible = 0usize;
    for (k, s) in samplers.iter().enumerate() {
        for case in 0..500 {
            let (x, u_nom) = s.draw(&mut rng);
            let beta = 10f64.powf(rng.random_range(-1.5..=0.7));
            let filter = GpSocpFilter { beta, ..s.filter.clone() };
            let safety = filter.safety_cone(&x)?;
            let out = solve(&build_program(&[u_nom], &safety, &[]), &filter.settings)?;
            let necessary = feasibility_necessary(&safety.phi(), &safety.sigma, beta)?;
            let r = safety.relative_degree();
            let (cert, eig) = feasibility_sufficient(&s_matrix(&safety).view((r, r), (1, 1)).into_owned());
            let is_opt = out.status == FilterStatus::Optimal;
            optimal += is_opt as usize;
            certified += cert as usize;
            infeasible += (out.status == FilterStatus::Infeasible) as usize;
            rep.check(!is_opt || necessary <= 1e-8, || {
                format!("benchmark {k} case {case}: optimal but necessary value {necessary:e}")
            });
            rep.check(!cert || is_opt, || {
                format!("benchmark {k} case {case}: certified (eig {eig:e}) but status {}", out.status.as_str())
            });
        }
    }
    rep.stat("optimal", optimal as f64);
    rep.stat("certified", certified as f64);
    rep.stat("infeasible", infeasible as f64);

    let mut worst = 0.0f64;
    for (k, s) in samplers.iter().enumerate() {
        for case in 0..100 {
            let (x, u_nom) = s.draw(&mut rng);
            let filter = GpSocpFilter { beta: 0.0, ..s.filter.clone() };
            let safety = filter.safety_cone(&x)?;
            let Ok(expected) = halfspace_qp_filter(&[u_nom], safety.c.as_slice(), safety.d) else {
                continue;
            };
            let got = filter.filter(&x, &[u_nom], &[])?;
            let err = (got.u[0] - expected[0]).abs();
            worst = worst.max(err);
            rep.check(err <= 1e-8, || format!("zero confidence, benchmark {k} case {case}: error {err:e}"));
        }
    }
    rep.stat("max_zero_confidence_error", worst);
    Ok(rep)
}
