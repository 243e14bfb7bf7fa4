//! Uncertainty-aware min-norm safety filter as a second-order cone program.
//!
//! With posterior coefficients `(mu, Sigma)` and `Sigma = L^T L`, the chance
//! constraint `mean - beta * std >= 0` on the certificate becomes
//! `||A u + b|| <= c u + d`, which is embedded next to the epigraph cone of the
//! min-norm objective.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::barrier::{halfspace_qp_filter, BarrierError, CertificateTerms, HocbfDesign};
use crate::gp::{CompositeGpModel, GpError};
use crate::socp::{
    solve_cone_program, AffineConstraint, ConeProgram, SocConstraint, SolveStatus, SolverError,
    SolverSettings,
};

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("confidence scale must be finite and non-negative, got {0}")]
    BadBeta(f64),
    #[error(transparent)]
    Barrier(#[from] BarrierError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Upper-triangular `L` with `L^T L = sigma`.
pub fn matrix_sqrt_factor(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>, FilterError> {
    if !sigma.is_square() {
        return Err(FilterError::DimensionMismatch { expected: sigma.nrows(), got: sigma.ncols() });
    }
    let chol = sigma.clone().cholesky().ok_or(FilterError::NotPositiveDefinite)?;
    Ok(chol.l().transpose())
}

/// Per-step safety cone `||A u + b|| <= c u + d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SafetyConeData {
    /// `beta * L^m`, `(m + r) x m`
    pub a: DMatrix<f64>,
    /// `beta * L^r gamma`
    pub b: DVector<f64>,
    /// `zeta_g + mu_m`
    pub c: DVector<f64>,
    /// `(zeta_f + mu_r) . gamma + e_r h`
    pub d: f64,
    /// `zeta_f + mu_r` with `e_r h` added to the last entry, so `d = phi_r . gamma`.
    pub phi_r: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub factor: DMatrix<f64>,
    pub beta: f64,
    pub gamma: DVector<f64>,
}

impl SafetyConeData {
    pub fn relative_degree(&self) -> usize {
        self.phi_r.len()
    }

    pub fn input_dim(&self) -> usize {
        self.c.len()
    }

    /// `[phi_r, c]`.
    pub fn phi(&self) -> DVector<f64> {
        let r = self.relative_degree();
        let m = self.input_dim();
        DVector::from_fn(r + m, |i, _| if i < r { self.phi_r[i] } else { self.c[i - r] })
    }

    /// `c u + d - ||A u + b||`.
    pub fn slack(&self, u: &[f64]) -> f64 {
        let uv = DVector::from_column_slice(u);
        self.c.dot(&uv) + self.d - (&self.a * &uv + &self.b).norm()
    }

    /// `[gamma; u]`.
    pub fn regressor(&self, u: &[f64]) -> DVector<f64> {
        let r = self.relative_degree();
        DVector::from_fn(r + u.len(), |i, _| if i < r { self.gamma[i] } else { u[i - r] })
    }
}

pub fn assemble_safety_cone(
    cert: &CertificateTerms,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    beta: f64,
    gamma: &[f64],
) -> Result<SafetyConeData, FilterError> {
    let r = gamma.len();
    let m = cert.zg.len();
    if cert.zf.len() != r {
        return Err(FilterError::DimensionMismatch { expected: r, got: cert.zf.len() });
    }
    if mu.len() != r + m {
        return Err(FilterError::DimensionMismatch { expected: r + m, got: mu.len() });
    }
    if sigma.shape() != (r + m, r + m) {
        return Err(FilterError::DimensionMismatch { expected: r + m, got: sigma.nrows() });
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(FilterError::BadBeta(beta));
    }
    let factor = matrix_sqrt_factor(sigma)?;
    let gv = DVector::from_column_slice(gamma);
    let mut phi_r = DVector::from_fn(r, |i, _| cert.zf[i] + mu[i]);
    // gamma_r = 1, so the constant rides on the last drift entry
    phi_r[r - 1] += cert.constant / gamma[r - 1];
    let a = factor.columns(r, m) * beta;
    let b = factor.columns(0, r) * &gv * beta;
    let c = DVector::from_fn(m, |i, _| cert.zg[i] + mu[r + i]);
    let d = phi_r.dot(&gv);
    Ok(SafetyConeData { a, b, c, d, phi_r, sigma: sigma.clone(), factor, beta, gamma: gv })
}

/// Penalized affine objective `a . u + b >= 0`, relaxed by a slack costing `weight`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftConstraint {
    pub a: Vec<f64>,
    pub b: f64,
    pub weight: f64,
}

/// Decision vector `[u, t, slack_1, ..]`.
pub fn build_program(u_nom: &[f64], safety: &SafetyConeData, soft: &[SoftConstraint]) -> ConeProgram {
    let m = u_nom.len();
    let nw = m + 1 + soft.len();
    let mut cost = DVector::zeros(nw);
    cost[m] = 1.0;
    for (j, s) in soft.iter().enumerate() {
        cost[m + 1 + j] = s.weight;
    }
    let mut m1 = DMatrix::zeros(m, nw);
    for i in 0..m {
        m1[(i, i)] = 1.0;
    }
    let mut p1 = DVector::zeros(nw);
    p1[m] = 1.0;
    let epigraph = SocConstraint { m: m1, n: DVector::from_fn(m, |i, _| -u_nom[i]), p: p1, q: 0.0 };

    let q = safety.a.nrows();
    let mut m2 = DMatrix::zeros(q, nw);
    m2.view_mut((0, 0), (q, m)).copy_from(&safety.a);
    let mut p2 = DVector::zeros(nw);
    p2.rows_mut(0, m).copy_from(&safety.c);
    let cone = SocConstraint { m: m2, n: safety.b.clone(), p: p2, q: safety.d };

    let mut affines = Vec::with_capacity(2 * soft.len());
    for (j, s) in soft.iter().enumerate() {
        let mut a = DVector::zeros(nw);
        for i in 0..m {
            a[i] = s.a[i];
        }
        a[m + 1 + j] = 1.0;
        affines.push(AffineConstraint { a, b: s.b });
        let mut nonneg = DVector::zeros(nw);
        nonneg[m + 1 + j] = 1.0;
        affines.push(AffineConstraint { a: nonneg, b: 0.0 });
    }
    ConeProgram { cost, cones: vec![epigraph, cone], affines }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

impl FilterStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            FilterStatus::Optimal => "optimal",
            FilterStatus::Infeasible => "infeasible",
            FilterStatus::MaxIterations => "max_iterations",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterDiagnostics {
    /// Necessary-condition value; positive certifies infeasibility.
    pub necessary_condition_value: f64,
    /// Largest eigenvalue of the input block of `S`; negative certifies feasibility.
    pub sufficient_condition_eigenvalue: f64,
    /// One entry per cone, then per affine constraint, at the returned point.
    pub constraint_slacks: Vec<f64>,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub u: Vec<f64>,
    pub t: f64,
    pub status: FilterStatus,
    pub iterations: usize,
    pub diagnostics: FilterDiagnostics,
}

/// Runs the interior-point solver on an assembled program; the epigraph cone must come first.
pub fn solve(program: &ConeProgram, settings: &SolverSettings) -> Result<FilterOutcome, FilterError> {
    let m = program.cones.first().map_or(0, |c| c.m.nrows());
    let sol = solve_cone_program(program, settings)?;
    let status = match sol.status {
        SolveStatus::Optimal => FilterStatus::Optimal,
        SolveStatus::PrimalInfeasible => FilterStatus::Infeasible,
        SolveStatus::DualInfeasible | SolveStatus::MaxIterations | SolveStatus::Stalled => {
            FilterStatus::MaxIterations
        }
    };
    let x = sol.x;
    Ok(FilterOutcome {
        u: x.rows(0, m).iter().copied().collect(),
        t: x[m],
        status,
        iterations: sol.iterations,
        diagnostics: FilterDiagnostics {
            necessary_condition_value: f64::NAN,
            sufficient_condition_eigenvalue: f64::NAN,
            constraint_slacks: program_slacks(program, &x),
            primal_residual: sol.primal_residual,
            dual_residual: sol.dual_residual,
        },
    })
}

fn program_slacks(program: &ConeProgram, x: &DVector<f64>) -> Vec<f64> {
    program
        .cones
        .iter()
        .map(|c| c.slack(x))
        .chain(program.affines.iter().map(|a| a.slack(x)))
        .collect()
}

/// `1 - phi Sigma^-1 phi^T / beta^2`.
pub fn feasibility_necessary(phi: &DVector<f64>, sigma: &DMatrix<f64>, beta: f64) -> Result<f64, FilterError> {
    if phi.len() != sigma.nrows() {
        return Err(FilterError::DimensionMismatch { expected: sigma.nrows(), got: phi.len() });
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(FilterError::BadBeta(beta));
    }
    let chol = sigma.clone().cholesky().ok_or(FilterError::NotPositiveDefinite)?;
    let w = chol.l().solve_lower_triangular(phi).ok_or(FilterError::NotPositiveDefinite)?;
    Ok(1.0 - w.norm_squared() / (beta * beta))
}

/// `S = beta^2 Sigma - phi^T phi`, assembled block-wise.
pub fn s_matrix(safety: &SafetyConeData) -> DMatrix<f64> {
    let r = safety.relative_degree();
    let m = safety.input_dim();
    let lr = safety.factor.columns(0, r);
    let beta = safety.beta;
    let s1 = lr.transpose() * lr * (beta * beta) - &safety.phi_r * safety.phi_r.transpose();
    let s2 = lr.transpose() * &safety.a * beta - &safety.phi_r * safety.c.transpose();
    let s3 = safety.a.transpose() * &safety.a - &safety.c * safety.c.transpose();
    let mut s = DMatrix::zeros(r + m, r + m);
    s.view_mut((0, 0), (r, r)).copy_from(&s1);
    s.view_mut((0, r), (r, m)).copy_from(&s2);
    s.view_mut((r, 0), (m, r)).copy_from(&s2.transpose());
    s.view_mut((r, r), (m, m)).copy_from(&s3);
    (&s + s.transpose()) * 0.5
}

pub fn build_s(
    cert: &CertificateTerms,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    beta: f64,
    gamma: &[f64],
) -> Result<DMatrix<f64>, FilterError> {
    Ok(s_matrix(&assemble_safety_cone(cert, mu, sigma, beta, gamma)?))
}

/// `(max eigenvalue < -1e-10, max eigenvalue)`.
pub fn feasibility_sufficient(s3: &DMatrix<f64>) -> (bool, f64) {
    let sym = (s3 + s3.transpose()) * 0.5;
    let max = sym.symmetric_eigenvalues().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (max < -1e-10, max)
}

/// `(phi . y, y^T S y)` with `y = [gamma; u]`.
pub fn pointwise_conditions(gamma: &[f64], u: &[f64], s: &DMatrix<f64>, phi: &DVector<f64>) -> (f64, f64) {
    let y = DVector::from_iterator(gamma.len() + u.len(), gamma.iter().chain(u).copied());
    (phi.dot(&y), (y.transpose() * s * &y)[(0, 0)])
}

/// Full filter step: diagnostics, the inactive-constraint shortcut, the solve and a
/// final Newton polish of the active-cone projection.
pub fn filter_step(
    u_nom: &[f64],
    safety: &SafetyConeData,
    soft: &[SoftConstraint],
    settings: &SolverSettings,
) -> Result<FilterOutcome, FilterError> {
    let m = safety.input_dim();
    if u_nom.len() != m {
        return Err(FilterError::DimensionMismatch { expected: m, got: u_nom.len() });
    }
    for s in soft {
        if s.a.len() != m {
            return Err(FilterError::DimensionMismatch { expected: m, got: s.a.len() });
        }
    }
    let necessary = if safety.beta > 0.0 {
        feasibility_necessary(&safety.phi(), &safety.sigma, safety.beta)?
    } else {
        f64::NAN
    };
    let s = s_matrix(safety);
    let r = safety.relative_degree();
    let (_, max_eig) = feasibility_sufficient(&s.view((r, r), (m, m)).into_owned());
    let program = build_program(u_nom, safety, soft);
    let with_diag = |mut out: FilterOutcome| {
        out.diagnostics.necessary_condition_value = necessary;
        out.diagnostics.sufficient_condition_eigenvalue = max_eig;
        out
    };
    let point = |u: &[f64], t: f64| {
        let mut w = DVector::zeros(program.dimension());
        for i in 0..m {
            w[i] = u[i];
        }
        w[m] = t;
        for (j, c) in soft.iter().enumerate() {
            w[m + 1 + j] = (-(dot(&c.a, u) + c.b)).max(0.0);
        }
        w
    };

    if safety.slack(u_nom) >= 0.0 && soft.iter().all(|c| dot(&c.a, u_nom) + c.b >= 0.0) {
        return Ok(with_diag(FilterOutcome {
            u: u_nom.to_vec(),
            t: 0.0,
            status: FilterStatus::Optimal,
            iterations: 0,
            diagnostics: FilterDiagnostics {
                necessary_condition_value: necessary,
                sufficient_condition_eigenvalue: max_eig,
                constraint_slacks: program_slacks(&program, &point(u_nom, 0.0)),
                primal_residual: 0.0,
                dual_residual: 0.0,
            },
        }));
    }
    if necessary > 0.0 {
        let t = f64::NAN;
        return Ok(with_diag(FilterOutcome {
            u: u_nom.to_vec(),
            t,
            status: FilterStatus::Infeasible,
            iterations: 0,
            diagnostics: FilterDiagnostics {
                necessary_condition_value: necessary,
                sufficient_condition_eigenvalue: max_eig,
                constraint_slacks: program_slacks(&program, &point(u_nom, 0.0)),
                primal_residual: f64::NAN,
                dual_residual: f64::NAN,
            },
        }));
    }

    let mut out = with_diag(solve(&program, settings)?);
    if out.status == FilterStatus::Optimal {
        if let Some(u) = polish(u_nom, safety, &out.u) {
            if soft.iter().all(|c| dot(&c.a, &u) + c.b >= 0.0) {
                let t = u.iter().zip(u_nom).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                out.diagnostics.constraint_slacks = program_slacks(&program, &point(&u, t));
                out.u = u;
                out.t = t;
            }
        }
    }
    Ok(out)
}

/// Newton iterations on the KKT system of `min 1/2 ||u - u_nom||^2  s.t.  g(u) = 0`
/// with `g(u) = c u + d - ||A u + b||`, started from the interior-point solution.
fn polish(u_nom: &[f64], safety: &SafetyConeData, u_ipm: &[f64]) -> Option<Vec<f64>> {
    let m = u_nom.len();
    let u0 = DVector::from_column_slice(u_nom);
    let mut u = DVector::from_column_slice(u_ipm);
    let grad_hess = |u: &DVector<f64>| -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
        let v = &safety.a * u + &safety.b;
        let rho = v.norm();
        if safety.a.amax() == 0.0 {
            return Some((safety.c.dot(u) + safety.d, safety.c.clone(), DMatrix::zeros(m, m)));
        }
        if rho <= 1e-12 * (1.0 + safety.b.norm()) {
            return None;
        }
        let w = &v / rho;
        let g = safety.c.dot(u) + safety.d - rho;
        let grad = &safety.c - safety.a.transpose() * &w;
        let proj = DMatrix::identity(v.len(), v.len()) - &w * w.transpose();
        let hess = -(safety.a.transpose() * proj * &safety.a) / rho;
        Some((g, grad, hess))
    };
    let (_, grad, _) = grad_hess(&u)?;
    let gn = grad.norm_squared();
    if gn == 0.0 {
        return None;
    }
    let mut nu = (&u - &u0).dot(&grad) / gn;
    for _ in 0..30 {
        let (g, grad, hess) = grad_hess(&u)?;
        let rs = &u - &u0 - &grad * nu;
        let scale = 1.0 + u0.amax() + u.amax();
        if rs.amax() <= 1e-15 * scale && g.abs() <= 1e-15 * (1.0 + safety.d.abs()) {
            break;
        }
        let mut kkt = DMatrix::zeros(m + 1, m + 1);
        kkt.view_mut((0, 0), (m, m)).copy_from(&(DMatrix::identity(m, m) - hess * nu));
        for i in 0..m {
            kkt[(i, m)] = -grad[i];
            kkt[(m, i)] = -grad[i];
        }
        let mut rhs = DVector::zeros(m + 1);
        rhs.rows_mut(0, m).copy_from(&(-rs));
        rhs[m] = g;
        let step = kkt.lu().solve(&rhs)?;
        u += step.rows(0, m);
        nu += step[m];
        if !nu.is_finite() || u.iter().any(|v| !v.is_finite()) {
            return None;
        }
    }
    let u_vec: Vec<f64> = u.iter().copied().collect();
    let scale = 1.0 + u0.amax() + u.amax();
    let consistent = u_vec.iter().zip(u_ipm).all(|(a, b)| (a - b).abs() <= 1e-4 * scale);
    let g_new = safety.slack(&u_vec);
    let g_old = safety.slack(u_ipm);
    let feasible = g_new >= g_old.min(0.0) - 1e-13 * (1.0 + safety.d.abs());
    (nu >= 0.0 && consistent && feasible).then_some(u_vec)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One filter evaluation inside a closed loop.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterStep {
    pub u: Vec<f64>,
    pub status: FilterStatus,
    pub iterations: usize,
    /// Posterior standard deviation of the residual at the applied input.
    pub sigma: f64,
    pub necessary_value: f64,
    pub sufficient_eig: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

pub trait SafetyFilter: Send + Sync {
    fn filter(&self, x: &[f64], u_nom: &[f64], soft: &[SoftConstraint]) -> Result<FilterStep, FilterError>;
}

/// Closed-form min-norm filter on the design's own model.
#[derive(Debug, Clone)]
pub struct QpFilter {
    pub design: HocbfDesign,
}

impl SafetyFilter for QpFilter {
    fn filter(&self, x: &[f64], u_nom: &[f64], _soft: &[SoftConstraint]) -> Result<FilterStep, FilterError> {
        let cert = self.design.certificate_terms(x)?;
        let drift = cert.drift_value(self.design.gamma());
        let (u, status) = match halfspace_qp_filter(u_nom, &cert.zg, drift) {
            Ok(u) => (u, FilterStatus::Optimal),
            Err(BarrierError::InfeasibleConstraint(_)) => (u_nom.to_vec(), FilterStatus::Infeasible),
            Err(e) => return Err(e.into()),
        };
        Ok(FilterStep {
            u,
            status,
            iterations: 0,
            sigma: 0.0,
            necessary_value: f64::NAN,
            sufficient_eig: f64::NAN,
            primal_residual: 0.0,
            dual_residual: 0.0,
        })
    }
}

/// SOCP filter using a residual posterior on top of the design's nominal model.
#[derive(Debug, Clone)]
pub struct GpSocpFilter {
    pub design: HocbfDesign,
    pub model: Arc<CompositeGpModel>,
    pub beta: f64,
    pub settings: SolverSettings,
}

impl GpSocpFilter {
    pub fn safety_cone(&self, x: &[f64]) -> Result<SafetyConeData, FilterError> {
        let cert = self.design.certificate_terms(x)?;
        let post = self.model.posterior_coefficients(x)?;
        assemble_safety_cone(&cert, &post.mu, &post.sigma, self.beta, self.design.gamma())
    }
}

impl SafetyFilter for GpSocpFilter {
    fn filter(&self, x: &[f64], u_nom: &[f64], soft: &[SoftConstraint]) -> Result<FilterStep, FilterError> {
        let safety = self.safety_cone(x)?;
        let out = filter_step(u_nom, &safety, soft, &self.settings)?;
        let u = match out.status {
            FilterStatus::Optimal => out.u.clone(),
            FilterStatus::MaxIterations if safety.slack(&out.u) >= 0.0 => out.u.clone(),
            _ => halfspace_qp_filter(u_nom, safety.c.as_slice(), safety.d).unwrap_or_else(|_| u_nom.to_vec()),
        };
        let y = safety.regressor(&u);
        let var = (y.transpose() * &safety.sigma * &y)[(0, 0)];
        Ok(FilterStep {
            u,
            status: out.status,
            iterations: out.iterations,
            sigma: var.max(0.0).sqrt(),
            necessary_value: out.diagnostics.necessary_condition_value,
            sufficient_eig: out.diagnostics.sufficient_condition_eigenvalue,
            primal_residual: out.diagnostics.primal_residual,
            dual_residual: out.diagnostics.dual_residual,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cert(zf: &[f64], zg: &[f64], constant: f64) -> CertificateTerms {
        CertificateTerms { zf: zf.to_vec(), zg: zg.to_vec(), constant }
    }

    fn settings() -> SolverSettings {
        SolverSettings::default()
    }

    #[test]
    fn sqrt_factor_examples() {
        let i3 = DMatrix::<f64>::identity(3, 3);
        assert_eq!(matrix_sqrt_factor(&i3).unwrap(), i3);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let l = matrix_sqrt_factor(&d).unwrap();
        assert_eq!(l, DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0])));
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(matrix_sqrt_factor(&bad), Err(FilterError::NotPositiveDefinite)));
        let a = DMatrix::from_fn(5, 5, |i, j| ((i * 7 + j * 3) % 5) as f64 - 1.7);
        let spd = a.transpose() * &a + DMatrix::identity(5, 5);
        let l = matrix_sqrt_factor(&spd).unwrap();
        assert!((l.transpose() * &l - &spd).amax() <= 1e-10 * spd.amax());
        assert!(l.lower_triangle() == DMatrix::from_diagonal(&l.diagonal()));
    }

    #[test]
    fn prior_assembly() {
        let c = cert(&[-4.0, 0.25], &[-0.5], 262.5);
        let mu = DVector::zeros(3);
        let sigma = DMatrix::identity(3, 3);
        let safety = assemble_safety_cone(&c, &mu, &sigma, 1.0, &[4.0, 1.0]).unwrap();
        assert_eq!(safety.factor, DMatrix::identity(3, 3));
        assert_eq!(safety.a, DMatrix::from_column_slice(3, 1, &[0.0, 0.0, 1.0]));
        assert_eq!(safety.b, DVector::from_vec(vec![4.0, 1.0, 0.0]));
        assert_eq!(safety.c, DVector::from_vec(vec![-0.5]));
        assert_eq!(safety.d, -16.0 + 0.25 + 262.5);
        let zero = assemble_safety_cone(&c, &mu, &sigma, 0.0, &[4.0, 1.0]).unwrap();
        assert_eq!(zero.a.amax(), 0.0);
        assert_eq!(zero.b.amax(), 0.0);
        assert!(assemble_safety_cone(&c, &mu, &sigma, -1.0, &[4.0, 1.0]).is_err());
    }

    #[test]
    fn program_shapes() {
        let c = cert(&[0.0, 0.0], &[1.0], 1.0);
        let safety =
            assemble_safety_cone(&c, &DVector::zeros(3), &DMatrix::identity(3, 3), 1.0, &[4.0, 1.0]).unwrap();
        let p = build_program(&[0.0], &safety, &[]);
        assert_eq!(p.cost, DVector::from_vec(vec![0.0, 1.0]));
        let soft = SoftConstraint { a: vec![1.0], b: 0.0, weight: 7.0 };
        let p = build_program(&[0.0], &safety, &[soft]);
        assert_eq!(p.cost, DVector::from_vec(vec![0.0, 1.0, 7.0]));
        assert_eq!(p.cones[1].m.column(1).amax(), 0.0);
        assert_eq!(p.cones[1].m.column(2).amax(), 0.0);
        assert_eq!(p.cones[1].m.column(0), safety.a.column(0));
    }

    #[test]
    fn inactive_cone_returns_nominal() {
        let c = cert(&[1.0, 1.0], &[1.0], 2.0);
        let safety =
            assemble_safety_cone(&c, &DVector::zeros(3), &DMatrix::identity(3, 3), 0.0, &[4.0, 1.0]).unwrap();
        let out = filter_step(&[3.0], &safety, &[], &settings()).unwrap();
        assert_eq!(out.u, vec![3.0]);
        assert_eq!(out.t, 0.0);
        assert_eq!(out.status, FilterStatus::Optimal);
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn beta_zero_matches_halfspace() {
        let c = cert(&[-3.0, 0.5], &[2.0], -1.0);
        let safety =
            assemble_safety_cone(&c, &DVector::zeros(3), &DMatrix::identity(3, 3), 0.0, &[4.0, 1.0]).unwrap();
        let out = filter_step(&[0.0], &safety, &[], &settings()).unwrap();
        let qp = halfspace_qp_filter(&[0.0], &[2.0], safety.d).unwrap();
        assert_eq!(out.status, FilterStatus::Optimal);
        assert!((out.u[0] - qp[0]).abs() <= 1e-8, "{} vs {}", out.u[0], qp[0]);
    }

    #[test]
    fn necessary_examples() {
        let phi = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let i3 = DMatrix::identity(3, 3);
        assert_eq!(feasibility_necessary(&phi, &i3, 1.0).unwrap(), 0.0);
        assert_eq!(feasibility_necessary(&phi, &i3, 2.0).unwrap(), 0.75);
        let phi2 = DVector::from_vec(vec![2.0, 0.0]);
        let s4 = DMatrix::identity(2, 2) * 4.0;
        assert!(feasibility_necessary(&phi2, &s4, 1.0).unwrap().abs() < 1e-15);
        assert!(feasibility_necessary(&phi2, &DMatrix::zeros(2, 2), 1.0).is_err());
    }

    #[test]
    fn violated_necessary_condition_is_infeasible() {
        // phi = [0.1, 0, 0.1], Sigma = I, beta = 1: phi Sigma^-1 phi^T = 0.02 < 1
        let c = cert(&[0.0, 0.1], &[0.1], 0.0);
        let safety =
            assemble_safety_cone(&c, &DVector::zeros(3), &DMatrix::identity(3, 3), 1.0, &[4.0, 1.0]).unwrap();
        let out = filter_step(&[0.0], &safety, &[], &settings()).unwrap();
        assert_eq!(out.status, FilterStatus::Infeasible);
        assert!(out.diagnostics.necessary_condition_value > 0.0);
        // the solver reaches the same verdict without the certificate
        let raw = solve(&build_program(&[0.0], &safety, &[]), &settings()).unwrap();
        assert_eq!(raw.status, FilterStatus::Infeasible);
    }

    #[test]
    fn s_matrix_examples() {
        let c = cert(&[0.0, 0.0], &[0.0], 0.0);
        let s = build_s(&c, &DVector::zeros(3), &DMatrix::identity(3, 3), 1.0, &[4.0, 1.0]).unwrap();
        assert_eq!(s, DMatrix::identity(3, 3));
        let sigma = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.5, -0.2, 0.1, -0.2, 0.8]);
        let c = cert(&[0.4, -1.2], &[0.7], 0.9);
        let mu = DVector::from_vec(vec![0.1, 0.2, -0.3]);
        let safety = assemble_safety_cone(&c, &mu, &sigma, 1.7, &[4.0, 1.0]).unwrap();
        let s = s_matrix(&safety);
        let phi = safety.phi();
        let schur = &sigma * (1.7 * 1.7) - &phi * phi.transpose();
        assert!((&s - schur).amax() < 1e-10);
        assert!((&s - s.transpose()).amax() < 1e-12);
    }

    #[test]
    fn sufficient_examples() {
        // S3 = a^T a - c^2 with ||a||^2 = 0.25, c = 1
        let s3 = DMatrix::from_element(1, 1, 0.25 - 1.0);
        assert_eq!(feasibility_sufficient(&s3), (true, -0.75));
        let (ok, eig) = feasibility_sufficient(&DMatrix::from_element(1, 1, 0.25));
        assert!(!ok && eig == 0.25);
    }

    #[test]
    fn pointwise_zero() {
        let s = DMatrix::identity(3, 3);
        let phi = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(pointwise_conditions(&[0.0, 0.0], &[0.0], &s, &phi), (0.0, 0.0));
    }

    #[test]
    fn sufficient_condition_direction() {
        // S3 < 0: a long step along its eigenvector makes the quadratic form negative
        let c = cert(&[0.3, -2.0], &[1.0], 0.1);
        let sigma = DMatrix::identity(3, 3) * 0.04;
        let safety = assemble_safety_cone(&c, &DVector::zeros(3), &sigma, 2.0, &[4.0, 1.0]).unwrap();
        let s = s_matrix(&safety);
        let (ok, _) = feasibility_sufficient(&s.view((2, 2), (1, 1)).into_owned());
        assert!(ok);
        let (_, quad) = pointwise_conditions(&[4.0, 1.0], &[1e3], &s, &safety.phi());
        assert!(quad < 0.0);
        let out = filter_step(&[0.0], &safety, &[], &settings()).unwrap();
        assert_eq!(out.status, FilterStatus::Optimal);
        let (aff, quad) = pointwise_conditions(&[4.0, 1.0], &out.u, &s, &safety.phi());
        assert!(aff >= -1e-8 && quad <= 1e-8);
        assert!((out.t - out.u[0].abs()).abs() < 1e-7);
    }
}
