//! Benchmark plants, integration and nominal controllers.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::barrier::{halfspace_qp_filter, LieChain};
use crate::filter::SoftConstraint;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("non-finite state after integration step at t = {0}")]
    NonFinite(f64),
    #[error("time step must be positive, got {0}")]
    BadStep(f64),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("riccati iteration did not converge (residual {0:e})")]
    RiccatiNotConverged(f64),
}

/// `x' = f(x) + g(x) u (+ exogenous(x, t))`.
pub trait ControlAffine: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn drift(&self, x: &[f64]) -> Vec<f64>;
    /// `n x m` input matrix.
    fn actuation(&self, x: &[f64]) -> DMatrix<f64>;
    fn exogenous(&self, _x: &[f64], _t: f64) -> Option<Vec<f64>> {
        None
    }

    fn field(&self, x: &[f64], u: &[f64], t: f64) -> Vec<f64> {
        let mut dx = self.drift(x);
        let g = self.actuation(x);
        for i in 0..dx.len() {
            for j in 0..u.len() {
                dx[i] += g[(i, j)] * u[j];
            }
        }
        if let Some(e) = self.exogenous(x, t) {
            for (d, e) in dx.iter_mut().zip(e) {
                *d += e;
            }
        }
        dx
    }
}

/// Paired true and nominal models sharing state and input dimensions.
#[derive(Clone)]
pub struct PlantModel {
    pub name: String,
    pub truth: Arc<dyn ControlAffine>,
    pub nominal: Arc<dyn ControlAffine>,
}

impl PlantModel {
    pub fn new(
        name: impl Into<String>,
        truth: Arc<dyn ControlAffine>,
        nominal: Arc<dyn ControlAffine>,
    ) -> Result<Self, PlantError> {
        if truth.state_dim() != nominal.state_dim() || truth.input_dim() != nominal.input_dim() {
            return Err(PlantError::InvalidParams(
                "true and nominal models must share dimensions".into(),
            ));
        }
        Ok(Self { name: name.into(), truth, nominal })
    }

    pub fn state_dim(&self) -> usize {
        self.truth.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.truth.input_dim()
    }
}

/// Classical RK4 step with `u` held over the step.
pub fn rk4_step<F>(field: F, x: &[f64], u: &[f64], t: f64, dt: f64) -> Result<Vec<f64>, PlantError>
where
    F: Fn(&[f64], &[f64], f64) -> Vec<f64>,
{
    if !(dt > 0.0) {
        return Err(PlantError::BadStep(dt));
    }
    let axpy = |x: &[f64], k: &[f64], s: f64| -> Vec<f64> {
        x.iter().zip(k).map(|(a, b)| a + s * b).collect()
    };
    let k1 = field(x, u, t);
    let k2 = field(&axpy(x, &k1, 0.5 * dt), u, t + 0.5 * dt);
    let k3 = field(&axpy(x, &k2, 0.5 * dt), u, t + 0.5 * dt);
    let k4 = field(&axpy(x, &k3, dt), u, t + dt);
    let next: Vec<f64> = (0..x.len())
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    if next.iter().any(|v| !v.is_finite()) {
        return Err(PlantError::NonFinite(t + dt));
    }
    Ok(next)
}

// ---------------------------------------------------------------------------
// Adaptive cruise control

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccParams {
    /// mass (kg)
    pub m: f64,
    pub f0: f64,
    pub f1: f64,
    pub f2: f64,
    /// lead vehicle speed (m/s)
    pub v0: f64,
}

impl AccParams {
    pub const NOMINAL: AccParams = AccParams { m: 825.0, f0: 0.1, f1: 5.0, f2: 0.25, v0: 16.0 };
    pub const TRUE: AccParams = AccParams { m: 3300.0, f0: 0.2, f1: 10.0, f2: 0.5, v0: 14.0 };

    pub fn validate(&self) -> Result<(), PlantError> {
        if !(self.m > 0.0) {
            return Err(PlantError::InvalidParams(format!("ACC mass must be positive, got {}", self.m)));
        }
        Ok(())
    }

    pub fn rolling_resistance(&self, v: f64) -> f64 {
        self.f0 + self.f1 * v + self.f2 * v * v
    }
}

/// State `[v, z]`: ego speed and gap to the lead vehicle.
pub fn acc_dynamics(x: &[f64], u: f64, p: &AccParams) -> [f64; 2] {
    let v = x[0];
    [(-p.rolling_resistance(v) + u) / p.m, p.v0 - v]
}

#[derive(Debug, Clone)]
pub struct AccModel {
    pub params: AccParams,
}

impl ControlAffine for AccModel {
    fn state_dim(&self) -> usize {
        2
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn drift(&self, x: &[f64]) -> Vec<f64> {
        acc_dynamics(x, 0.0, &self.params).to_vec()
    }
    fn actuation(&self, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(2, 1, &[1.0 / self.params.m, 0.0])
    }
}

/// `h = z - D` on the ACC model; relative degree two.
#[derive(Debug, Clone)]
pub struct AccGapChain {
    pub params: AccParams,
    pub min_gap: f64,
}

impl LieChain for AccGapChain {
    fn relative_degree(&self) -> usize {
        2
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn barrier(&self, x: &[f64]) -> f64 {
        x[1] - self.min_gap
    }
    fn drift_derivatives(&self, x: &[f64]) -> Vec<f64> {
        let v = x[0];
        vec![self.params.v0 - v, self.params.rolling_resistance(v) / self.params.m]
    }
    fn input_derivative(&self, _x: &[f64]) -> Vec<f64> {
        vec![-1.0 / self.params.m]
    }
}

/// Result of the closed-form CLF controller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClfInput {
    pub u: f64,
    /// Set when the CLF constraint has no input authority at this state.
    pub degenerate: bool,
}

/// Min-norm force satisfying `dV/dt <= -lambda V` for `V = (v - v_d)^2` on the
/// given (nominal) model.
pub fn clf_nominal_acc(x: &[f64], v_d: f64, lambda_rate: f64, p: &AccParams) -> ClfInput {
    let (a, b) = acc_clf_halfspace(x, v_d, lambda_rate, p);
    if a == 0.0 {
        return ClfInput { u: 0.0, degenerate: true };
    }
    match halfspace_qp_filter(&[0.0], &[a], b) {
        Ok(u) => ClfInput { u: u[0], degenerate: false },
        Err(_) => ClfInput { u: 0.0, degenerate: true },
    }
}

/// `(a, b)` with the CLF condition written as `a u + b >= 0`.
pub fn acc_clf_halfspace(x: &[f64], v_d: f64, lambda_rate: f64, p: &AccParams) -> (f64, f64) {
    let e = x[0] - v_d;
    let a = -2.0 * e / p.m;
    let b = 2.0 * e * p.rolling_resistance(x[0]) / p.m - lambda_rate * e * e;
    (a, b)
}

// ---------------------------------------------------------------------------
// Quarter-car active suspension

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuspensionParams {
    /// body mass (kg)
    pub m1: f64,
    /// wheel mass (kg)
    pub m2: f64,
    /// suspension stiffness (N/m)
    pub k1: f64,
    /// tire stiffness (N/m)
    pub k2: f64,
    /// suspension damping (N s/m)
    pub b: f64,
}

impl SuspensionParams {
    pub const NOMINAL: SuspensionParams =
        SuspensionParams { m1: 300.0, m2: 60.0, k1: 16e3, k2: 190e3, b: 1e3 };
    pub const TRUE: SuspensionParams =
        SuspensionParams { m1: 675.0, m2: 135.0, k1: 36e3, k2: 427.5e3, b: 2.25e3 };

    pub fn validate(&self) -> Result<(), PlantError> {
        let all = [self.m1, self.m2, self.k1, self.k2, self.b];
        if all.iter().any(|v| !(*v > 0.0)) {
            return Err(PlantError::InvalidParams("suspension parameters must be positive".into()));
        }
        Ok(())
    }

    /// Linear model `x' = A x + B u` (disturbance excluded).
    pub fn linearization(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let p = self;
        #[rustfmt::skip]
        let a = DMatrix::from_row_slice(4, 4, &[
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
            -p.k1 / p.m1, p.k1 / p.m1, -p.b / p.m1, p.b / p.m1,
            p.k1 / p.m2, -(p.k1 + p.k2) / p.m2, p.b / p.m2, -p.b / p.m2,
        ]);
        let b = DMatrix::from_column_slice(4, 1, &[0.0, 0.0, 1.0 / p.m1, -1.0 / p.m2]);
        (a, b)
    }
}

/// State `[x1, x2, x3, x4]`: body and wheel displacement, then their velocities.
pub fn suspension_dynamics(x: &[f64], u: f64, d: f64, p: &SuspensionParams) -> [f64; 4] {
    let (x1, x2, x3, x4) = (x[0], x[1], x[2], x[3]);
    [
        x3,
        x4,
        (p.k1 * (x2 - x1) + p.b * (x4 - x3) + u) / p.m1,
        (p.k1 * (x1 - x2) - p.k2 * x2 + p.b * (x3 - x4) - u + p.k2 * d) / p.m2,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RoadProfile {
    Flat,
    /// `amplitude * sin^2(pi (t - start) / width)` on `[start, start + width]`.
    Bump { amplitude: f64, start: f64, width: f64 },
}

impl Default for RoadProfile {
    fn default() -> Self {
        RoadProfile::Bump { amplitude: 0.08, start: 1.0, width: 1.0 }
    }
}

pub fn road_profile(t: f64, profile: &RoadProfile) -> f64 {
    match *profile {
        RoadProfile::Flat => 0.0,
        RoadProfile::Bump { amplitude, start, width } => {
            if t < start || t > start + width {
                0.0
            } else {
                let s = (std::f64::consts::PI * (t - start) / width).sin();
                amplitude * s * s
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuspensionModel {
    pub params: SuspensionParams,
    /// Road input; `None` models the road as unknown (nominal design).
    pub road: Option<RoadProfile>,
}

impl ControlAffine for SuspensionModel {
    fn state_dim(&self) -> usize {
        4
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn drift(&self, x: &[f64]) -> Vec<f64> {
        suspension_dynamics(x, 0.0, 0.0, &self.params).to_vec()
    }
    fn actuation(&self, _x: &[f64]) -> DMatrix<f64> {
        let p = &self.params;
        DMatrix::from_column_slice(4, 1, &[0.0, 0.0, 1.0 / p.m1, -1.0 / p.m2])
    }
    fn exogenous(&self, _x: &[f64], t: f64) -> Option<Vec<f64>> {
        let road = self.road.as_ref()?;
        let d = road_profile(t, road);
        Some(vec![0.0, 0.0, 0.0, self.params.k2 * d / self.params.m2])
    }
}

/// `h = D - x1`; relative degree two, road input treated as zero.
#[derive(Debug, Clone)]
pub struct SuspensionTravelChain {
    pub params: SuspensionParams,
    pub max_travel: f64,
}

impl LieChain for SuspensionTravelChain {
    fn relative_degree(&self) -> usize {
        2
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn barrier(&self, x: &[f64]) -> f64 {
        self.max_travel - x[0]
    }
    fn drift_derivatives(&self, x: &[f64]) -> Vec<f64> {
        let p = &self.params;
        vec![-x[2], -(p.k1 * (x[1] - x[0]) + p.b * (x[3] - x[2])) / p.m1]
    }
    fn input_derivative(&self, _x: &[f64]) -> Vec<f64> {
        vec![-1.0 / self.params.m1]
    }
}

// ---------------------------------------------------------------------------
// Nominal controllers

/// Performance controller whose output the safety filter corrects.
pub trait NominalController: Send + Sync {
    fn input(&self, t: f64, x: &[f64]) -> Vec<f64>;

    /// Objectives the SOCP filter may trade off against its cost.
    fn soft_constraints(&self, _x: &[f64]) -> Vec<SoftConstraint> {
        Vec::new()
    }
}

#[derive(Debug, Clone)]
pub struct AccCruiseController {
    pub params: AccParams,
    pub v_d: f64,
    pub lambda_rate: f64,
    /// Penalty on the CLF slack inside the SOCP; zero disables the soft term.
    pub soft_weight: f64,
}

impl NominalController for AccCruiseController {
    fn input(&self, _t: f64, x: &[f64]) -> Vec<f64> {
        vec![clf_nominal_acc(x, self.v_d, self.lambda_rate, &self.params).u]
    }

    fn soft_constraints(&self, x: &[f64]) -> Vec<SoftConstraint> {
        if self.soft_weight <= 0.0 {
            return Vec::new();
        }
        let (a, b) = acc_clf_halfspace(x, self.v_d, self.lambda_rate, &self.params);
        if a == 0.0 {
            return Vec::new();
        }
        // normalized to force units so the penalty weight is comparable to the cost
        let s = a.abs();
        vec![SoftConstraint { a: vec![a / s], b: b / s, weight: self.soft_weight }]
    }
}

/// `u = -K x`.
#[derive(Debug, Clone)]
pub struct LinearFeedback {
    pub gain: DMatrix<f64>,
}

impl NominalController for LinearFeedback {
    fn input(&self, _t: f64, x: &[f64]) -> Vec<f64> {
        let xv = DVector::from_column_slice(x);
        (-(&self.gain * xv)).iter().copied().collect()
    }
}

// ---------------------------------------------------------------------------
// LQR

/// Continuous-time LQR gain `K = R^-1 B^T P` with `P` the stabilizing CARE solution.
///
/// The Riccati solution comes from the matrix sign function of the Hamiltonian and
/// is then refined with Newton-Kleinman steps until the residual is below `1e-9`
/// (relative to the problem scale).
pub fn lqr_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>), PlantError> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(PlantError::InvalidParams("LQR matrix shapes are inconsistent".into()));
    }
    let r_chol = r
        .clone()
        .cholesky()
        .ok_or_else(|| PlantError::InvalidParams("R must be positive definite".into()))?;
    let r_inv = r_chol.inverse();
    let g = b * &r_inv * b.transpose();

    let mut p = care_sign_function(a, &g, q)?;
    let scale = 1.0 + q.norm() + a.norm() * p.norm() + (&p * &g * &p).norm();
    let mut res = care_residual(a, &g, q, &p);
    for _ in 0..20 {
        if res <= 1e-9 * scale {
            break;
        }
        let k = &r_inv * b.transpose() * &p;
        let closed = a - b * &k;
        let rhs = -(q + k.transpose() * r * &k);
        let next = solve_lyapunov(&closed, &rhs)?;
        let next_res = care_residual(a, &g, q, &next);
        if !(next_res < res) {
            break;
        }
        p = next;
        res = next_res;
    }
    if !(res <= 1e-9 * scale) {
        return Err(PlantError::RiccatiNotConverged(res));
    }
    let k = &r_inv * b.transpose() * &p;
    Ok((k, p))
}

fn care_residual(a: &DMatrix<f64>, g: &DMatrix<f64>, q: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    (a.transpose() * p + p * a - p * g * p + q).amax()
}

fn care_sign_function(
    a: &DMatrix<f64>,
    g: &DMatrix<f64>,
    q: &DMatrix<f64>,
) -> Result<DMatrix<f64>, PlantError> {
    let n = a.nrows();
    let mut z = DMatrix::zeros(2 * n, 2 * n);
    z.view_mut((0, 0), (n, n)).copy_from(a);
    z.view_mut((0, n), (n, n)).copy_from(&(-g));
    z.view_mut((n, 0), (n, n)).copy_from(&(-q));
    z.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));

    let mut converged = false;
    for _ in 0..100 {
        let lu = z.clone().lu();
        let inv = lu
            .try_inverse()
            .ok_or(PlantError::RiccatiNotConverged(f64::INFINITY))?;
        let det = z.clone().lu().determinant().abs();
        let c = if det > 0.0 && det.is_finite() { det.powf(1.0 / (2.0 * n as f64)) } else { 1.0 };
        let next = (&z / c + &inv * c) * 0.5;
        let delta = (&next - &z).norm();
        let size = next.norm();
        z = next;
        if delta <= 1e-13 * size {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(PlantError::RiccatiNotConverged(f64::NAN));
    }
    // [W12; W22 + I] P = -[W11 + I; W21]
    let eye = DMatrix::<f64>::identity(n, n);
    let mut lhs = DMatrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&z.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n)).copy_from(&(z.view((n, n), (n, n)) + &eye));
    let mut rhs = DMatrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&(-(z.view((0, 0), (n, n)) + &eye)));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-z.view((n, 0), (n, n))));
    let normal = lhs.transpose() * &lhs;
    let p = normal
        .lu()
        .solve(&(lhs.transpose() * rhs))
        .ok_or(PlantError::RiccatiNotConverged(f64::NAN))?;
    Ok((&p + p.transpose()) * 0.5)
}

/// Solves `A^T X + X A = C` by Kronecker vectorization (small `n`).
fn solve_lyapunov(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>, PlantError> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let at = a.transpose();
    let op = eye.kronecker(&at) + at.kronecker(&eye);
    let vec_c = DVector::from_column_slice(c.as_slice());
    let x = op
        .lu()
        .solve(&vec_c)
        .ok_or(PlantError::RiccatiNotConverged(f64::NAN))?;
    let x = DMatrix::from_column_slice(n, n, x.as_slice());
    Ok((&x + x.transpose()) * 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn published_parameters_are_pinned() {
        assert_eq!(AccParams::NOMINAL, AccParams { m: 825.0, f0: 0.1, f1: 5.0, f2: 0.25, v0: 16.0 });
        assert_eq!(AccParams::TRUE, AccParams { m: 3300.0, f0: 0.2, f1: 10.0, f2: 0.5, v0: 14.0 });
        assert_eq!(
            SuspensionParams::NOMINAL,
            SuspensionParams { m1: 300.0, m2: 60.0, k1: 16000.0, k2: 190000.0, b: 1000.0 }
        );
        assert_eq!(
            SuspensionParams::TRUE,
            SuspensionParams { m1: 675.0, m2: 135.0, k1: 36000.0, k2: 427500.0, b: 2250.0 }
        );
    }

    #[test]
    fn acc_dynamics_examples() {
        let d = acc_dynamics(&[20.0, 100.0], 0.0, &AccParams::TRUE);
        assert!(close(d[0], -400.2 / 3300.0, 1e-15));
        assert_eq!(d[1], -6.0);
        let p = AccParams::TRUE;
        let u = p.rolling_resistance(17.0);
        assert_eq!(acc_dynamics(&[17.0, 0.0], u, &p)[0], 0.0);
        let d = acc_dynamics(&[16.0, 50.0], 0.0, &AccParams::NOMINAL);
        assert!(close(d[0], -0.174_666_666_666_666_66, 1e-15));
        assert_eq!(d[1], 0.0);
        assert!(AccParams { m: 0.0, ..AccParams::NOMINAL }.validate().is_err());
    }

    #[test]
    fn suspension_dynamics_examples() {
        let p = SuspensionParams::NOMINAL;
        assert_eq!(suspension_dynamics(&[0.0; 4], 0.0, 0.0, &p), [0.0; 4]);
        let d = suspension_dynamics(&[0.01, 0.0, 0.0, 0.0], 0.0, 0.0, &p);
        assert!(close(d[2], -0.533_333_333_333_333_3, 1e-14));
        assert!(close(d[3], 2.666_666_666_666_666_5, 1e-14));
        let d = suspension_dynamics(&[0.0; 4], 0.0, 0.01, &p);
        assert!(close(d[3], 31.666_666_666_666_67, 1e-12));
    }

    #[test]
    fn suspension_is_linear() {
        let p = SuspensionParams::TRUE;
        let xa = [0.01, -0.02, 0.3, -0.1];
        let xb = [-0.03, 0.005, -0.2, 0.4];
        let (ua, ub, da, db) = (120.0, -75.0, 0.02, -0.01);
        let (sa, sb) = (0.7, -1.3);
        let x: Vec<f64> = xa.iter().zip(&xb).map(|(a, b)| sa * a + sb * b).collect();
        let lhs = suspension_dynamics(&x, sa * ua + sb * ub, sa * da + sb * db, &p);
        let fa = suspension_dynamics(&xa, ua, da, &p);
        let fb = suspension_dynamics(&xb, ub, db, &p);
        for i in 0..4 {
            let rhs = sa * fa[i] + sb * fb[i];
            assert!((lhs[i] - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn rk4_examples() {
        let zero = |_: &[f64], _: &[f64], _: f64| vec![0.0];
        assert_eq!(rk4_step(zero, &[3.0], &[], 0.0, 0.1).unwrap(), vec![3.0]);
        let one = |_: &[f64], _: &[f64], _: f64| vec![1.0];
        assert!(close(rk4_step(one, &[3.0], &[], 0.0, 0.1).unwrap()[0], 3.1, 1e-15));
        let decay = |x: &[f64], _: &[f64], _: f64| vec![-x[0]];
        let x = rk4_step(decay, &[1.0], &[], 0.0, 0.01).unwrap();
        assert!(close(x[0], (-0.01f64).exp(), 1e-10));
        assert_eq!(rk4_step(decay, &[1.0], &[], 0.0, 0.0), Err(PlantError::BadStep(0.0)));
        let blow = |_: &[f64], _: &[f64], _: f64| vec![f64::INFINITY];
        assert!(matches!(rk4_step(blow, &[1.0], &[], 0.0, 0.1), Err(PlantError::NonFinite(_))));
    }

    #[test]
    fn rk4_is_fourth_order() {
        let decay = |x: &[f64], _: &[f64], _: f64| vec![-x[0]];
        let err = |steps: usize| {
            let dt = 1.0 / steps as f64;
            let mut x = vec![1.0];
            for k in 0..steps {
                x = rk4_step(decay, &x, &[], k as f64 * dt, dt).unwrap();
            }
            (x[0] - (-1.0f64).exp()).abs()
        };
        let ratio = err(10) / err(20);
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn road_bump() {
        let road = RoadProfile::default();
        assert_eq!(road_profile(0.5, &road), 0.0);
        assert_eq!(road_profile(2.5, &road), 0.0);
        assert!(close(road_profile(1.5, &road), 0.08, 1e-15));
        // midpoint rule over the bump window
        let steps = 10_000;
        let h = 1.0 / steps as f64;
        let area: f64 = (0..steps).map(|i| road_profile(1.0 + (i as f64 + 0.5) * h, &road) * h).sum();
        assert!(close(area, 0.04, 1e-9));
        assert_eq!(road_profile(1.5, &RoadProfile::Flat), 0.0);
    }

    #[test]
    fn clf_examples() {
        let p = AccParams::NOMINAL;
        let at_target = clf_nominal_acc(&[24.0, 50.0], 24.0, 1.0, &p);
        assert_eq!(at_target.u, 0.0);
        assert!(at_target.degenerate);
        // above target: coasting already decays the error fast enough
        assert_eq!(clf_nominal_acc(&[26.0, 50.0], 24.0, 0.1, &p).u, 0.0);
        let u = clf_nominal_acc(&[20.0, 50.0], 24.0, 1.0, &p);
        assert!(close(u.u, 200.1 + 825.0 * 4.0 / 2.0, 1e-9));
        assert!(!u.degenerate);
        // grid check: smallest |u| satisfying the CLF inequality
        let (a, b) = acc_clf_halfspace(&[20.0, 50.0], 24.0, 1.0, &p);
        let best = (0..400_000)
            .map(|i| i as f64 * 0.01 - 2000.0)
            .filter(|u| a * u + b >= 0.0)
            .fold(f64::INFINITY, |acc, u| if u.abs() < acc.abs() { u } else { acc });
        assert!((best - u.u).abs() <= 0.01);
    }

    #[test]
    fn lqr_scalar() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let (k, p) = lqr_gain(&DMatrix::zeros(1, 1), &one, &one, &one).unwrap();
        assert!(close(p[(0, 0)], 1.0, 1e-12));
        assert!(close(k[(0, 0)], 1.0, 1e-12));
    }

    #[test]
    fn lqr_without_authority() {
        let a = -DMatrix::<f64>::identity(2, 2);
        let b = DMatrix::zeros(2, 1);
        let q = DMatrix::identity(2, 2);
        let (k, p) = lqr_gain(&a, &b, &q, &DMatrix::identity(1, 1)).unwrap();
        assert!(k.amax() < 1e-12);
        assert!((p - q * 0.5).amax() < 1e-12);
    }

    #[test]
    fn lqr_rejects_indefinite_r() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let bad = DMatrix::from_element(1, 1, -1.0);
        assert!(lqr_gain(&one, &one, &one, &bad).is_err());
    }

    #[test]
    fn suspension_lqr_stabilizes() {
        let (a, b) = SuspensionParams::NOMINAL.linearization();
        let (k, _) = lqr_gain(&a, &b, &(DMatrix::identity(4, 4) * 10.0), &DMatrix::identity(1, 1))
            .unwrap();
        let closed = &a - &b * &k;
        for ev in closed.complex_eigenvalues().iter() {
            assert!(ev.re < 0.0, "eigenvalue {ev}");
        }
        // linearization agrees with the nonlinear field
        let x = [0.01, -0.004, 0.2, -0.3];
        let f = suspension_dynamics(&x, 50.0, 0.0, &SuspensionParams::NOMINAL);
        let lin = &a * DVector::from_column_slice(&x) + &b * 50.0;
        for i in 0..4 {
            assert!((f[i] - lin[i]).abs() < 1e-9);
        }
    }
}
