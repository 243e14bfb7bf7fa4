//! High-order control barrier functions with linear class-K gains.
//!
//! A design fixes the barrier `h`, its Lie-derivative chain on a model, and the
//! gains `k_1..k_r` of the linear class-K functions `alpha_i(s) = k_i s`. With
//! linear gains the top-order certificate is affine in both the control and in
//! any mismatch between the chain and the true Lie derivatives, which is what
//! the residual learner relies on.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BarrierError {
    #[error("invalid design: {0}")]
    InvalidDesign(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite {0} at query state")]
    NonFinite(&'static str),
    #[error("constraint has zero normal and negative offset ({0}); no input satisfies it")]
    InfeasibleConstraint(f64),
}

/// Lie-derivative evaluators of a barrier along one control-affine model.
///
/// `drift_derivatives` returns `[L_f h, .., L_f^r h]` and `input_derivative`
/// returns the row `L_g L_f^{r-1} h`. Lower-order input derivatives are assumed
/// to vanish (relative degree `r`).
pub trait LieChain: Send + Sync {
    fn relative_degree(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn barrier(&self, x: &[f64]) -> f64;
    fn drift_derivatives(&self, x: &[f64]) -> Vec<f64>;
    fn input_derivative(&self, x: &[f64]) -> Vec<f64>;
}

/// Elementary symmetric polynomials `[e_1, .., e_r]` of the gains.
pub fn elementary_symmetric(gains: &[f64]) -> Result<Vec<f64>, BarrierError> {
    validate_gains(gains)?;
    let r = gains.len();
    let mut e = vec![0.0; r + 1];
    e[0] = 1.0;
    for (i, &k) in gains.iter().enumerate() {
        for j in (1..=i + 1).rev() {
            e[j] += k * e[j - 1];
        }
    }
    Ok(e[1..].to_vec())
}

/// Residual weights: `gamma_i = e_{r-i}` with `e_0 = 1`, so `gamma_r = 1`.
pub fn gamma_vector(gains: &[f64]) -> Result<Vec<f64>, BarrierError> {
    let e = elementary_symmetric(gains)?;
    let r = gains.len();
    Ok((1..=r)
        .map(|i| if i == r { 1.0 } else { e[r - i - 1] })
        .collect())
}

/// Recovers gains from characteristic-polynomial coefficients `[e_1, .., e_r]`
/// of `s^r + e_1 s^{r-1} + .. + e_r`. All roots must be real and negative.
pub fn gains_from_characteristic(coeffs: &[f64]) -> Result<Vec<f64>, BarrierError> {
    let r = coeffs.len();
    if r == 0 {
        return Err(BarrierError::InvalidDesign("empty characteristic polynomial".into()));
    }
    if coeffs.iter().any(|c| !c.is_finite()) {
        return Err(BarrierError::InvalidDesign("non-finite coefficient".into()));
    }
    let mut roots: Vec<f64> = if r == 1 {
        vec![-coeffs[0]]
    } else if r == 2 {
        let (b, c) = (coeffs[0], coeffs[1]);
        let disc = b * b - 4.0 * c;
        if disc < 0.0 {
            return Err(BarrierError::InvalidDesign(
                "characteristic polynomial has complex roots".into(),
            ));
        }
        // Numerically stable pair.
        let q = -0.5 * (b + b.signum() * disc.sqrt());
        if q == 0.0 {
            vec![0.0, 0.0]
        } else {
            vec![q, c / q]
        }
    } else {
        let mut companion = DMatrix::<f64>::zeros(r, r);
        for j in 0..r {
            companion[(0, j)] = -coeffs[j];
        }
        for i in 1..r {
            companion[(i, i - 1)] = 1.0;
        }
        let eig = companion.complex_eigenvalues();
        let scale = coeffs.iter().fold(1.0_f64, |a, c| a.max(c.abs()));
        let mut out = Vec::with_capacity(r);
        for z in eig.iter() {
            if z.im.abs() > 1e-9 * scale {
                return Err(BarrierError::InvalidDesign(
                    "characteristic polynomial has complex roots".into(),
                ));
            }
            out.push(z.re);
        }
        out
    };
    roots.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let gains: Vec<f64> = roots.into_iter().map(|s| -s).collect();
    validate_gains(&gains)?;
    Ok(gains)
}

fn validate_gains(gains: &[f64]) -> Result<(), BarrierError> {
    if gains.is_empty() {
        return Err(BarrierError::InvalidDesign("relative degree must be at least 1".into()));
    }
    if let Some(k) = gains.iter().find(|k| !(k.is_finite() && **k > 0.0)) {
        return Err(BarrierError::InvalidDesign(format!("gain {k} is not strictly positive")));
    }
    Ok(())
}

/// Affine decomposition of the top-order certificate at one state:
/// `zeta_r(x, u) = zf . gamma + constant + zg . u`.
#[derive(Debug, Clone, PartialEq)]
pub struct CertificateTerms {
    /// `[L_f h, .., L_f^r h]`
    pub zf: Vec<f64>,
    /// `L_g L_f^{r-1} h`
    pub zg: Vec<f64>,
    /// `e_r * h(x)`
    pub constant: f64,
}

impl CertificateTerms {
    pub fn evaluate(&self, gamma: &[f64], u: &[f64]) -> f64 {
        dot(&self.zf, gamma) + self.constant + dot(&self.zg, u)
    }

    /// Constant part of the certificate, `zf . gamma + constant`.
    pub fn drift_value(&self, gamma: &[f64]) -> f64 {
        dot(&self.zf, gamma) + self.constant
    }
}

#[derive(Clone)]
pub struct HocbfDesign {
    chain: Arc<dyn LieChain>,
    gains: Vec<f64>,
    gamma: Vec<f64>,
    e_r: f64,
}

impl fmt::Debug for HocbfDesign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HocbfDesign")
            .field("relative_degree", &self.relative_degree())
            .field("gains", &self.gains)
            .field("gamma", &self.gamma)
            .field("e_r", &self.e_r)
            .finish()
    }
}

impl HocbfDesign {
    pub fn new(chain: Arc<dyn LieChain>, gains: Vec<f64>) -> Result<Self, BarrierError> {
        let r = chain.relative_degree();
        if gains.len() != r {
            return Err(BarrierError::DimensionMismatch { expected: r, got: gains.len() });
        }
        let e = elementary_symmetric(&gains)?;
        let gamma = gamma_vector(&gains)?;
        Ok(Self { chain, e_r: e[r - 1], gains, gamma })
    }

    pub fn from_characteristic(
        chain: Arc<dyn LieChain>,
        coeffs: &[f64],
    ) -> Result<Self, BarrierError> {
        Self::new(chain, gains_from_characteristic(coeffs)?)
    }

    /// Same gains on a different Lie chain (e.g. the true model, for an oracle filter).
    pub fn with_chain(&self, chain: Arc<dyn LieChain>) -> Result<Self, BarrierError> {
        Self::new(chain, self.gains.clone())
    }

    pub fn relative_degree(&self) -> usize {
        self.gains.len()
    }

    pub fn input_dim(&self) -> usize {
        self.chain.input_dim()
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn e_r(&self) -> f64 {
        self.e_r
    }

    pub fn chain(&self) -> &Arc<dyn LieChain> {
        &self.chain
    }

    pub fn barrier(&self, x: &[f64]) -> f64 {
        self.chain.barrier(x)
    }

    pub fn certificate_terms(&self, x: &[f64]) -> Result<CertificateTerms, BarrierError> {
        let r = self.relative_degree();
        let h = self.chain.barrier(x);
        let zf = self.chain.drift_derivatives(x);
        let zg = self.chain.input_derivative(x);
        if zf.len() != r {
            return Err(BarrierError::DimensionMismatch { expected: r, got: zf.len() });
        }
        if zg.len() != self.input_dim() {
            return Err(BarrierError::DimensionMismatch {
                expected: self.input_dim(),
                got: zg.len(),
            });
        }
        if !h.is_finite() {
            return Err(BarrierError::NonFinite("barrier"));
        }
        if zf.iter().any(|v| !v.is_finite()) {
            return Err(BarrierError::NonFinite("drift Lie derivative"));
        }
        if zg.iter().any(|v| !v.is_finite()) {
            return Err(BarrierError::NonFinite("input Lie derivative"));
        }
        Ok(CertificateTerms { zf, zg, constant: self.e_r * h })
    }

    /// `[zeta_0(x), .., zeta_{r-1}(x)]` on the design's model.
    ///
    /// `zeta_i = sum_j e_{i-j}(k_1..k_i) L_f^j h`, the closed form of the
    /// recursion `zeta_i = d/dt zeta_{i-1} + k_i zeta_{i-1}`.
    pub fn zeta_chain(&self, x: &[f64]) -> Vec<f64> {
        let r = self.relative_degree();
        let mut lie = Vec::with_capacity(r);
        lie.push(self.chain.barrier(x));
        lie.extend(self.chain.drift_derivatives(x).into_iter().take(r - 1));
        // coefficients of the partial product prod_{l<=i}(s + k_l), highest power first
        let mut poly = vec![1.0];
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            // zeta_i pairs poly[i - j] with L_f^j h
            out.push((0..=i).map(|j| poly[i - j] * lie[j]).sum());
            if i + 1 < r {
                let k = self.gains[i];
                let mut next = vec![0.0; poly.len() + 1];
                for (idx, c) in poly.iter().enumerate() {
                    next[idx] += c;
                    next[idx + 1] += k * c;
                }
                poly = next;
            }
        }
        out
    }
}

/// Minimum-norm correction of `u_nom` onto the halfspace `a . u + b >= 0`.
pub fn halfspace_qp_filter(u_nom: &[f64], a: &[f64], b: f64) -> Result<Vec<f64>, BarrierError> {
    if a.len() != u_nom.len() {
        return Err(BarrierError::DimensionMismatch { expected: u_nom.len(), got: a.len() });
    }
    let slack = dot(a, u_nom) + b;
    if slack >= 0.0 {
        return Ok(u_nom.to_vec());
    }
    let norm2 = dot(a, a);
    if norm2 == 0.0 {
        return Err(BarrierError::InfeasibleConstraint(b));
    }
    let step = slack / norm2;
    let mut u: Vec<f64> = u_nom.iter().zip(a).map(|(u, a)| u - step * a).collect();
    // Guard against roundoff leaving the iterate marginally outside.
    let amax = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut push = 0.0f64;
    for _ in 0..64 {
        let residual = dot(a, &u) + b;
        if residual >= 0.0 {
            break;
        }
        let umax = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        push = (2.0 * push).max(-residual / norm2).max(f64::EPSILON * (1.0 + umax) / amax);
        for (ui, ai) in u.iter_mut().zip(a) {
            *ui += push * ai;
        }
    }
    Ok(u)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
