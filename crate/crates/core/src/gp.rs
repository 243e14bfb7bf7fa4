//! Gaussian-process regression of the scalar certificate residual.
//!
//! The composite kernel `k_c((x, y), (x', y')) = y^T diag(k_1(x, x'), ..) y'`
//! makes the posterior mean linear and the posterior variance quadratic in the
//! regressor `y = [gamma; u]`, so both can be handed to the cone filter as
//! coefficient blocks.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid hyperparameter: {0}")]
    InvalidParams(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("gram matrix not positive definite after jitter up to {0:e}")]
    IllConditioned(f64),
    #[error("confidence level delta must lie in (0, 1), got {0}")]
    BadDelta(f64),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Squared-exponential kernel with one lengthscale per state dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseKernelParams {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
}

impl BaseKernelParams {
    pub fn new(signal_variance: f64, lengthscales: Vec<f64>) -> Result<Self, GpError> {
        let p = Self { signal_variance, lengthscales };
        p.validate()?;
        Ok(p)
    }

    pub fn isotropic(signal_variance: f64, lengthscale: f64, dim: usize) -> Result<Self, GpError> {
        Self::new(signal_variance, vec![lengthscale; dim])
    }

    pub fn validate(&self) -> Result<(), GpError> {
        if !(self.signal_variance > 0.0 && self.signal_variance.is_finite()) {
            return Err(GpError::InvalidParams(format!(
                "signal variance must be positive, got {}",
                self.signal_variance
            )));
        }
        if self.lengthscales.is_empty() {
            return Err(GpError::InvalidParams("at least one lengthscale required".into()));
        }
        if let Some(l) = self.lengthscales.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(GpError::InvalidParams(format!("lengthscale must be positive, got {l}")));
        }
        Ok(())
    }
}

pub fn base_kernel(x: &[f64], xp: &[f64], p: &BaseKernelParams) -> Result<f64, GpError> {
    let n = p.lengthscales.len();
    if x.len() != n {
        return Err(GpError::DimensionMismatch { expected: n, got: x.len() });
    }
    if xp.len() != n {
        return Err(GpError::DimensionMismatch { expected: n, got: xp.len() });
    }
    Ok(base_kernel_unchecked(x, xp, p))
}

fn base_kernel_unchecked(x: &[f64], xp: &[f64], p: &BaseKernelParams) -> f64 {
    let mut d2 = 0.0;
    for ((a, b), l) in x.iter().zip(xp).zip(&p.lengthscales) {
        let s = (a - b) / l;
        d2 += s * s;
    }
    p.signal_variance * (-0.5 * d2).exp()
}

/// `y^T Lambda(x, x') y'`.
pub fn composite_kernel(
    x: &[f64],
    y: &[f64],
    xp: &[f64],
    yp: &[f64],
    params: &[BaseKernelParams],
) -> Result<f64, GpError> {
    let q = params.len();
    if y.len() != q {
        return Err(GpError::DimensionMismatch { expected: q, got: y.len() });
    }
    if yp.len() != q {
        return Err(GpError::DimensionMismatch { expected: q, got: yp.len() });
    }
    let mut acc = 0.0;
    for (d, p) in params.iter().enumerate() {
        acc += y[d] * base_kernel(x, xp, p)? * yp[d];
    }
    Ok(acc)
}

/// Diagonal of `Lambda(x, x')`.
pub fn kernel_diagonal(x: &[f64], xp: &[f64], params: &[BaseKernelParams]) -> Result<Vec<f64>, GpError> {
    params.iter().map(|p| base_kernel(x, xp, p)).collect()
}

/// Rows `((x, y), z)` sharing one noise variance.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualDataset {
    state_dim: usize,
    regressor_dim: usize,
    pub states: Vec<Vec<f64>>,
    pub regressors: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
    pub noise_variance: f64,
}

impl ResidualDataset {
    pub fn empty(state_dim: usize, regressor_dim: usize, noise_variance: f64) -> Result<Self, GpError> {
        if !(noise_variance >= 0.0 && noise_variance.is_finite()) {
            return Err(GpError::InvalidDataset(format!(
                "noise variance must be non-negative, got {noise_variance}"
            )));
        }
        if state_dim == 0 || regressor_dim == 0 {
            return Err(GpError::InvalidDataset("state and regressor dimensions must be positive".into()));
        }
        Ok(Self {
            state_dim,
            regressor_dim,
            states: Vec::new(),
            regressors: Vec::new(),
            labels: Vec::new(),
            noise_variance,
        })
    }

    pub fn push(&mut self, x: Vec<f64>, y: Vec<f64>, z: f64) -> Result<(), GpError> {
        if x.len() != self.state_dim {
            return Err(GpError::DimensionMismatch { expected: self.state_dim, got: x.len() });
        }
        if y.len() != self.regressor_dim {
            return Err(GpError::DimensionMismatch { expected: self.regressor_dim, got: y.len() });
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) || !z.is_finite() {
            return Err(GpError::InvalidDataset("non-finite entry".into()));
        }
        self.states.push(x);
        self.regressors.push(y);
        self.labels.push(z);
        Ok(())
    }

    pub fn extend(&mut self, other: &ResidualDataset) -> Result<(), GpError> {
        for i in 0..other.len() {
            self.push(other.states[i].clone(), other.regressors[i].clone(), other.labels[i])?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn regressor_dim(&self) -> usize {
        self.regressor_dim
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), GpError> {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (1..=self.state_dim).map(|i| format!("x_{i}")).collect();
        header.extend((1..=self.regressor_dim).map(|i| format!("y_{i}")));
        header.push("z".into());
        out.write_record(&header)?;
        for i in 0..self.len() {
            let row: Vec<String> = self.states[i]
                .iter()
                .chain(&self.regressors[i])
                .chain(std::iter::once(&self.labels[i]))
                .map(|v| format!("{v:e}"))
                .collect();
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), GpError> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv<R: Read>(r: R, noise_variance: f64) -> Result<Self, GpError> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        let n = header.iter().filter(|h| h.starts_with("x_")).count();
        let q = header.iter().filter(|h| h.starts_with("y_")).count();
        if header.len() != n + q + 1 || header.get(n + q) != Some("z") {
            return Err(GpError::InvalidDataset("header must be x_1..x_n, y_1..y_q, z".into()));
        }
        let mut ds = Self::empty(n, q, noise_variance)?;
        for rec in rdr.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| GpError::InvalidDataset(format!("bad number: {e}")))?;
            if vals.len() != n + q + 1 {
                return Err(GpError::InvalidDataset("ragged row".into()));
            }
            ds.push(vals[..n].to_vec(), vals[n..n + q].to_vec(), vals[n + q])?;
        }
        Ok(ds)
    }

    pub fn load_csv(path: &Path, noise_variance: f64) -> Result<Self, GpError> {
        Self::read_csv(std::fs::File::open(path)?, noise_variance)
    }
}

pub const DEFAULT_JITTER: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

/// Fitted posterior over the residual; immutable once built.
#[derive(Debug, Clone)]
pub struct CompositeGpModel {
    dataset: Arc<ResidualDataset>,
    params: Vec<BaseKernelParams>,
    factor: Option<Cholesky<f64, Dyn>>,
    weights: DVector<f64>,
    jitter: f64,
}

/// Posterior coefficients at one state: mean `mu . y`, variance `y^T sigma y`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorCoefficients {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    /// Diagonal shift added so that `sigma` factors.
    pub floor: f64,
}

impl PosteriorCoefficients {
    pub fn mean(&self, y: &[f64]) -> f64 {
        self.mu.iter().zip(y).map(|(a, b)| a * b).sum()
    }

    pub fn variance(&self, y: &[f64]) -> f64 {
        let yv = DVector::from_column_slice(y);
        (yv.transpose() * &self.sigma * &yv)[(0, 0)]
    }
}

impl CompositeGpModel {
    /// Factors `K_c + sigma_n^2 I`, escalating through `jitter` until Cholesky succeeds.
    pub fn fit(
        dataset: Arc<ResidualDataset>,
        params: Vec<BaseKernelParams>,
        jitter: &[f64],
    ) -> Result<Self, GpError> {
        if params.len() != dataset.regressor_dim() {
            return Err(GpError::DimensionMismatch { expected: dataset.regressor_dim(), got: params.len() });
        }
        for p in &params {
            p.validate()?;
            if p.lengthscales.len() != dataset.state_dim() {
                return Err(GpError::DimensionMismatch {
                    expected: dataset.state_dim(),
                    got: p.lengthscales.len(),
                });
            }
        }
        let n = dataset.len();
        if n == 0 {
            return Ok(Self { dataset, params, factor: None, weights: DVector::zeros(0), jitter: 0.0 });
        }
        let gram = gram_matrix(&dataset, &params);
        let scale = gram.diagonal().amax().max(1.0);
        let schedule: &[f64] = if jitter.is_empty() { &[0.0] } else { jitter };
        let mut last = 0.0;
        for &j in schedule {
            last = j;
            let mut k = gram.clone();
            for i in 0..n {
                k[(i, i)] += dataset.noise_variance + j * scale;
            }
            if let Some(chol) = k.cholesky() {
                if chol.l_dirty().diagonal().iter().all(|d| *d > 0.0 && d.is_finite()) {
                    let z = DVector::from_column_slice(&dataset.labels);
                    let weights = chol.solve(&z);
                    return Ok(Self { dataset, params, factor: Some(chol), weights, jitter: j * scale });
                }
            }
        }
        Err(GpError::IllConditioned(last * scale))
    }

    pub fn dataset(&self) -> &ResidualDataset {
        &self.dataset
    }

    pub fn params(&self) -> &[BaseKernelParams] {
        &self.params
    }

    /// Absolute diagonal jitter that was needed to factor the Gram matrix.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn regressor_dim(&self) -> usize {
        self.params.len()
    }

    /// `Kbar[d][i] = k_d(x*, x_i) y_i[d]`.
    fn cross_block(&self, x: &[f64]) -> DMatrix<f64> {
        let ds = &self.dataset;
        DMatrix::from_fn(self.params.len(), ds.len(), |d, i| {
            base_kernel_unchecked(x, &ds.states[i], &self.params[d]) * ds.regressors[i][d]
        })
    }

    pub fn posterior_coefficients(&self, x: &[f64]) -> Result<PosteriorCoefficients, GpError> {
        if x.len() != self.dataset.state_dim() {
            return Err(GpError::DimensionMismatch { expected: self.dataset.state_dim(), got: x.len() });
        }
        let q = self.params.len();
        let prior = DMatrix::from_diagonal(&DVector::from_iterator(
            q,
            self.params.iter().map(|p| p.signal_variance),
        ));
        let (mu, sigma) = match &self.factor {
            None => (DVector::zeros(q), prior),
            Some(chol) => {
                let kbar = self.cross_block(x);
                let mu = &kbar * &self.weights;
                let v = lower_solve(chol, &kbar);
                let sigma = prior - v.transpose() * &v;
                (mu, (&sigma + sigma.transpose()) * 0.5)
            }
        };
        let (sigma, floor) = floor_to_pd(sigma);
        Ok(PosteriorCoefficients { mu, sigma, floor })
    }

    pub fn mean(&self, x: &[f64], y: &[f64]) -> Result<f64, GpError> {
        Ok(self.posterior_coefficients(x)?.mean(y))
    }

    pub fn variance(&self, x: &[f64], y: &[f64]) -> Result<f64, GpError> {
        Ok(self.posterior_coefficients(x)?.variance(y))
    }

    /// `log p(z | X, Y)` under the fitted hyperparameters.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let Some(chol) = &self.factor else { return 0.0 };
        let z = DVector::from_column_slice(&self.dataset.labels);
        let n = z.len() as f64;
        let logdet: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        -0.5 * z.dot(&self.weights) - 0.5 * logdet - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }
}

fn lower_solve(chol: &Cholesky<f64, Dyn>, kbar: &DMatrix<f64>) -> DMatrix<f64> {
    let l = chol.l();
    l.solve_lower_triangular(&kbar.transpose()).expect("cholesky factor has a positive diagonal")
}

fn floor_to_pd(sigma: DMatrix<f64>) -> (DMatrix<f64>, f64) {
    if sigma.clone().cholesky().is_some() {
        return (sigma, 0.0);
    }
    let scale = sigma.diagonal().iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    let q = sigma.nrows();
    for f in [1e-12, 1e-10, 1e-8, 1e-6, 1e-4] {
        let shifted = &sigma + DMatrix::identity(q, q) * (f * scale);
        if shifted.clone().cholesky().is_some() {
            return (shifted, f * scale);
        }
    }
    let shifted = &sigma + DMatrix::identity(q, q) * scale;
    (shifted, scale)
}

pub fn gram_matrix(ds: &ResidualDataset, params: &[BaseKernelParams]) -> DMatrix<f64> {
    let n = ds.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v: f64 = params
                .iter()
                .enumerate()
                .map(|(d, p)| {
                    ds.regressors[i][d]
                        * base_kernel_unchecked(&ds.states[i], &ds.states[j], p)
                        * ds.regressors[j][d]
                })
                .sum();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Multiplies every lengthscale by each candidate factor and keeps the one with the
/// highest log marginal likelihood. Returns the input unchanged for an empty dataset.
pub fn refine_lengthscales(
    dataset: Arc<ResidualDataset>,
    params: &[BaseKernelParams],
    factors: &[f64],
    jitter: &[f64],
) -> Result<Vec<BaseKernelParams>, GpError> {
    if dataset.is_empty() || factors.is_empty() {
        return Ok(params.to_vec());
    }
    let mut best: Option<(f64, Vec<BaseKernelParams>)> = None;
    for &f in factors {
        let cand: Vec<BaseKernelParams> = params
            .iter()
            .map(|p| BaseKernelParams {
                signal_variance: p.signal_variance,
                lengthscales: p.lengthscales.iter().map(|l| l * f).collect(),
            })
            .collect();
        let Ok(model) = CompositeGpModel::fit(dataset.clone(), cand.clone(), jitter) else {
            continue;
        };
        let lml = model.log_marginal_likelihood();
        if best.as_ref().is_none_or(|(b, _)| lml > *b) {
            best = Some((lml, cand));
        }
    }
    best.map(|(_, p)| p).ok_or(GpError::IllConditioned(jitter.last().copied().unwrap_or(0.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfidenceParams {
    pub beta: f64,
    pub delta: f64,
    pub eta: f64,
    pub kappa: f64,
}

impl Default for ConfidenceParams {
    fn default() -> Self {
        Self { beta: 2.0, delta: 0.05, eta: 1.0, kappa: 0.0 }
    }
}

/// `sqrt(2 eta^2 + 300 kappa ln^3((N + 1) / delta))`, natural log.
pub fn beta_bound(c: &ConfidenceParams, n: usize) -> Result<f64, GpError> {
    if !(c.delta > 0.0 && c.delta < 1.0) {
        return Err(GpError::BadDelta(c.delta));
    }
    let l = ((n as f64 + 1.0) / c.delta).ln();
    Ok((2.0 * c.eta * c.eta + 300.0 * c.kappa * l.powi(3)).sqrt())
}
