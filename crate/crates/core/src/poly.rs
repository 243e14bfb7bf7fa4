//! Sparse multivariate polynomials and polynomial control-affine systems.
//!
//! Used to build synthetic true/nominal pairs whose Lie derivatives, and hence
//! certificate residuals, are known exactly.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;

use crate::barrier::{BarrierError, LieChain};
use crate::plant::ControlAffine;

#[derive(Debug, Clone, PartialEq)]
pub struct Poly {
    nvars: usize,
    terms: BTreeMap<Vec<u32>, f64>,
}

impl Poly {
    pub fn zero(nvars: usize) -> Self {
        Self { nvars, terms: BTreeMap::new() }
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        let mut p = Self::zero(nvars);
        p.add_term(vec![0; nvars], c);
        p
    }

    /// The coordinate `x_i`.
    pub fn var(nvars: usize, i: usize) -> Self {
        let mut e = vec![0; nvars];
        e[i] = 1;
        let mut p = Self::zero(nvars);
        p.add_term(e, 1.0);
        p
    }

    pub fn monomial(coeff: f64, exponents: Vec<u32>) -> Self {
        let mut p = Self::zero(exponents.len());
        p.add_term(exponents, coeff);
        p
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn degree(&self) -> u32 {
        self.terms.keys().map(|e| e.iter().sum()).max().unwrap_or(0)
    }

    pub fn add_term(&mut self, exponents: Vec<u32>, coeff: f64) {
        assert_eq!(exponents.len(), self.nvars, "exponent length");
        if coeff == 0.0 {
            return;
        }
        let entry = self.terms.entry(exponents).or_insert(0.0);
        *entry += coeff;
        if *entry == 0.0 {
            self.terms.retain(|_, c| *c != 0.0);
        }
    }

    pub fn add(&self, other: &Poly) -> Poly {
        let mut out = self.clone();
        for (e, c) in &other.terms {
            out.add_term(e.clone(), *c);
        }
        out
    }

    pub fn sub(&self, other: &Poly) -> Poly {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, s: f64) -> Poly {
        let mut out = Poly::zero(self.nvars);
        for (e, c) in &self.terms {
            out.add_term(e.clone(), c * s);
        }
        out
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        let mut out = Poly::zero(self.nvars);
        for (ea, ca) in &self.terms {
            for (eb, cb) in &other.terms {
                let e = ea.iter().zip(eb).map(|(a, b)| a + b).collect();
                out.add_term(e, ca * cb);
            }
        }
        out
    }

    /// Partial derivative with respect to `x_i`.
    pub fn partial(&self, i: usize) -> Poly {
        let mut out = Poly::zero(self.nvars);
        for (e, c) in &self.terms {
            if e[i] > 0 {
                let mut d = e.clone();
                d[i] -= 1;
                out.add_term(d, c * e[i] as f64);
            }
        }
        out
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(e, c)| c * e.iter().zip(x).map(|(&k, &xi)| xi.powi(k as i32)).product::<f64>())
            .sum()
    }

    /// Random dense polynomial of total degree at most `degree` with coefficients in `[-scale, scale]`.
    pub fn random<R: Rng>(nvars: usize, degree: u32, scale: f64, rng: &mut R) -> Poly {
        let mut p = Poly::zero(nvars);
        for e in exponents_up_to(nvars, degree) {
            p.add_term(e, rng.random_range(-scale..=scale));
        }
        p
    }
}

fn exponents_up_to(nvars: usize, degree: u32) -> Vec<Vec<u32>> {
    let mut out = vec![vec![]];
    for _ in 0..nvars {
        let mut next = Vec::new();
        for e in &out {
            let used: u32 = e.iter().sum();
            for k in 0..=(degree - used) {
                let mut f = e.clone();
                f.push(k);
                next.push(f);
            }
        }
        out = next;
    }
    out
}

/// `x' = f(x) + g(x) u` with polynomial entries.
#[derive(Debug, Clone)]
pub struct PolySystem {
    pub drift: Vec<Poly>,
    /// `input[i][j]` is `g_ij`.
    pub input: Vec<Vec<Poly>>,
}

impl PolySystem {
    pub fn new(drift: Vec<Poly>, input: Vec<Vec<Poly>>) -> Result<Self, BarrierError> {
        let n = drift.len();
        if input.len() != n {
            return Err(BarrierError::DimensionMismatch { expected: n, got: input.len() });
        }
        let m = input.first().map_or(0, |r| r.len());
        if input.iter().any(|r| r.len() != m) {
            return Err(BarrierError::InvalidDesign("ragged input matrix".into()));
        }
        if drift.iter().chain(input.iter().flatten()).any(|p| p.nvars() != n) {
            return Err(BarrierError::InvalidDesign("polynomial arity must equal state dimension".into()));
        }
        Ok(Self { drift, input })
    }

    pub fn lie_drift(&self, p: &Poly) -> Poly {
        let mut out = Poly::zero(p.nvars());
        for (i, f) in self.drift.iter().enumerate() {
            out = out.add(&p.partial(i).mul(f));
        }
        out
    }

    pub fn lie_input(&self, p: &Poly) -> Vec<Poly> {
        let m = self.input.first().map_or(0, |r| r.len());
        (0..m)
            .map(|j| {
                let mut out = Poly::zero(p.nvars());
                for (i, row) in self.input.iter().enumerate() {
                    out = out.add(&p.partial(i).mul(&row[j]));
                }
                out
            })
            .collect()
    }
}

impl ControlAffine for PolySystem {
    fn state_dim(&self) -> usize {
        self.drift.len()
    }
    fn input_dim(&self) -> usize {
        self.input.first().map_or(0, |r| r.len())
    }
    fn drift(&self, x: &[f64]) -> Vec<f64> {
        self.drift.iter().map(|p| p.eval(x)).collect()
    }
    fn actuation(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.state_dim();
        let m = self.input_dim();
        DMatrix::from_fn(n, m, |i, j| self.input[i][j].eval(x))
    }
}

/// Symbolic Lie chain of a polynomial barrier on a polynomial system.
#[derive(Debug, Clone)]
pub struct PolyChain {
    h: Poly,
    drift: Vec<Poly>,
    input: Vec<Poly>,
}

impl PolyChain {
    /// Fails unless `L_g L_f^k h` vanishes identically for `k < r - 1`.
    pub fn new(system: &PolySystem, h: Poly, r: usize) -> Result<Self, BarrierError> {
        if r == 0 {
            return Err(BarrierError::InvalidDesign("relative degree must be positive".into()));
        }
        let mut lie = vec![h.clone()];
        for _ in 0..r {
            let next = system.lie_drift(lie.last().unwrap());
            lie.push(next);
        }
        for (k, p) in lie.iter().take(r - 1).enumerate() {
            if system.lie_input(p).iter().any(|q| !q.is_zero()) {
                return Err(BarrierError::InvalidDesign(format!(
                    "input appears at derivative order {}",
                    k + 1
                )));
            }
        }
        let input = system.lie_input(&lie[r - 1]);
        Ok(Self { h, drift: lie[1..].to_vec(), input })
    }

    pub fn barrier_poly(&self) -> &Poly {
        &self.h
    }

    /// `[L_f h, .., L_f^r h]` as polynomials.
    pub fn drift_polys(&self) -> &[Poly] {
        &self.drift
    }

    pub fn input_polys(&self) -> &[Poly] {
        &self.input
    }
}

impl LieChain for PolyChain {
    fn relative_degree(&self) -> usize {
        self.drift.len()
    }
    fn input_dim(&self) -> usize {
        self.input.len()
    }
    fn barrier(&self, x: &[f64]) -> f64 {
        self.h.eval(x)
    }
    fn drift_derivatives(&self, x: &[f64]) -> Vec<f64> {
        self.drift.iter().map(|p| p.eval(x)).collect()
    }
    fn input_derivative(&self, x: &[f64]) -> Vec<f64> {
        self.input.iter().map(|p| p.eval(x)).collect()
    }
}

/// Top-order certificate evaluated by direct recursion on a model:
/// `zeta_0 = h`, `zeta_i = L_f zeta_{i-1} + k_i zeta_{i-1}` for `i < r`, then
/// `zeta_r = L_f zeta_{r-1} + L_g zeta_{r-1} u + k_r zeta_{r-1}`.
pub fn recursive_certificate(system: &PolySystem, h: &Poly, gains: &[f64], x: &[f64], u: &[f64]) -> f64 {
    let r = gains.len();
    let mut zeta = h.clone();
    for &k in &gains[..r - 1] {
        zeta = system.lie_drift(&zeta).add(&zeta.scale(k));
    }
    let lg = system.lie_input(&zeta);
    system.lie_drift(&zeta).eval(x)
        + lg.iter().zip(u).map(|(p, ui)| p.eval(x) * ui).sum::<f64>()
        + gains[r - 1] * zeta.eval(x)
}

/// A synthetic true/nominal pair in strict-feedback form with relative degree `r`.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub truth: PolySystem,
    pub nominal: PolySystem,
    pub barrier: Poly,
    pub relative_degree: usize,
}

impl SyntheticPair {
    /// Chain `x_i' = x_{i+1} + p_i(x_1..x_i)` for `i < r`, `x_r' = p_r(x) + (c + q(x)) u`
    /// with `h = b_0 - x_1 + b(x_1)`; true and nominal differ in every `p_i`, `c` and `q`.
    pub fn random<R: Rng>(r: usize, rng: &mut R) -> Self {
        assert!(r >= 1);
        let n = r;
        let lower = |i: usize, rng: &mut R| -> Poly {
            // depends on x_1..x_{i+1} only, keeping the strict-feedback structure
            let mut p = Poly::zero(n);
            for e in exponents_up_to(i + 1, 2) {
                let mut full = e.clone();
                full.resize(n, 0);
                p.add_term(full, rng.random_range(-0.5..=0.5));
            }
            p
        };
        let build = |rng: &mut R| -> PolySystem {
            let mut drift = Vec::with_capacity(n);
            for i in 0..n {
                let mut p = lower(i, rng);
                if i + 1 < n {
                    p = p.add(&Poly::var(n, i + 1));
                }
                drift.push(p);
            }
            let mut input = vec![vec![Poly::zero(n)]; n];
            let gain = rng.random_range(1.0..=2.0);
            let wobble = Poly::var(n, 0).mul(&Poly::var(n, 0)).scale(rng.random_range(0.0..=0.3));
            input[n - 1][0] = Poly::constant(n, gain).add(&wobble);
            PolySystem::new(drift, input).expect("consistent synthetic system")
        };
        let truth = build(rng);
        let nominal = build(rng);
        let mut barrier = Poly::constant(n, rng.random_range(0.5..=1.5)).sub(&Poly::var(n, 0));
        barrier = barrier.add(&Poly::var(n, 0).mul(&Poly::var(n, 0)).scale(rng.random_range(-0.2..=0.2)));
        Self { truth, nominal, barrier, relative_degree: r }
    }

    pub fn nominal_chain(&self) -> Result<PolyChain, BarrierError> {
        PolyChain::new(&self.nominal, self.barrier.clone(), self.relative_degree)
    }

    pub fn true_chain(&self) -> Result<PolyChain, BarrierError> {
        PolyChain::new(&self.truth, self.barrier.clone(), self.relative_degree)
    }

    /// `([Delta_1..Delta_r], Delta_g)` at `x`, from the two symbolic chains.
    pub fn residuals(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>), BarrierError> {
        let t = self.true_chain()?;
        let nm = self.nominal_chain()?;
        let df = t
            .drift_derivatives(x)
            .iter()
            .zip(nm.drift_derivatives(x))
            .map(|(a, b)| a - b)
            .collect();
        let dg = t
            .input_derivative(x)
            .iter()
            .zip(nm.input_derivative(x))
            .map(|(a, b)| a - b)
            .collect();
        Ok((df, dg))
    }

    pub fn truth_arc(&self) -> Arc<dyn ControlAffine> {
        Arc::new(self.truth.clone())
    }

    pub fn nominal_arc(&self) -> Arc<dyn ControlAffine> {
        Arc::new(self.nominal.clone())
    }
}
