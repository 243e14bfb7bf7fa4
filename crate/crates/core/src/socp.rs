//! Small dense second-order cone programs.
//!
//! Problems are posed as `min c^T w` subject to cone constraints
//! `||M w + n|| <= p^T w + q` and affine constraints `a^T w + b >= 0`, and are
//! solved by a primal-dual interior-point method on the homogeneous self-dual
//! embedding with Nesterov-Todd scaling and Mehrotra correction.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("malformed program: {0}")]
    Malformed(String),
}

/// `||m w + n|| <= p^T w + q`.
#[derive(Debug, Clone, PartialEq)]
pub struct SocConstraint {
    pub m: DMatrix<f64>,
    pub n: DVector<f64>,
    pub p: DVector<f64>,
    pub q: f64,
}

impl SocConstraint {
    /// `p^T w + q - ||m w + n||`; non-negative when satisfied.
    pub fn slack(&self, w: &DVector<f64>) -> f64 {
        self.p.dot(w) + self.q - (&self.m * w + &self.n).norm()
    }
}

/// `a^T w + b >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineConstraint {
    pub a: DVector<f64>,
    pub b: f64,
}

impl AffineConstraint {
    pub fn slack(&self, w: &DVector<f64>) -> f64 {
        self.a.dot(w) + self.b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConeProgram {
    pub cost: DVector<f64>,
    pub cones: Vec<SocConstraint>,
    pub affines: Vec<AffineConstraint>,
}

impl ConeProgram {
    pub fn dimension(&self) -> usize {
        self.cost.len()
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let n = self.dimension();
        if n == 0 {
            return Err(SolverError::Malformed("no decision variables".into()));
        }
        for (i, c) in self.cones.iter().enumerate() {
            if c.m.ncols() != n || c.p.len() != n || c.m.nrows() != c.n.len() {
                return Err(SolverError::Malformed(format!("cone {i} has inconsistent shape")));
            }
            let finite = c.m.iter().chain(c.n.iter()).chain(c.p.iter()).all(|v| v.is_finite());
            if !finite || !c.q.is_finite() {
                return Err(SolverError::Malformed(format!("cone {i} has non-finite data")));
            }
        }
        for (i, a) in self.affines.iter().enumerate() {
            if a.a.len() != n {
                return Err(SolverError::Malformed(format!("affine {i} has inconsistent shape")));
            }
            if !a.b.is_finite() || a.a.iter().any(|v| !v.is_finite()) {
                return Err(SolverError::Malformed(format!("affine {i} has non-finite data")));
            }
        }
        if self.cost.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::Malformed("non-finite cost".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    PrimalInfeasible,
    DualInfeasible,
    MaxIterations,
    /// Search direction or step length broke down before convergence.
    Stalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConeSolution {
    pub status: SolveStatus,
    pub x: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
}

/// Nonnegative orthant rows first, then one block per second-order cone.
#[derive(Debug, Clone)]
struct Layout {
    orthant: usize,
    socs: Vec<(usize, usize)>,
    rows: usize,
}

impl Layout {
    fn new(orthant: usize, sizes: &[usize]) -> Self {
        let mut socs = Vec::with_capacity(sizes.len());
        let mut at = orthant;
        for &q in sizes {
            socs.push((at, q));
            at += q;
        }
        Self { orthant, socs, rows: at }
    }

    fn degree(&self) -> usize {
        self.orthant + self.socs.len()
    }

    fn identity(&self) -> DVector<f64> {
        let mut e = DVector::zeros(self.rows);
        for i in 0..self.orthant {
            e[i] = 1.0;
        }
        for &(s, _) in &self.socs {
            e[s] = 1.0;
        }
        e
    }

    /// Smallest Jordan eigenvalue.
    fn min_eig(&self, v: &DVector<f64>) -> f64 {
        let mut m = f64::INFINITY;
        for i in 0..self.orthant {
            m = m.min(v[i]);
        }
        for &(s, q) in &self.socs {
            m = m.min(v[s] - v.rows(s + 1, q - 1).norm());
        }
        m
    }

    fn jordan(&self, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.rows);
        for i in 0..self.orthant {
            out[i] = u[i] * v[i];
        }
        for &(s, q) in &self.socs {
            out[s] = u.rows(s, q).dot(&v.rows(s, q));
            for k in 1..q {
                out[s + k] = u[s] * v[s + k] + v[s] * u[s + k];
            }
        }
        out
    }

    /// Solves `lambda o x = d`.
    fn inv_prod(&self, lambda: &DVector<f64>, d: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.rows);
        for i in 0..self.orthant {
            out[i] = d[i] / lambda[i];
        }
        for &(s, q) in &self.socs {
            let l0 = lambda[s];
            let l1 = lambda.rows(s + 1, q - 1);
            let d1 = d.rows(s + 1, q - 1);
            let det = l0 * l0 - l1.norm_squared();
            let x0 = (l0 * d[s] - l1.dot(&d1)) / det;
            out[s] = x0;
            for k in 1..q {
                out[s + k] = (d[s + k] - x0 * lambda[s + k]) / l0;
            }
        }
        out
    }

    /// Largest `alpha` (capped at `cap`) keeping `v + alpha dv` in the cone.
    fn max_step(&self, v: &DVector<f64>, dv: &DVector<f64>, cap: f64) -> f64 {
        let mut alpha = cap;
        for i in 0..self.orthant {
            if dv[i] < 0.0 {
                alpha = alpha.min(-v[i] / dv[i]);
            }
        }
        for &(s, q) in &self.socs {
            let (v0, d0) = (v[s], dv[s]);
            let v1 = v.rows(s + 1, q - 1);
            let d1 = dv.rows(s + 1, q - 1);
            if d0 < 0.0 {
                alpha = alpha.min(-v0 / d0);
            }
            let a = d0 * d0 - d1.norm_squared();
            let b = 2.0 * (v0 * d0 - v1.dot(&d1));
            let c = (v0 * v0 - v1.norm_squared()).max(0.0);
            if let Some(root) = smallest_positive_root(a, b, c) {
                alpha = alpha.min(root);
            }
        }
        alpha.max(0.0)
    }

    /// Nesterov-Todd scaling `W` (symmetric, block diagonal) with `W z = W^-1 s = lambda`.
    fn nt_scaling(&self, s: &DVector<f64>, z: &DVector<f64>) -> Scaling {
        let p = self.rows;
        let mut w = DMatrix::zeros(p, p);
        let mut winv = DMatrix::zeros(p, p);
        for i in 0..self.orthant {
            let r = (s[i] / z[i]).sqrt();
            w[(i, i)] = r;
            winv[(i, i)] = 1.0 / r;
        }
        for &(st, q) in &self.socs {
            let sb = s.rows(st, q);
            let zb = z.rows(st, q);
            let snorm = (sb[0] * sb[0] - sb.rows(1, q - 1).norm_squared()).max(1e-300).sqrt();
            let znorm = (zb[0] * zb[0] - zb.rows(1, q - 1).norm_squared()).max(1e-300).sqrt();
            let sbar = sb / snorm;
            let zbar = zb / znorm;
            let gamma = ((1.0 + sbar.dot(&zbar)) / 2.0).sqrt();
            let mut wbar = DVector::zeros(q);
            wbar[0] = (sbar[0] + zbar[0]) / (2.0 * gamma);
            for k in 1..q {
                wbar[k] = (sbar[k] - zbar[k]) / (2.0 * gamma);
            }
            let eta = (snorm / znorm).sqrt();
            let w1 = wbar.rows(1, q - 1);
            let outer = &w1 * w1.transpose() / (1.0 + wbar[0]);
            let mut blk = DMatrix::zeros(q, q);
            blk[(0, 0)] = wbar[0];
            for k in 1..q {
                blk[(0, k)] = wbar[k];
                blk[(k, 0)] = wbar[k];
            }
            let mut inner = DMatrix::identity(q - 1, q - 1) + &outer;
            blk.view_mut((1, 1), (q - 1, q - 1)).copy_from(&inner);
            w.view_mut((st, st), (q, q)).copy_from(&(&blk * eta));
            for k in 1..q {
                blk[(0, k)] = -wbar[k];
                blk[(k, 0)] = -wbar[k];
            }
            inner = DMatrix::identity(q - 1, q - 1) + outer;
            blk.view_mut((1, 1), (q - 1, q - 1)).copy_from(&inner);
            winv.view_mut((st, st), (q, q)).copy_from(&(blk / eta));
        }
        let lambda = &w * z;
        Scaling { w, winv, lambda }
    }
}

struct Scaling {
    w: DMatrix<f64>,
    winv: DMatrix<f64>,
    lambda: DVector<f64>,
}

fn smallest_positive_root(a: f64, b: f64, c: f64) -> Option<f64> {
    // roots of a t^2 + b t + c with c >= 0
    if a == 0.0 {
        return if b < 0.0 { Some(-c / b) } else { None };
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let t = -0.5 * (b + b.signum() * disc.sqrt());
    let mut best: Option<f64> = None;
    for r in [t / a, if t != 0.0 { c / t } else { f64::NAN }] {
        if r.is_finite() && r >= 0.0 {
            best = Some(best.map_or(r, |b: f64| b.min(r)));
        }
    }
    best
}

/// Standard form `min c^T x  s.t.  h - G x in K`.
struct StandardForm {
    g: DMatrix<f64>,
    h: DVector<f64>,
    c: DVector<f64>,
    layout: Layout,
}

fn standard_form(program: &ConeProgram) -> StandardForm {
    let n = program.dimension();
    let sizes: Vec<usize> = program.cones.iter().map(|c| c.m.nrows() + 1).collect();
    let layout = Layout::new(program.affines.len(), &sizes);
    let mut g = DMatrix::zeros(layout.rows, n);
    let mut h = DVector::zeros(layout.rows);
    for (i, a) in program.affines.iter().enumerate() {
        for j in 0..n {
            g[(i, j)] = -a.a[j];
        }
        h[i] = a.b;
    }
    for (cone, &(st, q)) in program.cones.iter().zip(&layout.socs) {
        for j in 0..n {
            g[(st, j)] = -cone.p[j];
        }
        h[st] = cone.q;
        for k in 1..q {
            for j in 0..n {
                g[(st + k, j)] = -cone.m[(k - 1, j)];
            }
            h[st + k] = cone.n[k - 1];
        }
    }
    StandardForm { g, h, c: program.cost.clone(), layout }
}

/// Column scaling `d` and per-block row scaling `e` so that `diag(e) G diag(d)`
/// has entries of comparable magnitude.
fn equilibrate(sf: &StandardForm) -> (DVector<f64>, DVector<f64>) {
    let (p, n) = sf.g.shape();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(p, 1.0);
    let clamp = |v: f64| v.clamp(1e-4, 1e4);
    for _ in 0..10 {
        let scaled = DMatrix::from_fn(p, n, |i, j| e[i] * sf.g[(i, j)] * d[j]);
        for j in 0..n {
            let cmax = scaled.column(j).amax();
            if cmax > 0.0 {
                d[j] = clamp(d[j] / cmax.sqrt());
            }
        }
        for i in 0..sf.layout.orthant {
            let rmax = scaled.row(i).amax();
            if rmax > 0.0 {
                e[i] = clamp(e[i] / rmax.sqrt());
            }
        }
        for &(st, q) in &sf.layout.socs {
            let bmax = scaled.rows(st, q).amax();
            if bmax > 0.0 {
                let f = clamp(e[st] / bmax.sqrt());
                for k in 0..q {
                    e[st + k] = f;
                }
            }
        }
    }
    (d, e)
}

#[derive(Clone)]
struct Iterate {
    x: DVector<f64>,
    s: DVector<f64>,
    z: DVector<f64>,
    tau: f64,
    kappa: f64,
}

struct Kkt<'a> {
    g: &'a DMatrix<f64>,
    w2: DMatrix<f64>,
    winv: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl<'a> Kkt<'a> {
    /// Thin QR of `W^-1 G`; avoids squaring the condition number of the normal equations.
    fn new(g: &'a DMatrix<f64>, sc: &Scaling) -> Option<Self> {
        let w2 = &sc.w * &sc.w;
        let gs = &sc.winv * g;
        let qr = gs.qr();
        let r = qr.r();
        let rmax = r.diagonal().amax();
        if !(rmax > 0.0) || r.diagonal().iter().any(|d| !(d.abs() > 1e-14 * rmax)) {
            return None;
        }
        Some(Self { g, w2, winv: sc.winv.clone(), q: qr.q(), r })
    }

    fn apply(&self, a: &DVector<f64>, b: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (self.g.transpose() * b, self.g * a - &self.w2 * b)
    }

    fn once(&self, r1: &DVector<f64>, r2: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        let wr2 = &self.winv * r2;
        let y = self.r.transpose().solve_lower_triangular(r1)?;
        let a = self.r.solve_upper_triangular(&(y + self.q.transpose() * &wr2))?;
        let bt = &self.q * (&self.r * &a) - wr2;
        Some((a, &self.winv * bt))
    }

    /// `[0 G^T; G -W^2] [a; b] = [r1; r2]` with iterative refinement.
    fn solve(&self, r1: &DVector<f64>, r2: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        let (mut a, mut b) = self.once(r1, r2)?;
        for _ in 0..3 {
            let (e1, e2) = self.apply(&a, &b);
            let (d1, d2) = (r1 - e1, r2 - e2);
            if d1.amax().max(d2.amax()) <= 1e-15 * (1.0 + r1.amax().max(r2.amax())) {
                break;
            }
            let (ca, cb) = self.once(&d1, &d2)?;
            a += ca;
            b += cb;
        }
        Some((a, b))
    }
}

/// Interior-point solve. Deterministic for identical inputs.
pub fn solve_cone_program(program: &ConeProgram, settings: &SolverSettings) -> Result<ConeSolution, SolverError> {
    program.validate()?;
    let sf = standard_form(program);
    let (dcol, erow) = equilibrate(&sf);
    let (p, n) = sf.g.shape();
    let g = DMatrix::from_fn(p, n, |i, j| erow[i] * sf.g[(i, j)] * dcol[j]);
    let h = sf.h.component_mul(&erow);
    let c = sf.c.component_mul(&dcol);
    let layout = &sf.layout;

    let unscale = |it: &Iterate| -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        (
            it.x.component_mul(&dcol),
            it.s.component_div(&erow),
            it.z.component_mul(&erow),
        )
    };
    let tol = settings.tol;
    let hnorm = sf.h.norm().max(1.0);
    let cnorm = sf.c.norm().max(1.0);
    let report = |status: SolveStatus, it: &Iterate, iters: usize| -> ConeSolution {
        let (x, s, z) = unscale(it);
        let tau = if it.tau > 0.0 { it.tau } else { 1.0 };
        let x = &x / tau;
        let (s, z) = (&s / tau, &z / tau);
        let pres = (&sf.g * &x + &s - &sf.h).norm() / (hnorm + x.norm() + s.norm());
        let dres = (sf.g.transpose() * &z + &sf.c).norm() / (cnorm + z.norm());
        ConeSolution {
            status,
            objective: sf.c.dot(&x),
            x,
            iterations: iters,
            primal_residual: pres,
            dual_residual: dres,
            gap: s.dot(&z),
        }
    };

    // Initial point from least-squares problems with W = I, shifted into the cone.
    let mut gtg = g.transpose() * &g;
    let reg = 1e-12 * (1.0 + gtg.diagonal().amax());
    for i in 0..n {
        gtg[(i, i)] += reg;
    }
    let Some(chol) = gtg.cholesky() else {
        return Err(SolverError::Malformed("constraint matrix is rank deficient".into()));
    };
    let x0 = chol.solve(&(g.transpose() * &h));
    let shift = |v: DVector<f64>| -> DVector<f64> {
        let alpha = -layout.min_eig(&v);
        if alpha < 0.0 {
            v
        } else {
            v + layout.identity() * (1.0 + alpha)
        }
    };
    let s0 = shift(&h - &g * &x0);
    let z0 = shift(&g * chol.solve(&(-&c)));
    let mut it = Iterate { x: x0, s: s0, z: z0, tau: 1.0, kappa: 1.0 };
    let degree = layout.degree() as f64;
    let e = layout.identity();
    // returned, with its status, if the iteration stalls or runs out
    let mut best: (f64, Iterate) = (f64::INFINITY, it.clone());

    for iter in 0..=settings.max_iter {
        let (xu, su, zu) = unscale(&it);
        // termination on the original data
        let tau = it.tau;
        let rx = sf.g.transpose() * &zu + &sf.c * tau;
        let rz = &sf.g * &xu + &su - &sf.h * tau;
        // residuals relative to the size of the current point as well as the data
        let pres = rz.norm() / (tau * hnorm + xu.norm() + su.norm());
        let dres = rx.norm() / (tau * cnorm + zu.norm());
        let pcost = sf.c.dot(&xu) / tau;
        let dcost = -sf.h.dot(&zu) / tau;
        let gap = su.dot(&zu) / (tau * tau);
        let relgap = if pcost < 0.0 {
            gap / -pcost
        } else if dcost > 0.0 {
            gap / dcost
        } else {
            f64::INFINITY
        };
        if pres <= tol && dres <= tol && (gap <= tol || relgap <= tol) {
            return Ok(report(SolveStatus::Optimal, &it, iter));
        }
        let merit = pres.max(dres).max(gap.min(relgap));
        if merit < best.0 {
            best = (merit, it.clone());
        }
        let hz = sf.h.dot(&zu);
        if hz < 0.0 && (sf.g.transpose() * &zu).norm() / -hz <= tol {
            let mut sol = report(SolveStatus::PrimalInfeasible, &it, iter);
            sol.x = xu / tau.max(1e-300);
            return Ok(sol);
        }
        let cx = sf.c.dot(&xu);
        if cx < 0.0 && (&sf.g * &xu + &su).norm() / -cx <= tol {
            return Ok(report(SolveStatus::DualInfeasible, &it, iter));
        }
        if iter == settings.max_iter {
            break;
        }

        // residuals of the scaled embedding
        let rx = g.transpose() * &it.z + &c * it.tau;
        let rz = &g * &it.x + &it.s - &h * it.tau;
        let rtau = it.kappa + c.dot(&it.x) + h.dot(&it.z);
        let mu = (it.s.dot(&it.z) + it.tau * it.kappa) / (degree + 1.0);

        let sc = layout.nt_scaling(&it.s, &it.z);
        let Some(kkt) = Kkt::new(&g, &sc) else {
            return Ok(report(SolveStatus::Stalled, &best.1, iter));
        };
        let Some((x1, z1)) = kkt.solve(&(-&c), &h) else {
            return Ok(report(SolveStatus::Stalled, &best.1, iter));
        };
        let denom_base = c.dot(&x1) + h.dot(&z1) - it.kappa / it.tau;

        let direction = |eta: f64, ds: &DVector<f64>, dkappa: f64| {
            let r1 = -&rx * eta;
            let r2 = -&rz * eta + &sc.w * layout.inv_prod(&sc.lambda, ds);
            let (x2, z2) = kkt.solve(&r1, &r2).unwrap_or_else(|| (x1.map(|_| f64::NAN), z1.map(|_| f64::NAN)));
            let dtau = (-eta * rtau + dkappa / it.tau - c.dot(&x2) - h.dot(&z2)) / denom_base;
            let dx = x2 + &x1 * dtau;
            let dz = z2 + &z1 * dtau;
            let dsv = -(&sc.w * layout.inv_prod(&sc.lambda, ds)) - &kkt.w2 * &dz;
            let dk = -(dkappa + it.kappa * dtau) / it.tau;
            (dx, dsv, dz, dtau, dk)
        };
        let step_len = |ds: &DVector<f64>, dz: &DVector<f64>, dtau: f64, dk: f64, cap: f64| {
            let mut a = layout.max_step(&it.s, ds, cap).min(layout.max_step(&it.z, dz, cap));
            if dtau < 0.0 {
                a = a.min(-it.tau / dtau);
            }
            if dk < 0.0 {
                a = a.min(-it.kappa / dk);
            }
            a
        };

        let ll = layout.jordan(&sc.lambda, &sc.lambda);
        let (_, ds_a, dz_a, dtau_a, dk_a) = direction(1.0, &ll, it.tau * it.kappa);
        let alpha_aff = step_len(&ds_a, &dz_a, dtau_a, dk_a, 1.0);
        let sigma = (1.0 - alpha_aff).powi(3).clamp(0.0, 1.0);

        let corr = layout.jordan(&(&sc.winv * &ds_a), &(&sc.w * &dz_a));
        let ds_c = &ll + corr - &e * (sigma * mu);
        let dk_c = it.tau * it.kappa + dtau_a * dk_a - sigma * mu;
        let (dx, ds, dz, dtau, dk) = direction(1.0 - sigma, &ds_c, dk_c);
        if [dtau, dk].iter().any(|v| !v.is_finite()) || dx.iter().chain(ds.iter()).chain(dz.iter()).any(|v| !v.is_finite()) {
            return Ok(report(SolveStatus::Stalled, &best.1, iter));
        }
        let alpha = (0.99 * step_len(&ds, &dz, dtau, dk, 1.0 / 0.99)).min(1.0);
        if alpha < 1e-12 {
            return Ok(report(SolveStatus::Stalled, &best.1, iter));
        }
        it.x += dx * alpha;
        it.s += ds * alpha;
        it.z += dz * alpha;
        it.tau += dtau * alpha;
        it.kappa += dk * alpha;
    }
    Ok(report(SolveStatus::MaxIterations, &best.1, settings.max_iter))
}
