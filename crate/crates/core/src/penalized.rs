//! Damped Newton solver for the exponentially penalized equation shared by the
//! stationary, time-stepping and transport solvers:
//!
//!   Gᵀ W_c [(δ + k_ε(|q| − g)) |q|^{p−2} q] + W_n (m u + c u + b·∇_up u − rhs) = 0
//!
//! on interior nodes, with q = ∇_h u and homogeneous Dirichlet data.

use serde::{Deserialize, Serialize};

use crate::constraints::{kappa, kappa_prime};
use crate::error::{invalid, Result};
use crate::grid::{cell_gradient, norm2, Grid};
use crate::linalg::{BandMatrix, SymBandMatrix};

/// Regularization of |q| inside the flux Jacobian.
const JAC_REG: f64 = 1e-14;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Operator<'a> {
    pub grid: &'a Grid,
    pub p: f64,
    pub delta: f64,
    /// Coefficient of the node-weighted identity (1/τ for time steps).
    pub mass: f64,
    pub reaction: Option<&'a [f64]>,
    pub drift: Option<&'a [[f64; 2]]>,
    pub rhs: &'a [f64],
    pub bound: &'a [f64],
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NewtonSettings {
    /// Scaled residual tolerance (forcing units).
    pub tol: f64,
    /// Relative step tolerance.
    pub step_tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        Self { tol: 1e-10, step_tol: 1e-12, max_iter: 200 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LevelTrace {
    pub eps: f64,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct Outcome {
    pub u: Vec<f64>,
    pub eps: f64,
    pub levels: Vec<LevelTrace>,
    pub converged: bool,
}

pub(crate) enum Jacobian {
    Sym(SymBandMatrix),
    Gen(BandMatrix),
}

impl Jacobian {
    #[inline]
    fn add(&mut self, i: usize, j: usize, v: f64) {
        match self {
            // symmetric storage only receives the lower triangle
            Self::Sym(m) => {
                if j <= i {
                    m.add(i, j, v)
                }
            }
            Self::Gen(m) => m.add(i, j, v),
        }
    }
    fn factor(&mut self) -> Result<()> {
        match self {
            Self::Sym(m) => m.factor(),
            Self::Gen(m) => m.factor(),
        }
    }
    /// Multiplies the diagonal by 1 + τ.
    fn shift_diagonal(&mut self, tau: f64) {
        let n = match self {
            Self::Sym(m) => m.size(),
            Self::Gen(m) => m.size(),
        };
        for i in 0..n {
            let d = match self {
                Self::Sym(m) => m.get(i, i),
                Self::Gen(m) => m.get(i, i),
            };
            self.add(i, i, tau * d.abs());
        }
    }
    fn solve(&self, b: &mut [f64]) {
        match self {
            Self::Sym(m) => m.solve(b),
            Self::Gen(m) => m.solve(b),
        }
    }
}

impl<'a> Operator<'a> {
    pub fn validate(&self) -> Result<()> {
        let g = self.grid;
        if self.rhs.len() != g.node_count() || self.bound.len() != g.cell_count() {
            return Err(invalid("penalized operator data does not match the grid"));
        }
        if !(self.delta >= 0.0) || !(self.mass >= 0.0) {
            return Err(invalid("delta and mass must be nonnegative"));
        }
        if self.delta == 0.0 && self.mass == 0.0 {
            return Err(invalid("degenerate operator needs delta > 0 or a mass term"));
        }
        if let Some(c) = self.reaction {
            if c.len() != g.node_count() {
                return Err(invalid("reaction coefficient does not match the grid"));
            }
        }
        if let Some(b) = self.drift {
            if b.len() != g.node_count() {
                return Err(invalid("drift coefficient does not match the grid"));
            }
        }
        Ok(())
    }

    fn symmetric(&self) -> bool {
        self.drift.is_none()
    }

    /// Exponent used in the flux; the degenerate case uses the linear flux.
    #[inline]
    fn pexp(&self) -> f64 {
        if self.delta == 0.0 {
            2.0
        } else {
            self.p
        }
    }

    #[inline]
    fn cell_flux(&self, q: [f64; 2], g: f64, eps: f64) -> [f64; 2] {
        let r = norm2(q);
        if r == 0.0 {
            return [0.0, 0.0];
        }
        let k = kappa(r - g, eps);
        let p = self.pexp();
        let s = (self.delta + k) * if p == 2.0 { 1.0 } else { r.powf(p - 2.0) };
        [s * q[0], s * q[1]]
    }

    #[inline]
    fn upwind(&self, u: &[f64], n: usize, b: [f64; 2]) -> f64 {
        let g = self.grid;
        let [hx, hy] = g.spacing();
        let nx = g.nx();
        let mut s = if b[0] > 0.0 {
            b[0] * (u[n] - u[n - 1]) / hx
        } else {
            b[0] * (u[n + 1] - u[n]) / hx
        };
        if g.dim() == 2 {
            s += if b[1] > 0.0 {
                b[1] * (u[n] - u[n - nx]) / hy
            } else {
                b[1] * (u[n + nx] - u[n]) / hy
            };
        }
        s
    }

    /// Full-node residual; boundary entries are meaningless. Returns false if any
    /// entry is non-finite.
    pub fn residual(&self, u: &[f64], eps: f64, out: &mut [f64]) -> bool {
        let g = self.grid;
        out.iter_mut().for_each(|v| *v = 0.0);
        let wc = g.cell_weight();
        let [hx, hy] = g.spacing();
        for c in 0..g.cell_count() {
            let q = cell_gradient(g, u, c);
            let f = self.cell_flux(q, self.bound[c], eps);
            let (b, r, t) = g.cell_nodes(c);
            let ax = wc * f[0] / hx;
            out[r] += ax;
            out[b] -= ax;
            if g.dim() == 2 {
                let ay = wc * f[1] / hy;
                out[t] += ay;
                out[b] -= ay;
            }
        }
        let mut finite = true;
        for n in 0..g.node_count() {
            if g.is_boundary(n) {
                out[n] = 0.0;
                continue;
            }
            let mut z = self.mass * u[n] - self.rhs[n];
            if let Some(c) = self.reaction {
                z += c[n] * u[n];
            }
            if let Some(b) = self.drift {
                z += self.upwind(u, n, b[n]);
            }
            out[n] += g.node_weight(n) * z;
            if !out[n].is_finite() {
                finite = false;
            }
        }
        finite
    }

    pub(crate) fn jacobian(&self, u: &[f64], eps: f64) -> Jacobian {
        let g = self.grid;
        let m = g.interior_count();
        let bw = g.interior_bandwidth();
        let mut jac = if self.symmetric() {
            Jacobian::Sym(SymBandMatrix::zeros(m, bw))
        } else {
            Jacobian::Gen(BandMatrix::zeros(m, bw))
        };
        let wc = g.cell_weight();
        let [hx, hy] = g.spacing();
        let p = self.pexp();
        let two_d = g.dim() == 2;
        for c in 0..g.cell_count() {
            let q = cell_gradient(g, u, c);
            let r = norm2(q);
            let rr = (r * r + JAC_REG).sqrt();
            let s = r - self.bound[c];
            let k = kappa(s, eps);
            let kp = kappa_prime(s, eps);
            let base = (self.delta + k) * if p == 2.0 { 1.0 } else { rr.powf(p - 2.0) };
            let rank1 = base * (p - 2.0) / (rr * rr)
                + kp * if p == 2.0 { rr } else { rr.powf(p - 1.0) } / (rr * rr);
            // A = base·I + rank1·q qᵀ
            let a = [
                [base + rank1 * q[0] * q[0], rank1 * q[0] * q[1]],
                [rank1 * q[1] * q[0], base + rank1 * q[1] * q[1]],
            ];
            let (b, rn, t) = g.cell_nodes(c);
            let nodes = [b, rn, t];
            // local gradient matrix D (2 x 3) over (b, r, t)
            let d = [[-1.0 / hx, 1.0 / hx, 0.0], [-1.0 / hy, 0.0, 1.0 / hy]];
            let ncols = if two_d { 3 } else { 2 };
            let idx: [Option<usize>; 3] = [
                g.interior_index(nodes[0]),
                g.interior_index(nodes[1]),
                if two_d { g.interior_index(nodes[2]) } else { None },
            ];
            // AD (2 x ncols)
            let mut ad = [[0.0; 3]; 2];
            for row in 0..2 {
                for col in 0..ncols {
                    ad[row][col] = a[row][0] * d[0][col] + if two_d { a[row][1] * d[1][col] } else { 0.0 };
                }
            }
            for i in 0..ncols {
                let Some(ii) = idx[i] else { continue };
                for j in 0..ncols {
                    let Some(jj) = idx[j] else { continue };
                    let mut v = d[0][i] * ad[0][j];
                    if two_d {
                        v += d[1][i] * ad[1][j];
                    }
                    if v != 0.0 {
                        jac.add(ii, jj, wc * v);
                    }
                }
            }
        }
        let nx = g.nx();
        for n in 0..g.node_count() {
            let Some(i) = g.interior_index(n) else { continue };
            let w = g.node_weight(n);
            let mut diag = self.mass;
            if let Some(c) = self.reaction {
                diag += c[n];
            }
            jac.add(i, i, w * diag);
            if let Some(bf) = self.drift {
                let b = bf[n];
                let mut couple = |nb: usize, coef: f64| {
                    jac.add(i, i, -w * coef);
                    if let Some(j) = g.interior_index(nb) {
                        jac.add(i, j, w * coef);
                    }
                };
                if b[0] > 0.0 {
                    couple(n - 1, -b[0] / hx);
                } else {
                    couple(n + 1, b[0] / hx);
                }
                if two_d {
                    if b[1] > 0.0 {
                        couple(n - nx, -b[1] / hy);
                    } else {
                        couple(n + nx, b[1] / hy);
                    }
                }
            }
        }
        jac
    }

    fn scaled_residual_norm(&self, res: &[f64]) -> f64 {
        let g = self.grid;
        let mut m = 0.0f64;
        for n in 0..g.node_count() {
            if !g.is_boundary(n) {
                m = m.max((res[n] / g.node_weight(n)).abs());
            }
        }
        m
    }

    fn forcing_scale(&self, u: &[f64]) -> f64 {
        let f = self.rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let um = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        1.0f64.max(f).max(self.mass * um)
    }

    /// Largest θ ∈ (0, 1] for which θ·u has a finite residual.
    fn pull_back_to_finite(&self, u: &mut [f64], eps: f64, res: &mut [f64]) {
        let g = self.grid;
        // θ₀ makes every cell feasible, so the penalty vanishes there.
        let mut theta0: f64 = 1.0;
        for c in 0..g.cell_count() {
            let r = norm2(cell_gradient(g, u, c));
            if r > self.bound[c] {
                theta0 = theta0.min(self.bound[c] / r);
            }
        }
        let orig = u.to_vec();
        let (mut lo, mut hi) = (theta0, 1.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            for (a, b) in u.iter_mut().zip(&orig) {
                *a = mid * b;
            }
            if self.residual(u, eps, res) {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-6 {
                break;
            }
        }
        for (a, b) in u.iter_mut().zip(&orig) {
            *a = lo * b;
        }
        self.residual(u, eps, res);
    }

    /// Jacobian factor; huge penalty coefficients can destroy positive pivots
    /// through cancellation, in which case the diagonal is inflated and retried.
    pub(crate) fn factored_jacobian(&self, u: &[f64], eps: f64) -> Result<Jacobian> {
        let mut jac = self.jacobian(u, eps);
        let err = match jac.factor() {
            Ok(()) => return Ok(jac),
            Err(e) => e,
        };
        let mut tau = 1e-12;
        while tau <= 1.0 {
            let mut jac = self.jacobian(u, eps);
            jac.shift_diagonal(tau);
            if jac.factor().is_ok() {
                log::debug!("jacobian factored with diagonal shift {tau:e}");
                return Ok(jac);
            }
            tau *= 100.0;
        }
        Err(err)
    }

    /// Newton iterations at fixed ε starting from `u` (updated in place).
    pub fn newton(&self, u: &mut [f64], eps: f64, settings: &NewtonSettings) -> Result<LevelTrace> {
        let g = self.grid;
        let nn = g.node_count();
        let interior = g.interior_nodes();
        let mut res = vec![0.0; nn];
        let mut trial = vec![0.0; nn];
        let mut res_trial = vec![0.0; nn];
        if !self.residual(u, eps, &mut res) {
            self.pull_back_to_finite(u, eps, &mut res);
        }
        let tol = settings.tol * self.forcing_scale(u);
        let mut rnorm = self.scaled_residual_norm(&res);
        let mut it = 0;
        let mut converged = rnorm <= tol;
        let mut stalled = 0;
        while !converged && it < settings.max_iter {
            it += 1;
            let jac = self.factored_jacobian(u, eps)?;
            let mut d: Vec<f64> = interior.iter().map(|&n| -res[n]).collect();
            jac.solve(&mut d);
            let mut dir = vec![0.0; nn];
            for (k, &n) in interior.iter().enumerate() {
                dir[n] = d[k];
            }
            let alpha = if self.symmetric() {
                self.line_search_symmetric(u, &dir, &res, eps, &mut trial, &mut res_trial)
            } else {
                self.line_search_armijo(u, &dir, &res, eps, &mut trial, &mut res_trial)
            };
            let umax = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let step = alpha * dir.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for n in 0..nn {
                u[n] += alpha * dir[n];
            }
            self.residual(u, eps, &mut res);
            let new_norm = self.scaled_residual_norm(&res);
            if step <= settings.step_tol * umax.max(1.0) {
                stalled += 1;
            } else {
                stalled = 0;
            }
            rnorm = new_norm;
            converged = rnorm <= tol || (stalled >= 2 && alpha == 1.0) || stalled >= 4;
        }
        Ok(LevelTrace { eps, iterations: it, residual: rnorm, converged })
    }

    fn line_search_symmetric(
        &self,
        u: &[f64],
        dir: &[f64],
        res: &[f64],
        eps: f64,
        trial: &mut [f64],
        res_trial: &mut [f64],
    ) -> f64 {
        let dot = |r: &[f64]| -> f64 { r.iter().zip(dir).map(|(a, b)| a * b).sum() };
        let phi0 = dot(res);
        if !(phi0 < 0.0) {
            return 1.0;
        }
        let eval = |a: f64, trial: &mut [f64], res_trial: &mut [f64]| -> f64 {
            for n in 0..u.len() {
                trial[n] = u[n] + a * dir[n];
            }
            if self.residual(trial, eps, res_trial) {
                dot(res_trial)
            } else {
                f64::INFINITY
            }
        };
        let phi1 = eval(1.0, trial, res_trial);
        if phi1 <= 0.0 {
            return 1.0;
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        let (mut flo, mut fhi) = (phi0, phi1);
        for _ in 0..80 {
            // secant step when the bracket values are finite, bisection otherwise
            let mid = if fhi.is_finite() {
                let s = lo + (hi - lo) * (-flo) / (fhi - flo);
                s.clamp(lo + 0.05 * (hi - lo), hi - 0.05 * (hi - lo))
            } else {
                0.5 * (lo + hi)
            };
            let fm = eval(mid, trial, res_trial);
            if fm.abs() <= 0.1 * phi0.abs() {
                return mid;
            }
            if fm > 0.0 {
                hi = mid;
                fhi = fm;
            } else {
                lo = mid;
                flo = fm;
            }
            if hi - lo < 1e-14 {
                break;
            }
        }
        if lo > 0.0 {
            lo
        } else {
            hi
        }
    }

    fn line_search_armijo(
        &self,
        u: &[f64],
        dir: &[f64],
        res: &[f64],
        eps: f64,
        trial: &mut [f64],
        res_trial: &mut [f64],
    ) -> f64 {
        let r0: f64 = res.iter().map(|v| v * v).sum();
        let mut a = 1.0;
        for _ in 0..60 {
            for n in 0..u.len() {
                trial[n] = u[n] + a * dir[n];
            }
            if self.residual(trial, eps, res_trial) {
                let r: f64 = res_trial.iter().map(|v| v * v).sum();
                if r <= (1.0 - 1e-4 * a) * r0 {
                    return a;
                }
            }
            a *= 0.5;
        }
        a
    }

    /// Runs the ε schedule with warm starts.
    pub fn solve(&self, u0: &[f64], schedule: &[f64], settings: &NewtonSettings) -> Result<Outcome> {
        self.validate()?;
        let mut u = u0.to_vec();
        for n in 0..u.len() {
            if self.grid.is_boundary(n) {
                u[n] = 0.0;
            }
        }
        let mut levels = Vec::with_capacity(schedule.len());
        let mut converged = true;
        for &eps in schedule {
            let tr = self.newton(&mut u, eps, settings)?;
            log::debug!("eps {eps:e}: {} iterations, residual {:e}", tr.iterations, tr.residual);
            converged = tr.converged;
            levels.push(tr);
        }
        Ok(Outcome { u, eps: *schedule.last().unwrap(), levels, converged })
    }
}
