//! Stationary gradient-constrained problems: the penalized solver, a splitting
//! reference solver, the vanishing-viscosity limit, multiplier recovery, the
//! double-obstacle and complementarity formulations, and dependence studies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::{kappa, violation_raw, BoundField, PenaltyParams};
use crate::error::{invalid, Error, Result};
use crate::geodesic::obstacles;
use crate::grid::{
    assemble_stiffness, cell_gradient, cell_norm, check_p, gradient_transpose, norm2, p_flux_cell,
    smooth, Grid, ScalarField, DEFAULT_SEED,
};
use crate::linalg::BandMatrix;
use crate::penalized::{Jacobian, LevelTrace, NewtonSettings, Operator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipticProblem {
    pub grid: Grid,
    pub p: f64,
    pub delta: f64,
    pub f: ScalarField,
    pub g: BoundField,
}

impl EllipticProblem {
    pub fn new(grid: Grid, p: f64, delta: f64, f: ScalarField, g: BoundField) -> Result<Self> {
        let pr = Self { grid, p, delta, f, g };
        pr.validate()?;
        Ok(pr)
    }

    pub fn validate(&self) -> Result<()> {
        check_p(self.p)?;
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return Err(invalid(format!("delta must be >= 0, got {}", self.delta)));
        }
        self.f.check(&self.grid)?;
        self.g.check(&self.grid)?;
        if self.f.0.iter().any(|v| !v.is_finite()) {
            return Err(invalid("forcing has non-finite values"));
        }
        Ok(())
    }

    /// (δ/p)Σ w_c|∇u|^p − Σ w_n f u.
    pub fn objective(&self, u: &[f64]) -> f64 {
        energy(&self.grid, self.p, self.delta, &self.f.0, u)
    }
}

pub(crate) fn energy(grid: &Grid, p: f64, delta: f64, f: &[f64], u: &[f64]) -> f64 {
    let wc = grid.cell_weight();
    let mut e = 0.0;
    if delta > 0.0 {
        for c in 0..grid.cell_count() {
            e += norm2(cell_gradient(grid, u, c)).powf(p);
        }
        e *= delta / p * wc;
    }
    e - inner_nodes(grid, f, u)
}

pub(crate) fn inner_nodes(grid: &Grid, a: &[f64], b: &[f64]) -> f64 {
    (0..grid.node_count()).map(|n| grid.node_weight(n) * a[n] * b[n]).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub newton: NewtonSettings,
    /// Allowed max excess of |∇_h u| over g.
    pub feasibility: f64,
    /// Allowed negative part of the sampled VI residual.
    pub vi: f64,
    pub vi_samples: usize,
    pub seed: u64,
    pub oracle_tol: f64,
    pub oracle_max_iter: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            newton: NewtonSettings::default(),
            feasibility: 1e-4,
            vi: 1e-6,
            vi_samples: 16,
            seed: DEFAULT_SEED,
            oracle_tol: 1e-10,
            oracle_max_iter: 400_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Minimum over sampled feasible w of δ⟨L_p∇u, ∇(w−u)⟩ − ⟨f, w−u⟩.
    pub vi_residual: f64,
    pub max_violation: f64,
    pub violating_fraction: f64,
    /// ⟨λ − δ, (g − |∇u|)⁺⟩.
    pub complementarity_gap: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipticSolution {
    pub u: ScalarField,
    /// Multiplier per cell.
    pub lambda: Vec<f64>,
    pub diagnostics: Diagnostics,
    pub trace: Vec<LevelTrace>,
    pub iterations: usize,
    pub converged: bool,
    pub method: String,
    /// Final penalty parameter, if the penalty scheme produced the solution.
    pub eps: Option<f64>,
    pub flags: Vec<String>,
}

fn operator<'a>(pr: &'a EllipticProblem) -> Operator<'a> {
    Operator {
        grid: &pr.grid,
        p: pr.p,
        delta: pr.delta,
        mass: 0.0,
        reaction: None,
        drift: None,
        rhs: &pr.f.0,
        bound: &pr.g.values,
    }
}

/// λ = δ + k_ε(|∇_h u| − g) per cell.
pub fn recover_multiplier(u: &ScalarField, problem: &EllipticProblem, eps: f64) -> Vec<f64> {
    (0..problem.grid.cell_count())
        .map(|c| {
            problem.delta
                + kappa(norm2(cell_gradient(&problem.grid, &u.0, c)) - problem.g.values[c], eps)
        })
        .collect()
}

/// ⟨λ − δ, (g − |∇u|)⁺⟩ with cell weights.
pub fn complementarity_gap(grid: &Grid, u: &[f64], g: &[f64], lambda: &[f64], delta: f64) -> f64 {
    let wc = grid.cell_weight();
    (0..grid.cell_count())
        .map(|c| (lambda[c] - delta) * (g[c] - norm2(cell_gradient(grid, u, c))).max(0.0))
        .sum::<f64>()
        * wc
}

/// Random fields with zero boundary values scaled into K_g.
pub(crate) fn feasible_samples(grid: &Grid, g: &[f64], count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let mut w: Vec<f64> = (0..grid.node_count())
            .map(|n| if grid.is_boundary(n) { 0.0 } else { rng.gen_range(-1.0..1.0) })
            .collect();
        let sweeps = [0usize, 2, 8, 32][k % 4] * grid.nx().max(grid.ny()) / 8;
        smooth(grid, &mut w, sweeps);
        let mut theta = f64::INFINITY;
        for c in 0..grid.cell_count() {
            let r = norm2(cell_gradient(grid, &w, c));
            if r > 0.0 {
                theta = theta.min(g[c] / r);
            }
        }
        let s = rng.gen_range(0.1..1.0) * if theta.is_finite() { theta } else { 1.0 };
        w.iter_mut().for_each(|v| *v *= s);
        out.push(w);
    }
    out
}

/// Sampled VI residual: min over feasible w of δ⟨L_p∇u, ∇(w−u)⟩ − ⟨f, w−u⟩.
pub fn vi_residual(problem: &EllipticProblem, u: &ScalarField, samples: usize, seed: u64) -> f64 {
    let grid = &problem.grid;
    let flux: Vec<[f64; 2]> = (0..grid.cell_count())
        .map(|c| p_flux_cell(cell_gradient(grid, &u.0, c), problem.p))
        .collect();
    let mut gt = vec![0.0; grid.node_count()];
    gradient_transpose(grid, &flux, &mut gt);
    let eval = |w: &[f64]| -> f64 {
        let mut s = 0.0;
        for n in 0..grid.node_count() {
            if grid.is_boundary(n) {
                continue;
            }
            let d = w[n] - u.0[n];
            s += problem.delta * gt[n] * d - grid.node_weight(n) * problem.f.0[n] * d;
        }
        s
    };
    feasible_samples(grid, &problem.g.values, samples, seed)
        .iter()
        .map(|w| eval(w))
        .fold(f64::INFINITY, f64::min)
}

fn diagnostics(problem: &EllipticProblem, u: &ScalarField, lambda: &[f64], tol: &Tolerances) -> Diagnostics {
    let (mv, frac) = violation_raw(&problem.grid, &u.0, &problem.g.values);
    let vi = vi_residual(problem, u, tol.vi_samples, tol.seed);
    let gap = complementarity_gap(&problem.grid, &u.0, &problem.g.values, lambda, problem.delta);
    Diagnostics {
        vi_residual: vi,
        max_violation: mv,
        violating_fraction: frac,
        complementarity_gap: gap,
        feasible: mv <= tol.feasibility,
    }
}

fn base_flags(problem: &EllipticProblem) -> Vec<String> {
    let mut flags = Vec::new();
    if problem.g.floored {
        flags.push("g-floored".to_string());
    }
    flags
}

/// Penalized Newton with ε-continuation, optionally warm-started.
pub fn solve_vi_from(
    problem: &EllipticProblem,
    params: &PenaltyParams,
    tol: &Tolerances,
    initial: Option<&ScalarField>,
) -> Result<EllipticSolution> {
    problem.validate()?;
    if !(problem.delta > 0.0) {
        return Err(invalid("solve_vi needs delta > 0; use solve_degenerate for delta = 0"));
    }
    let grid = &problem.grid;
    let op = operator(problem);
    let u0 = match initial {
        Some(u) => {
            u.check(grid)?;
            u.0.clone()
        }
        None => vec![0.0; grid.node_count()],
    };
    let out = op.solve(&u0, &params.schedule, &tol.newton)?;
    let u = ScalarField(out.u);
    let lambda = recover_multiplier(&u, problem, out.eps);
    let diagnostics = diagnostics(problem, &u, &lambda, tol);
    let mut flags = base_flags(problem);
    if !out.converged {
        flags.push("newton-not-converged".into());
    }
    if !diagnostics.feasible {
        flags.push("infeasible".into());
    }
    Ok(EllipticSolution {
        iterations: out.levels.iter().map(|l| l.iterations).sum(),
        u,
        lambda,
        diagnostics,
        trace: out.levels,
        converged: out.converged,
        method: "penalized-newton".into(),
        eps: Some(out.eps),
        flags,
    })
}

pub fn solve_vi(problem: &EllipticProblem, params: &PenaltyParams, tol: &Tolerances) -> Result<EllipticSolution> {
    solve_vi_from(problem, params, tol, None)
}

/// Radial prox: r ∈ [0, min(g, |v|)] solving δ r^{p−1} + ρ(r − |v|) = 0, capped at g.
fn prox_radius(v: f64, g: f64, delta: f64, rho: f64, p: f64) -> f64 {
    if v == 0.0 {
        return 0.0;
    }
    let r = if p == 2.0 {
        rho * v / (delta + rho)
    } else {
        let h = |r: f64| delta * r.powf(p - 1.0) + rho * (r - v);
        let (mut lo, mut hi) = (0.0, v);
        let mut r = v * rho / (delta + rho);
        for _ in 0..200 {
            let hr = h(r);
            if hr > 0.0 {
                hi = r;
            } else {
                lo = r;
            }
            let dh = delta * (p - 1.0) * r.powf(p - 2.0) + rho;
            let mut nr = r - hr / dh;
            if !(nr > lo && nr < hi) || !nr.is_finite() {
                nr = 0.5 * (lo + hi);
            }
            if (nr - r).abs() <= 1e-16 * v.max(1e-300) || hi - lo <= 1e-16 * v {
                r = nr;
                break;
            }
            r = nr;
        }
        r
    };
    r.min(g)
}

/// Reference solver: ADMM splitting of min (δ/p)Σ|z|^p − ⟨f,u⟩ over ∇_h u = z, |z| ≤ g.
pub fn solve_vi_oracle(problem: &EllipticProblem, tol: &Tolerances) -> Result<EllipticSolution> {
    problem.validate()?;
    if !(problem.delta > 0.0) {
        return Err(invalid("solve_vi_oracle needs delta > 0"));
    }
    let grid = &problem.grid;
    let (p, delta) = (problem.p, problem.delta);
    let g = &problem.g.values;
    let nc = grid.cell_count();
    let nn = grid.node_count();
    let interior = grid.interior_nodes();
    let mut a = assemble_stiffness(grid, |_| 1.0);
    a.factor()?;
    let wf: Vec<f64> = (0..nn).map(|n| grid.node_weight(n) * problem.f.0[n]).collect();
    let typical = {
        let gm = g.iter().cloned().fold(0.0, f64::max).min(10.0).max(1e-3);
        gm.powf(p - 2.0)
    };
    let mut rho = delta * typical;
    let mut u = vec![0.0; nn];
    let mut z = vec![[0.0; 2]; nc];
    let mut y = vec![[0.0; 2]; nc];
    let mut zy = vec![[0.0; 2]; nc];
    let mut gt = vec![0.0; nn];
    let mut rhs = vec![0.0; interior.len()];
    let mut converged = false;
    let mut it = 0;
    let (mut rp, mut rd) = (f64::INFINITY, f64::INFINITY);
    while it < tol.oracle_max_iter {
        it += 1;
        for c in 0..nc {
            zy[c] = [z[c][0] - y[c][0], z[c][1] - y[c][1]];
        }
        gradient_transpose(grid, &zy, &mut gt);
        for (k, &n) in interior.iter().enumerate() {
            rhs[k] = wf[n] / rho + gt[n];
        }
        a.solve(&mut rhs);
        for (k, &n) in interior.iter().enumerate() {
            u[n] = rhs[k];
        }
        rp = 0.0;
        rd = 0.0;
        let mut zmax = 0.0f64;
        for c in 0..nc {
            let q = cell_gradient(grid, &u, c);
            let v = [q[0] + y[c][0], q[1] + y[c][1]];
            let vn = norm2(v);
            let r = prox_radius(vn, g[c], delta, rho, p);
            let zn = if vn > 0.0 { [v[0] * r / vn, v[1] * r / vn] } else { [0.0, 0.0] };
            rd = rd.max(rho * norm2([zn[0] - z[c][0], zn[1] - z[c][1]]));
            z[c] = zn;
            let e = [q[0] - zn[0], q[1] - zn[1]];
            rp = rp.max(norm2(e));
            y[c][0] += e[0];
            y[c][1] += e[1];
            zmax = zmax.max(r);
        }
        let scale = zmax.max(1.0);
        if rp <= tol.oracle_tol * scale && rd <= tol.oracle_tol * scale * rho.max(1.0) {
            converged = true;
            break;
        }
        if it % 25 == 0 {
            // residual balancing; y is the scaled dual and must be rescaled with ρ
            let ratio = rp / rd.max(1e-300) * rho;
            let factor = if ratio > 10.0 {
                2.0
            } else if ratio < 0.1 {
                0.5
            } else {
                1.0
            };
            if factor != 1.0 && (rho * factor) > 1e-8 * delta && (rho * factor) < 1e8 * delta.max(1.0) {
                rho *= factor;
                for yc in y.iter_mut() {
                    yc[0] /= factor;
                    yc[1] /= factor;
                }
            }
        }
    }
    log::debug!("oracle: {it} iterations, primal {rp:e}, dual {rd:e}");
    let u = ScalarField(u);
    let lambda = vec![delta; nc];
    let diagnostics = diagnostics(problem, &u, &lambda, tol);
    let mut flags = base_flags(problem);
    if !converged {
        flags.push("iteration-cap".into());
    }
    Ok(EllipticSolution {
        u,
        lambda,
        diagnostics,
        trace: vec![],
        iterations: it,
        converged,
        method: "admm-oracle".into(),
        eps: None,
        flags,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegenerateTrace {
    pub delta: f64,
    pub change: f64,
    pub newton_iterations: usize,
}

/// δ = 0 problem as the limit of the δ-regularized problems along `deltas`.
pub fn solve_degenerate(
    problem: &EllipticProblem,
    deltas: &[f64],
    params: &PenaltyParams,
    tol: &Tolerances,
    change_tol: f64,
) -> Result<(EllipticSolution, Vec<DegenerateTrace>)> {
    problem.validate()?;
    if deltas.is_empty() || deltas.iter().any(|d| !(*d > 0.0)) || deltas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(invalid("delta schedule must be positive and strictly decreasing"));
    }
    let mut prev: Option<ScalarField> = None;
    let mut trace = Vec::new();
    let mut last: Option<EllipticSolution> = None;
    let mut settled = false;
    for &d in deltas {
        let mut pr = problem.clone();
        pr.delta = d;
        let sol = solve_vi_from(&pr, params, tol, prev.as_ref())?;
        let change = prev.as_ref().map(|p| p.max_abs_diff(&sol.u)).unwrap_or(f64::INFINITY);
        trace.push(DegenerateTrace { delta: d, change, newton_iterations: sol.iterations });
        prev = Some(sol.u.clone());
        last = Some(sol);
        if change <= change_tol {
            settled = true;
            break;
        }
    }
    let mut sol = last.expect("nonempty schedule");
    let d_end = trace.last().unwrap().delta;
    sol.lambda.iter_mut().for_each(|l| *l -= d_end);
    let mut pr0 = problem.clone();
    pr0.delta = 0.0;
    sol.diagnostics = diagnostics(&pr0, &sol.u, &sol.lambda, tol);
    sol.method = "vanishing-viscosity".into();
    sol.flags.push("selected-solution-may-be-nonunique".into());
    if !settled {
        sol.flags.push("continuation-not-settled".into());
        sol.converged = false;
    }
    Ok((sol, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSolution {
    pub u: ScalarField,
    pub lower_active: Vec<bool>,
    pub upper_active: Vec<bool>,
    pub iterations: usize,
    pub converged: bool,
    pub projected_gradient: f64,
}

/// Projected Newton (Bertsekas) for min (δ/p)Σ|∇u|^p − ⟨f,u⟩ over lower ≤ u ≤ upper.
pub fn solve_double_obstacle(
    p: f64,
    delta: f64,
    f: &ScalarField,
    upper: &ScalarField,
    lower: &ScalarField,
    grid: &Grid,
    tol: f64,
    max_iter: usize,
) -> Result<ObstacleSolution> {
    check_p(p)?;
    if !(delta > 0.0) {
        return Err(invalid("double obstacle solver needs delta > 0"));
    }
    f.check(grid)?;
    upper.check(grid)?;
    lower.check(grid)?;
    if let Some(n) = (0..grid.node_count()).find(|&n| lower.0[n] > upper.0[n]) {
        return Err(invalid(format!("incompatible obstacles at node {n}: lower > upper")));
    }
    if (0..grid.node_count()).any(|n| lower.0[n] > 0.0 || upper.0[n] < 0.0) {
        return Err(invalid("obstacles must straddle zero"));
    }
    let nn = grid.node_count();
    let inf = vec![f64::INFINITY; grid.cell_count()];
    let op = Operator { grid, p, delta, mass: 0.0, reaction: None, drift: None, rhs: &f.0, bound: &inf };
    let (lo, up) = (&lower.0, &upper.0);
    let proj = |n: usize, v: f64| v.max(lo[n]).min(up[n]);
    let mut u: Vec<f64> = (0..nn).map(|n| if grid.is_boundary(n) { 0.0 } else { proj(n, 0.0) }).collect();
    let interior = grid.interior_nodes();
    let w: Vec<f64> = (0..nn).map(|n| grid.node_weight(n)).collect();
    let fscale = f.0.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut grad = vec![0.0; nn];
    let mut trial = vec![0.0; nn];
    let mut it = 0;
    let mut converged = false;
    let mut pg = f64::INFINITY;
    let mut jval = energy(grid, p, delta, &f.0, &u);
    while it < max_iter {
        op.residual(&u, 1.0, &mut grad);
        pg = interior
            .iter()
            .map(|&n| (u[n] - proj(n, u[n] - grad[n] / w[n])).abs())
            .fold(0.0, f64::max);
        if pg <= tol * fscale {
            converged = true;
            break;
        }
        it += 1;
        let thr = pg.min(1e-3);
        let active: Vec<bool> = (0..nn)
            .map(|n| {
                let sg = grad[n];
                (u[n] <= lo[n] + thr && sg > 0.0) || (u[n] >= up[n] - thr && sg < 0.0)
            })
            .collect();
        let Jacobian::Sym(mut h) = op.jacobian(&u, 1.0) else { unreachable!() };
        let mut d = vec![0.0; interior.len()];
        for (k, &n) in interior.iter().enumerate() {
            if active[n] {
                h.clear_row_col(k, 1.0);
                d[k] = 0.0;
            } else {
                d[k] = -grad[n];
            }
        }
        h.factor()?;
        h.solve(&mut d);
        let mut dir = vec![0.0; nn];
        for (k, &n) in interior.iter().enumerate() {
            dir[n] = if active[n] { -grad[n] / w[n] } else { d[k] };
        }
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let mut pred = 0.0;
            for n in 0..nn {
                trial[n] = if grid.is_boundary(n) { 0.0 } else { proj(n, u[n] + alpha * dir[n]) };
                let du = u[n] - trial[n];
                pred += if active[n] { grad[n] * du } else { -alpha * grad[n] * dir[n] };
            }
            let jt = energy(grid, p, delta, &f.0, &trial);
            // near the solution the energy decrease drops below rounding; take full steps there
            let flat = alpha == 1.0 && (jt - jval).abs() <= 1e-13 * (jval.abs() + 1.0);
            if jt <= jval - 1e-4 * pred.max(0.0) || flat {
                accepted = true;
                jval = jt;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
        u.copy_from_slice(&trial);
    }
    let lower_active = (0..nn).map(|n| !grid.is_boundary(n) && u[n] <= lo[n] + 1e-12).collect();
    let upper_active = (0..nn).map(|n| !grid.is_boundary(n) && u[n] >= up[n] - 1e-12).collect();
    Ok(ObstacleSolution { u: ScalarField(u), lower_active, upper_active, iterations: it, converged, projected_gradient: pg })
}

/// Godunov-type upwind gradient magnitude at an interior node with its active stencil.
fn upwind_norm(grid: &Grid, u: &[f64], n: usize) -> (f64, [Option<(usize, f64)>; 2]) {
    let [hx, hy] = grid.spacing();
    let nx = grid.nx();
    let axis = |lo_n: usize, hi_n: usize, h: f64| -> (f64, Option<(usize, f64)>) {
        let a = (u[n] - u[lo_n]) / h;
        let b = (u[n] - u[hi_n]) / h;
        if a >= b && a > 0.0 {
            (a, Some((lo_n, h)))
        } else if b > 0.0 {
            (b, Some((hi_n, h)))
        } else {
            (0.0, None)
        }
    };
    let (ax, sx) = axis(n - 1, n + 1, hx);
    if grid.dim() == 1 {
        return (ax, [sx, None]);
    }
    let (ay, sy) = axis(n - nx, n + nx, hy);
    ((ax * ax + ay * ay).sqrt(), [sx, sy])
}

/// −δΔ_h u − f at interior nodes (zero on the boundary).
fn pde_part(grid: &Grid, delta: f64, u: &[f64], f: &[f64]) -> Vec<f64> {
    let q: Vec<[f64; 2]> = (0..grid.cell_count()).map(|c| cell_gradient(grid, u, c)).collect();
    let mut gt = vec![0.0; grid.node_count()];
    gradient_transpose(grid, &q, &mut gt);
    (0..grid.node_count())
        .map(|n| if grid.is_boundary(n) { 0.0 } else { delta * gt[n] / grid.node_weight(n) - f[n] })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplementarityResidual {
    pub field: ScalarField,
    pub sup: f64,
    pub inf: f64,
}

/// Nonpositive forcing is handled through u ↦ −u, i.e. min{−δΔu − f, g − |∇u|} = 0.
fn mirrored(f: &ScalarField) -> bool {
    f.0.iter().all(|v| *v <= 0.0) && f.0.iter().any(|v| *v < 0.0)
}

/// max{−δΔ_h u − f, avg(|∇_h u| − g)} nodewise (mirrored for f ≤ 0); p = 2 only.
pub fn complementarity_residual(u: &ScalarField, problem: &EllipticProblem) -> Result<ComplementarityResidual> {
    if problem.p != 2.0 {
        return Err(invalid("the complementarity formulation is stated for p = 2 only"));
    }
    let grid = &problem.grid;
    u.check(grid)?;
    let (u, f) = if mirrored(&problem.f) { (u.scaled(-1.0), problem.f.scaled(-1.0)) } else { (u.clone(), problem.f.clone()) };
    let a = pde_part(grid, problem.delta, &u.0, &f.0);
    let excess: Vec<f64> = (0..grid.cell_count())
        .map(|c| norm2(cell_gradient(grid, &u.0, c)) - problem.g.values[c])
        .collect();
    let mut field = vec![0.0; grid.node_count()];
    let (mut sup, mut inf) = (f64::NEG_INFINITY, f64::INFINITY);
    for n in grid.interior_nodes() {
        let cells = grid.node_cells(n);
        let b = cells.iter().map(|&c| excess[c]).sum::<f64>() / cells.len() as f64;
        let v = a[n].max(b);
        field[n] = v;
        sup = sup.max(v);
        inf = inf.min(v);
    }
    Ok(ComplementarityResidual { field: ScalarField(field), sup, inf })
}

/// Solves max{−δΔ_h u − f, N_h(u) − g} = 0 with an upwind gradient norm by
/// policy iteration; p = 2.
pub fn solve_complementarity(problem: &EllipticProblem, max_iter: usize) -> Result<(ScalarField, usize, bool)> {
    solve_complementarity_from(problem, None, max_iter)
}

/// As [`solve_complementarity`] from a given initial guess.
pub fn solve_complementarity_from(
    problem: &EllipticProblem,
    initial: Option<&ScalarField>,
    max_iter: usize,
) -> Result<(ScalarField, usize, bool)> {
    problem.validate()?;
    if mirrored(&problem.f) {
        let flipped = EllipticProblem { f: problem.f.scaled(-1.0), ..problem.clone() };
        let init = initial.map(|v| v.scaled(-1.0));
        let (u, it, ok) = solve_complementarity_from(&flipped, init.as_ref(), max_iter)?;
        return Ok((u.scaled(-1.0), it, ok));
    }
    if problem.p != 2.0 || !(problem.delta > 0.0) {
        return Err(invalid("complementarity solver needs p = 2 and delta > 0"));
    }
    let grid = &problem.grid;
    let nn = grid.node_count();
    let interior = grid.interior_nodes();
    let gn = problem.g.to_nodes(grid);
    let f = &problem.f.0;
    let stiff_rows = {
        // rows of δ W⁻¹ GᵀG on interior nodes, dense per row within the band
        let a = assemble_stiffness(grid, |_| problem.delta);
        a
    };
    let bw = grid.interior_bandwidth();
    let mut u = match initial {
        Some(v) => {
            v.check(grid)?;
            let mut u = v.0.clone();
            for n in 0..nn {
                if grid.is_boundary(n) {
                    u[n] = 0.0;
                }
            }
            u
        }
        None => vec![0.0; nn],
    };
    let mut policy: Vec<bool> = vec![false; nn];
    let mut it = 0;
    let mut converged = false;
    let mut res = vec![0.0; nn];
    let eval = |u: &[f64], res: &mut [f64], policy: &mut [bool]| -> f64 {
        let a = pde_part(grid, problem.delta, u, f);
        let mut m = 0.0f64;
        for &n in &interior {
            let (nv, _) = upwind_norm(grid, u, n);
            let b = nv - gn[n];
            let use_b = nv > 0.0 && b > a[n];
            policy[n] = use_b;
            res[n] = if use_b { b } else { a[n] };
            m = m.max(res[n].abs());
        }
        m
    };
    let mut rnorm = eval(&u, &mut res, &mut policy);
    while it < max_iter {
        if rnorm <= 1e-10 * f.iter().fold(1.0f64, |m, v| m.max(v.abs())) {
            converged = true;
            break;
        }
        it += 1;
        let mut jac = BandMatrix::zeros(interior.len(), bw);
        for (k, &n) in interior.iter().enumerate() {
            if policy[n] {
                let (nv, st) = upwind_norm(grid, &u, n);
                for s in st.iter().flatten() {
                    let (m, h) = *s;
                    let comp = (u[n] - u[m]) / h;
                    let c = comp / (nv * h);
                    jac.add(k, k, c);
                    if let Some(j) = grid.interior_index(m) {
                        jac.add(k, j, -c);
                    }
                }
            } else {
                let w = grid.node_weight(n);
                let lo = k.saturating_sub(bw);
                let hi = (k + bw).min(interior.len() - 1);
                for j in lo..=hi {
                    let v = stiff_rows.get(k, j);
                    if v != 0.0 {
                        jac.add(k, j, v / w);
                    }
                }
            }
        }
        let mut d: Vec<f64> = interior.iter().map(|&n| -res[n]).collect();
        jac.factor()?;
        jac.solve(&mut d);
        let mut trial = u.clone();
        let mut alpha = 1.0;
        let mut best = rnorm;
        let mut pol2 = policy.clone();
        let mut res2 = res.clone();
        for _ in 0..30 {
            for (k, &n) in interior.iter().enumerate() {
                trial[n] = u[n] + alpha * d[k];
            }
            best = eval(&trial, &mut res2, &mut pol2);
            if best < rnorm || alpha < 1e-6 {
                break;
            }
            alpha *= 0.5;
        }
        if !(best < rnorm) && alpha < 1e-6 {
            break;
        }
        u = trial;
        res = res2;
        policy = pol2;
        rnorm = best;
    }
    Ok((ScalarField(u), it, converged))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub gap_vi_obstacle: f64,
    pub gap_vi_complementarity: f64,
    pub gap_obstacle_complementarity: f64,
    /// |u_vi − u_obstacle| at the node nearest the domain centre.
    pub center_gap_vi_obstacle: f64,
    pub complementarity_sup_of_vi: f64,
    pub complementarity_inf_of_vi: f64,
    pub g_constant: bool,
    pub laplacian_g2_nonpositive: bool,
    pub solvers_converged: bool,
    pub h: f64,
}

pub struct EquivalenceSolutions {
    pub vi: EllipticSolution,
    pub obstacle: ObstacleSolution,
    pub complementarity: ScalarField,
    pub upper: ScalarField,
    pub lower: ScalarField,
}

pub fn center_node(grid: &Grid) -> usize {
    let i = grid.nx() / 2;
    let j = if grid.dim() == 1 { 0 } else { grid.ny() / 2 };
    i + grid.nx() * j
}

/// Solves the three formulations and compares them; p = 2.
pub fn equivalence_solve(problem: &EllipticProblem, params: &PenaltyParams, tol: &Tolerances) -> Result<(EquivalenceReport, EquivalenceSolutions)> {
    problem.validate()?;
    if problem.p != 2.0 || !(problem.delta > 0.0) {
        return Err(invalid("equivalence report needs p = 2 and delta > 0"));
    }
    let grid = &problem.grid;
    let vi = solve_vi(problem, params, tol)?;
    let (upper, lower) = obstacles(&problem.g, grid)?;
    let ob = solve_double_obstacle(2.0, problem.delta, &problem.f, &upper, &lower, grid, 1e-10, 500)?;
    let (cu, _, cconv) = solve_complementarity_from(problem, Some(&ob.u), 500)?;
    let cres = complementarity_residual(&vi.u, problem)?;
    let g = &problem.g.values;
    let gmin = g.iter().cloned().fold(f64::INFINITY, f64::min);
    let gmax = g.iter().cloned().fold(0.0, f64::max);
    let g_constant = gmax - gmin <= 1e-12 * gmax.max(1.0);
    // Δ_h(g²) at interior nodes using node-averaged g
    let gn = problem.g.to_nodes(grid);
    let g2: Vec<f64> = gn.iter().map(|v| v * v).collect();
    let lap = pde_part(grid, 1.0, &g2, &vec![0.0; grid.node_count()]);
    // pde_part returns −Δ_h; Δ_h(g²) ≤ 0 means −Δ_h(g²) ≥ 0
    let laplacian_g2_nonpositive = grid
        .interior_nodes()
        .iter()
        .all(|&n| lap[n] >= -1e-9 * gmax.max(1.0).powi(2) / grid.h().powi(2));
    let c = center_node(grid);
    let report = EquivalenceReport {
        gap_vi_obstacle: vi.u.max_abs_diff(&ob.u),
        gap_vi_complementarity: vi.u.max_abs_diff(&cu),
        gap_obstacle_complementarity: ob.u.max_abs_diff(&cu),
        center_gap_vi_obstacle: (vi.u.0[c] - ob.u.0[c]).abs(),
        complementarity_sup_of_vi: cres.sup,
        complementarity_inf_of_vi: cres.inf,
        g_constant,
        laplacian_g2_nonpositive,
        solvers_converged: vi.converged && ob.converged && cconv,
        h: grid.h(),
    };
    Ok((report, EquivalenceSolutions { vi, obstacle: ob, complementarity: cu, upper, lower }))
}

pub fn equivalence_report(problem: &EllipticProblem, params: &PenaltyParams, tol: &Tolerances) -> Result<EquivalenceReport> {
    equivalence_solve(problem, params, tol).map(|r| r.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DependenceMode {
    PerturbF,
    PerturbG,
    Mosco,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependenceReport {
    pub mode: DependenceMode,
    pub magnitudes: Vec<f64>,
    pub errors: Vec<f64>,
    pub fitted_slope: f64,
    pub strictly_decreasing: bool,
    pub theory_exponent: f64,
}

/// Least-squares slope of log(err) against log(mag) over entries with both positive.
pub fn loglog_slope(mags: &[f64], errs: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = mags
        .iter()
        .zip(errs)
        .filter(|(m, e)| **m > 0.0 && **e > 0.0)
        .map(|(m, e)| (m.ln(), e.ln()))
        .collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Perturbation study in the X_p norm ‖∇_h(u_m − u)‖_p.
pub fn dependence_study(
    problem: &EllipticProblem,
    mode: DependenceMode,
    magnitudes: &[f64],
    params: &PenaltyParams,
    tol: &Tolerances,
) -> Result<DependenceReport> {
    if magnitudes.len() < 3 {
        return Err(invalid("dependence study needs at least 3 magnitudes"));
    }
    if magnitudes.windows(2).any(|w| w[1] >= w[0]) || magnitudes.iter().any(|m| *m < 0.0) {
        return Err(invalid("magnitudes must be nonnegative and strictly decreasing"));
    }
    let grid = &problem.grid;
    let base = solve_vi(problem, params, tol)?;
    let mid = {
        let l = grid.lower();
        let u = grid.upper();
        [(l[0] + u[0]) / 2.0, (l[1] + u[1]) / 2.0]
    };
    let bump = |x: [f64; 2]| {
        let r2 = (x[0] - mid[0]).powi(2) + if grid.dim() == 2 { (x[1] - mid[1]).powi(2) } else { 0.0 };
        (-r2 / 0.1).exp()
    };
    let solve_one = |m: f64| -> Result<f64> {
        if m == 0.0 {
            let again = solve_vi_from(problem, params, tol, None)?;
            return Ok(xp_distance(grid, problem.p, &again.u.0, &base.u.0));
        }
        let mut pr = problem.clone();
        match mode {
            DependenceMode::PerturbF => {
                pr.f.0.iter_mut().for_each(|v| *v += m);
            }
            DependenceMode::PerturbG => {
                pr.g.values.iter_mut().for_each(|v| *v += m);
                pr.g.nu += m;
            }
            DependenceMode::Mosco => {
                let b = grid.sample_cells(bump);
                pr.g.values.iter_mut().zip(&b).for_each(|(v, bb)| *v += m * bb);
            }
        }
        let s = solve_vi_from(&pr, params, tol, Some(&base.u))?;
        if !s.converged {
            return Err(Error::Solver(format!("perturbed solve (magnitude {m}) did not converge")));
        }
        Ok(xp_distance(grid, problem.p, &s.u.0, &base.u.0))
    };
    let errors: Vec<f64> = magnitudes.iter().map(|&m| solve_one(m)).collect::<Result<_>>()?;
    let fitted_slope = loglog_slope(magnitudes, &errors);
    let pos: Vec<f64> = magnitudes.iter().zip(&errors).filter(|(m, _)| **m > 0.0).map(|(_, e)| *e).collect();
    let strictly_decreasing = pos.windows(2).all(|w| w[1] < w[0]);
    Ok(DependenceReport {
        mode,
        magnitudes: magnitudes.to_vec(),
        errors,
        fitted_slope,
        strictly_decreasing,
        theory_exponent: 1.0 / problem.p.max(2.0),
    })
}

pub(crate) fn xp_distance(grid: &Grid, p: f64, a: &[f64], b: &[f64]) -> f64 {
    let q: Vec<[f64; 2]> = (0..grid.cell_count())
        .map(|c| {
            let x = cell_gradient(grid, a, c);
            let y = cell_gradient(grid, b, c);
            [x[0] - y[0], x[1] - y[1]]
        })
        .collect();
    cell_norm(grid, &q, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn counterexample(n: usize) -> EllipticProblem {
        let grid = Grid::interval(-1.0, 1.0, n).unwrap();
        let f = ScalarField::constant(&grid, 2.0);
        let g = BoundField::from_fn(&grid, |x| 3.0 * x[0] * x[0]).unwrap();
        EllipticProblem::new(grid, 2.0, 1.0, f, g).unwrap()
    }

    pub(crate) fn counterexample_u(x: f64) -> f64 {
        if x.abs() >= 2.0 / 3.0 {
            1.0 - x * x
        } else {
            1.0 - x.abs().powi(3) - 4.0 / 27.0
        }
    }

    fn torsion(n: usize, beta: f64) -> EllipticProblem {
        let grid = Grid::interval(-1.0, 1.0, n).unwrap();
        let f = ScalarField::constant(&grid, beta);
        let g = BoundField::constant(&grid, 1.0).unwrap();
        EllipticProblem::new(grid, 2.0, 1.0, f, g).unwrap()
    }

    #[test]
    fn zero_forcing_gives_zero() {
        let mut pr = torsion(21, 0.0);
        pr.f = ScalarField::zeros(&pr.grid);
        let s = solve_vi(&pr, &PenaltyParams::default(), &Tolerances::default()).unwrap();
        assert!(s.u.0.iter().all(|v| *v == 0.0));
        assert!(s.lambda.iter().all(|l| *l == 1.0));
        let o = solve_vi_oracle(&pr, &Tolerances::default()).unwrap();
        assert!(o.u.0.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn counterexample_matches_closed_form() {
        let pr = counterexample(201);
        let s = solve_vi(&pr, &PenaltyParams::default(), &Tolerances::default()).unwrap();
        assert!(s.converged, "{:?}", s.trace);
        let h = pr.grid.h();
        let err = (0..pr.grid.node_count())
            .map(|n| (s.u.0[n] - counterexample_u(pr.grid.node_coords(n)[0])).abs())
            .fold(0.0, f64::max);
        assert!(err <= 5.0 * h, "err {err}");
        assert!(s.diagnostics.feasible);
        assert!(s.diagnostics.vi_residual >= -1e-6, "{}", s.diagnostics.vi_residual);
        assert!(s.flags.is_empty(), "{:?}", s.flags);
    }

    #[test]
    fn small_instance_matches_oracle() {
        let grid = Grid::interval(0.0, 1.0, 7).unwrap();
        let f = ScalarField::constant(&grid, 1.0);
        let g = BoundField::constant(&grid, 0.5).unwrap();
        let pr = EllipticProblem::new(grid, 2.0, 1.0, f, g).unwrap();
        let tol = Tolerances::default();
        let a = solve_vi(&pr, &PenaltyParams::default(), &tol).unwrap();
        let b = solve_vi_oracle(&pr, &tol).unwrap();
        assert!(b.converged);
        assert!(a.u.max_abs_diff(&b.u) < 1e-6, "{}", a.u.max_abs_diff(&b.u));
    }

    #[test]
    fn oracle_counterexample_within_2h() {
        let pr = counterexample(81);
        let tol = Tolerances::default();
        let a = solve_vi(&pr, &PenaltyParams::default(), &tol).unwrap();
        let b = solve_vi_oracle(&pr, &tol).unwrap();
        assert!(a.u.max_abs_diff(&b.u) <= 2.0 * pr.grid.h());
    }

    #[test]
    fn oracle_p3_beats_random_feasible_fields() {
        let grid = Grid::rectangle([0.0, 0.0], [1.0, 1.0], [7, 6]).unwrap();
        let f = grid.sample_nodes(|x| 1.0 + x[0] - x[1]);
        let g = BoundField::from_fn(&grid, |x| 0.4 + x[1]).unwrap();
        let pr = EllipticProblem::new(grid, 3.0, 1.0, f, g).unwrap();
        let o = solve_vi_oracle(&pr, &Tolerances::default()).unwrap();
        let j = pr.objective(&o.u.0);
        for w in feasible_samples(&pr.grid, &pr.g.values, 100, 17) {
            assert!(j <= pr.objective(&w) + 1e-9);
        }
    }

    #[test]
    fn degenerate_limit_is_upper_obstacle() {
        let grid = Grid::interval(-1.0, 1.0, 101).unwrap();
        let f = ScalarField::constant(&grid, 2.0);
        let g = BoundField::constant(&grid, 1.0).unwrap();
        let pr = EllipticProblem::new(grid, 2.0, 0.0, f, g).unwrap();
        let deltas: Vec<f64> = (1..=6).map(|k| 10f64.powi(-k)).collect();
        let (s, trace) = solve_degenerate(&pr, &deltas, &PenaltyParams::default(), &Tolerances::default(), 1e-5).unwrap();
        let (up, _) = obstacles(&pr.g, &pr.grid).unwrap();
        assert!(s.u.max_abs_diff(&up) < 1e-3, "{} {:?}", s.u.max_abs_diff(&up), trace);
        assert!(s.diagnostics.max_violation <= 1e-4);
        assert!(s.flags.iter().any(|f| f.contains("nonunique")));
        let mut z = pr.clone();
        z.f = ScalarField::zeros(&z.grid);
        let (s0, _) = solve_degenerate(&z, &deltas, &PenaltyParams::default(), &Tolerances::default(), 1e-8).unwrap();
        assert!(s0.u.0.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn double_obstacle_counterexample() {
        let pr = counterexample(201);
        let (up, lo) = obstacles(&pr.g, &pr.grid).unwrap();
        let ob = solve_double_obstacle(2.0, 1.0, &pr.f, &up, &lo, &pr.grid, 1e-10, 200).unwrap();
        assert!(ob.converged, "{} {}", ob.iterations, ob.projected_gradient);
        let err = (0..pr.grid.node_count())
            .map(|n| {
                let x = pr.grid.node_coords(n)[0];
                (ob.u.0[n] - (1.0 - x * x)).abs()
            })
            .fold(0.0, f64::max);
        assert!(err < 0.01, "{err}");
        // sup of |z'| − g: 2|x| − 3x² peaks at 1/3 for |x| = 1/3
        let gz = crate::grid::gradient(&ob.u, &pr.grid).unwrap();
        let sup = gz.0.iter().zip(&pr.g.values).map(|(q, g)| q[0].abs() - g).fold(f64::NEG_INFINITY, f64::max);
        assert!((sup - 1.0 / 3.0).abs() < 0.02, "{sup}");
        // f = 0 → 0
        let zero = ScalarField::zeros(&pr.grid);
        let z = solve_double_obstacle(2.0, 1.0, &zero, &up, &lo, &pr.grid, 1e-10, 50).unwrap();
        assert!(z.u.0.iter().all(|v| *v == 0.0));
        // incompatible obstacles
        assert!(solve_double_obstacle(2.0, 1.0, &zero, &lo, &up, &pr.grid, 1e-10, 5).is_err());
    }

    #[test]
    fn double_obstacle_inactive_is_unconstrained() {
        let grid = Grid::interval(-1.0, 1.0, 41).unwrap();
        let f = ScalarField::constant(&grid, 2.0);
        let big = ScalarField::constant(&grid, 1e6);
        let ob = solve_double_obstacle(2.0, 1.0, &f, &big, &big.scaled(-1.0), &grid, 1e-10, 50).unwrap();
        for n in 0..grid.node_count() {
            let x = grid.node_coords(n)[0];
            assert!((ob.u.0[n] - (1.0 - x * x)).abs() < 1e-9);
        }
        // p = 3 against penalized solve with huge bound
        let g = BoundField::constant(&grid, 1e6).unwrap();
        let pr = EllipticProblem::new(grid.clone(), 3.0, 1.0, f.clone(), g).unwrap();
        let s = solve_vi(&pr, &PenaltyParams::fixed(0.1).unwrap(), &Tolerances::default()).unwrap();
        let ob3 = solve_double_obstacle(3.0, 1.0, &f, &big, &big.scaled(-1.0), &grid, 1e-10, 100).unwrap();
        assert!(s.u.max_abs_diff(&ob3.u) < 1e-8);
    }

    #[test]
    fn complementarity_residual_examples() {
        let pr = counterexample(401);
        let u = pr.grid.sample_nodes(|x| counterexample_u(x[0]));
        let r = complementarity_residual(&u, &pr).unwrap();
        assert!(r.sup >= 1.0 && r.sup <= 2.1, "{}", r.sup);
        let mut p3 = pr.clone();
        p3.p = 3.0;
        assert!(complementarity_residual(&u, &p3).is_err());
        // unconstrained smooth solution with slack: residual ≈ 0
        let t = torsion(101, 0.5);
        let u = t.grid.sample_nodes(|x| 0.25 * (1.0 - x[0] * x[0]));
        let r = complementarity_residual(&u, &t).unwrap();
        assert!(r.sup.abs() < 1e-9 && r.inf.abs() < 1e-9);
    }

    #[test]
    fn torsion_equivalence_and_counterexample_gap() {
        let t = torsion(201, 2.0);
        let (rep, sol) = equivalence_solve(&t, &PenaltyParams::default(), &Tolerances::default()).unwrap();
        let h = t.grid.h();
        assert!(rep.gap_vi_obstacle <= 5.0 * h, "{rep:?}");
        assert!(rep.gap_vi_complementarity <= 5.0 * h, "{rep:?}");
        assert!(rep.g_constant && rep.solvers_converged);
        assert!((sol.vi.u.0[center_node(&t.grid)] - 0.75).abs() <= 5.0 * h);

        let c = counterexample(201);
        let rep = equivalence_report(&c, &PenaltyParams::default(), &Tolerances::default()).unwrap();
        assert!((rep.center_gap_vi_obstacle - 4.0 / 27.0).abs() <= 5.0 * c.grid.h(), "{rep:?}");
        assert!(rep.complementarity_sup_of_vi >= 1.0);
        assert!(!rep.g_constant);
        // zero forcing with constant g: everything zero
        let mut z = torsion(51, 0.0);
        z.f = ScalarField::zeros(&z.grid);
        let rep = equivalence_report(&z, &PenaltyParams::default(), &Tolerances::default()).unwrap();
        assert!(rep.gap_vi_obstacle < 1e-14 && rep.gap_vi_complementarity < 1e-14);
    }

    #[test]
    fn multiplier_support_matches_plastic_set() {
        let t = torsion(201, 2.0);
        let s = solve_vi(&t, &PenaltyParams::default(), &Tolerances::default()).unwrap();
        assert!(s.lambda.iter().all(|l| *l >= 1.0 - 1e-12));
        assert!(s.diagnostics.complementarity_gap <= 1e-4);
        let gq = crate::grid::gradient(&s.u, &t.grid).unwrap();
        for (c, l) in s.lambda.iter().enumerate() {
            if *l > 1.0 + 1e-9 {
                assert!(gq.0[c][0].abs() >= 1.0 - 1e-4);
            }
            if gq.0[c][0].abs() < 1.0 - 1e-3 {
                assert_eq!(*l, 1.0);
            }
        }
    }

    #[test]
    fn symmetric_data_gives_symmetric_solution() {
        let pr = counterexample(101);
        let s = solve_vi(&pr, &PenaltyParams::default(), &Tolerances::default()).unwrap();
        let n = pr.grid.node_count();
        for i in 0..n {
            assert!((s.u.0[i] - s.u.0[n - 1 - i]).abs() < 1e-12);
        }
        // 2D: transposition symmetry of forward differences
        let grid = Grid::unit_square(15).unwrap();
        let f = grid.sample_nodes(|x| 1.0 + x[0] * x[1]);
        let g = BoundField::from_fn(&grid, |x| 0.3 + x[0] + x[1]).unwrap();
        let pr = EllipticProblem::new(grid.clone(), 2.0, 1.0, f, g).unwrap();
        let s = solve_vi(&pr, &PenaltyParams::default(), &Tolerances::default()).unwrap();
        let nx = grid.nx();
        for j in 0..nx {
            for i in 0..nx {
                assert!((s.u.0[i + nx * j] - s.u.0[j + nx * i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn enlarging_g_never_increases_objective() {
        let grid = Grid::interval(-1.0, 1.0, 61).unwrap();
        let f = grid.sample_nodes(|x| 2.0 + x[0]);
        let mut prev = f64::INFINITY;
        for k in [0.3, 0.5, 0.8, 1.2] {
            let g = BoundField::constant(&grid, k).unwrap();
            let pr = EllipticProblem::new(grid.clone(), 2.0, 1.0, f.clone(), g).unwrap();
            let s = solve_vi(&pr, &PenaltyParams::default(), &Tolerances::default()).unwrap();
            let j = pr.objective(&s.u.0);
            assert!(j <= prev + 1e-6);
            prev = j;
        }
    }

    #[test]
    fn dependence_study_basics() {
        let t = torsion(101, 2.0);
        assert!(dependence_study(&t, DependenceMode::PerturbG, &[0.1, 0.01], &PenaltyParams::default(), &Tolerances::default()).is_err());
        let rep = dependence_study(&t, DependenceMode::PerturbG, &[0.1, 0.01, 0.001, 0.0], &PenaltyParams::default(), &Tolerances::default()).unwrap();
        assert!(rep.errors[3] < 1e-12, "{rep:?}");
        assert!(rep.strictly_decreasing);
        assert!(rep.fitted_slope >= 0.4, "{rep:?}");
    }

    #[test]
    fn loglog_slope_of_power_law() {
        let m = [1.0, 0.1, 0.01];
        let e: Vec<f64> = m.iter().map(|x: &f64| 3.0 * x.powf(0.7)).collect();
        assert_relative_eq!(loglog_slope(&m, &e), 0.7, epsilon = 1e-12);
    }
}
