//! Stationary quasi-variational problems: Picard iteration on the constraint map
//! and Banach iteration backed by an explicit contraction certificate.

use serde::{Deserialize, Serialize};

use crate::constraints::{evaluate_constraint, violation_raw, ConstraintOperator, GammaFunctional, PenaltyParams};
use crate::elliptic::{solve_vi_from, xp_distance, EllipticProblem, EllipticSolution, Tolerances};
use crate::error::{invalid, Error, Result};
use crate::grid::{check_p, grad_norm, monotonicity_constant_seeded, node_norm, poincare_constant_tagged, Grid, ScalarField};

#[derive(Debug, Clone)]
pub struct QviProblem {
    pub grid: Grid,
    pub p: f64,
    pub delta: f64,
    pub f: ScalarField,
    pub op: ConstraintOperator,
}

impl QviProblem {
    pub fn validate(&self) -> Result<()> {
        check_p(self.p)?;
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(invalid("quasi-variational solvers need delta > 0"));
        }
        if let ConstraintOperator::SandpileG0 { .. } = self.op {
            return Err(invalid("SandpileG0 is not an admissible constraint operator"));
        }
        self.f.check(&self.grid)
    }

    /// The variational problem with the bound frozen at G[v].
    pub fn frozen(&self, v: &ScalarField) -> Result<EllipticProblem> {
        let g = evaluate_constraint(&self.op, v, &self.grid)?;
        EllipticProblem::new(self.grid.clone(), self.p, self.delta, self.f.clone(), g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterStep {
    pub iteration: usize,
    /// ‖u^{k+1} − u^k‖ in X_p.
    pub change: f64,
    pub change_sup: f64,
    /// Observed contraction factor, when both differences are above the noise floor.
    pub q: Option<f64>,
    pub newton_iterations: usize,
    pub xp_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QviTrace {
    pub steps: Vec<OuterStep>,
    pub converged: bool,
    /// ‖u − S(f, G[u])‖ in X_p for the returned u.
    pub self_consistency: f64,
    pub self_consistency_sup: f64,
    /// Excess of |∇u| over G[u].
    pub violation: f64,
    pub max_q: Option<f64>,
    pub flags: Vec<String>,
}

struct Iteration {
    u: EllipticSolution,
    trace: QviTrace,
}

fn iterate(
    problem: &QviProblem,
    params: &PenaltyParams,
    tol: &Tolerances,
    outer_tol: f64,
    max_iter: usize,
    contraction: Option<f64>,
) -> Result<Iteration> {
    problem.validate()?;
    if max_iter == 0 {
        return Err(invalid("max_iter must be positive"));
    }
    let grid = &problem.grid;
    let p = problem.p;
    let mut u = ScalarField::zeros(grid);
    let mut steps: Vec<OuterStep> = Vec::new();
    let mut converged = false;
    let mut last: Option<EllipticSolution> = None;
    let mut flags = Vec::new();
    let mut prev_change: Option<f64> = None;
    let constant = problem.op.is_constant();
    for it in 1..=max_iter {
        let pr = problem.frozen(&u)?;
        let sol = solve_vi_from(&pr, params, tol, if it == 1 { None } else { Some(&u) })?;
        if !sol.converged {
            flags.push(format!("inner-solve-not-converged@{it}"));
        }
        let change = xp_distance(grid, p, &sol.u.0, &u.0);
        let change_sup = sol.u.max_abs_diff(&u);
        let xp = grad_norm(grid, &sol.u.0, p);
        // below this level differences are dominated by the inner solver tolerance
        let floor = 1e-9 * xp.max(1e-300).max(outer_tol);
        let q = match prev_change {
            Some(pc) if pc > floor && change > floor => Some(change / pc),
            _ => None,
        };
        steps.push(OuterStep { iteration: it, change, change_sup, q, newton_iterations: sol.iterations, xp_norm: xp });
        u = sol.u.clone();
        last = Some(sol);
        if let (Some(bound), Some(qk)) = (contraction, q) {
            if qk > 1.0 {
                return Err(Error::CertificateInconsistency(format!(
                    "observed contraction factor {qk:.6} > 1 at iteration {it} under a certificate with ratio {bound:.6}"
                )));
            }
        }
        if constant || change <= outer_tol {
            converged = true;
            break;
        }
        if let (Some(_), Some(qk)) = (contraction, q) {
            if qk < 1.0 && change * qk / (1.0 - qk) <= outer_tol {
                converged = true;
                break;
            }
        }
        prev_change = Some(change);
    }
    let mut sol = last.expect("at least one iteration");
    // self-consistency against one more application of the map
    let (sc, sc_sup, viol) = if constant {
        let g = evaluate_constraint(&problem.op, &sol.u, grid)?;
        (0.0, 0.0, violation_raw(grid, &sol.u.0, &g.values).0)
    } else {
        let pr = problem.frozen(&sol.u)?;
        let again = solve_vi_from(&pr, params, tol, Some(&sol.u))?;
        (
            xp_distance(grid, p, &again.u.0, &sol.u.0),
            again.u.max_abs_diff(&sol.u),
            violation_raw(grid, &sol.u.0, &pr.g.values).0,
        )
    };
    if !converged {
        flags.push("outer-iteration-not-converged".into());
        sol.converged = false;
    }
    let max_q = steps.iter().filter_map(|s| s.q).fold(None, |m: Option<f64>, q| Some(m.map_or(q, |m| m.max(q))));
    if let (Some(bound), Some(mq)) = (contraction, max_q) {
        if mq > bound + 0.05 {
            flags.push(format!("observed-q-{mq:.4}-exceeds-certified-{bound:.4}"));
        }
    }
    sol.flags.extend(flags.iter().cloned());
    Ok(Iteration {
        u: sol,
        trace: QviTrace {
            steps,
            converged,
            self_consistency: sc,
            self_consistency_sup: sc_sup,
            violation: viol,
            max_q,
            flags,
        },
    })
}

/// u^{k+1} = S(f, G[u^k]) from u^0 = 0 until ‖u^{k+1} − u^k‖_{X_p} ≤ outer_tol.
pub fn solve_qvi_picard(
    problem: &QviProblem,
    params: &PenaltyParams,
    tol: &Tolerances,
    outer_tol: f64,
    max_iter: usize,
) -> Result<(EllipticSolution, QviTrace)> {
    let mut r = iterate(problem, params, tol, outer_tol, max_iter, None)?;
    r.u.method = "qvi-picard".into();
    Ok((r.u, r.trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub p: f64,
    pub delta: f64,
    /// ‖f/δ‖_{p′}; the δ-scaled forcing enters every constant.
    pub f_norm: f64,
    pub c_p: f64,
    pub c_p_method: String,
    pub d_p: f64,
    pub omega_p: f64,
    pub measure: f64,
    pub phi_sup: f64,
    pub r_f: f64,
    pub eta: f64,
    pub m: f64,
    pub gamma_lip: f64,
    pub c_const: f64,
    pub left: f64,
    pub right: f64,
    /// left / right: the certified contraction factor.
    pub ratio: f64,
    pub holds: bool,
    pub status: String,
}

/// Strict inequality Γ(R_f)·p·C_p·‖f‖_{p′} < η(R_f) for G = γ(u)φ, 1 < p ≤ 2.
pub fn contraction_certificate(problem: &QviProblem, samples: usize, seed: u64) -> Result<CertificateReport> {
    problem.validate()?;
    let p = problem.p;
    if p > 2.0 {
        return Err(invalid(format!("contraction certificate requires 1 < p <= 2, got p = {p}")));
    }
    let ConstraintOperator::SeparatedNonlocal { gamma, phi } = &problem.op else {
        return Err(invalid("contraction certificate needs a separated nonlocal constraint gamma(u)*phi"));
    };
    phi.check(&problem.grid)?;
    let grid = &problem.grid;
    let fe: Vec<f64> = problem.f.0.iter().map(|v| v / problem.delta).collect();
    let pc = p / (p - 1.0);
    let f_norm = node_norm(grid, &fe, pc);
    let (c_p, c_p_method) = poincare_constant_tagged(grid, p, seed)?;
    let d_p = monotonicity_constant_seeded(p, samples.max(1), seed)?;
    let omega = crate::grid::omega_p(grid, p);
    let r_f = (c_p * f_norm).powf(1.0 / (p - 1.0));
    let phi_sup = phi.max();
    let eta = gamma.eta(r_f);
    let m = gamma.m(r_f);
    let lip = gamma.lipschitz(r_f);
    if !(eta > 0.0) || !m.is_finite() || !lip.is_finite() || lip < 0.0 {
        return Err(invalid("declared gamma bounds must satisfy eta > 0, finite M and Gamma >= 0"));
    }
    let c_const = if p == 2.0 {
        c_p
    } else {
        (2.0 * m * phi_sup).powf(2.0 - p) * c_p * omega * omega / d_p
    };
    let left = lip * p * c_const * f_norm;
    let right = eta;
    let holds = left < right;
    Ok(CertificateReport {
        p,
        delta: problem.delta,
        f_norm,
        c_p,
        c_p_method,
        d_p,
        omega_p: omega,
        measure: grid.measure(),
        phi_sup,
        r_f,
        eta,
        m,
        gamma_lip: lip,
        c_const,
        left,
        right,
        ratio: left / right,
        holds,
        status: if holds { "contraction certified".into() } else { "existence only, convergence heuristic".into() },
    })
}

/// Banach iteration with a per-step observed contraction factor. A factor above
/// 1 under a holding certificate is a hard error.
pub fn solve_qvi_contraction(
    problem: &QviProblem,
    params: &PenaltyParams,
    tol: &Tolerances,
    outer_tol: f64,
    max_iter: usize,
    allow_uncertified: bool,
) -> Result<(EllipticSolution, QviTrace, Option<CertificateReport>)> {
    problem.validate()?;
    let cert = match &problem.op {
        ConstraintOperator::SeparatedNonlocal { .. } if problem.p <= 2.0 => Some(contraction_certificate(problem, tol.vi_samples.max(64), tol.seed)?),
        _ => None,
    };
    let holds = cert.as_ref().map(|c| c.holds).unwrap_or(false);
    if !holds && !allow_uncertified {
        return Err(invalid("contraction certificate does not hold; pass the override to iterate anyway"));
    }
    let bound = if holds { cert.as_ref().map(|c| c.ratio) } else { None };
    let mut r = iterate(problem, params, tol, outer_tol, max_iter, bound)?;
    if !holds {
        r.trace.flags.push("certificate-overridden".into());
        r.u.flags.push("certificate-overridden".into());
    }
    r.u.method = "qvi-contraction".into();
    Ok((r.u, r.trace, cert))
}

/// γ = η₀ + δ₀‖∇u‖_p² data scaled so the certified ratio equals `target` at p = 2:
/// returns the multiplier s with f → s·f.
pub fn scale_for_ratio(problem: &QviProblem, target: f64, samples: usize, seed: u64) -> Result<f64> {
    let c = contraction_certificate(problem, samples, seed)?;
    if c.ratio == 0.0 {
        return Err(invalid("certified ratio is zero; scaling cannot reach the target"));
    }
    // ratio ∝ Γ(R_f)·‖f‖; for the energy functional Γ ∝ R_f ∝ ‖f‖^{1/(p−1)}
    let expo = match problem.op {
        ConstraintOperator::SeparatedNonlocal { gamma: GammaFunctional::Energy { .. }, .. } => 1.0 + 1.0 / (problem.p - 1.0),
        _ => 1.0,
    };
    Ok((target / c.ratio).powf(1.0 / expo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{BoundField, PointwiseMap};
    use crate::elliptic::solve_vi;
    use approx::assert_relative_eq;

    fn interval(n: usize) -> Grid {
        Grid::interval(-1.0, 1.0, n).unwrap()
    }

    #[test]
    fn constant_operator_is_one_vi_solve() {
        let grid = interval(81);
        let f = ScalarField::constant(&grid, 2.0);
        let pr = QviProblem { grid: grid.clone(), p: 2.0, delta: 1.0, f: f.clone(), op: ConstraintOperator::Constant(1.0) };
        let (s, tr) = solve_qvi_picard(&pr, &PenaltyParams::default(), &Tolerances::default(), 1e-10, 10).unwrap();
        assert_eq!(tr.steps.len(), 1);
        let vi = solve_vi(&EllipticProblem::new(grid.clone(), 2.0, 1.0, f, BoundField::constant(&grid, 1.0).unwrap()).unwrap(), &PenaltyParams::default(), &Tolerances::default()).unwrap();
        assert_eq!(s.u, vi.u);
        assert!(tr.converged && tr.self_consistency == 0.0);
    }

    #[test]
    fn zero_forcing_stops_immediately() {
        let grid = interval(41);
        let op = ConstraintOperator::Nemytskii(PointwiseMap::Growth { nu: 0.1, coef: 1.0, power: 2.0 });
        let pr = QviProblem { grid: grid.clone(), p: 2.0, delta: 1.0, f: ScalarField::zeros(&grid), op };
        let (s, tr) = solve_qvi_picard(&pr, &PenaltyParams::default(), &Tolerances::default(), 1e-10, 10).unwrap();
        assert_eq!(tr.steps.len(), 1);
        assert!(s.u.0.iter().all(|v| *v == 0.0));
    }

    /// Symmetric solution of −u″ = β, |u′| ≤ ν + u² on (−1, 1): parabola inside
    /// |x| < a, the active branch u = √ν tan(√ν(1 − |x|)) outside, with C¹ contact
    /// βa = ν + u(a)² located by bisection.
    fn growth_oracle(beta: f64, nu: f64, x: f64) -> f64 {
        let s = nu.sqrt();
        let outer = |x: f64| s * (s * (1.0 - x)).tan();
        let h = |a: f64| beta * a - nu - outer(a).powi(2);
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..200 {
            let m = 0.5 * (lo + hi);
            if h(m) > 0.0 {
                hi = m;
            } else {
                lo = m;
            }
        }
        let a = 0.5 * (lo + hi);
        let ax = x.abs();
        if ax >= a {
            outer(ax)
        } else {
            outer(a) + 0.5 * beta * (a * a - ax * ax)
        }
    }

    #[test]
    fn picard_matches_growth_oracle() {
        let (beta, nu) = (1.0, 0.1);
        let grid = interval(401);
        let op = ConstraintOperator::Nemytskii(PointwiseMap::Growth { nu, coef: 1.0, power: 2.0 });
        let pr = QviProblem { grid: grid.clone(), p: 2.0, delta: 1.0, f: ScalarField::constant(&grid, beta), op };
        let (s, tr) = solve_qvi_picard(&pr, &PenaltyParams::default(), &Tolerances::default(), 1e-9, 100).unwrap();
        assert!(tr.converged, "{tr:?}");
        let h = grid.h();
        let err = (0..grid.node_count())
            .map(|n| (s.u.0[n] - growth_oracle(beta, nu, grid.node_coords(n)[0])).abs())
            .fold(0.0, f64::max);
        assert!(err <= 5.0 * h, "{err}");
        assert!(tr.self_consistency <= 2e-9, "{}", tr.self_consistency);
        assert!(tr.violation <= 1e-4);
        // the constraint is active near the boundary, so the problem is not a plain VI
        let vi = solve_vi(&EllipticProblem::new(grid.clone(), 2.0, 1.0, pr.f.clone(), BoundField::constant(&grid, nu).unwrap()).unwrap(), &PenaltyParams::default(), &Tolerances::default()).unwrap();
        let vi_err = (0..grid.node_count())
            .map(|n| (vi.u.0[n] - growth_oracle(beta, nu, grid.node_coords(n)[0])).abs())
            .fold(0.0, f64::max);
        assert!(err < 0.1 * vi_err, "{err} vs {vi_err}");
    }

    #[test]
    fn picard_is_deterministic() {
        let grid = Grid::unit_square(11).unwrap();
        let op = ConstraintOperator::Nemytskii(PointwiseMap::Growth { nu: 0.2, coef: 2.0, power: 2.0 });
        let pr = QviProblem { grid: grid.clone(), p: 2.0, delta: 1.0, f: ScalarField::constant(&grid, 3.0), op };
        let a = solve_qvi_picard(&pr, &PenaltyParams::default(), &Tolerances::default(), 1e-9, 50).unwrap();
        let b = solve_qvi_picard(&pr, &PenaltyParams::default(), &Tolerances::default(), 1e-9, 50).unwrap();
        assert_eq!(a.0.u, b.0.u);
        assert_eq!(a.1, b.1);
    }

    fn energy_problem(grid: &Grid, fscale: f64, phi: f64) -> QviProblem {
        let op = ConstraintOperator::SeparatedNonlocal {
            gamma: GammaFunctional::Energy { eta0: 1.0, delta0: 1.0, p: 2.0 },
            phi: BoundField::constant(grid, phi).unwrap(),
        };
        QviProblem { grid: grid.clone(), p: 2.0, delta: 1.0, f: ScalarField::constant(grid, fscale), op }
    }

    #[test]
    fn certificate_arithmetic() {
        let grid = interval(101);
        let pr = energy_problem(&grid, 1.0, 0.2);
        let c = contraction_certificate(&pr, 16, 1).unwrap();
        // p = 2: R_f = c₂‖f‖, Γ = 2R_f, left = 2R_f·2c₂‖f‖ = 4c₂²‖f‖²
        assert_relative_eq!(c.r_f, c.c_p * c.f_norm, max_relative = 1e-14);
        assert_relative_eq!(c.left, 4.0 * c.c_p.powi(2) * c.f_norm.powi(2), max_relative = 1e-12);
        let s = scale_for_ratio(&pr, 0.5, 16, 1).unwrap();
        let half = energy_problem(&grid, s, 0.2);
        let c = contraction_certificate(&half, 16, 1).unwrap();
        assert_relative_eq!(c.ratio, 0.5, max_relative = 1e-10);
        assert!(c.holds);
        let big = energy_problem(&grid, 10.0 * s, 0.2);
        let c = contraction_certificate(&big, 16, 1).unwrap();
        assert!(!c.holds && c.ratio > 1.0);
        // constant gamma: Γ = 0
        let op = ConstraintOperator::SeparatedNonlocal { gamma: GammaFunctional::Constant(2.0), phi: BoundField::constant(&grid, 1.0).unwrap() };
        let pc = QviProblem { op, ..big.clone() };
        assert!(contraction_certificate(&pc, 16, 1).unwrap().holds);
        let p3 = QviProblem { p: 3.0, ..big };
        assert!(contraction_certificate(&p3, 16, 1).is_err());
    }

    #[test]
    fn certified_contraction_converges_within_ratio() {
        let grid = interval(101);
        let s = scale_for_ratio(&energy_problem(&grid, 1.0, 0.2), 0.5, 16, 1).unwrap();
        let pr = energy_problem(&grid, s, 0.2);
        let (sol, tr, cert) = solve_qvi_contraction(&pr, &PenaltyParams::default(), &Tolerances::default(), 1e-9, 100, false).unwrap();
        let cert = cert.unwrap();
        assert!(tr.converged);
        if let Some(q) = tr.max_q {
            assert!(q <= cert.ratio + 0.05, "{q}");
        }
        assert!(tr.self_consistency <= 1e-6);
        assert!(sol.diagnostics.feasible);
        for st in &tr.steps {
            assert!(st.xp_norm <= cert.r_f + 1e-6);
        }
        let big = energy_problem(&grid, 10.0 * s, 0.2);
        assert!(solve_qvi_contraction(&big, &PenaltyParams::default(), &Tolerances::default(), 1e-9, 5, false).is_err());
    }
}
