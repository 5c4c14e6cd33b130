//! Worked scenarios: sandpile growth under a repose-slope constraint and the
//! elastic-plastic torsion problem.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::{BoundField, ConstraintOperator, PenaltyParams};
use crate::elliptic::{equivalence_solve, EllipticProblem, EllipticSolution, EquivalenceReport, Tolerances};
use crate::error::{invalid, Result};
use crate::evolution::{
    solve_parabolic_qvi, solve_parabolic_vi, solve_transport_vi, ParabolicProblem, ParabolicQviProblem, QviStepMode,
    StepSettings, TimeDependent, TimeSeriesSolution, TransportProblem,
};
use crate::geodesic::weighted_distance;
use crate::grid::{cell_gradient, norm2, Grid, ScalarField};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandpileScenario {
    pub grid: Grid,
    /// Repose slope k = tan α.
    pub k: f64,
    pub f: TimeDependent<ScalarField>,
    pub u0: ScalarField,
    /// Optional transport drift (nodal).
    pub b: Option<Vec<[f64; 2]>>,
    pub delta: f64,
    pub horizon: f64,
    pub tau: f64,
    /// Stabilization threshold; 2h when absent.
    pub threshold: Option<f64>,
    /// Nodewise decrease tolerated before a monotonicity violation is counted.
    pub monotone_tol: f64,
}

impl SandpileScenario {
    pub fn new(grid: Grid, k: f64, f: ScalarField, horizon: f64, tau: f64) -> Self {
        let u0 = ScalarField::zeros(&grid);
        Self {
            grid,
            k,
            f: TimeDependent::Constant(f),
            u0,
            b: None,
            delta: 0.0,
            horizon,
            tau,
            threshold: None,
            monotone_tol: 1e-8,
        }
    }

    /// g = k ∨ |∇_h u₀| per cell, so that an initial support steeper than the
    /// repose slope stays admissible.
    fn bound(&self) -> Result<BoundField> {
        let g: Vec<f64> = (0..self.grid.cell_count())
            .map(|c| self.k.max(norm2(cell_gradient(&self.grid, &self.u0.0, c))))
            .collect();
        BoundField::new(g, self.k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0) || !self.k.is_finite() {
            return Err(invalid(format!("repose slope must be positive, got {}", self.k)));
        }
        self.u0.check(&self.grid)?;
        for t in [0.0, self.horizon] {
            if self.f.at(t).0.iter().any(|v| *v < 0.0) {
                return Err(invalid("sandpile source must be nonnegative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilizationReport {
    pub threshold: f64,
    /// First step index n with sup|u(t_n) − k·d| ≤ threshold.
    pub first_hit: Option<usize>,
    pub first_hit_time: Option<f64>,
    pub persists: bool,
    pub gap_history: Vec<f64>,
    pub monotonicity_violations: usize,
    pub max_decrease: f64,
    /// Node-steps with u > k·d + tol.
    pub barrier_violations: usize,
}

pub fn stabilization_report(sol: &TimeSeriesSolution, kd: &ScalarField, threshold: f64, monotone_tol: f64) -> StabilizationReport {
    let gap_history: Vec<f64> = sol.snapshots.iter().map(|u| u.max_abs_diff(kd)).collect();
    let first_hit = gap_history.iter().position(|g| *g <= threshold);
    let persists = first_hit.is_some_and(|i| gap_history[i..].iter().all(|g| *g <= threshold));
    let (max_decrease, monotonicity_violations) = sol.monotonicity(monotone_tol);
    let barrier_tol = 1e-6 * kd.0.iter().cloned().fold(1.0, f64::max);
    let barrier_violations = sol
        .snapshots
        .iter()
        .map(|u| u.0.iter().zip(&kd.0).filter(|(a, b)| **a > **b + barrier_tol).count())
        .sum();
    StabilizationReport {
        threshold,
        first_hit,
        first_hit_time: first_hit.map(|i| sol.times[i]),
        persists,
        gap_history,
        monotonicity_violations,
        max_decrease,
        barrier_violations,
    }
}

/// Evolution VI with bound k (∨ the initial support slope), compared against k·d.
pub fn sandpile_simulate(scenario: &SandpileScenario, settings: &StepSettings) -> Result<(TimeSeriesSolution, StabilizationReport)> {
    scenario.validate()?;
    let grid = &scenario.grid;
    let g = scenario.bound()?;
    let sol = match &scenario.b {
        None => solve_parabolic_vi(
            &ParabolicProblem {
                grid: grid.clone(),
                p: 2.0,
                delta: scenario.delta,
                f: scenario.f.clone(),
                g: TimeDependent::Constant(g),
                u0: scenario.u0.clone(),
                horizon: scenario.horizon,
                tau: scenario.tau,
            },
            settings,
        )?,
        Some(b) => solve_transport_vi(
            &TransportProblem {
                grid: grid.clone(),
                p: 2.0,
                delta: scenario.delta,
                b: b.clone(),
                c: ScalarField::zeros(grid),
                f: scenario.f.clone(),
                g: TimeDependent::Constant(g),
                u0: scenario.u0.clone(),
                horizon: scenario.horizon,
                tau: scenario.tau,
            },
            settings,
        )?,
    };
    let one = BoundField::constant(grid, 1.0)?;
    let kd = weighted_distance(&one, grid)?.values.scaled(scenario.k);
    let threshold = scenario.threshold.unwrap_or(2.0 * grid.h());
    let report = stabilization_report(&sol, &kd, threshold, scenario.monotone_tol);
    Ok((sol, report))
}

/// u₀ ∨ u_f with u_f(x) = max_{y ∈ support}(k·d(y) − k|x − y|)⁺.
pub fn sandpile_stationary(u0: &ScalarField, support: &[usize], k: f64, grid: &Grid) -> Result<ScalarField> {
    u0.check(grid)?;
    if support.iter().any(|&n| n >= grid.node_count()) {
        return Err(crate::error::shape("support node index out of range"));
    }
    let one = BoundField::constant(grid, 1.0)?;
    let d = weighted_distance(&one, grid)?.values;
    let pts: Vec<([f64; 2], f64)> = support.iter().map(|&y| (grid.node_coords(y), k * d.0[y])).collect();
    let out = (0..grid.node_count())
        .map(|n| {
            let x = grid.node_coords(n);
            let uf = pts
                .iter()
                .map(|(y, kd)| kd - k * ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)).sqrt())
                .fold(0.0, f64::max);
            u0.0[n].max(uf)
        })
        .collect();
    Ok(ScalarField(out))
}

/// Indicator sources on 1–3 seeded disks; returns the source field and its support nodes.
pub fn seeded_source(grid: &Grid, seed: u64) -> (ScalarField, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(1..=3);
    let lo = grid.lower();
    let up = grid.upper();
    let span = [(up[0] - lo[0]), (up[1] - lo[1]).max(0.0)];
    let disks: Vec<([f64; 2], f64)> = (0..count)
        .map(|_| {
            let c = [lo[0] + span[0] * rng.gen_range(0.2..0.8), lo[1] + span[1] * rng.gen_range(0.2..0.8)];
            (c, span[0] * rng.gen_range(0.06..0.12))
        })
        .collect();
    let mut support = Vec::new();
    let f = (0..grid.node_count())
        .map(|n| {
            let x = grid.node_coords(n);
            let inside = !grid.is_boundary(n)
                && disks.iter().any(|(c, r)| (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2) <= r * r);
            if inside {
                support.push(n);
                1.0
            } else {
                0.0
            }
        })
        .collect();
    (ScalarField(f), support)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizedTrend {
    pub eps: Vec<f64>,
    /// sup_n sup_x |u_ε(t_n) − u_{ε'}(t_n)| between consecutive ε.
    pub successive_gaps: Vec<f64>,
    pub final_states: Vec<ScalarField>,
}

/// Lagged per-step runs with the regularized support-dependent slope bound,
/// for a decreasing list of ε. Nothing is claimed at ε = 0.
pub fn sandpile_regularized_trend(
    scenario: &SandpileScenario,
    eps: &[f64],
    settings: &StepSettings,
) -> Result<RegularizedTrend> {
    scenario.validate()?;
    if eps.is_empty() || eps.iter().any(|e| !(*e > 0.0)) {
        return Err(invalid("regularization parameters must be positive"));
    }
    let mut runs = Vec::new();
    for &e in eps {
        let pr = ParabolicQviProblem {
            grid: scenario.grid.clone(),
            p: 2.0,
            delta: scenario.delta,
            f: scenario.f.clone(),
            op: ConstraintOperator::SandpileGeps { k: scenario.k, eps: e, support: scenario.u0.clone() },
            u0: scenario.u0.clone(),
            horizon: scenario.horizon,
            tau: scenario.tau,
        };
        runs.push(solve_parabolic_qvi(&pr, QviStepMode::Lagged, 0.0, 1, settings)?);
    }
    let successive_gaps = runs
        .windows(2)
        .map(|w| w[0].snapshots.iter().zip(&w[1].snapshots).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max))
        .collect();
    Ok(RegularizedTrend {
        eps: eps.to_vec(),
        successive_gaps,
        final_states: runs.iter().map(|r| r.last().clone()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorsionRegions {
    /// Cells with |∇_h u| ≥ 1 − gradient_tol.
    pub plastic_by_gradient: Vec<bool>,
    /// Cells whose nodes all lie in the active set of the double-obstacle
    /// solution (or on the boundary).
    pub plastic_by_contact: Vec<bool>,
    pub plastic_fraction: f64,
    pub symmetric_difference_fraction: f64,
    /// 1D only: smallest |x| of a contact node off the boundary.
    pub free_boundary: Option<f64>,
    pub center_value: f64,
    pub equivalence: EquivalenceReport,
    /// sup|u(β) + u(−β)|.
    pub sign_symmetry_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorsionOptions {
    pub gradient_tol: f64,
}

impl Default for TorsionOptions {
    fn default() -> Self {
        Self { gradient_tol: 1e-3 }
    }
}

/// g ≡ 1, f ≡ β, δ = 1, p = 2.
pub fn torsion_demo(
    beta: f64,
    grid: &Grid,
    options: &TorsionOptions,
    params: &PenaltyParams,
    tol: &Tolerances,
) -> Result<(EllipticSolution, TorsionRegions)> {
    if beta == 0.0 || !beta.is_finite() {
        return Err(invalid("torsion demo needs a finite nonzero beta"));
    }
    let g = BoundField::constant(grid, 1.0)?;
    let problem = EllipticProblem::new(grid.clone(), 2.0, 1.0, ScalarField::constant(grid, beta), g.clone())?;
    let (equivalence, sols) = equivalence_solve(&problem, params, tol)?;
    let mirrored = EllipticProblem::new(grid.clone(), 2.0, 1.0, ScalarField::constant(grid, -beta), g.clone())?;
    let um = crate::elliptic::solve_vi(&mirrored, params, tol)?;
    let u = sols.vi;
    let active = if beta > 0.0 { &sols.obstacle.upper_active } else { &sols.obstacle.lower_active };
    let touch: Vec<bool> = (0..grid.node_count()).map(|n| grid.is_boundary(n) || active[n]).collect();
    let nc = grid.cell_count();
    let by_grad: Vec<bool> = (0..nc).map(|c| norm2(cell_gradient(grid, &u.u.0, c)) >= 1.0 - options.gradient_tol).collect();
    let by_contact: Vec<bool> = (0..nc)
        .map(|c| {
            let (a, b, d) = grid.cell_nodes(c);
            touch[a] && touch[b] && touch[d]
        })
        .collect();
    let diff = by_grad.iter().zip(&by_contact).filter(|(a, b)| a != b).count();
    let free_boundary = if grid.dim() == 1 {
        (0..grid.node_count())
            .filter(|&n| !grid.is_boundary(n) && active[n])
            .map(|n| grid.node_coords(n)[0].abs())
            .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.min(x))))
    } else {
        None
    };
    let sign_symmetry_gap = u.u.0.iter().zip(&um.u.0).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max);
    let regions = TorsionRegions {
        plastic_fraction: by_grad.iter().filter(|b| **b).count() as f64 / nc as f64,
        symmetric_difference_fraction: diff as f64 / nc as f64,
        plastic_by_gradient: by_grad,
        plastic_by_contact: by_contact,
        free_boundary,
        center_value: u.u.0[crate::elliptic::center_node(grid)],
        equivalence,
        sign_symmetry_gap,
    };
    Ok((u, regions))
}
