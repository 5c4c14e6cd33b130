//! Gradient bounds g, constraint operators u ↦ G[u], the exponential penalty
//! and feasibility utilities.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::grid::{cell_gradient, grad_norm, norm2, Grid, ScalarField};

/// Floor substituted for g when sampled data touches zero.
pub const G_FLOOR: f64 = 1e-12;

/// Per-cell bound with a certified positive lower bound ν.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundField {
    pub values: Vec<f64>,
    pub nu: f64,
    /// Set when some sampled values were raised to [`G_FLOOR`].
    #[serde(default)]
    pub floored: bool,
}

impl BoundField {
    pub fn new(values: Vec<f64>, nu: f64) -> Result<Self> {
        if !(nu > 0.0) || !nu.is_finite() {
            return Err(invalid(format!("lower bound nu must be positive, got {nu}")));
        }
        if let Some((c, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < nu * (1.0 - 1e-12))
        {
            return Err(invalid(format!("bound value {v} at cell {c} is below nu = {nu}")));
        }
        Ok(Self { values, nu, floored: false })
    }

    pub fn constant(grid: &Grid, k: f64) -> Result<Self> {
        Self::new(vec![k; grid.cell_count()], k)
    }

    /// Sample `g` at cell midpoints, ν = min of the samples. Values ≤ 0 are
    /// raised to [`G_FLOOR`] and the field is flagged.
    pub fn from_fn(grid: &Grid, g: impl Fn([f64; 2]) -> f64) -> Result<Self> {
        Self::from_samples(grid.sample_cells(g))
    }

    /// Cell samples with the same flooring as [`BoundField::from_fn`].
    pub fn from_samples(mut values: Vec<f64>) -> Result<Self> {
        let mut floored = false;
        for v in values.iter_mut() {
            if !v.is_finite() {
                return Err(invalid("bound function produced a non-finite value"));
            }
            if *v < G_FLOOR {
                *v = G_FLOOR;
                floored = true;
            }
        }
        let nu = values.iter().cloned().fold(f64::INFINITY, f64::min);
        Ok(Self { values, nu, floored })
    }

    pub fn check(&self, grid: &Grid) -> Result<()> {
        if self.values.len() != grid.cell_count() {
            return Err(shape(format!(
                "bound field has {} cells, grid has {}",
                self.values.len(),
                grid.cell_count()
            )));
        }
        Ok(())
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        let mut b = Self::new(self.values.iter().map(|v| v * s).collect(), self.nu * s)?;
        b.floored = self.floored;
        Ok(b)
    }

    /// Cell-to-node average (used where g is needed at nodes).
    pub fn to_nodes(&self, grid: &Grid) -> Vec<f64> {
        (0..grid.node_count())
            .map(|n| {
                let cells = grid.node_cells(n);
                cells.iter().map(|&c| self.values[c]).sum::<f64>() / cells.len() as f64
            })
            .collect()
    }
}

/// ε and the continuation schedule for the exponential penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyParams {
    pub eps: f64,
    pub schedule: Vec<f64>,
}

impl Default for PenaltyParams {
    fn default() -> Self {
        Self::continuation(1e-1, 1e-6, 10.0).expect("default schedule is valid")
    }
}

impl PenaltyParams {
    pub fn fixed(eps: f64) -> Result<Self> {
        Self::from_schedule(vec![eps])
    }

    /// Geometric schedule from `start` down to `end` (inclusive) by `factor`.
    pub fn continuation(start: f64, end: f64, factor: f64) -> Result<Self> {
        if !(start >= end && end > 0.0 && factor > 1.0) {
            return Err(invalid("continuation needs start >= end > 0 and factor > 1"));
        }
        let mut s = vec![start];
        let mut e = start;
        while e > end * (1.0 + 1e-9) {
            e = (e / factor).max(end);
            s.push(e);
        }
        Self::from_schedule(s)
    }

    pub fn from_schedule(schedule: Vec<f64>) -> Result<Self> {
        if schedule.is_empty() {
            return Err(invalid("penalty schedule is empty"));
        }
        if schedule.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
            return Err(invalid("penalty parameters must be positive"));
        }
        if schedule.windows(2).any(|w| w[1] >= w[0]) {
            return Err(invalid("penalty schedule must be strictly decreasing"));
        }
        Ok(Self { eps: *schedule.last().unwrap(), schedule })
    }

    pub fn penalty(&self, s: f64) -> f64 {
        kappa(s, self.eps)
    }

    pub fn penalty_derivative(&self, s: f64) -> f64 {
        kappa_prime(s, self.eps)
    }
}

/// k_ε(s). The cap e^{1/ε²} − 1 overflows to +∞ for ε below about 0.038.
#[inline]
pub fn kappa(s: f64, eps: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else if s <= 1.0 / eps {
        (s / eps).exp_m1()
    } else {
        (1.0 / (eps * eps)).exp_m1()
    }
}

/// One-sided derivative of [`kappa`]: right derivative at 0, left at 1/ε.
#[inline]
pub fn kappa_prime(s: f64, eps: f64) -> f64 {
    if s < 0.0 || s > 1.0 / eps {
        0.0
    } else {
        (s / eps).exp() / eps
    }
}

pub fn penalty(s: f64, params: &PenaltyParams) -> f64 {
    params.penalty(s)
}

pub fn penalty_derivative(s: f64, params: &PenaltyParams) -> f64 {
    params.penalty_derivative(s)
}

/// Excess of |∇_h u| over g counted as a violation.
pub const VIOLATION_TOL: f64 = 1e-9;

/// (max over cells of (|∇_h u| − g)⁺, fraction of cells exceeding `VIOLATION_TOL`).
pub fn violation(u: &ScalarField, g: &BoundField, grid: &Grid) -> Result<(f64, f64)> {
    u.check(grid)?;
    g.check(grid)?;
    Ok(violation_raw(grid, &u.0, &g.values))
}

pub(crate) fn violation_raw(grid: &Grid, u: &[f64], g: &[f64]) -> (f64, f64) {
    let mut max = 0.0f64;
    let mut count = 0usize;
    for (c, gc) in g.iter().enumerate() {
        let e = norm2(cell_gradient(grid, u, c)) - gc;
        if e > 0.0 {
            max = max.max(e);
            if e > VIOLATION_TOL * gc.max(1.0) {
                count += 1;
            }
        }
    }
    (max, count as f64 / g.len() as f64)
}

/// (ν/(ν+β))·u; requires |∇_h u| ≤ ν + β cellwise.
pub fn scale_to_feasible(
    u: &ScalarField,
    g_target: &BoundField,
    nu: f64,
    beta: f64,
    grid: &Grid,
) -> Result<ScalarField> {
    u.check(grid)?;
    g_target.check(grid)?;
    if !(nu > 0.0) || !(beta >= 0.0) {
        return Err(invalid("scale_to_feasible needs nu > 0 and beta >= 0"));
    }
    if g_target.values.iter().any(|&v| v < nu * (1.0 - 1e-12)) {
        return Err(invalid("target bound falls below nu"));
    }
    let lim = nu + beta;
    for c in 0..grid.cell_count() {
        let r = norm2(cell_gradient(grid, &u.0, c));
        if r > lim * (1.0 + 1e-12) + 1e-14 {
            return Err(invalid(format!(
                "precondition |grad u| <= nu + beta violated at cell {c}: {r} > {lim}"
            )));
        }
    }
    if beta == 0.0 {
        return Ok(u.clone());
    }
    Ok(u.scaled(nu / lim))
}

/// F = ν + coef·|u|^power, or a user map (x, u) ↦ F with declared floor ν.
#[derive(Clone)]
pub enum PointwiseMap {
    Growth { nu: f64, coef: f64, power: f64 },
    Custom { map: Arc<dyn Fn([f64; 2], f64) -> f64 + Send + Sync>, nu: f64 },
}

impl PointwiseMap {
    pub fn nu(&self) -> f64 {
        match self {
            Self::Growth { nu, .. } | Self::Custom { nu, .. } => *nu,
        }
    }
    #[inline]
    pub fn apply(&self, x: [f64; 2], u: f64) -> f64 {
        match self {
            Self::Growth { nu, coef, power } => nu + coef * u.abs().powf(*power),
            Self::Custom { map, .. } => map(x, u),
        }
    }
}

impl fmt::Debug for PointwiseMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Growth { nu, coef, power } => f
                .debug_struct("Growth")
                .field("nu", nu)
                .field("coef", coef)
                .field("power", power)
                .finish(),
            Self::Custom { nu, .. } => f.debug_struct("Custom").field("nu", nu).finish(),
        }
    }
}

/// Declared bounds η(R), M(R), Γ(R) of a functional γ on the ball of radius R.
#[derive(Clone)]
pub struct DeclaredBounds {
    pub eta: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub m: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub lip: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

/// Scalar functional γ of the solution.
#[derive(Clone)]
pub enum GammaFunctional {
    Constant(f64),
    /// γ(u) = η₀ + δ₀‖∇u‖²; the norm is ‖∇u‖_p in space (stationary use) or over
    /// Q_T for whole trajectories.
    Energy { eta0: f64, delta0: f64, p: f64 },
    Custom {
        value: Arc<dyn Fn(&Grid, &[f64]) -> f64 + Send + Sync>,
        bounds: DeclaredBounds,
    },
}

impl fmt::Debug for GammaFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant(c) => write!(f, "Constant({c})"),
            Self::Energy { eta0, delta0, p } => {
                write!(f, "Energy {{ eta0: {eta0}, delta0: {delta0}, p: {p} }}")
            }
            Self::Custom { .. } => write!(f, "Custom"),
        }
    }
}

impl GammaFunctional {
    pub fn value(&self, grid: &Grid, u: &[f64]) -> f64 {
        match self {
            Self::Constant(c) => *c,
            Self::Energy { eta0, delta0, p } => {
                let n = grad_norm(grid, u, *p);
                eta0 + delta0 * n * n
            }
            Self::Custom { value, .. } => value(grid, u),
        }
    }

    /// Value on a trajectory sampled at step ends with step `tau`.
    pub fn value_trajectory(&self, grid: &Grid, snapshots: &[Vec<f64>], tau: f64) -> f64 {
        match self {
            Self::Constant(c) => *c,
            Self::Energy { eta0, delta0, p } => {
                let s: f64 = snapshots.iter().map(|u| grad_norm(grid, u, *p).powf(*p)).sum();
                let n = (tau * s).powf(1.0 / p);
                eta0 + delta0 * n * n
            }
            Self::Custom { value, .. } => {
                let s: f64 = snapshots.iter().map(|u| value(grid, u)).sum();
                s / snapshots.len().max(1) as f64
            }
        }
    }

    /// η(R): lower bound of γ on the ball.
    pub fn eta(&self, r: f64) -> f64 {
        match self {
            Self::Constant(c) => *c,
            Self::Energy { eta0, .. } => *eta0,
            Self::Custom { bounds, .. } => (bounds.eta)(r),
        }
    }

    /// M(R): upper bound of γ on the ball.
    pub fn m(&self, r: f64) -> f64 {
        match self {
            Self::Constant(c) => *c,
            Self::Energy { eta0, delta0, .. } => eta0 + delta0 * r * r,
            Self::Custom { bounds, .. } => (bounds.m)(r),
        }
    }

    /// Γ(R): Lipschitz constant of γ on the ball.
    pub fn lipschitz(&self, r: f64) -> f64 {
        match self {
            Self::Constant(_) => 0.0,
            Self::Energy { delta0, .. } => 2.0 * delta0 * r,
            Self::Custom { bounds, .. } => (bounds.lip)(r),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Self::Constant(_))
    }
}

/// The catalog of constraint maps u ↦ G[u].
#[derive(Debug, Clone)]
pub enum ConstraintOperator {
    Constant(f64),
    Nemytskii(PointwiseMap),
    /// Bound F(x, ∫K(x,y)·∇u(y)dy) with K tabulated per (node, cell); evaluated at
    /// nodes and averaged to cells.
    Kernel { map: PointwiseMap, table: Arc<Vec<[f64; 2]>> },
    SeparatedNonlocal { gamma: GammaFunctional, phi: BoundField },
    /// Discontinuous sandpile operator; only for explicit experiments.
    SandpileG0 { k: f64, support: ScalarField },
    SandpileGeps { k: f64, eps: f64, support: ScalarField },
}

impl ConstraintOperator {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Constant(_) => "constant",
            Self::Nemytskii(_) => "nemytskii",
            Self::Kernel { .. } => "kernel",
            Self::SeparatedNonlocal { .. } => "separated_nonlocal",
            Self::SandpileG0 { .. } => "sandpile_g0",
            Self::SandpileGeps { .. } => "sandpile_geps",
        }
    }

    /// Certified floor ν of every produced bound.
    pub fn nu(&self) -> f64 {
        match self {
            Self::Constant(k) => *k,
            Self::Nemytskii(m) | Self::Kernel { map: m, .. } => m.nu(),
            Self::SeparatedNonlocal { gamma, phi } => {
                let e = match gamma {
                    GammaFunctional::Constant(c) => *c,
                    GammaFunctional::Energy { eta0, .. } => *eta0,
                    GammaFunctional::Custom { bounds, .. } => (bounds.eta)(0.0),
                };
                e * phi.nu
            }
            Self::SandpileG0 { k, .. } | Self::SandpileGeps { k, .. } => *k,
        }
    }

    pub fn is_constant(&self) -> bool {
        match self {
            Self::Constant(_) => true,
            Self::SeparatedNonlocal { gamma, .. } => gamma.is_constant(),
            _ => false,
        }
    }

    pub fn kernel(map: PointwiseMap, grid: &Grid, k: impl Fn([f64; 2], [f64; 2]) -> [f64; 2]) -> Self {
        let mut table = Vec::with_capacity(grid.node_count() * grid.cell_count());
        for n in 0..grid.node_count() {
            let x = grid.node_coords(n);
            for c in 0..grid.cell_count() {
                table.push(k(x, grid.cell_center(c)));
            }
        }
        Self::Kernel { map, table: Arc::new(table) }
    }
}

fn cell_mean(grid: &Grid, u: &[f64], c: usize) -> f64 {
    let (b, r, t) = grid.cell_nodes(c);
    if grid.dim() == 1 {
        0.5 * (u[b] + u[r])
    } else {
        0.25 * (u[b] + u[r] + u[t] + u[t + 1])
    }
}

/// G[u] as a [`BoundField`]. Rejects [`ConstraintOperator::SandpileG0`].
pub fn evaluate_constraint(op: &ConstraintOperator, u: &ScalarField, grid: &Grid) -> Result<BoundField> {
    if let ConstraintOperator::SandpileG0 { .. } = op {
        return Err(invalid(
            "SandpileG0 is discontinuous and only available to the sandpile experiments",
        ));
    }
    evaluate_any(op, u, grid)
}

pub(crate) fn evaluate_any(op: &ConstraintOperator, u: &ScalarField, grid: &Grid) -> Result<BoundField> {
    u.check(grid)?;
    let nc = grid.cell_count();
    let values: Vec<f64> = match op {
        ConstraintOperator::Constant(k) => vec![*k; nc],
        ConstraintOperator::Nemytskii(m) => (0..nc)
            .map(|c| m.apply(grid.cell_center(c), cell_mean(grid, &u.0, c)))
            .collect(),
        ConstraintOperator::Kernel { map, table } => {
            if table.len() != grid.node_count() * nc {
                return Err(shape("kernel table does not match the grid"));
            }
            let q: Vec<[f64; 2]> = (0..nc).map(|c| cell_gradient(grid, &u.0, c)).collect();
            let wc = grid.cell_weight();
            let nodal: Vec<f64> = (0..grid.node_count())
                .map(|n| {
                    let row = &table[n * nc..(n + 1) * nc];
                    let s: f64 = row.iter().zip(&q).map(|(k, g)| k[0] * g[0] + k[1] * g[1]).sum();
                    map.apply(grid.node_coords(n), s * wc)
                })
                .collect();
            (0..nc).map(|c| cell_mean(grid, &nodal, c)).collect()
        }
        ConstraintOperator::SeparatedNonlocal { gamma, phi } => {
            phi.check(grid)?;
            let gv = gamma.value(grid, &u.0);
            phi.values.iter().map(|p| gv * p).collect()
        }
        ConstraintOperator::SandpileG0 { k, support } => {
            support.check(grid)?;
            (0..nc)
                .map(|c| {
                    if cell_mean(grid, &u.0, c) > cell_mean(grid, &support.0, c) {
                        *k
                    } else {
                        k.max(norm2(cell_gradient(grid, &support.0, c)))
                    }
                })
                .collect()
        }
        ConstraintOperator::SandpileGeps { k, eps, support } => {
            support.check(grid)?;
            (0..nc)
                .map(|c| {
                    let um = cell_mean(grid, &u.0, c);
                    let se = cell_mean(grid, &support.0, c);
                    let ke = k.max(norm2(cell_gradient(grid, &support.0, c)));
                    if um >= se + eps {
                        *k
                    } else if um >= se {
                        ke + (k - ke) * (um - se) / eps
                    } else {
                        ke
                    }
                })
                .collect()
        }
    };
    let nu = match op {
        ConstraintOperator::SeparatedNonlocal { .. } => values.iter().cloned().fold(f64::INFINITY, f64::min),
        _ => op.nu(),
    };
    if !(nu > 0.0) {
        return Err(invalid(format!("constraint operator has non-positive floor nu = {nu}")));
    }
    for (c, v) in values.iter().enumerate() {
        if !v.is_finite() || *v < nu * (1.0 - 1e-12) {
            return Err(Error::InvalidParameter(format!(
                "constraint produced bound {v} below nu = {nu} at cell {c}"
            )));
        }
    }
    Ok(BoundField { values, nu, floored: false })
}
