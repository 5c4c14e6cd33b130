//! Uniform tensor grids, discrete gradient/divergence, p-flux, norms and the
//! discrete Poincaré and monotonicity constants.
//!
//! Nodes are numbered `i + nx * j`. In 1D a cell is the interval between nodes
//! `c` and `c + 1`. In 2D cell `(i, j)` has lower-left node `(i, j)` and carries the
//! forward-difference gradient built from nodes `(i+1, j)` and `(i, j+1)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::linalg::SymBandMatrix;

pub const DEFAULT_SEED: u64 = 20_240_917;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dim: usize,
    lower: [f64; 2],
    upper: [f64; 2],
    nodes: [usize; 2],
    spacing: [f64; 2],
}

impl Grid {
    pub fn interval(a: f64, b: f64, nodes: usize) -> Result<Self> {
        Self::check_axis(a, b, nodes)?;
        Ok(Self {
            dim: 1,
            lower: [a, 0.0],
            upper: [b, 0.0],
            nodes: [nodes, 1],
            spacing: [(b - a) / (nodes - 1) as f64, 1.0],
        })
    }

    /// Interval with spacing `h`; `(b - a) / h` must be an integer up to rounding.
    pub fn interval_with_spacing(a: f64, b: f64, h: f64) -> Result<Self> {
        let n = ((b - a) / h).round() as usize + 1;
        Self::interval(a, b, n)
    }

    pub fn rectangle(lower: [f64; 2], upper: [f64; 2], nodes: [usize; 2]) -> Result<Self> {
        Self::check_axis(lower[0], upper[0], nodes[0])?;
        Self::check_axis(lower[1], upper[1], nodes[1])?;
        Ok(Self {
            dim: 2,
            lower,
            upper,
            nodes,
            spacing: [
                (upper[0] - lower[0]) / (nodes[0] - 1) as f64,
                (upper[1] - lower[1]) / (nodes[1] - 1) as f64,
            ],
        })
    }

    /// Unit square with `n` nodes per axis.
    pub fn unit_square(n: usize) -> Result<Self> {
        Self::rectangle([0.0, 0.0], [1.0, 1.0], [n, n])
    }

    fn check_axis(a: f64, b: f64, n: usize) -> Result<()> {
        if !(a.is_finite() && b.is_finite() && b > a) {
            return Err(invalid(format!("axis bounds must satisfy a < b, got [{a}, {b}]")));
        }
        if n < 3 {
            return Err(invalid(format!("need at least 3 nodes per axis, got {n}")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn nx(&self) -> usize {
        self.nodes[0]
    }
    pub fn ny(&self) -> usize {
        self.nodes[1]
    }
    pub fn node_counts(&self) -> [usize; 2] {
        self.nodes
    }
    pub fn spacing(&self) -> [f64; 2] {
        self.spacing
    }
    pub fn lower(&self) -> [f64; 2] {
        self.lower
    }
    pub fn upper(&self) -> [f64; 2] {
        self.upper
    }
    /// Largest spacing, used as "h" in tolerances.
    pub fn h(&self) -> f64 {
        if self.dim == 1 {
            self.spacing[0]
        } else {
            self.spacing[0].max(self.spacing[1])
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes[0] * self.nodes[1]
    }

    pub fn cell_count(&self) -> usize {
        match self.dim {
            1 => self.nodes[0] - 1,
            _ => (self.nodes[0] - 1) * (self.nodes[1] - 1),
        }
    }

    pub fn interior_count(&self) -> usize {
        match self.dim {
            1 => self.nodes[0] - 2,
            _ => (self.nodes[0] - 2) * (self.nodes[1] - 2),
        }
    }

    /// |Ω|.
    pub fn measure(&self) -> f64 {
        match self.dim {
            1 => self.upper[0] - self.lower[0],
            _ => (self.upper[0] - self.lower[0]) * (self.upper[1] - self.lower[1]),
        }
    }

    pub fn node_ij(&self, n: usize) -> (usize, usize) {
        (n % self.nodes[0], n / self.nodes[0])
    }

    pub fn node_coords(&self, n: usize) -> [f64; 2] {
        let (i, j) = self.node_ij(n);
        [
            self.lower[0] + i as f64 * self.spacing[0],
            if self.dim == 1 { 0.0 } else { self.lower[1] + j as f64 * self.spacing[1] },
        ]
    }

    pub fn cell_center(&self, c: usize) -> [f64; 2] {
        match self.dim {
            1 => [self.lower[0] + (c as f64 + 0.5) * self.spacing[0], 0.0],
            _ => {
                let cx = self.nodes[0] - 1;
                let (i, j) = (c % cx, c / cx);
                [
                    self.lower[0] + (i as f64 + 0.5) * self.spacing[0],
                    self.lower[1] + (j as f64 + 0.5) * self.spacing[1],
                ]
            }
        }
    }

    /// Nodes entering the gradient of cell `c`: (base, +x neighbour, +y neighbour).
    /// In 1D the third entry repeats the base node and is unused.
    #[inline]
    pub fn cell_nodes(&self, c: usize) -> (usize, usize, usize) {
        match self.dim {
            1 => (c, c + 1, c),
            _ => {
                let cx = self.nodes[0] - 1;
                let (i, j) = (c % cx, c / cx);
                let b = i + self.nodes[0] * j;
                (b, b + 1, b + self.nodes[0])
            }
        }
    }

    /// Cells whose closure contains node `n` (used for cell-to-node averages).
    pub fn node_cells(&self, n: usize) -> Vec<usize> {
        let (i, j) = self.node_ij(n);
        match self.dim {
            1 => {
                let mut v = Vec::with_capacity(2);
                if i > 0 {
                    v.push(i - 1);
                }
                if i + 1 < self.nodes[0] {
                    v.push(i);
                }
                v
            }
            _ => {
                let cx = self.nodes[0] - 1;
                let cy = self.nodes[1] - 1;
                let mut v = Vec::with_capacity(4);
                for dj in [0usize, 1] {
                    for di in [0usize, 1] {
                        if i >= di && j >= dj && i - di < cx && j - dj < cy {
                            v.push((i - di) + cx * (j - dj));
                        }
                    }
                }
                v
            }
        }
    }

    pub fn is_boundary(&self, n: usize) -> bool {
        let (i, j) = self.node_ij(n);
        match self.dim {
            1 => i == 0 || i == self.nodes[0] - 1,
            _ => i == 0 || j == 0 || i == self.nodes[0] - 1 || j == self.nodes[1] - 1,
        }
    }

    pub fn boundary_mask(&self) -> Vec<bool> {
        (0..self.node_count()).map(|n| self.is_boundary(n)).collect()
    }

    /// Map node index -> interior index (lexicographic), `None` on the boundary.
    pub fn interior_index(&self, n: usize) -> Option<usize> {
        if self.is_boundary(n) {
            return None;
        }
        let (i, j) = self.node_ij(n);
        Some(match self.dim {
            1 => i - 1,
            _ => (i - 1) + (self.nodes[0] - 2) * (j - 1),
        })
    }

    pub fn interior_nodes(&self) -> Vec<usize> {
        (0..self.node_count()).filter(|&n| !self.is_boundary(n)).collect()
    }

    /// Half bandwidth of any operator assembled on interior nodes.
    pub fn interior_bandwidth(&self) -> usize {
        match self.dim {
            1 => 1,
            _ => self.nodes[0] - 2,
        }
    }

    /// Trapezoid quadrature weight of node `n`.
    #[inline]
    pub fn node_weight(&self, n: usize) -> f64 {
        let (i, j) = self.node_ij(n);
        let wx = if i == 0 || i == self.nodes[0] - 1 { 0.5 } else { 1.0 } * self.spacing[0];
        if self.dim == 1 {
            return wx;
        }
        let wy = if j == 0 || j == self.nodes[1] - 1 { 0.5 } else { 1.0 } * self.spacing[1];
        wx * wy
    }

    #[inline]
    pub fn cell_weight(&self) -> f64 {
        match self.dim {
            1 => self.spacing[0],
            _ => self.spacing[0] * self.spacing[1],
        }
    }

    /// Sample a scalar function at the nodes.
    pub fn sample_nodes(&self, f: impl Fn([f64; 2]) -> f64) -> ScalarField {
        ScalarField((0..self.node_count()).map(|n| f(self.node_coords(n))).collect())
    }

    /// Sample a scalar function at cell midpoints.
    pub fn sample_cells(&self, f: impl Fn([f64; 2]) -> f64) -> Vec<f64> {
        (0..self.cell_count()).map(|c| f(self.cell_center(c))).collect()
    }

    /// Euclidean distance to the boundary of the box.
    pub fn box_distance(&self, x: [f64; 2]) -> f64 {
        let dx = (x[0] - self.lower[0]).min(self.upper[0] - x[0]);
        if self.dim == 1 {
            return dx.max(0.0);
        }
        let dy = (x[1] - self.lower[1]).min(self.upper[1] - x[1]);
        dx.min(dy).max(0.0)
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.dim == other.dim && self.nodes == other.nodes
    }
}

/// Node values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarField(pub Vec<f64>);

/// Cell values; 1D fields store their value in component 0 and 0 in component 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorField(pub Vec<[f64; 2]>);

impl ScalarField {
    pub fn zeros(grid: &Grid) -> Self {
        Self(vec![0.0; grid.node_count()])
    }
    pub fn constant(grid: &Grid, v: f64) -> Self {
        Self(vec![v; grid.node_count()])
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
    pub fn values(&self) -> &[f64] {
        &self.0
    }
    pub fn check(&self, grid: &Grid) -> Result<()> {
        if self.0.len() != grid.node_count() {
            return Err(shape(format!(
                "scalar field has {} values, grid has {} nodes",
                self.0.len(),
                grid.node_count()
            )));
        }
        Ok(())
    }
    /// Zero the boundary layer in place.
    pub fn clamp_boundary(&mut self, grid: &Grid) {
        for n in 0..grid.node_count() {
            if grid.is_boundary(n) {
                self.0[n] = 0.0;
            }
        }
    }
    pub fn max_abs_diff(&self, other: &ScalarField) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
    pub fn sub(&self, other: &ScalarField) -> ScalarField {
        ScalarField(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }
    pub fn scaled(&self, s: f64) -> ScalarField {
        ScalarField(self.0.iter().map(|a| a * s).collect())
    }
}

impl VectorField {
    pub fn zeros(grid: &Grid) -> Self {
        Self(vec![[0.0; 2]; grid.cell_count()])
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
    pub fn check(&self, grid: &Grid) -> Result<()> {
        if self.0.len() != grid.cell_count() {
            return Err(shape(format!(
                "vector field has {} cells, grid has {}",
                self.0.len(),
                grid.cell_count()
            )));
        }
        Ok(())
    }
    pub fn magnitudes(&self) -> Vec<f64> {
        self.0.iter().map(|q| norm2(*q)).collect()
    }
}

#[inline]
pub(crate) fn norm2(q: [f64; 2]) -> f64 {
    q[0].hypot(q[1])
}

/// Forward-difference gradient of a node array on cell `c`.
#[inline]
pub(crate) fn cell_gradient(grid: &Grid, u: &[f64], c: usize) -> [f64; 2] {
    let (b, r, t) = grid.cell_nodes(c);
    let [hx, hy] = grid.spacing;
    if grid.dim == 1 {
        [(u[r] - u[b]) / hx, 0.0]
    } else {
        [(u[r] - u[b]) / hx, (u[t] - u[b]) / hy]
    }
}

pub fn gradient(u: &ScalarField, grid: &Grid) -> Result<VectorField> {
    u.check(grid)?;
    Ok(VectorField(
        (0..grid.cell_count()).map(|c| cell_gradient(grid, &u.0, c)).collect(),
    ))
}

/// Gᵀ W_c q accumulated into a node array (no node-weight division).
pub(crate) fn gradient_transpose(grid: &Grid, q: &[[f64; 2]], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let wc = grid.cell_weight();
    let [hx, hy] = grid.spacing;
    for (c, qc) in q.iter().enumerate() {
        let (b, r, t) = grid.cell_nodes(c);
        let ax = wc * qc[0] / hx;
        out[r] += ax;
        out[b] -= ax;
        if grid.dim == 2 {
            let ay = wc * qc[1] / hy;
            out[t] += ay;
            out[b] -= ay;
        }
    }
}

/// Negative node-weighted adjoint of [`gradient`]: div = −W_n⁻¹ Gᵀ W_c q.
pub fn divergence(q: &VectorField, grid: &Grid) -> Result<ScalarField> {
    q.check(grid)?;
    let mut out = vec![0.0; grid.node_count()];
    gradient_transpose(grid, &q.0, &mut out);
    for (n, v) in out.iter_mut().enumerate() {
        *v = -*v / grid.node_weight(n);
    }
    Ok(ScalarField(out))
}

#[inline]
pub(crate) fn p_flux_cell(q: [f64; 2], p: f64) -> [f64; 2] {
    if p == 2.0 {
        return q;
    }
    let r = norm2(q);
    if r == 0.0 {
        return [0.0, 0.0];
    }
    let s = r.powf(p - 2.0);
    [s * q[0], s * q[1]]
}

pub fn p_flux(q: &VectorField, p: f64) -> Result<VectorField> {
    check_p(p)?;
    Ok(VectorField(q.0.iter().map(|&v| p_flux_cell(v, p)).collect()))
}

pub(crate) fn check_p(p: f64) -> Result<()> {
    if !(p > 1.0) || !p.is_finite() {
        return Err(invalid(format!("exponent p must satisfy p > 1, got {p}")));
    }
    Ok(())
}

/// Fields that carry a discrete Lᵖ norm.
pub trait GridNorm {
    fn lp_norm(&self, p: f64, grid: &Grid) -> Result<f64>;
}

impl GridNorm for ScalarField {
    fn lp_norm(&self, p: f64, grid: &Grid) -> Result<f64> {
        self.check(grid)?;
        Ok(node_norm(grid, &self.0, p))
    }
}

impl GridNorm for VectorField {
    fn lp_norm(&self, p: f64, grid: &Grid) -> Result<f64> {
        self.check(grid)?;
        Ok(cell_norm(grid, &self.0, p))
    }
}

pub fn field_norm<F: GridNorm + ?Sized>(field: &F, p: f64, grid: &Grid) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(invalid(format!("norm exponent must be in [1, inf], got {p}")));
    }
    field.lp_norm(p, grid)
}

pub(crate) fn node_norm(grid: &Grid, u: &[f64], p: f64) -> f64 {
    if p.is_infinite() {
        return u.iter().fold(0.0, |m, v| m.max(v.abs()));
    }
    let s: f64 = u
        .iter()
        .enumerate()
        .map(|(n, v)| grid.node_weight(n) * v.abs().powf(p))
        .sum();
    s.powf(1.0 / p)
}

pub(crate) fn cell_norm(grid: &Grid, q: &[[f64; 2]], p: f64) -> f64 {
    if p.is_infinite() {
        return q.iter().fold(0.0, |m, v| m.max(norm2(*v)));
    }
    let s: f64 = q.iter().map(|v| norm2(*v).powf(p)).sum::<f64>() * grid.cell_weight();
    s.powf(1.0 / p)
}

/// ‖∇_h u‖_p for a node array.
pub(crate) fn grad_norm(grid: &Grid, u: &[f64], p: f64) -> f64 {
    let q: Vec<[f64; 2]> = (0..grid.cell_count()).map(|c| cell_gradient(grid, u, c)).collect();
    cell_norm(grid, &q, p)
}

/// Assemble the Dirichlet stiffness Gᵀ W_c G on interior nodes.
pub(crate) fn assemble_stiffness(grid: &Grid, coeff: impl Fn(usize) -> f64) -> SymBandMatrix {
    let n = grid.interior_count();
    let mut a = SymBandMatrix::zeros(n, grid.interior_bandwidth());
    let wc = grid.cell_weight();
    let [hx, hy] = grid.spacing;
    for c in 0..grid.cell_count() {
        let k = coeff(c) * wc;
        let (b, r, t) = grid.cell_nodes(c);
        let mut pair = |n0: usize, n1: usize, inv_h2: f64| {
            let i0 = grid.interior_index(n0);
            let i1 = grid.interior_index(n1);
            let v = k * inv_h2;
            if let Some(i) = i0 {
                a.add(i, i, v);
            }
            if let Some(j) = i1 {
                a.add(j, j, v);
            }
            if let (Some(i), Some(j)) = (i0, i1) {
                a.add(i, j, -v);
            }
        };
        pair(b, r, 1.0 / (hx * hx));
        if grid.dim == 2 {
            pair(b, t, 1.0 / (hy * hy));
        }
    }
    a
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantsReport {
    pub p: f64,
    pub c_p: f64,
    pub d_p: f64,
    pub omega_p: f64,
    pub c_p_method: String,
    pub d_p_method: String,
}

/// Smallest eigenpair of the Dirichlet Laplacian (stiffness vs. node mass).
pub(crate) fn dirichlet_eigenpair(grid: &Grid) -> Result<(f64, Vec<f64>)> {
    let mut a = assemble_stiffness(grid, |_| 1.0);
    let interior = grid.interior_nodes();
    let mass: Vec<f64> = interior.iter().map(|&n| grid.node_weight(n)).collect();
    // Keep an unfactored copy for Rayleigh quotients.
    let a0 = a.clone();
    a.factor()?;
    let m = interior.len();
    let mut v: Vec<f64> = interior
        .iter()
        .map(|&n| grid.box_distance(grid.node_coords(n)).max(1e-3))
        .collect();
    let mut lambda = f64::NAN;
    let mut av = vec![0.0; m];
    for _ in 0..500 {
        let mut w: Vec<f64> = v.iter().zip(&mass).map(|(a, b)| a * b).collect();
        a.solve(&mut w);
        let nrm = w.iter().zip(&mass).map(|(x, mm)| x * x * mm).sum::<f64>().sqrt();
        w.iter_mut().for_each(|x| *x /= nrm);
        a0.mul_vec(&w, &mut av);
        let num: f64 = w.iter().zip(&av).map(|(x, y)| x * y).sum();
        let next = num; // mass-normalized
        v = w;
        if (next - lambda).abs() <= 1e-14 * next.abs() {
            lambda = next;
            break;
        }
        lambda = next;
    }
    let mut full = vec![0.0; grid.node_count()];
    for (k, &n) in interior.iter().enumerate() {
        full[n] = v[k].abs();
    }
    Ok((lambda, full))
}

/// Discrete Poincaré constant c_p with its provenance tag.
pub fn poincare_constant_tagged(grid: &Grid, p: f64, seed: u64) -> Result<(f64, String)> {
    check_p(p)?;
    let (lambda, eig) = dirichlet_eigenpair(grid)?;
    if p == 2.0 {
        return Ok((1.0 / lambda.sqrt(), "inverse-iteration".into()));
    }
    let mut candidates: Vec<Vec<f64>> = vec![eig];
    candidates.push(
        (0..grid.node_count())
            .map(|n| grid.box_distance(grid.node_coords(n)))
            .collect(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..8 {
        let mut w: Vec<f64> = (0..grid.node_count())
            .map(|n| if grid.is_boundary(n) { 0.0 } else { rng.gen_range(0.0..1.0) })
            .collect();
        smooth(grid, &mut w, 4 * grid.nx().max(grid.ny()));
        candidates.push(w);
    }
    let best = candidates
        .iter()
        .map(|w| {
            let g = grad_norm(grid, w, p);
            if g > 0.0 {
                node_norm(grid, w, p) / g
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max);
    Ok((best, format!("rayleigh-estimate(seed={seed})")))
}

pub fn poincare_constant(grid: &Grid, p: f64) -> Result<f64> {
    poincare_constant_tagged(grid, p, DEFAULT_SEED).map(|r| r.0)
}

// Jacobi-type averaging with zero boundary values.
pub(crate) fn smooth(grid: &Grid, w: &mut [f64], sweeps: usize) {
    let nx = grid.nx();
    let mut tmp = w.to_vec();
    for _ in 0..sweeps {
        for n in 0..grid.node_count() {
            if grid.is_boundary(n) {
                tmp[n] = 0.0;
                continue;
            }
            tmp[n] = if grid.dim() == 1 {
                0.25 * (w[n - 1] + 2.0 * w[n] + w[n + 1])
            } else {
                0.125 * (w[n - 1] + w[n + 1] + w[n - nx] + w[n + nx] + 4.0 * w[n])
            };
        }
        w.copy_from_slice(&tmp);
    }
}

fn monotone_ratio(a: [f64; 2], b: [f64; 2], p: f64) -> Option<f64> {
    let d = [a[0] - b[0], a[1] - b[1]];
    let dn = norm2(d);
    if dn == 0.0 {
        return None;
    }
    let la = p_flux_cell(a, p);
    let lb = p_flux_cell(b, p);
    let num = (la[0] - lb[0]) * d[0] + (la[1] - lb[1]) * d[1];
    let den = if p >= 2.0 {
        dn.powf(p)
    } else {
        (norm2(a) + norm2(b)).powf(p - 2.0) * dn * dn
    };
    Some(num / den)
}

/// Sampled lower estimate of the strong-monotonicity constant d_p.
pub fn monotonicity_constant_seeded(p: f64, samples: usize, seed: u64) -> Result<f64> {
    check_p(p)?;
    if samples == 0 {
        return Err(invalid("monotonicity_constant needs at least one sample"));
    }
    if p == 2.0 {
        return Ok(1.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = 1.0f64;
    // Probe pairs: antipodal and one-sided.
    for probe in [[[1.0, 0.0], [-1.0, 0.0]], [[0.0, 0.0], [1.0, 0.0]]] {
        if let Some(r) = monotone_ratio(probe[0], probe[1], p) {
            best = best.min(r);
        }
    }
    for _ in 0..samples {
        let a = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let b = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        if let Some(r) = monotone_ratio(a, b, p) {
            best = best.min(r);
        }
    }
    Ok(best.clamp(f64::MIN_POSITIVE, 1.0))
}

pub fn monotonicity_constant(p: f64, samples: usize) -> Result<f64> {
    monotonicity_constant_seeded(p, samples, DEFAULT_SEED)
}

pub fn omega_p(grid: &Grid, p: f64) -> f64 {
    grid.measure().powf((2.0 - p) / (2.0 * p))
}

/// All constants for one exponent; `d_override` replaces the sampled d_p.
pub fn constants_report(
    grid: &Grid,
    p: f64,
    samples: usize,
    seed: u64,
    d_override: Option<f64>,
) -> Result<ConstantsReport> {
    let (c_p, c_p_method) = poincare_constant_tagged(grid, p, seed)?;
    let (d_p, d_p_method) = match d_override {
        Some(d) if p != 2.0 => {
            if !(d > 0.0 && d <= 1.0) {
                return Err(invalid(format!("d_p override must lie in (0, 1], got {d}")));
            }
            (d, "override".to_string())
        }
        _ if p == 2.0 => (1.0, "exact".to_string()),
        _ => (
            monotonicity_constant_seeded(p, samples, seed)?,
            format!("sampled(n={samples},seed={seed})"),
        ),
    };
    Ok(ConstantsReport {
        p,
        c_p,
        d_p,
        omega_p: omega_p(grid, p),
        c_p_method,
        d_p_method,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::{prop_assert, proptest};

    #[test]
    fn gradient_of_linear_and_constant() {
        let g = Grid::interval(-1.0, 1.0, 11).unwrap();
        let u = g.sample_nodes(|x| x[0]);
        for q in gradient(&u, &g).unwrap().0 {
            assert_relative_eq!(q[0], 1.0, epsilon = 1e-12);
        }
        let c = ScalarField::constant(&g, 3.0);
        assert!(gradient(&c, &g).unwrap().0.iter().all(|q| q[0] == 0.0));
    }

    #[test]
    fn gradient_of_parabola_is_forward_difference() {
        let g = Grid::interval(-1.0, 1.0, 21).unwrap();
        let h = g.spacing()[0];
        let u = g.sample_nodes(|x| 1.0 - x[0] * x[0]);
        let q = gradient(&u, &g).unwrap();
        for c in 0..g.cell_count() {
            let x = g.node_coords(c)[0];
            assert_relative_eq!(q.0[c][0], -2.0 * x - h, epsilon = 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let g = Grid::interval(0.0, 1.0, 5).unwrap();
        assert!(gradient(&ScalarField(vec![0.0; 4]), &g).is_err());
        assert!(divergence(&VectorField(vec![[0.0; 2]; 5]), &g).is_err());
        assert!(Grid::interval(0.0, 1.0, 2).is_err());
    }

    #[test]
    fn divergence_of_constant_flux_vanishes_inside() {
        let g = Grid::interval(-1.0, 1.0, 9).unwrap();
        let q = VectorField(vec![[2.5, 0.0]; g.cell_count()]);
        let d = divergence(&q, &g).unwrap();
        for n in g.interior_nodes() {
            assert!(d.0[n].abs() < 1e-12);
        }
        let z = divergence(&VectorField::zeros(&g), &g).unwrap();
        assert!(z.0.iter().all(|v| *v == 0.0));
    }

    fn adjoint_defect(g: &Grid, u: &[f64], q: &[[f64; 2]]) -> f64 {
        let mut u = ScalarField(u.to_vec());
        u.clamp_boundary(g);
        let gu = gradient(&u, g).unwrap();
        let dq = divergence(&VectorField(q.to_vec()), g).unwrap();
        let lhs: f64 = gu.0.iter().zip(q).map(|(a, b)| a[0] * b[0] + a[1] * b[1]).sum::<f64>()
            * g.cell_weight();
        let rhs: f64 = (0..g.node_count()).map(|n| g.node_weight(n) * u.0[n] * dq.0[n]).sum();
        (lhs + rhs).abs() / (1.0 + lhs.abs())
    }

    #[test]
    fn adjoint_identity_on_five_nodes() {
        let g = Grid::interval(0.0, 1.0, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q: Vec<[f64; 2]> = (0..4).map(|_| [rng.gen_range(-1.0..1.0), 0.0]).collect();
        assert!(adjoint_defect(&g, &u, &q) < 1e-14);
    }

    #[test]
    fn p_flux_examples() {
        let q = VectorField(vec![[3.0, 4.0], [0.0, 0.0]]);
        assert_eq!(p_flux(&q, 2.0).unwrap(), q);
        let f = p_flux(&q, 3.0).unwrap();
        assert_relative_eq!(f.0[0][0], 15.0, epsilon = 1e-12);
        assert_relative_eq!(f.0[0][1], 20.0, epsilon = 1e-12);
        assert_eq!(p_flux(&q, 1.5).unwrap().0[1], [0.0, 0.0]);
        assert!(p_flux(&q, 1.0).is_err());
    }

    #[test]
    fn norms() {
        let g = Grid::interval(-1.0, 1.0, 401).unwrap();
        assert_eq!(field_norm(&ScalarField::zeros(&g), 2.0, &g).unwrap(), 0.0);
        assert_relative_eq!(
            field_norm(&ScalarField::constant(&g, 1.0), 1.0, &g).unwrap(),
            2.0,
            epsilon = 1e-12
        );
        let x = g.sample_nodes(|x| x[0]);
        assert_relative_eq!(
            field_norm(&x, 2.0, &g).unwrap(),
            (2.0f64 / 3.0).sqrt(),
            epsilon = 1e-4
        );
        assert_eq!(field_norm(&x, f64::INFINITY, &g).unwrap(), 1.0);
    }

    #[test]
    fn poincare_interval_and_square() {
        let g = Grid::interval(-1.0, 1.0, 200).unwrap();
        let c = poincare_constant(&g, 2.0).unwrap();
        let exact = 2.0 / std::f64::consts::PI;
        assert!((c - exact).abs() / exact < 0.02, "{c}");
        // discrete eigenvalue in closed form
        let h = g.spacing()[0];
        let lam = 4.0 / (h * h) * (std::f64::consts::PI * h / 4.0).sin().powi(2);
        assert_relative_eq!(c, 1.0 / lam.sqrt(), max_relative = 1e-9);

        let s = Grid::unit_square(60).unwrap();
        let c2 = poincare_constant(&s, 2.0).unwrap();
        let exact2 = 1.0 / (std::f64::consts::PI * 2f64.sqrt());
        assert!((c2 - exact2).abs() / exact2 < 0.02, "{c2}");
    }

    #[test]
    fn poincare_decreases_under_refinement() {
        let mut prev = f64::INFINITY;
        for n in [11, 21, 41] {
            let c = poincare_constant(&Grid::unit_square(n).unwrap(), 2.0).unwrap();
            assert!(c < prev);
            assert!(c > 1.0 / (std::f64::consts::PI * 2f64.sqrt()));
            prev = c;
        }
    }

    #[test]
    fn poincare_estimate_for_other_p_is_tagged() {
        let g = Grid::interval(-1.0, 1.0, 81).unwrap();
        let (c, tag) = poincare_constant_tagged(&g, 3.0, 1).unwrap();
        assert!(c > 0.0 && tag.starts_with("rayleigh"));
    }

    #[test]
    fn monotonicity_constants() {
        assert_eq!(monotonicity_constant(2.0, 1).unwrap(), 1.0);
        assert_eq!(monotone_ratio([1.0, 1.0], [1.0, 1.0], 3.0), None);
        let a = monotonicity_constant_seeded(4.0, 100_000, 9).unwrap();
        let b = monotonicity_constant_seeded(4.0, 100_000, 9).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0 && a <= 1.0);
        assert!(monotonicity_constant(0.5, 10).is_err());
        let r = constants_report(&Grid::interval(-1.0, 1.0, 11).unwrap(), 2.0, 10, 1, None).unwrap();
        assert_eq!(r.d_p, 1.0);
        assert_relative_eq!(r.omega_p, 1.0);
    }

    proptest! {
        #[test]
        fn adjoint_identity_2d(seed in 0u64..1000, nx in 3usize..8, ny in 3usize..8) {
            let g = Grid::rectangle([0.0, -1.0], [2.0, 1.5], [nx, ny]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u: Vec<f64> = (0..g.node_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let q: Vec<[f64; 2]> = (0..g.cell_count())
                .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
            prop_assert!(adjoint_defect(&g, &u, &q) < 1e-13);
        }

        #[test]
        fn p_flux_is_monotone(p in 1.05f64..5.0, a0 in -3.0f64..3.0, a1 in -3.0f64..3.0,
                              b0 in -3.0f64..3.0, b1 in -3.0f64..3.0) {
            let la = p_flux_cell([a0, a1], p);
            let lb = p_flux_cell([b0, b1], p);
            let s = (la[0] - lb[0]) * (a0 - b0) + (la[1] - lb[1]) * (a1 - b1);
            prop_assert!(s >= -1e-12);
        }

        #[test]
        fn norm_homogeneous_and_subadditive(seed in 0u64..500, p in 1.0f64..6.0, s in -4.0f64..4.0) {
            let g = Grid::unit_square(6).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = ScalarField((0..g.node_count()).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let v = ScalarField((0..g.node_count()).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let nu = field_norm(&u, p, &g).unwrap();
            let ns = field_norm(&u.scaled(s), p, &g).unwrap();
            prop_assert!((ns - s.abs() * nu).abs() <= 1e-12 * (1.0 + nu));
            let sum = ScalarField(u.0.iter().zip(&v.0).map(|(a, b)| a + b).collect());
            prop_assert!(field_norm(&sum, p, &g).unwrap()
                <= nu + field_norm(&v, p, &g).unwrap() + 1e-12);
        }
    }
}
