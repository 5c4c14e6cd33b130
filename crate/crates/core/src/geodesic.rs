//! Weighted distance to the boundary by Dijkstra on the grid graph, and the
//! extremal obstacles ±d_g.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::constraints::BoundField;
use crate::error::{invalid, Result};
use crate::grid::{Grid, ScalarField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Stencil {
    Four,
    Eight,
    #[default]
    Sixteen,
}

impl Stencil {
    fn offsets(self) -> &'static [(i64, i64)] {
        const FOUR: [(i64, i64); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
        const EIGHT: [(i64, i64); 8] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];
        const SIXTEEN: [(i64, i64); 16] = [
            (1, 0), (-1, 0), (0, 1), (0, -1),
            (1, 1), (1, -1), (-1, 1), (-1, -1),
            (1, 2), (1, -2), (-1, 2), (-1, -2),
            (2, 1), (2, -1), (-2, 1), (-2, -1),
        ];
        match self {
            Self::Four => &FOUR,
            Self::Eight => &EIGHT,
            Self::Sixteen => &SIXTEEN,
        }
    }

    pub fn order(self) -> usize {
        self.offsets().len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceField {
    pub values: ScalarField,
    pub stencil: Stencil,
    /// Nodal weights used for the edge integrals.
    pub weights: Vec<f64>,
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    // Reversed so the std max-heap pops the smallest distance.
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

/// Graph neighbours of `n` with their edge lengths.
pub(crate) fn neighbours(grid: &Grid, stencil: Stencil, n: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
    let (i, j) = grid.node_ij(n);
    let [nx, ny] = grid.node_counts();
    let [hx, hy] = grid.spacing();
    let offs: &'static [(i64, i64)] = if grid.dim() == 1 { &[(1, 0), (-1, 0)] } else { stencil.offsets() };
    offs.iter().filter_map(move |&(di, dj)| {
        let a = i as i64 + di;
        let b = j as i64 + dj;
        if a < 0 || b < 0 || a >= nx as i64 || b >= ny as i64 {
            return None;
        }
        let len = ((di as f64 * hx).powi(2) + (dj as f64 * hy).powi(2) * (grid.dim() as f64 - 1.0)).sqrt();
        Some((a as usize + nx * b as usize, len))
    })
}

/// Dijkstra distance to the boundary node set with nodal weights `w`.
pub(crate) fn distance_with_node_weights(grid: &Grid, w: &[f64], stencil: Stencil) -> Vec<f64> {
    let n = grid.node_count();
    let mut dist = vec![f64::INFINITY; n];
    let mut heap = BinaryHeap::new();
    for v in 0..n {
        if grid.is_boundary(v) {
            dist[v] = 0.0;
            heap.push(Entry(0.0, v));
        }
    }
    while let Some(Entry(d, v)) = heap.pop() {
        if d > dist[v] {
            continue;
        }
        for (m, len) in neighbours(grid, stencil, v) {
            let nd = d + len * 0.5 * (w[v] + w[m]);
            if nd < dist[m] {
                dist[m] = nd;
                heap.push(Entry(nd, m));
            }
        }
    }
    dist
}

pub fn weighted_distance_with(g: &BoundField, grid: &Grid, stencil: Stencil) -> Result<DistanceField> {
    g.check(grid)?;
    if g.values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(invalid("distance weights must be positive and finite"));
    }
    let weights = g.to_nodes(grid);
    let values = ScalarField(distance_with_node_weights(grid, &weights, stencil));
    Ok(DistanceField { values, stencil, weights })
}

/// d_g(·, ∂Ω) on the default 16-neighbour stencil.
pub fn weighted_distance(g: &BoundField, grid: &Grid) -> Result<DistanceField> {
    weighted_distance_with(g, grid, Stencil::default())
}

/// Unweighted boundary distance d(x).
pub fn boundary_distance(grid: &Grid, stencil: Stencil) -> ScalarField {
    ScalarField(distance_with_node_weights(grid, &vec![1.0; grid.node_count()], stencil))
}

/// (φ̄, φ̲) = (d_g, −d_g).
pub fn obstacles(g: &BoundField, grid: &Grid) -> Result<(ScalarField, ScalarField)> {
    let d = weighted_distance(g, grid)?;
    let lower = d.values.scaled(-1.0);
    Ok((d.values, lower))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::violation;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_weight_on_interval() {
        let g = Grid::interval(-1.0, 1.0, 41).unwrap();
        let one = BoundField::constant(&g, 1.0).unwrap();
        let (up, lo) = obstacles(&one, &g).unwrap();
        for n in 0..g.node_count() {
            let x = g.node_coords(n)[0];
            assert_relative_eq!(up.0[n], 1.0 - x.abs(), epsilon = 1e-12);
            assert_eq!(lo.0[n], -up.0[n]);
        }
    }

    #[test]
    fn cubic_weight_reproduces_obstacle() {
        let g = Grid::interval(-1.0, 1.0, 401).unwrap();
        let b = BoundField::from_fn(&g, |x| 3.0 * x[0] * x[0]).unwrap();
        let d = weighted_distance(&b, &g).unwrap();
        let h = g.spacing()[0];
        for n in 0..g.node_count() {
            let x = g.node_coords(n)[0];
            assert!((d.values.0[n] - (1.0 - x.abs().powi(3))).abs() < 3.0 * h * h);
        }
        let mid = g.node_count() / 2;
        assert!((d.values.0[mid] - 1.0).abs() < 1e-4);
        // near-feasibility within the modulus of g over one cell
        let (excess, _) = violation(&d.values, &b, &g).unwrap();
        assert!(excess <= 6.0 * h, "{excess}");
    }

    #[test]
    fn square_center() {
        let g = Grid::unit_square(41).unwrap();
        let one = BoundField::constant(&g, 1.0).unwrap();
        let d = weighted_distance(&one, &g).unwrap();
        let c = g.node_count() / 2;
        assert_relative_eq!(d.values.0[c], 0.5, epsilon = 1e-12);
        for n in 0..g.node_count() {
            let exact = g.box_distance(g.node_coords(n));
            assert!((d.values.0[n] - exact).abs() < 0.05 * exact + 1e-12);
        }
        let d4 = weighted_distance_with(&one, &g, Stencil::Four).unwrap();
        assert_eq!(d4.stencil.order(), 4);
    }

    #[test]
    fn constant_weight_homogeneity_exact() {
        let g = Grid::unit_square(15).unwrap();
        let one = weighted_distance(&BoundField::constant(&g, 1.0).unwrap(), &g).unwrap();
        let k = weighted_distance(&BoundField::constant(&g, 2.5).unwrap(), &g).unwrap();
        for (a, b) in one.values.0.iter().zip(&k.values.0) {
            assert_relative_eq!(2.5 * a, *b, max_relative = 1e-14);
        }
    }

    #[test]
    fn rejects_bad_weights() {
        let g = Grid::interval(0.0, 1.0, 5).unwrap();
        let b = BoundField { values: vec![1.0, 0.0, 1.0, 1.0], nu: 1.0, floored: false };
        assert!(weighted_distance(&b, &g).is_err());
    }

    proptest! {
        #[test]
        fn triangle_inequality_and_monotonicity(seed in 0u64..200) {
            let g = Grid::unit_square(9).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w1: Vec<f64> = (0..g.cell_count()).map(|_| rng.gen_range(0.2..2.0)).collect();
            let w2: Vec<f64> = w1.iter().map(|v| v + rng.gen_range(0.0..1.0)).collect();
            let b1 = BoundField::new(w1, 0.2).unwrap();
            let b2 = BoundField::new(w2, 0.2).unwrap();
            let d1 = weighted_distance(&b1, &g).unwrap();
            let d2 = weighted_distance(&b2, &g).unwrap();
            for n in 0..g.node_count() {
                prop_assert!(d1.values.0[n] >= 0.0);
                prop_assert!(d1.values.0[n] <= d2.values.0[n] + 1e-14);
                if g.is_boundary(n) {
                    prop_assert_eq!(d1.values.0[n], 0.0);
                }
                for (m, len) in neighbours(&g, Stencil::Sixteen, n) {
                    let w = len * 0.5 * (d1.weights[n] + d1.weights[m]);
                    prop_assert!((d1.values.0[n] - d1.values.0[m]).abs() <= w * (1.0 + 1e-12));
                }
            }
        }
    }
}
