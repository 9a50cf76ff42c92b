//! Axis-aligned box domains, cell-centered grids and the boundary distance field.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An open axis-aligned box `(lo_0, hi_0) x ... x (lo_{d-1}, hi_{d-1})`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() || lo.len() > 2 {
            return Err(Error::InvalidGrid(format!(
                "box bounds must have matching dimension 1 or 2, got {} and {}",
                lo.len(),
                hi.len()
            )));
        }
        for (axis, (a, b)) in lo.iter().zip(&hi).enumerate() {
            if !(a.is_finite() && b.is_finite() && b > a) {
                return Err(Error::InvalidGrid(format!(
                    "nonpositive extent on axis {axis}: ({a}, {b})"
                )));
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn unit(dim: usize) -> Self {
        Self { lo: vec![0.0; dim], hi: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    pub fn diam(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| (b - a) * (b - a))
            .sum::<f64>()
            .sqrt()
    }

    /// Inradius `r_Omega`: the smallest `r` with `S_r = Omega`.
    pub fn inradius(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| 0.5 * (b - a))
            .fold(f64::INFINITY, f64::min)
    }

    /// Distance from `x` to the boundary of the box; `x` is assumed inside.
    pub fn dist(&self, x: &[f64]) -> f64 {
        let (axis, lo_side) = self.nearest_face(x);
        if lo_side {
            x[axis] - self.lo[axis]
        } else {
            self.hi[axis] - x[axis]
        }
    }

    /// A nearest boundary point: one coordinate clamped to the closest face.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let (axis, lo_side) = self.nearest_face(x);
        let mut p = x.to_vec();
        p[axis] = if lo_side { self.lo[axis] } else { self.hi[axis] };
        p
    }

    /// Axis and side of the closest face; ties resolve to the lowest axis, then the low side.
    fn nearest_face(&self, x: &[f64]) -> (usize, bool) {
        let mut best = (0, true);
        let mut best_d = f64::INFINITY;
        for axis in 0..self.dim() {
            let dl = x[axis] - self.lo[axis];
            let dh = self.hi[axis] - x[axis];
            if dl < best_d {
                best_d = dl;
                best = (axis, true);
            }
            if dh < best_d {
                best_d = dh;
                best = (axis, false);
            }
        }
        best
    }
}

/// Uniform cell-centered grid on a box. Cells are ordered lexicographically by
/// axis index, the first axis being the slowest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    domain: BoxDomain,
    n_per_axis: usize,
    widths: Vec<f64>,
    centers: Vec<f64>,
}

impl Grid {
    pub fn new(domain: BoxDomain, n_per_axis: usize) -> Result<Self> {
        if n_per_axis < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2 cells per axis, got {n_per_axis}"
            )));
        }
        let dim = domain.dim();
        let widths: Vec<f64> = (0..dim)
            .map(|a| (domain.hi[a] - domain.lo[a]) / n_per_axis as f64)
            .collect();
        let n_cells = n_per_axis.pow(dim as u32);
        let mut centers = Vec::with_capacity(n_cells * dim);
        for cell in 0..n_cells {
            let idx = multi_index(cell, n_per_axis, dim);
            for a in 0..dim {
                centers.push(domain.lo[a] + (idx[a] as f64 + 0.5) * widths[a]);
            }
        }
        Ok(Self { domain, n_per_axis, widths, centers })
    }

    pub fn unit_interval(n: usize) -> Result<Self> {
        Self::new(BoxDomain::unit(1), n)
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn n_per_axis(&self) -> usize {
        self.n_per_axis
    }

    pub fn len(&self) -> usize {
        self.centers.len() / self.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn width(&self, axis: usize) -> f64 {
        self.widths[axis]
    }

    /// Largest cell width; the mesh size used in discretization allowances.
    pub fn h(&self) -> f64 {
        self.widths.iter().cloned().fold(0.0, f64::max)
    }

    pub fn cell_volume(&self) -> f64 {
        self.widths.iter().product()
    }

    pub fn center(&self, cell: usize) -> &[f64] {
        let d = self.dim();
        &self.centers[cell * d..(cell + 1) * d]
    }

    pub fn centers(&self) -> impl Iterator<Item = &[f64]> {
        self.centers.chunks(self.dim())
    }

    pub fn index_of(&self, idx: &[usize]) -> usize {
        idx.iter().fold(0, |acc, &i| acc * self.n_per_axis + i)
    }

    pub fn multi_index(&self, cell: usize) -> Vec<usize> {
        multi_index(cell, self.n_per_axis, self.dim())
    }

    /// Lower and upper cell bounds along `axis`.
    pub fn cell_bounds(&self, cell: usize, axis: usize) -> (f64, f64) {
        let c = self.center(cell)[axis];
        let half = 0.5 * self.widths[axis];
        (c - half, c + half)
    }
}

fn multi_index(mut cell: usize, n: usize, dim: usize) -> Vec<usize> {
    let mut idx = vec![0; dim];
    for a in (0..dim).rev() {
        idx[a] = cell % n;
        cell /= n;
    }
    idx
}

pub fn build_grid(dim: usize, extent: &[(f64, f64)], n_per_axis: usize) -> Result<Grid> {
    if !(1..=2).contains(&dim) || extent.len() != dim {
        return Err(Error::InvalidGrid(format!(
            "dimension must be 1 or 2 with one extent per axis (dim {dim}, {} extents)",
            extent.len()
        )));
    }
    let domain = BoxDomain::new(
        extent.iter().map(|e| e.0).collect(),
        extent.iter().map(|e| e.1).collect(),
    )?;
    Grid::new(domain, n_per_axis)
}

/// Per-cell distance to the boundary and nearest boundary point.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryGeometry {
    pub dist: Vec<f64>,
    pub proj: Vec<Vec<f64>>,
    pub diam: f64,
}

pub fn boundary_geometry(grid: &Grid) -> BoundaryGeometry {
    let dom = grid.domain();
    BoundaryGeometry {
        dist: grid.centers().map(|x| dom.dist(x)).collect(),
        proj: grid.centers().map(|x| dom.project(x)).collect(),
        diam: dom.diam(),
    }
}

/// Indices of cells whose center lies in `S_r = {d(x, boundary) < r}`.
pub fn boundary_band(grid: &Grid, r: f64) -> Result<Vec<usize>> {
    if !(r > 0.0) {
        return Err(Error::InvalidArgument(format!("band radius must be positive, got {r}")));
    }
    let dom = grid.domain();
    Ok(grid
        .centers()
        .enumerate()
        .filter(|(_, x)| dom.dist(x) < r)
        .map(|(i, _)| i)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn unit_interval_centers() {
        let g = build_grid(1, &[(0.0, 1.0)], 4).unwrap();
        let c: Vec<f64> = g.centers().map(|x| x[0]).collect();
        assert_eq!(c, vec![0.125, 0.375, 0.625, 0.875]);
        assert_eq!(g.h(), 0.25);
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(build_grid(1, &[(0.0, 1.0)], 1).is_err());
        assert!(build_grid(1, &[(1.0, 1.0)], 4).is_err());
        assert!(build_grid(3, &[(0.0, 1.0); 3], 4).is_err());
    }

    #[test]
    fn square_grid_volume() {
        let g = build_grid(2, &[(0.0, 1.0), (0.0, 1.0)], 3).unwrap();
        assert_eq!(g.len(), 9);
        assert_abs_diff_eq!(g.cell_volume(), 1.0 / 9.0, epsilon = 1e-15);
        assert_eq!(g.index_of(&[1, 2]), 5);
        assert_eq!(g.multi_index(5), vec![1, 2]);
    }

    #[test]
    fn distances_and_projections() {
        let g = Grid::unit_interval(4).unwrap();
        let bg = boundary_geometry(&g);
        assert_eq!(bg.dist, vec![0.125, 0.375, 0.375, 0.125]);
        assert_eq!(bg.proj[0], vec![0.0]);
        assert_eq!(bg.proj[3], vec![1.0]);

        let g2 = build_grid(2, &[(0.0, 1.0), (0.0, 1.0)], 3).unwrap();
        let dom = g2.domain();
        let x = [0.5 / 3.0, 0.5];
        assert_abs_diff_eq!(dom.dist(&x), 1.0 / 6.0, epsilon = 1e-15);
        assert_eq!(dom.project(&x), vec![0.0, 0.5]);
    }

    #[test]
    fn bands() {
        let g = Grid::unit_interval(4).unwrap();
        assert_eq!(boundary_band(&g, 0.2).unwrap(), vec![0, 3]);
        assert_eq!(boundary_band(&g, 1.0).unwrap(), vec![0, 1, 2, 3]);
        assert!(boundary_band(&g, 0.05).unwrap().is_empty());
        assert!(boundary_band(&g, 0.0).is_err());
        // r >= r_Omega covers everything
        assert_eq!(boundary_band(&g, g.domain().inradius() + 1e-12).unwrap().len(), 4);
    }

    fn brute_force_dist(dom: &BoxDomain, x: &[f64]) -> f64 {
        let mut best = f64::INFINITY;
        for axis in 0..dom.dim() {
            for face in [dom.lo[axis], dom.hi[axis]] {
                let mut b = x.to_vec();
                b[axis] = face;
                let d = x.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
                best = best.min(d);
            }
        }
        best
    }

    proptest! {
        #[test]
        fn grid_invariants(dim in 1usize..=2, n in 2usize..24, a in -2.0f64..2.0, len in 0.1f64..3.0) {
            let extent = vec![(a, a + len); dim];
            let g = build_grid(dim, &extent, n).unwrap();
            let dom = g.domain();
            let bg = boundary_geometry(&g);
            let total = g.cell_volume() * g.len() as f64;
            prop_assert!((total - dom.volume()).abs() <= 1e-12 * dom.volume());
            for (i, x) in g.centers().enumerate() {
                prop_assert!(bg.dist[i] >= 0.5 * g.h() - 1e-12);
                prop_assert!((bg.dist[i] - brute_force_dist(dom, x)).abs() < 1e-12);
                let p = &bg.proj[i];
                let pd = x.iter().zip(p).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
                prop_assert!((pd - bg.dist[i]).abs() < 1e-12);
                prop_assert!(bg.dist[i] <= bg.diam / 2.0 + 1e-12);
                let on_face = (0..dim).any(|ax| p[ax] == dom.lo[ax] || p[ax] == dom.hi[ax]);
                prop_assert!(on_face);
            }
        }

        #[test]
        fn bands_are_nested(n in 2usize..40, r1 in 0.001f64..0.6, dr in 0.0f64..0.5) {
            let g = Grid::unit_interval(n).unwrap();
            let b1 = boundary_band(&g, r1).unwrap();
            let b2 = boundary_band(&g, r1 + dr).unwrap();
            prop_assert!(b1.iter().all(|i| b2.contains(i)));
        }
    }
}
