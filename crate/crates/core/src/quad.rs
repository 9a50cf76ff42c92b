//! Gauss-Legendre quadrature over grid cells.

use crate::geometry::Grid;

const NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189_1,
    0.478_628_670_499_366_5,
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
];

/// Integral of `f` over `[a, b]` with 5-point Gauss-Legendre.
pub fn integrate(a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    NODES.iter().zip(WEIGHTS).map(|(t, w)| w * f(mid + half * t)).sum::<f64>() * half
}

/// Integral of `f` over one grid cell (tensor-product rule in 2D).
pub fn integrate_cell(grid: &Grid, cell: usize, f: &impl Fn(&[f64]) -> f64) -> f64 {
    match grid.dim() {
        1 => {
            let (a, b) = grid.cell_bounds(cell, 0);
            integrate(a, b, |x| f(&[x]))
        }
        _ => {
            let (a0, b0) = grid.cell_bounds(cell, 0);
            let (a1, b1) = grid.cell_bounds(cell, 1);
            integrate(a0, b0, |x| integrate(a1, b1, |y| f(&[x, y])))
        }
    }
}

/// Cell averages of `f` on every cell.
pub fn cell_averages(grid: &Grid, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let vol = grid.cell_volume();
    (0..grid.len()).map(|c| integrate_cell(grid, c, &f) / vol).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn exact_for_degree_nine() {
        let v = integrate(-1.0, 2.0, |x| x.powi(9) - 3.0 * x.powi(4) + 1.0);
        let exact = (2f64.powi(10) - 1.0) / 10.0 - 3.0 * (32.0 + 1.0) / 5.0 + 3.0;
        assert_abs_diff_eq!(v, exact, epsilon = 1e-11);
    }

    #[test]
    fn cell_averages_2d() {
        let g = crate::geometry::build_grid(2, &[(0.0, 1.0), (0.0, 2.0)], 4).unwrap();
        let avg = cell_averages(&g, |p| p[0] * p[1]);
        for (c, a) in avg.iter().enumerate() {
            let x = g.center(c);
            assert_abs_diff_eq!(*a, x[0] * x[1], epsilon = 1e-14);
        }
    }
}
