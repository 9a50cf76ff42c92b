//! Smooth compactly supported test functions for weak-form residuals.

use crate::geometry::{BoxDomain, Grid};
use crate::quad;

/// Largest value of `|d/dr (1 - r^2)^4|` on `[0, 1]`, attained at `r = 1/sqrt(7)`.
const BUMP_SLOPE_MAX: f64 = 1.904_15;

/// `(1 - |x - c|^2 / R^2)^4` inside the ball of radius `R` around `c`, zero outside.
#[derive(Clone, Debug, PartialEq)]
pub struct Bump {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl Bump {
    pub fn new(center: Vec<f64>, radius: f64) -> Self {
        Self { center, radius }
    }

    fn r2(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.center).map(|(a, c)| (a - c) * (a - c)).sum::<f64>() / (self.radius * self.radius)
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let q = 1.0 - self.r2(x);
        if q <= 0.0 {
            0.0
        } else {
            q.powi(4)
        }
    }

    pub fn gradient(&self, x: &[f64]) -> [f64; 2] {
        let q = 1.0 - self.r2(x);
        let mut g = [0.0; 2];
        if q > 0.0 {
            let f = -8.0 * q.powi(3) / (self.radius * self.radius);
            for (k, (a, c)) in x.iter().zip(&self.center).enumerate() {
                g[k] = f * (a - c);
            }
        }
        g
    }

    pub fn laplacian(&self, x: &[f64]) -> f64 {
        let r2 = self.r2(x);
        let q = 1.0 - r2;
        if q <= 0.0 {
            return 0.0;
        }
        let d = self.center.len() as f64;
        // phi(r) = q^4: phi'' + (d - 1) phi' / r with phi' = -8 r q^3.
        let second = -8.0 * q.powi(3) + 48.0 * r2 * q * q;
        let radial = -8.0 * (d - 1.0) * q.powi(3);
        (second + radial) / (self.radius * self.radius)
    }

    /// An upper bound for the Lipschitz constant.
    pub fn lipschitz(&self) -> f64 {
        BUMP_SLOPE_MAX / self.radius
    }

    /// Whether the support stays at least `margin` away from the boundary.
    pub fn inside(&self, domain: &BoxDomain, margin: f64) -> bool {
        domain.dist(&self.center) >= self.radius + margin
    }

    /// `int_cell zeta` for every cell.
    pub fn cell_integrals(&self, grid: &Grid) -> Vec<f64> {
        (0..grid.len()).map(|c| quad::integrate_cell(grid, c, &|x| self.value(x))).collect()
    }

    /// `int_cell laplace zeta` for every cell, as the outward normal flux of
    /// `grad zeta` through the cell faces. The face terms of neighbouring cells
    /// cancel, so the cell values sum to zero up to rounding.
    pub fn laplacian_cell_integrals(&self, grid: &Grid) -> Vec<f64> {
        (0..grid.len())
            .map(|c| match grid.dim() {
                1 => {
                    let (a, b) = grid.cell_bounds(c, 0);
                    self.gradient(&[b])[0] - self.gradient(&[a])[0]
                }
                _ => {
                    let (x0, x1) = grid.cell_bounds(c, 0);
                    let (y0, y1) = grid.cell_bounds(c, 1);
                    let fx = quad::integrate(y0, y1, |y| self.gradient(&[x1, y])[0] - self.gradient(&[x0, y])[0]);
                    let fy = quad::integrate(x0, x1, |x| self.gradient(&[x, y1])[1] - self.gradient(&[x, y0])[1]);
                    fx + fy
                }
            })
            .collect()
    }
}

/// Five bumps with supports inside the domain, spread over it.
pub fn basket(domain: &BoxDomain) -> Vec<Bump> {
    let lerp = |t: &[f64]| -> Vec<f64> {
        t.iter().zip(domain.lo.iter().zip(&domain.hi)).map(|(t, (lo, hi))| lo + t * (hi - lo)).collect()
    };
    let width = domain.lo.iter().zip(&domain.hi).map(|(a, b)| b - a).fold(f64::INFINITY, f64::min);
    match domain.dim() {
        1 => [(0.3, 0.2), (0.5, 0.3), (0.7, 0.2), (0.4, 0.25), (0.6, 0.15)]
            .iter()
            .map(|&(c, r)| Bump::new(lerp(&[c]), r * width))
            .collect(),
        _ => [([0.5, 0.5], 0.3), ([0.3, 0.3], 0.2), ([0.7, 0.3], 0.2), ([0.3, 0.7], 0.2), ([0.6, 0.6], 0.25)]
            .iter()
            .map(|(c, r)| Bump::new(lerp(c), r * width))
            .collect(),
    }
}
