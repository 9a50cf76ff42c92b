//! Grid densities, the internal energy and its variants, and density perturbations.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::geometry::Grid;
use crate::quad;

/// Nonnegative piecewise-constant density on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteMeasure {
    grid: Arc<Grid>,
    density: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(grid: Arc<Grid>, density: Vec<f64>) -> Result<Self> {
        if density.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} density values for {} cells",
                density.len(),
                grid.len()
            )));
        }
        if let Some((index, &value)) =
            density.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(Error::NegativeValue { index, value });
        }
        Ok(Self { grid, density })
    }

    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let density = grid.centers().map(&f).collect();
        Self::new(grid, density)
    }

    pub fn constant(grid: Arc<Grid>, value: f64) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, vec![value; n])
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn into_density(self) -> Vec<f64> {
        self.density
    }

    pub fn len(&self) -> usize {
        self.density.len()
    }

    pub fn is_empty(&self) -> bool {
        self.density.is_empty()
    }

    pub fn masses(&self) -> Vec<f64> {
        let vol = self.grid.cell_volume();
        self.density.iter().map(|r| r * vol).collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.grid.cell_volume()
    }

    /// `sum_i d(x_i, boundary)^2 * mass_i`.
    pub fn boundary_moment(&self) -> f64 {
        let dom = self.grid.domain();
        let vol = self.grid.cell_volume();
        self.grid
            .centers()
            .zip(&self.density)
            .map(|(x, r)| dom.dist(x).powi(2) * r * vol)
            .sum()
    }

    pub fn same_grid(&self, other: &DiscreteMeasure) -> bool {
        Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid
    }

    /// `int |rho - sigma| dx` for densities on the same grid.
    pub fn l1_distance(&self, other: &DiscreteMeasure) -> Result<f64> {
        if !self.same_grid(other) {
            return Err(Error::GridMismatch("l1 distance needs a common grid".into()));
        }
        Ok(self.density.iter().zip(&other.density).map(|(a, b)| (a - b).abs()).sum::<f64>()
            * self.grid.cell_volume())
    }

    /// `int rho^p dx`.
    pub fn lp_norm_pow(&self, p: f64) -> f64 {
        self.density.iter().map(|r| r.powf(p)).sum::<f64>() * self.grid.cell_volume()
    }

    pub fn max_density(&self) -> f64 {
        self.density.iter().cloned().fold(0.0, f64::max)
    }

    pub fn min_density(&self) -> f64 {
        self.density.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Cell averages onto `coarse`, whose cells must be unions of cells of this grid.
    pub fn coarsen(&self, coarse: Arc<Grid>) -> Result<DiscreteMeasure> {
        let (n, m) = (self.grid.n_per_axis(), coarse.n_per_axis());
        if coarse.domain() != self.grid.domain() || m == 0 || n % m != 0 {
            return Err(Error::GridMismatch(format!("cannot coarsen {n} cells per axis to {m}")));
        }
        let ratio = n / m;
        let mut sum = vec![0.0; coarse.len()];
        for (cell, r) in self.density.iter().enumerate() {
            let idx: Vec<usize> = self.grid.multi_index(cell).iter().map(|i| i / ratio).collect();
            sum[coarse.index_of(&idx)] += r;
        }
        let k = ratio.pow(self.grid.dim() as u32) as f64;
        Self::new(coarse, sum.into_iter().map(|s| s / k).collect())
    }
}

/// `int |a - b| dx` between two 1D piecewise-constant densities on nested or
/// unrelated grids over the same interval, computed on the common refinement.
pub fn l1_distance_1d(a: &DiscreteMeasure, b: &DiscreteMeasure) -> Result<f64> {
    let (ga, gb) = (a.grid(), b.grid());
    if ga.dim() != 1 || gb.dim() != 1 || ga.domain() != gb.domain() {
        return Err(Error::GridMismatch("cross-grid l1 needs 1D grids on one interval".into()));
    }
    let faces = |g: &Grid| -> Vec<f64> {
        let mut f: Vec<f64> = (0..g.len()).map(|c| g.cell_bounds(c, 0).0).collect();
        f.push(g.domain().hi[0]);
        f
    };
    let (fa, fb) = (faces(ga), faces(gb));
    let (mut i, mut j) = (0, 0);
    let mut x = ga.domain().lo[0];
    let mut total = 0.0;
    while i < a.len() && j < b.len() {
        let next = fa[i + 1].min(fb[j + 1]);
        total += (a.density[i] - b.density[j]).abs() * (next - x);
        x = next;
        if fa[i + 1] <= next {
            i += 1;
        }
        if fb[j + 1] <= next {
            j += 1;
        }
    }
    Ok(total)
}

/// The internal energy density.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum Internal {
    /// `(s^alpha - alpha lambda^{alpha-1} s)/(alpha-1) + lambda^alpha`.
    Power { alpha: f64, lambda: f64 },
    /// `s log(s/lambda) - s + lambda`.
    Entropy { lambda: f64 },
}

impl Internal {
    pub fn lambda(&self) -> f64 {
        match *self {
            Internal::Power { lambda, .. } | Internal::Entropy { lambda } => lambda,
        }
    }

    /// Exponent of the diffusion variable `u = rho^alpha`; 1 for the entropy.
    pub fn alpha(&self) -> f64 {
        match *self {
            Internal::Power { alpha, .. } => alpha,
            Internal::Entropy { .. } => 1.0,
        }
    }
}

/// Smooth external potential `V`, given as a coordinate expression.
#[derive(Clone, Debug, PartialEq)]
pub struct Potential {
    expr: Expr,
}

impl Potential {
    pub fn new(expr: Expr) -> Self {
        Self { expr }
    }

    pub fn parse(src: &str) -> Result<Self> {
        Ok(Self::new(Expr::parse(src)?))
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.expr.eval(x)
    }

    pub fn gradient(&self, x: &[f64]) -> [f64; 2] {
        self.expr.eval_dual(x).d
    }

    pub fn cell_averages(&self, grid: &Grid) -> Vec<f64> {
        quad::cell_averages(grid, |x| self.value(x))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyFunctional {
    pub internal: Internal,
    pub potential: Option<Potential>,
}

impl EnergyFunctional {
    pub fn power(alpha: f64, lambda: f64) -> Result<Self> {
        Self::new(Internal::Power { alpha, lambda }, None)
    }

    pub fn entropy(lambda: f64) -> Result<Self> {
        Self::new(Internal::Entropy { lambda }, None)
    }

    pub fn new(internal: Internal, potential: Option<Potential>) -> Result<Self> {
        match internal {
            Internal::Power { alpha, lambda } => {
                if !(alpha > 1.0 && alpha.is_finite()) {
                    return Err(Error::InvalidArgument(format!("alpha must exceed 1, got {alpha}")));
                }
                if !(lambda >= 0.0 && lambda.is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "lambda must be nonnegative, got {lambda}"
                    )));
                }
            }
            Internal::Entropy { lambda } => {
                if !(lambda > 0.0 && lambda.is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "entropy needs positive lambda, got {lambda}"
                    )));
                }
            }
        }
        Ok(Self { internal, potential })
    }

    pub fn with_potential(mut self, potential: Potential) -> Self {
        self.potential = Some(potential);
        self
    }

    pub fn lambda(&self) -> f64 {
        self.internal.lambda()
    }

    pub fn alpha(&self) -> f64 {
        self.internal.alpha()
    }

    /// Checks that the boundary law `U'(rho) + V = 0` has a nonnegative
    /// solution on the whole boundary (sampled along every face).
    pub fn validate_boundary_law(&self, grid: &Grid) -> Result<()> {
        let (Some(pot), Internal::Power { alpha, lambda }) = (&self.potential, self.internal) else {
            return Ok(());
        };
        for x in boundary_samples(grid) {
            let v = pot.value(&x);
            let w = lambda.powf(alpha - 1.0) - (alpha - 1.0) / alpha * v;
            if !(w >= -1e-12) {
                return Err(Error::InvalidArgument(format!(
                    "boundary law lambda^(alpha-1) - (alpha-1)/alpha V = {w} < 0 at {x:?}"
                )));
            }
        }
        Ok(())
    }

    /// Internal energy density `U(s)`.
    pub fn u(&self, s: f64) -> Result<f64> {
        if !(s >= 0.0) {
            return Err(Error::InvalidArgument(format!("U needs s >= 0, got {s}")));
        }
        Ok(self.u_unchecked(s))
    }

    pub(crate) fn u_unchecked(&self, s: f64) -> f64 {
        match self.internal {
            Internal::Power { alpha, lambda } => {
                (s.powf(alpha) - alpha * lambda.powf(alpha - 1.0) * s) / (alpha - 1.0)
                    + lambda.powf(alpha)
            }
            Internal::Entropy { lambda } => {
                if s == 0.0 {
                    lambda
                } else {
                    s * (s / lambda).ln() - s + lambda
                }
            }
        }
    }

    /// `U'(s)`; `-inf` at zero for the entropy.
    pub fn u_prime(&self, s: f64) -> f64 {
        match self.internal {
            Internal::Power { alpha, lambda } => {
                alpha / (alpha - 1.0) * (s.powf(alpha - 1.0) - lambda.powf(alpha - 1.0))
            }
            Internal::Entropy { lambda } => (s / lambda).ln(),
        }
    }

    pub fn u_second(&self, s: f64) -> f64 {
        match self.internal {
            Internal::Power { alpha, .. } => alpha * s.powf(alpha - 2.0),
            Internal::Entropy { .. } => 1.0 / s,
        }
    }

    /// The smallest `s >= 0` with `U'(s) >= p`.
    pub fn u_prime_inverse(&self, p: f64) -> f64 {
        match self.internal {
            Internal::Power { alpha, lambda } => {
                let w = lambda.powf(alpha - 1.0) + (alpha - 1.0) / alpha * p;
                if w <= 0.0 {
                    0.0
                } else {
                    w.powf(1.0 / (alpha - 1.0))
                }
            }
            Internal::Entropy { lambda } => lambda * p.exp(),
        }
    }

    /// Diffusion variable `u(s)` with `div(rho grad U'(rho)) = laplace u(rho)`.
    pub fn diffusion_variable(&self, s: f64) -> f64 {
        match self.internal {
            Internal::Power { alpha, .. } => s.powf(alpha),
            Internal::Entropy { .. } => s,
        }
    }

    /// `du/ds`, the nonlinear diffusivity.
    pub fn diffusivity(&self, s: f64) -> f64 {
        match self.internal {
            Internal::Power { alpha, .. } => alpha * s.powf(alpha - 1.0),
            Internal::Entropy { .. } => 1.0,
        }
    }

    /// Boundary density at a boundary point: `lambda`, or the solution of
    /// `U'(rho) + V(x) = 0` when a potential is present.
    pub fn boundary_density(&self, x: &[f64]) -> f64 {
        match &self.potential {
            None => self.lambda(),
            Some(p) => self.u_prime_inverse(-p.value(x)),
        }
    }

    pub fn evaluate_u(&self, s: f64) -> Result<f64> {
        self.u(s)
    }

    /// `sum_i U(rho_i) vol + sum_i Vbar_i rho_i vol`.
    pub fn evaluate_energy(&self, measure: &DiscreteMeasure) -> f64 {
        let vol = measure.grid().cell_volume();
        let internal: f64 = measure.density().iter().map(|&r| self.u_unchecked(r)).sum::<f64>() * vol;
        match &self.potential {
            None => internal,
            Some(p) => {
                let v = p.cell_averages(measure.grid());
                internal + v.iter().zip(measure.density()).map(|(v, r)| v * r).sum::<f64>() * vol
            }
        }
    }

    /// Internal energy only, ignoring any potential.
    pub fn internal_energy(&self, measure: &DiscreteMeasure) -> f64 {
        measure.density().iter().map(|&r| self.u_unchecked(r)).sum::<f64>()
            * measure.grid().cell_volume()
    }

    /// A constant `m_inf` with `int rho^alpha <= m_inf` and `int rho <= m_inf`
    /// for every density whose internal energy is at most `e0`.
    pub fn mass_bound(&self, e0: f64, domain_volume: f64) -> f64 {
        let e0 = e0.max(0.0);
        match self.internal {
            Internal::Power { alpha, lambda } => {
                let la = if lambda == 0.0 {
                    (alpha - 1.0) * e0
                } else {
                    // Young: s <= eps s^alpha + c(eps) with eps = 1/(2 alpha lambda^(alpha-1)).
                    let s0 = 2f64.powf(1.0 / (alpha - 1.0)) * lambda;
                    let c = s0 * (alpha - 1.0) / alpha;
                    let raw = (alpha - 1.0) * (e0 - domain_volume * lambda.powf(alpha))
                        + alpha * lambda.powf(alpha - 1.0) * c * domain_volume;
                    (2.0 * raw).max(0.0)
                };
                let l1 = domain_volume.powf(1.0 - 1.0 / alpha) * la.powf(1.0 / alpha);
                la.max(l1)
            }
            Internal::Entropy { lambda } => {
                // U(s) >= s once s >= e^2 lambda.
                e0 + std::f64::consts::E.powi(2) * lambda * domain_volume
            }
        }
    }

    /// Discrete `int |grad u(rho)|^2 / rho dx`, a lower bound for the squared slope.
    ///
    /// Centered differences in the interior; at boundary-adjacent cells the
    /// difference reaches the face value of `u` given by the boundary law.
    /// Cells with zero density contribute 0 if the local difference vanishes
    /// and make the result infinite otherwise.
    pub fn slope_lower_bound(&self, measure: &DiscreteMeasure) -> f64 {
        slope_terms(self, measure).into_iter().sum::<f64>() * measure.grid().cell_volume()
    }

    /// Per-cell `|D u|^2` values; see [`EnergyFunctional::slope_lower_bound`].
    pub fn diffusion_gradient_sq(&self, measure: &DiscreteMeasure) -> Vec<f64> {
        self.diffusion_gradient(measure).iter().map(|g| g.iter().map(|d| d * d).sum()).collect()
    }

    /// Discrete `int |grad u(rho) + rho grad V|^2 / rho dx`, the squared
    /// `L2(rho)` norm of the velocity `-grad u / rho - grad V`. Equal to
    /// [`EnergyFunctional::slope_lower_bound`] without a potential.
    pub fn velocity_norm_sq(&self, measure: &DiscreteMeasure) -> f64 {
        let Some(p) = &self.potential else {
            return self.slope_lower_bound(measure);
        };
        let grid = measure.grid();
        let total: f64 = self
            .diffusion_gradient(measure)
            .iter()
            .zip(measure.density())
            .enumerate()
            .map(|(cell, (g, &r))| {
                let dv = p.gradient(grid.center(cell));
                let f2: f64 = g.iter().enumerate().map(|(a, d)| (d + r * dv[a]).powi(2)).sum();
                if r > 0.0 {
                    f2 / r
                } else if f2 == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .sum();
        total * grid.cell_volume()
    }

    /// Per-cell discrete gradient of `u(rho)`, one entry per axis.
    pub fn diffusion_gradient(&self, measure: &DiscreteMeasure) -> Vec<Vec<f64>> {
        let grid = measure.grid();
        let u: Vec<f64> = measure.density().iter().map(|&r| self.diffusion_variable(r)).collect();
        let n = grid.n_per_axis();
        (0..grid.len())
            .map(|cell| {
                let idx = grid.multi_index(cell);
                let x = grid.center(cell);
                let mut g = Vec::with_capacity(grid.dim());
                for axis in 0..grid.dim() {
                    let h = grid.width(axis);
                    let neighbor = |offset: isize| -> (f64, f64) {
                        let k = idx[axis] as isize + offset;
                        if k < 0 || k >= n as isize {
                            let mut face = x.to_vec();
                            face[axis] = if k < 0 {
                                grid.domain().lo[axis]
                            } else {
                                grid.domain().hi[axis]
                            };
                            (self.diffusion_variable(self.boundary_density(&face)), 0.5 * h)
                        } else {
                            let mut j = idx.clone();
                            j[axis] = k as usize;
                            (u[grid.index_of(&j)], h)
                        }
                    };
                    let (up, dp) = neighbor(1);
                    let (um, dm) = neighbor(-1);
                    g.push((up - um) / (dp + dm));
                }
                g
            })
            .collect()
    }

    /// Drift velocity `-grad V` sampled at a point; zero without a potential.
    pub fn drift(&self, x: &[f64]) -> [f64; 2] {
        match &self.potential {
            None => [0.0; 2],
            Some(p) => {
                let g = p.gradient(x);
                [-g[0], -g[1]]
            }
        }
    }
}

fn slope_terms(energy: &EnergyFunctional, measure: &DiscreteMeasure) -> Vec<f64> {
    energy
        .diffusion_gradient_sq(measure)
        .into_iter()
        .zip(measure.density())
        .map(|(g2, &r)| {
            if r > 0.0 {
                g2 / r
            } else if g2 == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .collect()
}

/// Points on the boundary of the grid's box used to validate boundary data.
fn boundary_samples(grid: &Grid) -> Vec<Vec<f64>> {
    let dom = grid.domain();
    match grid.dim() {
        1 => vec![vec![dom.lo[0]], vec![dom.hi[0]]],
        _ => {
            let m = 4 * grid.n_per_axis();
            let mut out = Vec::new();
            for k in 0..=m {
                let t = k as f64 / m as f64;
                let x = dom.lo[0] + t * (dom.hi[0] - dom.lo[0]);
                let y = dom.lo[1] + t * (dom.hi[1] - dom.lo[1]);
                out.push(vec![x, dom.lo[1]]);
                out.push(vec![x, dom.hi[1]]);
                out.push(vec![dom.lo[0], y]);
                out.push(vec![dom.hi[0], y]);
            }
            out
        }
    }
}

/// Velocity perturbation `Phi` on an interval with its derivative.
pub trait Perturbation {
    fn value(&self, x: f64) -> f64;
    fn derivative(&self, x: f64) -> f64;
}

/// Smooth bump `amplitude * (1 - ((x - c)/w)^2)^4` supported on `(c - w, c + w)`.
#[derive(Clone, Copy, Debug)]
pub struct BumpField {
    pub center: f64,
    pub width: f64,
    pub amplitude: f64,
}

impl Perturbation for BumpField {
    fn value(&self, x: f64) -> f64 {
        let r = (x - self.center) / self.width;
        if r.abs() >= 1.0 {
            0.0
        } else {
            self.amplitude * (1.0 - r * r).powi(4)
        }
    }

    fn derivative(&self, x: f64) -> f64 {
        let r = (x - self.center) / self.width;
        if r.abs() >= 1.0 {
            0.0
        } else {
            self.amplitude * 4.0 * (1.0 - r * r).powi(3) * (-2.0 * r) / self.width
        }
    }
}

/// Push `measure` forward by `x -> x + t Phi(x)` and resample onto the same grid
/// by exact intersection of preimage intervals with cells. 1D only.
pub fn pushforward_perturb(
    measure: &DiscreteMeasure,
    phi: &dyn Perturbation,
    t: f64,
) -> Result<DiscreteMeasure> {
    let grid = measure.grid();
    if grid.dim() != 1 {
        return Err(Error::InvalidArgument("pushforward perturbation is 1D only".into()));
    }
    let (a, b) = (grid.domain().lo[0], grid.domain().hi[0]);
    let n = grid.len();
    let h = grid.width(0);
    let samples = 64 * n;
    let mut max_dphi = 0.0f64;
    for k in 0..=samples {
        let x = a + (b - a) * k as f64 / samples as f64;
        max_dphi = max_dphi.max(phi.derivative(x).abs());
    }
    if t.abs() * max_dphi >= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "|t| max|Phi'| = {} must be below 1",
            t.abs() * max_dphi
        )));
    }
    for k in 0..=16 {
        let s = h * k as f64 / 16.0;
        if phi.value(a + s) != 0.0 || phi.value(b - s) != 0.0 {
            return Err(Error::InvalidArgument(
                "perturbation must vanish on the boundary cells".into(),
            ));
        }
    }
    if t == 0.0 {
        return Ok(measure.clone());
    }
    let map = |x: f64| x + t * phi.value(x);
    // Preimage of a point under the increasing map x + t Phi(x).
    let preimage = |y: f64| -> f64 {
        let (mut lo, mut hi) = (a, b);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if map(mid) < y {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-16 * (1.0 + hi.abs()) {
                break;
            }
        }
        0.5 * (lo + hi)
    };
    let faces: Vec<f64> = (0..=n).map(|k| if k == n { b } else { grid.cell_bounds(k, 0).0 }).collect();
    let pre: Vec<f64> = faces
        .iter()
        .enumerate()
        .map(|(k, &y)| if k == 0 || k == n { y } else { preimage(y) })
        .collect();
    let rho = measure.density();
    let mut out = vec![0.0; n];
    for j in 0..n {
        let (lo, hi) = (pre[j], pre[j + 1]);
        let mut mass = 0.0;
        for i in 0..n {
            let overlap = hi.min(faces[i + 1]) - lo.max(faces[i]);
            if overlap > 0.0 {
                mass += rho[i] * overlap;
            }
        }
        out[j] = mass / h;
    }
    DiscreteMeasure::new(grid.clone(), out)
}
