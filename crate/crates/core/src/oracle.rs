//! Explicit finite-volume solver for `d_t rho = laplace u(rho) + div(rho grad V)`
//! with Dirichlet data, used as an independent reference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{DiscreteMeasure, EnergyFunctional};
use crate::testfn::Bump;

fn default_cfl() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub t_end: f64,
    #[serde(default = "default_cfl")]
    pub cfl_safety: f64,
    /// Times at which the solution is recorded; `0` is always included.
    pub output_times: Vec<f64>,
}

impl OracleConfig {
    pub fn new(t_end: f64, output_times: Vec<f64>) -> Self {
        Self { t_end, cfl_safety: default_cfl(), output_times }
    }

    /// Outputs at `t_end * k / count` for `k = 0..=count`.
    pub fn uniform(t_end: f64, count: usize) -> Self {
        Self::new(t_end, (0..=count).map(|k| t_end * k as f64 / count as f64).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| Err(Error::Config { field: field.into(), message });
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return bad("oracle.t_end", format!("must be positive, got {}", self.t_end));
        }
        if !(self.cfl_safety > 0.0 && self.cfl_safety <= 1.0) {
            return bad("oracle.cfl_safety", format!("must lie in (0, 1], got {}", self.cfl_safety));
        }
        if let Some(t) = self.output_times.iter().find(|t| !(**t >= 0.0 && **t <= self.t_end)) {
            return bad("oracle.output_times", format!("{t} lies outside [0, t_end]"));
        }
        Ok(())
    }
}

/// Densities at increasing times.
#[derive(Clone, Debug)]
pub struct OracleSolution {
    pub times: Vec<f64>,
    pub densities: Vec<DiscreteMeasure>,
    /// Total mass removed by clipping negative values.
    pub clipped_mass: f64,
    pub steps: usize,
    /// Largest per-step mismatch between the mass change and the boundary flux.
    pub mass_balance_error: f64,
}

/// Precomputed face data for one grid.
struct Stencil {
    /// Interior faces `(left, right, axis, drift velocity along the axis)`.
    inner: Vec<(usize, usize, usize, f64)>,
    /// Boundary faces `(cell, outward sign, axis, boundary density, drift velocity)`.
    outer: Vec<(usize, f64, usize, f64, f64)>,
    h: Vec<f64>,
}

fn stencil(energy: &EnergyFunctional, grid: &crate::geometry::Grid) -> Stencil {
    let n = grid.n_per_axis();
    let dim = grid.dim();
    let mut inner = Vec::new();
    let mut outer = Vec::new();
    for cell in 0..grid.len() {
        let idx = grid.multi_index(cell);
        let x = grid.center(cell);
        for axis in 0..dim {
            let h = grid.width(axis);
            let mut face = x.to_vec();
            if idx[axis] + 1 < n {
                let mut j = idx.clone();
                j[axis] += 1;
                face[axis] += 0.5 * h;
                inner.push((cell, grid.index_of(&j), axis, energy.drift(&face)[axis]));
            } else {
                face[axis] = grid.domain().hi[axis];
                outer.push((cell, 1.0, axis, energy.boundary_density(&face), energy.drift(&face)[axis]));
            }
            if idx[axis] == 0 {
                let mut face = x.to_vec();
                face[axis] = grid.domain().lo[axis];
                outer.push((cell, -1.0, axis, energy.boundary_density(&face), energy.drift(&face)[axis]));
            }
        }
    }
    Stencil { inner, outer, h: (0..dim).map(|a| grid.width(a)).collect() }
}

/// Solve from `rho0` and record the solution at the configured output times.
///
/// Face fluxes are `-(u_R - u_L)/h` between cells and `-(u_b - u_i)/(h/2)` at
/// the boundary, with `u_b` the diffusion variable of the boundary density;
/// the drift flux `rho w` is upwinded with `w = -grad V` at the face.
pub fn oracle_solve(energy: &EnergyFunctional, config: &OracleConfig, rho0: &DiscreteMeasure) -> Result<OracleSolution> {
    config.validate()?;
    let grid = rho0.grid().clone();
    energy.validate_boundary_law(&grid)?;
    let st = stencil(energy, &grid);
    let dim = grid.dim() as f64;
    let vol = grid.cell_volume();
    let mut rho = rho0.density().to_vec();
    let max_boundary = st.outer.iter().map(|f| f.3).fold(0.0, f64::max);
    let guard = 1e3 * (rho0.max_density() + energy.lambda() + 1.0);
    let max_drift = st.inner.iter().map(|f| f.3.abs()).chain(st.outer.iter().map(|f| f.4.abs())).fold(0.0, f64::max);
    let h_min = st.h.iter().cloned().fold(f64::INFINITY, f64::min);

    let mut times: Vec<f64> = config.output_times.clone();
    times.push(0.0);
    times.sort_by(f64::total_cmp);
    times.dedup();
    let mut out_times = Vec::with_capacity(times.len());
    let mut out = Vec::with_capacity(times.len());
    let mut t = 0.0;
    let mut clipped = 0.0;
    let mut steps = 0usize;
    let mut balance = 0.0f64;
    let mut du = vec![0.0; rho.len()];
    for &target in &times {
        while t < target {
            let top = rho.iter().cloned().fold(max_boundary, f64::max);
            // Diffusivity is monotone in the density for every supported energy.
            let diff = energy.diffusivity(top).max(energy.diffusivity(1e-300)).max(1e-300);
            let mut dt = config.cfl_safety * h_min * h_min / (2.0 * dim * diff + h_min * max_drift + 1e-300);
            let mut last = false;
            if t + dt >= target {
                dt = target - t;
                last = true;
            }
            let u: Vec<f64> = rho.iter().map(|&r| energy.diffusion_variable(r)).collect();
            du.iter_mut().for_each(|v| *v = 0.0);
            for &(l, r, axis, w) in &st.inner {
                let h = st.h[axis];
                let up = if w > 0.0 { rho[l] } else { rho[r] };
                let flux = -(u[r] - u[l]) / h + up * w;
                du[l] -= flux / h;
                du[r] += flux / h;
            }
            let mut boundary_in = 0.0;
            for &(c, sign, axis, rb, w) in &st.outer {
                let h = st.h[axis];
                let ub = energy.diffusion_variable(rb);
                // Outward flux through the boundary face.
                let wn = sign * w;
                let up = if wn > 0.0 { rho[c] } else { rb };
                let flux_out = -(ub - u[c]) / (0.5 * h) + up * wn;
                du[c] -= flux_out / h;
                boundary_in -= flux_out * vol / h;
            }
            let before: f64 = rho.iter().sum::<f64>() * vol;
            for (r, d) in rho.iter_mut().zip(&du) {
                *r += dt * d;
            }
            let after: f64 = rho.iter().sum::<f64>() * vol;
            balance = balance.max((after - before - dt * boundary_in).abs());
            for r in rho.iter_mut() {
                if *r < 0.0 {
                    clipped -= *r * vol;
                    *r = 0.0;
                }
            }
            let top = rho.iter().cloned().fold(0.0, f64::max);
            if !(top <= guard) {
                return Err(Error::BlowUp { max: top, guard });
            }
            steps += 1;
            t = if last { target } else { t + dt };
        }
        out_times.push(target);
        out.push(DiscreteMeasure::new(grid.clone(), rho.clone())?);
    }
    Ok(OracleSolution { times: out_times, densities: out, clipped_mass: clipped, steps, mass_balance_error: balance })
}

/// Densities at times, read either as samples of a continuous-in-time
/// solution or as a piecewise-constant-in-time discrete solution.
#[derive(Clone, Debug)]
pub struct TimeSeries<'a> {
    pub times: Vec<f64>,
    pub densities: Vec<&'a DiscreteMeasure>,
    /// `rho(t) = densities[k]` for `t` in `(times[k-1], times[k]]`.
    pub piecewise_constant: bool,
}

impl<'a> TimeSeries<'a> {
    pub fn from_oracle(sol: &'a OracleSolution) -> Self {
        Self { times: sol.times.clone(), densities: sol.densities.iter().collect(), piecewise_constant: false }
    }

    pub fn from_trajectory(traj: &'a crate::jko::JkoTrajectory) -> Self {
        Self {
            times: (0..traj.steps.len()).map(|k| k as f64 * traj.tau).collect(),
            densities: traj.steps.iter().collect(),
            piecewise_constant: true,
        }
    }

    fn density_at(&self, t: f64) -> &'a DiscreteMeasure {
        // Last index with times[k] <= t, or the next one for the half-open convention.
        let k = self.times.partition_point(|&s| s < t - 1e-12 * t.abs().max(1.0));
        self.densities[k.min(self.densities.len() - 1)]
    }
}

/// `max_zeta | int rho(t2) zeta - int rho(t1) zeta - int_{t1}^{t2} int (u(rho) laplace zeta - rho grad V . grad zeta) |`.
///
/// The time integral is exact for piecewise-constant series and uses the
/// trapezoid rule over the stored times otherwise.
pub fn weak_residual(energy: &EnergyFunctional, series: &TimeSeries, basket: &[Bump], t1: f64, t2: f64) -> Result<f64> {
    if !(t1 < t2) || series.times.is_empty() {
        return Err(Error::InvalidArgument(format!("need t1 < t2, got {t1} and {t2}")));
    }
    let (first, last) = (series.times[0], *series.times.last().unwrap());
    let slack = 1e-12 * last.abs().max(1.0);
    if t1 < first - slack || t2 > last + slack {
        return Err(Error::InvalidArgument(format!("[{t1}, {t2}] outside the solved range [{first}, {last}]")));
    }
    let grid = series.densities[0].grid().clone();
    let mut worst = 0.0f64;
    for zeta in basket {
        let zint = zeta.cell_integrals(&grid);
        let lap = zeta.laplacian_cell_integrals(&grid);
        let drift_w: Vec<f64> = match &energy.potential {
            None => vec![0.0; grid.len()],
            Some(pot) => (0..grid.len())
                .map(|c| {
                    crate::quad::integrate_cell(&grid, c, &|x| {
                        let (gv, gz) = (pot.gradient(x), zeta.gradient(x));
                        (0..grid.dim()).map(|k| gv[k] * gz[k]).sum::<f64>()
                    })
                })
                .collect(),
        };
        let pair = |m: &DiscreteMeasure| -> f64 {
            m.density()
                .iter()
                .enumerate()
                .map(|(c, &r)| energy.diffusion_variable(r) * lap[c] - r * drift_w[c])
                .sum()
        };
        let mass = |m: &DiscreteMeasure| -> f64 { m.density().iter().zip(&zint).map(|(r, z)| r * z).sum() };
        let lhs = mass(series.density_at(t2)) - mass(series.density_at(t1));
        let mut rhs = 0.0;
        if series.piecewise_constant {
            for k in 1..series.times.len() {
                let (a, b) = (series.times[k - 1].max(t1), series.times[k].min(t2));
                if b > a {
                    rhs += (b - a) * pair(series.densities[k]);
                }
            }
        } else {
            let inside: Vec<usize> =
                (0..series.times.len()).filter(|&k| series.times[k] >= t1 - slack && series.times[k] <= t2 + slack).collect();
            for w in inside.windows(2) {
                let (a, b) = (w[0], w[1]);
                let dt = series.times[b] - series.times[a];
                rhs += 0.5 * dt * (pair(series.densities[a]) + pair(series.densities[b]));
            }
        }
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Grid;
    use crate::measures::Potential;
    use std::sync::Arc;

    fn unit(n: usize) -> Arc<Grid> {
        Arc::new(Grid::unit_interval(n).unwrap())
    }

    fn sine(n: usize) -> DiscreteMeasure {
        DiscreteMeasure::from_fn(unit(n), |x| 1.0 + 0.5 * (2.0 * std::f64::consts::PI * x[0]).sin()).unwrap()
    }

    #[test]
    fn steady_state_stays_put() {
        let e = EnergyFunctional::power(2.0, 1.0).unwrap();
        let mu = DiscreteMeasure::constant(unit(32), 1.0).unwrap();
        let sol = oracle_solve(&e, &OracleConfig::uniform(0.01, 4), &mu).unwrap();
        for d in &sol.densities {
            assert!(d.density().iter().all(|r| (r - 1.0).abs() < 1e-14));
        }
        let r = weak_residual(&e, &TimeSeries::from_oracle(&sol), &crate::testfn::basket(mu.grid().domain()), 0.0, 0.01)
            .unwrap();
        assert!(r < 1e-14);
    }

    #[test]
    fn finite_speed_of_propagation() {
        let e = EnergyFunctional::power(2.0, 0.0).unwrap();
        let mu = DiscreteMeasure::from_fn(unit(64), |x| if (0.4..0.6).contains(&x[0]) { 1.0 } else { 0.0 }).unwrap();
        let sol = oracle_solve(&e, &OracleConfig::uniform(0.002, 2), &mu).unwrap();
        let end = sol.densities.last().unwrap();
        assert_eq!(end.density()[0], 0.0);
        assert_eq!(end.density()[63], 0.0);
        assert!(end.density()[24] > 0.0);
    }

    #[test]
    fn comparison_principle_and_mass_balance() {
        let e = EnergyFunctional::power(2.0, 1.0).unwrap();
        let mu = sine(32);
        let sol = oracle_solve(&e, &OracleConfig::uniform(0.02, 10), &mu).unwrap();
        for d in &sol.densities {
            assert!(d.min_density() >= 0.5 - 1e-12 && d.max_density() <= 1.5 + 1e-12);
        }
        assert!(sol.mass_balance_error < 1e-10);
        assert_eq!(sol.clipped_mass, 0.0);
        let energies: Vec<f64> = sol.densities.iter().map(|d| e.evaluate_energy(d)).collect();
        assert!(energies.windows(2).all(|w| w[1] <= w[0] + 1e-14));
    }

    #[test]
    fn self_convergence_under_refinement() {
        let e = EnergyFunctional::power(2.0, 1.0).unwrap();
        let run = |n| oracle_solve(&e, &OracleConfig::new(0.05, vec![0.05]), &sine(n)).unwrap().densities.pop().unwrap();
        let (a, b, c) = (run(64), run(128), run(256));
        let d1 = a.l1_distance(&b.coarsen(a.grid().clone()).unwrap()).unwrap();
        let d2 = b.l1_distance(&c.coarsen(b.grid().clone()).unwrap()).unwrap();
        assert!(d1 >= 3.0 * d2, "{d1} {d2}");
    }

    #[test]
    fn weak_residual_shrinks_with_refinement() {
        let e = EnergyFunctional::power(2.0, 1.0).unwrap();
        let res = |n: usize, outputs: usize| {
            let mu = sine(n);
            let sol = oracle_solve(&e, &OracleConfig::uniform(0.02, outputs), &mu).unwrap();
            weak_residual(&e, &TimeSeries::from_oracle(&sol), &crate::testfn::basket(mu.grid().domain()), 0.0, 0.02)
                .unwrap()
        };
        let (r1, r2) = (res(32, 20), res(64, 40));
        assert!(r2 < r1, "{r1} {r2}");
    }

    #[test]
    fn drift_boundary_law_and_blow_up_guard() {
        let e = EnergyFunctional::power(2.0, 1.0).unwrap().with_potential(Potential::parse("x/2").unwrap());
        let mu = DiscreteMeasure::constant(unit(32), 1.0).unwrap();
        let sol = oracle_solve(&e, &OracleConfig::uniform(0.5, 1), &mu).unwrap();
        // Converges toward the stationary state with u'(rho) + V = 0: rho = 1 - x/4.
        let end = sol.densities.last().unwrap();
        for (x, r) in end.grid().centers().zip(end.density()) {
            assert!((r - (1.0 - x[0] / 4.0)).abs() < 5e-3, "{x:?} {r}");
        }
        let bad = OracleConfig { t_end: 1.0, cfl_safety: 2.0, output_times: vec![1.0] };
        assert!(matches!(oracle_solve(&e, &bad, &mu), Err(Error::Config { .. })));
    }
}
