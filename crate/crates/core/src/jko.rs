//! The minimizing-movement scheme
//! `rho_k = argmin E(rho) + Wb2^2(rho_{k-1}, rho) / (2 tau)` over grid densities.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Grid;
use crate::measures::{DiscreteMeasure, EnergyFunctional, Internal};
use crate::testfn::Bump;
use crate::wb2::entropic::GibbsKernel;
use crate::wb2::{self, LineMeasure, TransportModel, TransportProblem};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerSolver {
    /// First-order descent on the density using exact transport derivatives:
    /// projected accelerated gradient for the piecewise-constant model,
    /// projected subgradient with diminishing steps for the atomic model.
    #[default]
    ExactSubgradient,
    /// Entropic scaling with a per-cell proximal update on the target side.
    EntropicScaling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JkoConfig {
    pub tau: f64,
    pub n_steps: usize,
    #[serde(default)]
    pub solver: InnerSolver,
    /// Transport model; defaults to piecewise-constant cells in 1D, atoms in 2D.
    #[serde(default)]
    pub model: Option<TransportModel>,
    /// Stopping tolerance on the step objective; defaults to `1e-8 (1 + E(rho_0))`.
    #[serde(default)]
    pub inner_tol: Option<f64>,
    #[serde(default = "default_max_iters")]
    pub inner_max_iters: usize,
    /// Entropic regularization; defaults to `h^2 / 10`.
    #[serde(default)]
    pub entropic_epsilon: Option<f64>,
    /// Diminishing step sizes `a / (k + b)` of the subgradient iteration.
    #[serde(default = "default_step_a")]
    pub step_a: f64,
    #[serde(default = "default_step_b")]
    pub step_b: f64,
}

fn default_max_iters() -> usize {
    20_000
}

fn default_step_a() -> f64 {
    1.0
}

fn default_step_b() -> f64 {
    10.0
}

impl JkoConfig {
    pub fn new(tau: f64, n_steps: usize) -> Self {
        Self {
            tau,
            n_steps,
            solver: InnerSolver::ExactSubgradient,
            model: None,
            inner_tol: None,
            inner_max_iters: default_max_iters(),
            entropic_epsilon: None,
            step_a: default_step_a(),
            step_b: default_step_b(),
        }
    }

    pub fn with_solver(mut self, solver: InnerSolver) -> Self {
        self.solver = solver;
        self
    }

    pub fn with_model(mut self, model: TransportModel) -> Self {
        self.model = Some(model);
        self
    }

    pub fn with_inner_tol(mut self, tol: f64) -> Self {
        self.inner_tol = Some(tol);
        self
    }

    pub fn with_epsilon(mut self, eps: f64) -> Self {
        self.entropic_epsilon = Some(eps);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| Err(Error::Config { field: field.into(), message });
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("jko.tau", format!("must be positive, got {}", self.tau));
        }
        if self.n_steps == 0 {
            return bad("jko.n_steps", "must be at least 1".into());
        }
        if let Some(t) = self.inner_tol {
            if !(t > 0.0) {
                return bad("jko.inner_tol", format!("must be positive, got {t}"));
            }
        }
        if let Some(e) = self.entropic_epsilon {
            if !(e > 0.0) {
                return bad("jko.entropic_epsilon", format!("must be positive, got {e}"));
            }
        }
        if self.inner_max_iters == 0 {
            return bad("jko.inner_max_iters", "must be at least 1".into());
        }
        if !(self.step_a > 0.0 && self.step_b > 0.0) {
            return bad("jko.step_a", "step sizes need positive a and b".into());
        }
        Ok(())
    }

    pub fn model_for(&self, grid: &Grid) -> TransportModel {
        self.model.unwrap_or_else(|| TransportModel::for_dim(grid.dim()))
    }

    pub fn tol_for(&self, e0: f64) -> f64 {
        self.inner_tol.unwrap_or(1e-8 * (1.0 + e0.abs()))
    }

    pub fn epsilon_for(&self, grid: &Grid) -> f64 {
        self.entropic_epsilon.unwrap_or(grid.h() * grid.h() / 10.0)
    }
}

/// Per-step record of the inner solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepCertificate {
    /// `E(rho) + Wb2^2(rho_prev, rho) / (2 tau)` at the returned density.
    pub objective: f64,
    pub energy: f64,
    pub step_cost: f64,
    pub iterations: usize,
    /// Last stationarity estimate (gradient-mapping decrease or objective change).
    pub residual: f64,
    pub converged: bool,
}

/// The step objective for one previous density.
struct StepProblem<'a> {
    energy: &'a EnergyFunctional,
    prev: &'a DiscreteMeasure,
    prev_line: Option<LineMeasure>,
    tau: f64,
    model: TransportModel,
    vbar: Vec<f64>,
    faces: Vec<f64>,
    vol: f64,
    floor: f64,
}

impl<'a> StepProblem<'a> {
    fn new(energy: &'a EnergyFunctional, prev: &'a DiscreteMeasure, tau: f64, model: TransportModel) -> Result<Self> {
        let grid = prev.grid();
        model.check_dim(grid.dim())?;
        let vbar = match &energy.potential {
            Some(p) => p.cell_averages(grid),
            None => vec![0.0; grid.len()],
        };
        let prev_line = match model {
            TransportModel::PiecewiseConstant => Some(LineMeasure::from_density(prev)?),
            TransportModel::Atomic => None,
        };
        let faces = if grid.dim() == 1 {
            let mut f: Vec<f64> = (0..grid.len()).map(|c| grid.cell_bounds(c, 0).0).collect();
            f.push(grid.domain().hi[0]);
            f
        } else {
            Vec::new()
        };
        // The entropy's derivative is unbounded at zero; keep iterates positive.
        let floor = match energy.internal {
            Internal::Entropy { lambda } => 1e-14 * lambda,
            Internal::Power { .. } => 0.0,
        };
        Ok(Self { energy, prev, prev_line, tau, model, vbar, faces, vol: grid.cell_volume(), floor })
    }

    fn measure(&self, rho: &[f64]) -> Result<DiscreteMeasure> {
        DiscreteMeasure::new(self.prev.grid().clone(), rho.to_vec())
    }

    fn energy_of(&self, rho: &[f64]) -> f64 {
        rho.iter().zip(&self.vbar).map(|(&r, v)| self.energy.u_unchecked(r) + v * r).sum::<f64>() * self.vol
    }

    /// Objective, squared transport cost, and (sub)gradient with respect to the density.
    fn evaluate(&self, rho: &[f64]) -> Result<(f64, f64, Vec<f64>)> {
        let (cost, wgrad) = match self.model {
            TransportModel::PiecewiseConstant => {
                let target = LineMeasure::from_density(&self.measure(rho)?)?;
                let c = wb2::couple(self.prev_line.as_ref().unwrap(), &target)?;
                (c.cost, c.target_gradient(&self.faces))
            }
            TransportModel::Atomic => {
                let p = TransportProblem::from_measures(self.prev, &self.measure(rho)?)?;
                let s = wb2::solve_exact(&p)?;
                let g = s.duals.psi_target.iter().map(|psi| psi * self.vol).collect();
                (s.cost, g)
            }
        };
        let grad = rho
            .iter()
            .zip(&self.vbar)
            .zip(&wgrad)
            .map(|((&r, v), w)| (self.energy.u_prime(r) + v) * self.vol + w / (2.0 * self.tau))
            .collect();
        Ok((self.energy_of(rho) + cost / (2.0 * self.tau), cost, grad))
    }

    #[cfg(test)]
    fn objective(&self, rho: &[f64]) -> Result<f64> {
        Ok(self.evaluate(rho)?.0)
    }

    fn project(&self, rho: &mut [f64]) {
        for r in rho.iter_mut() {
            if !(*r >= self.floor) {
                *r = self.floor;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Projected accelerated gradient with backtracking and restarts. Returns the
/// best iterate seen, which includes the starting point.
fn solve_accelerated(p: &StepProblem, start: &[f64], tol: f64, max_iters: usize) -> Result<(Vec<f64>, usize, f64, bool)> {
    let mut x = start.to_vec();
    p.project(&mut x);
    let (mut fx, _, mut gx) = p.evaluate(&x)?;
    let mut best = (x.clone(), fx);
    // Curvature guess from the internal energy on the starting density.
    let mut lip = start
        .iter()
        .map(|&r| p.energy.u_second(r.max(p.floor).max(1e-3 * p.energy.lambda().max(1e-3))))
        .filter(|v| v.is_finite())
        .fold(1.0f64, f64::max)
        * p.vol;
    let mut y = x.clone();
    let (mut fy, mut gy) = (fx, gx.clone());
    let mut t = 1.0f64;
    let mut residual = f64::INFINITY;
    for it in 1..=max_iters {
        // Backtracking on the quadratic upper model at y.
        let (xn, fxn, gxn) = loop {
            let mut cand: Vec<f64> = y.iter().zip(&gy).map(|(y, g)| y - g / lip).collect();
            p.project(&mut cand);
            let d: Vec<f64> = cand.iter().zip(&y).map(|(a, b)| a - b).collect();
            let (fc, _, gc) = p.evaluate(&cand)?;
            let model = fy + dot(&gy, &d) + 0.5 * lip * dot(&d, &d);
            if fc <= model + 1e-15 * fy.abs().max(1.0) || lip > 1e30 {
                break (cand, fc, gc);
            }
            lip *= 2.0;
        };
        // Gradient-mapping decrease at the new point as the stopping measure.
        let mut probe: Vec<f64> = xn.iter().zip(&gxn).map(|(x, g)| x - g / lip).collect();
        p.project(&mut probe);
        let d: Vec<f64> = xn.iter().zip(&probe).map(|(a, b)| a - b).collect();
        // With strong convexity modulus m from the internal energy, the
        // optimality gap is at most (L / 2m) times the one-step decrease.
        let mean = xn.iter().sum::<f64>() / xn.len() as f64;
        let floor_curv = 1e-6 * p.energy.u_second(mean.max(1e-12));
        let m = xn
            .iter()
            .map(|&r| p.energy.u_second(r.max(1e-300)))
            .fold(f64::INFINITY, f64::min)
            .max(floor_curv)
            * p.vol;
        residual = dot(&gxn, &d).max(0.0) * lip / (2.0 * m);
        if fxn < best.1 {
            best = (xn.clone(), fxn);
        }
        if residual <= tol {
            return Ok((best.0, it, residual, true));
        }
        if fxn > fx {
            // Function-value restart.
            t = 1.0;
            y = x.clone();
            fy = fx;
            gy = gx.clone();
            continue;
        }
        let tn = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / tn;
        y = xn.iter().zip(&x).map(|(a, b)| a + beta * (a - b)).collect();
        p.project(&mut y);
        let (f, _, g) = p.evaluate(&y)?;
        fy = f;
        gy = g;
        x = xn;
        fx = fxn;
        gx = gxn;
        t = tn;
        lip *= 0.9;
    }
    Ok((best.0, max_iters, residual, false))
}

/// Projected subgradient with steps `a / (k + b)` on the density, restarting
/// the momentum when the objective increases. Returns the best iterate.
fn solve_subgradient(
    p: &StepProblem,
    start: &[f64],
    tol: f64,
    max_iters: usize,
    a: f64,
    b: f64,
) -> Result<(Vec<f64>, usize, f64, bool)> {
    let mut x = start.to_vec();
    p.project(&mut x);
    let (mut fx, _, mut gx) = p.evaluate(&x)?;
    let mut best = (x.clone(), fx);
    let mut last_gain_at = 0usize;
    let mut last_best = fx;
    let mut velocity = vec![0.0; x.len()];
    let window = 200usize;
    for k in 0..max_iters {
        let step = a / (k as f64 + b);
        // Subgradient per unit density.
        for ((v, g), _) in velocity.iter_mut().zip(&gx).zip(&x) {
            *v = 0.5 * *v - step * g / p.vol;
        }
        let mut xn: Vec<f64> = x.iter().zip(&velocity).map(|(x, v)| x + v).collect();
        p.project(&mut xn);
        let (fxn, _, gxn) = p.evaluate(&xn)?;
        if fxn > fx {
            velocity.iter_mut().for_each(|v| *v = 0.0);
        }
        if fxn < best.1 {
            best = (xn.clone(), fxn);
        }
        x = xn;
        fx = fxn;
        gx = gxn;
        if k + 1 - last_gain_at >= window {
            let gain = last_best - best.1;
            if gain <= tol {
                return Ok((best.0, k + 1, gain, true));
            }
            last_best = best.1;
            last_gain_at = k + 1;
        }
    }
    Ok((best.0, max_iters, f64::NAN, false))
}

/// `x` solving `eps (x - l) + 2 tau (U'(e^x / vol) + v) = 0`: the log of the
/// target-side mass of the entropic proximal update.
pub fn kl_prox_log_mass(energy: &EnergyFunctional, eps: f64, tau: f64, vol: f64, l: f64, v: f64) -> f64 {
    match energy.internal {
        Internal::Entropy { lambda } => {
            (eps * l + 2.0 * tau * ((vol * lambda).ln() - v)) / (eps + 2.0 * tau)
        }
        Internal::Power { alpha, lambda } if alpha == 2.0 => {
            // x + A e^x = B with A = 4 tau / (eps vol): x = B - W(A e^B).
            let ln_a = (4.0 * tau / (eps * vol)).ln();
            let b = l + (4.0 * tau * lambda - 2.0 * tau * v) / eps;
            b - lambert_w_exp(b + ln_a)
        }
        Internal::Power { .. } => {
            let h = |x: f64| eps * (x - l) + 2.0 * tau * (energy.u_prime((x.exp() / vol).max(0.0)) + v);
            let dh = |x: f64| {
                let s = x.exp() / vol;
                eps + 2.0 * tau * energy.u_second(s) * s
            };
            let (mut lo, mut hi) = (l - 1.0, l + 1.0);
            let mut step = 1.0;
            while h(lo) > 0.0 {
                step *= 2.0;
                lo -= step;
            }
            step = 1.0;
            while h(hi) < 0.0 {
                step *= 2.0;
                hi += step;
            }
            let mut x = 0.5 * (lo + hi);
            for _ in 0..200 {
                let hx = h(x);
                if hx == 0.0 {
                    break;
                }
                if hx < 0.0 {
                    lo = x;
                } else {
                    hi = x;
                }
                let d = dh(x);
                let mut nx = x - hx / d;
                if !(nx > lo && nx < hi) || !d.is_finite() {
                    nx = 0.5 * (lo + hi);
                }
                if (nx - x).abs() <= 1e-15 * (1.0 + x.abs()) || hi - lo <= 1e-15 * (1.0 + x.abs()) {
                    x = nx;
                    break;
                }
                x = nx;
            }
            x
        }
    }
}

/// `W(e^c)` for the principal branch: the positive root of `w + ln w = c`.
pub fn lambert_w_exp(c: f64) -> f64 {
    let mut w = if c < 1.0 { c.exp() } else { c - c.ln() };
    for _ in 0..100 {
        let f = w + w.ln() - c;
        let nw = w - f * w / (w + 1.0);
        let nw = if nw > 0.0 { nw } else { 0.5 * w };
        if (nw - w).abs() <= 4.0 * f64::EPSILON * nw {
            return nw;
        }
        w = nw;
    }
    w
}

fn solve_entropic_step(p: &StepProblem, eps: f64, tol: f64, max_iters: usize) -> Result<(Vec<f64>, usize, f64, bool)> {
    let problem = TransportProblem::from_measures(p.prev, p.prev)?;
    let kernel = GibbsKernel::new(&problem, eps)?;
    let src = problem.source_masses();
    let total = p.prev.total_mass().max(1e-300);
    let mut g = vec![0.0; kernel.nt];
    let mut masses = src.to_vec();
    let mut residual = f64::INFINITY;
    for it in 1..=max_iters {
        let f = kernel.match_marginal(src, &kernel.row_log_sums(&g));
        let logs = kernel.col_log_sums(&f);
        let new_masses: Vec<f64> = logs
            .iter()
            .zip(&p.vbar)
            .map(|(&l, &v)| kl_prox_log_mass(p.energy, eps, p.tau, p.vol, l, v).exp())
            .collect();
        g = new_masses.iter().zip(&logs).map(|(m, l)| eps * (m.ln() - l)).collect();
        let change: f64 = new_masses.iter().zip(&masses).map(|(a, b)| (a - b).abs()).sum();
        let rows = kernel.row_sums(&f, &g);
        let violation: f64 = rows.iter().zip(src).map(|(r, m)| (r - m).abs()).sum();
        masses = new_masses;
        residual = (change + violation) / total;
        if residual <= tol {
            let rho = masses.iter().map(|m| m / p.vol).collect();
            return Ok((rho, it, residual, true));
        }
    }
    let rho = masses.iter().map(|m| m / p.vol).collect();
    Ok((rho, max_iters, residual, false))
}

/// One step of the scheme from `prev`. `tol` is the inner stopping tolerance.
pub fn jko_step(
    energy: &EnergyFunctional,
    prev: &DiscreteMeasure,
    config: &JkoConfig,
    tol: f64,
) -> Result<(DiscreteMeasure, StepCertificate)> {
    config.validate()?;
    let e_prev = energy.evaluate_energy(prev);
    if !e_prev.is_finite() {
        return Err(Error::InfiniteEnergy);
    }
    let grid = prev.grid();
    let model = config.model_for(grid);
    let p = StepProblem::new(energy, prev, config.tau, model)?;
    let (rho, iterations, residual, converged) = match config.solver {
        InnerSolver::ExactSubgradient => match model {
            TransportModel::PiecewiseConstant => solve_accelerated(&p, prev.density(), tol, config.inner_max_iters)?,
            TransportModel::Atomic => {
                solve_subgradient(&p, prev.density(), tol, config.inner_max_iters, config.step_a, config.step_b)?
            }
        },
        InnerSolver::EntropicScaling => {
            solve_entropic_step(&p, config.epsilon_for(grid), tol, config.inner_max_iters)?
        }
    };
    let mut rho = rho;
    p.project(&mut rho);
    let out = p.measure(&rho)?;
    let (objective, step_cost, _) = p.evaluate(&rho)?;
    let energy_value = p.energy_of(&rho);
    Ok((out, StepCertificate { objective, energy: energy_value, step_cost, iterations, residual, converged }))
}

/// The discrete solution: step densities with their costs and energies.
#[derive(Clone, Debug)]
pub struct JkoTrajectory {
    pub tau: f64,
    pub model: TransportModel,
    /// `rho_0, rho_1, ..., rho_n`.
    pub steps: Vec<DiscreteMeasure>,
    /// `Wb2^2(rho_{k-1}, rho_k)` for `k = 1..=n`.
    pub step_costs: Vec<f64>,
    /// `E(rho_k)` for `k = 0..=n`.
    pub step_energies: Vec<f64>,
    pub certificates: Vec<StepCertificate>,
    pub inner_tol: f64,
}

impl JkoTrajectory {
    /// A trajectory assembled from given densities; costs and energies are recomputed.
    pub fn from_steps(
        energy: &EnergyFunctional,
        steps: Vec<DiscreteMeasure>,
        tau: f64,
        model: TransportModel,
        inner_tol: f64,
    ) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::InvalidArgument("trajectory needs at least one density".into()));
        }
        let step_costs = steps.windows(2).map(|w| model.wb2_squared(&w[0], &w[1])).collect::<Result<Vec<_>>>()?;
        let step_energies = steps.iter().map(|m| energy.evaluate_energy(m)).collect();
        Ok(Self { tau, model, steps, step_costs, step_energies, certificates: Vec::new(), inner_tol })
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len() - 1
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.steps[0].grid()
    }

    pub fn end_time(&self) -> f64 {
        self.tau * self.n_steps() as f64
    }

    /// Index of the step density representing time `t`: `ceil(t / tau)`.
    pub fn index_at(&self, t: f64) -> Result<usize> {
        let end = self.end_time();
        if !(t >= 0.0 && t <= end * (1.0 + 1e-12)) {
            return Err(Error::InvalidArgument(format!("time {t} outside [0, {end}]")));
        }
        let r = t / self.tau;
        let nearest = r.round();
        // Times that are integer multiples of tau up to rounding belong to that step.
        let k = if (r - nearest).abs() <= 1e-9 * nearest.max(1.0) { nearest } else { r.ceil() };
        Ok((k as usize).min(self.n_steps()))
    }

    /// The piecewise-constant interpolation `rho(t) = rho_n` for `t` in `((n-1) tau, n tau]`.
    pub fn sample_at(&self, t: f64) -> Result<&DiscreteMeasure> {
        Ok(&self.steps[self.index_at(t)?])
    }
}

/// Run `config.n_steps` steps from `mu0`.
pub fn run_scheme(energy: &EnergyFunctional, mu0: &DiscreteMeasure, config: &JkoConfig) -> Result<JkoTrajectory> {
    config.validate()?;
    let model = config.model_for(mu0.grid());
    model.check_dim(mu0.grid().dim())?;
    let e0 = energy.evaluate_energy(mu0);
    if !e0.is_finite() {
        return Err(Error::InfiniteEnergy);
    }
    let tol = config.tol_for(e0);
    let mut steps = vec![mu0.clone()];
    let mut step_costs = Vec::with_capacity(config.n_steps);
    let mut step_energies = vec![e0];
    let mut certificates = Vec::with_capacity(config.n_steps);
    for _ in 0..config.n_steps {
        let (next, cert) = jko_step(energy, steps.last().unwrap(), config, tol)?;
        step_costs.push(cert.step_cost);
        step_energies.push(cert.energy);
        certificates.push(cert);
        steps.push(next);
    }
    Ok(JkoTrajectory { tau: config.tau, model, steps, step_costs, step_energies, certificates, inner_tol: tol })
}

/// Euler-Lagrange residual of one step against the test function `zeta`:
/// `| int <grad zeta(x), y - x> dgamma(x, y) + tau int (p(rho) grad zeta - rho grad V . grad zeta) |`
/// written with `laplace zeta`, where `gamma` is optimal from `mu_min` to `mu_prev`
/// and `p(rho)` is the diffusion variable.
pub fn el_residual(
    energy: &EnergyFunctional,
    mu_prev: &DiscreteMeasure,
    mu_min: &DiscreteMeasure,
    tau: f64,
    zeta: &Bump,
    model: TransportModel,
) -> Result<f64> {
    let grid = mu_min.grid();
    let transport = match model {
        TransportModel::PiecewiseConstant => {
            let c = wb2::couple(&LineMeasure::from_density(mu_min)?, &LineMeasure::from_density(mu_prev)?)?;
            c.integrate(|x, y| zeta.gradient(&[x])[0] * (y - x))
        }
        TransportModel::Atomic => {
            let p = TransportProblem::from_measures(mu_min, mu_prev)?;
            let s = wb2::solve_exact(&p)?;
            let dom = grid.domain();
            let mut acc = 0.0;
            for &(i, j, v) in &s.plan.interior {
                let (x, y) = (grid.center(i), grid.center(j));
                let g = zeta.gradient(x);
                acc += v * (0..grid.dim()).map(|k| g[k] * (y[k] - x[k])).sum::<f64>();
            }
            for (i, &v) in s.plan.to_reservoir.iter().enumerate() {
                if v > 0.0 {
                    let x = grid.center(i);
                    let y = dom.project(x);
                    let g = zeta.gradient(x);
                    acc += v * (0..grid.dim()).map(|k| g[k] * (y[k] - x[k])).sum::<f64>();
                }
            }
            acc
        }
    };
    let lap = zeta.laplacian_cell_integrals(grid);
    let diffusion: f64 =
        mu_min.density().iter().zip(&lap).map(|(&r, l)| energy.diffusion_variable(r) * l).sum();
    let drift = match &energy.potential {
        None => 0.0,
        Some(pot) => (0..grid.len())
            .map(|c| {
                let r = mu_min.density()[c];
                r * crate::quad::integrate_cell(grid, c, &|x| {
                    let (gv, gz) = (pot.gradient(x), zeta.gradient(x));
                    (0..grid.dim()).map(|k| gv[k] * gz[k]).sum::<f64>()
                })
            })
            .sum(),
    };
    Ok((transport + tau * (diffusion - drift)).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit(n: usize) -> Arc<Grid> {
        Arc::new(Grid::unit_interval(n).unwrap())
    }

    fn sine(n: usize) -> DiscreteMeasure {
        DiscreteMeasure::from_fn(unit(n), |x| 1.0 + 0.5 * (2.0 * std::f64::consts::PI * x[0]).sin()).unwrap()
    }

    #[test]
    fn constant_state_is_a_fixed_point() {
        let e = EnergyFunctional::power(2.0, 1.0).unwrap();
        let mu = DiscreteMeasure::constant(unit(16), 1.0).unwrap();
        for model in [TransportModel::PiecewiseConstant, TransportModel::Atomic] {
            let cfg = JkoConfig::new(1e-3, 3).with_model(model);
            let traj = run_scheme(&e, &mu, &cfg).unwrap();
            for (s, c) in traj.steps.iter().zip(std::iter::once(&0.0).chain(&traj.step_costs)) {
                assert!(s.density().iter().all(|r| (r - 1.0).abs() < 1e-12));
                assert!(*c <= 1e-14);
            }
        }
    }

    #[test]
    fn step_decreases_energy_and_objective() {
        let e = EnergyFunctional::power(2.0, 1.0).unwrap();
        let mu = sine(32);
        let cfg = JkoConfig::new(1e-3, 1);
        let tol = cfg.tol_for(e.evaluate_energy(&mu));
        let (next, cert) = jko_step(&e, &mu, &cfg, tol).unwrap();
        assert!(cert.converged);
        assert!(cert.objective <= e.evaluate_energy(&mu));
        assert!(cert.energy < e.evaluate_energy(&mu));
        assert!(next.l1_distance(&mu).unwrap() > 1e-4);
    }

    #[test]
    fn objective_is_convex_along_segments() {
        let e = EnergyFunctional::power(2.0, 1.0).unwrap();
        let prev = sine(16);
        let p = StepProblem::new(&e, &prev, 1e-3, TransportModel::PiecewiseConstant).unwrap();
        let mut state = 1u64;
        let mut rnd = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..50 {
            let a: Vec<f64> = (0..16).map(|_| 2.0 * rnd()).collect();
            let b: Vec<f64> = (0..16).map(|_| 2.0 * rnd()).collect();
            let m: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
            let (fa, fb, fm) = (p.objective(&a).unwrap(), p.objective(&b).unwrap(), p.objective(&m).unwrap());
            assert!(fm <= 0.5 * (fa + fb) + 1e-9);
        }
    }

    #[test]
    fn different_starts_reach_the_same_minimizer() {
        let e = EnergyFunctional::power(2.0, 1.0).unwrap();
        let prev = sine(32);
        let p = StepProblem::new(&e, &prev, 1e-3, TransportModel::PiecewiseConstant).unwrap();
        let mut prev_gap = f64::INFINITY;
        for tol in [1e-8, 1e-11, 1e-14] {
            let (a, ..) = solve_accelerated(&p, prev.density(), tol, 50_000).unwrap();
            let (b, ..) = solve_accelerated(&p, &vec![1.0; 32], tol, 50_000).unwrap();
            let (fa, fb) = (p.objective(&a).unwrap(), p.objective(&b).unwrap());
            assert!((fa - fb).abs() <= 2.0 * tol.max(1e-13));
            let gap: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 32.0;
            assert!(gap <= prev_gap * 1.5 + 1e-12);
            prev_gap = gap;
        }
        assert!(prev_gap < 1e-4);
    }

    #[test]
    fn entropic_prox_solves_its_equation() {
        for e in [
            EnergyFunctional::power(2.0, 1.0).unwrap(),
            EnergyFunctional::power(3.0, 0.5).unwrap(),
            EnergyFunctional::entropy(1.0).unwrap(),
        ] {
            for (l, v) in [(-3.0, 0.0), (-1.0, 0.3), (0.5, -0.2)] {
                let (eps, tau, vol) = (1e-4, 1e-3, 1.0 / 16.0);
                let x = kl_prox_log_mass(&e, eps, tau, vol, l, v);
                let resid = eps * (x - l) + 2.0 * tau * (e.u_prime(x.exp() / vol) + v);
                assert!(resid.abs() < 1e-12, "{resid}");
            }
        }
        assert_abs_diff_eq!(lambert_w_exp(1.0), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(lambert_w_exp(0.0), 0.567_143_290_409_783_8, epsilon = 1e-15);
        assert_abs_diff_eq!(lambert_w_exp(-30.0), (-30f64).exp(), epsilon = 1e-25);
    }

    #[test]
    fn entropic_step_matches_the_exact_atomic_step() {
        let e = EnergyFunctional::power(2.0, 1.0).unwrap();
        let mu = sine(16);
        let exact = JkoConfig::new(1e-3, 1).with_model(TransportModel::Atomic);
        let (at, _) = jko_step(&e, &mu, &exact, 1e-10).unwrap();
        let entropic = JkoConfig::new(1e-3, 1).with_solver(InnerSolver::EntropicScaling).with_epsilon(1e-5);
        let (en, _) = jko_step(&e, &mu, &entropic, 1e-10).unwrap();
        assert!(en.l1_distance(&at).unwrap() < 1e-3);
    }

    #[test]
    fn sample_at_uses_half_open_intervals() {
        let e = EnergyFunctional::power(2.0, 1.0).unwrap();
        let steps: Vec<DiscreteMeasure> =
            (0..4).map(|k| DiscreteMeasure::constant(unit(4), 1.0 + k as f64 * 0.1).unwrap()).collect();
        let tau = 0.1;
        let traj = JkoTrajectory::from_steps(&e, steps, tau, TransportModel::PiecewiseConstant, 1e-8).unwrap();
        assert_eq!(traj.index_at(0.0).unwrap(), 0);
        assert_eq!(traj.index_at(1.5 * tau).unwrap(), 2);
        assert_eq!(traj.index_at(2.0 * tau).unwrap(), 2);
        assert_eq!(traj.index_at(3.0 * tau).unwrap(), 3);
        assert!(traj.index_at(0.31).is_err());
        assert!(traj.index_at(-0.01).is_err());
    }

    #[test]
    fn el_residual_vanishes_at_the_constant_state() {
        let e = EnergyFunctional::power(2.0, 1.0).unwrap();
        let mu = DiscreteMeasure::constant(unit(64), 1.0).unwrap();
        for z in crate::testfn::basket(mu.grid().domain()) {
            for model in [TransportModel::PiecewiseConstant, TransportModel::Atomic] {
                assert!(el_residual(&e, &mu, &mu, 1e-3, &z, model).unwrap() < 1e-12);
            }
        }
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = JkoConfig::new(-1.0, 1);
        match bad.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "jko.tau"),
            other => panic!("{other:?}"),
        }
        assert!(JkoConfig::new(1e-3, 0).validate().is_err());
    }
}
