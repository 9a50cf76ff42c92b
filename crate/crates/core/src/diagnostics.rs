//! Discrete versions of the energy, speed and regularity estimates, evaluated
//! on a computed trajectory.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{boundary_band, boundary_geometry};
use crate::jko::JkoTrajectory;
use crate::measures::{l1_distance_1d, DiscreteMeasure, EnergyFunctional, Internal};
use crate::oracle::{weak_residual, OracleSolution, TimeSeries};
use crate::testfn::Bump;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckName {
    StepSum,
    RefinedStepSum,
    Holder,
    BoundaryBand,
    Envelopes,
    Edi,
    MetricDerivative,
    MetricDerivativeConverse,
    MassBounds,
    ZeroBoundarySpeed,
    WeakSolutionRate,
    OracleAgreement,
}

impl CheckName {
    /// Checks that need only a trajectory, in report order.
    pub const TRAJECTORY: [CheckName; 9] = [
        CheckName::StepSum,
        CheckName::RefinedStepSum,
        CheckName::Holder,
        CheckName::BoundaryBand,
        CheckName::Envelopes,
        CheckName::Edi,
        CheckName::MetricDerivative,
        CheckName::MetricDerivativeConverse,
        CheckName::MassBounds,
    ];

    pub fn anchor(self) -> &'static str {
        match self {
            CheckName::StepSum => "telescoped step inequality: sum of Wb2^2/(2 tau) bounded by the energy drop",
            CheckName::RefinedStepSum => "step inequality with the slope term, slope replaced by its Fisher-type lower bound",
            CheckName::Holder => "approximate 1/2-Holder continuity of the discrete solution",
            CheckName::BoundaryBand => "minimizers are positive within r* of the boundary when lambda > 0",
            CheckName::Envelopes => "pointwise envelopes of minimizers near the boundary",
            CheckName::Edi => "energy dissipation inequality with metric speed and velocity terms",
            CheckName::MetricDerivative => "metric speed dominates the L2(mu) norm of the velocity where the density is bounded away from 0",
            CheckName::MetricDerivativeConverse => "vanishing velocity forces vanishing metric speed",
            CheckName::MassBounds => "uniform L^alpha and L^1 bounds along the trajectory",
            CheckName::ZeroBoundarySpeed => "metric speed lower bound for lambda = 0",
            CheckName::WeakSolutionRate => "weak formulation residual of order tau + sqrt(tau)",
            CheckName::OracleAgreement => "discrete solution against the finite-difference reference",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

/// One evaluated inequality `lhs <= rhs + slack_used`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: CheckName,
    pub anchor: String,
    pub lhs: f64,
    pub rhs: f64,
    pub slack_used: f64,
    pub status: Status,
    pub detail: String,
}

impl CheckRecord {
    fn new(name: CheckName, lhs: f64, rhs: f64, slack: f64, detail: String) -> Self {
        let status = if lhs <= rhs + slack { Status::Pass } else { Status::Fail };
        Self { name, anchor: name.anchor().into(), lhs, rhs, slack_used: slack, status, detail }
    }

    fn skipped(name: CheckName, detail: &str) -> Self {
        Self { name, anchor: name.anchor().into(), lhs: 0.0, rhs: 0.0, slack_used: 0.0, status: Status::Skipped, detail: detail.into() }
    }

    pub fn passed(&self) -> bool {
        self.status != Status::Fail
    }

    /// How much of the slack the inequality needed: `max(0, lhs - rhs)`.
    pub fn allowance_usage(&self) -> f64 {
        (self.lhs - self.rhs).max(0.0)
    }
}

fn default_c_disc() -> f64 {
    1.0
}

fn default_holder_states() -> usize {
    101
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsOptions {
    /// Checks to run; empty means every trajectory check.
    #[serde(default)]
    pub checks: Vec<CheckName>,
    /// `C_d` in the allowance `C_d (h + tau) (1 + |E(mu_0)|)`.
    #[serde(default = "default_c_disc")]
    pub c_disc: f64,
    /// Adds the lambda = 0 metric speed bound.
    #[serde(default)]
    pub zero_boundary_speed: bool,
    /// Holder pairs use at most this many states, evenly spaced and including both ends.
    #[serde(default = "default_holder_states")]
    pub holder_max_states: usize,
}

impl Default for DiagnosticsOptions {
    fn default() -> Self {
        Self { checks: Vec::new(), c_disc: 1.0, zero_boundary_speed: false, holder_max_states: 101 }
    }
}

impl DiagnosticsOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_disc >= 0.0 && self.c_disc.is_finite()) {
            return Err(Error::Config { field: "diagnostics.c_disc".into(), message: format!("must be nonnegative, got {}", self.c_disc) });
        }
        if self.holder_max_states < 2 {
            return Err(Error::Config { field: "diagnostics.holder_max_states".into(), message: "must be at least 2".into() });
        }
        if let Some(c) = self.checks.iter().find(|c| matches!(c, CheckName::WeakSolutionRate | CheckName::OracleAgreement)) {
            return Err(Error::Config { field: "diagnostics.checks".into(), message: format!("{c:?} needs more than one trajectory") });
        }
        Ok(())
    }

    fn selected(&self) -> Vec<CheckName> {
        let mut out = if self.checks.is_empty() { CheckName::TRAJECTORY.to_vec() } else { self.checks.clone() };
        if self.zero_boundary_speed && !out.contains(&CheckName::ZeroBoundarySpeed) {
            out.push(CheckName::ZeroBoundarySpeed);
        }
        out
    }
}

/// Per-step metric speed and velocity norms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedProfile {
    /// `Theta_k = Wb2(rho_{k-1}, rho_k) / tau` for `k = 1..=n`.
    pub theta: Vec<f64>,
    /// `||v||^2_{L2(mu)}` at `rho_k` for `k = 1..=n`, with `v = -grad u / rho - grad V`.
    pub v_norm: Vec<f64>,
    /// `E(rho_k)` for `k = 0..=n`.
    pub energies: Vec<f64>,
}

pub fn speed_profile(energy: &EnergyFunctional, traj: &JkoTrajectory) -> SpeedProfile {
    SpeedProfile {
        theta: traj.step_costs.iter().map(|c| c.max(0.0).sqrt() / traj.tau).collect(),
        v_norm: traj.steps[1..].par_iter().map(|m| energy.velocity_norm_sq(m)).collect(),
        energies: traj.step_energies.clone(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub tau: f64,
    pub h: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub e0: f64,
    pub n_steps: usize,
    pub eps_disc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub meta: TrajectoryMeta,
    pub records: Vec<CheckRecord>,
    pub all_pass: bool,
    pub failed: usize,
    pub skipped: usize,
}

impl DiagnosticsReport {
    pub fn from_records(meta: TrajectoryMeta, records: Vec<CheckRecord>) -> Self {
        let failed = records.iter().filter(|r| r.status == Status::Fail).count();
        let skipped = records.iter().filter(|r| r.status == Status::Skipped).count();
        Self { meta, records, all_pass: failed == 0, failed, skipped }
    }

    pub fn record(&self, name: CheckName) -> Option<&CheckRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per check.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Csv(e.to_string());
        w.write_record(["name", "status", "lhs", "rhs", "slack_used", "anchor", "detail"]).map_err(csv_err)?;
        for r in &self.records {
            let name = serde_json::to_value(r.name)?.as_str().unwrap_or_default().to_string();
            let status = serde_json::to_value(r.status)?.as_str().unwrap_or_default().to_string();
            w.write_record([
                name,
                status,
                format!("{:.16e}", r.lhs),
                format!("{:.16e}", r.rhs),
                format!("{:.16e}", r.slack_used),
                r.anchor.clone(),
                r.detail.clone(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Csv(e.to_string()))
    }
}

/// `C_d (h + tau) (1 + |E(mu_0)|)`.
pub fn eps_disc(c_disc: f64, traj: &JkoTrajectory) -> f64 {
    c_disc * (traj.grid().h() + traj.tau) * (1.0 + traj.step_energies[0].abs())
}

/// Energy dissipation inequality, discrete form.
fn edi_terms(traj: &JkoTrajectory, speed: &SpeedProfile) -> (f64, f64) {
    let tau = traj.tau;
    let e = &speed.energies;
    let lhs = e[e.len() - 1]
        + 0.5 * tau * speed.theta.iter().map(|t| t * t).sum::<f64>()
        + 0.5 * tau * speed.v_norm.iter().sum::<f64>();
    (lhs, e[0])
}

pub fn check_step_sum(traj: &JkoTrajectory) -> CheckRecord {
    let tau = traj.tau;
    let mut prefix = vec![0.0];
    for c in &traj.step_costs {
        prefix.push(prefix.last().unwrap() + c / (2.0 * tau));
    }
    let e = &traj.step_energies;
    let n = e.len();
    // Worst pair by excess over its own slack.
    let mut worst = (f64::NEG_INFINITY, 0.0, 0.0, 0.0, 0, 0);
    for m in 0..n {
        for k in m + 1..n {
            let lhs = prefix[k] - prefix[m];
            let rhs = e[m] - e[k];
            let slack = (k - m) as f64 * traj.inner_tol;
            let excess = lhs - rhs - slack;
            if excess > worst.0 {
                worst = (excess, lhs, rhs, slack, m, k);
            }
        }
    }
    if n < 2 {
        return CheckRecord::new(CheckName::StepSum, 0.0, 0.0, 0.0, "no steps".into());
    }
    let (_, lhs, rhs, slack, m, k) = worst;
    CheckRecord::new(CheckName::StepSum, lhs, rhs, slack, format!("worst pair m={m} n={k}"))
}

pub fn check_refined_step_sum(traj: &JkoTrajectory, speed: &SpeedProfile, eps: f64) -> CheckRecord {
    let tau = traj.tau;
    let lhs = traj.step_costs.iter().map(|c| c / (2.0 * tau)).sum::<f64>() + 0.5 * tau * speed.v_norm.iter().sum::<f64>();
    let e = &traj.step_energies;
    CheckRecord::new(CheckName::RefinedStepSum, lhs, e[0] - e[e.len() - 1], eps, String::new())
}

fn holder_states(n_states: usize, max_states: usize) -> Vec<usize> {
    if n_states <= max_states {
        return (0..n_states).collect();
    }
    let mut idx: Vec<usize> =
        (0..max_states).map(|i| ((i as f64) * (n_states - 1) as f64 / (max_states - 1) as f64).round() as usize).collect();
    idx.dedup();
    idx
}

pub fn check_holder(traj: &JkoTrajectory, max_states: usize) -> Result<CheckRecord> {
    let idx = holder_states(traj.steps.len(), max_states);
    let e = &traj.step_energies;
    // The bound follows from the telescoped step inequality with the energy
    // drop bounded by E(mu_0) - min(0, min_k E(mu_k)).
    let budget = e[0] - e.iter().cloned().fold(0.0, f64::min);
    let pairs: Vec<(usize, usize)> =
        idx.iter().enumerate().flat_map(|(a, &i)| idx[a + 1..].iter().map(move |&j| (i, j))).collect();
    let values = pairs
        .par_iter()
        .map(|&(i, j)| {
            let d = traj.model.wb2(&traj.steps[i], &traj.steps[j])?;
            let bound = (2.0 * budget * ((j - i) as f64 * traj.tau + traj.tau)).max(0.0).sqrt();
            Ok((d - bound, d, bound, i, j))
        })
        .collect::<Result<Vec<_>>>()?;
    let worst = values.into_iter().fold((f64::NEG_INFINITY, 0.0, 0.0, 0, 0), |a, b| if b.0 > a.0 { b } else { a });
    if pairs.is_empty() {
        return Ok(CheckRecord::new(CheckName::Holder, 0.0, 0.0, 1e-9, "single state".into()));
    }
    let (_, d, bound, i, j) = worst;
    Ok(CheckRecord::new(CheckName::Holder, d, bound, 1e-9, format!("{} pairs, worst ({i}, {j})", pairs.len())))
}

/// `r* = sqrt(2 alpha lambda^(alpha - 1) tau / (alpha - 1))`.
pub fn r_star(alpha: f64, lambda: f64, tau: f64) -> f64 {
    (2.0 * alpha * lambda.powf(alpha - 1.0) * tau / (alpha - 1.0)).sqrt()
}

fn power_params(energy: &EnergyFunctional) -> Option<(f64, f64)> {
    match energy.internal {
        Internal::Power { alpha, lambda } => Some((alpha, lambda)),
        Internal::Entropy { .. } => None,
    }
}

pub fn check_boundary_band(energy: &EnergyFunctional, traj: &JkoTrajectory) -> Result<CheckRecord> {
    let name = CheckName::BoundaryBand;
    let Some((alpha, lambda)) = power_params(energy) else {
        return Ok(CheckRecord::skipped(name, "r* is defined for power energies"));
    };
    if lambda <= 0.0 {
        return Ok(CheckRecord::skipped(name, "needs lambda > 0"));
    }
    if energy.potential.is_some() {
        return Ok(CheckRecord::skipped(name, "stated without a potential"));
    }
    let grid = traj.grid();
    let r = r_star(alpha, lambda, traj.tau) * (1.0 - grid.h());
    let band = if r > 0.0 { boundary_band(grid, r)? } else { Vec::new() };
    let mut zeros = 0usize;
    let mut min_band = f64::INFINITY;
    for step in &traj.steps[1..] {
        for &c in &band {
            let v = step.density()[c];
            min_band = min_band.min(v);
            if v <= 0.0 {
                zeros += 1;
            }
        }
    }
    Ok(CheckRecord::new(
        name,
        zeros as f64,
        0.0,
        0.0,
        format!("r* (1 - h) = {r:.6}, {} band cells, min density {min_band:.6e}", band.len()),
    ))
}

/// Lower and upper envelope at distance `d` from the boundary; `None` where no bound applies.
fn envelope(alpha: f64, lambda: f64, tau: f64, diam: f64, rstar_h: f64, d: f64) -> (Option<f64>, f64) {
    let k = alpha - 1.0;
    let upper = (lambda.powf(k) + 3.0 * k * diam * d / (2.0 * alpha * tau)).powf(1.0 / k);
    if lambda == 0.0 {
        return (None, upper);
    }
    let lower = if d < rstar_h { Some((lambda.powf(k) - k * d * d / (2.0 * alpha * tau)).max(0.0).powf(1.0 / k)) } else { None };
    (lower, upper)
}

/// Largest envelope violation without slack, and whether every cell passes
/// with one cell of slack in the distance.
pub fn envelope_violation(energy: &EnergyFunctional, traj: &JkoTrajectory) -> Option<(f64, bool, String)> {
    let (alpha, lambda) = power_params(energy)?;
    if energy.potential.is_some() {
        return None;
    }
    let grid = traj.grid();
    let geo = boundary_geometry(grid);
    let h = grid.h();
    let rstar_h = if lambda > 0.0 { r_star(alpha, lambda, traj.tau) * (1.0 - h) } else { 0.0 };
    let mut worst = 0.0f64;
    let mut where_ = (0, 0);
    let mut ok = true;
    for (k, step) in traj.steps.iter().enumerate().skip(1) {
        for (c, &r) in step.density().iter().enumerate() {
            let d = geo.dist[c];
            if lambda > 0.0 && d >= rstar_h {
                continue;
            }
            let (lo, hi) = envelope(alpha, lambda, traj.tau, geo.diam, rstar_h, d);
            let mut v = r - hi;
            if let Some(lo) = lo {
                v = v.max(lo - r);
            }
            if v > worst {
                worst = v;
                where_ = (k, c);
            }
            // One cell of slack: the envelopes evaluated one cell width further out
            // for the upper bound and further in for the lower bound.
            let (_, hi_s) = envelope(alpha, lambda, traj.tau, geo.diam, f64::INFINITY, d + h);
            let lo_s = if lambda > 0.0 { envelope(alpha, lambda, traj.tau, geo.diam, f64::INFINITY, d + h).0 } else { None };
            if r > hi_s || lo_s.is_some_and(|lo| r < lo) {
                ok = false;
            }
        }
    }
    let detail = if worst > 0.0 {
        format!("worst violation at step {} cell {}", where_.0, where_.1)
    } else {
        "no violation".to_string()
    };
    Some((worst, ok, detail))
}

pub fn check_envelopes(energy: &EnergyFunctional, traj: &JkoTrajectory) -> CheckRecord {
    match envelope_violation(energy, traj) {
        None => CheckRecord::skipped(CheckName::Envelopes, "stated for power energies without a potential"),
        Some((worst, ok, detail)) => {
            let mut rec = CheckRecord::new(CheckName::Envelopes, worst, 0.0, 0.0, detail);
            rec.slack_used = if ok { worst } else { 0.0 };
            rec.status = if ok { Status::Pass } else { Status::Fail };
            rec
        }
    }
}

pub fn check_edi(traj: &JkoTrajectory, speed: &SpeedProfile, eps: f64) -> CheckRecord {
    let (lhs, rhs) = edi_terms(traj, speed);
    CheckRecord::new(CheckName::Edi, lhs, rhs, eps, String::new())
}

fn lambda_positive(energy: &EnergyFunctional) -> bool {
    energy.lambda() > 0.0
}

/// `Theta_k >= ||v(rho_k)||` at steps whose minimizer is bounded away from 0.
pub fn check_metric_derivative(energy: &EnergyFunctional, traj: &JkoTrajectory, speed: &SpeedProfile, eps: f64) -> CheckRecord {
    let name = CheckName::MetricDerivative;
    if !lambda_positive(energy) {
        return CheckRecord::skipped(name, "needs lambda > 0");
    }
    let mut worst = (f64::NEG_INFINITY, 0.0, 0.0, 0);
    let mut used = 0;
    for k in 1..traj.steps.len() {
        let m = &traj.steps[k];
        if !(m.min_density() > 0.0 && m.max_density().is_finite()) {
            continue;
        }
        used += 1;
        let v = speed.v_norm[k - 1].sqrt();
        let theta = speed.theta[k - 1];
        if v - theta > worst.0 {
            worst = (v - theta, v, theta, k);
        }
    }
    if used == 0 {
        return CheckRecord::skipped(name, "no step with a positive minimum");
    }
    let (_, v, theta, k) = worst;
    CheckRecord::new(name, v, theta, eps, format!("{used} steps checked, {} skipped, worst step {k}", traj.n_steps() - used))
}

/// Steps with zero velocity norm must have zero metric speed.
pub fn check_metric_derivative_converse(traj: &JkoTrajectory, speed: &SpeedProfile) -> CheckRecord {
    let name = CheckName::MetricDerivativeConverse;
    let zero: Vec<usize> = (0..speed.v_norm.len()).filter(|&k| speed.v_norm[k] <= 1e-24).collect();
    if zero.is_empty() {
        return CheckRecord::skipped(name, "no step with vanishing velocity");
    }
    // A step cost at the level of the inner tolerance is zero speed.
    let slack = (2.0 * traj.inner_tol / traj.tau).sqrt();
    let theta = zero.iter().map(|&k| speed.theta[k]).fold(0.0, f64::max);
    CheckRecord::new(name, theta, 0.0, slack, format!("{} steps with vanishing velocity", zero.len()))
}

pub fn check_mass_bounds(energy: &EnergyFunctional, traj: &JkoTrajectory) -> CheckRecord {
    let grid = traj.grid();
    let vol = grid.domain().volume();
    let e0 = traj.step_energies[0];
    let alpha = match energy.internal {
        Internal::Power { alpha, .. } => alpha,
        Internal::Entropy { .. } => 1.0,
    };
    let mut worst = (f64::NEG_INFINITY, 0.0, 0.0, 0);
    for (k, m) in traj.steps.iter().enumerate() {
        // The internal energy is at most E(mu_0) minus the potential part of E(mu_k).
        let budget = e0 - (energy.evaluate_energy(m) - energy.internal_energy(m));
        let bound = energy.mass_bound(budget, vol);
        let value = m.lp_norm_pow(alpha).max(m.total_mass());
        if value - bound > worst.0 {
            worst = (value - bound, value, bound, k);
        }
    }
    let (_, value, bound, k) = worst;
    CheckRecord::new(CheckName::MassBounds, value, bound, 0.0, format!("worst step {k}"))
}

/// `Theta_k >= int |grad u|^2 / sqrt(int |grad u|^2 rho)` at steps where the
/// weighted norm is nonzero, for lambda = 0.
pub fn check_zero_boundary_speed(energy: &EnergyFunctional, traj: &JkoTrajectory, speed: &SpeedProfile, eps: f64) -> CheckRecord {
    let name = CheckName::ZeroBoundarySpeed;
    if energy.lambda() != 0.0 || energy.potential.is_some() {
        return CheckRecord::skipped(name, "stated for lambda = 0 without a potential");
    }
    let vol = traj.grid().cell_volume();
    let mut worst = (f64::NEG_INFINITY, 0.0, 0.0, 0);
    let mut used = 0;
    for k in 1..traj.steps.len() {
        let m = &traj.steps[k];
        let g2 = energy.diffusion_gradient_sq(m);
        let a: f64 = g2.iter().sum::<f64>() * vol;
        let b: f64 = g2.iter().zip(m.density()).map(|(g, r)| g * r).sum::<f64>() * vol;
        if !(b > 0.0) {
            continue;
        }
        used += 1;
        let bound = a / b.sqrt();
        let theta = speed.theta[k - 1];
        if bound - theta > worst.0 {
            worst = (bound - theta, bound, theta, k);
        }
    }
    if used == 0 {
        return CheckRecord::skipped(name, "no step with a nonzero weighted gradient");
    }
    let (_, bound, theta, k) = worst;
    CheckRecord::new(name, bound, theta, eps, format!("{used} steps checked, worst step {k}"))
}

/// Run the selected trajectory checks in parallel; records keep the selection order.
pub fn run_diagnostics(energy: &EnergyFunctional, traj: &JkoTrajectory, options: &DiagnosticsOptions) -> Result<DiagnosticsReport> {
    options.validate()?;
    let speed = speed_profile(energy, traj);
    let eps = eps_disc(options.c_disc, traj);
    let records = options
        .selected()
        .par_iter()
        .map(|&c| match c {
            CheckName::StepSum => Ok(check_step_sum(traj)),
            CheckName::RefinedStepSum => Ok(check_refined_step_sum(traj, &speed, eps)),
            CheckName::Holder => check_holder(traj, options.holder_max_states),
            CheckName::BoundaryBand => check_boundary_band(energy, traj),
            CheckName::Envelopes => Ok(check_envelopes(energy, traj)),
            CheckName::Edi => Ok(check_edi(traj, &speed, eps)),
            CheckName::MetricDerivative => Ok(check_metric_derivative(energy, traj, &speed, eps)),
            CheckName::MetricDerivativeConverse => Ok(check_metric_derivative_converse(traj, &speed)),
            CheckName::MassBounds => Ok(check_mass_bounds(energy, traj)),
            CheckName::ZeroBoundarySpeed => Ok(check_zero_boundary_speed(energy, traj, &speed, eps)),
            CheckName::WeakSolutionRate | CheckName::OracleAgreement => {
                Err(Error::InvalidArgument(format!("{c:?} is not a single-trajectory check")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = TrajectoryMeta {
        tau: traj.tau,
        h: traj.grid().h(),
        alpha: energy.alpha(),
        lambda: energy.lambda(),
        e0: traj.step_energies[0],
        n_steps: traj.n_steps(),
        eps_disc: eps,
    };
    Ok(DiagnosticsReport::from_records(meta, records))
}

/// Weak residuals on `[0, t_end]` for trajectories with decreasing time steps
/// from a common initial density, and the log-log slope against `tau`.
pub fn weak_solution_rate(energy: &EnergyFunctional, runs: &[&JkoTrajectory], basket: &[Bump], t_end: f64) -> Result<(Vec<f64>, f64)> {
    if runs.len() < 2 {
        return Err(Error::InvalidArgument("need at least two trajectories".into()));
    }
    let res = runs
        .iter()
        .map(|t| weak_residual(energy, &TimeSeries::from_trajectory(t), basket, 0.0, t_end))
        .collect::<Result<Vec<_>>>()?;
    let (first, last) = (0, runs.len() - 1);
    let slope = (res[first] / res[last]).ln() / (runs[first].tau / runs[last].tau).ln();
    Ok((res, slope))
}

pub fn check_weak_solution_rate(energy: &EnergyFunctional, runs: &[&JkoTrajectory], basket: &[Bump], t_end: f64) -> Result<CheckRecord> {
    let (res, slope) = weak_solution_rate(energy, runs, basket, t_end)?;
    let local = res
        .windows(2)
        .zip(runs.windows(2))
        .map(|(r, t)| (r[0] / r[1]).ln() / (t[0].tau / t[1].tau).ln())
        .fold(f64::INFINITY, f64::min);
    let monotone = res.windows(2).all(|w| w[1] < w[0]);
    let rate = if monotone { slope } else { local.min(0.0) };
    Ok(CheckRecord::new(CheckName::WeakSolutionRate, 0.4, rate, 0.0, format!("residuals {res:?}, slope {slope:.4}")))
}

/// `int |a - b|` for densities on the same grid, on nested 1D grids, or with
/// `b` on a grid that refines the grid of `a`.
pub fn l1_between(a: &DiscreteMeasure, b: &DiscreteMeasure) -> Result<f64> {
    if a.same_grid(b) {
        a.l1_distance(b)
    } else if a.grid().dim() == 1 && b.grid().dim() == 1 {
        l1_distance_1d(a, b)
    } else {
        a.l1_distance(&b.coarsen(a.grid().clone())?)
    }
}

/// Relative L1 distances `|rho_tau(t) - rho_ref(t)| / |rho_ref(t)|` at the
/// requested times, which must be among the oracle output times.
pub fn oracle_errors(traj: &JkoTrajectory, oracle: &OracleSolution, times: &[f64]) -> Result<Vec<f64>> {
    times
        .iter()
        .map(|&t| {
            let k = oracle
                .times
                .iter()
                .position(|&s| (s - t).abs() <= 1e-12 * t.abs().max(1.0))
                .ok_or_else(|| Error::InvalidArgument(format!("oracle has no output at t = {t}")))?;
            let reference = &oracle.densities[k];
            Ok(l1_between(traj.sample_at(t)?, reference)? / reference.total_mass().max(f64::MIN_POSITIVE))
        })
        .collect()
}

pub fn compare_to_oracle(traj: &JkoTrajectory, oracle: &OracleSolution, times: &[f64], rel_tol: f64) -> Result<CheckRecord> {
    let errs = oracle_errors(traj, oracle, times)?;
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    Ok(CheckRecord::new(CheckName::OracleAgreement, worst, rel_tol, 0.0, format!("relative L1 errors {errs:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Grid;
    use crate::jko::{run_scheme, JkoConfig};
    use crate::wb2::TransportModel;
    use std::sync::Arc;

    fn unit(n: usize) -> Arc<Grid> {
        Arc::new(Grid::unit_interval(n).unwrap())
    }

    fn sine(n: usize) -> DiscreteMeasure {
        DiscreteMeasure::from_fn(unit(n), |x| 1.0 + 0.5 * (2.0 * std::f64::consts::PI * x[0]).sin()).unwrap()
    }

    fn desk(n: usize, steps: usize) -> (EnergyFunctional, JkoTrajectory) {
        let e = EnergyFunctional::power(2.0, 1.0).unwrap();
        let traj = run_scheme(&e, &sine(n), &JkoConfig::new(1e-3, steps)).unwrap();
        (e, traj)
    }

    #[test]
    fn constant_trajectory_passes_everything() {
        let e = EnergyFunctional::power(2.0, 1.0).unwrap();
        let mu = DiscreteMeasure::constant(unit(16), 1.0).unwrap();
        let traj = run_scheme(&e, &mu, &JkoConfig::new(1e-3, 5)).unwrap();
        let rep = run_diagnostics(&e, &traj, &DiagnosticsOptions::default()).unwrap();
        assert!(rep.all_pass, "{rep:#?}");
        assert_eq!(rep.record(CheckName::StepSum).unwrap().lhs, 0.0);
        assert_eq!(rep.record(CheckName::MetricDerivativeConverse).unwrap().status, Status::Pass);
    }

    #[test]
    fn desk_run_passes_and_reports_are_reproducible() {
        let (e, traj) = desk(32, 10);
        let opts = DiagnosticsOptions { zero_boundary_speed: true, ..Default::default() };
        let rep = run_diagnostics(&e, &traj, &opts).unwrap();
        assert!(rep.all_pass, "{rep:#?}");
        assert_eq!(rep.record(CheckName::ZeroBoundarySpeed).unwrap().status, Status::Skipped);
        let again = run_diagnostics(&e, &traj, &opts).unwrap();
        assert_eq!(rep.to_json().unwrap(), again.to_json().unwrap());
        assert_eq!(rep.to_csv().unwrap(), again.to_csv().unwrap());
        assert_eq!(rep.to_csv().unwrap().lines().count(), rep.records.len() + 1);
    }

    #[test]
    fn r_star_formula() {
        assert!((r_star(2.0, 1.0, 0.02) - 0.08f64.sqrt()).abs() < 1e-15);
        assert!((r_star(2.0, 1.0, 0.08) - 2.0 * r_star(2.0, 1.0, 0.02)).abs() < 1e-15);
    }

    #[test]
    fn velocity_norm_matches_slope_bound() {
        let (e, traj) = desk(16, 3);
        let sp = speed_profile(&e, &traj);
        for (k, v) in sp.v_norm.iter().enumerate() {
            assert_eq!(*v, e.slope_lower_bound(&traj.steps[k + 1]));
        }
    }

    #[test]
    fn shifted_minimizer_fails_step_sum() {
        let (e, traj) = desk(32, 3);
        let mut steps = traj.steps.clone();
        let d = steps[0].density();
        let rolled: Vec<f64> = (0..d.len()).map(|i| d[(i + 8) % d.len()]).collect();
        steps[1] = DiscreteMeasure::new(steps[0].grid().clone(), rolled).unwrap();
        let bad = JkoTrajectory::from_steps(&e, steps, traj.tau, traj.model, traj.inner_tol).unwrap();
        assert_eq!(check_step_sum(&bad).status, Status::Fail);
        assert_eq!(check_holder(&bad, 101).unwrap().status, Status::Fail);
        let sp = speed_profile(&e, &bad);
        assert_eq!(check_edi(&bad, &sp, 0.0).status, Status::Fail);
    }

    #[test]
    fn inflated_density_fails_mass_bounds() {
        let (e, traj) = desk(16, 2);
        let mut bad = traj.clone();
        let big: Vec<f64> = bad.steps[2].density().iter().map(|r| 100.0 * r).collect();
        bad.steps[2] = DiscreteMeasure::new(bad.steps[2].grid().clone(), big).unwrap();
        assert_eq!(check_mass_bounds(&e, &traj).status, Status::Pass);
        assert_eq!(check_mass_bounds(&e, &bad).status, Status::Fail);
    }

    #[test]
    fn boundary_band_and_envelopes() {
        let e = EnergyFunctional::power(2.0, 1.0).unwrap();
        let mu = DiscreteMeasure::from_fn(unit(32), |x| if (0.3..0.7).contains(&x[0]) { 2.0 } else { 0.0 }).unwrap();
        let traj = run_scheme(&e, &mu, &JkoConfig::new(0.02, 1)).unwrap();
        assert_eq!(check_boundary_band(&e, &traj).unwrap().status, Status::Pass);
        assert_eq!(check_envelopes(&e, &traj).status, Status::Pass);
        // A step that keeps the empty band violates both.
        let frozen = JkoTrajectory::from_steps(&e, vec![mu.clone(), mu], 0.02, TransportModel::PiecewiseConstant, 1e-8).unwrap();
        assert_eq!(check_boundary_band(&e, &frozen).unwrap().status, Status::Fail);
        assert_eq!(check_envelopes(&e, &frozen).status, Status::Fail);
        let e0 = EnergyFunctional::power(2.0, 0.0).unwrap();
        assert_eq!(check_boundary_band(&e0, &frozen).unwrap().status, Status::Skipped);
    }

    #[test]
    fn zero_boundary_envelope_catches_boundary_spike() {
        let e = EnergyFunctional::power(2.0, 0.0).unwrap();
        let (_, traj) = desk(32, 2);
        let traj = JkoTrajectory::from_steps(&e, traj.steps, traj.tau, traj.model, traj.inner_tol).unwrap();
        let mut steps = traj.steps.clone();
        let mut d = steps[1].density().to_vec();
        d[0] = 1e3;
        steps[1] = DiscreteMeasure::new(steps[1].grid().clone(), d).unwrap();
        let bad = JkoTrajectory::from_steps(&e, steps, traj.tau, traj.model, traj.inner_tol).unwrap();
        assert_eq!(check_envelopes(&e, &bad).status, Status::Fail);
    }

    #[test]
    fn options_reject_bad_values() {
        let bad = DiagnosticsOptions { c_disc: -1.0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config { .. })));
        let bad = DiagnosticsOptions { checks: vec![CheckName::OracleAgreement], ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn oracle_comparison_on_steady_state() {
        let e = EnergyFunctional::power(2.0, 1.0).unwrap();
        let mu = DiscreteMeasure::constant(unit(16), 1.0).unwrap();
        let traj = run_scheme(&e, &mu, &JkoConfig::new(1e-3, 4)).unwrap();
        let fine = DiscreteMeasure::constant(unit(64), 1.0).unwrap();
        let sol = crate::oracle::oracle_solve(&e, &crate::oracle::OracleConfig::uniform(4e-3, 2), &fine).unwrap();
        let rec = compare_to_oracle(&traj, &sol, &[2e-3, 4e-3], 1e-12).unwrap();
        assert_eq!(rec.lhs, 0.0);
        assert!(oracle_errors(&traj, &sol, &[1e-3]).is_err());
    }
}
