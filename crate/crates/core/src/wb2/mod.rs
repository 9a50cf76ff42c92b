//! Quadratic transport in which the domain boundary is an infinite reservoir.
//!
//! Mass may leave a cell `x` to the boundary at cost `d(x, boundary)^2` and
//! enter a cell the same way; moving mass between cells costs `|x - y|^2`.
//! Boundary-to-boundary exchange is free and never represented.

pub mod entropic;
pub mod flow;
pub mod line;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxDomain;
use crate::measures::DiscreteMeasure;

pub use entropic::{solve_entropic, EntropicSolution};
pub use line::{couple, wb2_squared_1d, LineCoupling, LineMeasure};

/// Default factor turning real costs into integers inside the flow solver.
pub const DEFAULT_COST_SCALE: f64 = 1e12;

/// Point masses in a box.
#[derive(Clone, Debug, PartialEq)]
pub struct Atoms {
    dim: usize,
    points: Vec<f64>,
    masses: Vec<f64>,
}

impl Atoms {
    pub fn new(dim: usize, atoms: &[(Vec<f64>, f64)]) -> Result<Self> {
        let mut points = Vec::with_capacity(atoms.len() * dim);
        let mut masses = Vec::with_capacity(atoms.len());
        for (index, (x, m)) in atoms.iter().enumerate() {
            if x.len() != dim {
                return Err(Error::InvalidArgument(format!(
                    "atom {index} has {} coordinates, expected {dim}",
                    x.len()
                )));
            }
            if !(m.is_finite() && *m >= 0.0) {
                return Err(Error::NegativeValue { index, value: *m });
            }
            points.extend_from_slice(x);
            masses.push(*m);
        }
        Ok(Self { dim, points, masses })
    }

    /// Cell centres of a grid density, weighted by cell masses.
    pub fn from_measure(measure: &DiscreteMeasure) -> Self {
        let grid = measure.grid();
        let points = grid.centers().flatten().copied().collect();
        Self { dim: grid.dim(), points, masses: measure.masses() }
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }
}

/// Source and target point masses in a common box.
#[derive(Clone, Debug)]
pub struct TransportProblem {
    domain: BoxDomain,
    source: Atoms,
    target: Atoms,
    to_res: Vec<f64>,
    from_res: Vec<f64>,
}

impl TransportProblem {
    pub fn new(domain: BoxDomain, source: Atoms, target: Atoms) -> Result<Self> {
        if source.is_empty() && target.is_empty() {
            return Err(Error::EmptyProblem);
        }
        for atoms in [&source, &target] {
            if atoms.dim != domain.dim() {
                return Err(Error::InvalidArgument("atom dimension differs from the domain".into()));
            }
            for i in 0..atoms.len() {
                let x = atoms.point(i);
                let inside = x.iter().zip(&domain.lo).zip(&domain.hi).all(|((x, lo), hi)| x >= lo && x <= hi);
                if !inside {
                    return Err(Error::InvalidArgument(format!("atom at {x:?} lies outside the domain")));
                }
            }
        }
        let to_res = (0..source.len()).map(|i| domain.dist(source.point(i)).powi(2)).collect();
        let from_res = (0..target.len()).map(|j| domain.dist(target.point(j)).powi(2)).collect();
        Ok(Self { domain, source, target, to_res, from_res })
    }

    /// Problem between two densities on the same grid, with cell-centre atoms.
    pub fn from_measures(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<Self> {
        if !mu.same_grid(nu) {
            return Err(Error::GridMismatch("transport needs both densities on one grid".into()));
        }
        Self::new(mu.grid().domain().clone(), Atoms::from_measure(mu), Atoms::from_measure(nu))
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn source(&self) -> &Atoms {
        &self.source
    }

    pub fn target(&self) -> &Atoms {
        &self.target
    }

    pub fn source_len(&self) -> usize {
        self.source.len()
    }

    pub fn target_len(&self) -> usize {
        self.target.len()
    }

    pub fn source_masses(&self) -> &[f64] {
        self.source.masses()
    }

    pub fn target_masses(&self) -> &[f64] {
        self.target.masses()
    }

    pub fn cost_interior(&self, i: usize, j: usize) -> f64 {
        self.source.point(i).iter().zip(self.target.point(j)).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    pub fn cost_to_reservoir(&self, i: usize) -> f64 {
        self.to_res[i]
    }

    pub fn cost_from_reservoir(&self, j: usize) -> f64 {
        self.from_res[j]
    }
}

/// Sparse coupling with reservoir outflow and inflow.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    /// `(source, target, mass)` with positive mass.
    pub interior: Vec<(usize, usize, f64)>,
    /// Mass each source cell sends to the boundary.
    pub to_reservoir: Vec<f64>,
    /// Mass each target cell receives from the boundary.
    pub from_reservoir: Vec<f64>,
    pub total_cost: f64,
}

impl TransportPlan {
    pub fn recompute_cost(&self, problem: &TransportProblem) -> f64 {
        let inner: f64 = self.interior.iter().map(|&(i, j, v)| v * problem.cost_interior(i, j)).sum();
        let out: f64 = self.to_reservoir.iter().enumerate().map(|(i, v)| v * problem.cost_to_reservoir(i)).sum();
        let inn: f64 = self.from_reservoir.iter().enumerate().map(|(j, v)| v * problem.cost_from_reservoir(j)).sum();
        inner + out + inn
    }

    /// Largest absolute deviation of either marginal from the problem's masses.
    pub fn marginal_violation(&self, problem: &TransportProblem) -> f64 {
        let mut row = self.to_reservoir.clone();
        let mut col = self.from_reservoir.clone();
        for &(i, j, v) in &self.interior {
            row[i] += v;
            col[j] += v;
        }
        let r = row.iter().zip(problem.source_masses()).map(|(a, b)| (a - b).abs());
        let c = col.iter().zip(problem.target_masses()).map(|(a, b)| (a - b).abs());
        r.chain(c).fold(0.0, f64::max)
    }

    pub fn mass_to_boundary(&self) -> f64 {
        self.to_reservoir.iter().sum()
    }

    pub fn mass_from_boundary(&self) -> f64 {
        self.from_reservoir.iter().sum()
    }

    /// CSV with columns `src_index,dst_index,mass`; the reservoir is index `-1`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["src_index", "dst_index", "mass"]).map_err(csv_err)?;
        let fmt = |v: f64| format!("{v:.16e}");
        for &(i, j, v) in &self.interior {
            w.write_record([i.to_string(), j.to_string(), fmt(v)]).map_err(csv_err)?;
        }
        for (i, &v) in self.to_reservoir.iter().enumerate().filter(|(_, v)| **v > 0.0) {
            w.write_record([i.to_string(), "-1".into(), fmt(v)]).map_err(csv_err)?;
        }
        for (j, &v) in self.from_reservoir.iter().enumerate().filter(|(_, v)| **v > 0.0) {
            w.write_record(["-1".into(), j.to_string(), fmt(v)]).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Csv(e.to_string())
}

/// Kantorovich potentials with the reservoir potential fixed to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct DualPotentials {
    pub phi_source: Vec<f64>,
    pub psi_target: Vec<f64>,
}

impl DualPotentials {
    /// `sum phi_i m_i + sum psi_j n_j`.
    pub fn dual_value(&self, problem: &TransportProblem) -> f64 {
        let a: f64 = self.phi_source.iter().zip(problem.source_masses()).map(|(p, m)| p * m).sum();
        let b: f64 = self.psi_target.iter().zip(problem.target_masses()).map(|(p, m)| p * m).sum();
        a + b
    }

    /// Largest violation of `phi_i + psi_j <= c_ij`, `phi_i <= c_iR`, `psi_j <= c_Rj`.
    pub fn feasibility_violation(&self, problem: &TransportProblem) -> f64 {
        let mut worst = 0.0f64;
        for (i, p) in self.phi_source.iter().enumerate() {
            worst = worst.max(p - problem.cost_to_reservoir(i));
            for (j, q) in self.psi_target.iter().enumerate() {
                worst = worst.max(p + q - problem.cost_interior(i, j));
            }
        }
        for (j, q) in self.psi_target.iter().enumerate() {
            worst = worst.max(q - problem.cost_from_reservoir(j));
        }
        worst
    }
}

/// Optimal plan, dual potentials and optimal cost.
#[derive(Clone, Debug)]
pub struct ExactSolution {
    pub plan: TransportPlan,
    pub duals: DualPotentials,
    pub cost: f64,
}

fn scaled(c: f64, scale: f64) -> i64 {
    (c * scale).round() as i64
}

fn check_scale(problem: &TransportProblem, scale: f64) -> Result<()> {
    let nodes = (problem.source_len() + problem.target_len() + 2) as f64;
    let max_cost = problem.domain().diam().powi(2);
    if !(scale > 0.0) || max_cost * scale * nodes > 1e18 {
        return Err(Error::InvalidArgument(format!(
            "cost scale {scale:e} overflows integer costs for this problem"
        )));
    }
    Ok(())
}

/// Exact optimum by min-cost flow with the default cost scale.
pub fn solve_exact(problem: &TransportProblem) -> Result<ExactSolution> {
    solve_exact_scaled(problem, DEFAULT_COST_SCALE)
}

/// Exact optimum by min-cost flow; costs are rounded to multiples of `1/scale`.
///
/// Each side gets one reservoir node. The source reservoir supplies
/// `2 (M + N)` and the target reservoir absorbs that plus `M - N`, with a free
/// arc between them carrying the surplus; that arc is dropped from the plan.
pub fn solve_exact_scaled(problem: &TransportProblem, scale: f64) -> Result<ExactSolution> {
    check_scale(problem, scale)?;
    let (ns, nt) = (problem.source_len(), problem.target_len());
    let (m, n) = (problem.source.total_mass(), problem.target.total_mass());
    let reserve = 2.0 * (m + n) + 1.0;
    let mut supply = problem.source_masses().to_vec();
    supply.push(reserve);
    let mut demand = problem.target_masses().to_vec();
    demand.push(reserve + m - n);
    let cols = nt + 1;
    let mut cost = vec![None; (ns + 1) * cols];
    for i in 0..ns {
        for j in 0..nt {
            cost[i * cols + j] = Some(scaled(problem.cost_interior(i, j), scale));
        }
        cost[i * cols + nt] = Some(scaled(problem.cost_to_reservoir(i), scale));
    }
    for j in 0..nt {
        cost[ns * cols + j] = Some(scaled(problem.cost_from_reservoir(j), scale));
    }
    cost[ns * cols + nt] = Some(0);
    let sol = flow::solve_transport(&supply, &demand, &cost)?;

    let mut interior = Vec::new();
    for i in 0..ns {
        for j in 0..nt {
            let v = sol.flow[i * cols + j];
            if v > 0.0 {
                interior.push((i, j, v));
            }
        }
    }
    let to_reservoir = (0..ns).map(|i| sol.flow[i * cols + nt]).collect();
    let from_reservoir = (0..nt).map(|j| sol.flow[ns * cols + j]).collect();
    let mut plan = TransportPlan { interior, to_reservoir, from_reservoir, total_cost: 0.0 };
    plan.total_cost = plan.recompute_cost(problem);
    // Shift so the reservoir potentials vanish; the slack arc is saturated
    // with positive flow, so u_R + v_R = 0.
    let (u_r, v_r) = (sol.u[ns], sol.v[nt]);
    let phi_source = (0..ns).map(|i| (sol.u[i] + v_r) as f64 / scale).collect();
    let psi_target = (0..nt).map(|j| (sol.v[j] + u_r) as f64 / scale).collect();
    Ok(ExactSolution { cost: plan.total_cost, plan, duals: DualPotentials { phi_source, psi_target } })
}

/// Classical quadratic transport between equal masses: the same flow solver
/// with every reservoir arc removed. The plan has empty reservoir vectors.
pub fn solve_w2(problem: &TransportProblem) -> Result<ExactSolution> {
    check_scale(problem, DEFAULT_COST_SCALE)?;
    let (m, n) = (problem.source.total_mass(), problem.target.total_mass());
    if (m - n).abs() > 1e-12 * m.max(n) {
        return Err(Error::InvalidArgument(format!("unequal masses {m} and {n}")));
    }
    let (ns, nt) = (problem.source_len(), problem.target_len());
    let cost: Vec<Option<i64>> = (0..ns * nt)
        .map(|k| Some(scaled(problem.cost_interior(k / nt, k % nt), DEFAULT_COST_SCALE)))
        .collect();
    let sol = flow::solve_transport(problem.source_masses(), problem.target_masses(), &cost)?;
    let interior = (0..ns * nt).filter(|&k| sol.flow[k] > 0.0).map(|k| (k / nt, k % nt, sol.flow[k])).collect();
    let mut plan =
        TransportPlan { interior, to_reservoir: vec![0.0; ns], from_reservoir: vec![0.0; nt], total_cost: 0.0 };
    plan.total_cost = plan.recompute_cost(problem);
    let duals = DualPotentials {
        phi_source: sol.u.iter().map(|&u| u as f64 / DEFAULT_COST_SCALE).collect(),
        psi_target: sol.v.iter().map(|&v| v as f64 / DEFAULT_COST_SCALE).collect(),
    };
    Ok(ExactSolution { cost: plan.total_cost, plan, duals })
}

/// Reservoir distance between two densities on the same grid, treating each
/// cell as an atom at its centre.
pub fn wb2_distance(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<f64> {
    Ok(solve_exact(&TransportProblem::from_measures(mu, nu)?)?.cost.max(0.0).sqrt())
}

/// Outcome of the Lipschitz duality bound
/// `|int zeta dmu - int zeta dnu| <= Lip(zeta) sqrt(mu(O) + nu(O)) Wb2(mu, nu)`.
#[derive(Clone, Copy, Debug)]
pub struct DualityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Evaluate the duality bound for per-cell samples of a compactly supported
/// `zeta` with Lipschitz constant `lip`.
pub fn duality_test(mu: &DiscreteMeasure, nu: &DiscreteMeasure, zeta: &[f64], lip: f64) -> Result<DualityCheck> {
    if zeta.len() != mu.len() {
        return Err(Error::GridMismatch("zeta samples do not match the grid".into()));
    }
    let w = wb2_distance(mu, nu)?;
    let a: f64 = mu.masses().iter().zip(zeta).map(|(m, z)| m * z).sum();
    let b: f64 = nu.masses().iter().zip(zeta).map(|(m, z)| m * z).sum();
    let lhs = (a - b).abs();
    let rhs = lip * (mu.total_mass() + nu.total_mass()).sqrt() * w;
    Ok(DualityCheck { lhs, rhs, holds: lhs <= rhs + 1e-9 })
}

/// How a grid density is read as a measure when computing transport costs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportModel {
    /// Each cell is a point mass at its centre; exact by min-cost flow.
    Atomic,
    /// Each cell is uniform over its extent; exact on intervals only.
    #[default]
    PiecewiseConstant,
}

impl TransportModel {
    /// Default model for a grid dimension: uniform cells on intervals, atoms otherwise.
    pub fn for_dim(dim: usize) -> Self {
        if dim == 1 {
            TransportModel::PiecewiseConstant
        } else {
            TransportModel::Atomic
        }
    }

    pub fn check_dim(&self, dim: usize) -> Result<()> {
        if *self == TransportModel::PiecewiseConstant && dim != 1 {
            return Err(Error::InvalidArgument("piecewise-constant transport needs a 1D grid".into()));
        }
        Ok(())
    }

    /// Squared reservoir distance under this model.
    pub fn wb2_squared(&self, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<f64> {
        match self {
            TransportModel::Atomic => Ok(solve_exact(&TransportProblem::from_measures(mu, nu)?)?.cost),
            TransportModel::PiecewiseConstant => {
                if !mu.same_grid(nu) {
                    return Err(Error::GridMismatch("transport needs both densities on one grid".into()));
                }
                wb2_squared_1d(mu, nu)
            }
        }
    }

    pub fn wb2(&self, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<f64> {
        Ok(self.wb2_squared(mu, nu)?.max(0.0).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Grid;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn line_problem(src: &[(f64, f64)], tgt: &[(f64, f64)]) -> TransportProblem {
        let a = |v: &[(f64, f64)]| Atoms::new(1, &v.iter().map(|(x, m)| (vec![*x], *m)).collect::<Vec<_>>()).unwrap();
        TransportProblem::new(BoxDomain::unit(1), a(src), a(tgt)).unwrap()
    }

    fn random_measure(rng: &mut ChaCha8Rng, g: &Arc<Grid>, zero_prob: f64) -> DiscreteMeasure {
        let d = (0..g.len()).map(|_| if rng.gen::<f64>() < zero_prob { 0.0 } else { rng.gen::<f64>() * 2.0 }).collect();
        DiscreteMeasure::new(g.clone(), d).unwrap()
    }

    #[test]
    fn point_mass_examples() {
        let p = line_problem(&[(0.1, 1.0)], &[(0.9, 1.0)]);
        let s = solve_exact(&p).unwrap();
        assert_abs_diff_eq!(s.cost, 0.02, epsilon = 1e-12);
        assert!(s.plan.interior.is_empty());
        assert_abs_diff_eq!(s.plan.to_reservoir[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.plan.from_reservoir[0], 1.0, epsilon = 1e-15);

        let p = line_problem(&[(0.1, 0.5), (0.9, 0.5)], &[(0.1, 0.5), (0.9, 0.25)]);
        let s = solve_exact(&p).unwrap();
        assert_abs_diff_eq!(s.cost, 0.0025, epsilon = 1e-12);
        assert_abs_diff_eq!(s.plan.to_reservoir[1], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn identical_measures_cost_nothing() {
        let g = Arc::new(Grid::unit_interval(8).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mu = random_measure(&mut rng, &g, 0.2);
        let s = solve_exact(&TransportProblem::from_measures(&mu, &mu).unwrap()).unwrap();
        assert_eq!(s.cost, 0.0);
        assert_eq!(s.plan.mass_to_boundary(), 0.0);
    }

    #[test]
    fn duals_certify_the_plan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for dim in [1, 2] {
            let g = Arc::new(crate::geometry::build_grid(dim, &vec![(0.0, 1.0); dim], if dim == 1 { 10 } else { 3 }).unwrap());
            for _ in 0..20 {
                let mu = random_measure(&mut rng, &g, 0.3);
                let nu = random_measure(&mut rng, &g, 0.3);
                let p = TransportProblem::from_measures(&mu, &nu).unwrap();
                let s = solve_exact(&p).unwrap();
                assert!(s.plan.marginal_violation(&p) < 1e-13);
                assert!(s.duals.feasibility_violation(&p) < 1e-11);
                assert_abs_diff_eq!(s.duals.dual_value(&p), s.cost, epsilon = 1e-9 * (1.0 + s.cost));
                for &(i, j, _) in &s.plan.interior {
                    let gap = p.cost_interior(i, j) - s.duals.phi_source[i] - s.duals.psi_target[j];
                    assert!(gap.abs() < 1e-11);
                }
                for (i, v) in s.plan.to_reservoir.iter().enumerate() {
                    if *v > 0.0 {
                        assert!((p.cost_to_reservoir(i) - s.duals.phi_source[i]).abs() < 1e-11);
                    }
                }
                for (j, v) in s.plan.from_reservoir.iter().enumerate() {
                    if *v > 0.0 {
                        assert!((p.cost_from_reservoir(j) - s.duals.psi_target[j]).abs() < 1e-11);
                    }
                }
            }
        }
    }

    #[test]
    fn flow_solver_and_quantile_route_agree_on_atoms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let mut pick = |k: usize| -> Vec<(f64, f64)> {
                (0..k).map(|_| (rng.gen_range(0.0..=1.0), rng.gen_range(0.0..1.0))).collect()
            };
            let (src, tgt) = (pick(5), pick(4));
            let exact = solve_exact(&line_problem(&src, &tgt)).unwrap().cost;
            let lm = |v: &[(f64, f64)]| LineMeasure::from_atoms(0.0, 1.0, v).unwrap();
            let q = couple(&lm(&src), &lm(&tgt)).unwrap().cost;
            assert_abs_diff_eq!(exact, q, epsilon = 1e-10);
        }
    }

    #[test]
    fn below_classical_distance() {
        let g = Arc::new(Grid::unit_interval(8).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..30 {
            let mu = random_measure(&mut rng, &g, 0.2);
            let nu = random_measure(&mut rng, &g, 0.2);
            let scale = mu.total_mass() / nu.total_mass();
            let nu = DiscreteMeasure::new(g.clone(), nu.density().iter().map(|d| d * scale).collect()).unwrap();
            let p = TransportProblem::from_measures(&mu, &nu).unwrap();
            let w2 = solve_w2(&p).unwrap();
            assert!(w2.plan.marginal_violation(&p) < 1e-12);
            assert!(solve_exact(&p).unwrap().cost <= w2.cost + 1e-12);
        }
    }

    #[test]
    fn farther_source_never_costs_less() {
        let tgt = [(0.5, 1.0)];
        let mut prev = 0.0;
        for k in 0..=10 {
            let x = 0.5 - 0.04 * k as f64;
            let c = solve_exact(&line_problem(&[(x, 1.0)], &tgt)).unwrap().cost;
            assert!(c >= prev - 1e-15);
            prev = c;
        }
    }

    #[test]
    fn entropic_bounds_and_monotonicity() {
        let p = line_problem(&[(0.1, 1.0)], &[(0.9, 1.0)]);
        let mut prev = f64::INFINITY;
        for eps in [1e-2, 1e-3, 1e-4] {
            let s = solve_entropic(&p, eps, 10_000, 1e-12).unwrap();
            assert!(s.cost >= 0.02 - 1e-12, "eps {eps}: {}", s.cost);
            assert!(s.cost <= prev + 1e-15);
            assert!(s.plan.marginal_violation(&p) < 1e-12);
            prev = s.cost;
        }
        assert!(prev - 0.02 < 1e-3);

        let g = Arc::new(Grid::unit_interval(8).unwrap());
        let mu = DiscreteMeasure::from_fn(g, |x| 1.0 + x[0]).unwrap();
        let p = TransportProblem::from_measures(&mu, &mu).unwrap();
        let s = solve_entropic(&p, 1e-3, 10_000, 1e-6).unwrap();
        assert!(s.cost <= 1e-2);
        assert!(s.marginal_violation <= 1e-6 * 2.0 * mu.total_mass());
    }

    #[test]
    fn entropic_reports_non_convergence() {
        let p = line_problem(&[(0.1, 1.0), (0.6, 0.5)], &[(0.9, 1.0), (0.4, 0.3)]);
        match solve_entropic(&p, 1e-3, 1, 1e-14) {
            Err(Error::NotConverged { iterations, residual }) => {
                assert_eq!(iterations, 1);
                assert!(residual > 0.0);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Atoms::new(1, &[(vec![0.5], -1.0)]).is_err());
        let empty = Atoms::new(1, &[]).unwrap();
        assert!(matches!(
            TransportProblem::new(BoxDomain::unit(1), empty.clone(), empty),
            Err(Error::EmptyProblem)
        ));
        let outside = Atoms::new(1, &[(vec![1.5], 1.0)]).unwrap();
        assert!(TransportProblem::new(BoxDomain::unit(1), outside.clone(), outside).is_err());
        let a = DiscreteMeasure::constant(Arc::new(Grid::unit_interval(4).unwrap()), 1.0).unwrap();
        let b = DiscreteMeasure::constant(Arc::new(Grid::unit_interval(5).unwrap()), 1.0).unwrap();
        assert!(wb2_distance(&a, &b).is_err());
    }

    #[test]
    fn duality_bound_on_random_instances() {
        let g = Arc::new(Grid::unit_interval(16).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..200 {
            let mu = random_measure(&mut rng, &g, 0.3);
            let nu = random_measure(&mut rng, &g, 0.3);
            // Tent supported in (0.2, 0.8) with slope `k`.
            let k: f64 = rng.gen_range(0.1..5.0);
            let zeta: Vec<f64> = g.centers().map(|x| k * (0.3 - (x[0] - 0.5).abs()).max(0.0)).collect();
            let check = duality_test(&mu, &nu, &zeta, k).unwrap();
            assert!(check.holds, "{check:?}");
        }
        let mu = random_measure(&mut rng, &g, 0.0);
        assert_eq!(duality_test(&mu, &mu, &[1.0; 16], 0.0).unwrap().lhs, 0.0);
    }

    #[test]
    fn plan_csv_marks_reservoir() {
        let p = line_problem(&[(0.1, 1.0)], &[(0.9, 1.0)]);
        let s = solve_exact(&p).unwrap();
        let mut buf = Vec::new();
        s.plan.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("src_index,dst_index,mass\n"));
        assert!(text.contains("0,-1,1.0000000000000000e0"));
        assert!(text.contains("-1,0,1.0000000000000000e0"));
    }
}
