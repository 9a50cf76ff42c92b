//! Log-domain scaling iterations for entropically regularized reservoir transport.
//!
//! The plan is `gamma_ij = exp((f_i + g_j - c_ij)/eps)`, with reservoir entries
//! `exp((f_i - c_iR)/eps)` and `exp((g_j - c_Rj)/eps)`: the reservoir potential is
//! pinned to zero because its marginal is unconstrained.

use rayon::prelude::*;

use super::{TransportPlan, TransportProblem};
use crate::error::{Error, Result};

/// Rows at or above this size are updated in parallel.
const PAR_THRESHOLD: usize = 256;

/// Costs of one problem laid out for the scaling updates.
#[derive(Clone, Debug)]
pub struct GibbsKernel {
    pub ns: usize,
    pub nt: usize,
    pub eps: f64,
    cost: Vec<f64>,
    cost_t: Vec<f64>,
    to_res: Vec<f64>,
    from_res: Vec<f64>,
}

fn log_sum_exp(terms: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = terms.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + terms.map(|t| (t - m).exp()).sum::<f64>().ln()
}

impl GibbsKernel {
    pub fn new(problem: &TransportProblem, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {eps}")));
        }
        let (ns, nt) = (problem.source_len(), problem.target_len());
        let mut cost = vec![0.0; ns * nt];
        let mut cost_t = vec![0.0; ns * nt];
        for i in 0..ns {
            for j in 0..nt {
                let c = problem.cost_interior(i, j);
                cost[i * nt + j] = c;
                cost_t[j * ns + i] = c;
            }
        }
        let to_res = (0..ns).map(|i| problem.cost_to_reservoir(i)).collect();
        let from_res = (0..nt).map(|j| problem.cost_from_reservoir(j)).collect();
        Ok(Self { ns, nt, eps, cost, cost_t, to_res, from_res })
    }

    /// `log sum_j exp((g_j - c_ij)/eps) + exp(-c_iR/eps)` for every source `i`.
    pub fn row_log_sums(&self, g: &[f64]) -> Vec<f64> {
        let eps = self.eps;
        let row = |i: usize| {
            let c = &self.cost[i * self.nt..(i + 1) * self.nt];
            let terms = c.iter().zip(g).map(move |(c, g)| (g - c) / eps);
            log_sum_exp(terms.chain(std::iter::once(-self.to_res[i] / eps)))
        };
        if self.ns >= PAR_THRESHOLD {
            (0..self.ns).into_par_iter().map(row).collect()
        } else {
            (0..self.ns).map(row).collect()
        }
    }

    /// `log sum_i exp((f_i - c_ij)/eps) + exp(-c_Rj/eps)` for every target `j`.
    pub fn col_log_sums(&self, f: &[f64]) -> Vec<f64> {
        let eps = self.eps;
        let col = |j: usize| {
            let c = &self.cost_t[j * self.ns..(j + 1) * self.ns];
            let terms = c.iter().zip(f).map(move |(c, f)| (f - c) / eps);
            log_sum_exp(terms.chain(std::iter::once(-self.from_res[j] / eps)))
        };
        if self.nt >= PAR_THRESHOLD {
            (0..self.nt).into_par_iter().map(col).collect()
        } else {
            (0..self.nt).map(col).collect()
        }
    }

    /// Potential that makes the marginal with log-sums `logs` equal `masses`.
    pub fn match_marginal(&self, masses: &[f64], logs: &[f64]) -> Vec<f64> {
        masses
            .iter()
            .zip(logs)
            .map(|(&m, &l)| if m > 0.0 { self.eps * (m.ln() - l) } else { f64::NEG_INFINITY })
            .collect()
    }

    /// Row sums (interior plus reservoir) of the plan for the given potentials.
    pub fn row_sums(&self, f: &[f64], g: &[f64]) -> Vec<f64> {
        let logs = self.row_log_sums(g);
        f.iter().zip(logs).map(|(f, l)| ((f / self.eps) + l).exp()).collect()
    }

    /// Column sums (interior plus reservoir) of the plan for the given potentials.
    pub fn col_sums(&self, f: &[f64], g: &[f64]) -> Vec<f64> {
        let logs = self.col_log_sums(f);
        g.iter().zip(logs).map(|(g, l)| ((g / self.eps) + l).exp()).collect()
    }

    /// Materialize the plan, dropping entries below `1e-300`.
    pub fn plan(&self, f: &[f64], g: &[f64]) -> TransportPlan {
        let eps = self.eps;
        let mut interior = Vec::new();
        for i in 0..self.ns {
            for j in 0..self.nt {
                let v = ((f[i] + g[j] - self.cost[i * self.nt + j]) / eps).exp();
                if v > 1e-300 {
                    interior.push((i, j, v));
                }
            }
        }
        let to_reservoir = f.iter().zip(&self.to_res).map(|(f, c)| ((f - c) / eps).exp()).collect();
        let from_reservoir = g.iter().zip(&self.from_res).map(|(g, c)| ((g - c) / eps).exp()).collect();
        TransportPlan { interior, to_reservoir, from_reservoir, total_cost: 0.0 }
    }
}

/// Result of [`solve_entropic`].
#[derive(Clone, Debug)]
pub struct EntropicSolution {
    /// Feasible plan obtained by rounding the scaled plan onto the marginals.
    pub plan: TransportPlan,
    /// Transport cost of `plan`; an upper estimate of the exact optimum.
    pub cost: f64,
    /// L1 source-marginal violation of the unrounded plan at exit.
    pub marginal_violation: f64,
    pub iterations: usize,
}

/// Entropic reservoir transport by alternating marginal scaling.
///
/// The returned plan is made exactly feasible by routing each source row's
/// surplus or deficit through the reservoir, so its cost never undercuts the
/// exact optimum. The entropic bias of the cost is `O(eps log(1/eps))`.
pub fn solve_entropic(
    problem: &TransportProblem,
    eps: f64,
    max_iters: usize,
    tol: f64,
) -> Result<EntropicSolution> {
    let kernel = GibbsKernel::new(problem, eps)?;
    let src = problem.source_masses();
    let tgt = problem.target_masses();
    let scale = src.iter().chain(tgt).sum::<f64>().max(f64::MIN_POSITIVE);
    let mut f = vec![0.0; kernel.ns];
    let mut g = vec![0.0; kernel.nt];
    let mut violation = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        f = kernel.match_marginal(src, &kernel.row_log_sums(&g));
        g = kernel.match_marginal(tgt, &kernel.col_log_sums(&f));
        let rows = kernel.row_sums(&f, &g);
        violation = rows.iter().zip(src).map(|(r, m)| (r - m).abs()).sum::<f64>();
        if violation <= tol * scale {
            break;
        }
    }
    if violation > tol * scale {
        return Err(Error::NotConverged { iterations, residual: violation });
    }
    let mut plan = kernel.plan(&f, &g);
    round_to_marginals(problem, &mut plan);
    plan.total_cost = plan.recompute_cost(problem);
    Ok(EntropicSolution { cost: plan.total_cost, plan, marginal_violation: violation, iterations })
}

/// Make a plan with exact target marginals feasible on the source side too,
/// using the unconstrained reservoir to absorb the differences.
fn round_to_marginals(problem: &TransportProblem, plan: &mut TransportPlan) {
    let src = problem.source_masses();
    let tgt = problem.target_masses();
    let mut row = plan.to_reservoir.clone();
    for &(i, _, v) in &plan.interior {
        row[i] += v;
    }
    let factor: Vec<f64> =
        row.iter().zip(src).map(|(&r, &m)| if r > m && r > 0.0 { m / r } else { 1.0 }).collect();
    for (i, t) in plan.to_reservoir.iter_mut().enumerate() {
        *t *= factor[i];
    }
    for e in plan.interior.iter_mut() {
        e.2 *= factor[e.0];
    }
    let mut row = plan.to_reservoir.clone();
    let mut col = plan.from_reservoir.clone();
    for &(i, j, v) in &plan.interior {
        row[i] += v;
        col[j] += v;
    }
    for i in 0..row.len() {
        plan.to_reservoir[i] += (src[i] - row[i]).max(0.0);
    }
    for j in 0..col.len() {
        plan.from_reservoir[j] += (tgt[j] - col[j]).max(0.0);
    }
}
