//! Successive-shortest-path solver for dense transportation problems.
//!
//! Arc costs are integers, so reduced costs stay exactly nonnegative and the
//! returned node potentials certify optimality. Flows are real-valued.

use crate::error::{Error, Result};

/// Optimal flow of a transportation problem together with node potentials.
#[derive(Clone, Debug)]
pub struct FlowSolution {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols` flow matrix.
    pub flow: Vec<f64>,
    /// Row potentials `u` and column potentials `v` with `u_i + v_j <= c_ij`,
    /// equality wherever flow is positive, in scaled cost units.
    pub u: Vec<i64>,
    pub v: Vec<i64>,
}

/// Minimize `sum c_ij x_ij` over `x >= 0` with row sums `supply` and column
/// sums `demand`. `cost[i * cols + j] = None` marks a missing arc.
///
/// When the totals differ by rounding, the smaller side is exhausted and the
/// remainder is left unshipped.
pub fn solve_transport(supply: &[f64], demand: &[f64], cost: &[Option<i64>]) -> Result<FlowSolution> {
    let (rows, cols) = (supply.len(), demand.len());
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyProblem);
    }
    assert_eq!(cost.len(), rows * cols, "cost matrix shape");
    let total: f64 = supply.iter().sum::<f64>().max(demand.iter().sum::<f64>());
    let eps = 1e-15 * total.max(f64::MIN_POSITIVE);

    let mut flow = vec![0.0; rows * cols];
    let mut rem_s = supply.to_vec();
    let mut rem_d = demand.to_vec();
    // Node potentials: rows are 0..rows, columns rows..rows+cols. Reduced cost of
    // the forward arc i -> j is c_ij + p_i - p_j >= 0.
    let mut p = vec![0i64; rows + cols];
    for j in 0..cols {
        p[rows + j] = (0..rows).filter_map(|i| cost[i * cols + j]).min().unwrap_or(0);
    }

    const INF: i64 = i64::MAX / 4;
    let nodes = rows + cols;
    let mut dist = vec![INF; nodes];
    let mut done = vec![false; nodes];
    let mut pred = vec![usize::MAX; nodes];

    loop {
        if rem_s.iter().all(|&s| s <= eps) || rem_d.iter().all(|&d| d <= eps) {
            break;
        }
        dist.iter_mut().for_each(|d| *d = INF);
        done.iter_mut().for_each(|d| *d = false);
        pred.iter_mut().for_each(|x| *x = usize::MAX);
        for i in 0..rows {
            if rem_s[i] > eps {
                dist[i] = 0;
            }
        }
        // Dense Dijkstra over the residual graph.
        let mut target = usize::MAX;
        loop {
            let mut best = usize::MAX;
            let mut best_d = INF;
            for k in 0..nodes {
                if !done[k] && dist[k] < best_d {
                    best_d = dist[k];
                    best = k;
                }
            }
            if best == usize::MAX {
                break;
            }
            done[best] = true;
            if best >= rows {
                let j = best - rows;
                if rem_d[j] > eps {
                    target = best;
                    break;
                }
                // Backward arcs j -> i where flow is positive.
                for i in 0..rows {
                    if done[i] || flow[i * cols + j] <= 0.0 {
                        continue;
                    }
                    let c = cost[i * cols + j].expect("flow on missing arc");
                    let nd = best_d + (-c + p[best] - p[i]);
                    if nd < dist[i] {
                        dist[i] = nd;
                        pred[i] = best;
                    }
                }
            } else {
                let i = best;
                for j in 0..cols {
                    let k = rows + j;
                    if done[k] {
                        continue;
                    }
                    if let Some(c) = cost[i * cols + j] {
                        let nd = best_d + (c + p[i] - p[k]);
                        if nd < dist[k] {
                            dist[k] = nd;
                            pred[k] = i;
                        }
                    }
                }
            }
        }
        if target == usize::MAX {
            let left: f64 = rem_s.iter().sum();
            return Err(Error::InvalidArgument(format!(
                "transport problem infeasible: {left:e} supply cannot reach any demand"
            )));
        }
        let dt = dist[target];
        for k in 0..nodes {
            p[k] += dist[k].min(dt);
        }
        // Bottleneck along the path.
        let mut amount = rem_d[target - rows];
        let mut k = target;
        loop {
            let prev = pred[k];
            if prev == usize::MAX {
                amount = amount.min(rem_s[k]);
                break;
            }
            if k < rows {
                // backward arc prev(col) -> k(row)
                amount = amount.min(flow[k * cols + (prev - rows)]);
            }
            k = prev;
        }
        let mut k = target;
        loop {
            let prev = pred[k];
            if prev == usize::MAX {
                rem_s[k] -= amount;
                if rem_s[k] < eps {
                    rem_s[k] = 0.0;
                }
                break;
            }
            if k >= rows {
                flow[prev * cols + (k - rows)] += amount;
            } else {
                let e = &mut flow[k * cols + (prev - rows)];
                *e -= amount;
                if *e < eps {
                    *e = 0.0;
                }
            }
            k = prev;
        }
        rem_d[target - rows] -= amount;
        if rem_d[target - rows] < eps {
            rem_d[target - rows] = 0.0;
        }
    }
    let u = p[..rows].iter().map(|x| -x).collect();
    let v = p[rows..].to_vec();
    Ok(FlowSolution { rows, cols, flow, u, v })
}
