//! Independent reference solvers for the acceptance tests.

/// Dense primal simplex for `min c.x` subject to `A x = b`, `x >= 0`,
/// started from a given feasible basis. Bland's rule prevents cycling.
pub struct Simplex {
    rows: usize,
    cols: usize,
    /// Row-major `rows x (cols + 1)` tableau, last column is the right-hand side.
    t: Vec<f64>,
    basis: Vec<usize>,
    cost: Vec<f64>,
}

const PIVOT_TOL: f64 = 1e-12;

impl Simplex {
    /// `a` is row-major `rows x cols`; `basis[r]` is a column with a unit entry
    /// in row `r` and zeros elsewhere, so the start is `x_basis = b`.
    pub fn new(a: &[f64], b: &[f64], cost: &[f64], basis: Vec<usize>) -> Self {
        let (rows, cols) = (b.len(), cost.len());
        assert_eq!(a.len(), rows * cols);
        let mut t = vec![0.0; rows * (cols + 1)];
        for r in 0..rows {
            assert!(b[r] >= 0.0);
            t[r * (cols + 1)..r * (cols + 1) + cols].copy_from_slice(&a[r * cols..(r + 1) * cols]);
            t[r * (cols + 1) + cols] = b[r];
            assert_eq!(a[r * cols + basis[r]], 1.0);
        }
        Self { rows, cols, t, basis, cost: cost.to_vec() }
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.t[r * (self.cols + 1) + c]
    }

    fn reduced_cost(&self, c: usize) -> f64 {
        self.cost[c] - (0..self.rows).map(|r| self.cost[self.basis[r]] * self.at(r, c)).sum::<f64>()
    }

    fn pivot(&mut self, pr: usize, pc: usize) {
        let w = self.cols + 1;
        let p = self.at(pr, pc);
        for k in 0..w {
            self.t[pr * w + k] /= p;
        }
        for r in 0..self.rows {
            if r == pr {
                continue;
            }
            let f = self.at(r, pc);
            if f != 0.0 {
                for k in 0..w {
                    self.t[r * w + k] -= f * self.t[pr * w + k];
                }
            }
        }
        self.basis[pr] = pc;
    }

    /// Optimal value and solution.
    pub fn solve(mut self) -> (f64, Vec<f64>) {
        let scale = self.cost.iter().fold(0.0f64, |m, c| m.max(c.abs())).max(1.0);
        loop {
            let entering = (0..self.cols).find(|&c| !self.basis.contains(&c) && self.reduced_cost(c) < -1e-14 * scale);
            let Some(pc) = entering else { break };
            let mut best: Option<(f64, usize)> = None;
            for r in 0..self.rows {
                let a = self.at(r, pc);
                if a > PIVOT_TOL {
                    let ratio = self.at(r, self.cols) / a;
                    let better = match best {
                        None => true,
                        Some((q, br)) => ratio < q - 1e-15 || (ratio <= q + 1e-15 && self.basis[r] < self.basis[br]),
                    };
                    if better {
                        best = Some((ratio, r));
                    }
                }
            }
            let (_, pr) = best.expect("transport LP is bounded");
            self.pivot(pr, pc);
        }
        let mut x = vec![0.0; self.cols];
        for r in 0..self.rows {
            x[self.basis[r]] = self.at(r, self.cols);
        }
        let value = x.iter().zip(&self.cost).map(|(x, c)| x * c).sum();
        (value, x)
    }
}

/// Reservoir transport between point masses as a linear program.
///
/// Columns: `gamma_ij` for interior pairs, then `a_i` (source to reservoir),
/// then `b_j` (reservoir to target). Rows: source balances, then target balances.
pub fn reservoir_lp(
    src: &[(Vec<f64>, f64)],
    tgt: &[(Vec<f64>, f64)],
    dist_to_boundary: impl Fn(&[f64]) -> f64,
) -> f64 {
    let (ns, nt) = (src.len(), tgt.len());
    let cols = ns * nt + ns + nt;
    let rows = ns + nt;
    let mut a = vec![0.0; rows * cols];
    let mut cost = vec![0.0; cols];
    for i in 0..ns {
        for j in 0..nt {
            let c = i * nt + j;
            a[i * cols + c] = 1.0;
            a[(ns + j) * cols + c] = 1.0;
            cost[c] = src[i].0.iter().zip(&tgt[j].0).map(|(x, y)| (x - y) * (x - y)).sum();
        }
        let c = ns * nt + i;
        a[i * cols + c] = 1.0;
        cost[c] = dist_to_boundary(&src[i].0).powi(2);
    }
    for j in 0..nt {
        let c = ns * nt + ns + j;
        a[(ns + j) * cols + c] = 1.0;
        cost[c] = dist_to_boundary(&tgt[j].0).powi(2);
    }
    let b: Vec<f64> = src.iter().chain(tgt).map(|p| p.1).collect();
    let basis = (0..ns).map(|i| ns * nt + i).chain((0..nt).map(|j| ns * nt + ns + j)).collect();
    Simplex::new(&a, &b, &cost, basis).solve().0
}

/// Distance to the boundary of the box `[lo, hi]`.
pub fn box_distance<'a>(lo: &'a [f64], hi: &'a [f64]) -> impl Fn(&[f64]) -> f64 + 'a {
    move |x: &[f64]| x.iter().enumerate().map(|(k, v)| (v - lo[k]).min(hi[k] - v)).fold(f64::INFINITY, f64::min)
}
