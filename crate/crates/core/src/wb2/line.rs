//! Exact reservoir transport on an interval through quantile functions.
//!
//! On `[a, b]` an optimal plan is monotone: both measures are laid out along a
//! mass coordinate, the source's coordinate `m` is paired with the target's
//! coordinate `m - s`, and whatever falls off either end is exchanged with the
//! nearer reservoir end. The shift `s` is the only unknown; the cost is convex
//! in `s` and its derivative has a closed form, so the optimum is a scalar root.

use crate::error::{Error, Result};
use crate::measures::DiscreteMeasure;
use crate::quad;

#[derive(Clone, Copy, Debug, PartialEq)]
struct Piece {
    x0: f64,
    x1: f64,
    mass: f64,
}

/// A piece of the mass-coordinate pairing. `source_end` or `target_end` is set
/// when that side is the reservoir, reached through the given interval end.
#[derive(Clone, Copy, Debug)]
struct Segment {
    len: f64,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    source_end: Option<f64>,
    target_end: Option<f64>,
}

/// `a + b (x - x0) + c (x - x0)^2` on `[x0, x1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quadratic {
    pub x0: f64,
    pub x1: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

/// Largest value of `a + b u + c u^2` on `[0, len]`.
fn quadratic_max(a: f64, b: f64, c: f64, len: f64) -> f64 {
    let f = |u: f64| a + u * (b + u * c);
    let mut best = f(0.0).max(f(len));
    if c < 0.0 {
        let u = -b / (2.0 * c);
        if u > 0.0 && u < len {
            best = best.max(f(u));
        }
    }
    best
}

impl Quadratic {
    fn point(x: f64, a: f64) -> Self {
        Self { x0: x, x1: x, a, b: 0.0, c: 0.0 }
    }

    /// `(x - e)^2`.
    fn square(x0: f64, x1: f64, e: f64) -> Self {
        Self { x0, x1, a: (x0 - e).powi(2), b: 2.0 * (x0 - e), c: 1.0 }
    }

    pub fn at(&self, x: f64) -> f64 {
        let u = x - self.x0;
        self.a + u * (self.b + u * self.c)
    }

    /// `int_lo^hi` for `[lo, hi]` inside the piece.
    fn integral(&self, lo: f64, hi: f64) -> f64 {
        let (u0, u1) = (lo - self.x0, hi - self.x0);
        self.a * (u1 - u0) + self.b * (u1 * u1 - u0 * u0) / 2.0 + self.c * (u1.powi(3) - u0.powi(3)) / 3.0
    }

    /// `max_x (self(x) - (x - e)^2)` over the piece.
    fn max_minus_square(&self, e: f64) -> f64 {
        let d = self.x0 - e;
        quadratic_max(self.a - d * d, self.b - 2.0 * d, self.c - 1.0, self.x1 - self.x0)
    }

    /// `min_x (|x - z|^2 - self(x))` over the piece.
    fn c_transform_at(&self, z: f64) -> f64 {
        let d = self.x0 - z;
        -quadratic_max(self.a - d * d, self.b - 2.0 * d, self.c - 1.0, self.x1 - self.x0)
    }
}

/// Dual potentials of an optimal coupling, with the reservoir potential at 0:
/// `phi` on the source support and `psi` on the target support, both as
/// quadratic pieces in increasing order.
#[derive(Clone, Debug, PartialEq)]
pub struct LinePotentials {
    pub phi: Vec<Quadratic>,
    pub psi: Vec<Quadratic>,
    a: f64,
    b: f64,
}

impl LinePotentials {
    fn reservoir(&self, z: f64) -> f64 {
        (z - self.a).powi(2).min((self.b - z).powi(2))
    }

    /// The largest feasible target potential given `phi`:
    /// `min(d(z)^2, min_x |x - z|^2 - phi(x))`.
    pub fn psi_extended(&self, z: f64) -> f64 {
        self.phi.iter().map(|q| q.c_transform_at(z)).fold(self.reservoir(z), f64::min)
    }

    /// `int_lo^hi psi_extended`, by composite Gauss quadrature.
    fn extended_integral(&self, lo: f64, hi: f64) -> f64 {
        const PARTS: usize = 8;
        let w = (hi - lo) / PARTS as f64;
        (0..PARTS)
            .map(|k| {
                let x0 = lo + k as f64 * w;
                quad::integrate(x0, x0 + w, |z| self.psi_extended(z))
            })
            .sum()
    }
}

/// `min (x - y)^2 - p(x) - q(y)` over the pieces' box.
fn pair_min(p: &Quadratic, q: &Quadratic) -> f64 {
    let d = p.x0 - q.x0;
    let (lu, lv) = (p.x1 - p.x0, q.x1 - q.x0);
    let (au, av) = (1.0 - p.c, 1.0 - q.c);
    let (bu, bv) = (2.0 * d - p.b, -2.0 * d - q.b);
    let k = d * d - p.a - q.a;
    let f = |u: f64, v: f64| k + bu * u + bv * v + au * u * u + av * v * v - 2.0 * u * v;
    let mut best = f64::INFINITY;
    for u in [0.0, lu] {
        best = best.min(k + bu * u + au * u * u - quadratic_max(0.0, -(bv - 2.0 * u), -av, lv));
    }
    for v in [0.0, lv] {
        best = best.min(k + bv * v + av * v * v - quadratic_max(0.0, -(bu - 2.0 * v), -au, lu));
    }
    let det = au * av - 1.0;
    if au > 0.0 && det > 0.0 {
        let u = (-bu * av - bv) / (2.0 * det);
        let v = (-bv * au - bu) / (2.0 * det);
        if u > 0.0 && u < lu && v > 0.0 && v < lv {
            best = best.min(f(u, v));
        }
    }
    best
}

/// Constants for runs of the pairing that no reservoir exchange pins, so that
/// `phi + psi <= |x - y|^2` across runs and both stay below the squared
/// boundary distance. The feasible set is given by difference constraints;
/// the midpoint of its largest and smallest solutions is returned.
fn resolve_bases(
    bases: &mut [Option<f64>],
    phi: &[(Quadratic, Option<usize>)],
    psi: &[(Quadratic, Option<usize>)],
    a: f64,
    b: f64,
) {
    let free: Vec<usize> = (0..bases.len()).filter(|&r| bases[r].is_none()).collect();
    if free.is_empty() {
        return;
    }
    // Node 0 is the absolute frame; pinned runs fold into it.
    let node = |run: Option<usize>| -> usize {
        match run {
            Some(r) if bases[r].is_none() => 1 + free.iter().position(|&f| f == r).unwrap(),
            _ => 0,
        }
    };
    let fixed = |run: Option<usize>| -> f64 { run.and_then(|r| bases[r]).unwrap_or(0.0) };
    let n = free.len() + 1;
    // w[i][j]: x_i - x_j <= w[i][j], with phi shifted by +x and psi by -x.
    let mut w = vec![vec![f64::INFINITY; n]; n];
    for (p, rp) in phi {
        let (i, pa) = (node(*rp), fixed(*rp));
        let bound = -(p.max_minus_square(a).max(p.max_minus_square(b)) + pa);
        w[i][0] = w[i][0].min(bound);
        for (q, rq) in psi {
            let j = node(*rq);
            if i != j {
                let m = pair_min(p, q) - pa + fixed(*rq);
                w[i][j] = w[i][j].min(m);
            }
        }
    }
    for (q, rq) in psi {
        let j = node(*rq);
        let bound = -(q.max_minus_square(a).max(q.max_minus_square(b)) - fixed(*rq));
        w[0][j] = w[0][j].min(bound);
    }
    // Largest solution: shortest paths from node 0 along edges j -> i of weight w[i][j].
    let paths = |forward: bool| -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; n];
        dist[0] = 0.0;
        for _ in 0..n {
            let mut changed = false;
            for i in 0..n {
                for j in 0..n {
                    let (from, to, wt) = if forward { (j, i, w[i][j]) } else { (i, j, w[i][j]) };
                    if dist[from].is_finite() && dist[from] + wt < dist[to] - 1e-300 {
                        dist[to] = dist[from] + wt;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        dist
    };
    let hi = paths(true);
    let lo: Vec<f64> = paths(false).into_iter().map(|d| -d).collect();
    for (k, &r) in free.iter().enumerate() {
        let (l, h) = (lo[k + 1], hi[k + 1]);
        bases[r] = Some(match (l.is_finite(), h.is_finite()) {
            (true, true) => 0.5 * (l + h),
            (true, false) => l,
            (false, true) => h,
            (false, false) => 0.0,
        });
    }
}

/// Finite measure on `[a, b]` made of uniform pieces and atoms (`x0 == x1`).
#[derive(Clone, Debug, PartialEq)]
pub struct LineMeasure {
    a: f64,
    b: f64,
    pieces: Vec<Piece>,
    /// `cum[k]` is the mass before piece `k`; `cum[len]` is the total.
    cum: Vec<f64>,
}

impl LineMeasure {
    fn build(a: f64, b: f64, pieces: Vec<Piece>) -> Self {
        let mut cum = Vec::with_capacity(pieces.len() + 1);
        let mut acc = 0.0;
        cum.push(0.0);
        for p in &pieces {
            acc += p.mass;
            cum.push(acc);
        }
        Self { a, b, pieces, cum }
    }

    /// Point masses `(position, mass)` on `[a, b]`; equal positions are merged.
    pub fn from_atoms(a: f64, b: f64, atoms: &[(f64, f64)]) -> Result<Self> {
        if !(a < b) {
            return Err(Error::InvalidArgument(format!("empty interval [{a}, {b}]")));
        }
        let mut sorted: Vec<(f64, f64)> = Vec::with_capacity(atoms.len());
        for (index, &(x, m)) in atoms.iter().enumerate() {
            if !(m.is_finite() && m >= 0.0) {
                return Err(Error::NegativeValue { index, value: m });
            }
            if !(x >= a && x <= b) {
                return Err(Error::InvalidArgument(format!("atom at {x} outside [{a}, {b}]")));
            }
            if m > 0.0 {
                sorted.push((x, m));
            }
        }
        sorted.sort_by(|p, q| p.0.total_cmp(&q.0));
        let mut pieces: Vec<Piece> = Vec::new();
        for (x, m) in sorted {
            match pieces.last_mut() {
                Some(p) if p.x0 == x => p.mass += m,
                _ => pieces.push(Piece { x0: x, x1: x, mass: m }),
            }
        }
        Ok(Self::build(a, b, pieces))
    }

    /// Piecewise-constant density on a 1D grid, one uniform piece per charged cell.
    pub fn from_density(measure: &DiscreteMeasure) -> Result<Self> {
        let grid = measure.grid();
        if grid.dim() != 1 {
            return Err(Error::InvalidArgument("interval transport needs a 1D grid".into()));
        }
        let h = grid.width(0);
        let pieces = measure
            .density()
            .iter()
            .enumerate()
            .filter(|(_, &r)| r > 0.0)
            .map(|(c, &r)| {
                let (x0, x1) = grid.cell_bounds(c, 0);
                Piece { x0, x1, mass: r * h }
            })
            .collect();
        Ok(Self::build(grid.domain().lo[0], grid.domain().hi[0], pieces))
    }

    pub fn total_mass(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    /// Density of the uniform piece containing `x`, or 0.
    pub fn density_at(&self, x: f64) -> f64 {
        self.pieces
            .iter()
            .find(|p| p.x0 <= x && x < p.x1)
            .map_or(0.0, |p| p.mass / (p.x1 - p.x0))
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.a, self.b)
    }

    /// Right-continuous quantile extended by `a` below 0 and `b` above the total.
    pub fn quantile(&self, m: f64) -> f64 {
        self.segment_values(m, m).0
    }

    /// Endpoint values of the quantile over `[m0, m1]`, which must not contain
    /// a breakpoint in its interior.
    fn segment_values(&self, m0: f64, m1: f64) -> (f64, f64) {
        let mid = 0.5 * (m0 + m1);
        if mid < 0.0 {
            return (self.a, self.a);
        }
        if mid >= self.total_mass() || self.pieces.is_empty() {
            return (self.b, self.b);
        }
        // Last k with cum[k] <= mid.
        let k = self.cum.partition_point(|&c| c <= mid) - 1;
        let k = k.min(self.pieces.len() - 1);
        let p = self.pieces[k];
        let at = |m: f64| p.x0 + (p.x1 - p.x0) * ((m - self.cum[k]) / p.mass);
        (at(m0), at(m1))
    }

    /// Linear pieces of the cumulative distribution as `(y0, y1, F(y0), F(y1))`,
    /// covering `[a, b]` and split at the sorted points in `extra`.
    fn cdf_segments(&self, extra: &[f64]) -> Vec<(f64, f64, f64, f64)> {
        let mut raw = Vec::with_capacity(2 * self.pieces.len() + 1);
        let mut y = self.a;
        for (k, p) in self.pieces.iter().enumerate() {
            if p.x0 > y {
                raw.push((y, p.x0, self.cum[k], self.cum[k]));
            }
            if p.x1 > p.x0 {
                raw.push((p.x0, p.x1, self.cum[k], self.cum[k + 1]));
            }
            y = y.max(p.x1);
        }
        if self.b > y {
            let t = self.total_mass();
            raw.push((y, self.b, t, t));
        }
        if extra.is_empty() {
            return raw;
        }
        let mut out = Vec::with_capacity(raw.len() + extra.len());
        for (y0, y1, f0, f1) in raw {
            let mut lo = y0;
            let mut flo = f0;
            let start = extra.partition_point(|&e| e <= y0);
            for &e in extra[start..].iter().take_while(|&&e| e < y1) {
                let fe = f0 + (f1 - f0) * (e - y0) / (y1 - y0);
                out.push((lo, e, flo, fe));
                lo = e;
                flo = fe;
            }
            out.push((lo, y1, flo, f1));
        }
        out
    }

    /// Walk `[a, b]` along this measure's distribution and report, on each
    /// piece where it is linear, the matched point `T(y) = other.quantile(F(y) + shift)`
    /// as `f(y0, y1, T(y0), T(y1))`.
    fn walk_matched(
        &self,
        other: &LineMeasure,
        shift: f64,
        extra: &[f64],
        mut f: impl FnMut(f64, f64, f64, f64),
    ) {
        for (y0, y1, f0, f1) in self.cdf_segments(extra) {
            if y1 <= y0 {
                continue;
            }
            let (m_lo, m_hi) = (f0 + shift, f1 + shift);
            if m_hi <= m_lo {
                let t = other.quantile(m_lo);
                f(y0, y1, t, t);
                continue;
            }
            let mut ma = m_lo;
            let start = other.cum.partition_point(|&c| c <= m_lo);
            let breaks = other.cum[start..].iter().copied().take_while(|&c| c < m_hi);
            for mb in breaks.chain(std::iter::once(m_hi)) {
                if mb <= ma {
                    continue;
                }
                let ya = y0 + (y1 - y0) * (ma - m_lo) / (m_hi - m_lo);
                let yb = y0 + (y1 - y0) * (mb - m_lo) / (m_hi - m_lo);
                let (ta, tb) = other.segment_values(ma, mb);
                f(ya, yb, ta, tb);
                ma = mb;
            }
        }
    }

    /// Pieces of the pairing of `self` at mass coordinate `m` with `other` at
    /// `m - s` on which both quantiles are linear. Pieces where both sides
    /// sit in the reservoir are dropped.
    fn segments(&self, other: &LineMeasure, s: f64) -> Vec<Segment> {
        let lo = s.min(0.0);
        let hi = self.total_mass().max(s + other.total_mass());
        let mut breaks: Vec<f64> = self
            .cum
            .iter()
            .copied()
            .chain(other.cum.iter().map(|c| c + s))
            .chain([lo, hi])
            .filter(|m| *m >= lo && *m <= hi)
            .collect();
        breaks.sort_by(f64::total_cmp);
        breaks.dedup();
        let (p_total, q_total) = (self.total_mass(), other.total_mass());
        let mut out = Vec::with_capacity(breaks.len());
        for w in breaks.windows(2) {
            let (m0, m1) = (w[0], w[1]);
            if m1 <= m0 {
                continue;
            }
            let mid = 0.5 * (m0 + m1);
            let p_out = mid < 0.0 || mid >= p_total;
            let q_out = mid - s < 0.0 || mid - s >= q_total;
            if p_out && q_out {
                continue;
            }
            let (x0, x1) = self.segment_values(m0, m1);
            let (y0, y1) = other.segment_values(m0 - s, m1 - s);
            out.push(Segment {
                len: m1 - m0,
                x0,
                x1,
                y0,
                y1,
                source_end: p_out.then_some(x0),
                target_end: q_out.then_some(y0),
            });
        }
        out
    }

    /// `f(length, x0, x1, y0, y1)` on each segment of the pairing at shift `s`.
    fn walk_mass(&self, other: &LineMeasure, s: f64, mut f: impl FnMut(f64, f64, f64, f64, f64)) {
        for g in self.segments(other, s) {
            f(g.len, g.x0, g.x1, g.y0, g.y1);
        }
    }

    fn cost_at_shift(&self, other: &LineMeasure, s: f64) -> f64 {
        let mut c = 0.0;
        self.walk_mass(other, s, |len, x0, x1, y0, y1| {
            let (d0, d1) = (x0 - y0, x1 - y1);
            c += len * (d0 * d0 + d0 * d1 + d1 * d1) / 3.0;
        });
        c
    }

    /// Derivative of the shift cost: `2 int_a^b (y - other.quantile(F(y) - s)) dy`.
    fn cost_slope(&self, other: &LineMeasure, s: f64) -> f64 {
        let mut d = 0.0;
        self.walk_matched(other, -s, &[], |y0, y1, t0, t1| {
            d += (y1 - y0) * ((y0 - t0) + (y1 - t1));
        });
        d
    }
}

/// Optimal monotone coupling between two interval measures.
#[derive(Clone, Debug)]
pub struct LineCoupling {
    pub source: LineMeasure,
    pub target: LineMeasure,
    /// Source mass coordinate `m` is paired with target coordinate `m - shift`.
    pub shift: f64,
    pub cost: f64,
}

/// Exact squared reservoir distance between two measures on the same interval.
pub fn couple(source: &LineMeasure, target: &LineMeasure) -> Result<LineCoupling> {
    if source.interval() != target.interval() {
        return Err(Error::GridMismatch("measures live on different intervals".into()));
    }
    let (p, q) = (source.total_mass(), target.total_mass());
    let (mut lo, mut hi) = (-q, p);
    let shift = if lo == hi {
        lo
    } else {
        let mut g_lo = source.cost_slope(target, lo);
        let mut g_hi = source.cost_slope(target, hi);
        if g_lo >= 0.0 {
            lo
        } else if g_hi <= 0.0 {
            hi
        } else {
            // Illinois false position with a bisection safeguard.
            let mut side = 0i8;
            let mut s = 0.5 * (lo + hi);
            for it in 0..200 {
                let mut cand = (lo * g_hi - hi * g_lo) / (g_hi - g_lo);
                let width = hi - lo;
                if !(cand > lo + 1e-3 * width && cand < hi - 1e-3 * width) || it % 8 == 7 {
                    cand = 0.5 * (lo + hi);
                }
                s = cand;
                let g = source.cost_slope(target, s);
                if g == 0.0 {
                    break;
                }
                if g < 0.0 {
                    lo = s;
                    g_lo = g;
                    if side == -1 {
                        g_hi *= 0.5;
                    }
                    side = -1;
                } else {
                    hi = s;
                    g_hi = g;
                    if side == 1 {
                        g_lo *= 0.5;
                    }
                    side = 1;
                }
                if hi - lo <= 1e-15 * (p + q) {
                    s = 0.5 * (lo + hi);
                    break;
                }
            }
            s
        }
    };
    let cost = source.cost_at_shift(target, shift).max(0.0);
    Ok(LineCoupling { source: source.clone(), target: target.clone(), shift, cost })
}

impl LineCoupling {
    /// Mass sent from the source to the reservoir and brought from it to the target.
    pub fn reservoir_exchange(&self) -> (f64, f64) {
        let (p, q) = (self.source.total_mass(), self.target.total_mass());
        let s = self.shift;
        let to = s.max(0.0) + (p - s - q).max(0.0);
        let from = (-s).max(0.0) + (s + q - p).max(0.0);
        (to.min(p), from.min(q))
    }

    /// `int g(x, y) dgamma` over all pairs with at least one interior end,
    /// where `x` is the source position and `y` the target position; reservoir
    /// ends are placed at the interval end they are exchanged with.
    pub fn integrate(&self, g: impl Fn(f64, f64) -> f64) -> f64 {
        let mut acc = 0.0;
        self.source.walk_mass(&self.target, self.shift, |len, x0, x1, y0, y1| {
            acc += quad::integrate(0.0, len, |m| {
                let t = m / len;
                g(x0 + (x1 - x0) * t, y0 + (y1 - y0) * t)
            });
        });
        acc
    }

    /// Dual potentials. Along the pairing, `phi' = 2 (x - y)` and
    /// `psi' = 2 (y - x)` with `phi + psi = |x - y|^2`; reservoir exchange pins
    /// `phi` or `psi` to the squared distance to the exchange end, and the
    /// value carries over wherever the source or target position is continuous.
    /// Runs that nothing pins get jointly feasible constants.
    pub fn potentials(&self) -> LinePotentials {
        let (a, b) = self.source.interval();
        let tiny = 1e-14 * (b - a);
        let close = |u: f64, v: f64| (u - v).abs() <= 1e-12 * (b - a);
        let mut phi: Vec<(Quadratic, Option<usize>)> = Vec::new();
        let mut psi: Vec<(Quadratic, Option<usize>)> = Vec::new();
        // Unknown constant per unpinned run: phi + base, psi - base.
        let mut bases: Vec<Option<f64>> = Vec::new();
        struct End {
            phi: Option<(f64, f64)>,
            psi: Option<(f64, f64)>,
            run: Option<usize>,
        }
        let mut prev: Option<End> = None;
        // Segments at rounding scale come from a shift that is off by rounding
        // and would tie unrelated runs together.
        let mass_tol = 1e-13 * (self.source.total_mass() + self.target.total_mass());
        for g in self.source.segments(&self.target, self.shift) {
            if g.len <= mass_tol {
                continue;
            }
            match (g.source_end, g.target_end) {
                (None, None) => {
                    let (dx, dy) = (g.x1 - g.x0, g.y1 - g.y0);
                    let link = prev.as_ref().and_then(|p| {
                        if let Some((v, x)) = p.phi {
                            if close(x, g.x0) {
                                return Some((v, p.run));
                            }
                        }
                        match p.psi {
                            Some((v, y)) if close(y, g.y0) => Some(((g.x0 - g.y0).powi(2) - v, p.run)),
                            _ => None,
                        }
                    });
                    let (phi0, run) = link.unwrap_or_else(|| {
                        bases.push(None);
                        (0.0, Some(bases.len() - 1))
                    });
                    let psi0 = (g.x0 - g.y0).powi(2) - phi0;
                    let qp = if dx > tiny {
                        Quadratic { x0: g.x0, x1: g.x1, a: phi0, b: 2.0 * (g.x0 - g.y0), c: 1.0 - dy / dx }
                    } else {
                        Quadratic::point(g.x0, phi0)
                    };
                    let qs = if dy > tiny {
                        Quadratic { x0: g.y0, x1: g.y1, a: psi0, b: 2.0 * (g.y0 - g.x0), c: 1.0 - dx / dy }
                    } else {
                        Quadratic::point(g.y0, psi0)
                    };
                    let phi_end = phi0 + 2.0 * dx * (g.x0 - g.y0) + dx * (dx - dy);
                    let psi_end = (g.x1 - g.y1).powi(2) - phi_end;
                    phi.push((qp, run));
                    psi.push((qs, run));
                    prev = Some(End { phi: Some((phi_end, g.x1)), psi: Some((psi_end, g.y1)), run });
                }
                (Some(e), None) => {
                    let q = Quadratic::square(g.y0, g.y1, e);
                    if let Some(End { psi: Some((v, y)), run: Some(r), .. }) = prev {
                        if bases[r].is_none() && close(y, g.y0) {
                            bases[r] = Some(v - q.at(g.y0));
                        }
                    }
                    psi.push((q, None));
                    prev = Some(End { phi: None, psi: Some((q.at(g.y1), g.y1)), run: None });
                }
                (None, Some(e)) => {
                    let q = Quadratic::square(g.x0, g.x1, e);
                    if let Some(End { phi: Some((v, x)), run: Some(r), .. }) = prev {
                        if bases[r].is_none() && close(x, g.x0) {
                            bases[r] = Some(q.at(g.x0) - v);
                        }
                    }
                    phi.push((q, None));
                    prev = Some(End { phi: Some((q.at(g.x1), g.x1)), psi: None, run: None });
                }
                (Some(_), Some(_)) => {}
            }
        }
        resolve_bases(&mut bases, &phi, &psi, a, b);
        let shift = |list: Vec<(Quadratic, Option<usize>)>, sign: f64| -> Vec<Quadratic> {
            list.into_iter()
                .map(|(mut q, run)| {
                    if let Some(r) = run {
                        q.a += sign * bases[r].unwrap();
                    }
                    q
                })
                .collect()
        };
        LinePotentials { phi: shift(phi, 1.0), psi: shift(psi, -1.0), a, b }
    }

    /// Per-cell integrals `int_cell psi` of the target potential, extended off
    /// the target support by its largest feasible value. This is a subgradient
    /// of the cost with respect to the target density on cells between `faces`.
    pub fn target_gradient(&self, faces: &[f64]) -> Vec<f64> {
        let pot = self.potentials();
        let (a, b) = self.target.interval();
        let tiny = 1e-14 * (b - a);
        let n = faces.len() - 1;
        (0..n)
            .map(|j| {
                let (f0, f1) = (faces[j], faces[j + 1]);
                let mut covered = f0;
                let mut acc = 0.0;
                let start = pot.psi.partition_point(|q| q.x1 <= f0);
                for q in pot.psi[start..].iter().take_while(|q| q.x0 < f1) {
                    let (lo, hi) = (q.x0.max(f0), q.x1.min(f1));
                    if hi - lo <= tiny {
                        continue;
                    }
                    if lo - covered > tiny {
                        acc += pot.extended_integral(covered, lo);
                    }
                    acc += q.integral(lo, hi);
                    covered = covered.max(hi);
                }
                if f1 - covered > tiny {
                    acc += pot.extended_integral(covered, f1);
                }
                acc
            })
            .collect()
    }
}

/// Squared reservoir distance between two piecewise-constant 1D densities.
pub fn wb2_squared_1d(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<f64> {
    Ok(couple(&LineMeasure::from_density(mu)?, &LineMeasure::from_density(nu)?)?.cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Grid;
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn atoms(list: &[(f64, f64)]) -> LineMeasure {
        LineMeasure::from_atoms(0.0, 1.0, list).unwrap()
    }

    #[test]
    fn point_mass_examples() {
        let c = couple(&atoms(&[(0.1, 1.0)]), &atoms(&[(0.9, 1.0)])).unwrap();
        assert_abs_diff_eq!(c.cost, 0.02, epsilon = 1e-15);
        let (to, from) = c.reservoir_exchange();
        assert_abs_diff_eq!(to, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(from, 1.0, epsilon = 1e-15);

        let c = couple(&atoms(&[(0.1, 0.5), (0.9, 0.5)]), &atoms(&[(0.1, 0.5), (0.9, 0.25)])).unwrap();
        assert_abs_diff_eq!(c.cost, 0.0025, epsilon = 1e-15);
    }

    #[test]
    fn identical_and_empty() {
        let m = atoms(&[(0.3, 0.2), (0.6, 0.7)]);
        assert_abs_diff_eq!(couple(&m, &m).unwrap().cost, 0.0, epsilon = 1e-15);
        let empty = atoms(&[]);
        // Everything leaves through the nearer end: 0.2 * 0.09 + 0.7 * 0.16.
        assert_abs_diff_eq!(couple(&m, &empty).unwrap().cost, 0.2 * 0.09 + 0.7 * 0.16, epsilon = 1e-15);
        assert_abs_diff_eq!(couple(&empty, &m).unwrap().cost, 0.2 * 0.09 + 0.7 * 0.16, epsilon = 1e-15);
    }

    #[test]
    fn uniform_density_to_empty() {
        // Mass 1 spread on (0,1) leaves through the nearer end:
        // 2 int_0^{1/2} x^2 dx = 1/12.
        let g = Arc::new(Grid::unit_interval(8).unwrap());
        let one = DiscreteMeasure::constant(g.clone(), 1.0).unwrap();
        let zero = DiscreteMeasure::constant(g, 0.0).unwrap();
        assert_abs_diff_eq!(wb2_squared_1d(&one, &zero).unwrap(), 1.0 / 12.0, epsilon = 1e-14);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let g = Arc::new(Grid::unit_interval(16).unwrap());
        let mu = DiscreteMeasure::from_fn(g.clone(), |x| 1.0 + 0.5 * (6.0 * x[0]).sin()).unwrap();
        let nu = DiscreteMeasure::from_fn(g.clone(), |x| 0.8 + 0.3 * x[0]).unwrap();
        let faces: Vec<f64> = (0..=16).map(|k| k as f64 / 16.0).collect();
        let lm = LineMeasure::from_density(&mu).unwrap();
        let c = couple(&lm, &LineMeasure::from_density(&nu).unwrap()).unwrap();
        let grad = c.target_gradient(&faces);
        for j in [0, 3, 8, 15] {
            let eps = 1e-6;
            let mut up = nu.density().to_vec();
            up[j] += eps;
            let mut dn = nu.density().to_vec();
            dn[j] -= eps;
            let f = |d: Vec<f64>| wb2_squared_1d(&mu, &DiscreteMeasure::new(g.clone(), d).unwrap()).unwrap();
            let fd = (f(up) - f(dn)) / (2.0 * eps);
            assert_abs_diff_eq!(grad[j], fd, epsilon = 1e-7);
        }
    }

    fn gapped(g: &Arc<Grid>, seed: u64) -> DiscreteMeasure {
        let mut state = seed;
        let mut rnd = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let d = (0..g.len()).map(|_| if rnd() < 0.4 { 0.0 } else { 2.0 * rnd() }).collect();
        DiscreteMeasure::new(g.clone(), d).unwrap()
    }

    #[test]
    fn gradient_is_a_subgradient_with_empty_cells() {
        let g = Arc::new(Grid::unit_interval(12).unwrap());
        let faces: Vec<f64> = (0..=12).map(|k| k as f64 / 12.0).collect();
        let h = 1.0 / 12.0;
        for seed in 0..40u64 {
            let mu = gapped(&g, seed);
            let nu = if seed % 4 == 0 { mu.clone() } else { gapped(&g, 1000 + seed) };
            let c = couple(&LineMeasure::from_density(&mu).unwrap(), &LineMeasure::from_density(&nu).unwrap()).unwrap();
            let grad = c.target_gradient(&faces);
            for k in 0..20u64 {
                let other = gapped(&g, 5000 + 100 * seed + k);
                let lin: f64 = grad.iter().zip(other.density().iter().zip(nu.density())).map(|(g, (a, b))| g * (a - b)).sum();
                let lhs = wb2_squared_1d(&mu, &other).unwrap();
                assert!(lhs >= c.cost + lin - 1e-12, "seed {seed} k {k}: {lhs} < {} + {lin}", c.cost);
            }
            // Mass added to a single cell, in either direction where allowed.
            for j in 0..12 {
                let mut d = nu.density().to_vec();
                d[j] += 0.5 / h;
                let lhs = wb2_squared_1d(&mu, &DiscreteMeasure::new(g.clone(), d).unwrap()).unwrap();
                assert!(lhs >= c.cost + 0.5 / h * grad[j] - 1e-12, "seed {seed} cell {j}");
            }
        }
    }

    #[test]
    fn potentials_are_dual_optimal() {
        let g = Arc::new(Grid::unit_interval(10).unwrap());
        for seed in 0..30u64 {
            let mu = gapped(&g, seed);
            let nu = gapped(&g, 77 + seed);
            let (lm, ln) = (LineMeasure::from_density(&mu).unwrap(), LineMeasure::from_density(&nu).unwrap());
            let c = couple(&lm, &ln).unwrap();
            let pot = c.potentials();
            let value: f64 = pot.phi.iter().zip(std::iter::repeat(&lm)).map(|(q, m)| q.integral(q.x0, q.x1) * m.density_at(0.5 * (q.x0 + q.x1))).sum::<f64>()
                + pot.psi.iter().map(|q| q.integral(q.x0, q.x1) * ln.density_at(0.5 * (q.x0 + q.x1))).sum::<f64>();
            assert_abs_diff_eq!(value, c.cost, epsilon = 1e-12);
        }
    }

    #[test]
    fn coupling_integral_of_cost_is_cost() {
        let mu = atoms(&[(0.2, 0.4), (0.5, 0.3)]);
        let nu = atoms(&[(0.45, 0.5), (0.95, 0.1)]);
        let c = couple(&mu, &nu).unwrap();
        // Reservoir ends sit at the boundary, so the integrand is the plan cost.
        assert_abs_diff_eq!(c.integrate(|x, y| (x - y).powi(2)), c.cost, epsilon = 1e-14);
    }

    #[test]
    fn rejects_bad_atoms() {
        assert!(LineMeasure::from_atoms(0.0, 1.0, &[(1.5, 1.0)]).is_err());
        assert!(LineMeasure::from_atoms(0.0, 1.0, &[(0.5, -1.0)]).is_err());
        assert!(LineMeasure::from_atoms(1.0, 1.0, &[]).is_err());
    }
}
