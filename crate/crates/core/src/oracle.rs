//! Slow, independent reference solvers for tests and `compare --oracle`.
//!
//! Nothing here calls into [`crate::fw`], [`crate::pgd`] or [`crate::admm`];
//! projections, cost evaluation and the flow equations are written out again
//! so that agreement with the production solvers means something. Only the
//! plain data types are shared.
//!
//! * [`oracle_unconstrained`]: accelerated projected gradient with restarts on
//!   the stacked vehicle profiles, stopped by a Frank-Wolfe gap certificate.
//! * [`oracle_network`]: augmented Lagrangian over the explicit stacked
//!   variable vector of the network problem, with the same accelerated
//!   projected gradient as inner solver.
//! * [`brute_projection`]: projections by golden-section search on a scalar
//!   dual variable.
//!
//! Certificates are recomputed by [`check_unconstrained`] and
//! [`check_network`], which work from the returned point alone (plus the
//! multipliers for the network case).

use serde::{Deserialize, Serialize};

use crate::admm::{NetworkCase, Placement};
use crate::fleet::{BaseLoadSeries, ChargingProfile, ChargingRequest, CostModel};
use crate::grid::{FeederModel, GridState, NetworkLoads, Phase3};
use crate::{Error, Result};

/// Relative duality-gap target of [`oracle_unconstrained`].
pub const GAP_RTOL: f64 = 1e-10;
/// Absolute equality and set violation accepted from [`oracle_network`].
pub const NETWORK_FEAS_TOL: f64 = 1e-8;
/// Absolute projected-gradient stationarity accepted from [`oracle_network`].
pub const NETWORK_STAT_TOL: f64 = 1e-6;
/// Budget violation accepted for vehicle profiles.
pub const BUDGET_TOL: f64 = 1e-9;

const UNCONSTRAINED_MAX_ITER: usize = 2_000_000;
const NETWORK_MAX_INNER: usize = 5_000_000;
const NETWORK_MAX_OUTER: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Certificate {
    /// Largest violation of any constraint.
    pub infeasibility: f64,
    /// `max |x - P(x - grad L)|` for the network problem.
    pub stationarity: Option<f64>,
    /// Frank-Wolfe duality gap for the network-free problem.
    pub gap: Option<f64>,
}

/// Multipliers of the flow equations, indexed `t * buses + n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkMultipliers {
    pub buses: usize,
    pub p: Vec<Phase3>,
    pub q: Vec<Phase3>,
    pub v: Vec<Phase3>,
}

#[derive(Debug, Clone)]
pub struct OracleReport {
    pub value: f64,
    pub profiles: Vec<ChargingProfile>,
    pub grid: Option<GridState>,
    pub multipliers: Option<NetworkMultipliers>,
    pub certificate: Certificate,
    pub iterations: usize,
    pub certified: bool,
}

// ---------------------------------------------------------------------------
// Shared numerics

fn slot_cost(cost: &CostModel, t: usize, x: f64) -> (f64, f64) {
    match cost {
        CostModel::QuadraticValley => (0.5 * x * x, x),
        CostModel::Quadratic { a, b, c } => (a[t] * x * x + b[t] * x + c[t], 2.0 * a[t] * x + b[t]),
        CostModel::Linear { b } => (b[t] * x, b[t]),
    }
}

fn max_curvature(cost: &CostModel, horizon: usize) -> f64 {
    match cost {
        CostModel::QuadraticValley => 1.0,
        CostModel::Quadratic { a, .. } => a.iter().take(horizon).fold(0.0, |m, &x| m.max(2.0 * x)),
        CostModel::Linear { .. } => 0.0,
    }
}

fn inf_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Exact projection onto `{x : sum x = budget, 0 <= x <= caps}` by locating
/// the shift between sorted breakpoints of the piecewise-linear sum.
fn capped_simplex_exact(v: &mut [f64], caps: &[f64], budget: f64) {
    let total: f64 = caps.iter().sum();
    if budget >= total {
        v.copy_from_slice(caps);
        return;
    }
    if budget <= 0.0 {
        v.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let sum_at = |tau: f64| -> f64 { v.iter().zip(caps).map(|(&x, &c)| (x - tau).max(0.0).min(c)).sum() };
    let mut bp: Vec<f64> = v.iter().zip(caps).flat_map(|(&x, &c)| [x - c, x]).collect();
    bp.sort_by(f64::total_cmp);
    // sum_at is nonincreasing; find adjacent breakpoints bracketing the budget
    let (mut lo, mut hi) = (0usize, bp.len() - 1);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if sum_at(bp[mid]) >= budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (a, b) = (bp[lo], bp[hi]);
    let (sa, sb) = (sum_at(a), sum_at(b));
    let tau = if sa <= budget {
        a
    } else if sb >= budget || b == a {
        b
    } else {
        a + (sa - budget) * (b - a) / (sa - sb)
    };
    for (x, &c) in v.iter_mut().zip(caps) {
        *x = (*x - tau).max(0.0).min(c);
    }
}

/// Gaussian elimination with partial pivoting on a small dense system.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap_or(col);
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// `(I + nu M^T M)^{-1} v` where `M` sums the first and the last three
/// coordinates of a 6-vector.
fn feeder_shrink(v: &[f64], nu: f64) -> Vec<f64> {
    let a = (0..6)
        .map(|i| {
            (0..6)
                .map(|j| f64::from(u8::from(i == j)) + if i / 3 == j / 3 { nu } else { 0.0 })
                .collect()
        })
        .collect();
    solve_dense(a, v.to_vec())
}

fn feeder_sums(x: &[f64]) -> (f64, f64) {
    (x[..3].iter().sum(), x[3..].iter().sum())
}

/// Projection onto `{(P, Q) : (1'P)^2 + (1'Q)^2 <= cap^2}` by bisection on the
/// multiplier of the quadratic constraint.
fn feeder_exact(x: &mut [f64], cap: f64) {
    let norm = |y: &[f64]| {
        let (p, q) = feeder_sums(y);
        p.hypot(q)
    };
    if norm(x) <= cap {
        return;
    }
    let mut hi = 1.0;
    while norm(&feeder_shrink(x, hi)) > cap {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if norm(&feeder_shrink(x, mid)) > cap {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let y = feeder_shrink(x, hi);
    x.copy_from_slice(&y);
}

/// Accelerated projected gradient with gradient-based momentum restarts.
/// `done` is polled every `check_every` iterations with the current iterate.
/// Returns the number of iterations, or `None` if `max_iter` ran out.
fn fista(
    x: &mut Vec<f64>,
    lip: f64,
    max_iter: usize,
    check_every: usize,
    grad: &dyn Fn(&[f64], &mut [f64]),
    proj: &dyn Fn(&mut [f64]),
    done: &mut dyn FnMut(&[f64]) -> bool,
) -> Option<usize> {
    let n = x.len();
    let mut y = x.clone();
    let mut g = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut t = 1.0_f64;
    for k in 0..max_iter {
        if k % check_every == 0 && done(x) {
            return Some(k);
        }
        grad(&y, &mut g);
        for i in 0..n {
            next[i] = y[i] - g[i] / lip;
        }
        proj(&mut next);
        let restart: f64 = (0..n).map(|i| (y[i] - next[i]) * (next[i] - x[i])).sum();
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        if restart > 0.0 {
            t = 1.0;
            y.copy_from_slice(&next);
        } else {
            let beta = (t - 1.0) / t_next;
            for i in 0..n {
                y[i] = next[i] + beta * (next[i] - x[i]);
            }
            t = t_next;
        }
        std::mem::swap(x, &mut next);
    }
    if done(x) {
        Some(max_iter)
    } else {
        None
    }
}

// ---------------------------------------------------------------------------
// Network-free problem

/// Feasibility and Frank-Wolfe gap of `profiles`. The linear minimizer is a
/// fresh greedy fill of the cheapest available slots.
pub fn check_unconstrained(
    fleet: &[ChargingRequest],
    d: &BaseLoadSeries,
    cost: &CostModel,
    profiles: &[ChargingProfile],
) -> Result<(f64, Certificate)> {
    let horizon = d.horizon();
    if profiles.len() != fleet.len() {
        return Err(Error::LengthMismatch {
            expected: fleet.len(),
            found: profiles.len(),
        });
    }
    let mut load = d.values().to_vec();
    let mut infeasibility: f64 = 0.0;
    for (req, e) in fleet.iter().zip(profiles) {
        if e.len() != horizon {
            return Err(Error::LengthMismatch {
                expected: horizon,
                found: e.len(),
            });
        }
        let caps = req.caps(horizon);
        for t in 0..horizon {
            load[t] += e[t];
            infeasibility = infeasibility.max(-e[t]).max(e[t] - caps[t]);
        }
        let total: f64 = e.iter().sum();
        infeasibility = infeasibility.max((total - req.energy_need).abs() / req.energy_need.max(1.0));
    }
    let mut value = 0.0;
    let mut g = vec![0.0; horizon];
    for t in 0..horizon {
        let (c, dc) = slot_cost(cost, t, load[t]);
        value += c;
        g[t] = dc;
    }
    let mut gap = 0.0;
    for (req, e) in fleet.iter().zip(profiles) {
        let mut avail: Vec<usize> = req.slots().iter().copied().filter(|&s| s < horizon).collect();
        avail.sort_by(|&i, &j| g[i].total_cmp(&g[j]).then(i.cmp(&j)));
        let mut left = req.energy_need;
        let mut lin_min = 0.0;
        for s in avail {
            let r = left.min(req.rate_cap).max(0.0);
            lin_min += g[s] * r;
            left -= r;
        }
        let lin_e: f64 = e.iter().zip(&g).map(|(x, gt)| x * gt).sum();
        gap += lin_e - lin_min;
    }
    Ok((
        value,
        Certificate {
            infeasibility,
            stationarity: None,
            gap: Some(gap.max(0.0)),
        },
    ))
}

fn unconstrained_certified(value: f64, c: &Certificate) -> bool {
    c.infeasibility <= BUDGET_TOL && c.gap.is_some_and(|g| g <= GAP_RTOL * value.abs().max(1.0))
}

/// Minimizes `sum_t C_t(d_t + sum_m e_m(t))` over the product of capped
/// simplices.
pub fn oracle_unconstrained(fleet: &[ChargingRequest], d: &BaseLoadSeries, cost: &CostModel) -> Result<OracleReport> {
    let horizon = d.horizon();
    cost.check(horizon)?;
    let m = fleet.len();
    let caps: Vec<Vec<f64>> = fleet.iter().map(|r| r.caps(horizon)).collect();
    for (req, c) in fleet.iter().zip(&caps) {
        let total: f64 = c.iter().sum();
        if req.energy_need > total * (1.0 + 1e-12) {
            return Err(Error::EmptyFeasibleSet {
                id: req.id.clone(),
                need: req.energy_need,
                capacity: total,
            });
        }
    }
    let unstack = |x: &[f64]| -> Vec<ChargingProfile> {
        x.chunks(horizon.max(1))
            .take(m)
            .map(|c| ChargingProfile(c.to_vec()))
            .collect()
    };
    let project = |x: &mut [f64]| {
        for (k, chunk) in x.chunks_mut(horizon.max(1)).take(m).enumerate() {
            capped_simplex_exact(chunk, &caps[k], fleet[k].energy_need);
        }
    };
    let gradient = |x: &[f64], g: &mut [f64]| {
        let mut load = d.values().to_vec();
        for chunk in x.chunks(horizon.max(1)).take(m) {
            for t in 0..horizon {
                load[t] += chunk[t];
            }
        }
        let dc: Vec<f64> = (0..horizon).map(|t| slot_cost(cost, t, load[t]).1).collect();
        for chunk in g.chunks_mut(horizon.max(1)).take(m) {
            chunk.copy_from_slice(&dc);
        }
    };

    let mut x = vec![0.0; m * horizon];
    let lip = m as f64 * max_curvature(cost, horizon);
    let iterations = if lip > 0.0 {
        project(&mut x);
        let mut failure = None;
        let mut done = |x: &[f64]| match check_unconstrained(fleet, d, cost, &unstack(x)) {
            Ok((v, c)) => unconstrained_certified(v, &c),
            Err(e) => {
                failure = Some(e);
                true
            }
        };
        let it = fista(&mut x, lip, UNCONSTRAINED_MAX_ITER, 10, &gradient, &project, &mut done);
        if let Some(e) = failure {
            return Err(e);
        }
        it.ok_or(Error::NotConverged {
            solver: "oracle_unconstrained",
            iterations: UNCONSTRAINED_MAX_ITER,
        })?
    } else {
        // linear cost: the gradient does not depend on x, so one greedy fill
        // at that gradient is optimal
        let mut g = vec![0.0; m * horizon];
        gradient(&x, &mut g);
        for (k, req) in fleet.iter().enumerate() {
            let row = &g[k * horizon..(k + 1) * horizon];
            let mut avail: Vec<usize> = req.slots().iter().copied().filter(|&s| s < horizon).collect();
            avail.sort_by(|&i, &j| row[i].total_cmp(&row[j]).then(i.cmp(&j)));
            let mut left = req.energy_need;
            for s in avail {
                let r = left.min(req.rate_cap).max(0.0);
                x[k * horizon + s] = r;
                left -= r;
            }
        }
        0
    };
    let profiles = unstack(&x);
    let (value, certificate) = check_unconstrained(fleet, d, cost, &profiles)?;
    Ok(OracleReport {
        value,
        profiles,
        grid: None,
        multipliers: None,
        certified: unconstrained_certified(value, &certificate),
        certificate,
        iterations,
    })
}

// ---------------------------------------------------------------------------
// Network problem

#[derive(Debug, Clone, Copy)]
enum Row {
    P { t: usize, n: usize, ph: usize },
    Q { t: usize, n: usize, ph: usize },
    V { t: usize, n: usize, ph: usize },
}

/// The network problem over one stacked vector. Per slot and bus, every
/// present phase carries `pg, qg, P, Q` and, below the substation, `v`;
/// vehicle profiles follow as contiguous blocks of `horizon` entries.
struct Stacked<'a> {
    feeder: &'a FeederModel,
    fleet: &'a [ChargingRequest],
    loads: &'a NetworkLoads,
    horizon: usize,
    len: usize,
    pg: Vec<[Option<usize>; 3]>,
    qg: Vec<[Option<usize>; 3]>,
    p: Vec<[Option<usize>; 3]>,
    q: Vec<[Option<usize>; 3]>,
    v: Vec<[Option<usize>; 3]>,
    ev: Vec<usize>,
    ev_caps: Vec<Vec<f64>>,
    rows: Vec<Vec<(usize, f64)>>,
    rhs: Vec<f64>,
    kinds: Vec<Row>,
    /// Separable objective terms `a x^2 + b x`.
    quad: Vec<(usize, f64, f64)>,
    boxes: Vec<(usize, f64, f64)>,
    disks: Vec<(usize, usize, f64)>,
}

impl<'a> Stacked<'a> {
    fn new(
        feeder: &'a FeederModel,
        fleet: &'a [ChargingRequest],
        placement: &[Placement],
        loads: &'a NetworkLoads,
    ) -> Self {
        let horizon = loads.horizon;
        let nb = feeder.num_buses();
        let mut len = 0;
        let mut next = || {
            len += 1;
            Some(len - 1)
        };
        let cells = horizon * nb;
        let (mut pg, mut qg, mut p, mut q, mut v) = (
            vec![[None; 3]; cells],
            vec![[None; 3]; cells],
            vec![[None; 3]; cells],
            vec![[None; 3]; cells],
            vec![[None; 3]; cells],
        );
        for t in 0..horizon {
            for (n, bus) in feeder.buses.iter().enumerate() {
                for ph in bus.phases.indices() {
                    let i = t * nb + n;
                    pg[i][ph] = next();
                    qg[i][ph] = next();
                    p[i][ph] = next();
                    q[i][ph] = next();
                    if n != 0 {
                        v[i][ph] = next();
                    }
                }
            }
        }
        let ev: Vec<usize> = (0..fleet.len()).map(|k| len + k * horizon).collect();
        let len = len + fleet.len() * horizon;
        let ev_caps = fleet.iter().map(|r| r.caps(horizon)).collect();

        let mut s = Self {
            feeder,
            fleet,
            loads,
            horizon,
            len,
            pg,
            qg,
            p,
            q,
            v,
            ev,
            ev_caps,
            rows: Vec::new(),
            rhs: Vec::new(),
            kinds: Vec::new(),
            quad: Vec::new(),
            boxes: Vec::new(),
            disks: Vec::new(),
        };
        s.assemble(placement);
        s
    }

    fn assemble(&mut self, placement: &[Placement]) {
        let f = self.feeder;
        let nb = f.num_buses();
        for t in 0..self.horizon {
            for (n, bus) in f.buses.iter().enumerate() {
                let i = t * nb + n;
                let (pmin, pmax, qmin, qmax) = bus.gen_bounds();
                for ph in bus.phases.indices() {
                    let (ipg, iqg) = (self.pg[i][ph].unwrap(), self.qg[i][ph].unwrap());
                    let (ip, iq) = (self.p[i][ph].unwrap(), self.q[i][ph].unwrap());
                    self.boxes.push((ipg, pmin[ph], pmax[ph]));
                    self.boxes.push((iqg, qmin[ph], qmax[ph]));
                    if let Some(g) = &bus.gen {
                        self.quad.push((ipg, g.a[ph], g.b[ph]));
                    }
                    if n == 0 {
                        self.quad.push((ip, f.supply.a, f.supply.b));
                    } else {
                        self.boxes.push((self.v[i][ph].unwrap(), bus.v_min, bus.v_max));
                        if bus.s_line_max.is_finite() {
                            self.disks.push((ip, iq, bus.s_line_max));
                        }
                    }

                    let mut rp = vec![(ipg, 1.0), (ip, 1.0)];
                    let mut rq = vec![(iqg, 1.0), (iq, 1.0)];
                    for &k in &bus.children {
                        if let Some(j) = self.p[t * nb + k][ph] {
                            rp.push((j, -1.0));
                            rq.push((self.q[t * nb + k][ph].unwrap(), -1.0));
                        }
                    }
                    for (m, pl) in placement.iter().enumerate() {
                        if pl.bus == n && pl.phase.index() == ph {
                            rp.push((self.ev[m] + t, -1.0));
                        }
                    }
                    self.push_row(rp, self.loads.p(t, n)[ph], Row::P { t, n, ph });
                    self.push_row(rq, self.loads.q(t, n)[ph], Row::Q { t, n, ph });

                    if let Some(parent) = bus.parent {
                        let mut rv = vec![(self.v[i][ph].unwrap(), -1.0)];
                        let mut rhs = 0.0;
                        match self.v[t * nb + parent][ph] {
                            Some(j) => rv.push((j, 1.0)),
                            None => rhs = -f.v0,
                        }
                        for psi in bus.phases.indices() {
                            let zb = bus.zbar[ph][psi];
                            rv.push((self.p[i][psi].unwrap(), -zb.re));
                            rv.push((self.q[i][psi].unwrap(), zb.im));
                        }
                        self.push_row(rv, rhs, Row::V { t, n, ph });
                    }
                }
            }
        }
    }

    fn push_row(&mut self, row: Vec<(usize, f64)>, rhs: f64, kind: Row) {
        self.rows.push(row);
        self.rhs.push(rhs);
        self.kinds.push(kind);
    }

    fn residual(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .zip(&self.rhs)
            .map(|(row, b)| row.iter().map(|&(j, a)| a * x[j]).sum::<f64>() - b)
            .collect()
    }

    fn add_transpose(&self, w: &[f64], out: &mut [f64]) {
        for (row, &wi) in self.rows.iter().zip(w) {
            for &(j, a) in row {
                out[j] += a * wi;
            }
        }
    }

    fn objective_gradient(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|g| *g = 0.0);
        for &(j, a, b) in &self.quad {
            out[j] += 2.0 * a * x[j] + b;
        }
    }

    /// Squared spectral norm of the constraint matrix, from above.
    fn norm_sq(&self) -> f64 {
        let mut u = vec![1.0; self.len];
        let mut est = 0.0;
        for _ in 0..300 {
            let au = self.residual_linear(&u);
            let mut w = vec![0.0; self.len];
            self.add_transpose(&au, &mut w);
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            let un = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            est = norm / un;
            u = w.into_iter().map(|x| x / norm).collect();
        }
        est * 1.05 + 1e-12
    }

    fn residual_linear(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, a)| a * x[j]).sum())
            .collect()
    }

    fn project(&self, x: &mut [f64]) {
        for &(j, lo, hi) in &self.boxes {
            x[j] = x[j].max(lo).min(hi);
        }
        for &(ip, iq, cap) in &self.disks {
            let r = x[ip].hypot(x[iq]);
            if r > cap {
                x[ip] *= cap / r;
                x[iq] *= cap / r;
            }
        }
        let nb = self.feeder.num_buses();
        if self.feeder.sf_max.is_finite() {
            for t in 0..self.horizon {
                let idx: Vec<usize> = (0..3)
                    .map(|ph| self.p[t * nb][ph].unwrap())
                    .chain((0..3).map(|ph| self.q[t * nb][ph].unwrap()))
                    .collect();
                let mut y: Vec<f64> = idx.iter().map(|&j| x[j]).collect();
                feeder_exact(&mut y, self.feeder.sf_max);
                for (&j, yi) in idx.iter().zip(y) {
                    x[j] = yi;
                }
            }
        }
        for (m, &start) in self.ev.iter().enumerate() {
            capped_simplex_exact(
                &mut x[start..start + self.horizon],
                &self.ev_caps[m],
                self.fleet[m].energy_need,
            );
        }
    }

    fn unpack(
        &self,
        x: &[f64],
        y: &[f64],
        placement: &[Placement],
    ) -> (GridState, Vec<ChargingProfile>, NetworkMultipliers) {
        let f = self.feeder;
        let nb = f.num_buses();
        let profiles: Vec<ChargingProfile> = self
            .ev
            .iter()
            .map(|&s| ChargingProfile(x[s..s + self.horizon].to_vec()))
            .collect();
        let mut grid = GridState::zeros(self.horizon, nb);
        for t in 0..self.horizon {
            for (n, bus) in f.buses.iter().enumerate() {
                let i = t * nb + n;
                let parent_v = bus.parent.map(|par| grid.at(t, par).v);
                let cell = grid.at_mut(t, n);
                cell.v = parent_v.unwrap_or([f.v0; 3]);
                let get = |ix: &[Option<usize>; 3], ph: usize| ix[ph].map_or(0.0, |j| x[j]);
                for ph in bus.phases.indices() {
                    cell.pg[ph] = get(&self.pg[i], ph);
                    cell.qg[ph] = get(&self.qg[i], ph);
                    cell.p_flow[ph] = get(&self.p[i], ph);
                    cell.q_flow[ph] = get(&self.q[i], ph);
                    cell.pd[ph] = self.loads.p(t, n)[ph];
                    cell.qd[ph] = self.loads.q(t, n)[ph];
                    if let Some(j) = self.v[i][ph] {
                        cell.v[ph] = x[j];
                    }
                }
            }
        }
        for (prof, pl) in profiles.iter().zip(placement) {
            for t in 0..self.horizon {
                grid.at_mut(t, pl.bus).pd[pl.phase.index()] += prof[t];
            }
        }
        let mut mult = NetworkMultipliers {
            buses: nb,
            p: vec![[0.0; 3]; self.horizon * nb],
            q: vec![[0.0; 3]; self.horizon * nb],
            v: vec![[0.0; 3]; self.horizon * nb],
        };
        for (kind, &yi) in self.kinds.iter().zip(y) {
            match *kind {
                Row::P { t, n, ph } => mult.p[t * nb + n][ph] = yi,
                Row::Q { t, n, ph } => mult.q[t * nb + n][ph] = yi,
                Row::V { t, n, ph } => mult.v[t * nb + n][ph] = yi,
            }
        }
        (grid, profiles, mult)
    }
}

/// Objective of a grid state, evaluated from the cost coefficients directly.
fn grid_objective(feeder: &FeederModel, grid: &GridState) -> f64 {
    let mut total = 0.0;
    for t in 0..grid.horizon {
        for (n, bus) in feeder.buses.iter().enumerate() {
            let cell = grid.at(t, n);
            if n == 0 {
                for ph in 0..3 {
                    let p = cell.p_flow[ph];
                    total += feeder.supply.a * p * p + feeder.supply.b * p;
                }
            }
            if let Some(g) = &bus.gen {
                for ph in 0..3 {
                    let p = cell.pg[ph];
                    total += g.a[ph] * p * p + g.b[ph] * p + g.c[ph];
                }
            }
        }
    }
    total
}

/// Feasibility and Lagrangian stationarity of a network point. The flow
/// equations are written row by row as
///
/// ```text
/// hp = pg - pd + P_n - sum_children P_k
/// hq = qg - qd + Q_n - sum_children Q_k
/// hv = v_parent - v_n - Re(Zbar) P_n + Im(Zbar) Q_n
/// ```
///
/// with `pd` the base load plus the plugged-in vehicles, and the Lagrangian
/// is the objective plus `y'h`. Stationarity is the unit-step projected
/// gradient residual, with projections from [`brute_projection`].
pub fn check_network(
    feeder: &FeederModel,
    fleet: &[ChargingRequest],
    placement: &[Placement],
    loads: &NetworkLoads,
    grid: &GridState,
    profiles: &[ChargingProfile],
    mult: &NetworkMultipliers,
) -> Result<Certificate> {
    let horizon = loads.horizon;
    let nb = feeder.num_buses();
    if grid.horizon != horizon || grid.buses != nb || profiles.len() != fleet.len() || placement.len() != fleet.len() {
        return Err(Error::DimensionMismatch(
            "network certificate inputs disagree in shape".into(),
        ));
    }
    let mut infeas: f64 = 0.0;
    let mut ev = vec![[0.0; 3]; horizon * nb];
    for ((req, e), pl) in fleet.iter().zip(profiles).zip(placement) {
        let caps = req.caps(horizon);
        for t in 0..horizon {
            infeas = infeas.max(-e[t]).max(e[t] - caps[t]);
            ev[t * nb + pl.bus][pl.phase.index()] += e[t];
        }
        infeas = infeas.max((e.iter().sum::<f64>() - req.energy_need).abs());
    }
    let mut stat: f64 = 0.0;
    let clip_res = |x: f64, g: f64, lo: f64, hi: f64| (x - (x - g).max(lo).min(hi)).abs();
    for t in 0..horizon {
        let at = |n: usize| grid.at(t, n);
        for (n, bus) in feeder.buses.iter().enumerate() {
            let i = t * nb + n;
            let c = at(n);
            let (pmin, pmax, qmin, qmax) = bus.gen_bounds();
            let mut gp = [0.0; 3];
            let mut gq = [0.0; 3];
            for ph in bus.phases.indices() {
                let out_p: f64 = bus
                    .children
                    .iter()
                    .filter(|&&k| feeder.buses[k].phases.indices().contains(&ph))
                    .map(|&k| at(k).p_flow[ph])
                    .sum();
                let out_q: f64 = bus
                    .children
                    .iter()
                    .filter(|&&k| feeder.buses[k].phases.indices().contains(&ph))
                    .map(|&k| at(k).q_flow[ph])
                    .sum();
                let pd = loads.p(t, n)[ph] + ev[i][ph];
                let qd = loads.q(t, n)[ph];
                infeas = infeas.max((c.pg[ph] - pd + c.p_flow[ph] - out_p).abs());
                infeas = infeas.max((c.qg[ph] - qd + c.q_flow[ph] - out_q).abs());
                infeas = infeas.max(pmin[ph] - c.pg[ph]).max(c.pg[ph] - pmax[ph]);
                infeas = infeas.max(qmin[ph] - c.qg[ph]).max(c.qg[ph] - qmax[ph]);

                let gen_grad = bus.gen.as_ref().map_or(0.0, |g| 2.0 * g.a[ph] * c.pg[ph] + g.b[ph]);
                stat = stat.max(clip_res(c.pg[ph], gen_grad + mult.p[i][ph], pmin[ph], pmax[ph]));
                stat = stat.max(clip_res(c.qg[ph], mult.q[i][ph], qmin[ph], qmax[ph]));

                gp[ph] = mult.p[i][ph];
                gq[ph] = mult.q[i][ph];
                match bus.parent {
                    None => gp[ph] += 2.0 * feeder.supply.a * c.p_flow[ph] + feeder.supply.b,
                    Some(par) => {
                        gp[ph] -= mult.p[t * nb + par][ph];
                        gq[ph] -= mult.q[t * nb + par][ph];
                        for xi in bus.phases.indices() {
                            gp[ph] -= mult.v[i][xi] * bus.zbar[xi][ph].re;
                            gq[ph] += mult.v[i][xi] * bus.zbar[xi][ph].im;
                        }
                        let mut drop = 0.0;
                        for psi in bus.phases.indices() {
                            drop += bus.zbar[ph][psi].re * c.p_flow[psi] - bus.zbar[ph][psi].im * c.q_flow[psi];
                        }
                        let v_parent = if par == 0 { feeder.v0 } else { at(par).v[ph] };
                        infeas = infeas.max((v_parent - c.v[ph] - drop).abs());
                        infeas = infeas.max(bus.v_min - c.v[ph]).max(c.v[ph] - bus.v_max);

                        let mut gv = -mult.v[i][ph];
                        for &k in &bus.children {
                            if feeder.buses[k].phases.indices().contains(&ph) {
                                gv += mult.v[t * nb + k][ph];
                            }
                        }
                        stat = stat.max(clip_res(c.v[ph], gv, bus.v_min, bus.v_max));

                        let (p, q) = (c.p_flow[ph], c.q_flow[ph]);
                        let (tp, tq) = (p - gp[ph], q - gq[ph]);
                        let proj = if bus.s_line_max.is_finite() {
                            infeas = infeas.max(p.hypot(q) - bus.s_line_max);
                            brute_projection(&[tp, tq], &ProjectionSet::Disk { cap: bus.s_line_max })
                        } else {
                            vec![tp, tq]
                        };
                        stat = stat.max((p - proj[0]).abs()).max((q - proj[1]).abs());
                    }
                }
            }
            for ph in 0..3 {
                if !bus.phases.indices().contains(&ph) {
                    infeas = infeas.max(c.p_flow[ph].abs()).max(c.q_flow[ph].abs());
                }
            }
            if n == 0 {
                let head: Vec<f64> = c.p_flow.iter().chain(&c.q_flow).copied().collect();
                let (sp, sq) = feeder_sums(&head);
                infeas = infeas.max(sp.hypot(sq) - feeder.sf_max);
                let trial: Vec<f64> = (0..6)
                    .map(|k| if k < 3 { head[k] - gp[k] } else { head[k] - gq[k - 3] })
                    .collect();
                let proj = if feeder.sf_max.is_finite() {
                    brute_projection(&trial, &ProjectionSet::FeederCap { cap: feeder.sf_max })
                } else {
                    trial
                };
                stat = stat.max(inf_norm_diff(&head, &proj));
            }
        }
    }
    for ((req, e), pl) in fleet.iter().zip(profiles).zip(placement) {
        let trial: Vec<f64> = (0..horizon)
            .map(|t| e[t] + mult.p[t * nb + pl.bus][pl.phase.index()])
            .collect();
        let proj = brute_projection(
            &trial,
            &ProjectionSet::CappedSimplex {
                caps: req.caps(horizon),
                budget: req.energy_need,
            },
        );
        stat = stat.max(inf_norm_diff(e, &proj));
    }
    Ok(Certificate {
        infeasibility: infeas,
        stationarity: Some(stat),
        gap: None,
    })
}

fn network_certified(c: &Certificate) -> bool {
    c.infeasibility <= NETWORK_FEAS_TOL && c.stationarity.is_some_and(|s| s <= NETWORK_STAT_TOL)
}

/// Solves the network-constrained problem (per-unit inputs) by an augmented
/// Lagrangian on the flow equations; every other constraint is kept by
/// projection.
pub fn oracle_network(
    feeder: &FeederModel,
    fleet: &[ChargingRequest],
    placement: &[Placement],
    loads: &NetworkLoads,
) -> Result<OracleReport> {
    if placement.len() != fleet.len() {
        return Err(Error::LengthMismatch {
            expected: fleet.len(),
            found: placement.len(),
        });
    }
    if loads.buses != feeder.num_buses() {
        return Err(Error::DimensionMismatch("load table does not match feeder".into()));
    }
    for pl in placement {
        if pl.bus >= feeder.num_buses() || !feeder.buses[pl.bus].phases.contains(pl.phase) {
            return Err(Error::DimensionMismatch(format!(
                "vehicle placed on missing bus/phase {pl:?}"
            )));
        }
    }
    let prob = Stacked::new(feeder, fleet, placement, loads);
    let curv = prob.quad.iter().fold(0.0_f64, |m, &(_, a, _)| m.max(2.0 * a));
    let a_norm = prob.norm_sq();

    let mut x = vec![0.0; prob.len];
    prob.project(&mut x);
    let mut y = vec![0.0; prob.rows.len()];
    let mut rho = 1.0;
    let mut inner_tol = 1e-6;
    let mut prev_feas = f64::INFINITY;
    let mut iterations = 0;
    let mut last = None;
    for _ in 0..NETWORK_MAX_OUTER {
        let lip = curv + rho * a_norm;
        let grad = |z: &[f64], g: &mut [f64]| {
            prob.objective_gradient(z, g);
            let w: Vec<f64> = prob.residual(z).iter().zip(&y).map(|(h, yi)| yi + rho * h).collect();
            prob.add_transpose(&w, g);
        };
        let proj = |z: &mut [f64]| prob.project(z);
        let mut done = |z: &[f64]| {
            let mut g = vec![0.0; z.len()];
            grad(z, &mut g);
            let mut s: Vec<f64> = z.iter().zip(&g).map(|(a, b)| a - b / lip).collect();
            prob.project(&mut s);
            lip * inf_norm_diff(z, &s) <= inner_tol
        };
        let budget = NETWORK_MAX_INNER.saturating_sub(iterations);
        let used = fista(&mut x, lip, budget, 5, &grad, &proj, &mut done);
        iterations += used.unwrap_or(budget);
        let h = prob.residual(&x);
        for (yi, hi) in y.iter_mut().zip(&h) {
            *yi += rho * hi;
        }
        let (grid, profiles, mult) = prob.unpack(&x, &y, placement);
        let cert = check_network(feeder, fleet, placement, loads, &grid, &profiles, &mult)?;
        let ok = network_certified(&cert)
            && cert.infeasibility <= 0.1 * NETWORK_FEAS_TOL
            && cert.stationarity.is_some_and(|s| s <= 0.1 * NETWORK_STAT_TOL);
        log::debug!("oracle_network: rho {rho:e}, inner {used:?}, {cert:?}");
        last = Some((grid, profiles, mult, cert));
        if ok || used.is_none() {
            break;
        }
        let feas = h.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if feas > 0.25 * prev_feas {
            rho = (rho * 4.0).min(1e8);
        }
        prev_feas = feas;
        inner_tol = (inner_tol * 0.2).max(1e-13);
    }
    let (grid, profiles, mult, certificate) = last.expect("at least one outer iteration");
    let certified = network_certified(&certificate);
    if !certified {
        return Err(Error::NotConverged {
            solver: "oracle_network",
            iterations,
        });
    }
    Ok(OracleReport {
        value: grid_objective(feeder, &grid),
        profiles,
        grid: Some(grid),
        multipliers: Some(mult),
        certificate,
        iterations,
        certified,
    })
}

/// [`oracle_network`] on a prepared case.
pub fn oracle_network_case(case: &NetworkCase) -> Result<OracleReport> {
    oracle_network(&case.feeder, &case.fleet, &case.placement, &case.loads)
}

// ---------------------------------------------------------------------------
// Brute-force projections

#[derive(Debug, Clone, PartialEq)]
pub enum ProjectionSet {
    /// `{x : sum x = budget, 0 <= x <= caps}`.
    CappedSimplex { caps: Vec<f64>, budget: f64 },
    /// `{(p, q) : p^2 + q^2 <= cap^2}`.
    Disk { cap: f64 },
    /// `{(P, Q) in R^3 x R^3 : (1'P)^2 + (1'Q)^2 <= cap^2}`, laid out as
    /// `[P_a, P_b, P_c, Q_a, Q_b, Q_c]`.
    FeederCap { cap: f64 },
}

/// Maximizer of a unimodal function on `[lo, hi]` by golden-section search.
fn golden_max(f: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut a = hi - INV_PHI * (hi - lo);
    let mut b = lo + INV_PHI * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    for _ in 0..400 {
        if hi - lo <= 1e-15 * lo.abs().max(hi.abs()).max(1e-300) {
            break;
        }
        if fa >= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - INV_PHI * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + INV_PHI * (hi - lo);
            fb = f(b);
        }
    }
    0.5 * (lo + hi)
}

/// Zero of a strictly decreasing function on `[lo, hi]`.
fn golden_root(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    golden_max(&|x| -f(x).abs(), lo, hi)
}

/// Euclidean projection onto `set`, computed from the optimality condition of
/// the scalar dual variable rather than any closed form.
///
/// # Panics
///
/// Panics if `point` has the wrong length for a disk or feeder set, or if the
/// capped simplex is empty.
pub fn brute_projection(point: &[f64], set: &ProjectionSet) -> Vec<f64> {
    match set {
        ProjectionSet::CappedSimplex { caps, budget } => {
            assert_eq!(point.len(), caps.len(), "point and caps differ in length");
            let total: f64 = caps.iter().sum();
            assert!(
                *budget <= total * (1.0 + 1e-12) && *budget >= 0.0,
                "empty capped simplex"
            );
            if *budget >= total {
                return caps.clone();
            }
            let at =
                |tau: f64| -> Vec<f64> { point.iter().zip(caps).map(|(&v, &c)| (v - tau).clamp(0.0, c)).collect() };
            // concave dual of the budget constraint
            let dual = |tau: f64| {
                let x = at(tau);
                let fit: f64 = x.iter().zip(point).map(|(a, v)| 0.5 * (a - v) * (a - v)).sum();
                fit + tau * (x.iter().sum::<f64>() - budget)
            };
            let vmin = point.iter().copied().fold(f64::INFINITY, f64::min);
            let vmax = point.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let cmax = caps.iter().copied().fold(0.0, f64::max);
            let coarse = golden_max(&dual, vmin - cmax - 1.0, vmax + 1.0);
            // the dual is flat near its peak, so finish on its derivative,
            // which has no plateau this close to the root
            let excess = |tau: f64| at(tau).iter().sum::<f64>() - budget;
            let w = 1e-5 * (1.0 + coarse.abs());
            let fine = golden_root(&excess, coarse - w, coarse + w);
            at(if excess(fine).abs() <= excess(coarse).abs() {
                fine
            } else {
                coarse
            })
        }
        ProjectionSet::Disk { cap } => {
            assert_eq!(point.len(), 2, "disk projection takes (p, q)");
            let r = point[0].hypot(point[1]);
            if r <= *cap {
                return point.to_vec();
            }
            let nu = golden_root(&|nu| r / (1.0 + nu) - cap, 0.0, r / cap);
            vec![point[0] / (1.0 + nu), point[1] / (1.0 + nu)]
        }
        ProjectionSet::FeederCap { cap } => {
            assert_eq!(point.len(), 6, "feeder projection takes [P; Q]");
            let excess = |nu: f64| {
                let (p, q) = feeder_sums(&feeder_shrink(point, nu));
                p.hypot(q) - cap
            };
            if excess(0.0) <= 0.0 {
                return point.to_vec();
            }
            let mut hi = 1.0;
            while excess(hi) > 0.0 {
                hi *= 2.0;
            }
            feeder_shrink(point, golden_root(&excess, 0.0, hi))
        }
    }
}


#[cfg(test)]
mod network_tests {
    use super::*;
    use crate::grid::{forward_sweep, Injection};
    use crate::instances::toy_3bus;

    #[test]
    fn toy_is_certified() {
        let case = toy_3bus(0).network_case().unwrap();
        let r = oracle_network_case(&case).unwrap();
        assert!(r.certified, "{:?}", r.certificate);
        let again = check_network(
            &case.feeder,
            &case.fleet,
            &case.placement,
            &case.loads,
            r.grid.as_ref().unwrap(),
            &r.profiles,
            r.multipliers.as_ref().unwrap(),
        )
        .unwrap();
        assert_eq!(again, r.certificate);
    }

    #[test]
    fn no_vehicles_matches_sweep() {
        let case = toy_3bus(0).network_case().unwrap();
        let r = oracle_network(&case.feeder, &[], &[], &case.loads).unwrap();
        let nb = case.feeder.num_buses();
        let inj: Vec<Injection> = (0..case.loads.horizon * nb)
            .map(|i| Injection {
                pg: [0.0; 3],
                qg: [0.0; 3],
                pd: *case.loads.p(i / nb, i % nb),
                qd: *case.loads.q(i / nb, i % nb),
            })
            .collect();
        let sweep = forward_sweep(&case.feeder, &inj).unwrap();
        let grid = r.grid.unwrap();
        for t in 0..sweep.horizon {
            for n in 0..nb {
                for ph in case.feeder.buses[n].phases.indices() {
                    assert!((grid.at(t, n).v[ph] - sweep.at(t, n).v[ph]).abs() < 1e-7);
                    assert!((grid.at(t, n).p_flow[ph] - sweep.at(t, n).p_flow[ph]).abs() < 1e-7);
                }
            }
        }
    }
}
