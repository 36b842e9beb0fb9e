//! Consensus ADMM for network-constrained charging.
//!
//! Every bus keeps its own copy of its injections, demand, voltage and the
//! flow on its feeding line (the originals `x`), plus duplicates of the
//! neighbouring values it needs: the parent's voltage and the flows of the
//! lines to its children. All of them are tied to a consensus copy `z`.
//! One outer iteration is
//!
//! 1. per-bus projections of `z - w` onto the local flow equations, and per
//!    `(bus, phase)` valley-filling subproblems for the vehicles;
//! 2. closed-form updates of `z` (boxes, averages, disk projections and the
//!    substation capacity projection);
//! 3. `w += x - z` for every consensus pair, and `mu += d + sum e - pd`.
//!
//! Multipliers are kept in scaled form (divided by `rho`).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::fleet::{BaseLoadSeries, ChargingProfile, ChargingRequest, CostModel, FleetEntry, LoadSample};
use crate::fw::{self, FwConfig, StepRule};
use crate::grid::{forward_sweep, voltage_drop, FeederModel, GridState, Injection, NetworkLoads, Phase, Phase3};
use crate::par::{self, Exec};
use crate::{Error, Result};

/// Tolerance of the post-hoc constraint check.
pub const FEASIBILITY_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdmmConfig {
    pub rho: f64,
    pub max_iter: usize,
    /// Both residuals must fall below `tau_stop * T * sqrt(N)`.
    pub tau_stop: f64,
    /// Consecutive iterations the stopping test must pass; residuals
    /// oscillate, so a single pass can be a zero crossing.
    pub stop_window: usize,
    /// Which primal residual the stopping test uses.
    pub stop_on: ResidualRule,
    pub exec: Exec,
    /// Iteration cap of each inner Frank-Wolfe solve.
    pub inner_max_iter: usize,
    /// Lower bound on the inner duality-gap tolerance.
    pub inner_tol_floor: f64,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            max_iter: 20_000,
            tau_stop: 1e-3,
            stop_window: 50,
            stop_on: ResidualRule::Paper,
            exec: Exec::default(),
            inner_max_iter: 500,
            inner_tol_floor: 1e-12,
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(Error::validation("rho", format!("must be positive, got {}", self.rho)));
        }
        if !(self.tau_stop > 0.0) {
            return Err(Error::validation("tau_stop", "must be positive"));
        }
        Ok(())
    }
}

/// `Paper` tests `|Fx + Gz - b + w|^2`, which settles at `|w*|^2` rather
/// than zero; `Standard` tests `|Fx + Gz - b|^2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualRule {
    #[default]
    Paper,
    Standard,
}

/// Where a vehicle plugs in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub bus: usize,
    pub phase: Phase,
}

/// All ADMM quantities of one bus in one slot. Duplicates are stored at the
/// bus whose line or parent they copy: `v_hat` is this bus's copy of the
/// parent voltage, `p_hat`/`q_hat` are the parent's copy of this bus's flow.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NodeVars {
    pub v: Phase3,
    pub pg: Phase3,
    pub pd: Phase3,
    pub qg: Phase3,
    pub p: Phase3,
    pub q: Phase3,
    pub v_hat: Phase3,
    pub p_hat: Phase3,
    pub q_hat: Phase3,

    pub zv: Phase3,
    pub zpg: Phase3,
    pub zpd: Phase3,
    pub zqg: Phase3,
    pub zp: Phase3,
    pub zq: Phase3,

    pub lv: Phase3,
    pub lpg: Phase3,
    pub lpd: Phase3,
    pub lqg: Phase3,
    pub lp: Phase3,
    pub lq: Phase3,
    pub lv_hat: Phase3,
    pub lp_hat: Phase3,
    pub lq_hat: Phase3,
    pub mu: Phase3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub horizon: usize,
    pub buses: usize,
    /// Slot-major.
    pub nodes: Vec<NodeVars>,
    pub profiles: Vec<ChargingProfile>,
    /// Per slot and bus, the summed vehicle load on each phase.
    pub ev_load: Vec<Phase3>,
}

impl AdmmState {
    pub fn new(feeder: &FeederModel, horizon: usize, vehicles: usize) -> Self {
        let nb = feeder.num_buses();
        let mut nodes = vec![NodeVars::default(); horizon * nb];
        for slot in nodes.chunks_exact_mut(nb) {
            slot[0].zv = [feeder.v0; 3];
        }
        Self {
            horizon,
            buses: nb,
            nodes,
            profiles: vec![ChargingProfile::zeros(horizon); vehicles],
            ev_load: vec![[0.0; 3]; horizon * nb],
        }
    }

    pub fn node(&self, t: usize, n: usize) -> &NodeVars {
        &self.nodes[t * self.buses + n]
    }

    pub fn node_mut(&mut self, t: usize, n: usize) -> &mut NodeVars {
        &mut self.nodes[t * self.buses + n]
    }

    /// The consensus side as a grid state: `z` generation, demand
    /// `d + sum e`, consensus flows and voltages.
    pub fn consensus_state(&self, loads: &NetworkLoads) -> GridState {
        let mut g = GridState::zeros(self.horizon, self.buses);
        for t in 0..self.horizon {
            for n in 0..self.buses {
                let x = self.node(t, n);
                let e = self.ev_load[t * self.buses + n];
                let d = loads.p(t, n);
                let b = g.at_mut(t, n);
                b.v = x.zv;
                b.pg = x.zpg;
                b.qg = x.zqg;
                b.pd = std::array::from_fn(|i| d[i] + e[i]);
                b.qd = *loads.q(t, n);
                b.p_flow = x.zp;
                b.q_flow = x.zq;
            }
        }
        g
    }
}

// ---------------------------------------------------------------------------
// First step: local projections

/// Local variables of one bus. At the substation `v` and `v_hat` are unused.
/// Child entries follow the order of `Bus::children`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LocalVars {
    pub pg: Phase3,
    pub pd: Phase3,
    pub qg: Phase3,
    pub p: Phase3,
    pub q: Phase3,
    pub v: Phase3,
    pub v_hat: Phase3,
    pub child_p: Vec<Phase3>,
    pub child_q: Vec<Phase3>,
}

/// Weighted projection onto `{x : A x = b}` for one bus, with the gain
/// `W^-1 A^T (A W^-1 A^T)^-1` factored once.
#[derive(Debug, Clone)]
struct LocalSystem {
    phases: Vec<usize>,
    children: Vec<Vec<usize>>,
    voltage: bool,
    rows: usize,
    cols: usize,
    /// Row-major `rows x cols`.
    a: Vec<f64>,
    /// Row-major `cols x rows`.
    gain: Vec<f64>,
    /// Linear term and weight on the feeder-head flow (substation only).
    p_weight: f64,
    p_shift: f64,
}

impl LocalSystem {
    fn new(feeder: &FeederModel, n: usize, rho: f64) -> Result<Self> {
        let bus = &feeder.buses[n];
        let phases = bus.phases.indices();
        let s = phases.len();
        let voltage = n != 0;
        let children: Vec<Vec<usize>> = bus.children.iter().map(|&k| feeder.buses[k].phases.indices()).collect();
        let cols = if voltage { 7 * s } else { 5 * s } + children.iter().map(|c| 2 * c.len()).sum::<usize>();
        let rows = if voltage { 3 * s } else { 2 * s };
        let mut a = DMatrix::<f64>::zeros(rows, cols);

        let col_of = |ph: usize| {
            phases
                .iter()
                .position(|&p| p == ph)
                .expect("child phases nest in parent")
        };
        for i in 0..s {
            a[(i, i)] = 1.0; // pg
            a[(i, s + i)] = -1.0; // pd
            a[(i, 3 * s + i)] = 1.0; // P
            a[(s + i, 2 * s + i)] = 1.0; // qg
            a[(s + i, 4 * s + i)] = 1.0; // Q
        }
        let mut off = if voltage { 7 * s } else { 5 * s };
        for ch in &children {
            for (j, &ph) in ch.iter().enumerate() {
                let i = col_of(ph);
                a[(i, off + j)] = -1.0;
                a[(s + i, off + ch.len() + j)] = -1.0;
            }
            off += 2 * ch.len();
        }
        if voltage {
            for (i, &phi) in phases.iter().enumerate() {
                let r = 2 * s + i;
                a[(r, 6 * s + i)] = 1.0; // v_hat
                a[(r, 5 * s + i)] = -1.0; // v
                for (j, &psi) in phases.iter().enumerate() {
                    a[(r, 3 * s + j)] = -bus.zbar[phi][psi].re;
                    a[(r, 4 * s + j)] = bus.zbar[phi][psi].im;
                }
            }
        }

        let (p_weight, p_shift) = if voltage {
            (1.0, 0.0)
        } else {
            (1.0 + 2.0 * feeder.supply.a / rho, feeder.supply.b / rho)
        };
        let mut w_inv = DVector::<f64>::from_element(cols, 1.0);
        for i in 0..s {
            w_inv[3 * s + i] = 1.0 / p_weight;
        }
        let aw = &a * DMatrix::from_diagonal(&w_inv);
        let m = &aw * a.transpose();
        let m_inv = m.cholesky().ok_or(Error::SingularKkt { bus: n })?.inverse();
        let gain = aw.transpose() * m_inv;

        let row_major = |mat: &DMatrix<f64>| -> Vec<f64> {
            (0..mat.nrows())
                .flat_map(|r| (0..mat.ncols()).map(move |c| mat[(r, c)]))
                .collect()
        };
        Ok(Self {
            phases,
            children,
            voltage,
            rows,
            cols,
            a: row_major(&a),
            gain: row_major(&gain),
            p_weight,
            p_shift,
        })
    }

    fn pack(&self, x: &LocalVars) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.cols);
        let mut block = |v: &Phase3| out.extend(self.phases.iter().map(|&p| v[p]));
        block(&x.pg);
        block(&x.pd);
        block(&x.qg);
        block(&x.p);
        block(&x.q);
        if self.voltage {
            block(&x.v);
            block(&x.v_hat);
        }
        for (k, ch) in self.children.iter().enumerate() {
            out.extend(ch.iter().map(|&p| x.child_p[k][p]));
            out.extend(ch.iter().map(|&p| x.child_q[k][p]));
        }
        out
    }

    fn unpack(&self, v: &[f64]) -> LocalVars {
        let s = self.phases.len();
        let block = |i: usize| {
            let mut out = [0.0; 3];
            for (j, &p) in self.phases.iter().enumerate() {
                out[p] = v[i * s + j];
            }
            out
        };
        let mut x = LocalVars {
            pg: block(0),
            pd: block(1),
            qg: block(2),
            p: block(3),
            q: block(4),
            ..LocalVars::default()
        };
        let mut off = 5 * s;
        if self.voltage {
            x.v = block(5);
            x.v_hat = block(6);
            off = 7 * s;
        }
        for ch in &self.children {
            let (mut cp, mut cq) = ([0.0; 3], [0.0; 3]);
            for (j, &p) in ch.iter().enumerate() {
                cp[p] = v[off + j];
                cq[p] = v[off + ch.len() + j];
            }
            x.child_p.push(cp);
            x.child_q.push(cq);
            off += 2 * ch.len();
        }
        x
    }

    fn rhs(&self, qd: &Phase3) -> Vec<f64> {
        let s = self.phases.len();
        let mut b = vec![0.0; self.rows];
        for (i, &p) in self.phases.iter().enumerate() {
            b[s + i] = qd[p];
        }
        b
    }

    fn solve(&self, targets: &LocalVars, qd: &Phase3) -> LocalVars {
        let s = self.phases.len();
        let mut c = self.pack(targets);
        for i in 0..s {
            c[3 * s + i] = (c[3 * s + i] - self.p_shift) / self.p_weight;
        }
        let b = self.rhs(qd);
        let r: Vec<f64> = (0..self.rows)
            .map(|i| {
                let row = &self.a[i * self.cols..(i + 1) * self.cols];
                row.iter().zip(&c).map(|(a, x)| a * x).sum::<f64>() - b[i]
            })
            .collect();
        for (j, cj) in c.iter_mut().enumerate() {
            let row = &self.gain[j * self.rows..(j + 1) * self.rows];
            *cj -= row.iter().zip(&r).map(|(g, x)| g * x).sum::<f64>();
        }
        self.unpack(&c)
    }
}

fn check_local_shape(feeder: &FeederModel, n: usize, x: &LocalVars) -> Result<()> {
    if n >= feeder.num_buses() {
        return Err(Error::DimensionMismatch(format!("bus {n} out of range")));
    }
    let k = feeder.buses[n].children.len();
    if x.child_p.len() != k || x.child_q.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "bus {n} has {k} children, got {} / {} child entries",
            x.child_p.len(),
            x.child_q.len()
        )));
    }
    Ok(())
}

/// Closest point to `targets` satisfying the active and reactive balance and
/// the voltage-drop equation of bus `n != 0`.
pub fn x_update_bus(feeder: &FeederModel, n: usize, targets: &LocalVars, qd: &Phase3) -> Result<LocalVars> {
    if n == 0 {
        return Err(Error::DimensionMismatch(
            "bus 0 is updated by x_update_substation".into(),
        ));
    }
    check_local_shape(feeder, n, targets)?;
    Ok(LocalSystem::new(feeder, n, 1.0)?.solve(targets, qd))
}

/// Minimizes `|x - targets|^2 + (2 / rho) f0(P0)` under the substation's
/// balance equations.
pub fn x_update_substation(feeder: &FeederModel, targets: &LocalVars, qd: &Phase3, rho: f64) -> Result<LocalVars> {
    check_local_shape(feeder, 0, targets)?;
    Ok(LocalSystem::new(feeder, 0, rho)?.solve(targets, qd))
}

/// Largest violation of the local equalities of bus `n`, evaluated directly
/// from the feeder data.
pub fn local_residual(feeder: &FeederModel, n: usize, x: &LocalVars, qd: &Phase3) -> f64 {
    let bus = &feeder.buses[n];
    let mut worst: f64 = 0.0;
    let drop = voltage_drop(&bus.zbar, &x.p, &x.q);
    for ph in bus.phases.indices() {
        let out_p: f64 = x.child_p.iter().map(|c| c[ph]).sum();
        let out_q: f64 = x.child_q.iter().map(|c| c[ph]).sum();
        worst = worst.max((x.pg[ph] - x.pd[ph] - out_p + x.p[ph]).abs());
        worst = worst.max((x.qg[ph] - out_q + x.q[ph] - qd[ph]).abs());
        if n != 0 {
            worst = worst.max((x.v_hat[ph] - x.v[ph] - drop[ph]).abs());
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Second step: closed forms

fn clip(x: f64, lo: f64, hi: f64) -> f64 {
    x.max(lo).min(hi)
}

/// Consensus generation: minimizer of `a p^2 + b p + rho/2 (p - c)^2` on
/// `[lo, hi]`, where `c = pg + lambda`.
pub fn z_update_pg(c: f64, a: f64, b: f64, rho: f64, lo: f64, hi: f64) -> f64 {
    clip((rho * c - b) / (2.0 * a + rho), lo, hi)
}

pub fn z_update_qg(c: f64, lo: f64, hi: f64) -> f64 {
    clip(c, lo, hi)
}

/// Average of the bus's own voltage (plus multiplier) and its children's
/// copies of it (plus multipliers), clipped to the limits.
pub fn z_update_v(own: f64, children: &[f64], lo: f64, hi: f64) -> f64 {
    let sum: f64 = own + children.iter().sum::<f64>();
    clip(sum / (children.len() + 1) as f64, lo, hi)
}

pub fn z_update_pd(pd: f64, lambda: f64, d: f64, ev_sum: f64, mu: f64) -> f64 {
    0.5 * (pd + lambda + d + ev_sum + mu)
}

/// Euclidean projection of `(p, q)` onto the disk of radius `cap`.
pub fn project_line_disk(p: f64, q: f64, cap: f64) -> (f64, f64) {
    let norm = p.hypot(q);
    if norm <= cap || norm == 0.0 {
        (p, q)
    } else {
        let s = cap / norm;
        (p * s, q * s)
    }
}

/// Projection of the three-phase feeder-head flows onto
/// `(1'P)^2 + (1'Q)^2 <= cap^2`. Only the phase sums are constrained, so
/// the correction is uniform across phases.
pub fn project_substation_capacity(p: &Phase3, q: &Phase3, cap: f64) -> (Phase3, Phase3) {
    let sp: f64 = p.iter().sum();
    let sq: f64 = q.iter().sum();
    let sigma = sp.hypot(sq);
    if sigma <= cap {
        return (*p, *q);
    }
    let shrink = 1.0 - cap / sigma;
    let dp = shrink * sp / 3.0;
    let dq = shrink * sq / 3.0;
    (p.map(|x| x - dp), q.map(|x| x - dq))
}

// ---------------------------------------------------------------------------
// Residuals and iteration

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ResidualPair {
    /// `|Fx + Gz - b + w|^2`.
    pub op: f64,
    /// `rho |z - z_prev|^2`.
    pub od: f64,
    /// `|Fx + Gz - b|^2`.
    pub op_std: f64,
}

impl std::ops::AddAssign for ResidualPair {
    fn add_assign(&mut self, o: Self) {
        self.op += o.op;
        self.od += o.od;
        self.op_std += o.op_std;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmmRecord {
    pub iter: usize,
    pub cost: f64,
    pub op: f64,
    pub od: f64,
    pub op_std: f64,
}

/// Stacks every consensus constraint `x - z = 0` (and the vehicle coupling
/// `d + sum e - pd = 0`) of one slot as `(violation, scaled multiplier)`
/// pairs, in a fixed order: per bus, per present phase, the groups
/// pg, qg, pd, P, Q, v, v_hat, P_hat, Q_hat, mu. Voltage and duplicate groups
/// exist only for non-substation buses.
pub fn constraint_pairs(
    feeder: &FeederModel,
    slot: &[NodeVars],
    d: &[Phase3],
    ev: &[Phase3],
    v0: f64,
) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for (n, bus) in feeder.buses.iter().enumerate() {
        let x = &slot[n];
        let parent_zv = bus.parent.map_or([v0; 3], |p| slot[p].zv);
        for ph in bus.phases.indices() {
            out.push((x.pg[ph] - x.zpg[ph], x.lpg[ph]));
            out.push((x.qg[ph] - x.zqg[ph], x.lqg[ph]));
            out.push((x.pd[ph] - x.zpd[ph], x.lpd[ph]));
            out.push((x.p[ph] - x.zp[ph], x.lp[ph]));
            out.push((x.q[ph] - x.zq[ph], x.lq[ph]));
            if n != 0 {
                out.push((x.v[ph] - x.zv[ph], x.lv[ph]));
                out.push((x.v_hat[ph] - parent_zv[ph], x.lv_hat[ph]));
                out.push((x.p_hat[ph] - x.zp[ph], x.lp_hat[ph]));
                out.push((x.q_hat[ph] - x.zq[ph], x.lq_hat[ph]));
            }
            out.push((d[n][ph] + ev[n][ph] - x.zpd[ph], x.mu[ph]));
        }
    }
    out
}

/// `w += violation` for every pair of [`constraint_pairs`], in place.
pub fn multiplier_update(feeder: &FeederModel, slot: &mut [NodeVars], d: &[Phase3], ev: &[Phase3]) {
    let v0 = feeder.v0;
    for n in 0..feeder.num_buses() {
        let bus = &feeder.buses[n];
        let parent_zv = bus.parent.map_or([v0; 3], |p| slot[p].zv);
        let x = &mut slot[n];
        for ph in bus.phases.indices() {
            x.lpg[ph] += x.pg[ph] - x.zpg[ph];
            x.lqg[ph] += x.qg[ph] - x.zqg[ph];
            x.lpd[ph] += x.pd[ph] - x.zpd[ph];
            x.lp[ph] += x.p[ph] - x.zp[ph];
            x.lq[ph] += x.q[ph] - x.zq[ph];
            if n != 0 {
                x.lv[ph] += x.v[ph] - x.zv[ph];
                x.lv_hat[ph] += x.v_hat[ph] - parent_zv[ph];
                x.lp_hat[ph] += x.p_hat[ph] - x.zp[ph];
                x.lq_hat[ph] += x.q_hat[ph] - x.zq[ph];
            }
            x.mu[ph] += d[n][ph] + ev[n][ph] - x.zpd[ph];
        }
    }
}

/// Primal residuals of one slot. `od` is left at zero; see [`dual_residual`].
pub fn residuals(feeder: &FeederModel, slot: &[NodeVars], d: &[Phase3], ev: &[Phase3]) -> ResidualPair {
    let mut r = ResidualPair::default();
    for (viol, w) in constraint_pairs(feeder, slot, d, ev, feeder.v0) {
        r.op += (viol + w) * (viol + w);
        r.op_std += viol * viol;
    }
    r
}

/// `rho |z - z_prev|^2` over the consensus variables of one slot.
pub fn dual_residual(feeder: &FeederModel, slot: &[NodeVars], prev: &[NodeVars], rho: f64) -> f64 {
    let mut s = 0.0;
    for (n, bus) in feeder.buses.iter().enumerate() {
        let (a, b) = (&slot[n], &prev[n]);
        for ph in bus.phases.indices() {
            for (x, y) in [
                (a.zpg, b.zpg),
                (a.zqg, b.zqg),
                (a.zpd, b.zpd),
                (a.zp, b.zp),
                (a.zq, b.zq),
                (a.zv, b.zv),
            ] {
                s += (x[ph] - y[ph]).powi(2);
            }
        }
    }
    rho * s
}

struct Problem<'a> {
    feeder: &'a FeederModel,
    loads: &'a NetworkLoads,
    systems: Vec<LocalSystem>,
    groups: Vec<EvGroup>,
    rho: f64,
}

#[derive(Debug, Clone)]
struct EvGroup {
    bus: usize,
    phase: usize,
    members: Vec<usize>,
    requests: Vec<ChargingRequest>,
}

impl Problem<'_> {
    fn x_step_slot(&self, t: usize, slot: &mut [NodeVars]) {
        for (n, bus) in self.feeder.buses.iter().enumerate() {
            let x = &slot[n];
            let sub = |a: &Phase3, b: &Phase3| -> Phase3 { std::array::from_fn(|i| a[i] - b[i]) };
            let parent_zv = bus.parent.map_or([self.feeder.v0; 3], |p| slot[p].zv);
            let targets = LocalVars {
                pg: sub(&x.zpg, &x.lpg),
                pd: sub(&x.zpd, &x.lpd),
                qg: sub(&x.zqg, &x.lqg),
                p: sub(&x.zp, &x.lp),
                q: sub(&x.zq, &x.lq),
                v: sub(&x.zv, &x.lv),
                v_hat: sub(&parent_zv, &x.lv_hat),
                child_p: bus
                    .children
                    .iter()
                    .map(|&k| sub(&slot[k].zp, &slot[k].lp_hat))
                    .collect(),
                child_q: bus
                    .children
                    .iter()
                    .map(|&k| sub(&slot[k].zq, &slot[k].lq_hat))
                    .collect(),
            };
            let out = self.systems[n].solve(&targets, self.loads.q(t, n));
            let x = &mut slot[n];
            x.pg = out.pg;
            x.pd = out.pd;
            x.qg = out.qg;
            x.p = out.p;
            x.q = out.q;
            if n != 0 {
                x.v = out.v;
                x.v_hat = out.v_hat;
            }
            for (j, &k) in bus.children.iter().enumerate() {
                slot[k].p_hat = out.child_p[j];
                slot[k].q_hat = out.child_q[j];
            }
        }
    }

    fn z_step_slot(&self, t: usize, slot: &mut [NodeVars], ev: &[Phase3]) {
        let rho = self.rho;
        for (n, bus) in self.feeder.buses.iter().enumerate() {
            let (pmin, pmax, qmin, qmax) = bus.gen_bounds();
            let (ga, gb) = bus.gen.as_ref().map_or(([0.0; 3], [0.0; 3]), |g| (g.a, g.b));
            let d = self.loads.p(t, n);
            let mut zv = [0.0; 3];
            let mut children_v = Vec::with_capacity(bus.children.len());
            for ph in bus.phases.indices() {
                if n != 0 {
                    children_v.clear();
                    children_v.extend(
                        bus.children
                            .iter()
                            .filter(|&&k| self.feeder.buses[k].phases.contains(Phase::from_index(ph)))
                            .map(|&k| slot[k].v_hat[ph] + slot[k].lv_hat[ph]),
                    );
                    let x = &slot[n];
                    zv[ph] = z_update_v(x.v[ph] + x.lv[ph], &children_v, bus.v_min, bus.v_max);
                }
            }
            let x = &mut slot[n];
            if n == 0 {
                x.zv = [self.feeder.v0; 3];
            } else {
                x.zv = zv;
            }
            for ph in bus.phases.indices() {
                x.zpg[ph] = z_update_pg(x.pg[ph] + x.lpg[ph], ga[ph], gb[ph], rho, pmin[ph], pmax[ph]);
                x.zqg[ph] = z_update_qg(x.qg[ph] + x.lqg[ph], qmin[ph], qmax[ph]);
                x.zpd[ph] = z_update_pd(x.pd[ph], x.lpd[ph], d[ph], ev[n][ph], x.mu[ph]);
            }
            if n == 0 {
                let pb: Phase3 = std::array::from_fn(|i| x.p[i] + x.lp[i]);
                let qb: Phase3 = std::array::from_fn(|i| x.q[i] + x.lq[i]);
                let (p, q) = project_substation_capacity(&pb, &qb, self.feeder.sf_max);
                x.zp = p;
                x.zq = q;
            } else {
                for ph in bus.phases.indices() {
                    let pb = 0.5 * (x.p[ph] + x.lp[ph] + x.p_hat[ph] + x.lp_hat[ph]);
                    let qb = 0.5 * (x.q[ph] + x.lq[ph] + x.q_hat[ph] + x.lq_hat[ph]);
                    let (p, q) = project_line_disk(pb, qb, bus.s_line_max);
                    x.zp[ph] = p;
                    x.zq[ph] = q;
                }
            }
        }
    }

    fn slot_cost(&self, slot: &[NodeVars]) -> f64 {
        let mut c = self.feeder.supply.value(&slot[0].zp);
        for (n, x) in slot.iter().enumerate() {
            c += self.feeder.gen_cost(n, &x.zpg);
        }
        c
    }
}

/// Post-hoc constraint check of a grid state. Every entry is the largest
/// violation of its constraint family.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub flow: f64,
    pub voltage: f64,
    pub line: f64,
    pub feeder: f64,
    pub generation: f64,
    pub vehicles: f64,
}

impl FeasibilityReport {
    pub fn max(&self) -> f64 {
        [
            self.flow,
            self.voltage,
            self.line,
            self.feeder,
            self.generation,
            self.vehicles,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    pub fn feasible(&self) -> bool {
        self.max() <= FEASIBILITY_TOL
    }
}

pub fn check_feasibility(
    feeder: &FeederModel,
    state: &GridState,
    fleet: &[ChargingRequest],
    profiles: &[ChargingProfile],
    placement: &[Placement],
    loads: &NetworkLoads,
) -> Result<FeasibilityReport> {
    let mut r = FeasibilityReport::default();
    let nb = feeder.num_buses();
    let mut ev = vec![[0.0; 3]; state.horizon * nb];
    for ((req, prof), pl) in fleet.iter().zip(profiles).zip(placement) {
        let caps = req.caps(state.horizon);
        let mut total = 0.0;
        for t in 0..state.horizon {
            ev[t * nb + pl.bus][pl.phase.index()] += prof[t];
            r.vehicles = r.vehicles.max(-prof[t]).max(prof[t] - caps[t]);
            total += prof[t];
        }
        r.vehicles = r.vehicles.max((total - req.energy_need).abs());
    }
    for t in 0..state.horizon {
        for res in crate::grid::flow_residuals(feeder, state, t)? {
            r.flow = r.flow.max(res.max_abs());
        }
        for (n, bus) in feeder.buses.iter().enumerate() {
            let x = state.at(t, n);
            let (pmin, pmax, qmin, qmax) = bus.gen_bounds();
            let d = loads.p(t, n);
            for ph in bus.phases.indices() {
                r.flow = r.flow.max((x.pd[ph] - d[ph] - ev[t * nb + n][ph]).abs());
                r.flow = r.flow.max((x.qd[ph] - loads.q(t, n)[ph]).abs());
                r.generation = r
                    .generation
                    .max(pmin[ph] - x.pg[ph])
                    .max(x.pg[ph] - pmax[ph])
                    .max(qmin[ph] - x.qg[ph])
                    .max(x.qg[ph] - qmax[ph]);
                if n != 0 {
                    r.voltage = r.voltage.max(bus.v_min - x.v[ph]).max(x.v[ph] - bus.v_max);
                    r.line = r.line.max(x.p_flow[ph].hypot(x.q_flow[ph]) - bus.s_line_max);
                }
            }
        }
        let head = state.at(t, 0);
        let s: f64 = head.p_flow.iter().sum::<f64>().hypot(head.q_flow.iter().sum());
        r.feeder = r.feeder.max(s - feeder.sf_max);
    }
    Ok(r)
}

/// Objective of a grid state: supply cost at the feeder head plus
/// distributed generation cost.
pub fn network_objective(feeder: &FeederModel, state: &GridState) -> f64 {
    let mut c = 0.0;
    for t in 0..state.horizon {
        c += feeder.supply.value(&state.at(t, 0).p_flow);
        for n in 0..state.buses {
            c += feeder.gen_cost(n, &state.at(t, n).pg);
        }
    }
    c
}

/// Recomputes flows and voltages from the consensus generation and the
/// vehicle loads, so the flow equations hold exactly.
pub fn repair(feeder: &FeederModel, state: &AdmmState, loads: &NetworkLoads) -> Result<GridState> {
    let nb = feeder.num_buses();
    let mut inj = Vec::with_capacity(state.horizon * nb);
    for t in 0..state.horizon {
        for n in 0..nb {
            let x = state.node(t, n);
            let e = state.ev_load[t * nb + n];
            let d = loads.p(t, n);
            inj.push(Injection {
                pg: x.zpg,
                qg: x.zqg,
                pd: std::array::from_fn(|i| d[i] + e[i]),
                qd: *loads.q(t, n),
            });
        }
    }
    forward_sweep(feeder, &inj)
}

#[derive(Debug, Clone)]
pub struct AdmmOutcome {
    pub state: AdmmState,
    /// Consensus-side state as iterated.
    pub raw: GridState,
    /// Flows and voltages recomputed from the final injections.
    pub repaired: GridState,
    pub objective: f64,
    pub feasibility: FeasibilityReport,
    pub trace: Vec<AdmmRecord>,
    pub converged: bool,
    pub iterations: usize,
    pub threshold: f64,
}

fn validate_inputs(
    feeder: &FeederModel,
    fleet: &[ChargingRequest],
    placement: &[Placement],
    loads: &NetworkLoads,
) -> Result<()> {
    if placement.len() != fleet.len() {
        return Err(Error::LengthMismatch {
            expected: fleet.len(),
            found: placement.len(),
        });
    }
    if loads.buses != feeder.num_buses() {
        return Err(Error::DimensionMismatch(format!(
            "loads cover {} buses, feeder has {}",
            loads.buses,
            feeder.num_buses()
        )));
    }
    if feeder.buses[0].phases != crate::grid::PhaseSet::ABC {
        return Err(Error::validation("bus 0", "substation must carry all three phases"));
    }
    for (req, pl) in fleet.iter().zip(placement) {
        crate::fleet::validate_request(req, loads.horizon)?;
        let bus = feeder.buses.get(pl.bus).ok_or_else(|| Error::InvalidRequest {
            id: req.id.clone(),
            message: format!("bus index {} out of range", pl.bus),
        })?;
        if !bus.phases.contains(pl.phase) {
            return Err(Error::InvalidRequest {
                id: req.id.clone(),
                message: format!("bus `{}` has no phase {}", bus.id, pl.phase),
            });
        }
    }
    Ok(())
}

/// Stopping threshold `tau * T * sqrt(N)`, with `N` the number of
/// non-substation buses.
pub fn stopping_threshold(feeder: &FeederModel, horizon: usize, tau: f64) -> f64 {
    tau * horizon as f64 * (feeder.num_lines().max(1) as f64).sqrt()
}

pub fn solve(
    feeder: &FeederModel,
    fleet: &[ChargingRequest],
    placement: &[Placement],
    loads: &NetworkLoads,
    cfg: &AdmmConfig,
) -> Result<AdmmOutcome> {
    cfg.validate()?;
    validate_inputs(feeder, fleet, placement, loads)?;
    let horizon = loads.horizon;
    let nb = feeder.num_buses();

    let systems = (0..nb)
        .map(|n| LocalSystem::new(feeder, n, cfg.rho))
        .collect::<Result<Vec<_>>>()?;
    let mut by_group: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (m, pl) in placement.iter().enumerate() {
        by_group.entry((pl.bus, pl.phase.index())).or_default().push(m);
    }
    let groups = by_group
        .into_iter()
        .map(|((bus, phase), members)| EvGroup {
            bus,
            phase,
            requests: members.iter().map(|&m| fleet[m].clone()).collect(),
            members,
        })
        .collect();
    let prob = Problem {
        feeder,
        loads,
        systems,
        groups,
        rho: cfg.rho,
    };

    let threshold = stopping_threshold(feeder, horizon, cfg.tau_stop);
    let mut state = AdmmState::new(feeder, horizon, fleet.len());
    let mut trace = Vec::new();
    let mut converged = false;
    let mut passed = 0usize;
    let mut outer_scale = f64::INFINITY;
    let mut warm = false;
    let d_slots: Vec<Vec<Phase3>> = (0..horizon)
        .map(|t| (0..nb).map(|n| *loads.p(t, n)).collect())
        .collect();

    for iter in 1..=cfg.max_iter {
        // first step: buses per slot, vehicles per (bus, phase)
        par::for_each_mut(
            cfg.exec,
            &mut state.nodes.chunks_mut(nb).collect::<Vec<_>>(),
            |t, slot| prob.x_step_slot(t, slot),
        );
        let inner_tol = cfg.inner_tol_floor.max(1e-6_f64.min(0.1 * outer_scale));
        let solved = par::try_map(cfg.exec, &prob.groups, |_, g| {
            let l: Vec<f64> = (0..horizon)
                .map(|t| {
                    let x = state.node(t, g.bus);
                    loads.p(t, g.bus)[g.phase] - x.zpd[g.phase] + x.mu[g.phase]
                })
                .collect();
            let fw_cfg = FwConfig {
                max_iter: cfg.inner_max_iter,
                rel_tol: 0.0,
                gap_tol: Some(inner_tol),
                gap_rtol: None,
                step: StepRule::LineSearch,
                exec: Exec::Sequential,
            };
            let start = warm.then(|| g.members.iter().map(|&m| state.profiles[m].clone()).collect());
            fw::schedule_from(
                &g.requests,
                &BaseLoadSeries::new(l)?,
                &CostModel::QuadraticValley,
                &fw_cfg,
                start,
            )
        })?;
        warm = true;
        state.ev_load.iter_mut().for_each(|e| *e = [0.0; 3]);
        for (g, out) in prob.groups.iter().zip(solved) {
            for (&m, prof) in g.members.iter().zip(out.profiles) {
                state.profiles[m] = prof;
            }
            for t in 0..horizon {
                state.ev_load[t * nb + g.bus][g.phase] = out.aggregate[t];
            }
        }

        // second step and multipliers
        let prev = state.nodes.clone();
        let ev_load = &state.ev_load;
        let mut slots: Vec<&mut [NodeVars]> = state.nodes.chunks_mut(nb).collect();
        let parts = par_map_mut(cfg.exec, &mut slots, |t, slot| {
            let ev = &ev_load[t * nb..(t + 1) * nb];
            prob.z_step_slot(t, slot, ev);
            let od = dual_residual(feeder, slot, &prev[t * nb..(t + 1) * nb], cfg.rho);
            multiplier_update(feeder, slot, &d_slots[t], ev);
            let mut r = residuals(feeder, slot, &d_slots[t], ev);
            r.od = od;
            (r, prob.slot_cost(slot))
        });
        let mut res = ResidualPair::default();
        let mut cost = 0.0;
        for (r, c) in parts {
            res += r;
            cost += c;
        }
        trace.push(AdmmRecord {
            iter,
            cost,
            op: res.op,
            od: res.od,
            op_std: res.op_std,
        });
        outer_scale = res.op_std.max(res.od);
        let primal = match cfg.stop_on {
            ResidualRule::Paper => res.op,
            ResidualRule::Standard => res.op_std,
        };
        if primal <= threshold && res.od <= threshold {
            passed += 1;
            if passed >= cfg.stop_window.max(1) {
                converged = true;
                break;
            }
        } else {
            passed = 0;
        }
    }

    let raw = state.consensus_state(loads);
    let repaired = repair(feeder, &state, loads)?;
    let feasibility = check_feasibility(feeder, &repaired, fleet, &state.profiles, placement, loads)?;
    if converged && !feasibility.feasible() {
        log::warn!("repaired state violates constraints by {:.3e}", feasibility.max());
    }
    Ok(AdmmOutcome {
        objective: network_objective(feeder, &repaired),
        iterations: trace.len(),
        state,
        raw,
        repaired,
        feasibility,
        trace,
        converged,
        threshold,
    })
}

/// Like [`par::map`] but over mutable items.
fn par_map_mut<T: Send, U: Send>(exec: Exec, items: &mut [T], f: impl Fn(usize, &mut T) -> U + Sync + Send) -> Vec<U> {
    let mut out: Vec<Option<U>> = (0..items.len()).map(|_| None).collect();
    let mut pairs: Vec<(&mut T, &mut Option<U>)> = items.iter_mut().zip(out.iter_mut()).collect();
    par::for_each_mut(exec, &mut pairs, |i, (item, slot)| **slot = Some(f(i, item)));
    out.into_iter().map(|u| u.expect("every slot visited")).collect()
}

/// A network problem in per-unit: vehicle energies and rates are divided by
/// the feeder's base power.
#[derive(Debug, Clone)]
pub struct NetworkCase {
    pub feeder: FeederModel,
    pub fleet: Vec<ChargingRequest>,
    pub placement: Vec<Placement>,
    pub loads: NetworkLoads,
}

impl NetworkCase {
    pub fn new(feeder: FeederModel, entries: &[FleetEntry], samples: &[LoadSample], horizon: usize) -> Result<Self> {
        let loads = NetworkLoads::from_samples(&feeder, samples, horizon)?;
        let mut fleet = Vec::with_capacity(entries.len());
        let mut placement = Vec::with_capacity(entries.len());
        for e in entries {
            let id = &e.request.id;
            let missing = |what: &str| Error::InvalidRequest {
                id: id.clone(),
                message: format!("missing {what} for network mode"),
            };
            let bus_id = e.bus.as_deref().ok_or_else(|| missing("bus"))?;
            let phase = e.phase.ok_or_else(|| missing("phase"))?;
            let bus = feeder.bus_index(bus_id).ok_or_else(|| Error::InvalidRequest {
                id: id.clone(),
                message: format!("unknown bus `{bus_id}`"),
            })?;
            fleet.push(e.request.scaled(1.0 / feeder.base_kva));
            placement.push(Placement { bus, phase });
        }
        validate_inputs(&feeder, &fleet, &placement, &loads)?;
        Ok(Self {
            feeder,
            fleet,
            placement,
            loads,
        })
    }

    pub fn solve(&self, cfg: &AdmmConfig) -> Result<AdmmOutcome> {
        solve(&self.feeder, &self.fleet, &self.placement, &self.loads, cfg)
    }

    pub fn solution(&self, out: &AdmmOutcome) -> NetworkSolution {
        NetworkSolution::new(&self.feeder, &self.fleet, out, self.feeder.base_kva)
    }

    pub fn with_limits_scaled(&self, factor: f64) -> Self {
        Self {
            feeder: self.feeder.with_limits_scaled(factor),
            ..self.clone()
        }
    }
}

// ---------------------------------------------------------------------------
// Result file

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusSolution {
    pub id: String,
    pub v: Phase3,
    pub pg: Phase3,
    pub qg: Phase3,
    pub pd: Phase3,
    pub qd: Phase3,
    pub p_flow: Phase3,
    pub q_flow: Phase3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotSolution {
    pub t: usize,
    pub buses: Vec<BusSolution>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSolution {
    pub id: String,
    pub values: Vec<f64>,
}

/// Network solution as written to disk. Powers are per-unit, voltages are
/// squared per-unit magnitudes; profiles are in the fleet's own units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSolution {
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    pub max_violation: f64,
    pub slots: Vec<SlotSolution>,
    pub raw: Vec<SlotSolution>,
    pub profiles: Vec<ProfileSolution>,
}

fn slot_solutions(feeder: &FeederModel, g: &GridState) -> Vec<SlotSolution> {
    (0..g.horizon)
        .map(|t| SlotSolution {
            t,
            buses: feeder
                .buses
                .iter()
                .enumerate()
                .map(|(n, b)| {
                    let x = g.at(t, n);
                    BusSolution {
                        id: b.id.clone(),
                        v: x.v,
                        pg: x.pg,
                        qg: x.qg,
                        pd: x.pd,
                        qd: x.qd,
                        p_flow: x.p_flow,
                        q_flow: x.q_flow,
                    }
                })
                .collect(),
        })
        .collect()
}

impl NetworkSolution {
    /// `profile_scale` converts per-unit profiles back to fleet units.
    pub fn new(feeder: &FeederModel, fleet: &[ChargingRequest], out: &AdmmOutcome, profile_scale: f64) -> Self {
        Self {
            objective: out.objective,
            converged: out.converged,
            iterations: out.iterations,
            max_violation: out.feasibility.max(),
            slots: slot_solutions(feeder, &out.repaired),
            raw: slot_solutions(feeder, &out.raw),
            profiles: fleet
                .iter()
                .zip(&out.state.profiles)
                .map(|(r, p)| ProfileSolution {
                    id: r.id.clone(),
                    values: p.iter().map(|x| x * profile_scale).collect(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::parse_feeder_str;
    use approx::assert_relative_eq;

    #[test]
    fn z_update_examples() {
        assert_eq!(z_update_pg(0.5, 0.0, 0.0, 1.0, 0.0, 1.0), 0.5);
        assert_eq!(z_update_pg(2.0, 0.0, 0.0, 1.0, 0.0, 0.3), 0.3);
        assert_relative_eq!(z_update_pg(1.0, 1.0, 0.2, 2.0, 0.0, 10.0), 0.45, epsilon = 1e-15);
        assert_eq!(z_update_pd(0.0, 0.0, 0.0, 0.0, 0.0), 0.0);
        assert_relative_eq!(z_update_pd(1.0, 0.5, 2.0, 0.3, 0.2), 2.0, epsilon = 1e-15);
        assert_eq!(z_update_v(1.02, &[], 0.9, 1.1), 1.02);
        assert_eq!(z_update_v(1.0, &[1.0, 1.0], 0.9, 1.1), 1.0);
        assert_eq!(z_update_v(2.0, &[], 0.9, 1.1), 1.1);
        assert_eq!(z_update_qg(-3.0, -1.0, 1.0), -1.0);
    }

    #[test]
    fn disk_examples() {
        assert_eq!(project_line_disk(3.0, 4.0, 5.0), (3.0, 4.0));
        let (p, q) = project_line_disk(6.0, 8.0, 5.0);
        assert_relative_eq!(p, 3.0, epsilon = 1e-15);
        assert_relative_eq!(q, 4.0, epsilon = 1e-15);
        assert_eq!(project_line_disk(0.0, 0.0, 1.0), (0.0, 0.0));
        assert_eq!(project_line_disk(0.0, 0.0, 0.0), (0.0, 0.0));
    }

    #[test]
    fn substation_examples() {
        let (p, q) = project_substation_capacity(&[0.1, 0.2, 0.3], &[0.0; 3], 1.0);
        assert_eq!((p, q), ([0.1, 0.2, 0.3], [0.0; 3]));

        let (p, q) = project_substation_capacity(&[2.0; 3], &[0.0; 3], 3.0);
        for x in p {
            assert_relative_eq!(x, 1.0, epsilon = 1e-15);
        }
        assert_eq!(q, [0.0; 3]);

        let (p, q) = project_substation_capacity(&[3.0, -1.0, 1.0], &[0.0, 4.0, 0.0], 2.5);
        let want_p = [2.5, -1.5, 0.5];
        let want_q = [-2.0 / 3.0, 4.0 - 2.0 / 3.0, -2.0 / 3.0];
        for i in 0..3 {
            assert_relative_eq!(p[i], want_p[i], epsilon = 1e-14);
            assert_relative_eq!(q[i], want_q[i], epsilon = 1e-14);
        }
        let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
        assert_relative_eq!(sp * sp + sq * sq, 6.25, epsilon = 1e-12);
    }

    fn toy_feeder(supply_a: f64) -> FeederModel {
        let z = r#"[[{"re":0.01,"im":0.02},{"re":0.002,"im":0.004},{"re":0,"im":0}],
                    [{"re":0.002,"im":0.004},{"re":0.012,"im":0.025},{"re":0,"im":0}],
                    [{"re":0,"im":0},{"re":0,"im":0},{"re":0,"im":0}]]"#;
        let json = format!(
            r#"{{"version": 1, "base": {{"kva": 100, "kv": 4.16}}, "sf_max_pu": 10, "v0_pu2": 1.0,
            "supply_cost": {{"a": {supply_a}, "b": 0.0}},
            "buses": [
              {{"id": "s", "parent": null, "phases": "abc", "v_min_pu2": 0.9, "v_max_pu2": 1.1}},
              {{"id": "m", "parent": "s", "phases": "ab", "z": {z}, "v_min_pu2": 0.9, "v_max_pu2": 1.1}},
              {{"id": "l", "parent": "m", "phases": "ab", "z": {z}, "v_min_pu2": 0.9, "v_max_pu2": 1.1}}
            ]}}"#
        );
        parse_feeder_str(&json).unwrap()
    }

    fn random_targets(feeder: &FeederModel, n: usize, seed: u64) -> LocalVars {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut r = || -> Phase3 { std::array::from_fn(|_| rng.random_range(-1.0..1.0)) };
        let k = feeder.buses[n].children.len();
        let mut x = LocalVars {
            pg: r(),
            pd: r(),
            qg: r(),
            p: r(),
            q: r(),
            v: r(),
            v_hat: r(),
            child_p: Vec::new(),
            child_q: Vec::new(),
        };
        for _ in 0..k {
            let (a, b) = (r(), r());
            x.child_p.push(a);
            x.child_q.push(b);
        }
        x
    }

    #[test]
    fn x_update_zero_targets_stay_zero() {
        let f = toy_feeder(1.0);
        let t = LocalVars {
            child_p: vec![],
            child_q: vec![],
            ..LocalVars::default()
        };
        let out = x_update_bus(&f, 2, &t, &[0.0; 3]).unwrap();
        assert_eq!(out, t);
    }

    #[test]
    fn x_update_is_a_projection() {
        let f = toy_feeder(1.0);
        for seed in 0..20 {
            let targets = random_targets(&f, 1, seed);
            let qd = [0.1, -0.2, 0.0];
            let out = x_update_bus(&f, 1, &targets, &qd).unwrap();
            assert!(local_residual(&f, 1, &out, &qd) <= 1e-10);
            let again = x_update_bus(&f, 1, &out, &qd).unwrap();
            assert!(local_residual(&f, 1, &again, &qd) <= 1e-10);
            for (a, b) in [(out.p, again.p), (out.v, again.v), (out.child_q[0], again.child_q[0])] {
                for i in 0..3 {
                    assert_relative_eq!(a[i], b[i], epsilon = 1e-12);
                }
            }
            // absent phase untouched
            assert_eq!(out.p[2], 0.0);
        }
    }

    #[test]
    fn substation_heavy_cost_pins_flow() {
        let f = toy_feeder(1e9);
        let targets = random_targets(&f, 0, 3);
        let out = x_update_substation(&f, &targets, &[0.0; 3], 1.0).unwrap();
        assert!(out.p.iter().all(|p| p.abs() <= 1e-6));
        assert!(local_residual(&f, 0, &out, &[0.0; 3]) <= 1e-10);
    }

    #[test]
    fn multiplier_update_adds_violation() {
        let f = toy_feeder(1.0);
        let mut slot = vec![NodeVars::default(); 3];
        slot[0].zv = [1.0; 3];
        slot[1].p[0] = 0.25;
        let d = vec![[0.0; 3]; 3];
        let ev = vec![[0.0; 3]; 3];
        let before = slot.clone();
        multiplier_update(&f, &mut slot, &d, &ev);
        assert_eq!(slot[1].lp[0], 0.25);
        let mut expect = before[1];
        expect.lp[0] = 0.25;
        // children's v_hat copy the fixed substation voltage
        assert_eq!(slot[1].lv_hat, [-1.0, -1.0, 0.0]);
        expect.lv_hat = [-1.0, -1.0, 0.0];
        assert_eq!(slot[1], expect);
        assert_eq!(slot[2], before[2]);
    }

    #[test]
    fn no_vehicles_matches_sweep() {
        let f = toy_feeder(0.001);
        let mut loads = NetworkLoads::zeros(2, 3);
        loads.p_mut(0, 1)[0] = 0.3;
        loads.p_mut(1, 2)[1] = 0.2;
        loads.q_mut(0, 2)[0] = 0.05;
        let out = solve(&f, &[], &[], &loads, &AdmmConfig::default()).unwrap();
        assert!(out.converged, "{:?}", out.trace.last());
        assert!(out.feasibility.feasible(), "{:?}", out.feasibility);
        assert_relative_eq!(out.repaired.at(0, 0).p_flow[0], 0.3, epsilon = 1e-3);
        assert_relative_eq!(out.repaired.at(1, 0).p_flow[1], 0.2, epsilon = 1e-3);
    }
}
