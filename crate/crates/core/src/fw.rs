//! Decentralized Frank-Wolfe charging protocol.
//!
//! Each iteration the charging center computes the common cost gradient from
//! the aggregate load, sorts the slots by price and broadcasts only that
//! ordering. Every vehicle then solves its linear subproblem greedily (fill
//! the cheapest available slots first) and moves its profile toward the
//! greedy vertex by a convex combination. Only sums of profiles travel back
//! to the center.

use serde::{Deserialize, Serialize};

use crate::fleet::{
    aggregate, cost_of_aggregate, validate_request, BaseLoadSeries, ChargingProfile, ChargingRequest, CostModel,
};
use crate::par::{self, Exec};
use crate::{Error, Result};

/// Slots ordered from cheapest to most expensive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PriceOrdering(Vec<usize>);

impl PriceOrdering {
    /// Slots in index order, i.e. the ordering induced by uniform prices.
    pub fn identity(horizon: usize) -> Self {
        Self((0..horizon).collect())
    }

    /// Wraps an explicit permutation of `0..len`.
    pub fn from_permutation(perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &t in &perm {
            if t >= perm.len() || std::mem::replace(&mut seen[t], true) {
                return Err(Error::DimensionMismatch(format!("{perm:?} is not a permutation")));
            }
        }
        Ok(Self(perm))
    }

    pub fn slots(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `g(t) = C_t'(d(t) + aggregate(t))`.
pub fn common_gradient(d: &[f64], aggregate: &[f64], cost: &CostModel) -> Result<Vec<f64>> {
    if d.len() != aggregate.len() {
        return Err(Error::LengthMismatch {
            expected: d.len(),
            found: aggregate.len(),
        });
    }
    Ok(d.iter()
        .zip(aggregate)
        .enumerate()
        .map(|(t, (&d, &a))| cost.derivative(t, d + a))
        .collect())
}

/// Stable sort of slot indices by price; ties keep ascending slot order.
pub fn sort_prices(g: &[f64]) -> Result<PriceOrdering> {
    if let Some(slot) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient { slot });
    }
    let mut order: Vec<usize> = (0..g.len()).collect();
    // slice::sort_by is a stable merge sort
    order.sort_by(|&i, &j| g[i].total_cmp(&g[j]));
    Ok(PriceOrdering(order))
}

/// Exact minimizer of `r . g` over the vehicle's feasible set, computed from
/// the price ordering alone.
///
/// Walks the slots cheapest first, assigning the full rate cap until the
/// next cap would overshoot the energy need; the pivot slot receives the
/// remainder and all later slots zero.
pub fn lmo_greedy(req: &ChargingRequest, ordering: &PriceOrdering) -> Result<ChargingProfile> {
    let horizon = ordering.len();
    validate_request(req, horizon)?;
    let mut r = vec![0.0; horizon];
    greedy_into(&req.caps(horizon), req.energy_need, ordering, &mut r);
    Ok(ChargingProfile(r))
}

fn greedy_into(caps: &[f64], need: f64, ordering: &PriceOrdering, out: &mut [f64]) {
    out.fill(0.0);
    let mut remaining = need;
    for &t in ordering.slots() {
        if remaining <= 0.0 {
            break;
        }
        let cap = caps[t];
        if remaining >= cap {
            out[t] = cap;
            remaining -= cap;
        } else {
            out[t] = remaining;
            remaining = 0.0;
        }
    }
}

/// Open-loop step size `2 / (k + 2)`.
pub fn step_size(k: usize) -> f64 {
    2.0 / (k as f64 + 2.0)
}

/// `(1 - eta_k) e + eta_k r`.
pub fn fw_step(e: &ChargingProfile, r: &ChargingProfile, k: usize) -> ChargingProfile {
    let mut out = e.clone();
    blend(&mut out, r, step_size(k));
    out
}

fn blend(e: &mut ChargingProfile, r: &ChargingProfile, eta: f64) {
    if eta == 1.0 {
        e.0.copy_from_slice(r);
        return;
    }
    // exact when x == y, so coordinates sitting at a cap stay there
    for (x, &y) in e.0.iter_mut().zip(r.iter()) {
        *x += eta * (y - *x);
    }
}

/// Frank-Wolfe duality gap `sum_m g . (e_m - r_m)`; an upper bound on the
/// suboptimality of `profiles` whenever `lmo` holds exact minimizers.
pub fn duality_gap(g: &[f64], profiles: &[ChargingProfile], lmo: &[ChargingProfile]) -> f64 {
    profiles
        .iter()
        .zip(lmo)
        .map(|(e, r)| {
            g.iter()
                .zip(e.iter().zip(r.iter()))
                .map(|(&g, (&e, &r))| g * (e - r))
                .sum::<f64>()
        })
        .sum()
}

/// How far to move toward the greedy vertex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepRule {
    /// `eta_k = 2 / (k + 2)`, the classic open-loop rule.
    #[default]
    OpenLoop,
    /// Exact minimization of the cost along the segment (closed form for
    /// quadratic and linear slot costs).
    LineSearch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FwConfig {
    pub max_iter: usize,
    /// Stop once the relative change of the cost between two consecutive
    /// iterates falls below this value.
    pub rel_tol: f64,
    /// Stop once the duality gap falls below this value.
    pub gap_tol: Option<f64>,
    /// Stop once the duality gap falls below this fraction of the cost.
    #[serde(default)]
    pub gap_rtol: Option<f64>,
    pub step: StepRule,
    pub exec: Exec,
}

impl Default for FwConfig {
    fn default() -> Self {
        Self {
            max_iter: 100_000,
            rel_tol: 1e-7,
            gap_tol: None,
            gap_rtol: None,
            step: StepRule::OpenLoop,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FwRecord {
    pub k: usize,
    /// Cost of the feasible iterate `e^k`.
    pub cost: f64,
    /// Duality gap at `e^k`.
    pub duality_gap: f64,
    /// Step taken from `e^k` to `e^{k+1}`.
    pub eta: f64,
}

pub type FwTrace = Vec<FwRecord>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    RelativeCost,
    DualityGap,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct FwOutcome {
    pub profiles: Vec<ChargingProfile>,
    pub aggregate: Vec<f64>,
    pub cost: f64,
    pub trace: FwTrace,
    pub stop: StopReason,
}

impl FwOutcome {
    pub fn converged(&self) -> bool {
        self.stop != StopReason::MaxIter
    }

    pub fn iterations(&self) -> usize {
        self.trace.len()
    }

    pub fn final_gap(&self) -> f64 {
        self.trace.last().map_or(0.0, |r| r.duality_gap)
    }
}

/// Runs the protocol from the all-zeros start.
pub fn schedule(fleet: &[ChargingRequest], d: &BaseLoadSeries, cost: &CostModel, cfg: &FwConfig) -> Result<FwOutcome> {
    schedule_from(fleet, d, cost, cfg, None)
}

/// Runs the protocol, optionally warm-started from feasible profiles.
///
/// From the all-zeros start the first step is a full step onto the greedy
/// vertex, after which every iterate is feasible. Trace records start at the
/// first feasible iterate.
pub fn schedule_from(
    fleet: &[ChargingRequest],
    d: &BaseLoadSeries,
    cost: &CostModel,
    cfg: &FwConfig,
    warm: Option<Vec<ChargingProfile>>,
) -> Result<FwOutcome> {
    let horizon = d.horizon();
    cost.check(horizon)?;
    for req in fleet {
        validate_request(req, horizon)?;
    }
    let (mut profiles, mut feasible) = match warm {
        Some(w) => {
            if w.len() != fleet.len() {
                return Err(Error::LengthMismatch {
                    expected: fleet.len(),
                    found: w.len(),
                });
            }
            if let Some(p) = w.iter().find(|p| p.len() != horizon) {
                return Err(Error::LengthMismatch {
                    expected: horizon,
                    found: p.len(),
                });
            }
            (w, true)
        }
        None => (
            vec![ChargingProfile::zeros(horizon); fleet.len()],
            fleet.iter().all(|r| r.energy_need == 0.0),
        ),
    };

    let caps: Vec<Vec<f64>> = fleet.iter().map(|r| r.caps(horizon)).collect();
    // greedy vertex of each vehicle and its share of the duality gap
    let mut work = vec![(ChargingProfile::zeros(horizon), 0.0); fleet.len()];
    let mut agg = aggregate(&profiles, horizon);
    let mut trace = FwTrace::new();
    let mut prev_cost: Option<f64> = None;
    let mut k = 0usize;
    let mut increases = 0usize;
    loop {
        let g = common_gradient(d.values(), &agg, cost)?;
        let ordering = sort_prices(&g)?;
        par::for_each_mut(cfg.exec, &mut work, |m, (r, share)| {
            greedy_into(&caps[m], fleet[m].energy_need, &ordering, &mut r.0);
            *share = g
                .iter()
                .zip(profiles[m].iter().zip(r.iter()))
                .map(|(&g, (&e, &r))| g * (e - r))
                .sum();
        });

        let eta = if feasible {
            let gap: f64 = work.iter().map(|w| w.1).sum();
            let c = cost_of_aggregate(d.values(), &agg, cost);
            let eta = match cfg.step {
                StepRule::OpenLoop => step_size(k),
                StepRule::LineSearch => {
                    let mut lmo_agg = vec![0.0; horizon];
                    for (r, _) in &work {
                        for (a, &x) in lmo_agg.iter_mut().zip(r.iter()) {
                            *a += x;
                        }
                    }
                    line_search(&agg, &lmo_agg, gap, cost)
                }
            };
            trace.push(FwRecord {
                k,
                cost: c,
                duality_gap: gap,
                eta,
            });

            if let Some(p) = prev_cost {
                if c > p + 1e-9 * p.abs().max(1.0) {
                    increases += 1;
                    log::debug!("no progress at k={k}: cost {p} -> {c}");
                }
            }
            let stop = if gap <= cfg.gap_tol.unwrap_or(0.0) || cfg.gap_rtol.is_some_and(|r| gap <= r * c.abs()) {
                Some(StopReason::DualityGap)
            } else if prev_cost.is_some_and(|p| (c - p).abs() <= cfg.rel_tol * c.abs()) {
                Some(StopReason::RelativeCost)
            } else if trace.len() >= cfg.max_iter {
                Some(StopReason::MaxIter)
            } else {
                None
            };
            if let Some(stop) = stop {
                if increases > 0 {
                    log::warn!(
                        "frank-wolfe cost increased on {increases} of {} iterations",
                        trace.len()
                    );
                }
                return Ok(FwOutcome {
                    profiles,
                    aggregate: agg,
                    cost: c,
                    trace,
                    stop,
                });
            }
            prev_cost = Some(c);
            eta
        } else {
            1.0
        };

        par::for_each_mut(cfg.exec, &mut profiles, |m, e| blend(e, &work[m].0, eta));
        agg = aggregate(&profiles, horizon);
        feasible = true;
        k += 1;
    }
}

/// Exact step along `agg -> lmo_agg` for quadratic and linear slot costs.
fn line_search(agg: &[f64], lmo_agg: &[f64], gap: f64, cost: &CostModel) -> f64 {
    if gap <= 0.0 {
        return 0.0;
    }
    let curvature: f64 = agg
        .iter()
        .zip(lmo_agg)
        .enumerate()
        .map(|(t, (&a, &r))| cost.curvature(t) * (r - a) * (r - a))
        .sum();
    if curvature <= 0.0 {
        1.0
    } else {
        (gap / curvature).min(1.0)
    }
}

// ---------------------------------------------------------------------------
// Aggregation over a communication tree

/// Rooted tree over the charging center (node 0) and vehicles (node `m + 1`
/// holds vehicle `m`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregationTree {
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    /// Breadth-first order from the center.
    order: Vec<usize>,
}

impl AggregationTree {
    /// `parents[i]` is the parent of node `i + 1`; node 0 is the center.
    pub fn from_parents(parents: &[usize]) -> Result<Self> {
        let n = parents.len() + 1;
        let mut parent = vec![None];
        parent.extend(parents.iter().map(|&p| Some(p)));
        let mut children = vec![Vec::new(); n];
        for (i, &p) in parents.iter().enumerate() {
            if p >= n {
                return Err(Error::DisconnectedTree { node: i + 1 });
            }
            children[p].push(i + 1);
        }
        let mut order = Vec::with_capacity(n);
        order.push(0);
        let mut head = 0;
        while head < order.len() {
            let u = order[head];
            head += 1;
            order.extend_from_slice(&children[u]);
        }
        if order.len() != n {
            let mut reached = vec![false; n];
            order.iter().for_each(|&u| reached[u] = true);
            let node = reached.iter().position(|r| !r).unwrap_or(0);
            return Err(Error::DisconnectedTree { node });
        }
        Ok(Self {
            parent,
            children,
            order,
        })
    }

    /// Every vehicle reports straight to the center.
    pub fn star(vehicles: usize) -> Self {
        Self::from_parents(&vec![0; vehicles]).expect("star is a tree")
    }

    /// Vehicle `m` reports to vehicle `m - 1`; vehicle 0 reports to the center.
    pub fn chain(vehicles: usize) -> Self {
        let parents: Vec<usize> = (0..vehicles).collect();
        Self::from_parents(&parents).expect("chain is a tree")
    }

    pub fn vehicles(&self) -> usize {
        self.parent.len() - 1
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.parent[node]
    }

    pub fn children(&self, node: usize) -> &[usize] {
        &self.children[node]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeAggregate {
    pub total: Vec<f64>,
    /// Vehicles whose individual profile reached the center unaggregated.
    pub exposed: Vec<usize>,
}

/// Bottom-up accumulation: every node forwards its own profile plus the
/// messages of its children (in ascending node order) to its parent.
pub fn aggregate_over_tree(tree: &AggregationTree, profiles: &[ChargingProfile]) -> Result<TreeAggregate> {
    if profiles.len() != tree.vehicles() {
        return Err(Error::LengthMismatch {
            expected: tree.vehicles(),
            found: profiles.len(),
        });
    }
    let horizon = profiles.first().map_or(0, |p| p.len());
    let mut messages: Vec<Option<Vec<f64>>> = vec![None; tree.parent.len()];
    for &node in tree.order.iter().rev() {
        let mut msg = if node == 0 {
            vec![0.0; horizon]
        } else {
            profiles[node - 1].0.clone()
        };
        for &c in tree.children(node) {
            let child = messages[c].take().expect("children are processed first");
            for (m, v) in msg.iter_mut().zip(child) {
                *m += v;
            }
        }
        messages[node] = Some(msg);
    }
    let exposed: Vec<usize> = tree
        .children(0)
        .iter()
        .filter(|&&c| tree.children(c).is_empty())
        .map(|&c| c - 1)
        .collect();
    if !exposed.is_empty() {
        log::warn!(
            "privacy: {} vehicle profile(s) reach the center unaggregated: {:?}",
            exposed.len(),
            exposed
        );
    }
    Ok(TreeAggregate {
        total: messages[0].take().unwrap_or_default(),
        exposed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn req(slots: &[usize], cap: f64, need: f64) -> ChargingRequest {
        ChargingRequest::new("ev", slots.iter().copied(), cap, need).unwrap()
    }

    /// Minimum of `g . r` over a grid of feasible profiles (T = 3).
    fn grid_lp_min(caps: [f64; 3], need: f64, g: [f64; 3]) -> f64 {
        let steps = 300;
        let mut best = f64::INFINITY;
        for i in 0..=steps {
            for j in 0..=steps {
                let r0 = caps[0] * i as f64 / steps as f64;
                let r1 = caps[1] * j as f64 / steps as f64;
                let r2 = need - r0 - r1;
                if r2 >= -1e-12 && r2 <= caps[2] + 1e-12 {
                    best = best.min(g[0] * r0 + g[1] * r1 + g[2] * r2);
                }
            }
        }
        best
    }

    #[test]
    fn gradient_examples() {
        let g = common_gradient(&[1.0, 2.0], &[0.0, 0.0], &CostModel::QuadraticValley).unwrap();
        assert_eq!(g, vec![1.0, 2.0]);

        let lin = CostModel::Linear { b: vec![3.0; 3] };
        assert_eq!(
            common_gradient(&[5.0, 0.0, 9.0], &[1.0, 2.0, 3.0], &lin).unwrap(),
            vec![3.0; 3]
        );

        let quad = CostModel::Quadratic {
            a: vec![1.0, 2.0],
            b: vec![0.0, 1.0],
            c: vec![0.0, 0.0],
        };
        let d = [1.0, 1.0];
        let agg = [1.0, 0.0];
        let g = common_gradient(&d, &agg, &quad).unwrap();
        // central finite differences of the total cost
        let h = 1e-6;
        for t in 0..2 {
            let mut up = agg;
            let mut dn = agg;
            up[t] += h;
            dn[t] -= h;
            let fd = (cost_of_aggregate(&d, &up, &quad) - cost_of_aggregate(&d, &dn, &quad)) / (2.0 * h);
            assert_relative_eq!(g[t], fd, epsilon = 1e-6);
        }
        assert_eq!(g, vec![4.0, 5.0]);

        assert!(common_gradient(&[1.0], &[1.0, 2.0], &quad).is_err());
    }

    #[test]
    fn sort_examples() {
        assert_eq!(sort_prices(&[3.0, 1.0, 2.0]).unwrap().slots(), &[1, 2, 0]);
        assert_eq!(sort_prices(&[1.0, 1.0, 1.0]).unwrap().slots(), &[0, 1, 2]);
        assert!(matches!(
            sort_prices(&[1.0, f64::NAN]),
            Err(Error::NonFiniteGradient { slot: 1 })
        ));
    }

    #[test]
    fn lmo_examples() {
        let id = PriceOrdering::identity(3);
        let r = lmo_greedy(&req(&[0, 1, 2], 2.0, 3.0), &id).unwrap();
        assert_eq!(r.values(), &[2.0, 1.0, 0.0]);
        let lp = grid_lp_min([2.0; 3], 3.0, [1.0, 2.0, 3.0]);
        assert_relative_eq!(
            r.iter().zip([1.0, 2.0, 3.0]).map(|(a, b)| a * b).sum::<f64>(),
            lp,
            epsilon = 1e-9
        );

        let any = PriceOrdering::from_permutation(vec![2, 0, 1]).unwrap();
        assert_eq!(
            lmo_greedy(&req(&[0, 1, 2], 2.0, 6.0), &any).unwrap().values(),
            &[2.0, 2.0, 2.0]
        );

        let r = lmo_greedy(&req(&[1, 2], 1.0, 1.0), &id).unwrap();
        assert_eq!(r.values(), &[0.0, 1.0, 0.0]);
        let lp = grid_lp_min([0.0, 1.0, 1.0], 1.0, [1.0, 2.0, 3.0]);
        assert_relative_eq!(2.0, lp, epsilon = 1e-9);

        assert!(matches!(
            lmo_greedy(&req(&[0], 1.0, 2.0), &id),
            Err(Error::EmptyFeasibleSet { .. })
        ));
    }

    #[test]
    fn lmo_exact_at_cumulative_boundary() {
        let r = lmo_greedy(&req(&[0, 1, 2, 3], 1.5, 3.0), &PriceOrdering::identity(4)).unwrap();
        assert_eq!(r.values(), &[1.5, 1.5, 0.0, 0.0]);
    }

    #[test]
    fn step_examples() {
        let r = ChargingProfile(vec![0.0, 1.0, 2.0]);
        assert_eq!(fw_step(&ChargingProfile(vec![9.0, 9.0, 9.0]), &r, 0), r);
        let mid = fw_step(&ChargingProfile(vec![2.0, 0.0]), &ChargingProfile(vec![0.0, 2.0]), 2);
        assert_eq!(mid.values(), &[1.0, 1.0]);
        let e = ChargingProfile(vec![0.3, 0.7]);
        assert_eq!(fw_step(&e, &e, 5), e);
    }

    #[test]
    fn gap_examples() {
        let e = vec![ChargingProfile(vec![0.0, 1.0])];
        assert_eq!(duality_gap(&[1.0, 2.0], &e, &e), 0.0);
        let r = vec![ChargingProfile(vec![1.0, 0.0])];
        assert_eq!(duality_gap(&[1.0, 2.0], &e, &r), 1.0);
    }

    #[test]
    fn unique_feasible_point_in_one_iteration() {
        let fleet = vec![req(&[1, 2], 2.0, 4.0)];
        let d = BaseLoadSeries::new(vec![5.0, 1.0, 3.0, 0.0]).unwrap();
        let out = schedule(&fleet, &d, &CostModel::QuadraticValley, &FwConfig::default()).unwrap();
        assert_eq!(out.iterations(), 1);
        assert_eq!(out.stop, StopReason::DualityGap);
        assert_eq!(out.profiles[0].values(), &[0.0, 2.0, 2.0, 0.0]);
    }

    #[test]
    fn trace_invariants() {
        let fleet = vec![req(&[0, 1, 2, 3], 1.0, 2.0), req(&[1, 2, 3], 2.0, 3.0)];
        let d = BaseLoadSeries::new(vec![3.0, 1.0, 0.5, 2.0]).unwrap();
        let cfg = FwConfig {
            max_iter: 200,
            rel_tol: 0.0,
            ..FwConfig::default()
        };
        let out = schedule(&fleet, &d, &CostModel::QuadraticValley, &cfg).unwrap();
        assert_eq!(out.stop, StopReason::MaxIter);
        for rec in &out.trace {
            assert_eq!(rec.eta, 2.0 / (rec.k as f64 + 2.0));
            assert!(rec.duality_gap >= -1e-9);
        }
        assert_eq!(out.trace[0].k, 1);
        for (p, r) in out.profiles.iter().zip(&fleet) {
            p.check_feasible(r).unwrap();
        }
    }

    #[test]
    fn line_search_reaches_valley() {
        // d = [2, 0, 0, 2], one vehicle with 4 units: optimum levels slots 1,2 to 2
        let fleet = vec![req(&[0, 1, 2, 3], 4.0, 4.0)];
        let d = BaseLoadSeries::new(vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        let cfg = FwConfig {
            step: StepRule::LineSearch,
            gap_tol: Some(1e-12),
            rel_tol: 0.0,
            ..FwConfig::default()
        };
        let out = schedule(&fleet, &d, &CostModel::QuadraticValley, &cfg).unwrap();
        assert!(out.converged());
        assert_relative_eq!(out.profiles[0][1], 2.0, epsilon = 1e-6);
        assert_relative_eq!(out.profiles[0][2], 2.0, epsilon = 1e-6);
    }

    #[test]
    fn tree_examples() {
        let p = |v: f64| ChargingProfile(vec![v]);
        let chain = AggregationTree::chain(3);
        let agg = aggregate_over_tree(&chain, &[p(1.0), p(2.0), p(3.0)]).unwrap();
        assert_eq!(agg.total, vec![6.0]);
        assert!(agg.exposed.is_empty());

        let star = AggregationTree::star(3);
        let agg = aggregate_over_tree(&star, &[p(1.0), p(2.0), p(3.0)]).unwrap();
        assert_eq!(agg.total, vec![6.0]);
        assert_eq!(agg.exposed, vec![0, 1, 2]);

        // node 1 -> 2 -> 1 cycle, never reaches the center
        assert!(matches!(
            AggregationTree::from_parents(&[2, 1]),
            Err(Error::DisconnectedTree { .. })
        ));
    }
}
