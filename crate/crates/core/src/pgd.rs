//! Projected-gradient baseline: every vehicle takes a gradient step on the
//! common price vector and projects back onto its own capped simplex.

use serde::{Deserialize, Serialize};

use crate::fleet::{
    aggregate, cost_of_aggregate, validate_request, BaseLoadSeries, ChargingProfile, ChargingRequest, CostModel,
};
use crate::fw::{common_gradient, lmo_greedy, PriceOrdering};
use crate::par::{self, Exec};
use crate::{Error, Result};

const BISECTION_MAX_ITER: usize = 200;
const BUDGET_RTOL: f64 = 1e-10;

/// Euclidean projection of `v` onto `{e : sum e = budget, 0 <= e <= caps}`.
///
/// The projection is `clip(v - tau, 0, caps)` for the scalar `tau` at which
/// the budget is met. `tau` is bracketed by bisection, then recomputed exactly
/// on the identified set of unclipped coordinates.
pub fn project_capped_simplex(v: &[f64], caps: &[f64], budget: f64) -> Result<Vec<f64>> {
    if v.len() != caps.len() {
        return Err(Error::LengthMismatch {
            expected: caps.len(),
            found: v.len(),
        });
    }
    let capacity: f64 = caps.iter().sum();
    if !(budget >= 0.0) || budget > capacity * (1.0 + 1e-12) {
        return Err(Error::InfeasibleBudget { budget, capacity });
    }
    if budget >= capacity {
        return Ok(caps.to_vec());
    }
    if budget == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }

    let clipped_sum = |tau: f64| -> f64 { v.iter().zip(caps).map(|(&x, &c)| (x - tau).clamp(0.0, c)).sum() };
    let max_cap = caps.iter().copied().fold(0.0, f64::max);
    let mut lo = v.iter().copied().fold(f64::INFINITY, f64::min) - max_cap;
    let mut hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = BUDGET_RTOL * budget.max(1.0);
    let mut tau = 0.5 * (lo + hi);
    for _ in 0..BISECTION_MAX_ITER {
        tau = 0.5 * (lo + hi);
        let s = clipped_sum(tau);
        if (s - budget).abs() <= tol {
            break;
        }
        if s > budget {
            lo = tau;
        } else {
            hi = tau;
        }
    }

    // Polish: on the current active set the budget is affine in tau.
    let (mut free_sum, mut free_count, mut capped) = (0.0, 0usize, 0.0);
    for (&x, &c) in v.iter().zip(caps) {
        let y = x - tau;
        if y >= c {
            capped += c;
        } else if y > 0.0 {
            free_sum += x;
            free_count += 1;
        }
    }
    if free_count > 0 {
        let exact = (free_sum + capped - budget) / free_count as f64;
        let e: Vec<f64> = v.iter().zip(caps).map(|(&x, &c)| (x - exact).clamp(0.0, c)).collect();
        let s: f64 = e.iter().sum();
        if (s - budget).abs() <= (clipped_sum(tau) - budget).abs() {
            return Ok(e);
        }
    }
    Ok(v.iter().zip(caps).map(|(&x, &c)| (x - tau).clamp(0.0, c)).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PgdConfig {
    /// Constant step size; `None` picks `1 / (M * max_t C_t'')`.
    pub step: Option<f64>,
    pub max_iter: usize,
    pub rel_tol: f64,
    pub exec: Exec,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            step: None,
            max_iter: 100_000,
            rel_tol: 1e-7,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgdRecord {
    pub k: usize,
    pub cost: f64,
}

#[derive(Debug, Clone)]
pub struct PgdOutcome {
    pub profiles: Vec<ChargingProfile>,
    pub aggregate: Vec<f64>,
    pub cost: f64,
    pub step: f64,
    pub trace: Vec<PgdRecord>,
    pub converged: bool,
}

/// Default step: the reciprocal Lipschitz constant of the gradient with
/// respect to the stacked profiles.
pub fn default_step(vehicles: usize, cost: &CostModel, horizon: usize) -> f64 {
    let lipschitz = vehicles.max(1) as f64 * cost.max_curvature(horizon);
    if lipschitz > 0.0 {
        1.0 / lipschitz
    } else {
        1.0 / vehicles.max(1) as f64
    }
}

/// Projected gradient descent from the greedy feasible point of uniform prices.
pub fn pgd_schedule(
    fleet: &[ChargingRequest],
    d: &BaseLoadSeries,
    cost: &CostModel,
    cfg: &PgdConfig,
) -> Result<PgdOutcome> {
    let horizon = d.horizon();
    cost.check(horizon)?;
    for req in fleet {
        validate_request(req, horizon)?;
    }
    let step = cfg.step.unwrap_or_else(|| default_step(fleet.len(), cost, horizon));
    if !(step > 0.0) {
        return Err(Error::InvalidCost(format!("step size must be positive, got {step}")));
    }
    let caps: Vec<Vec<f64>> = fleet.iter().map(|r| r.caps(horizon)).collect();

    let uniform = PriceOrdering::identity(horizon);
    let mut profiles = par::try_map(cfg.exec, fleet, |_, r| lmo_greedy(r, &uniform))?;
    let mut agg = aggregate(&profiles, horizon);
    let mut cost_k = cost_of_aggregate(d.values(), &agg, cost);
    let mut trace = vec![PgdRecord { k: 0, cost: cost_k }];
    let mut converged = fleet.is_empty();

    let mut k = 0;
    while !converged && k < cfg.max_iter {
        let g = common_gradient(d.values(), &agg, cost)?;
        profiles = par::try_map(cfg.exec, &profiles, |m, e| {
            let moved: Vec<f64> = e.iter().zip(&g).map(|(&x, &gt)| x - step * gt).collect();
            project_capped_simplex(&moved, &caps[m], fleet[m].energy_need).map(ChargingProfile)
        })?;
        agg = aggregate(&profiles, horizon);
        let next = cost_of_aggregate(d.values(), &agg, cost);
        k += 1;
        trace.push(PgdRecord { k, cost: next });
        converged = (next - cost_k).abs() <= cfg.rel_tol * next.abs();
        cost_k = next;
    }
    Ok(PgdOutcome {
        profiles,
        aggregate: agg,
        cost: cost_k,
        step,
        trace,
        converged,
    })
}
