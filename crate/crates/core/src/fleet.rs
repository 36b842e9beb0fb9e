//! Charging requests, profiles, per-slot costs and the fleet input file.
//!
//! Slot indices are zero-based everywhere, including the JSON fleet file.

use serde::{Deserialize, Serialize};

use crate::grid::Phase;
use crate::{Error, Result};

/// Relative tolerance on the energy budget of a feasible profile.
pub const BUDGET_RTOL: f64 = 1e-9;

/// One vehicle's request: when it is plugged in, how fast it may charge and
/// how much energy it needs by the end of the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChargingRequest {
    pub id: String,
    /// Sorted, duplicate-free slot indices during which the vehicle is plugged in.
    slots: Vec<usize>,
    /// Maximum energy per slot.
    pub rate_cap: f64,
    /// Total energy to deliver over the horizon.
    pub energy_need: f64,
}

impl ChargingRequest {
    pub fn new(
        id: impl Into<String>,
        slots: impl IntoIterator<Item = usize>,
        rate_cap: f64,
        energy_need: f64,
    ) -> Result<Self> {
        let id = id.into();
        for (name, v) in [("rate_cap", rate_cap), ("energy_need", energy_need)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidRequest {
                    id,
                    message: format!("{name} must be finite and non-negative, got {v}"),
                });
            }
        }
        let mut slots: Vec<usize> = slots.into_iter().collect();
        slots.sort_unstable();
        slots.dedup();
        Ok(Self {
            id,
            slots,
            rate_cap,
            energy_need,
        })
    }

    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    /// Largest energy this vehicle could absorb: |availability| times the rate cap.
    pub fn deliverable(&self) -> f64 {
        self.slots.len() as f64 * self.rate_cap
    }

    /// Per-slot upper bounds: the rate cap on available slots, zero elsewhere.
    pub fn caps(&self, horizon: usize) -> Vec<f64> {
        let mut caps = vec![0.0; horizon];
        for &s in self.slots.iter().filter(|&&s| s < horizon) {
            caps[s] = self.rate_cap;
        }
        caps
    }

    /// Scales both the rate cap and the energy need, e.g. kW to per-unit.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            id: self.id.clone(),
            slots: self.slots.clone(),
            rate_cap: self.rate_cap * factor,
            energy_need: self.energy_need * factor,
        }
    }
}

/// Accepts the request iff its feasible set is non-empty within a horizon of
/// `horizon` slots.
pub fn validate_request(req: &ChargingRequest, horizon: usize) -> Result<()> {
    if let Some(&slot) = req.slots.iter().find(|&&s| s >= horizon) {
        return Err(Error::IndexOutOfRange {
            id: req.id.clone(),
            slot,
            horizon,
        });
    }
    let capacity = req.deliverable();
    if req.energy_need > capacity {
        return Err(Error::EmptyFeasibleSet {
            id: req.id.clone(),
            need: req.energy_need,
            capacity,
        });
    }
    Ok(())
}

/// Energy a vehicle needs to reach `target_soc` after driving `daily_miles`.
///
/// The initial state of charge `target - miles * e100 / (100 * capacity)` is
/// clamped to `[0, 1]`; charging efficiency is taken as one.
pub fn energy_need_from_soc(battery_capacity: f64, daily_miles: f64, e100: f64, target_soc: f64) -> Result<f64> {
    if !(battery_capacity > 0.0) {
        return Err(Error::NonPositiveCapacity(battery_capacity));
    }
    if !(target_soc > 0.0 && target_soc <= 1.0) {
        return Err(Error::Parse(format!("target SOC {target_soc} not in (0, 1]")));
    }
    let initial = (target_soc - daily_miles * e100 / (100.0 * battery_capacity)).clamp(0.0, 1.0);
    Ok(((target_soc - initial) * battery_capacity).max(0.0))
}

/// A per-slot energy vector `e(0..T)` of one vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChargingProfile(pub Vec<f64>);

impl ChargingProfile {
    pub fn zeros(horizon: usize) -> Self {
        Self(vec![0.0; horizon])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    /// Checks box and budget feasibility against `req`; returns a description
    /// of the first violation.
    pub fn check_feasible(&self, req: &ChargingRequest) -> std::result::Result<(), String> {
        let caps = req.caps(self.len());
        for (t, (&e, &cap)) in self.0.iter().zip(&caps).enumerate() {
            if !(e >= 0.0 && e <= cap) {
                return Err(format!("slot {t}: {e} outside [0, {cap}]"));
            }
        }
        let total = self.total();
        if (total - req.energy_need).abs() > BUDGET_RTOL * req.energy_need.max(1.0) {
            return Err(format!("delivers {total}, needs {}", req.energy_need));
        }
        Ok(())
    }
}

impl std::ops::Deref for ChargingProfile {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Inelastic non-EV load per slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BaseLoadSeries(Vec<f64>);

impl BaseLoadSeries {
    /// Entries must be finite. Negative entries are allowed: the ADMM
    /// subproblems shift the base load by prices and consensus targets.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(t) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse(format!("base load at slot {t} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn horizon(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Per-slot convex cost `C_t` of total load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CostModel {
    /// `x^2 / 2` in every slot.
    QuadraticValley,
    /// `a_t x^2 + b_t x + c_t` with `a_t >= 0`.
    Quadratic { a: Vec<f64>, b: Vec<f64>, c: Vec<f64> },
    /// `b_t x`.
    Linear { b: Vec<f64> },
}

impl CostModel {
    /// Same quadratic coefficients in every slot.
    pub fn uniform_quadratic(horizon: usize, a: f64, b: f64, c: f64) -> Self {
        CostModel::Quadratic {
            a: vec![a; horizon],
            b: vec![b; horizon],
            c: vec![c; horizon],
        }
    }

    pub fn check(&self, horizon: usize) -> Result<()> {
        let lens: Vec<usize> = match self {
            CostModel::QuadraticValley => vec![],
            CostModel::Quadratic { a, b, c } => {
                if let Some(t) = a.iter().position(|&v| !(v >= 0.0) || !v.is_finite()) {
                    return Err(Error::InvalidCost(format!("a[{t}] must be finite and >= 0")));
                }
                vec![a.len(), b.len(), c.len()]
            }
            CostModel::Linear { b } => vec![b.len()],
        };
        match lens.into_iter().find(|&l| l != horizon) {
            Some(found) => Err(Error::LengthMismatch {
                expected: horizon,
                found,
            }),
            None => Ok(()),
        }
    }

    pub fn value(&self, t: usize, x: f64) -> f64 {
        match self {
            CostModel::QuadraticValley => 0.5 * x * x,
            CostModel::Quadratic { a, b, c } => (a[t] * x + b[t]) * x + c[t],
            CostModel::Linear { b } => b[t] * x,
        }
    }

    pub fn derivative(&self, t: usize, x: f64) -> f64 {
        match self {
            CostModel::QuadraticValley => x,
            CostModel::Quadratic { a, b, .. } => 2.0 * a[t] * x + b[t],
            CostModel::Linear { b } => b[t],
        }
    }

    pub fn curvature(&self, t: usize) -> f64 {
        match self {
            CostModel::QuadraticValley => 1.0,
            CostModel::Quadratic { a, .. } => 2.0 * a[t],
            CostModel::Linear { .. } => 0.0,
        }
    }

    /// Largest second derivative over the horizon.
    pub fn max_curvature(&self, horizon: usize) -> f64 {
        (0..horizon).map(|t| self.curvature(t)).fold(0.0, f64::max)
    }
}

/// Sum of all profiles per slot, accumulated in vehicle order.
pub fn aggregate(profiles: &[ChargingProfile], horizon: usize) -> Vec<f64> {
    let mut agg = vec![0.0; horizon];
    for p in profiles {
        for (a, &e) in agg.iter_mut().zip(p.iter()) {
            *a += e;
        }
    }
    agg
}

/// `sum_t C_t(d(t) + sum_m e_m(t))`.
pub fn total_cost(profiles: &[ChargingProfile], d: &BaseLoadSeries, cost: &CostModel) -> Result<f64> {
    let horizon = d.horizon();
    cost.check(horizon)?;
    if let Some(p) = profiles.iter().find(|p| p.len() != horizon) {
        return Err(Error::LengthMismatch {
            expected: horizon,
            found: p.len(),
        });
    }
    Ok(cost_of_aggregate(d.values(), &aggregate(profiles, horizon), cost))
}

pub(crate) fn cost_of_aggregate(base: &[f64], agg: &[f64], cost: &CostModel) -> f64 {
    base.iter()
        .zip(agg)
        .enumerate()
        .map(|(t, (&d, &a))| cost.value(t, d + a))
        .sum()
}

// ---------------------------------------------------------------------------
// Fleet file

/// Availability as an explicit slot list or a `[from, to)` window that wraps
/// past the end of the horizon when `from > to`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SlotSpec {
    List(Vec<usize>),
    Window { from: usize, to: usize },
}

impl SlotSpec {
    pub fn resolve(&self, horizon: usize) -> Vec<usize> {
        match *self {
            SlotSpec::List(ref v) => v.clone(),
            SlotSpec::Window { from, to } if from <= to => (from..to).collect(),
            SlotSpec::Window { from, to } => (from..horizon.max(from)).chain(0..to).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnergySpec {
    Direct {
        energy_need_kwh: f64,
    },
    FromSoc {
        battery_kwh: f64,
        daily_miles: f64,
        #[serde(default = "default_e100")]
        e100_kwh: f64,
        #[serde(default = "default_target_soc")]
        target_soc: f64,
    },
}

fn default_e100() -> f64 {
    15.0
}

fn default_target_soc() -> f64 {
    0.9
}

/// One record of the fleet JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bus: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
    pub slots: SlotSpec,
    pub rate_cap_kw: f64,
    #[serde(flatten)]
    pub energy: EnergySpec,
}

/// Fleet file contents: either a bare array of records or an object that
/// also carries provenance metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FleetFile {
    Annotated {
        provenance: serde_json::Value,
        vehicles: Vec<FleetRecord>,
    },
    Bare(Vec<FleetRecord>),
}

impl FleetFile {
    pub fn records(&self) -> &[FleetRecord] {
        match self {
            FleetFile::Annotated { vehicles, .. } => vehicles,
            FleetFile::Bare(v) => v,
        }
    }
}

/// A validated vehicle with its (optional) grid location.
#[derive(Debug, Clone, PartialEq)]
pub struct FleetEntry {
    pub request: ChargingRequest,
    pub bus: Option<String>,
    pub phase: Option<Phase>,
}

impl FleetRecord {
    pub fn to_entry(&self, horizon: usize) -> Result<FleetEntry> {
        let need = match self.energy {
            EnergySpec::Direct { energy_need_kwh } => energy_need_kwh,
            EnergySpec::FromSoc {
                battery_kwh,
                daily_miles,
                e100_kwh,
                target_soc,
            } => energy_need_from_soc(battery_kwh, daily_miles, e100_kwh, target_soc).map_err(|e| {
                Error::InvalidRequest {
                    id: self.id.clone(),
                    message: e.to_string(),
                }
            })?,
        };
        let request = ChargingRequest::new(self.id.clone(), self.slots.resolve(horizon), self.rate_cap_kw, need)?;
        validate_request(&request, horizon)?;
        Ok(FleetEntry {
            request,
            bus: self.bus.clone(),
            phase: self.phase,
        })
    }
}

/// Parses and validates a fleet file against a horizon of `horizon` slots.
pub fn parse_fleet(json: &str, horizon: usize) -> Result<Vec<FleetEntry>> {
    let file: FleetFile = serde_json::from_str(json)?;
    let entries = file
        .records()
        .iter()
        .map(|r| r.to_entry(horizon))
        .collect::<Result<Vec<_>>>()?;
    let mut ids: Vec<&str> = entries.iter().map(|e| e.request.id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::validation("fleet", format!("duplicate vehicle id `{}`", w[0])));
    }
    Ok(entries)
}

pub fn read_fleet(path: &std::path::Path, horizon: usize) -> Result<Vec<FleetEntry>> {
    parse_fleet(&std::fs::read_to_string(path)?, horizon)
}

#[derive(Debug, Deserialize)]
struct LoadRow {
    t: usize,
    #[serde(default)]
    bus: Option<String>,
    #[serde(default)]
    phase: Option<Phase>,
    p_kw: f64,
    #[serde(default)]
    q_kvar: Option<f64>,
}

/// One row of a base-load CSV (`t,bus,phase,p_kw,q_kvar`, with `bus`,
/// `phase` and `q_kvar` optional).
#[derive(Debug, Clone, PartialEq)]
pub struct LoadSample {
    pub t: usize,
    pub bus: Option<String>,
    pub phase: Option<Phase>,
    pub p_kw: f64,
    pub q_kvar: f64,
}

/// Reads a base-load CSV. Lines starting with `#` are comments.
pub fn parse_load_csv<R: std::io::Read>(reader: R) -> Result<Vec<LoadSample>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    for (line, row) in rdr.deserialize::<LoadRow>().enumerate() {
        let row = row?;
        let q = row.q_kvar.unwrap_or(0.0);
        if !row.p_kw.is_finite() || row.p_kw < 0.0 || !q.is_finite() {
            return Err(Error::validation(
                format!("load row {}", line + 1),
                format!("p_kw must be finite and >= 0, got {}", row.p_kw),
            ));
        }
        out.push(LoadSample {
            t: row.t,
            bus: row.bus,
            phase: row.phase,
            p_kw: row.p_kw,
            q_kvar: q,
        });
    }
    Ok(out)
}

/// Collapses load samples to a network-free series: all buses and phases are
/// summed per slot. The horizon is one past the largest slot index.
pub fn base_load_from_samples(samples: &[LoadSample]) -> Result<BaseLoadSeries> {
    let horizon = samples.iter().map(|s| s.t + 1).max().unwrap_or(0);
    let mut d = vec![0.0; horizon];
    for s in samples {
        d[s.t] += s.p_kw;
    }
    BaseLoadSeries::new(d)
}
