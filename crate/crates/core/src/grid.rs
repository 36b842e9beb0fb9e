//! Unbalanced radial feeder and its linearized multiphase power-flow model.
//!
//! All electrical quantities are per-unit. Voltages are squared magnitudes.
//! Bus 0 is the substation; the line feeding bus `n` from its parent is also
//! indexed by `n`. Per-phase quantities are stored as `[a, b, c]` triples
//! with absent phases held at zero (flows, injections) or copied from the
//! parent (voltages).

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::fleet::LoadSample;
use crate::{Error, Result};

pub const FEEDER_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Phase {
        Phase::ALL[i]
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::A => "a",
            Phase::B => "b",
            Phase::C => "c",
        })
    }
}

/// Subset of `{a, b, c}`, written as e.g. `"ac"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct PhaseSet(u8);

impl PhaseSet {
    pub const ABC: PhaseSet = PhaseSet(0b111);

    pub fn contains(self, p: Phase) -> bool {
        self.0 & (1 << p.index()) != 0
    }

    pub fn insert(&mut self, p: Phase) {
        self.0 |= 1 << p.index();
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset(self, other: PhaseSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Phase> {
        Phase::ALL.into_iter().filter(move |&p| self.contains(p))
    }

    /// Present phase indices in ascending order.
    pub fn indices(self) -> Vec<usize> {
        self.iter().map(Phase::index).collect()
    }

    pub fn mask(self) -> Phase3 {
        let mut m = [0.0; 3];
        self.iter().for_each(|p| m[p.index()] = 1.0);
        m
    }
}

impl std::str::FromStr for PhaseSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut set = PhaseSet::default();
        for ch in s.chars() {
            let p = match ch.to_ascii_lowercase() {
                'a' => Phase::A,
                'b' => Phase::B,
                'c' => Phase::C,
                other => return Err(Error::Parse(format!("unknown phase `{other}` in `{s}`"))),
            };
            if set.contains(p) {
                return Err(Error::Parse(format!("phase `{p}` repeated in `{s}`")));
            }
            set.insert(p);
        }
        Ok(set)
    }
}

impl fmt::Display for PhaseSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.iter().try_for_each(|p| write!(f, "{p}"))
    }
}

impl Serialize for PhaseSet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PhaseSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub type Phase3 = [f64; 3];
pub type Impedance = [[Complex64; 3]; 3];

/// `alpha = exp(-j 2 pi / 3)` and the phase-rotation vector `[1, alpha, alpha^2]`.
fn rotation() -> [Complex64; 3] {
    let (s, c) = (2.0 * std::f64::consts::PI / 3.0).sin_cos();
    [Complex64::new(1.0, 0.0), Complex64::new(c, -s), Complex64::new(c, s)]
}

/// `2 diag(alpha) conj(Z) diag(conj(alpha))`, entrywise
/// `2 alpha_i conj(Z_ij) conj(alpha_j)`.
pub fn zbar(z: &Impedance) -> Impedance {
    let rot = rotation();
    let mut out = [[Complex64::new(0.0, 0.0); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            // alpha_i conj(alpha_j) = alpha^(i - j); exact on the diagonal
            out[i][j] = 2.0 * rot[(i + 3 - j) % 3] * z[i][j].conj();
        }
    }
    out
}

/// `Re{Zbar (P + jQ)}`, the squared-voltage drop along a line.
pub fn voltage_drop(zbar: &Impedance, p: &Phase3, q: &Phase3) -> Phase3 {
    let mut drop = [0.0; 3];
    for (i, d) in drop.iter_mut().enumerate() {
        *d = (0..3).map(|j| zbar[i][j].re * p[j] - zbar[i][j].im * q[j]).sum();
    }
    drop
}

/// Dispatchable generation limits and cost `a p^2 + b p + c`, per phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub pmin: Phase3,
    pub pmax: Phase3,
    pub qmin: Phase3,
    pub qmax: Phase3,
    pub a: Phase3,
    pub b: Phase3,
    pub c: Phase3,
}

impl Generator {
    pub fn cost(&self, p: &Phase3) -> f64 {
        (0..3).map(|i| (self.a[i] * p[i] + self.b[i]) * p[i] + self.c[i]).sum()
    }
}

/// Substation supply cost `sum_phi a P_phi^2 + b P_phi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupplyCost {
    pub a: f64,
    pub b: f64,
}

impl Default for SupplyCost {
    fn default() -> Self {
        Self { a: 1.0, b: 0.0 }
    }
}

impl SupplyCost {
    pub fn value(&self, p0: &Phase3) -> f64 {
        p0.iter().map(|&p| (self.a * p + self.b) * p).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: String,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub phases: PhaseSet,
    /// Impedance of the line from the parent; zero at the substation.
    pub z: Impedance,
    pub zbar: Impedance,
    pub v_min: f64,
    pub v_max: f64,
    /// Per-phase apparent-power cap of the feeding line.
    pub s_line_max: f64,
    pub gen: Option<Generator>,
}

impl Bus {
    pub fn gen_bounds(&self) -> (Phase3, Phase3, Phase3, Phase3) {
        match &self.gen {
            Some(g) => (g.pmin, g.pmax, g.qmin, g.qmax),
            None => ([0.0; 3], [0.0; 3], [0.0; 3], [0.0; 3]),
        }
    }
}

/// Validated radial feeder. Buses are stored in breadth-first order, so every
/// parent index is smaller than its children's.
#[derive(Debug, Clone, PartialEq)]
pub struct FeederModel {
    pub base_kva: f64,
    pub base_kv: f64,
    pub sf_max: f64,
    pub v0: f64,
    pub supply: SupplyCost,
    pub buses: Vec<Bus>,
    index: HashMap<String, usize>,
}

impl FeederModel {
    pub fn num_buses(&self) -> usize {
        self.buses.len()
    }

    /// Number of non-substation buses.
    pub fn num_lines(&self) -> usize {
        self.buses.len() - 1
    }

    pub fn bus_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Generation cost of bus `n` at dispatch `pg`.
    pub fn gen_cost(&self, n: usize, pg: &Phase3) -> f64 {
        self.buses[n].gen.as_ref().map_or(0.0, |g| g.cost(pg))
    }

    /// Returns a copy with every network limit widened by `factor`.
    pub fn with_limits_scaled(&self, factor: f64) -> FeederModel {
        let mut f = self.clone();
        f.sf_max *= factor;
        for b in &mut f.buses {
            b.s_line_max *= factor;
            let mid = 0.5 * (b.v_min + b.v_max);
            let half = 0.5 * (b.v_max - b.v_min) * factor;
            b.v_min = mid - half;
            b.v_max = mid + half;
        }
        f
    }
}

// ---------------------------------------------------------------------------
// File schema

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum BusId {
    Name(String),
    Number(u64),
}

impl BusId {
    fn into_string(self) -> String {
        match self {
            BusId::Name(s) => s,
            BusId::Number(n) => n.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ComplexRecord {
    pub re: f64,
    pub im: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseRecord {
    pub kva: f64,
    pub kv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusRecord {
    pub id: String,
    pub parent: Option<String>,
    pub phases: PhaseSet,
    #[serde(default)]
    pub z: [[ComplexRecord; 3]; 3],
    pub v_min_pu2: f64,
    pub v_max_pu2: f64,
    /// `null` means unconstrained.
    #[serde(default)]
    pub s_line_max_pu: Option<f64>,
    #[serde(default)]
    pub gen: Option<Generator>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeederFile {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
    pub base: BaseRecord,
    pub sf_max_pu: f64,
    pub v0_pu2: f64,
    #[serde(default)]
    pub supply_cost: SupplyCost,
    pub buses: Vec<BusRecord>,
}

#[derive(Deserialize)]
struct RawBusRecord {
    id: BusId,
    parent: Option<BusId>,
    phases: PhaseSet,
    #[serde(default)]
    z: [[ComplexRecord; 3]; 3],
    v_min_pu2: f64,
    v_max_pu2: f64,
    #[serde(default)]
    s_line_max_pu: Option<f64>,
    #[serde(default)]
    gen: Option<Generator>,
}

#[derive(Deserialize)]
struct RawFeederFile {
    version: u32,
    #[serde(default)]
    provenance: Option<serde_json::Value>,
    base: BaseRecord,
    sf_max_pu: f64,
    v0_pu2: f64,
    #[serde(default)]
    supply_cost: SupplyCost,
    buses: Vec<RawBusRecord>,
}

impl FeederFile {
    pub fn from_json(json: &str) -> Result<Self> {
        let raw: RawFeederFile = serde_json::from_str(json).map_err(|e| Error::Parse(e.to_string()))?;
        Ok(FeederFile {
            version: raw.version,
            provenance: raw.provenance,
            base: raw.base,
            sf_max_pu: raw.sf_max_pu,
            v0_pu2: raw.v0_pu2,
            supply_cost: raw.supply_cost,
            buses: raw
                .buses
                .into_iter()
                .map(|b| BusRecord {
                    id: b.id.into_string(),
                    parent: b.parent.map(BusId::into_string),
                    phases: b.phases,
                    z: b.z,
                    v_min_pu2: b.v_min_pu2,
                    v_max_pu2: b.v_max_pu2,
                    s_line_max_pu: b.s_line_max_pu,
                    gen: b.gen,
                })
                .collect(),
        })
    }

    /// Serializes a model back to the file schema.
    pub fn from_model(model: &FeederModel, provenance: Option<serde_json::Value>) -> Self {
        let to_rec = |z: &Impedance| z.map(|row| row.map(|c| ComplexRecord { re: c.re, im: c.im }));
        FeederFile {
            version: FEEDER_SCHEMA_VERSION,
            provenance,
            base: BaseRecord {
                kva: model.base_kva,
                kv: model.base_kv,
            },
            sf_max_pu: model.sf_max,
            v0_pu2: model.v0,
            supply_cost: model.supply,
            buses: model
                .buses
                .iter()
                .map(|b| BusRecord {
                    id: b.id.clone(),
                    parent: b.parent.map(|p| model.buses[p].id.clone()),
                    phases: b.phases,
                    z: to_rec(&b.z),
                    v_min_pu2: b.v_min,
                    v_max_pu2: b.v_max,
                    s_line_max_pu: b.s_line_max.is_finite().then_some(b.s_line_max),
                    gen: b.gen,
                })
                .collect(),
        }
    }

    /// Checks the schema version, tree structure, phase nesting, impedance
    /// symmetry and limit sanity, and builds the model.
    pub fn into_model(self) -> Result<FeederModel> {
        if self.version != FEEDER_SCHEMA_VERSION {
            return Err(Error::validation(
                "version",
                format!(
                    "expected schema version {FEEDER_SCHEMA_VERSION}, found {}",
                    self.version
                ),
            ));
        }
        if !(self.base.kva > 0.0) {
            return Err(Error::validation("base.kva", "must be positive"));
        }
        if !(self.sf_max_pu > 0.0) {
            return Err(Error::validation("sf_max_pu", "must be positive"));
        }
        if !(self.supply_cost.a >= 0.0) {
            return Err(Error::validation("supply_cost.a", "must be non-negative"));
        }

        let mut pos: HashMap<&str, usize> = HashMap::new();
        for (i, b) in self.buses.iter().enumerate() {
            if pos.insert(b.id.as_str(), i).is_some() {
                return Err(Error::validation(format!("bus {}", b.id), "duplicate id"));
            }
        }
        let roots: Vec<usize> = (0..self.buses.len())
            .filter(|&i| self.buses[i].parent.is_none())
            .collect();
        if roots.len() != 1 {
            return Err(Error::validation(
                "buses",
                format!("not a tree: expected exactly one root, found {}", roots.len()),
            ));
        }
        let mut children = vec![Vec::new(); self.buses.len()];
        for (i, b) in self.buses.iter().enumerate() {
            if let Some(p) = &b.parent {
                let &pi = pos
                    .get(p.as_str())
                    .ok_or_else(|| Error::validation(format!("bus {}", b.id), format!("unknown parent `{p}`")))?;
                children[pi].push(i);
            }
        }
        // breadth-first from the root; unreached buses sit on a cycle
        let mut order = vec![roots[0]];
        let mut head = 0;
        while head < order.len() {
            let u = order[head];
            head += 1;
            order.extend_from_slice(&children[u]);
        }
        if order.len() != self.buses.len() {
            let mut seen = vec![false; self.buses.len()];
            order.iter().for_each(|&i| seen[i] = true);
            let bad = seen.iter().position(|s| !s).unwrap_or(0);
            return Err(Error::validation(format!("bus {}", self.buses[bad].id), "not a tree"));
        }
        let mut new_index = vec![0; self.buses.len()];
        for (k, &i) in order.iter().enumerate() {
            new_index[i] = k;
        }

        let mut buses = Vec::with_capacity(order.len());
        for &i in &order {
            let rec = &self.buses[i];
            let loc = format!("bus {}", rec.id);
            let parent = rec.parent.as_ref().map(|p| new_index[pos[p.as_str()]]);
            if rec.phases.is_empty() {
                return Err(Error::validation(loc, "no phases"));
            }
            if let Some(p) = parent {
                let parent_phases: PhaseSet = buses
                    .get(p)
                    .map(|b: &Bus| b.phases)
                    .expect("breadth-first order visits parents first");
                if !rec.phases.is_subset(parent_phases) {
                    return Err(Error::validation(
                        loc,
                        format!(
                            "phases `{}` not a subset of parent phases `{parent_phases}`",
                            rec.phases
                        ),
                    ));
                }
            }
            let z: Impedance = rec.z.map(|row| row.map(|c| Complex64::new(c.re, c.im)));
            for r in 0..3 {
                for c in 0..3 {
                    if !(z[r][c].re.is_finite() && z[r][c].im.is_finite()) {
                        return Err(Error::validation(loc, "non-finite impedance"));
                    }
                    if (z[r][c] - z[c][r]).norm() > 1e-12 * (1.0 + z[r][c].norm()) {
                        return Err(Error::validation(loc, format!("impedance not symmetric at ({r},{c})")));
                    }
                    let present =
                        rec.phases.contains(Phase::from_index(r)) && rec.phases.contains(Phase::from_index(c));
                    if !present && z[r][c].norm() != 0.0 {
                        return Err(Error::validation(
                            loc,
                            format!("impedance nonzero on absent phase ({r},{c})"),
                        ));
                    }
                }
            }
            if !(rec.v_min_pu2 < rec.v_max_pu2) || !(rec.v_min_pu2 >= 0.0) {
                return Err(Error::validation(
                    loc,
                    format!("voltage limits [{}, {}] invalid", rec.v_min_pu2, rec.v_max_pu2),
                ));
            }
            let s_line_max = match rec.s_line_max_pu {
                None => f64::INFINITY,
                Some(s) if s > 0.0 => s,
                Some(s) => return Err(Error::validation(loc, format!("line limit {s} must be positive"))),
            };
            if let Some(g) = &rec.gen {
                for ph in 0..3 {
                    if !(g.pmin[ph] <= g.pmax[ph]) || !(g.qmin[ph] <= g.qmax[ph]) || !(g.a[ph] >= 0.0) {
                        return Err(Error::validation(
                            loc,
                            format!("generator data invalid on phase {}", Phase::from_index(ph)),
                        ));
                    }
                }
            }
            // absent phases carry nothing
            let gen = rec.gen.map(|mut g| {
                let m = rec.phases.mask();
                for ph in 0..3 {
                    if m[ph] == 0.0 {
                        g.pmin[ph] = 0.0;
                        g.pmax[ph] = 0.0;
                        g.qmin[ph] = 0.0;
                        g.qmax[ph] = 0.0;
                    }
                }
                g
            });
            buses.push(Bus {
                id: rec.id.clone(),
                parent,
                children: children[i].iter().map(|&c| new_index[c]).collect(),
                phases: rec.phases,
                zbar: zbar(&z),
                z,
                v_min: rec.v_min_pu2,
                v_max: rec.v_max_pu2,
                s_line_max,
                gen,
            });
        }
        let index = buses.iter().enumerate().map(|(i, b)| (b.id.clone(), i)).collect();
        Ok(FeederModel {
            base_kva: self.base.kva,
            base_kv: self.base.kv,
            sf_max: self.sf_max_pu,
            v0: self.v0_pu2,
            supply: self.supply_cost,
            buses,
            index,
        })
    }
}

pub fn parse_feeder_str(json: &str) -> Result<FeederModel> {
    FeederFile::from_json(json)?.into_model()
}

pub fn parse_feeder(path: &Path) -> Result<FeederModel> {
    parse_feeder_str(&std::fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// State and equations

/// Variables of one bus in one slot.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BusVars {
    pub v: Phase3,
    pub pg: Phase3,
    pub qg: Phase3,
    pub pd: Phase3,
    pub qd: Phase3,
    /// Flow on the line feeding this bus (from the main grid at bus 0).
    pub p_flow: Phase3,
    pub q_flow: Phase3,
}

/// Injections and demands of one bus in one slot.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Injection {
    pub pg: Phase3,
    pub qg: Phase3,
    pub pd: Phase3,
    pub qd: Phase3,
}

/// Slot-major grid of [`BusVars`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridState {
    pub horizon: usize,
    pub buses: usize,
    data: Vec<BusVars>,
}

impl GridState {
    pub fn zeros(horizon: usize, buses: usize) -> Self {
        Self {
            horizon,
            buses,
            data: vec![BusVars::default(); horizon * buses],
        }
    }

    pub fn at(&self, t: usize, n: usize) -> &BusVars {
        &self.data[t * self.buses + n]
    }

    pub fn at_mut(&mut self, t: usize, n: usize) -> &mut BusVars {
        &mut self.data[t * self.buses + n]
    }

    pub fn slot(&self, t: usize) -> &[BusVars] {
        &self.data[t * self.buses..(t + 1) * self.buses]
    }

    pub fn slots_mut(&mut self) -> std::slice::ChunksExactMut<'_, BusVars> {
        self.data.chunks_exact_mut(self.buses)
    }
}

/// Residuals of the three flow equations at one bus.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FlowResidual {
    pub p: Phase3,
    pub q: Phase3,
    pub v: Phase3,
}

impl FlowResidual {
    pub fn max_abs(&self) -> f64 {
        self.p
            .iter()
            .chain(&self.q)
            .chain(&self.v)
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Evaluates the active balance, reactive balance and voltage-drop equations
/// of every bus in slot `t`. Voltage rows of absent phases are zero.
pub fn flow_residuals(feeder: &FeederModel, state: &GridState, t: usize) -> Result<Vec<FlowResidual>> {
    if state.buses != feeder.num_buses() || t >= state.horizon {
        return Err(Error::DimensionMismatch(format!(
            "state has {} buses x {} slots, feeder has {} buses, slot {t} requested",
            state.buses,
            state.horizon,
            feeder.num_buses()
        )));
    }
    let slot = state.slot(t);
    Ok(feeder
        .buses
        .iter()
        .enumerate()
        .map(|(n, bus)| {
            let x = &slot[n];
            let mut r = FlowResidual::default();
            for ph in 0..3 {
                let out_p: f64 = bus.children.iter().map(|&k| slot[k].p_flow[ph]).sum();
                let out_q: f64 = bus.children.iter().map(|&k| slot[k].q_flow[ph]).sum();
                r.p[ph] = (x.pg[ph] - x.pd[ph]) - (out_p - x.p_flow[ph]);
                r.q[ph] = (x.qg[ph] - x.qd[ph]) - (out_q - x.q_flow[ph]);
            }
            if let Some(parent) = bus.parent {
                let drop = voltage_drop(&bus.zbar, &x.p_flow, &x.q_flow);
                for ph in bus.phases.iter().map(Phase::index) {
                    r.v[ph] = (slot[parent].v[ph] - x.v[ph]) - drop[ph];
                }
            }
            r
        })
        .collect())
}

/// Solves the linear flow model exactly for given injections: flows by
/// leaf-to-root accumulation, then voltages root-to-leaf. `injections` is
/// slot-major with one entry per bus.
pub fn forward_sweep(feeder: &FeederModel, injections: &[Injection]) -> Result<GridState> {
    let nb = feeder.num_buses();
    if !injections.len().is_multiple_of(nb) {
        return Err(Error::DimensionMismatch(format!(
            "{} injections is not a multiple of {nb} buses",
            injections.len()
        )));
    }
    let horizon = injections.len() / nb;
    let mut state = GridState::zeros(horizon, nb);
    for (t, slot) in state.slots_mut().enumerate() {
        for (n, bus) in feeder.buses.iter().enumerate() {
            let inj = &injections[t * nb + n];
            let m = bus.phases.mask();
            let x = &mut slot[n];
            for ph in 0..3 {
                x.pg[ph] = inj.pg[ph] * m[ph];
                x.qg[ph] = inj.qg[ph] * m[ph];
                x.pd[ph] = inj.pd[ph] * m[ph];
                x.qd[ph] = inj.qd[ph] * m[ph];
            }
        }
        // children always follow parents in storage order
        for n in (0..nb).rev() {
            let bus = &feeder.buses[n];
            let mut p = [0.0; 3];
            let mut q = [0.0; 3];
            for &k in &bus.children {
                for ph in 0..3 {
                    p[ph] += slot[k].p_flow[ph];
                    q[ph] += slot[k].q_flow[ph];
                }
            }
            let x = &mut slot[n];
            for ph in 0..3 {
                x.p_flow[ph] = p[ph] + x.pd[ph] - x.pg[ph];
                x.q_flow[ph] = q[ph] + x.qd[ph] - x.qg[ph];
            }
        }
        slot[0].v = [feeder.v0; 3];
        for n in 1..nb {
            let bus = &feeder.buses[n];
            let parent_v = slot[bus.parent.expect("non-root bus")].v;
            let drop = voltage_drop(&bus.zbar, &slot[n].p_flow, &slot[n].q_flow);
            let x = &mut slot[n];
            for ph in 0..3 {
                x.v[ph] = if bus.phases.contains(Phase::from_index(ph)) {
                    parent_v[ph] - drop[ph]
                } else {
                    parent_v[ph]
                };
            }
        }
    }
    Ok(state)
}

/// Per-bus, per-slot base demand in per-unit.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkLoads {
    pub horizon: usize,
    pub buses: usize,
    p: Vec<Phase3>,
    q: Vec<Phase3>,
}

impl NetworkLoads {
    pub fn zeros(horizon: usize, buses: usize) -> Self {
        Self {
            horizon,
            buses,
            p: vec![[0.0; 3]; horizon * buses],
            q: vec![[0.0; 3]; horizon * buses],
        }
    }

    /// Converts kW / kvar samples on named buses to per-unit loads.
    pub fn from_samples(feeder: &FeederModel, samples: &[LoadSample], horizon: usize) -> Result<Self> {
        let mut loads = Self::zeros(horizon, feeder.num_buses());
        for (i, s) in samples.iter().enumerate() {
            let loc = || format!("load row {}", i + 1);
            let bus = s
                .bus
                .as_deref()
                .ok_or_else(|| Error::validation(loc(), "missing bus"))?;
            let n = feeder
                .bus_index(bus)
                .ok_or_else(|| Error::validation(loc(), format!("unknown bus `{bus}`")))?;
            let ph = s.phase.ok_or_else(|| Error::validation(loc(), "missing phase"))?;
            if !feeder.buses[n].phases.contains(ph) {
                return Err(Error::validation(loc(), format!("bus `{bus}` has no phase {ph}")));
            }
            if s.t >= horizon {
                return Err(Error::validation(
                    loc(),
                    format!("slot {} outside horizon {horizon}", s.t),
                ));
            }
            let k = s.t * loads.buses + n;
            loads.p[k][ph.index()] += s.p_kw / feeder.base_kva;
            loads.q[k][ph.index()] += s.q_kvar / feeder.base_kva;
        }
        Ok(loads)
    }

    pub fn p(&self, t: usize, n: usize) -> &Phase3 {
        &self.p[t * self.buses + n]
    }

    pub fn q(&self, t: usize, n: usize) -> &Phase3 {
        &self.q[t * self.buses + n]
    }

    pub fn p_mut(&mut self, t: usize, n: usize) -> &mut Phase3 {
        &mut self.p[t * self.buses + n]
    }

    pub fn q_mut(&mut self, t: usize, n: usize) -> &mut Phase3 {
        &mut self.q[t * self.buses + n]
    }

    /// Back to kW / kvar samples, one row per present phase with nonzero load.
    pub fn to_samples(&self, feeder: &FeederModel) -> Vec<LoadSample> {
        let mut rows = Vec::new();
        for t in 0..self.horizon {
            for (n, bus) in feeder.buses.iter().enumerate() {
                for ph in bus.phases.iter() {
                    let (p, q) = (self.p(t, n)[ph.index()], self.q(t, n)[ph.index()]);
                    if p != 0.0 || q != 0.0 {
                        rows.push(LoadSample {
                            t,
                            bus: Some(bus.id.clone()),
                            phase: Some(ph),
                            p_kw: p * feeder.base_kva,
                            q_kvar: q * feeder.base_kva,
                        });
                    }
                }
            }
        }
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn diag(v: Complex64) -> Impedance {
        let z0 = c(0.0, 0.0);
        [[v, z0, z0], [z0, v, z0], [z0, z0, v]]
    }

    #[test]
    fn zbar_identities() {
        let zb = zbar(&diag(c(1.0, 0.0)));
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { c(2.0, 0.0) } else { c(0.0, 0.0) };
                assert!((zb[i][j] - want).norm() < 1e-15, "{i}{j}: {}", zb[i][j]);
            }
        }
        let zb = zbar(&diag(c(0.0, 1.0)));
        for i in 0..3 {
            assert!((zb[i][i] - c(0.0, -2.0)).norm() < 1e-15);
        }
        // pure reactance turns reactive flow into voltage drop
        let drop = voltage_drop(&zb, &[0.0; 3], &[1.0, 1.0, 1.0]);
        for d in drop {
            assert!((d - 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zbar_off_diagonal_rotation() {
        let (r, x) = (0.3, 0.7);
        let mut z = diag(c(0.0, 0.0));
        z[0][1] = c(r, x);
        z[1][0] = c(r, x);
        let zb = zbar(&z);
        let theta = 2.0 * std::f64::consts::PI / 3.0;
        let alpha = c(theta.cos(), -theta.sin());
        // row b, column a picks up alpha; row a, column b picks up conj(alpha)
        assert!((zb[1][0] - 2.0 * alpha * c(r, -x)).norm() < 1e-15);
        assert!((zb[0][1] - 2.0 * alpha.conj() * c(r, -x)).norm() < 1e-15);
    }

    fn two_bus(z: Complex64) -> String {
        format!(
            r#"{{"version": 1, "base": {{"kva": 1000, "kv": 4.16}}, "sf_max_pu": 10, "v0_pu2": 1.0,
            "buses": [
              {{"id": 0, "parent": null, "phases": "abc", "v_min_pu2": 0.9, "v_max_pu2": 1.1}},
              {{"id": 1, "parent": 0, "phases": "a",
                "z": [[{{"re": {}, "im": {}}}, {{"re":0,"im":0}}, {{"re":0,"im":0}}],
                      [{{"re":0,"im":0}}, {{"re":0,"im":0}}, {{"re":0,"im":0}}],
                      [{{"re":0,"im":0}}, {{"re":0,"im":0}}, {{"re":0,"im":0}}]],
                "v_min_pu2": 0.9, "v_max_pu2": 1.1, "s_line_max_pu": 5}}
            ]}}"#,
            z.re, z.im
        )
    }

    #[test]
    fn minimal_two_bus_file() {
        let f = parse_feeder_str(&two_bus(c(0.0, 0.01))).unwrap();
        assert_eq!(f.num_lines(), 1);
        assert_eq!(f.buses[1].parent, Some(0));
        assert_eq!(f.buses[0].children, vec![1]);
        assert!(f.buses[0].s_line_max.is_infinite());
    }

    #[test]
    fn purely_reactive_line_has_no_drop_from_active_flow() {
        let f = parse_feeder_str(&two_bus(c(0.0, 0.01))).unwrap();
        let mut s = GridState::zeros(1, 2);
        s.at_mut(0, 0).v = [1.0; 3];
        s.at_mut(0, 1).v = [1.0; 3];
        s.at_mut(0, 1).p_flow = [1.0, 0.0, 0.0];
        s.at_mut(0, 1).pd = [1.0, 0.0, 0.0];
        s.at_mut(0, 0).p_flow = [1.0, 0.0, 0.0];
        let r = flow_residuals(&f, &s, 0).unwrap();
        assert_eq!(r[1].v, [0.0; 3]);
        assert!(r.iter().all(|r| r.max_abs() == 0.0));
    }

    #[test]
    fn zero_state_zero_residuals() {
        let f = parse_feeder_str(&two_bus(c(0.01, 0.02))).unwrap();
        let s = GridState::zeros(2, 2);
        for t in 0..2 {
            assert!(flow_residuals(&f, &s, t).unwrap().iter().all(|r| r.max_abs() == 0.0));
        }
        assert!(flow_residuals(&f, &GridState::zeros(1, 3), 0).is_err());
    }

    #[test]
    fn sweep_basics() {
        let f = parse_feeder_str(&two_bus(c(0.01, 0.02))).unwrap();
        let s = forward_sweep(&f, &[Injection::default(); 2]).unwrap();
        assert_eq!(s.at(0, 1).v, [1.0; 3]);
        assert_eq!(s.at(0, 1).p_flow, [0.0; 3]);

        let mut inj = [Injection::default(); 2];
        inj[1].pd = [1.0, 0.0, 0.0];
        let s = forward_sweep(&f, &inj).unwrap();
        assert_eq!(s.at(0, 1).p_flow[0], 1.0);
        assert_eq!(s.at(0, 0).p_flow[0], 1.0);
        // 2 r P with r = 0.01
        assert!((s.at(0, 1).v[0] - (1.0 - 0.02)).abs() < 1e-15);
        assert_eq!(s.at(0, 1).v[1], 1.0);
    }

    #[test]
    fn rejects_cycles_and_bad_phases() {
        let cyclic = r#"{"version": 1, "base": {"kva": 1, "kv": 1}, "sf_max_pu": 1, "v0_pu2": 1,
            "buses": [
              {"id": 0, "parent": null, "phases": "abc", "v_min_pu2": 0.9, "v_max_pu2": 1.1},
              {"id": 1, "parent": 2, "phases": "a", "v_min_pu2": 0.9, "v_max_pu2": 1.1},
              {"id": 2, "parent": 1, "phases": "a", "v_min_pu2": 0.9, "v_max_pu2": 1.1}
            ]}"#;
        let err = parse_feeder_str(cyclic).unwrap_err();
        assert!(err.to_string().contains("not a tree"), "{err}");

        let nested = r#"{"version": 1, "base": {"kva": 1, "kv": 1}, "sf_max_pu": 1, "v0_pu2": 1,
            "buses": [
              {"id": 0, "parent": null, "phases": "abc", "v_min_pu2": 0.9, "v_max_pu2": 1.1},
              {"id": 1, "parent": 0, "phases": "a", "v_min_pu2": 0.9, "v_max_pu2": 1.1},
              {"id": 2, "parent": 1, "phases": "ab", "v_min_pu2": 0.9, "v_max_pu2": 1.1}
            ]}"#;
        let err = parse_feeder_str(nested).unwrap_err();
        assert!(err.to_string().contains("bus 2"), "{err}");

        let wrong_version = two_bus(c(0.0, 0.01)).replace("\"version\": 1", "\"version\": 7");
        assert!(parse_feeder_str(&wrong_version).is_err());

        let inverted = two_bus(c(0.0, 0.01)).replacen("\"v_min_pu2\": 0.9", "\"v_min_pu2\": 1.2", 1);
        assert!(parse_feeder_str(&inverted).is_err());
    }

    #[test]
    fn phase_set_round_trip() {
        let s: PhaseSet = "ca".parse().unwrap();
        assert_eq!(s.to_string(), "ac");
        assert_eq!(s.indices(), vec![0, 2]);
        assert!("ad".parse::<PhaseSet>().is_err());
        assert!("aa".parse::<PhaseSet>().is_err());
    }
}
