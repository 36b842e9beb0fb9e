//! Synthetic instance generators.
//!
//! All instances are deterministic functions of the seed and carry a
//! provenance block marking them synthetic. Horizons start at noon, so the
//! overnight plug-in windows are contiguous slot ranges.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::fleet::{EnergySpec, FleetFile, FleetRecord, LoadSample, SlotSpec};
use crate::grid::{
    forward_sweep, BaseRecord, BusRecord, ComplexRecord, FeederFile, Generator, Injection, NetworkLoads, Phase,
    PhaseSet, SupplyCost,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstanceKind {
    #[serde(rename = "valley-59ev")]
    Valley59Ev,
    #[serde(rename = "toy-3bus")]
    Toy3Bus,
    #[serde(rename = "synthetic-123bus")]
    Synthetic123Bus,
}

impl InstanceKind {
    pub fn name(self) -> &'static str {
        match self {
            InstanceKind::Valley59Ev => "valley-59ev",
            InstanceKind::Toy3Bus => "toy-3bus",
            InstanceKind::Synthetic123Bus => "synthetic-123bus",
        }
    }
}

impl FromStr for InstanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valley-59ev" => Ok(InstanceKind::Valley59Ev),
            "toy-3bus" => Ok(InstanceKind::Toy3Bus),
            "synthetic-123bus" => Ok(InstanceKind::Synthetic123Bus),
            other => Err(Error::UnknownKind(other.to_string())),
        }
    }
}

/// Metadata written next to the instance files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceManifest {
    pub kind: InstanceKind,
    pub seed: u64,
    pub horizon: usize,
    pub slot_minutes: f64,
    pub provenance: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buses: Option<usize>,
    /// Number of buses carrying each phase count, `[1, 2, 3]` phases.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase_counts: Option<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub manifest: InstanceManifest,
    pub feeder: Option<FeederFile>,
    pub fleet: FleetFile,
    pub loads: Vec<LoadSample>,
}

pub const FEEDER_FILE: &str = "feeder.json";
pub const FLEET_FILE: &str = "fleet.json";
pub const LOAD_FILE: &str = "load.csv";
pub const MANIFEST_FILE: &str = "instance.json";

impl Instance {
    /// Parses the generated files the same way user files are parsed.
    pub fn network_case(&self) -> Result<crate::admm::NetworkCase> {
        let feeder = self
            .feeder
            .clone()
            .ok_or_else(|| Error::validation("instance", "no feeder in a network-free instance"))?
            .into_model()?;
        let entries = crate::fleet::parse_fleet(&serde_json::to_string(&self.fleet)?, self.manifest.horizon)?;
        crate::admm::NetworkCase::new(feeder, &entries, &self.loads, self.manifest.horizon)
    }

    /// Vehicles and summed base load for the network-free problem.
    pub fn aggregate_case(&self) -> Result<(Vec<crate::fleet::ChargingRequest>, crate::fleet::BaseLoadSeries)> {
        let entries = crate::fleet::parse_fleet(&serde_json::to_string(&self.fleet)?, self.manifest.horizon)?;
        let mut d = vec![0.0; self.manifest.horizon];
        for s in &self.loads {
            d[s.t] += s.p_kw;
        }
        Ok((
            entries.into_iter().map(|e| e.request).collect(),
            crate::fleet::BaseLoadSeries::new(d)?,
        ))
    }

    /// Writes the instance into `dir` and returns the paths written.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
            let path = dir.join(name);
            std::fs::write(&path, bytes)?;
            written.push(path);
            Ok(())
        };
        put(MANIFEST_FILE, pretty(&self.manifest)?)?;
        if let Some(f) = &self.feeder {
            put(FEEDER_FILE, pretty(f)?)?;
        }
        put(FLEET_FILE, pretty(&self.fleet)?)?;
        put(LOAD_FILE, load_csv_bytes(&self.loads, &self.manifest.provenance)?)?;
        Ok(written)
    }
}

fn pretty<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v)?;
    out.push(b'\n');
    Ok(out)
}

/// Serializes load samples as `t,bus,phase,p_kw,q_kvar` with a `#` header
/// carrying the provenance.
pub fn load_csv_bytes(samples: &[LoadSample], provenance: &serde_json::Value) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    writeln!(out, "# provenance: {provenance}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "bus", "phase", "p_kw", "q_kvar"])?;
    for s in samples {
        w.write_record([
            s.t.to_string(),
            s.bus.clone().unwrap_or_default(),
            s.phase.map(|p| p.to_string()).unwrap_or_default(),
            s.p_kw.to_string(),
            s.q_kvar.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn generate(kind: InstanceKind, seed: u64, horizon: Option<usize>) -> Result<Instance> {
    match kind {
        InstanceKind::Valley59Ev => valley_59ev(seed, horizon.unwrap_or(96)),
        InstanceKind::Toy3Bus => Ok(toy_3bus(seed)),
        InstanceKind::Synthetic123Bus => synthetic_123bus(seed, horizon.unwrap_or(24)),
    }
}

fn round(x: f64, digits: i32) -> f64 {
    let s = 10f64.powi(digits);
    (x * s).round() / s
}

/// Residential double-hump daily shape at hour `h` in [0, 24): a morning
/// bump centred at 09:00 and a larger evening bump at 19:00 on a 0.55 floor.
/// The evening maximum is 1 up to a 1e-7 tail of the morning bump.
pub fn double_hump(h: f64) -> f64 {
    let bump = |centre: f64, width: f64| {
        let mut dist = (h - centre).abs();
        dist = dist.min(24.0 - dist);
        (-(dist / width).powi(2)).exp()
    };
    0.55 + 0.25 * bump(9.0, 2.5) + 0.45 * bump(19.0, 2.8)
}

/// Hour of day at the start of slot `t` for a noon-anchored horizon.
fn hour_of(t: usize, horizon: usize) -> f64 {
    (12.0 + 24.0 * t as f64 / horizon as f64) % 24.0
}

/// Slot whose start is nearest to hour `h`, for a noon-anchored horizon.
fn slot_of(h: f64, horizon: usize) -> usize {
    let since_noon = (h - 12.0).rem_euclid(24.0);
    ((since_noon / 24.0 * horizon as f64).round() as usize).min(horizon)
}

struct Commute {
    from: usize,
    to: usize,
    daily_miles: f64,
}

/// Overnight plug-in window: arrival ~ N(18:00, 1.5 h) clipped to
/// [15:00, 23:00], departure ~ N(07:30, 1 h) clipped to [05:00, 10:00];
/// daily mileage log-normal with median 25.
fn draw_commute(rng: &mut ChaCha8Rng, horizon: usize) -> Commute {
    let arrive = Normal::<f64>::new(18.0, 1.5)
        .expect("valid normal")
        .sample(rng)
        .clamp(15.0, 23.0);
    let depart = Normal::<f64>::new(7.5, 1.0)
        .expect("valid normal")
        .sample(rng)
        .clamp(5.0, 10.0);
    let miles = LogNormal::new(25f64.ln(), 0.5)
        .expect("valid lognormal")
        .sample(rng)
        .clamp(2.0, 120.0);
    let from = slot_of(arrive, horizon);
    let to = slot_of(depart, horizon).max(from + 1);
    Commute {
        from,
        to,
        daily_miles: round(miles, 2),
    }
}

/// Largest mileage whose energy need fits in the window.
fn feasible_miles(c: &Commute, rate: f64, battery: f64) -> f64 {
    let deliverable = (c.to - c.from) as f64 * rate;
    // need = miles * 15 / 100, capped by the target state of charge
    let max_miles = deliverable / 15.0 * 100.0 * 0.999;
    c.daily_miles.min(round(max_miles, 2).min(battery / 15.0 * 100.0 * 0.9))
}

fn provenance(kind: InstanceKind, seed: u64, note: &str) -> serde_json::Value {
    json!({
        "synthetic": true,
        "generator": format!("evsched {}", kind.name()),
        "seed": seed,
        "note": note,
    })
}

/// 59 vehicles over a 24 h noon-to-noon horizon: 20 kWh batteries, 3.45 kW
/// chargers, target state of charge 0.9 at 15 kWh / 100 miles, and a
/// double-hump base load with a 1000 kW peak.
pub fn valley_59ev(seed: u64, horizon: usize) -> Result<Instance> {
    if horizon == 0 {
        return Err(Error::validation("horizon", "must be at least one slot"));
    }
    let kind = InstanceKind::Valley59Ev;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prov = provenance(
        kind,
        seed,
        "plug-in windows, mileage and base load are synthetic stand-ins for survey and utility data",
    );
    let vehicles = (0..59)
        .map(|m| {
            let c = draw_commute(&mut rng, horizon);
            let miles = feasible_miles(&c, 3.45, 20.0);
            FleetRecord {
                id: format!("ev{m:02}"),
                bus: None,
                phase: None,
                slots: SlotSpec::Window { from: c.from, to: c.to },
                rate_cap_kw: 3.45,
                energy: EnergySpec::FromSoc {
                    battery_kwh: 20.0,
                    daily_miles: miles,
                    e100_kwh: 15.0,
                    target_soc: 0.9,
                },
            }
        })
        .collect();
    let loads = (0..horizon)
        .map(|t| LoadSample {
            t,
            bus: None,
            phase: None,
            p_kw: round(1000.0 * double_hump(hour_of(t, horizon)), 4),
            q_kvar: 0.0,
        })
        .collect();
    Ok(Instance {
        manifest: InstanceManifest {
            kind,
            seed,
            horizon,
            slot_minutes: 1440.0 / horizon as f64,
            provenance: prov.clone(),
            buses: None,
            phase_counts: None,
        },
        feeder: None,
        fleet: FleetFile::Annotated {
            provenance: prov,
            vehicles,
        },
        loads,
    })
}

fn zero_z() -> [[ComplexRecord; 3]; 3] {
    [[ComplexRecord::default(); 3]; 3]
}

/// Phase impedance with self term `zs` and mutual term `zm`, restricted to
/// the present phases.
fn line_z(phases: PhaseSet, zs: Complex64, zm: Complex64) -> [[ComplexRecord; 3]; 3] {
    let mut z = zero_z();
    for i in phases.iter().map(Phase::index) {
        for j in phases.iter().map(Phase::index) {
            let v = if i == j { zs } else { zm };
            z[i][j] = ComplexRecord {
                re: round(v.re, 8),
                im: round(v.im, 8),
            };
        }
    }
    z
}

fn bus_record(id: usize, parent: Option<usize>, phases: PhaseSet, z: [[ComplexRecord; 3]; 3]) -> BusRecord {
    BusRecord {
        id: id.to_string(),
        parent: parent.map(|p| p.to_string()),
        phases,
        z,
        v_min_pu2: 0.9025,
        v_max_pu2: 1.1025,
        s_line_max_pu: None,
        gen: None,
    }
}

/// Three buses in a chain (substation, a three-phase middle bus, a
/// single-phase end bus), two vehicles on phase a, four slots and loose
/// limits. The seed is recorded but does not change the fixture.
pub fn toy_3bus(seed: u64) -> Instance {
    let kind = InstanceKind::Toy3Bus;
    let prov = provenance(kind, seed, "hand-built three-bus fixture with loose limits");
    let z = line_z(PhaseSet::ABC, Complex64::new(0.01, 0.02), Complex64::new(0.003, 0.006));
    let z_a = line_z(
        PhaseSet::from_str("a").expect("phase"),
        Complex64::new(0.012, 0.024),
        Complex64::default(),
    );
    let mut buses = vec![
        bus_record(0, None, PhaseSet::ABC, zero_z()),
        bus_record(1, Some(0), PhaseSet::ABC, z),
        bus_record(2, Some(1), PhaseSet::from_str("a").expect("phase"), z_a),
    ];
    for b in &mut buses {
        b.v_min_pu2 = 0.8;
        b.v_max_pu2 = 1.2;
    }
    let feeder = FeederFile {
        version: crate::grid::FEEDER_SCHEMA_VERSION,
        provenance: Some(prov.clone()),
        base: BaseRecord { kva: 100.0, kv: 4.16 },
        sf_max_pu: 10.0,
        v0_pu2: 1.0,
        supply_cost: SupplyCost { a: 0.03, b: 0.0 },
        buses,
    };
    let vehicles = vec![
        FleetRecord {
            id: "ev1".into(),
            bus: Some("1".into()),
            phase: Some(Phase::A),
            slots: SlotSpec::Window { from: 0, to: 3 },
            rate_cap_kw: 6.0,
            energy: EnergySpec::Direct { energy_need_kwh: 9.0 },
        },
        FleetRecord {
            id: "ev2".into(),
            bus: Some("2".into()),
            phase: Some(Phase::A),
            slots: SlotSpec::Window { from: 2, to: 4 },
            rate_cap_kw: 5.0,
            energy: EnergySpec::Direct { energy_need_kwh: 6.0 },
        },
    ];
    let pa = [[4.0, 6.0, 7.5, 5.0], [3.0, 2.0, 2.5, 4.0]];
    let mut loads = Vec::new();
    for t in 0..4 {
        loads.push(LoadSample {
            t,
            bus: Some("1".into()),
            phase: Some(Phase::A),
            p_kw: pa[0][t],
            q_kvar: round(0.3 * pa[0][t], 4),
        });
        loads.push(LoadSample {
            t,
            bus: Some("1".into()),
            phase: Some(Phase::B),
            p_kw: 2.0 + t as f64,
            q_kvar: 0.5,
        });
        loads.push(LoadSample {
            t,
            bus: Some("1".into()),
            phase: Some(Phase::C),
            p_kw: 3.0,
            q_kvar: 0.0,
        });
        loads.push(LoadSample {
            t,
            bus: Some("2".into()),
            phase: Some(Phase::A),
            p_kw: pa[1][t],
            q_kvar: 0.2,
        });
    }
    Instance {
        manifest: InstanceManifest {
            kind,
            seed,
            horizon: 4,
            slot_minutes: 360.0,
            provenance: prov.clone(),
            buses: Some(3),
            phase_counts: Some([1, 0, 2]),
        },
        feeder: Some(feeder),
        fleet: FleetFile::Annotated {
            provenance: prov,
            vehicles,
        },
        loads,
    }
}

/// Buses hosting vehicles in the 123-bus instance, with vehicle counts.
pub const EV_PLACEMENT_123: [(usize, usize); 5] = [(3, 5), (15, 10), (64, 15), (82, 25), (102, 5)];

/// A random radial 123-bus feeder in the spirit of the IEEE 123-node test
/// feeder: a three-phase trunk with two- and single-phase laterals, spot
/// loads following the double-hump curve at power factor 0.9, 15
/// distributed generators and 60 vehicles at buses 3, 15, 64, 82 and 102.
pub fn synthetic_123bus(seed: u64, horizon: usize) -> Result<Instance> {
    if horizon == 0 {
        return Err(Error::validation("horizon", "must be at least one slot"));
    }
    const NB: usize = 123;
    const BASE_KVA: f64 = 5000.0;
    let kind = InstanceKind::Synthetic123Bus;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prov = provenance(
        kind,
        seed,
        "random radial topology, impedances, loads, generators and vehicles; not the IEEE data",
    );

    let mut parent = vec![None; NB];
    let mut phases = [PhaseSet::ABC; NB];
    let mut n_children = vec![0usize; NB];
    for i in 1..NB {
        let p = if rng.random_bool(0.6) || i < 4 {
            i - 1
        } else {
            loop {
                let c = rng.random_range(0..i);
                if n_children[c] < 3 {
                    break c;
                }
            }
        };
        parent[i] = Some(p);
        n_children[p] += 1;
        let pp = phases[p];
        phases[i] = match pp.len() {
            3 if i < 12 => PhaseSet::ABC,
            3 => match rng.random_range(0..10) {
                0..=4 => PhaseSet::ABC,
                5 | 6 => two_of(pp, &mut rng),
                _ => one_of(pp, &mut rng),
            },
            2 if rng.random_bool(0.5) => pp,
            _ => one_of(pp, &mut rng),
        };
    }

    let z_base = 4.16f64.powi(2) / (BASE_KVA / 1000.0);
    let mut buses: Vec<BusRecord> = (0..NB)
        .map(|i| {
            let z = match parent[i] {
                None => zero_z(),
                Some(_) => {
                    let miles = rng.random_range(0.05..0.25);
                    let zs = Complex64::new(0.306, 0.627) * miles / z_base;
                    #[allow(clippy::approx_constant)] // ohm per mile, not 1/pi
                    let zm = Complex64::new(0.101, 0.318) * miles / z_base;
                    line_z(phases[i], zs, zm)
                }
            };
            bus_record(i, parent[i], phases[i], z)
        })
        .collect();

    // spot loads (kW, kvar at unit shape)
    let mut spot = vec![[0.0f64; 3]; NB];
    for i in 1..NB {
        for ph in phases[i].iter() {
            if rng.random_bool(0.7) {
                spot[i][ph.index()] = round(rng.random_range(10.0..45.0), 2);
            }
        }
    }
    let shape: Vec<f64> = (0..horizon).map(|t| double_hump(hour_of(t, horizon))).collect();
    let mut loads = NetworkLoads::zeros(horizon, NB);
    let mut samples = Vec::new();
    for t in 0..horizon {
        for (i, s) in spot.iter().enumerate() {
            for ph in phases[i].iter() {
                let p = s[ph.index()];
                if p > 0.0 {
                    let p_kw = round(p * shape[t], 4);
                    let q_kvar = round(p_kw * 0.4843, 4);
                    samples.push(LoadSample {
                        t,
                        bus: Some(i.to_string()),
                        phase: Some(ph),
                        p_kw,
                        q_kvar,
                    });
                    loads.p_mut(t, i)[ph.index()] = p_kw / BASE_KVA;
                    loads.q_mut(t, i)[ph.index()] = q_kvar / BASE_KVA;
                }
            }
        }
    }

    // distributed generation on 15 distinct buses
    let mut dg_buses: Vec<usize> = Vec::new();
    while dg_buses.len() < 15 {
        let b = rng.random_range(1..NB);
        if !dg_buses.contains(&b) {
            dg_buses.push(b);
        }
    }
    dg_buses.sort_unstable();
    for &b in &dg_buses {
        let mut g = Generator {
            pmin: [0.0; 3],
            pmax: [0.0; 3],
            qmin: [0.0; 3],
            qmax: [0.0; 3],
            a: [0.0; 3],
            b: [0.0; 3],
            c: [0.0; 3],
        };
        for ph in phases[b].iter().map(Phase::index) {
            let cap = round(rng.random_range(10.0..40.0), 2) / BASE_KVA;
            g.pmax[ph] = cap;
            g.qmin[ph] = -0.4 * cap;
            g.qmax[ph] = 0.4 * cap;
            g.a[ph] = round(rng.random_range(0.01..0.04), 5);
            g.b[ph] = round(rng.random_range(2e-4..6e-4), 6);
        }
        buses[b].gen = Some(g);
    }

    // line limits with headroom over the peak no-vehicle, no-generation flow
    let mut feeder = FeederFile {
        version: crate::grid::FEEDER_SCHEMA_VERSION,
        provenance: Some(prov.clone()),
        base: BaseRecord {
            kva: BASE_KVA,
            kv: 4.16,
        },
        sf_max_pu: 10.0,
        v0_pu2: 1.0,
        supply_cost: SupplyCost { a: 2e-3, b: 0.0 },
        buses: buses.clone(),
    };
    let model = feeder.clone().into_model()?;
    let inj: Vec<Injection> = (0..horizon)
        .flat_map(|t| {
            let loads = &loads;
            model.buses.iter().map(move |b| {
                let n = b.id.parse::<usize>().expect("numeric ids");
                Injection {
                    pd: *loads.p(t, n),
                    qd: *loads.q(t, n),
                    ..Injection::default()
                }
            })
        })
        .collect();
    let sweep = forward_sweep(&model, &inj)?;
    let mut peak = vec![0.0f64; NB];
    let mut head = 0.0f64;
    for t in 0..horizon {
        for (k, b) in model.buses.iter().enumerate() {
            let n = b.id.parse::<usize>().expect("numeric ids");
            let x = sweep.at(t, k);
            for ph in 0..3 {
                peak[n] = peak[n].max(x.p_flow[ph].hypot(x.q_flow[ph]));
            }
        }
        let x = sweep.at(t, 0);
        head = head.max(x.p_flow.iter().sum::<f64>().hypot(x.q_flow.iter().sum::<f64>()));
    }
    for (i, b) in buses.iter_mut().enumerate().skip(1) {
        b.s_line_max_pu = Some(round(2.0 * peak[i] + 0.02, 6));
    }
    feeder.sf_max_pu = round(2.0 * head + 0.1, 6);
    feeder.buses = buses;

    let mut vehicles = Vec::new();
    for &(bus, count) in &EV_PLACEMENT_123 {
        let present: Vec<Phase> = phases[bus].iter().collect();
        for j in 0..count {
            let c = draw_commute(&mut rng, horizon);
            let rate = if rng.random_bool(0.7) { 3.45 } else { 6.6 };
            let miles = feasible_miles(&c, rate, 20.0);
            vehicles.push(FleetRecord {
                id: format!("ev{bus}-{j}"),
                bus: Some(bus.to_string()),
                phase: Some(present[j % present.len()]),
                slots: SlotSpec::Window { from: c.from, to: c.to },
                rate_cap_kw: rate,
                energy: EnergySpec::FromSoc {
                    battery_kwh: 20.0,
                    daily_miles: miles,
                    e100_kwh: 15.0,
                    target_soc: 0.9,
                },
            });
        }
    }

    let mut phase_counts = [0usize; 3];
    phases.iter().for_each(|p| phase_counts[p.len() - 1] += 1);
    Ok(Instance {
        manifest: InstanceManifest {
            kind,
            seed,
            horizon,
            slot_minutes: 1440.0 / horizon as f64,
            provenance: prov.clone(),
            buses: Some(NB),
            phase_counts: Some(phase_counts),
        },
        feeder: Some(feeder),
        fleet: FleetFile::Annotated {
            provenance: prov,
            vehicles,
        },
        loads: samples,
    })
}

fn one_of(set: PhaseSet, rng: &mut ChaCha8Rng) -> PhaseSet {
    let v: Vec<Phase> = set.iter().collect();
    let mut s = PhaseSet::default();
    s.insert(v[rng.random_range(0..v.len())]);
    s
}

fn two_of(set: PhaseSet, rng: &mut ChaCha8Rng) -> PhaseSet {
    let v: Vec<Phase> = set.iter().collect();
    let skip = rng.random_range(0..v.len());
    let mut s = PhaseSet::default();
    v.iter()
        .enumerate()
        .filter(|&(i, _)| i != skip)
        .for_each(|(_, &p)| s.insert(p));
    s
}
