//! Random instance builders shared by the integration tests.
#![allow(dead_code)]

use evsched::fleet::{BaseLoadSeries, ChargingRequest, CostModel};
use evsched::grid::{
    BaseRecord, BusRecord, ComplexRecord, FeederFile, FeederModel, Generator, PhaseSet, FEEDER_SCHEMA_VERSION,
};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A vehicle with a random nonempty availability set and a need below its
/// deliverable energy.
pub fn random_request(rng: &mut impl Rng, id: usize, horizon: usize) -> ChargingRequest {
    let mut slots: Vec<usize> = (0..horizon).filter(|_| rng.random_bool(0.6)).collect();
    if slots.is_empty() {
        slots.push(rng.random_range(0..horizon));
    }
    let rate = rng.random_range(0.5..3.0);
    let need = rng.random_range(0.05..0.95) * rate * slots.len() as f64;
    ChargingRequest::new(format!("ev{id}"), slots, rate, need).expect("valid request")
}

pub struct AggregateCase {
    pub fleet: Vec<ChargingRequest>,
    pub d: BaseLoadSeries,
    pub cost: CostModel,
}

/// Desk-scale network-free instance: `M <= 10`, `T <= 12`.
pub fn random_aggregate(seed: u64) -> AggregateCase {
    let mut r = rng(seed);
    let horizon = r.random_range(2..=12);
    let m = r.random_range(1..=10);
    let fleet = (0..m).map(|i| random_request(&mut r, i, horizon)).collect();
    let d = BaseLoadSeries::new((0..horizon).map(|_| r.random_range(0.0..10.0)).collect()).unwrap();
    let cost = if r.random_bool(0.5) {
        CostModel::QuadraticValley
    } else {
        CostModel::Quadratic {
            a: (0..horizon).map(|_| r.random_range(0.1..2.0)).collect(),
            b: (0..horizon).map(|_| r.random_range(-1.0..1.0)).collect(),
            c: vec![0.0; horizon],
        }
    };
    AggregateCase { fleet, d, cost }
}

fn complex(re: f64, im: f64) -> ComplexRecord {
    ComplexRecord { re, im }
}

/// Random radial feeder with `buses` buses. Phase sets shrink along the
/// tree and impedances are symmetric with zeros on absent phases.
pub fn random_feeder(rng: &mut impl Rng, buses: usize) -> FeederModel {
    let subsets = ["abc", "ab", "bc", "ac", "a", "b", "c"];
    let mut phases: Vec<PhaseSet> = vec![PhaseSet::ABC];
    let mut records = vec![BusRecord {
        id: "0".into(),
        parent: None,
        phases: PhaseSet::ABC,
        z: Default::default(),
        v_min_pu2: 0.5,
        v_max_pu2: 1.5,
        s_line_max_pu: None,
        gen: None,
    }];
    for n in 1..buses {
        let parent = rng.random_range(0..n);
        let candidates: Vec<PhaseSet> = subsets
            .iter()
            .map(|s| s.parse::<PhaseSet>().unwrap())
            .filter(|s| s.is_subset(phases[parent]))
            .collect();
        let ph = if rng.random_bool(0.6) {
            phases[parent]
        } else {
            *candidates.choose(rng).unwrap()
        };
        let mut z: [[ComplexRecord; 3]; 3] = Default::default();
        for i in ph.indices() {
            for j in ph.indices() {
                if i <= j {
                    let (re, im) = if i == j {
                        (rng.random_range(0.001..0.05), rng.random_range(0.001..0.08))
                    } else {
                        (rng.random_range(0.0..0.02), rng.random_range(0.0..0.03))
                    };
                    z[i][j] = complex(re, im);
                    z[j][i] = complex(re, im);
                }
            }
        }
        let gen = rng.random_bool(0.2).then(|| {
            let mask = ph.mask();
            Generator {
                pmin: [0.0; 3],
                pmax: mask.map(|m| m * 0.05),
                qmin: mask.map(|m| -m * 0.02),
                qmax: mask.map(|m| m * 0.02),
                a: [0.02; 3],
                b: [0.001; 3],
                c: [0.0; 3],
            }
        });
        phases.push(ph);
        records.push(BusRecord {
            id: n.to_string(),
            parent: Some(parent.to_string()),
            phases: ph,
            z,
            v_min_pu2: 0.5,
            v_max_pu2: 1.5,
            s_line_max_pu: None,
            gen,
        });
    }
    FeederFile {
        version: FEEDER_SCHEMA_VERSION,
        provenance: None,
        base: BaseRecord { kva: 1000.0, kv: 4.16 },
        sf_max_pu: 100.0,
        v0_pu2: 1.0,
        supply_cost: Default::default(),
        buses: records,
    }
    .into_model()
    .expect("random feeder is valid")
}
