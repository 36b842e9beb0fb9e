//! Decentralized electric-vehicle charging schedulers.
//!
//! Two optimizers live here:
//!
//! * [`fw`]: a Frank-Wolfe valley-filling protocol for the network-free
//!   problem. Vehicles only ever see the *rank order* of slot prices and the
//!   charging center only ever sees aggregated profiles.
//! * [`admm`]: a consensus-ADMM solver for network-constrained charging over
//!   an unbalanced radial feeder described by the linearized multiphase flow
//!   model in [`grid`]. Each bus talks only to its parent and children; the
//!   per-bus EV subproblems are delegated back to [`fw`].
//!
//! [`pgd`] holds the projected-gradient baseline, [`oracle`] the independent
//! reference solvers used by the test suite, and [`instances`] the
//! deterministic synthetic scenario generators.
//!
//! Data-parallel inner loops (per vehicle, per bus, per slot) run on rayon
//! when the `parallel` feature is enabled; see [`par::Exec`].

// `!(x > 0.0)` is how NaN gets rejected; 3x3 phase loops read best indexed.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod admm;
pub mod error;
pub mod fleet;
pub mod fw;
pub mod grid;
pub mod instances;
pub mod oracle;
pub mod par;
pub mod pgd;

pub use error::{Error, Result};
