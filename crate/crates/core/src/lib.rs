//! Stability-constrained reinforcement learning for distribution-grid
//! voltage control.
//!
//! The crate builds a linearized radial feeder model ([`grid`]), simulates
//! reactive-power control loops ([`dynamics`]), trains decentralized
//! controllers that are monotone by construction ([`policy`], [`rl`]),
//! certifies them with a Lyapunov function ([`lyapunov`]) and compares them
//! against a linear droop baseline ([`bench`]).

pub mod bench;
pub mod checkpoint;
pub mod dynamics;
pub mod grid;
pub mod hash;
pub mod linalg;
pub mod lyapunov;
pub mod policy;
pub mod rl;
