//! Decentralized learning with aggregation in a mirror space.
//!
//! Devices on a time-varying sparse graph map their models through a
//! mirror map `h = ∇φ`, gossip-average the mapped models with a doubly
//! stochastic matrix, take their gradient step in the mirror space and map
//! back. With `h(x) = x^p` the aggregation is a weighted power mean; `p = 1`
//! is ordinary linear gossip averaging.
//!
//! The crate is split along the pipeline:
//!
//! * [`mirror`]: mirror maps, potentials, Bregman divergences.
//! * [`topology`]: dynamic graph schedules and Metropolis mixing matrices.
//! * [`dataflow`]: local losses, datasets and Dirichlet non-IID partitions.
//! * [`engine`]: the synchronous gossip protocol, baselines and metrics.
//! * [`analysis`]: closed-form consensus and convergence bounds and the
//!   inequality checks that back them.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod dataflow;
pub mod engine;
mod error;
pub mod linalg;
pub mod mirror;
pub mod topology;

pub use error::{Error, Result};
pub use mirror::{MirrorKind, MirrorMap, ModelVec};
