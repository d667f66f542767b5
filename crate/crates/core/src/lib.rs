//! Causal-reflection training over a synthetic structural causal diagnosis world.
//!
//! The crate is organized bottom-up:
//!
//! - [`scm`]: the structural causal world and its intervention regimes
//! - [`trajectory`]: vocabulary, reflective grammar, parsing and step extraction
//! - [`forge`]: counterfactual corpus construction and error localization
//! - [`policy`]: a log-linear autoregressive policy with exact gradients
//! - [`rewards`]: composite rewards and group-relative advantages
//! - [`train`]: supervised, preference and group-relative optimization stages
//! - [`metrics`]: grounding, answer and consistency metrics
//! - [`experiment`]: configuration and the command implementations behind the CLI

pub mod error;
pub mod experiment;
pub mod forge;
pub mod geometry;
pub mod metrics;
pub mod policy;
pub mod rewards;
pub mod rng;
pub mod scm;
pub mod train;
pub mod trajectory;
pub mod util;

pub use error::{Error, Result};
pub use geometry::{iou, BBox};
pub use rng::Streams;
pub use scm::{implied_diagnosis, oracle_consistent, CausalWorld, GroundedInstance, Regime, Step};
