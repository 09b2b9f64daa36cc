//! Economic dispatch games on integrated electrical-gas distribution networks.
//!
//! The crate models a set of prosumers that share an electrical distribution
//! feeder and a gas distribution network, formulates their dispatch problem as
//! a generalized potential game with mixed-integer gas-flow constraints, and
//! computes approximate generalized Nash equilibria with a two-stage
//! convexify-then-recover scheme wrapped in penalty-weight outer iterations.
//!
//! Module map:
//! - [`netmodel`]: network data model, JSON input format, validation, and the
//!   randomized case generator.
//! - [`gasflow`]: the two mixed-integer approximations of the Weymouth
//!   equation (second-order-cone relaxation and piecewise-affine secants).
//! - [`game`]: assembly of the dispatch game into a sparse convex program,
//!   per-agent costs, the exact potential, and feasibility audits.
//! - [`conic`]: the convex solver contract (quadratic objective, linear rows,
//!   boxes, second-order cones) used by both stages.
//! - [`recovery`]: stage two - binary recovery, pressure-recovery linear
//!   programs, auxiliary-variable rebuilds, and the shift-feasibility test.
//! - [`dispatch`]: the outer loop with penalty bracketing, equilibrium
//!   certificates, deviation metrics, and the convex-relaxation baselines.

pub mod conic;
pub mod dispatch;
pub mod game;
pub mod gasflow;
pub mod netmodel;
pub mod recovery;

pub use dispatch::{run_two_stage, AlgorithmSettings, DispatchOutcome, OutcomeStatus};
pub use game::{assemble, GameInstance, GasModelChoice, Strategy};
pub use netmodel::{load_network, Network};
