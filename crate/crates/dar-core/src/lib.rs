//! Learning to run Ford-Fulkerson, step by step.
//!
//! This crate bundles everything needed to study neural execution of the
//! max-flow/min-cut problem on small synthetic graphs:
//!
//! - [`graph`]: seeded generators for two-community and bipartite flow
//!   networks, plus JSON dataset serialization.
//! - [`algo`]: exact Ford-Fulkerson with Bellman-Ford path selection,
//!   recording a full step trajectory (augmenting-path predecessors and
//!   intermediate flows), min-cut labelling, and a brute-force cut
//!   enumeration oracle for cross-checking.
//! - [`tensor`]: a minimal dense f64 tape autodiff engine (reverse mode)
//!   with the segment aggregations message passing needs.
//! - [`model`]: an encode-process-decode graph network that imitates the
//!   algorithm one augmenting step at a time, with optional min-cut head
//!   (the dual task), a staged cut processor (pipeline), and a direct
//!   flow-regression baseline.
//! - [`train`]: per-step imitation losses, teacher forcing, plain SGD, and
//!   random hyperparameter search.
//! - [`postprocess`]: projection of predicted flows back onto the feasible
//!   polytope (capacity + conservation repair).
//! - [`eval`]: flow/cut metrics, random baselines, a linear probe for
//!   decoding the optimal flow value from latents, and embedding export.

pub mod algo;
pub mod eval;
pub mod graph;
pub mod model;
pub mod postprocess;
mod seed;
pub mod tensor;
pub mod train;
