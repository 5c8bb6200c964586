//! Measures run-to-run variability of research-agent outputs and verifies
//! variance accounting on a fully synthetic agent.
//!
//! The crate has two halves that share one metric kernel:
//!
//! - An evaluation pipeline for real agent reports: extraction of answers,
//!   atomic findings, and citations ([`extract`]), cross-run canonicalization
//!   ([`canon`]), and pairwise total-variance estimation ([`metrics`]).
//! - A seeded information-acquisition simulator ([`sim`]) with an exact
//!   variance decomposition ([`decomp`]) and variance-mitigation strategies
//!   ([`mitigate`]) that can be checked against brute-force enumeration.
//!
//! All randomness is seeded and all parallel reductions are ordered, so every
//! entry point is reproducible bit-for-bit regardless of thread count. The
//! `parallel` feature (on by default) backs the hot loops with rayon; without
//! it the same code runs sequentially.

pub mod canon;
pub mod decomp;
pub mod extract;
pub mod judge;
pub mod metrics;
pub mod mitigate;
mod numeric;
mod par;
pub mod sim;

pub use canon::{CanonError, CanonicalSpace, EquivalenceOracle};
pub use decomp::{DecompError, DecompositionReport};
pub use extract::{ExtractError, RunArtifact};
pub use judge::{Judge, JudgeTransport, MockJudge};
pub use metrics::{Level, MetricsError, OutputVector, TvResult};
pub use mitigate::{EnsembleSchedule, MitigateError, MitigationConfig, SchemaDescriptor};
pub use sim::{PolicyConfig, SimError, TrajectoryRecord, WorldSpec};
