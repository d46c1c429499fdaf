//! Transfer reinforcement learning under dynamics shift for episodic
//! tabular MDPs: shift identification from a source dataset followed by
//! hybrid optimistic value iteration in the target.

pub mod envs;
pub mod error;
pub mod estimation;
pub mod harness;
pub mod hybrid_vi;
pub mod mdp;
pub mod orchestrator;
pub mod shift_id;

pub use error::{Error, Result};
pub use estimation::{BonusFunctions, EmpiricalModel, PairSet, SourceDataset};
pub use hybrid_vi::{BoundTables, GapTable, HybridModel, ViConfig};
pub use mdp::{Dims, EpisodeTrace, Policy, TabularMdp};
pub use orchestrator::{Algorithm, HySRLConfig, RunResult};
pub use shift_id::{ShiftIdConfig, ShiftRegion, UncertaintyTable};
