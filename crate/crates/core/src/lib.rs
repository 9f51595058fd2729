//! Moonshot consensus model, safety monitor and randomized simulator.

pub mod block_store;
pub mod encoding;
pub mod harness;
pub mod monitor;
pub mod mutation;
pub mod sim;
pub mod types;
pub mod validator;

pub use block_store::BlockTree;
pub use encoding::{parse_canonical, Canonical};
pub use harness::{campaign, kill_all, kill_mutant, CampaignSpec, CampaignSummary, Kill, MutantOptions, MutantResult};
pub use monitor::{Check, GlobalLedger, Monitor, Violation};
pub use mutation::Mutation;
pub use sim::config::{AdversaryStrategy, Rational, SimConfig};
pub use sim::{replay, replay_str, run, run_traced, RunReport, SimError, SimEvent, Simulation};
pub use types::*;
pub use validator::{Dest, Entry, Outgoing, ValidatorState};
