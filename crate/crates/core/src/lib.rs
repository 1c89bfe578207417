//! Repeater-chain simulation, cut-off policies, and policy-gradient training.

pub mod error;
pub mod mdp;
pub mod montecarlo;
pub mod neuralnet;
pub mod oracle;
pub mod physics;
pub mod policies;
pub mod ppo;
pub mod seeds;

pub use error::{Error, Result};
pub use mdp::{ChainState, DiscardPolicy, ErrorRecord, StepOutcome};
pub use physics::{DerivedParams, KeyRateEstimate, RepeaterParams};
