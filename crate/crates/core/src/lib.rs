pub mod adversary;
pub mod aggregation;
pub mod error;
pub mod features;
pub mod grid;
pub mod mdp;
pub mod metrics;
pub mod protocol;
pub mod impossibility;
pub mod stochastic;
pub mod verify;
