pub mod fedstyle;
pub mod fusion;
pub mod grid;
pub mod inference;
pub mod metrics;
pub mod orchestrator;
pub mod params;
pub mod sim;
pub mod tree;
