//! Difficulty calibration for parameterized benchmark generators.

pub mod designers;
pub mod env;
pub mod gateway;
pub mod jsonx;
pub mod metrics;
pub mod orchestrator;
pub mod paramspace;
pub mod seed;
pub mod targets;
