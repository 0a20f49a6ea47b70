//! Distributed Eigenbench: workload generation, the driver, CSV reports and
//! scripted scenarios.

pub mod config;
pub mod driver;
pub mod random;
pub mod report;
pub mod scenarios;
pub mod workload;

pub use config::BenchConfig;
pub use driver::{run_benchmark, BenchReport};
