//! Experiment runner: config files, output artifacts, sweeps and report
//! comparison.

pub mod compare;
pub mod runner;
pub mod suite;

pub use compare::{compare, Comparison};
pub use runner::{parse_config, parse_config_str, run, FinalReport, RunManifest, RunSpec};
pub use suite::{run_suite, Suite};
