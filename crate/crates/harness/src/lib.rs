//! Experiment harness for `skippy-core`: instance generators, run
//! configuration, the learner runner, sample-size sweeps and the oracle
//! verification suites used by the `skippy` binary.

pub mod config;
pub mod instances;
pub mod runner;
pub mod sweep;
pub mod verify;
