//! Deterministic scenario runner for the ESP tunnel data plane: topologies
//! of switches, hosts and FIFO links around the controller, traffic
//! generation, traces, reports and wall-clock control-plane timing.
//!
//! The protocol machinery itself lives in `espnet-core`; this crate wires
//! it into a virtual network and carries all the IO: scenario JSON, report
//! JSON, JSONL traces and the `espnet` CLI.

pub mod netsim;
pub mod run;
pub mod scenario;
pub mod timing;

pub use run::{build_simnet, run_scenario, RunOptions, RunOutput, RunReport};
pub use scenario::Scenario;
