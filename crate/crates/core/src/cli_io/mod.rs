//! Scenario files, subcommand dispatch and plot-data emission.

mod plot;
mod run;
mod scenario;

pub use plot::*;
pub use run::{format_checks, run, run_fields, Check, Command, RunReport};
pub use scenario::{Scenario, Setup, SolverKind, TargetChoice, Tolerances};
