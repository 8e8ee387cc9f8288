//! Control discretization, cost and derivative evaluation, solvers and
//! optimality diagnostics.

mod diagnostics;
mod grid;
mod problem;
mod solvers;

pub use diagnostics::*;
pub use grid::{project_box, ControlGrid};
pub use problem::*;
pub use solvers::*;
