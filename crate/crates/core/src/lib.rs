//! Optimal control of coil currents for a collisionless plasma.
//!
//! The plasma is a Vlasov-Poisson ensemble of weighted particles driven by its
//! own softened electric field and by the magnetic field of a set of fixed coils
//! with time-dependent currents. The crate provides the coil fields, the
//! particle transport, the exact discrete adjoint of the transport scheme, the
//! projected-gradient control solver and the first- and second-order
//! optimality diagnostics.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments,
    clippy::type_complexity
)]

pub mod num;
pub mod error;
pub mod coil_fields;
pub mod kernels;
pub mod transport;
pub mod target;
pub mod adjoint;
pub mod control_opt;
pub mod cli_io;

pub use error::{Error, Result};
