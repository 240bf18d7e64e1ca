//! Combined multi-step schemes for forward-backward stochastic differential
//! equations.

// NaN-rejecting `!(x > 0.0)` guards and index loops over coupled arrays are
// deliberate in the numeric kernels.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bench;
pub mod fbsde;
pub mod fdweights;
pub mod hermite;
pub mod kahan;
pub mod lattice;
pub mod stability;
pub mod stepper;
