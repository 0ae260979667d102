//! Deliberately naive reference implementations.
//!
//! Nothing here shares code with `salm-core`: each oracle recomputes its
//! answer from first principles (recounting from scratch, recursing through
//! the smoothing formulas, perturbing parameters) so that agreement with the
//! optimised implementation is meaningful.

pub mod bpe;
pub mod fd;
pub mod kn;
pub mod schedule;
