//! Steady-state thermal power flow for district heating grids and
//! importance-sampled generation of training data.

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod distributions;
pub mod grid;
pub mod hydraulic;
pub mod instances;
pub mod numerics;
pub mod sampler;
pub mod solver;
pub mod stats;
pub mod thermal;
