// `!(x > 0.0)` is how config validation rejects NaN along with bad values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod controller;
pub mod geodesy;
pub mod middleware;
pub mod mobility;
pub mod orchestrator;
pub mod pointing;
pub mod postproc;
pub mod rng;
pub mod sim;
pub mod sounder;
