//! Desk-scale simulator for heterogeneous federated fine-tuning of sparse
//! mixture-of-experts layers with modulated routing and pseudo-gradient
//! injection, plus an analytic cost model and a sparse-gradient bias lab.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod biaslab;
pub mod config;
pub mod costmodel;
pub mod error;
pub mod federation;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod report;
pub mod smoe;
pub mod synthdata;

pub use error::{Error, Result};
