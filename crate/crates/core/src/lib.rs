//! Integrated path tracking for a four-wheel independent steering and
//! driving vehicle.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod apf;
pub mod bayes_opt;
pub mod domain;
pub mod dyc;
pub mod ekf;
pub mod error;
pub mod harness;
pub mod lstm;
pub mod ltv_model;
pub mod metrics;
pub mod mpc;
pub mod noise;
pub mod plant;

pub use error::{Error, Result};
