//! Latent Adaptive Planner: demonstration regeneration, latent-plan sequence
//! policy with variational training and test-time replanning, QP-based MPC
//! tracking, and a planar box-catching simulator.

pub mod data;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod kv;
pub mod model;
pub mod mpc;
pub mod regen;
pub mod replan;
pub mod sim;
pub mod vb;

pub use error::{Error, Result};
