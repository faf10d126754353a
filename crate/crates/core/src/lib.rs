//! Decentralized stochastic team decision problems.
//!
//! The library simulates team problems under the original measure and under a
//! reference measure where observations are decision-free noise, links the two
//! with likelihood processes, and optimizes strategy profiles person by person
//! using either the static reduction (discrete time) or adjoint regression
//! (continuous time).

pub mod builtin;
pub mod cli;
pub mod error;
pub mod fbsde;
pub mod girsanov;
pub mod linalg;
pub mod numerics;
pub mod pbp;
pub mod policy;
pub mod problem;
pub mod reduction;
pub mod simulate;
pub mod witsenhausen;

pub use error::{Result, TeamsError};
