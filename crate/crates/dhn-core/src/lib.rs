//! Modeling and control toolkit for district heating networks (DHNs).
//!
//! The crate is organized around the pipeline that a network operator would
//! run: describe the network as a directed graph ([`network`]), certify that
//! a flow schedule is hydraulically realizable ([`hydraulics`]), simulate the
//! thermal transients on a refined mesh ([`thermal`]), transcribe and solve
//! the receding-horizon economic optimal control problem ([`ocp`]), wrap the
//! result in controller variants ([`controllers`]), and evaluate everything
//! in closed loop against a high-fidelity plant model ([`simulation`]).
//! Scenario configuration and the AROMA benchmark preset live in
//! [`scenario`].

pub mod controllers;
pub mod hydraulics;
pub mod linalg;
pub mod network;
pub mod ocp;
pub mod scenario;
pub mod simulation;
pub mod thermal;

mod error;

pub use error::DhnError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, DhnError>;
