//! Gaussian processes with Kronecker-structured multi-output covariances:
//! multi-task and high-order GPs, exact posterior sampling by Matheron's
//! rule, and composite Bayesian optimization on top of them.

pub mod bench;
pub mod bo;
pub mod design;
pub mod error;
pub mod gp;
pub mod hogp;
pub mod kernels;
pub mod linalg;
pub mod mtgp;
pub mod optim;
pub mod problems;
pub mod sampler;
pub mod stats;
pub mod verify;
