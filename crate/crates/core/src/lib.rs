//! Causal action-diffusion policy with chunk-wise autoregressive rollout and
//! a shared key/value cache over the action history.

pub mod bench;
pub mod cache;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod envs;
pub mod error;
pub mod masking;
pub mod model;
pub mod optim;
pub mod rng;
pub mod rollout;
pub mod schedule;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{CdpError, Result};
