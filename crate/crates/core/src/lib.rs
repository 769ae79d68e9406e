//! Conditional denoising diffusion for next-item sequential recommendation.
//!
//! The pipeline runs [`corpus`] (ingest, filter, split, batch) into
//! [`trainer`] (diffusion-step losses from [`objective`] over a [`model`]
//! built on the [`autograd`] tape) and ranks the full catalog in [`eval`].

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod error;
pub mod model;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
