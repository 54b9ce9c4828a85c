//! Physics-informed distillation of a probability-flow ODE teacher into a
//! single-step trajectory-function student.

pub mod error;
pub mod grid;
pub mod loss;
pub mod mlp;
pub mod solvers;
pub mod student;
pub mod teacher;

pub use error::{PidError, Result};
pub mod checkpoint;
pub mod optim;
pub mod config;
pub mod eval;
pub mod trainer;
pub mod verify;
