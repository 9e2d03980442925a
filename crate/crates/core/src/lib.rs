//! Continual learning with functional regularisation of memorable past examples.
//!
//! Small ReLU networks are trained on a sequence of tasks. After each task the
//! weight posterior is approximated by a diagonal Laplace/Gauss-Newton
//! Gaussian, which induces a GP over network outputs with a Jacobian kernel.
//! A handful of memorable inputs (those with the largest output Hessian) are
//! kept, and later tasks are regularised so that predictions at those inputs
//! stay close to the frozen GP prior.

pub mod boundary;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gp;
pub mod likelihood;
pub mod memory;
pub mod metrics;
pub mod network;
pub mod numerics;
pub mod posterior;
pub mod trainer;

pub use error::{Error, Result};
