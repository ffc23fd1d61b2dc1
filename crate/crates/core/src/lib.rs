//! Feature speed, backward-feature angles and hyperparameter scalings for
//! deep MLPs and ResNets trained by gradient descent.

pub mod backprop;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod network;
pub mod numerics;
pub mod parallel;
pub mod scalings;
pub mod table;

pub use error::{Error, Result};
