//! Policy evaluation and control with eta-return mixture targets: a
//! bootstrap that blends the learned value estimate with a discounted
//! successor-feature model, plus exact fixed-point oracles and a sweep
//! harness for the chain experiments.

pub mod control;
pub mod env;
pub mod error;
pub mod harness;
pub mod learners;
pub mod oracle;

pub use error::{Error, Result};
