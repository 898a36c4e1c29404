//! Optimal control of planar chains driven by series and variable stiffness
//! actuators.

pub mod costs;
pub mod ddp;
pub mod dynamics;
pub mod error;
pub mod numdiff;
pub mod rigid;
pub mod sim;
pub mod soft;

pub use error::{Error, Result};
