//! Files, command line and Monte Carlo harness around [`qlapp_core`].

pub mod cli;
pub mod error;
pub mod harness;
pub mod io;

pub use error::{AppError, Result};
