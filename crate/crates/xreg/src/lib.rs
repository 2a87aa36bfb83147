//! File formats, threading, simulation studies and the `xreg` command line
//! on top of `xreg-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod exec;
pub mod formats;
pub mod study;

pub use error::{Error, Result};
