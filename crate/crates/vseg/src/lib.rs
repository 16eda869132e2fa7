//! File formats, training driver, comparison report, CLI and HTTP service
//! around [`vseg_core`].

pub mod checkpoint;
pub mod cli;
pub mod compare;
pub mod csvlog;
pub mod dataset;
pub mod error;
pub mod fsutil;
pub mod pgm;
pub mod report;
pub mod service;

pub use vseg_core as core;
pub use error::{Error, Result};
