pub mod config;
pub mod db;
pub mod detect;
pub mod error;
pub mod export;
pub mod features;
pub mod fixtures;
pub mod graph;
pub mod metrics;
pub mod modularize;
pub mod parallel;
pub mod similarity;
pub mod volume;

pub use error::{Error, Result};
