//! Command-line front end: configuration, persistence formats, experiment
//! stages, and report emission for the embedding-update toolkit.

pub mod checkpoint;
pub mod config;
pub mod gallery;
pub mod io;
pub mod pipeline;
pub mod report;
