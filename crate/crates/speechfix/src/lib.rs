//! File formats, run configuration, the adapter line protocol and the
//! `speechfix` command-line tool, built on `speechfix-core`.

pub mod batch;
pub mod cli;
pub mod config;
pub mod io;
pub mod protocol;

pub use config::RunConfig;
