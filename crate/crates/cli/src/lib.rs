//! Command-line front-end: config parsing, commands and file output.

pub mod commands;
pub mod config;
pub mod output;
