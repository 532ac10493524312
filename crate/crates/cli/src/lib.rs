//! Configuration and subcommand implementations behind the `plr` binary.

pub mod commands;
pub mod config;
