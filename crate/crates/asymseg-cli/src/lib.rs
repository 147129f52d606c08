//! Library surface of the CLI so integration tests can drive the same
//! code paths the binary does.

pub mod commands;
pub mod config;
