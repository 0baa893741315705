//! Command implementations behind the `tcscore` binary.

pub mod commands;
pub mod config;

pub use commands::Arch;
pub use config::RunConfig;
