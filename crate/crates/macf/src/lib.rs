//! HTTP service and command-line front end over `macf-core`.

pub mod cli;
pub mod server;
