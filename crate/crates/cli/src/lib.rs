//! Configuration and pipeline stages behind the `mar3d` command.

pub mod config;
pub mod pipeline;
