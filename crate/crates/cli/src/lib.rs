//! Library side of the `cpt` command-line tool: config resolution, run
//! manifests and the subcommand bodies.

pub mod commands;
pub mod manifest;
pub mod overrides;
