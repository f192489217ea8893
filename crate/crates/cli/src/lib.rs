//! Library side of the `dsfad` command-line tool.

pub mod commands;
pub mod manifest;
pub mod plot;
