//! Library surface of the `horde` command-line tool, kept separate from the
//! binary so the command implementations are directly testable.

pub mod commands;
pub mod config;
pub mod metrics;
pub mod train;
