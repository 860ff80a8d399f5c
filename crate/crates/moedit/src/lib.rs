//! Desk-scale lifelong model editing lab: configuration, file formats,
//! and the `moedit` command-line driver over `moedit-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod csvout;
pub mod jsonl;
pub mod svg;
