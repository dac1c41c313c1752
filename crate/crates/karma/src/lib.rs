//! Std companion to `karma-core`: the `karma` command, INI config files,
//! the tensor file format, dataset directories and checkpoints.

pub mod cli;
pub mod config;
pub mod store;
pub mod tensor_file;
