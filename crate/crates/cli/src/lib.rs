//! Command implementations behind the `cocktail` binary.

pub mod commands;
pub mod config;
pub mod trainer;
