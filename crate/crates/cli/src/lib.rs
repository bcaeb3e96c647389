//! Command-line frontend for `kamdesk`.

pub mod commands;
pub mod config;
pub mod report;
