//! HTTP service and command-line front end for voice femininity estimation.

pub mod cli;
pub mod config;
pub mod http;
