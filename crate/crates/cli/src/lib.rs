//! Command-line entry points and the HTTP session service.

pub mod config;
pub mod service;
