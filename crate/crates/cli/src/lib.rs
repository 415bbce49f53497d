//! Command line and HTTP/JSON service for `bias-lens`.

pub mod cli;
pub mod ops;
pub mod service;
