//! Command-line tools and the HTTP service.
//!
//! Exit codes: 0 success, 1 other failure, 2 checkpoint problem, 3 bad input
//! (files, flags, manifests), 4 caption without a swappable color word.

pub mod args;
pub mod commands;
pub mod error;
pub mod server;
