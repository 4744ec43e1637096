//! Command line and HTTP front ends over a trained generator checkpoint.

pub mod cli;
pub mod http;
pub mod service;
