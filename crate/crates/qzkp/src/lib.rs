//! Command-line front end, file formats and TCP transport for the
//! `qzkp-core` simulator.

pub mod calibrate;
pub mod check;
pub mod cli;
pub mod config;
pub mod report;
pub mod sim;
pub mod transport;
