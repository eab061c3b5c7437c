//! Command-line interface and HTTP service for the retrieval engine.

pub mod app;
pub mod cli;
pub mod config;
pub mod service;
