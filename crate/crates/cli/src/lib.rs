//! Command line and HTTP service around the irda engine.

pub mod api;
pub mod backend;
pub mod commands;
pub mod manifest;
pub mod store;
