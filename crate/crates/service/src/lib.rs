//! HTTP session API, model wire server and command-line front end for the
//! iviq retrieval engine.

pub mod api;
pub mod cli;
pub mod models;
