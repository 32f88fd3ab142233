//! Std companion to `scalewise-core`: asset loading, JSON-lines audit logs,
//! optional HTTP endpoints, the HTTP/SSE service and the command line.

pub mod assets;
pub mod cli;
pub mod jsonl;
pub mod remote;
pub mod service;
