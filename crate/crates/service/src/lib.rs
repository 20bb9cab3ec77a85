//! Local HTTP service and command-line front end for session analysis.
//!
//! [`app::App`] owns the session store, the analysis pipeline and the job
//! registry; [`routes::router`] exposes it over HTTP. Nothing is sent off
//! the device and the listener only binds to local addresses ([`bind`]).

pub mod app;
pub mod bind;
pub mod cli;
pub mod config;
pub mod error;
pub mod jobs;
pub mod routes;
pub mod staging;

pub use app::App;
pub use error::ApiError;
pub use routes::router;
