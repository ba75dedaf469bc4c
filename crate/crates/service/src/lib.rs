//! Annotation service: owns a project directory and exposes its selection
//! rounds, annotations and retraining over HTTP under `/api/v1`.
//!
//! The API is described in `api/v1.json`.

pub mod api;
pub mod project;

pub use api::{router, serve_blocking, AppState};
pub use project::{Project, ProjectConfig, ProjectError};
