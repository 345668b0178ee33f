//! HTTP service for curating knowledge-seeking turns into a turn library.

pub mod routes;
pub mod state;

pub use routes::{router, serve, Shared};
pub use state::{CurationError, CurationState, Progress, SelectionRecord, SpanRequest};
