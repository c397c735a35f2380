//! HTTP/JSON service for request-driven annotation sessions.
//!
//! Routes:
//!
//! | method | path                         |                                   |
//! |--------|------------------------------|-----------------------------------|
//! | POST   | `/sessions`                  | `{image_id, backend?, kb_version?}` |
//! | GET    | `/sessions/{id}`             | summary                           |
//! | GET    | `/sessions/{id}/tree`        | tree JSON, `ETag` = tree hash     |
//! | POST   | `/sessions/{id}/requests`    | `{kind:"I", node}` or `{kind:"II", node, probe:[a,b]}` |
//! | POST   | `/sessions/{id}/undo`        |                                   |
//! | POST   | `/sessions/{id}/export`      | tree file plus request-log JSONL  |
//! | GET    | `/images/{id}`               | PNG                               |
//! | GET    | `/kb`, `/kb/{version}`       | KB versions, KB JSON              |
//!
//! Mutating routes honor an `Idempotency-Key` header.

mod error;
mod routes;
mod session;
mod state;

pub use error::ApiError;
pub use routes::router;
pub use session::{Action, ActionOutcome, NodeView, Snapshot};
pub use state::{AppState, ServerConfig};

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(cfg: ServerConfig, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let state = AppState::open(cfg)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
