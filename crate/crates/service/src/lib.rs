//! Planning service: case workflow, device comparison, registration and
//! interactive replanning over HTTP+JSON, with an igtlink listener that
//! feeds intraoperative registrations into cases in INTRAOP.

pub mod devices;
pub mod error;
pub mod http;
pub mod state;
pub mod workflow;

use std::net::SocketAddr;
use std::sync::Arc;

use brachy_core::igtlink::{self, ServerConfig, ServerHandle};

pub use error::ServiceError;
pub use http::router;
pub use state::{AppState, ServiceConfig};
pub use workflow::{Eligibility, WorkflowStage, WorkflowState};

/// Starts the igtlink listener bound to `state`.
pub fn start_igtl(state: AppState, addr: SocketAddr) -> Result<ServerHandle, igtlink::IgtlError> {
    let handler: igtlink::Handler = Arc::new(move |peer, event| state.handle_igtl_event(peer, event));
    igtlink::serve(addr, handler, ServerConfig::default())
}

/// Serves HTTP on `http` (and igtlink on `igtl` when given) until `shutdown`
/// resolves.
pub async fn run(
    state: AppState,
    http: SocketAddr,
    igtl: Option<SocketAddr>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let _igtl = match igtl {
        Some(addr) => {
            let h = start_igtl(state.clone(), addr).map_err(std::io::Error::other)?;
            tracing::info!(addr = %h.local_addr(), "igtlink listening");
            Some(h)
        }
        None => None,
    };
    let listener = tokio::net::TcpListener::bind(http).await?;
    tracing::info!(addr = %listener.local_addr()?, "http listening");
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}
