//! HTTP/JSON front end for the simulator. Each request runs one command on
//! a blocking worker thread; paths are local to the server.

pub mod service;

use std::future::{Future, IntoFuture};
use std::net::SocketAddr;

use axum::extract::Json;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use fedda_api::{ErrorBody, ErrorKind, FedavgRequest, Health, RunRequest};
use serde::Serialize;
use tokio::net::TcpListener;

use service::Failure;

struct Reply<T>(Result<T, Failure>);

impl<T: Serialize> IntoResponse for Reply<T> {
    fn into_response(self) -> Response {
        match self.0 {
            Ok(body) => Json(body).into_response(),
            Err(f) => {
                let status = match f.kind {
                    ErrorKind::Usage => StatusCode::BAD_REQUEST,
                    ErrorKind::Runtime => StatusCode::INTERNAL_SERVER_ERROR,
                };
                tracing::warn!(kind = ?f.kind, "{}", f.message);
                (status, Json(ErrorBody::from(f))).into_response()
            }
        }
    }
}

async fn blocking<Q, T>(name: &'static str, req: Q, f: fn(&Q) -> Result<T, Failure>) -> Reply<T>
where
    Q: Send + 'static,
    T: Send + 'static,
{
    tracing::info!("{name}");
    let out = tokio::task::spawn_blocking(move || f(&req)).await.unwrap_or_else(|e| {
        Err(Failure {
            kind: ErrorKind::Runtime,
            message: format!("{name} worker failed: {e}"),
        })
    });
    Reply(out)
}

macro_rules! run_route {
    ($name:literal, $f:path) => {
        post(|Json(req): Json<RunRequest>| blocking($name, req, $f))
    };
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

pub fn router() -> Router {
    Router::new()
        .route(fedda_api::HEALTH, get(health))
        .route(fedda_api::GENERATE, run_route!("generate", service::generate))
        .route(fedda_api::TRAIN, run_route!("train", service::train))
        .route(fedda_api::EVALUATE, run_route!("evaluate", service::evaluate))
        .route(fedda_api::GRADCHECK, run_route!("gradcheck", service::gradcheck))
        .route(fedda_api::SWEEP, run_route!("sweep", service::sweep))
        .route(fedda_api::ABLATE, run_route!("ablate", service::ablate))
        .route(fedda_api::FOLDS, run_route!("folds", service::folds))
        .route(
            fedda_api::FEDAVG,
            post(|Json(req): Json<FedavgRequest>| blocking("fedavg", req, service::fedavg)),
        )
}

/// Serves until `shutdown` resolves; in-flight requests are finished first.
pub async fn serve(listener: TcpListener, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
    axum::serve(listener, router()).with_graceful_shutdown(shutdown).await
}

/// Binds `addr` (port 0 picks one) and serves in the background.
pub async fn spawn(addr: SocketAddr) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<std::io::Result<()>>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    Ok((local, tokio::spawn(axum::serve(listener, router()).into_future())))
}
