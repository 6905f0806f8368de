//! Thin async client: one method per service endpoint.

use fedda_api::{
    AblateResponse, ErrorBody, ErrorKind, EvaluateResponse, FedavgRequest, FedavgResponse, FoldsResponse,
    GenerateResponse, GradcheckResponse, Health, RunRequest, SweepResponse, TrainResponse,
};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot reach {url}: {source}")]
    Transport {
        url: String,
        #[source]
        source: reqwest::Error,
    },
    /// The service ran the request and reported a failure.
    #[error("{message}")]
    Service { kind: ErrorKind, message: String },
    #[error("unexpected response from {url} ({status}): {body}")]
    Protocol { url: String, status: u16, body: String },
}

impl ClientError {
    /// Whether the failure was caused by the request itself (bad config,
    /// bad arguments) rather than by the run.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            ClientError::Service {
                kind: ErrorKind::Usage,
                ..
            }
        )
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Client {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    async fn decode<T: DeserializeOwned>(&self, url: String, resp: reqwest::Response) -> Result<T, ClientError> {
        let status = resp.status();
        let body = resp.bytes().await.map_err(|source| ClientError::Transport {
            url: url.clone(),
            source,
        })?;
        if status.is_success() {
            if let Ok(v) = serde_json::from_slice::<T>(&body) {
                return Ok(v);
            }
        } else if let Ok(e) = serde_json::from_slice::<ErrorBody>(&body) {
            return Err(ClientError::Service {
                kind: e.kind,
                message: e.message,
            });
        }
        Err(ClientError::Protocol {
            url,
            status: status.as_u16(),
            body: String::from_utf8_lossy(&body).into_owned(),
        })
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        let url = format!("{}{path}", self.base);
        let resp = self
            .http
            .post(&url)
            .json(body)
            .send()
            .await
            .map_err(|source| ClientError::Transport {
                url: url.clone(),
                source,
            })?;
        self.decode(url, resp).await
    }

    pub async fn health(&self) -> Result<Health, ClientError> {
        let url = format!("{}{}", self.base, fedda_api::HEALTH);
        let resp = self
            .http
            .get(&url)
            .send()
            .await
            .map_err(|source| ClientError::Transport {
                url: url.clone(),
                source,
            })?;
        self.decode(url, resp).await
    }

    pub async fn generate(&self, req: &RunRequest) -> Result<GenerateResponse, ClientError> {
        self.post(fedda_api::GENERATE, req).await
    }

    pub async fn train(&self, req: &RunRequest) -> Result<TrainResponse, ClientError> {
        self.post(fedda_api::TRAIN, req).await
    }

    pub async fn evaluate(&self, req: &RunRequest) -> Result<EvaluateResponse, ClientError> {
        self.post(fedda_api::EVALUATE, req).await
    }

    pub async fn gradcheck(&self, req: &RunRequest) -> Result<GradcheckResponse, ClientError> {
        self.post(fedda_api::GRADCHECK, req).await
    }

    pub async fn sweep(&self, req: &RunRequest) -> Result<SweepResponse, ClientError> {
        self.post(fedda_api::SWEEP, req).await
    }

    pub async fn ablate(&self, req: &RunRequest) -> Result<AblateResponse, ClientError> {
        self.post(fedda_api::ABLATE, req).await
    }

    pub async fn folds(&self, req: &RunRequest) -> Result<FoldsResponse, ClientError> {
        self.post(fedda_api::FOLDS, req).await
    }

    pub async fn fedavg(&self, req: &FedavgRequest) -> Result<FedavgResponse, ClientError> {
        self.post(fedda_api::FEDAVG, req).await
    }
}
