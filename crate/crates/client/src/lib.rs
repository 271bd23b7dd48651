//! HTTP and WebSocket client for the coopbench service, plus blocking
//! adapters for external policies and schema proposers.

use coopbench_core::agents::{Observation, PlannedTrajectory, Transport};
use coopbench_core::api::*;
use coopbench_core::bench::{DemonstrationLog, HumanComparison, SuiteOutcome, SweepReport};
use coopbench_core::bridge::{ClientFrame, ServerFrame};
use coopbench_core::gen::{BatchIndex, ProposalRequest, SchemaProposer};
use coopbench_core::real2sim::ConversionReport;
use futures_util::{SinkExt, StreamExt};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::time::Duration;
use tokio_tungstenite::tungstenite::Message;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    #[error("server returned {status}: {message}")]
    Api { status: u16, message: String },
    #[error("websocket: {0}")]
    Ws(#[from] tokio_tungstenite::tungstenite::Error),
    #[error("bad frame: {0}")]
    Frame(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    token: Option<String>,
    http: reqwest::Client,
}

impl Client {
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            token: None,
            http: reqwest::Client::new(),
        }
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token;
        self
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn request(&self, method: reqwest::Method, path: &str) -> reqwest::RequestBuilder {
        let mut r = self.http.request(method, format!("{}{path}", self.base));
        if let Some(t) = &self.token {
            r = r.header(TOKEN_HEADER, t);
        }
        r
    }

    async fn decode<R: DeserializeOwned>(resp: reqwest::Response) -> Result<R> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await.unwrap_or_default();
        let message = serde_json::from_str::<ErrorBody>(&text).map(|b| b.error).unwrap_or(text);
        Err(ClientError::Api {
            status: status.as_u16(),
            message,
        })
    }

    async fn post<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: &B) -> Result<R> {
        let resp = self.request(reqwest::Method::POST, path).json(body).send().await?;
        Self::decode(resp).await
    }

    async fn get<R: DeserializeOwned>(&self, path: &str) -> Result<R> {
        let resp = self.request(reqwest::Method::GET, path).send().await?;
        Self::decode(resp).await
    }

    pub async fn health(&self) -> Result<serde_json::Value> {
        self.get("/v1/health").await
    }

    pub async fn run(&self, req: &RunRequest) -> Result<SuiteOutcome> {
        self.post("/v1/suite/run", req).await
    }

    pub async fn sweep(&self, req: &SweepRequest) -> Result<SweepReport> {
        self.post("/v1/suite/sweep", req).await
    }

    pub async fn propose(&self, req: &ProposeRequest) -> Result<ProposeResponse> {
        self.post("/v1/gen/propose", req).await
    }

    pub async fn instantiate(&self, req: &InstantiateRequest) -> Result<InstantiateResponse> {
        self.post("/v1/gen/instantiate", req).await
    }

    pub async fn screen(&self, req: &ScreenRequest) -> Result<ScreenResponse> {
        self.post("/v1/gen/screen", req).await
    }

    pub async fn export(&self, req: &ExportRequest) -> Result<BatchIndex> {
        self.post("/v1/gen/export", req).await
    }

    pub async fn convert(&self, req: &ConvertRequest) -> Result<ConversionReport> {
        self.post("/v1/convert", req).await
    }

    pub async fn stats(&self, req: &StatsRequest) -> Result<StatsResponse> {
        self.post("/v1/stats", req).await
    }

    pub async fn report(&self, req: &ReportRequest) -> Result<ReportResponse> {
        self.post("/v1/report", req).await
    }

    pub async fn replay(&self, req: &ReplayRequest) -> Result<ReplayResponse> {
        self.post("/v1/replay", req).await
    }

    pub async fn compare_human(&self, req: &CompareHumanRequest) -> Result<HumanComparison> {
        self.post("/v1/compare-human", req).await
    }

    pub async fn create_session(&self, req: &SessionRequest) -> Result<SessionInfo> {
        self.post("/v1/bridge/sessions", req).await
    }

    pub async fn demos(&self, session: &str) -> Result<Vec<DemonstrationLog>> {
        self.get(&format!("/v1/bridge/sessions/{session}/demos")).await
    }

    /// Opens the live socket of a bridge session.
    pub async fn connect(&self, info: &SessionInfo) -> Result<BridgeConnection> {
        let base = self
            .base
            .replacen("https://", "wss://", 1)
            .replacen("http://", "ws://", 1);
        let mut url = format!("{base}{}", info.ws_path);
        if let Some(t) = &self.token {
            url.push_str(&format!("?{TOKEN_QUERY}={t}"));
        }
        let (ws, _) = tokio_tungstenite::connect_async(url).await?;
        Ok(BridgeConnection { ws, pending: Vec::new() })
    }
}

type WsStream = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

/// One end of the bridge wire protocol.
pub struct BridgeConnection {
    ws: WsStream,
    pending: Vec<ServerFrame>,
}

impl BridgeConnection {
    pub async fn send(&mut self, frame: &ClientFrame) -> Result<()> {
        self.ws.send(Message::text(frame.to_line())).await?;
        Ok(())
    }

    /// Sends raw text, for exercising the server's handling of bad input.
    pub async fn send_raw(&mut self, text: &str) -> Result<()> {
        self.ws.send(Message::text(text.to_string())).await?;
        Ok(())
    }

    /// Next server frame; `None` once the socket closes.
    pub async fn next_frame(&mut self) -> Result<Option<ServerFrame>> {
        loop {
            if !self.pending.is_empty() {
                return Ok(Some(self.pending.remove(0)));
            }
            let Some(msg) = self.ws.next().await else {
                return Ok(None);
            };
            match msg? {
                Message::Text(t) => {
                    for line in t.lines().filter(|l| !l.trim().is_empty()) {
                        self.pending.push(serde_json::from_str(line)?);
                    }
                }
                Message::Close(_) => return Ok(None),
                _ => {}
            }
        }
    }

    /// Skips frames until `pred` holds.
    pub async fn wait_for(&mut self, mut pred: impl FnMut(&ServerFrame) -> bool) -> Result<Option<ServerFrame>> {
        while let Some(f) = self.next_frame().await? {
            if pred(&f) {
                return Ok(Some(f));
            }
        }
        Ok(None)
    }

    pub async fn close(mut self) -> Result<()> {
        self.ws.close(None).await?;
        Ok(())
    }
}

fn blocking_client() -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(60))
        .build()
        .expect("http client")
}

/// Sends each observation as JSON and expects a planned trajectory back.
pub struct HttpTransport {
    url: String,
    http: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            http: blocking_client(),
        }
    }
}

impl Transport for HttpTransport {
    fn call(&mut self, obs: &Observation) -> std::result::Result<PlannedTrajectory, String> {
        let resp = self.http.post(&self.url).json(obs).send().map_err(|e| e.to_string())?;
        if !resp.status().is_success() {
            return Err(format!("{} returned {}", self.url, resp.status()));
        }
        resp.json().map_err(|e| e.to_string())
    }
}

/// External schema proposer over HTTP; the bearer token comes from
/// [`PROPOSER_TOKEN_ENV`].
pub struct HttpSchemaProposer {
    url: String,
    token: Option<String>,
    http: reqwest::blocking::Client,
}

impl HttpSchemaProposer {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            token: std::env::var(PROPOSER_TOKEN_ENV).ok().filter(|t| !t.is_empty()),
            http: blocking_client(),
        }
    }
}

impl SchemaProposer for HttpSchemaProposer {
    fn propose(&mut self, req: &ProposalRequest) -> std::result::Result<String, String> {
        let mut r = self.http.post(&self.url).json(req);
        if let Some(t) = &self.token {
            r = r.bearer_auth(t);
        }
        let resp = r.send().map_err(|e| format!("{} unreachable: {e}", self.url))?;
        let status = resp.status();
        let body = resp.text().map_err(|e| e.to_string())?;
        if !status.is_success() {
            return Err(format!("{} returned {status}: {body}", self.url));
        }
        Ok(body)
    }
}
