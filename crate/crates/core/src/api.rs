//! Request and response bodies of the HTTP service. Paths are resolved on the
//! server side, so clients should send absolute ones.

use crate::agents::PolicyKind;
use crate::bench::{BuiltinSuite, SuiteConfig, SweepGrid};
use crate::gen::{DifficultyBand, ScenarioSchema, ScreenResult};
use crate::metrics::{BenchmarkReport, EpisodeResult};
use crate::scenario::{ActorClass, Bucket, Category, ScenarioStats, SuiteStats};
use crate::sim::EpisodeConfig;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::PathBuf;

/// Header and query parameter carrying the session token.
pub const TOKEN_HEADER: &str = "x-coopbench-token";
pub const TOKEN_QUERY: &str = "token";
/// Environment variable holding the bearer token for external schema proposers.
pub const PROPOSER_TOKEN_ENV: &str = "COOPBENCH_PROPOSER_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRequest {
    pub config: SuiteConfig,
    #[serde(default)]
    pub stop_after: Option<usize>,
    #[serde(default)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRequest {
    pub config: SuiteConfig,
    /// Falls back to the config's own grid.
    #[serde(default)]
    pub grid: Option<SweepGrid>,
    #[serde(default)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposeRequest {
    pub category: Category,
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
    /// External proposer URL; the built-in templates are used when absent.
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub examples: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposeResponse {
    pub schemas: Vec<ScenarioSchema>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstantiateRequest {
    pub schemas: Vec<ScenarioSchema>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instantiated {
    pub index: usize,
    pub id: String,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaFailure {
    pub index: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstantiateResponse {
    pub written: Vec<Instantiated>,
    pub failed: Vec<SchemaFailure>,
}

fn default_band() -> DifficultyBand {
    DifficultyBand::new(0.5, 4.0).expect("valid band")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenRequest {
    /// Directory holding candidate scenario directories.
    pub pool: PathBuf,
    #[serde(default = "default_band")]
    pub band: DifficultyBand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenEntry {
    pub id: String,
    pub fingerprint: String,
    pub result: ScreenResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenResponse {
    pub pool_size: usize,
    /// Candidates removed as near-duplicates.
    pub duplicates: Vec<String>,
    pub entries: Vec<ScreenEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRequest {
    pub pool: PathBuf,
    #[serde(default = "default_band")]
    pub band: DifficultyBand,
    /// Review annotations text, `<id> accept|reject` per line.
    #[serde(default)]
    pub review: Option<String>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvertRequest {
    pub log: PathBuf,
    /// Extra `*.lanes` files to add to the built-in map library.
    #[serde(default)]
    pub maps: Option<PathBuf>,
    #[serde(default)]
    pub reactive: BTreeSet<ActorClass>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRequest {
    #[serde(default)]
    pub roots: Vec<PathBuf>,
    #[serde(default)]
    pub builtin: Vec<BuiltinSuite>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioStatsRow {
    pub id: String,
    pub bucket: Bucket,
    pub category: Category,
    pub stats: ScenarioStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsResponse {
    pub scenarios: Vec<ScenarioStatsRow>,
    pub groups: Vec<SuiteStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRequest {
    /// Suite output directory holding `episodes/`.
    pub results: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportResponse {
    pub report: BenchmarkReport,
    pub text: String,
    /// Present when at least three policies carry open-loop metrics.
    pub scatter_csv: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRequest {
    pub demo: PathBuf,
    /// Scenario directory; built-in scenarios are found by id when absent.
    #[serde(default)]
    pub scenario: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayResponse {
    pub result: EpisodeResult,
    pub trace_digest: String,
    /// Result and trace digest both match the recording.
    pub identical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareHumanRequest {
    pub demos: Vec<PathBuf>,
    pub results: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioRef {
    Dir(PathBuf),
    Builtin(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRequest {
    pub scenario: ScenarioRef,
    /// The human-controllable CAV.
    pub cav: String,
    pub policy: PolicyKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub episode: EpisodeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: String,
    pub scenario_id: String,
    pub cav: String,
    /// WebSocket path relative to the server root.
    pub ws_path: String,
}
