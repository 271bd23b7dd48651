use super::{io_err, write_atomic, BenchError, ScenarioProblem};
use crate::agents::{ExternalPolicy, Policy, PolicyKind, Transport};
use crate::crafted;
use crate::metrics::{BenchmarkReport, CollisionRateMode, EpisodeResult, OpenLoopMetrics, OpenLoopSample};
use crate::scenario::{parse_scenario_dir, Bucket, Category, Scenario};
use crate::sim::{Bindings, Episode, EpisodeConfig};
use globset::{Glob, GlobSet, GlobSetBuilder};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

/// Scenario sets built into the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinSuite {
    StraightRoute,
    OccludedCrossing,
    JunctionConflict,
}

impl BuiltinSuite {
    pub const ALL: [BuiltinSuite; 3] = [Self::StraightRoute, Self::OccludedCrossing, Self::JunctionConflict];

    /// Built-in scenario with this id, from any suite.
    pub fn find(id: &str) -> Option<Scenario> {
        Self::ALL.iter().flat_map(|b| b.scenarios()).find(|s| s.id == id)
    }

    pub fn scenarios(self) -> Vec<Scenario> {
        match self {
            Self::StraightRoute => vec![crafted::straight_route(200.0, 8.0)],
            Self::OccludedCrossing => crafted::occluded_crossing_suite().into_iter().map(|c| c.scenario).collect(),
            Self::JunctionConflict => crafted::junction_conflict_suite().into_iter().map(|c| c.scenario).collect(),
        }
    }
}

/// Empty lists select everything.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Selector {
    pub buckets: Vec<Bucket>,
    pub categories: Vec<Category>,
    /// Glob patterns over scenario ids.
    pub ids: Vec<String>,
}

impl Selector {
    fn globs(&self) -> Result<Option<GlobSet>, BenchError> {
        if self.ids.is_empty() {
            return Ok(None);
        }
        let mut b = GlobSetBuilder::new();
        for p in &self.ids {
            b.add(Glob::new(p).map_err(|e| BenchError::Config(format!("select.ids: {e}")))?);
        }
        b.build().map(Some).map_err(|e| BenchError::Config(e.to_string()))
    }
}

fn default_workers() -> usize {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    /// Scenario directories, or folders holding scenario directories.
    #[serde(default)]
    pub scenario_dirs: Vec<PathBuf>,
    #[serde(default)]
    pub builtin: Vec<BuiltinSuite>,
    #[serde(default)]
    pub select: Selector,
    /// Each entry binds every CAV of a scenario to that policy.
    pub policies: Vec<PolicyKind>,
    /// Per-CAV bindings applied on top of each suite-wide policy.
    #[serde(default)]
    pub cav_policies: BTreeMap<String, PolicyKind>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub episode: EpisodeConfig,
    #[serde(default)]
    pub sweep: Option<super::SweepGrid>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Also write each episode's trace next to its result.
    #[serde(default)]
    pub save_traces: bool,
}

impl SuiteConfig {
    pub fn new(policies: Vec<PolicyKind>, seeds: Vec<u64>, out: impl Into<PathBuf>) -> Self {
        Self {
            scenario_dirs: Vec::new(),
            builtin: Vec::new(),
            select: Selector::default(),
            policies,
            cav_policies: BTreeMap::new(),
            seeds,
            episode: EpisodeConfig::default(),
            sweep: None,
            workers: 1,
            out: out.into(),
            save_traces: false,
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.seeds.is_empty() {
            return Err(BenchError::Config("seeds must not be empty".into()));
        }
        if self.policies.is_empty() {
            return Err(BenchError::Config("policies must not be empty".into()));
        }
        if self.workers == 0 {
            return Err(BenchError::Config("workers must be at least 1".into()));
        }
        if !self.episode.channel.is_valid() {
            return Err(BenchError::Config("channel noise sigmas must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Parses and validates every selected scenario; all problems are reported together.
    pub fn resolve_scenarios(&self) -> Result<Vec<Scenario>, BenchError> {
        let mut problems = Vec::new();
        let mut all = Vec::new();
        for root in &self.scenario_dirs {
            match discover_scenarios(root) {
                Ok(dirs) if dirs.is_empty() => problems.push(ScenarioProblem {
                    path: root.clone(),
                    message: "no scenario directories found".into(),
                }),
                Ok(dirs) => {
                    for d in dirs {
                        match parse_scenario_dir(&d) {
                            Ok(s) => all.push(s),
                            Err(e) => problems.push(ScenarioProblem {
                                path: d,
                                message: e.to_string(),
                            }),
                        }
                    }
                }
                Err(e) => problems.push(ScenarioProblem {
                    path: root.clone(),
                    message: e.to_string(),
                }),
            }
        }
        for b in &self.builtin {
            all.extend(b.scenarios());
        }
        if !problems.is_empty() {
            return Err(BenchError::Scenarios(problems));
        }
        let globs = self.select.globs()?;
        let sel = &self.select;
        all.retain(|s| {
            (sel.buckets.is_empty() || sel.buckets.contains(&s.bucket))
                && (sel.categories.is_empty() || sel.categories.contains(&s.category))
                && globs.as_ref().is_none_or(|g| g.is_match(&s.id))
        });
        all.sort_by(|a, b| a.id.cmp(&b.id));
        for w in all.windows(2) {
            if w[0].id == w[1].id {
                return Err(BenchError::Config(format!("scenario id {} selected twice", w[0].id)));
            }
        }
        if all.is_empty() {
            return Err(BenchError::Config("selectors resolve to no scenario".into()));
        }
        Ok(all)
    }

    fn bindings(&self, s: &Scenario, policy: &PolicyKind) -> Bindings {
        let mut b = Bindings::uniform(s, policy.clone());
        for (cav, k) in &self.cav_policies {
            if s.cav(cav).is_some() {
                b = b.with(cav, k.clone());
            }
        }
        b
    }
}

/// Reads a TOML suite config; relative scenario paths and `out` resolve against its folder.
pub fn load_suite_config(path: &Path) -> Result<SuiteConfig, BenchError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut cfg: SuiteConfig = toml::from_str(&text).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    for d in &mut cfg.scenario_dirs {
        if d.is_relative() {
            *d = base.join(&*d);
        }
    }
    if cfg.out.is_relative() {
        cfg.out = base.join(&cfg.out);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `root` itself when it holds a manifest, else every nested directory that does.
pub fn discover_scenarios(root: &Path) -> Result<Vec<PathBuf>, std::io::Error> {
    let mut out = Vec::new();
    fn walk(dir: &Path, out: &mut Vec<PathBuf>, depth: usize) -> Result<(), std::io::Error> {
        if dir.join("manifest").is_file() {
            out.push(dir.to_path_buf());
            return Ok(());
        }
        if depth == 0 {
            return Ok(());
        }
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n != "maps"))
            .collect();
        entries.sort();
        for e in entries {
            walk(&e, out, depth - 1)?;
        }
        Ok(())
    }
    if !root.is_dir() {
        return Err(std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"));
    }
    walk(root, &mut out, 4)?;
    Ok(out)
}

/// Content hash of a scenario; any change to geometry, actors or timing changes it.
pub fn scenario_digest(s: &Scenario) -> String {
    hex::encode(Sha256::digest(format!("{s:?}").as_bytes()))
}

/// Key of one (scenario, bindings, seed, config) combination.
pub fn episode_digest(s: &Scenario, bindings: &Bindings, cfg: &EpisodeConfig, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(scenario_digest(s).as_bytes());
    h.update(serde_json::to_string(bindings).expect("bindings serialize").as_bytes());
    h.update(cfg.digest().as_bytes());
    h.update(seed.to_le_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub digest: String,
    pub scenario_id: String,
    pub policy: String,
    pub seed: u64,
    pub results: Vec<EpisodeResult>,
    #[serde(default)]
    pub open_loop: Vec<OpenLoopSample>,
}

/// Builds the transport for an `external:<endpoint>` binding.
pub type TransportFactory = Arc<dyn Fn(&str) -> Box<dyn Transport> + Send + Sync>;

#[derive(Clone, Default)]
pub struct RunOptions {
    /// Stop after this many newly executed episodes, leaving the suite incomplete.
    pub stop_after: Option<usize>,
    pub workers: Option<usize>,
    /// Without one, external bindings fail to start.
    pub transports: Option<TransportFactory>,
}

impl std::fmt::Debug for RunOptions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunOptions")
            .field("stop_after", &self.stop_after)
            .field("workers", &self.workers)
            .field("transports", &self.transports.is_some())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteOutcome {
    pub total: usize,
    pub executed: usize,
    pub skipped: usize,
    pub complete: bool,
    pub report: Option<BenchmarkReport>,
}

struct Job {
    scenario: usize,
    bindings: Bindings,
    seed: u64,
    digest: String,
    policy: String,
}

fn record_path(out: &Path, digest: &str) -> PathBuf {
    out.join("episodes").join(format!("{digest}.json"))
}

fn load_record(path: &Path, digest: &str) -> Option<EpisodeRecord> {
    let text = fs::read_to_string(path).ok()?;
    let r: EpisodeRecord = serde_json::from_str(&text).ok()?;
    (r.digest == digest).then_some(r)
}

/// Runs every combination not already stored under `cfg.out`, then writes
/// `summary.txt` and `summary.json` once all combinations have results.
pub fn run_suite(cfg: &SuiteConfig, opts: &RunOptions) -> Result<SuiteOutcome, BenchError> {
    cfg.validate()?;
    let scenarios = cfg.resolve_scenarios()?;
    let mut jobs = Vec::new();
    for (si, s) in scenarios.iter().enumerate() {
        for p in &cfg.policies {
            let bindings = cfg.bindings(s, p);
            for &seed in &cfg.seeds {
                jobs.push(Job {
                    scenario: si,
                    digest: episode_digest(s, &bindings, &cfg.episode, seed),
                    policy: bindings.label(),
                    bindings: bindings.clone(),
                    seed,
                });
            }
        }
    }
    let pending: Vec<&Job> = jobs
        .iter()
        .filter(|j| load_record(&record_path(&cfg.out, &j.digest), &j.digest).is_none())
        .collect();
    let skipped = jobs.len() - pending.len();
    let budget = opts.stop_after.unwrap_or(usize::MAX);
    let started = AtomicUsize::new(0);
    let workers = opts.workers.unwrap_or(cfg.workers).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| BenchError::Config(e.to_string()))?;
    let outcomes: Vec<Result<bool, BenchError>> = pool.install(|| {
        pending
            .par_iter()
            .map(|job| {
                if started.fetch_add(1, Ordering::SeqCst) >= budget {
                    return Ok(false);
                }
                let s = &scenarios[job.scenario];
                let mut factory = |cav: &str, kind: &PolicyKind| match kind {
                    PolicyKind::External(endpoint) => opts
                        .transports
                        .as_ref()
                        .map(|t| Box::new(ExternalPolicy::new(kind.to_string(), t(endpoint))) as Box<dyn Policy>),
                    _ => kind.builtin(cav),
                };
                let out = Episode::with_factory(s, &job.bindings, &cfg.episode, job.seed, &mut factory)
                    .map(Episode::run)
                    .map_err(|e| BenchError::Episode {
                    scenario: s.id.clone(),
                    message: e.to_string(),
                })?;
                let rec = EpisodeRecord {
                    digest: job.digest.clone(),
                    scenario_id: s.id.clone(),
                    policy: job.policy.clone(),
                    seed: job.seed,
                    results: out.results,
                    open_loop: out.open_loop,
                };
                if cfg.save_traces {
                    let p = cfg.out.join("traces").join(format!("{}.trace", job.digest));
                    write_atomic(&p, out.trace.to_text().as_bytes())?;
                }
                let json = serde_json::to_vec_pretty(&rec).expect("record serializes");
                write_atomic(&record_path(&cfg.out, &job.digest), &json)?;
                Ok(true)
            })
            .collect()
    });
    let mut executed = 0;
    for o in outcomes {
        if o? {
            executed += 1;
        }
    }
    let complete = skipped + executed == jobs.len();
    let report = if complete {
        let mut records = Vec::with_capacity(jobs.len());
        for j in &jobs {
            let path = record_path(&cfg.out, &j.digest);
            records.push(load_record(&path, &j.digest).ok_or_else(|| BenchError::Io {
                path,
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, "unreadable episode record"),
            })?);
        }
        let report = summarize(&records);
        write_atomic(&cfg.out.join("summary.txt"), report.render().as_bytes())?;
        let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
        write_atomic(&cfg.out.join("summary.json"), json.as_bytes())?;
        Some(report)
    } else {
        None
    };
    Ok(SuiteOutcome {
        total: jobs.len(),
        executed,
        skipped,
        complete,
        report,
    })
}

/// Every stored episode record under `out`, in digest order.
pub fn load_records(out: &Path) -> Result<Vec<EpisodeRecord>, BenchError> {
    let dir = out.join("episodes");
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(io_err(&dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let text = fs::read_to_string(&p).map_err(io_err(&p))?;
        let r: EpisodeRecord = serde_json::from_str(&text).map_err(|e| BenchError::Io {
            path: p.clone(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })?;
        out.push(r);
    }
    Ok(out)
}

/// Recomputes the summary from whatever records are stored under `out`.
pub fn rebuild_report(out: &Path) -> Result<BenchmarkReport, BenchError> {
    let records = load_records(out)?;
    if records.is_empty() {
        return Err(BenchError::InsufficientData(format!("no episode records under {}", out.display())));
    }
    Ok(summarize(&records))
}

fn summarize(records: &[EpisodeRecord]) -> BenchmarkReport {
    let results: Vec<EpisodeResult> = records.iter().flat_map(|r| r.results.iter().cloned()).collect();
    let mut samples: BTreeMap<String, Vec<OpenLoopSample>> = BTreeMap::new();
    for r in records {
        if !r.open_loop.is_empty() {
            samples.entry(r.policy.clone()).or_default().extend(r.open_loop.iter().cloned());
        }
    }
    let open_loop: BTreeMap<String, OpenLoopMetrics> = samples
        .iter()
        .map(|(p, s)| (p.clone(), OpenLoopMetrics::from_samples(s, CollisionRateMode::default())))
        .collect();
    BenchmarkReport::build(&results, &open_loop)
}
