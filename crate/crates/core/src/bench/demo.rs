use super::{io_err, write_atomic, BenchError};
use crate::metrics::EpisodeResult;
use crate::scenario::Scenario;
use crate::sim::{Bindings, ControlCommand, Episode, EpisodeConfig, EpisodeTrace, DT};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

/// Controlled CAV state before the step, the command it executed and whether
/// that command came from the operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemoTick {
    pub tick: u64,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub v: f64,
    pub command: ControlCommand,
    pub takeover: bool,
}

/// Per-tick record of one session from tick 0; `recorded_from` marks where the
/// operator started recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemonstrationLog {
    pub scenario_id: String,
    pub cav_id: String,
    pub seed: u64,
    pub bindings: Bindings,
    pub config: EpisodeConfig,
    pub recorded_from: u64,
    pub ticks: Vec<DemoTick>,
    pub outcome: EpisodeResult,
    /// SHA-256 of the text trace at the end of the log.
    pub trace_digest: String,
}

pub fn trace_digest(t: &EpisodeTrace) -> String {
    hex::encode(Sha256::digest(t.to_text().as_bytes()))
}

impl DemonstrationLog {
    pub fn check(&self) -> Result<(), BenchError> {
        for (i, t) in self.ticks.iter().enumerate() {
            if t.tick != i as u64 {
                return Err(BenchError::Demo(format!("tick {} at position {i}; ticks must be contiguous from 0", t.tick)));
            }
        }
        if self.recorded_from > self.ticks.len() as u64 {
            return Err(BenchError::Demo("recorded_from lies past the last tick".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), BenchError> {
        let json = serde_json::to_vec_pretty(self).expect("demo serializes");
        write_atomic(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let log: Self = serde_json::from_str(&text).map_err(|e| BenchError::Demo(format!("{}: {e}", path.display())))?;
        log.check()?;
        Ok(log)
    }
}

/// Re-executes a demonstration, feeding the logged operator commands verbatim.
/// Returns the controlled CAV's result and the trace.
pub fn replay_demo(log: &DemonstrationLog, scenario: &Scenario) -> Result<(EpisodeResult, EpisodeTrace), BenchError> {
    log.check()?;
    if scenario.id != log.scenario_id {
        return Err(BenchError::Demo(format!(
            "log is for scenario {}, got {}",
            log.scenario_id, scenario.id
        )));
    }
    let mut ep = Episode::new(scenario, &log.bindings, &log.config, log.seed).map_err(|e| BenchError::Episode {
        scenario: scenario.id.clone(),
        message: e.to_string(),
    })?;
    for t in &log.ticks {
        if ep.is_done() {
            return Err(BenchError::Demo(format!("episode ended before logged tick {}", t.tick)));
        }
        ep.set_override(&log.cav_id, t.takeover.then_some(t.command));
        ep.step();
    }
    let result = ep
        .results()
        .into_iter()
        .find(|r| r.cav_id == log.cav_id)
        .ok_or_else(|| BenchError::Demo(format!("scenario has no CAV {}", log.cav_id)))?;
    Ok((result, ep.trace().clone()))
}

/// Replays `log` and checks the outcome and trace digest against the recording.
pub fn verify_demo(log: &DemonstrationLog, scenario: &Scenario) -> Result<bool, BenchError> {
    let (r, trace) = replay_demo(log, scenario)?;
    Ok(r == log.outcome && trace_digest(&trace) == log.trace_digest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    /// Scenario id, or `all` for the aggregate rows.
    pub scenario_id: String,
    /// `human` or a policy label.
    pub agent: String,
    pub episodes: usize,
    pub ds: f64,
    pub sr: f64,
    /// Mean completion time over completed episodes, s.
    pub completion_s: Option<f64>,
    /// Differences against the human row of the same scenario.
    pub d_ds: f64,
    pub d_sr: f64,
    pub d_completion_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanComparison {
    pub rows: Vec<ComparisonRow>,
}

impl HumanComparison {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<32} {:<20} {:>4} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "scenario", "agent", "n", "DS", "SR", "time_s", "dDS", "dSR", "dtime"
        );
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<32} {:<20} {:>4} {:>8.2} {:>8.2} {:>8} {:>+8.2} {:>+8.2} {:>8}",
                r.scenario_id,
                r.agent,
                r.episodes,
                r.ds,
                r.sr,
                opt(r.completion_s),
                r.d_ds,
                r.d_sr,
                opt(r.d_completion_s)
            );
        }
        s
    }
}

fn stats(rs: &[&EpisodeResult]) -> (f64, f64, Option<f64>) {
    let n = rs.len().max(1) as f64;
    let ds = rs.iter().map(|r| r.ds).sum::<f64>() / n;
    let sr = rs.iter().filter(|r| r.success).count() as f64 * 100.0 / n;
    let times: Vec<f64> = rs.iter().filter_map(|r| r.completion_tick).map(|t| t as f64 * DT).collect();
    let t = (!times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64);
    (ds, sr, t)
}

/// DS, SR and completion time of human demonstrations against each policy on
/// the scenarios and CAVs both cover.
pub fn compare_human(demos: &[DemonstrationLog], policy_results: &[EpisodeResult]) -> Result<HumanComparison, BenchError> {
    let mut human: BTreeMap<&str, Vec<&EpisodeResult>> = BTreeMap::new();
    let mut cav_of: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for d in demos {
        human.entry(d.scenario_id.as_str()).or_default().push(&d.outcome);
        cav_of.entry(d.scenario_id.as_str()).or_default().insert(d.cav_id.as_str());
    }
    let mut policy: BTreeMap<(&str, &str), Vec<&EpisodeResult>> = BTreeMap::new();
    for r in policy_results {
        let matches = cav_of.get(r.scenario_id.as_str()).is_some_and(|c| c.contains(r.cav_id.as_str()));
        if matches && r.policy != "human" {
            policy.entry((r.scenario_id.as_str(), r.policy.as_str())).or_default().push(r);
        }
    }
    if policy.is_empty() {
        return Err(BenchError::InsufficientData(
            "no policy result shares a scenario and CAV with the demonstrations".into(),
        ));
    }
    let covered: BTreeSet<&str> = policy.keys().map(|k| k.0).collect();
    let mut rows = Vec::new();
    let mut agg: BTreeMap<&str, Vec<&EpisodeResult>> = BTreeMap::new();
    for sid in &covered {
        let h = &human[sid];
        let (hds, hsr, ht) = stats(h);
        agg.entry("human").or_default().extend(h.iter().copied());
        rows.push(ComparisonRow {
            scenario_id: sid.to_string(),
            agent: "human".into(),
            episodes: h.len(),
            ds: hds,
            sr: hsr,
            completion_s: ht,
            d_ds: 0.0,
            d_sr: 0.0,
            d_completion_s: ht.map(|_| 0.0),
        });
        for ((_, p), rs) in policy.range((*sid, "")..).take_while(|(k, _)| k.0 == *sid) {
            let (ds, sr, t) = stats(rs);
            agg.entry(p).or_default().extend(rs.iter().copied());
            rows.push(ComparisonRow {
                scenario_id: sid.to_string(),
                agent: p.to_string(),
                episodes: rs.len(),
                ds,
                sr,
                completion_s: t,
                d_ds: ds - hds,
                d_sr: sr - hsr,
                d_completion_s: t.zip(ht).map(|(a, b)| a - b),
            });
        }
    }
    let (hds, hsr, ht) = stats(&agg["human"]);
    let mut agents: Vec<&str> = agg.keys().copied().filter(|a| *a != "human").collect();
    agents.insert(0, "human");
    for a in agents {
        let (ds, sr, t) = stats(&agg[a]);
        rows.push(ComparisonRow {
            scenario_id: "all".into(),
            agent: a.to_string(),
            episodes: agg[a].len(),
            ds,
            sr,
            completion_s: t,
            d_ds: ds - hds,
            d_sr: sr - hsr,
            d_completion_s: t.zip(ht).map(|(x, y)| x - y),
        });
    }
    Ok(HumanComparison { rows })
}
