use super::{run_suite, write_atomic, BenchError, RunOptions, SuiteConfig};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

fn zero_latency() -> Vec<u64> {
    vec![0]
}

fn zero_noise() -> Vec<[f64; 2]> {
    vec![[0.0, 0.0]]
}

/// Perturbation grid: every latency is combined with every noise pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default = "zero_latency")]
    pub latency_ticks: Vec<u64>,
    /// `[position sigma m, rotation sigma deg]` pairs.
    #[serde(default = "zero_noise")]
    pub noise: Vec<[f64; 2]>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            latency_ticks: zero_latency(),
            noise: zero_noise(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub latency_ticks: u64,
    pub pos_noise_sigma_m: f64,
    pub rot_noise_sigma_deg: f64,
}

impl SweepPoint {
    pub fn is_clean(&self) -> bool {
        self.latency_ticks == 0 && self.pos_noise_sigma_m == 0.0 && self.rot_noise_sigma_deg == 0.0
    }

    pub fn label(&self) -> String {
        format!(
            "lat{}_pos{}_rot{}",
            self.latency_ticks, self.pos_noise_sigma_m, self.rot_noise_sigma_deg
        )
    }
}

impl SweepGrid {
    pub fn points(&self) -> Vec<SweepPoint> {
        let mut out = Vec::new();
        for &l in &self.latency_ticks {
            for n in &self.noise {
                out.push(SweepPoint {
                    latency_ticks: l,
                    pos_noise_sigma_m: n[0],
                    rot_noise_sigma_deg: n[1],
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub policy: String,
    pub point: SweepPoint,
    pub episodes: usize,
    pub ds: f64,
    pub rc: f64,
    /// Mean infraction score.
    pub is: f64,
    pub sr: f64,
    pub d_ds: f64,
    pub d_rc: f64,
    pub d_is: f64,
    pub d_sr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn row(&self, policy: &str, point: &SweepPoint) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.policy == policy && r.point == *point)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<20} {:>4} {:>6} {:>6} {:>8} {:>8} {:>8} {:>8} {:>7} {:>7} {:>8} {:>8}",
            "policy", "lat", "pos_m", "rot_deg", "DS", "dDS", "RC", "dRC", "IS", "dIS", "SR", "dSR"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<20} {:>4} {:>6} {:>6} {:>8.2} {:>+8.2} {:>8.2} {:>+8.2} {:>7.3} {:>+7.3} {:>8.2} {:>+8.2}",
                r.policy,
                r.point.latency_ticks,
                r.point.pos_noise_sigma_m,
                r.point.rot_noise_sigma_deg,
                r.ds,
                r.d_ds,
                r.rc,
                r.d_rc,
                r.is,
                r.d_is,
                r.sr,
                r.d_sr
            );
        }
        s
    }
}

/// Runs the suite once per grid point (each in `out/<point label>/`) and
/// reports every point against the clean baseline of the same policy.
pub fn run_sweep(cfg: &SuiteConfig, grid: &SweepGrid, opts: &RunOptions) -> Result<SweepReport, BenchError> {
    let points = grid.points();
    let clean = points
        .iter()
        .copied()
        .find(SweepPoint::is_clean)
        .ok_or(BenchError::NoCleanPoint)?;
    let mut per_point = Vec::new();
    for p in &points {
        let mut c = cfg.clone();
        c.episode.channel.latency_ticks = p.latency_ticks;
        c.episode.channel.pos_noise_sigma_m = p.pos_noise_sigma_m;
        c.episode.channel.rot_noise_sigma_deg = p.rot_noise_sigma_deg;
        c.out = cfg.out.join(p.label());
        let outcome = run_suite(&c, opts)?;
        let report = outcome
            .report
            .ok_or_else(|| BenchError::Config("sweep point left incomplete".into()))?;
        per_point.push((*p, report));
    }
    let base = &per_point.iter().find(|(p, _)| *p == clean).expect("clean point ran").1;
    let mut rows = Vec::new();
    for (p, report) in &per_point {
        for (policy, g) in &report.overall {
            let b = base.overall.get(policy).copied().unwrap_or_default();
            rows.push(SweepRow {
                policy: policy.clone(),
                point: *p,
                episodes: g.episodes,
                ds: g.ds,
                rc: g.rc,
                is: g.ip,
                sr: g.sr,
                d_ds: g.ds - b.ds,
                d_rc: g.rc - b.rc,
                d_is: g.ip - b.ip,
                d_sr: g.sr - b.sr,
            });
        }
    }
    rows.sort_by(|a, b| {
        a.policy
            .cmp(&b.policy)
            .then(a.point.latency_ticks.cmp(&b.point.latency_ticks))
            .then(a.point.pos_noise_sigma_m.total_cmp(&b.point.pos_noise_sigma_m))
            .then(a.point.rot_noise_sigma_deg.total_cmp(&b.point.rot_noise_sigma_deg))
    });
    let report = SweepReport { rows };
    write_atomic(&cfg.out.join("sweep.txt"), report.render().as_bytes())?;
    let json = serde_json::to_string_pretty(&report).expect("sweep serializes") + "\n";
    write_atomic(&cfg.out.join("sweep.json"), json.as_bytes())?;
    Ok(report)
}
