use super::{EpisodeResult, MetricsError, OpenLoopMetrics};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// 2·DS·SR/(DS+SR), and 0 when both are 0.
pub fn harmonic_mean_ds_sr(ds: f64, sr: f64) -> f64 {
    if ds + sr == 0.0 {
        0.0
    } else {
        2.0 * ds * sr / (ds + sr)
    }
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    sxy / (sxx * syy).sqrt()
}

/// Ranks starting at 1; ties share their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = r;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

/// One policy's open-loop and closed-loop summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyPoint {
    pub policy: String,
    pub ap50: f64,
    pub ade: f64,
    pub cr_pct: f64,
    pub ds: f64,
    pub sr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub open_metric: String,
    pub closed_metric: String,
    pub pearson: f64,
    pub spearman: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub rows: Vec<CorrelationRow>,
    /// Per-policy points, sorted by descending DS.
    pub table: Vec<PolicyPoint>,
}

impl CorrelationReport {
    /// One row per policy, for plotting open-loop against closed-loop metrics.
    pub fn scatter_csv(&self) -> String {
        let mut s = String::from("policy,ap50,ade,cr_pct,ds,sr\n");
        for p in &self.table {
            let _ = writeln!(s, "{},{},{},{},{},{}", p.policy, p.ap50, p.ade, p.cr_pct, p.ds, p.sr);
        }
        s
    }
}

pub fn correlation_report(points: &[PolicyPoint]) -> Result<CorrelationReport, MetricsError> {
    if points.len() < 3 {
        return Err(MetricsError::InsufficientData(format!(
            "{} policies, need at least 3",
            points.len()
        )));
    }
    let open: [(&str, fn(&PolicyPoint) -> f64); 3] = [("ap50", |p| p.ap50), ("ade", |p| p.ade), ("cr", |p| p.cr_pct)];
    let closed: [(&str, fn(&PolicyPoint) -> f64); 2] = [("ds", |p| p.ds), ("sr", |p| p.sr)];
    let mut rows = Vec::new();
    for (on, of) in open {
        for (cn, cf) in closed {
            let x: Vec<f64> = points.iter().map(of).collect();
            let y: Vec<f64> = points.iter().map(cf).collect();
            rows.push(CorrelationRow {
                open_metric: on.into(),
                closed_metric: cn.into(),
                pearson: pearson(&x, &y),
                spearman: spearman(&x, &y),
            });
        }
    }
    let mut table = points.to_vec();
    table.sort_by(|a, b| b.ds.total_cmp(&a.ds).then(a.policy.cmp(&b.policy)));
    Ok(CorrelationReport { rows, table })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupStats {
    pub episodes: usize,
    pub ds: f64,
    /// Percent.
    pub sr: f64,
    pub rc: f64,
    pub ip: f64,
}

impl GroupStats {
    pub fn of(results: &[&EpisodeResult]) -> Self {
        let n = results.len();
        if n == 0 {
            return Self::default();
        }
        let m = |f: &dyn Fn(&EpisodeResult) -> f64| results.iter().map(|r| f(r)).sum::<f64>() / n as f64;
        Self {
            episodes: n,
            ds: m(&|r| r.ds),
            sr: m(&|r| if r.success { 100.0 } else { 0.0 }),
            rc: m(&|r| r.rc_pct),
            ip: m(&|r| r.ip),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CategoryStats {
    pub episodes: usize,
    pub ds: f64,
    pub sr: f64,
    pub harmonic: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub per_bucket: BTreeMap<String, BTreeMap<String, GroupStats>>,
    pub per_category: BTreeMap<String, BTreeMap<String, CategoryStats>>,
    pub overall: BTreeMap<String, GroupStats>,
    pub open_loop: BTreeMap<String, OpenLoopMetrics>,
    pub correlation: Option<CorrelationReport>,
}

impl BenchmarkReport {
    /// Aggregates per-episode results; input order does not matter.
    pub fn build(results: &[EpisodeResult], open_loop: &BTreeMap<String, OpenLoopMetrics>) -> Self {
        let mut sorted: Vec<&EpisodeResult> = results.iter().collect();
        sorted.sort_by(|a, b| {
            (&a.policy, &a.scenario_id, &a.cav_id, a.seed).cmp(&(&b.policy, &b.scenario_id, &b.cav_id, b.seed))
        });
        let mut by_policy: BTreeMap<String, Vec<&EpisodeResult>> = BTreeMap::new();
        for r in &sorted {
            by_policy.entry(r.policy.clone()).or_default().push(r);
        }
        let mut report = BenchmarkReport {
            open_loop: open_loop.clone(),
            ..Default::default()
        };
        for (policy, rs) in &by_policy {
            let mut buckets: BTreeMap<String, Vec<&EpisodeResult>> = BTreeMap::new();
            let mut cats: BTreeMap<String, Vec<&EpisodeResult>> = BTreeMap::new();
            for r in rs {
                buckets.entry(r.bucket.to_string()).or_default().push(r);
                cats.entry(r.category.to_string()).or_default().push(r);
            }
            report.per_bucket.insert(
                policy.clone(),
                buckets.iter().map(|(k, v)| (k.clone(), GroupStats::of(v))).collect(),
            );
            report.per_category.insert(
                policy.clone(),
                cats.iter()
                    .map(|(k, v)| {
                        let g = GroupStats::of(v);
                        (
                            k.clone(),
                            CategoryStats {
                                episodes: g.episodes,
                                ds: g.ds,
                                sr: g.sr,
                                harmonic: harmonic_mean_ds_sr(g.ds, g.sr),
                            },
                        )
                    })
                    .collect(),
            );
            report.overall.insert(policy.clone(), GroupStats::of(rs));
        }
        let points: Vec<PolicyPoint> = report
            .overall
            .iter()
            .filter_map(|(p, g)| {
                open_loop.get(p).map(|ol| PolicyPoint {
                    policy: p.clone(),
                    ap50: ol.ap50,
                    ade: ol.ade,
                    cr_pct: ol.cr_pct,
                    ds: g.ds,
                    sr: g.sr,
                })
            })
            .collect();
        report.correlation = correlation_report(&points).ok();
        report
    }

    /// Plain-text tables: per bucket, per category, open loop and correlations.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# Closed loop by bucket");
        let _ = writeln!(s, "{:<20} {:<12} {:>6} {:>8} {:>8} {:>8} {:>6}", "policy", "bucket", "n", "DS", "RC", "SR", "IP");
        for (p, m) in &self.per_bucket {
            for (b, g) in m {
                let _ = writeln!(s, "{:<20} {:<12} {:>6} {:>8.2} {:>8.2} {:>8.2} {:>6.3}", p, b, g.episodes, g.ds, g.rc, g.sr, g.ip);
            }
        }
        for (p, g) in &self.overall {
            let _ = writeln!(s, "{:<20} {:<12} {:>6} {:>8.2} {:>8.2} {:>8.2} {:>6.3}", p, "all", g.episodes, g.ds, g.rc, g.sr, g.ip);
        }
        let _ = writeln!(s, "\n# Harmonic mean of DS and SR by category");
        let _ = writeln!(s, "{:<20} {:<34} {:>6} {:>8} {:>8} {:>8}", "policy", "category", "n", "DS", "SR", "HM");
        for (p, m) in &self.per_category {
            for (c, g) in m {
                let _ = writeln!(s, "{:<20} {:<34} {:>6} {:>8.2} {:>8.2} {:>8.2}", p, c, g.episodes, g.ds, g.sr, g.harmonic);
            }
        }
        if !self.open_loop.is_empty() {
            let _ = writeln!(s, "\n# Open loop");
            let _ = writeln!(s, "{:<20} {:>8} {:>8} {:>8} {:>8}", "policy", "AP50", "ADE", "CR%", "samples");
            for (p, o) in &self.open_loop {
                let _ = writeln!(s, "{:<20} {:>8.4} {:>8.3} {:>8.2} {:>8}", p, o.ap50, o.ade, o.cr_pct, o.samples);
            }
        }
        if let Some(c) = &self.correlation {
            let _ = writeln!(s, "\n# Open-loop vs closed-loop correlation");
            for r in &c.rows {
                let _ = writeln!(s, "{:<6} vs {:<3} pearson {:>8.4} spearman {:>8.4}", r.open_metric, r.closed_metric, r.pearson, r.spearman);
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_examples() {
        assert_eq!(harmonic_mean_ds_sr(100.0, 100.0), 100.0);
        assert_eq!(harmonic_mean_ds_sr(100.0, 0.0), 0.0);
        assert_eq!(harmonic_mean_ds_sr(0.0, 0.0), 0.0);
        assert!((harmonic_mean_ds_sr(80.0, 40.0) - 53.333333333333336).abs() < 1e-9);
    }

    #[test]
    fn linear_pairs_are_perfectly_correlated() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v - 2.0).collect();
        assert!((pearson(&x, &y) - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &y) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reversed_outlier_lowers_spearman() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [1.0, 2.0, 3.0, 4.0, -10.0];
        assert!(spearman(&x, &y) < 1.0);
    }

    #[test]
    fn ties_share_average_rank() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn too_few_policies() {
        let p = PolicyPoint {
            policy: "a".into(),
            ap50: 0.0,
            ade: 0.0,
            cr_pct: 0.0,
            ds: 0.0,
            sr: 0.0,
        };
        assert!(matches!(correlation_report(&[p.clone(), p]), Err(MetricsError::InsufficientData(_))));
    }
}
