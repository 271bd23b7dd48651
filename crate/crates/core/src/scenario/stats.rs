use super::{Bucket, Category, Scenario};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioStats {
    pub cav_count: usize,
    pub mean_route_length_m: f64,
    pub mean_cumulative_heading_change_deg: f64,
    /// Background actors only; CAVs and infrastructure nodes are excluded.
    pub background_actor_count: usize,
    pub infrastructure_count: usize,
}

pub fn scenario_statistics(s: &Scenario) -> ScenarioStats {
    let n = s.cavs.len();
    let (len, hc) = s.cavs.iter().fold((0.0, 0.0), |(l, h), c| {
        (l + c.route.length(), h + c.route.cumulative_heading_change_deg())
    });
    let denom = n.max(1) as f64;
    ScenarioStats {
        cav_count: n,
        mean_route_length_m: len / denom,
        mean_cumulative_heading_change_deg: hc / denom,
        background_actor_count: s.background_actors.len(),
        infrastructure_count: s.infrastructure.len(),
    }
}

/// Per-group means in the layout of the scenario distribution tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteStats {
    pub group: String,
    pub count: usize,
    pub mean_cavs: f64,
    pub mean_route_length_m: f64,
    pub mean_heading_change_deg: f64,
    pub mean_actors: f64,
}

fn summarize(group: String, items: &[&Scenario]) -> SuiteStats {
    let n = items.len().max(1) as f64;
    let stats: Vec<ScenarioStats> = items.iter().map(|s| scenario_statistics(s)).collect();
    SuiteStats {
        group,
        count: items.len(),
        mean_cavs: stats.iter().map(|s| s.cav_count as f64).sum::<f64>() / n,
        mean_route_length_m: stats.iter().map(|s| s.mean_route_length_m).sum::<f64>() / n,
        mean_heading_change_deg: stats.iter().map(|s| s.mean_cumulative_heading_change_deg).sum::<f64>() / n,
        mean_actors: stats.iter().map(|s| s.background_actor_count as f64).sum::<f64>() / n,
    }
}

/// Statistics grouped by bucket, then by category, then overall.
pub fn suite_statistics(scenarios: &[Scenario]) -> Vec<SuiteStats> {
    let mut by_bucket: BTreeMap<Bucket, Vec<&Scenario>> = BTreeMap::new();
    let mut by_category: BTreeMap<Category, Vec<&Scenario>> = BTreeMap::new();
    for s in scenarios {
        by_bucket.entry(s.bucket).or_default().push(s);
        by_category.entry(s.category).or_default().push(s);
    }
    let mut out: Vec<SuiteStats> = by_bucket
        .into_iter()
        .map(|(b, v)| summarize(format!("bucket:{b}"), &v))
        .collect();
    out.extend(
        by_category
            .into_iter()
            .map(|(c, v)| summarize(format!("category:{c}"), &v)),
    );
    let all: Vec<&Scenario> = scenarios.iter().collect();
    out.push(summarize("all".into(), &all));
    out
}
