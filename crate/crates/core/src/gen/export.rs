use super::{fingerprint, DifficultyBand, GenError, ScreenResult};
use crate::scenario::{serialize_scenario_dir, Scenario};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchEntry {
    pub id: String,
    pub fingerprint: String,
    pub min_ttc: Option<f64>,
    pub screen_accept: bool,
    /// Reviewer decision, when the annotation file names this scenario.
    pub review: Option<bool>,
    pub accept: bool,
    /// Directory name under the batch root, present for exported scenarios.
    pub dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchIndex {
    pub band: DifficultyBand,
    pub pool_size: usize,
    pub accepted: usize,
    pub entries: Vec<BatchEntry>,
}

/// Parses review annotations: one `<scenario id> accept|reject` per line,
/// `#` comments allowed.
pub fn parse_review(text: &str) -> Result<BTreeMap<String, bool>, String> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let verdict = match parts.as_slice() {
            [_, "accept"] => true,
            [_, "reject"] => false,
            _ => return Err(format!("line {}: expected `<id> accept|reject`, got {line:?}", n + 1)),
        };
        out.insert(parts[0].to_string(), verdict);
    }
    Ok(out)
}

/// Writes every accepted scenario as a directory under `out` plus
/// `index.json` listing all candidates. A review verdict overrides the
/// screen's decision.
pub fn export_batch(
    batch: &[(Scenario, ScreenResult)],
    band: &DifficultyBand,
    review: &BTreeMap<String, bool>,
    out: &Path,
) -> Result<BatchIndex, GenError> {
    fs::create_dir_all(out).map_err(|source| GenError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    let mut entries = Vec::with_capacity(batch.len());
    for (s, r) in batch {
        let verdict = review.get(&s.id).copied();
        let accept = verdict.unwrap_or(r.accept);
        let dir = if accept {
            serialize_scenario_dir(s, &out.join(&s.id))?;
            Some(s.id.clone())
        } else {
            None
        };
        entries.push(BatchEntry {
            id: s.id.clone(),
            fingerprint: fingerprint(s),
            min_ttc: r.min_ttc,
            screen_accept: r.accept,
            review: verdict,
            accept,
            dir,
        });
    }
    let index = BatchIndex {
        band: *band,
        pool_size: batch.len(),
        accepted: entries.iter().filter(|e| e.accept).count(),
        entries,
    };
    let path = out.join("index.json");
    let json = serde_json::to_string_pretty(&index).expect("index serialization");
    fs::write(&path, json + "\n").map_err(|source| GenError::Io { path, source })?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn review_lines() {
        let r = parse_review("# curated\na accept\nb reject  # too easy\n\n").unwrap();
        assert_eq!(r.get("a"), Some(&true));
        assert_eq!(r.get("b"), Some(&false));
        assert!(parse_review("a maybe\n").is_err());
    }
}
