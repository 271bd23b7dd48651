//! Line-oriented episode trace: a header, then per-tick `T` state/command records
//! and `E` event records. Floats use the shortest round-trip representation.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub tick: u64,
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub v: f64,
    pub throttle: f64,
    pub brake: f64,
    pub steer: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub tick: u64,
    pub kind: String,
    pub details: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub scenario_id: String,
    pub seed: u64,
    pub cfg_digest: String,
    pub records: Vec<TraceRecord>,
    pub events: Vec<TraceEvent>,
}

#[derive(Debug, thiserror::Error)]
#[error("trace line {line}: {message}")]
pub struct TraceParseError {
    pub line: usize,
    pub message: String,
}

const MAGIC: &str = "# coopbench-trace v1";

impl EpisodeTrace {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MAGIC}");
        let _ = writeln!(s, "scenario {}", self.scenario_id);
        let _ = writeln!(s, "seed {}", self.seed);
        let _ = writeln!(s, "cfg {}", self.cfg_digest);
        let (mut i, mut j) = (0, 0);
        // records of a tick come before that tick's events
        while i < self.records.len() || j < self.events.len() {
            let take_record = match (self.records.get(i), self.events.get(j)) {
                (Some(r), Some(e)) => r.tick <= e.tick,
                (Some(_), None) => true,
                _ => false,
            };
            if take_record {
                let r = &self.records[i];
                let _ = writeln!(
                    s,
                    "T {} {} {:?} {:?} {:?} {:?} {:?} {:?} {:?}",
                    r.tick, r.id, r.x, r.y, r.yaw, r.v, r.throttle, r.brake, r.steer
                );
                i += 1;
            } else {
                let e = &self.events[j];
                let _ = writeln!(s, "E {} {} {}", e.tick, e.kind, e.details);
                j += 1;
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, TraceParseError> {
        let err = |line: usize, m: &str| TraceParseError {
            line: line + 1,
            message: m.to_string(),
        };
        let mut t = EpisodeTrace::default();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() || line == MAGIC {
                continue;
            }
            let (tag, rest) = line.split_once(' ').ok_or_else(|| err(n, "missing fields"))?;
            match tag {
                "scenario" => t.scenario_id = rest.to_string(),
                "seed" => t.seed = rest.parse().map_err(|_| err(n, "bad seed"))?,
                "cfg" => t.cfg_digest = rest.to_string(),
                "T" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 9 {
                        return Err(err(n, "state record needs 9 fields"));
                    }
                    let num = |k: usize| f[k].parse::<f64>().map_err(|_| err(n, "bad number"));
                    t.records.push(TraceRecord {
                        tick: f[0].parse().map_err(|_| err(n, "bad tick"))?,
                        id: f[1].to_string(),
                        x: num(2)?,
                        y: num(3)?,
                        yaw: num(4)?,
                        v: num(5)?,
                        throttle: num(6)?,
                        brake: num(7)?,
                        steer: num(8)?,
                    });
                }
                "E" => {
                    let mut f = rest.splitn(3, ' ');
                    let tick = f.next().and_then(|x| x.parse().ok()).ok_or_else(|| err(n, "bad tick"))?;
                    let kind = f.next().ok_or_else(|| err(n, "missing kind"))?.to_string();
                    let details = f.next().unwrap_or("").to_string();
                    t.events.push(TraceEvent { tick, kind, details });
                }
                _ => return Err(err(n, "unknown record tag")),
            }
        }
        Ok(t)
    }

    pub fn records_for<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a TraceRecord> + 'a {
        self.records.iter().filter(move |r| r.id == id)
    }

    /// First tick at which `id` commanded a positive brake.
    pub fn first_brake_tick(&self, id: &str) -> Option<u64> {
        self.records_for(id).find(|r| r.brake > 0.0).map(|r| r.tick)
    }

    pub fn events_of<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a TraceEvent> + 'a {
        self.events.iter().filter(move |e| e.kind == kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip_is_exact() {
        let t = EpisodeTrace {
            scenario_id: "s1".into(),
            seed: 42,
            cfg_digest: "abc".into(),
            records: vec![
                TraceRecord { tick: 0, id: "cav1".into(), x: 0.1, y: -2.0e-7, yaw: std::f64::consts::PI, v: 8.0, throttle: 0.75, brake: 0.0, steer: -0.333 },
                TraceRecord { tick: 1, id: "cav1".into(), x: 1.0 / 3.0, y: 0.0, yaw: 0.0, v: 7.9, throttle: 0.0, brake: 1.0, steer: 0.0 },
            ],
            events: vec![TraceEvent { tick: 0, kind: "collision_vehicle".into(), details: "cav1 car2".into() }],
        };
        let text = t.to_text();
        assert_eq!(EpisodeTrace::parse(&text).unwrap(), t);
        assert_eq!(t.first_brake_tick("cav1"), Some(1));
    }
}
