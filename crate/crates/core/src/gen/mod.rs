//! Scenario generation: schema proposal, instantiation on the map library,
//! duplicate filtering, constant-velocity difficulty screening and export.

mod export;
mod instantiate;
mod screen;

pub use export::{export_batch, parse_review, BatchEntry, BatchIndex};
pub use instantiate::{instantiate, instantiate_with};
pub use screen::{
    difficulty_screen, duplicate_filter, fingerprint, min_ttc, time_to_contact, DifficultyBand, ScreenResult,
};

use crate::rng::substream;
use crate::scenario::{Category, ScenarioError, Topology, Weather};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManeuverIntent {
    Straight,
    LeftTurn,
    RightTurn,
    Merge,
    LaneChange,
    Overtake,
    RoundaboutPass,
}

impl ManeuverIntent {
    pub fn fits(self, t: Topology) -> bool {
        use ManeuverIntent::*;
        match t {
            Topology::Intersection4way | Topology::TJunction => matches!(self, Straight | LeftTurn | RightTurn),
            Topology::Roundabout => self == RoundaboutPass,
            Topology::Straight2lane => matches!(self, Straight | Overtake),
            Topology::HighwayRamp => matches!(self, Straight | Merge | LaneChange),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Maneuver {
    pub cav: String,
    pub intent: ManeuverIntent,
}

/// Bound on `arrival(b) - arrival(a)` at the shared conflict area, s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingConstraint {
    pub a: String,
    pub b: String,
    pub min_offset_s: f64,
    pub max_offset_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleKind {
    /// Vehicle approaching from the opposite direction.
    Oncoming,
    /// Vehicle approaching from a perpendicular arm.
    Crossing,
    /// Slow vehicle ahead in the CAV's lane.
    Lead,
    Pedestrian,
    ParkedObstacle,
    WorkZone,
    /// Highway traffic near the merge area.
    Mainline,
    /// Vehicle already on the roundabout ring.
    Circulating,
}

impl RoleKind {
    pub fn fits(self, t: Topology) -> bool {
        use RoleKind::*;
        use Topology::*;
        match self {
            Oncoming => matches!(t, Intersection4way | TJunction | Straight2lane),
            Crossing => matches!(t, Intersection4way | TJunction),
            Lead => matches!(t, Straight2lane | HighwayRamp),
            Pedestrian => matches!(t, Intersection4way | TJunction | Straight2lane),
            ParkedObstacle => matches!(t, Intersection4way | TJunction | Straight2lane),
            WorkZone => t == Straight2lane,
            Mainline => t == HighwayRamp,
            Circulating => t == Roundabout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorRole {
    pub role: RoleKind,
    pub count: u32,
}

pub const MAX_ROLE_COUNT: u32 = 12;

fn default_weather() -> Weather {
    Weather::Default
}

/// Structured scenario description produced by a proposer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSchema {
    pub category: Category,
    pub topology: Topology,
    pub maneuvers: Vec<Maneuver>,
    #[serde(default)]
    pub constraints: Vec<TimingConstraint>,
    #[serde(default)]
    pub actor_roles: Vec<ActorRole>,
    #[serde(default = "default_weather")]
    pub weather: Weather,
    /// Seed for the concrete placement search.
    #[serde(default)]
    pub variant: u64,
}

impl ScenarioSchema {
    pub fn role_count(&self, r: RoleKind) -> u32 {
        self.actor_roles.iter().filter(|a| a.role == r).map(|a| a.count).sum()
    }

    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("schema serialization");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Field-level schema problem.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub field: String,
    pub message: String,
}

impl Diagnostic {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn join(d: &[Diagnostic]) -> String {
    d.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Error)]
pub enum GenError {
    #[error("proposal failed: {message}")]
    Proposal {
        message: String,
        /// Last response body, kept for audit.
        raw: String,
        diagnostics: Vec<Diagnostic>,
    },
    #[error("invalid schema: {}", join(.0))]
    InvalidSchema(Vec<Diagnostic>),
    #[error("no map region in the library matches topology {0}")]
    NoMatchingRegion(Topology),
    #[error("infeasible schema: {0}")]
    Infeasible(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

/// Checks schema invariants and topology compatibility.
pub fn validate_schema(s: &ScenarioSchema) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if s.maneuvers.is_empty() {
        out.push(Diagnostic::new("maneuvers", "at least one CAV maneuver is required"));
    }
    let mut ids = BTreeSet::new();
    for (i, m) in s.maneuvers.iter().enumerate() {
        if m.cav.trim().is_empty() {
            out.push(Diagnostic::new(format!("maneuvers[{i}].cav"), "empty CAV id"));
        } else if !ids.insert(m.cav.as_str()) {
            out.push(Diagnostic::new(format!("maneuvers[{i}].cav"), format!("duplicate CAV id {:?}", m.cav)));
        }
        if !m.intent.fits(s.topology) {
            out.push(Diagnostic::new(
                format!("maneuvers[{i}].intent"),
                format!("intent {:?} is not realizable on topology {}", m.intent, s.topology),
            ));
        }
    }
    for (i, c) in s.constraints.iter().enumerate() {
        if !ids.contains(c.a.as_str()) {
            out.push(Diagnostic::new(format!("constraints[{i}].a"), format!("undeclared CAV {:?}", c.a)));
        }
        if !ids.contains(c.b.as_str()) {
            out.push(Diagnostic::new(format!("constraints[{i}].b"), format!("undeclared CAV {:?}", c.b)));
        }
        if c.a == c.b {
            out.push(Diagnostic::new(format!("constraints[{i}]"), "constraint relates a CAV to itself"));
        }
        if !(c.min_offset_s.is_finite() && c.max_offset_s.is_finite() && c.min_offset_s <= c.max_offset_s) {
            out.push(Diagnostic::new(
                format!("constraints[{i}].min_offset_s"),
                "offsets must be finite with min <= max",
            ));
        }
    }
    for (i, r) in s.actor_roles.iter().enumerate() {
        if r.count > MAX_ROLE_COUNT {
            out.push(Diagnostic::new(
                format!("actor_roles[{i}].count"),
                format!("at most {MAX_ROLE_COUNT} actors per role"),
            ));
        }
        if !r.role.fits(s.topology) {
            out.push(Diagnostic::new(
                format!("actor_roles[{i}].role"),
                format!("role {:?} is not realizable on topology {}", r.role, s.topology),
            ));
        }
    }
    out
}

const REQUIRED: [&str; 3] = ["category", "topology", "maneuvers"];

/// Parses one schema object, reporting problems per field.
pub fn parse_schema_value(v: &serde_json::Value, prefix: &str) -> Result<ScenarioSchema, Vec<Diagnostic>> {
    let field = |f: &str| if prefix.is_empty() { f.to_string() } else { format!("{prefix}.{f}") };
    let Some(obj) = v.as_object() else {
        return Err(vec![Diagnostic::new(field("").trim_end_matches('.'), "expected a JSON object")]);
    };
    let mut diags = Vec::new();
    for key in REQUIRED {
        if !obj.contains_key(key) {
            diags.push(Diagnostic::new(field(key), "missing required field"));
        }
    }
    fn check<T: serde::de::DeserializeOwned>(v: Option<&serde_json::Value>, name: String, diags: &mut Vec<Diagnostic>) {
        if let Some(v) = v {
            if let Err(e) = serde_json::from_value::<T>(v.clone()) {
                diags.push(Diagnostic::new(name, e.to_string()));
            }
        }
    }
    check::<Category>(obj.get("category"), field("category"), &mut diags);
    check::<Topology>(obj.get("topology"), field("topology"), &mut diags);
    check::<Vec<Maneuver>>(obj.get("maneuvers"), field("maneuvers"), &mut diags);
    check::<Vec<TimingConstraint>>(obj.get("constraints"), field("constraints"), &mut diags);
    check::<Vec<ActorRole>>(obj.get("actor_roles"), field("actor_roles"), &mut diags);
    check::<Weather>(obj.get("weather"), field("weather"), &mut diags);
    check::<u64>(obj.get("variant"), field("variant"), &mut diags);
    if !diags.is_empty() {
        return Err(diags);
    }
    let schema: ScenarioSchema =
        serde_json::from_value(v.clone()).map_err(|e| vec![Diagnostic::new(field(""), e.to_string())])?;
    let problems = validate_schema(&schema);
    if problems.is_empty() {
        Ok(schema)
    } else {
        Err(problems
            .into_iter()
            .map(|d| Diagnostic::new(field(&d.field), d.message))
            .collect())
    }
}

/// Parses a proposer response: either `{"schemas": [...]}` or a bare array.
pub fn parse_schema_response(text: &str) -> Result<Vec<ScenarioSchema>, Vec<Diagnostic>> {
    let v: serde_json::Value =
        serde_json::from_str(text).map_err(|e| vec![Diagnostic::new("response", format!("malformed JSON: {e}"))])?;
    let (items, base) = match &v {
        serde_json::Value::Array(a) => (a.clone(), String::new()),
        serde_json::Value::Object(o) => match o.get("schemas") {
            Some(serde_json::Value::Array(a)) => (a.clone(), "schemas".to_string()),
            _ => (vec![v.clone()], String::new()),
        },
        _ => return Err(vec![Diagnostic::new("response", "expected an object or an array")]),
    };
    let mut out = Vec::new();
    let mut diags = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let prefix = if base.is_empty() && items.len() == 1 && !v.is_array() {
            String::new()
        } else if base.is_empty() {
            format!("[{i}]")
        } else {
            format!("{base}[{i}]")
        };
        match parse_schema_value(item, &prefix) {
            Ok(s) => out.push(s),
            Err(d) => diags.extend(d),
        }
    }
    if diags.is_empty() {
        Ok(out)
    } else {
        Err(diags)
    }
}

/// Description of the schema fields handed to external proposers.
pub const SCHEMA_GRAMMAR: &str = r#"{
  "category": one of the interaction category names,
  "topology": "intersection_4way" | "t_junction" | "roundabout" | "straight_2lane" | "highway_ramp",
  "maneuvers": [{"cav": string id, "intent": "straight" | "left_turn" | "right_turn" | "merge" | "lane_change" | "overtake" | "roundabout_pass"}],
  "constraints": [{"a": cav id, "b": cav id, "min_offset_s": number, "max_offset_s": number}],
  "actor_roles": [{"role": "oncoming" | "crossing" | "lead" | "pedestrian" | "parked_obstacle" | "work_zone" | "mainline" | "circulating", "count": integer}],
  "weather": "default" | "cloudy" | "night" | "rain",
  "variant": integer seed
}"#;

/// One request to an external proposer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRequest {
    pub category: Category,
    pub description: String,
    pub grammar: String,
    /// Few-shot examples, e.g. schemas distilled from demonstrations.
    pub examples: Vec<String>,
    pub count: usize,
    /// Validation problems with the previous attempt, empty on the first.
    pub diagnostics: Vec<String>,
    pub attempt: u32,
}

/// A remote schema source; returns the raw response body.
pub trait SchemaProposer {
    fn propose(&mut self, req: &ProposalRequest) -> Result<String, String>;
}

pub enum Proposer<'a> {
    /// Built-in deterministic templates.
    Template { seed: u64 },
    External {
        client: &'a mut dyn SchemaProposer,
        examples: Vec<String>,
    },
}

pub const EXTERNAL_RETRIES: u32 = 2;

/// Returns `count` candidate schemas for `category`.
pub fn propose(category: Category, count: usize, proposer: &mut Proposer<'_>) -> Result<Vec<ScenarioSchema>, GenError> {
    match proposer {
        Proposer::Template { seed } => Ok((0..count).map(|i| template(category, i, *seed)).collect()),
        Proposer::External { client, examples } => {
            let mut diagnostics: Vec<Diagnostic> = Vec::new();
            let mut raw = String::new();
            for attempt in 0..=EXTERNAL_RETRIES {
                let req = ProposalRequest {
                    category,
                    description: category.description().to_string(),
                    grammar: SCHEMA_GRAMMAR.to_string(),
                    examples: examples.clone(),
                    count,
                    diagnostics: diagnostics.iter().map(|d| d.to_string()).collect(),
                    attempt,
                };
                raw = client.propose(&req).map_err(|e| GenError::Proposal {
                    message: e,
                    raw: String::new(),
                    diagnostics: Vec::new(),
                })?;
                match parse_schema_response(&raw) {
                    Ok(mut schemas) => {
                        let wrong: Vec<Diagnostic> = schemas
                            .iter()
                            .enumerate()
                            .filter(|(_, s)| s.category != category)
                            .map(|(i, s)| {
                                Diagnostic::new(format!("schemas[{i}].category"), format!("expected {category}, got {}", s.category))
                            })
                            .collect();
                        if !wrong.is_empty() {
                            diagnostics = wrong;
                        } else if schemas.len() < count {
                            diagnostics = vec![Diagnostic::new(
                                "schemas",
                                format!("expected {count} schemas, got {}", schemas.len()),
                            )];
                        } else {
                            schemas.truncate(count);
                            return Ok(schemas);
                        }
                    }
                    Err(d) => diagnostics = d,
                }
            }
            Err(GenError::Proposal {
                message: format!(
                    "response rejected after {} attempts: {}",
                    EXTERNAL_RETRIES + 1,
                    join(&diagnostics)
                ),
                raw,
                diagnostics,
            })
        }
    }
}

fn cav(i: usize, intent: ManeuverIntent) -> Maneuver {
    Maneuver {
        cav: format!("cav{}", i + 1),
        intent,
    }
}

fn role(role: RoleKind, count: u32) -> ActorRole {
    ActorRole { role, count }
}

fn window(a: usize, b: usize, lo: f64, width: f64) -> TimingConstraint {
    TimingConstraint {
        a: format!("cav{}", a + 1),
        b: format!("cav{}", b + 1),
        min_offset_s: lo,
        max_offset_s: lo + width,
    }
}

/// Built-in template for one candidate; deterministic in `(seed, category, idx)`.
pub fn template(category: Category, idx: usize, seed: u64) -> ScenarioSchema {
    use ManeuverIntent::*;
    use RoleKind::*;
    let mut rng = substream(seed, &["gen-template", category.as_str(), &idx.to_string()]);
    let weather = Weather::ALL[rng.random_range(0..Weather::ALL.len())];
    let turns = [Straight, LeftTurn, RightTurn];
    let mut maneuvers = Vec::new();
    let mut constraints = Vec::new();
    let mut roles = Vec::new();
    let topology = match category {
        Category::UnprotectedLeftTurn => {
            maneuvers.push(cav(0, LeftTurn));
            if rng.random_bool(0.5) {
                maneuvers.push(cav(1, Straight));
                constraints.push(window(0, 1, rng.random_range(-1.5..0.5), rng.random_range(0.5..1.5)));
            }
            roles.push(role(Oncoming, rng.random_range(1..=2)));
            if rng.random_bool(0.4) {
                roles.push(role(Pedestrian, 1));
            }
            Topology::Intersection4way
        }
        Category::PedestrianCrosswalk => {
            let t = if rng.random_bool(0.5) {
                Topology::Intersection4way
            } else {
                Topology::TJunction
            };
            maneuvers.push(cav(0, if rng.random_bool(0.5) { Straight } else { RightTurn }));
            roles.push(role(Pedestrian, rng.random_range(1..=3)));
            if rng.random_bool(0.3) {
                roles.push(role(ParkedObstacle, 1));
            }
            t
        }
        Category::BlockedLaneObstacle => {
            maneuvers.push(cav(0, Overtake));
            roles.push(role(ParkedObstacle, rng.random_range(1..=2)));
            if rng.random_bool(0.5) {
                roles.push(role(Oncoming, 1));
            }
            Topology::Straight2lane
        }
        Category::ConstructionZone => {
            maneuvers.push(cav(0, Overtake));
            if rng.random_bool(0.3) {
                maneuvers.push(cav(1, Straight));
            }
            roles.push(role(WorkZone, 1));
            if rng.random_bool(0.5) {
                roles.push(role(Oncoming, 1));
            }
            Topology::Straight2lane
        }
        Category::OvertakingTwoLane => {
            maneuvers.push(cav(0, Overtake));
            roles.push(role(Lead, 1));
            if rng.random_bool(0.6) {
                roles.push(role(Oncoming, 1));
            }
            Topology::Straight2lane
        }
        Category::HighwayOnRampMerge => {
            maneuvers.push(cav(0, Merge));
            if rng.random_bool(0.5) {
                maneuvers.push(cav(1, Straight));
                constraints.push(window(0, 1, rng.random_range(-1.0..0.5), rng.random_range(0.3..1.0)));
            }
            roles.push(role(Mainline, rng.random_range(1..=3)));
            Topology::HighwayRamp
        }
        Category::InteractiveLaneChange => {
            maneuvers.push(cav(0, LaneChange));
            if rng.random_bool(0.5) {
                maneuvers.push(cav(1, Straight));
            }
            roles.push(role(Mainline, rng.random_range(1..=3)));
            if rng.random_bool(0.3) {
                roles.push(role(Lead, 1));
            }
            Topology::HighwayRamp
        }
        Category::IntersectionDeadlockResolution => {
            let n = rng.random_range(2..=4);
            for i in 0..n {
                maneuvers.push(cav(i, turns[rng.random_range(0..turns.len())]));
            }
            for i in 1..n {
                constraints.push(window(0, i, rng.random_range(-0.8..0.4), rng.random_range(0.2..0.8)));
            }
            if rng.random_bool(0.3) {
                roles.push(role(Pedestrian, 1));
            }
            Topology::Intersection4way
        }
        Category::MajorMinorUnsignalizedEntry => {
            maneuvers.push(cav(0, if rng.random_bool(0.5) { LeftTurn } else { RightTurn }));
            if rng.random_bool(0.4) {
                maneuvers.push(cav(1, Straight));
            }
            roles.push(role(Crossing, rng.random_range(1..=2)));
            Topology::TJunction
        }
        Category::RoundaboutNavigation => {
            let n = rng.random_range(1..=3);
            for i in 0..n {
                maneuvers.push(cav(i, RoundaboutPass));
            }
            if n >= 2 {
                constraints.push(window(0, 1, rng.random_range(-1.0..0.5), rng.random_range(0.5..1.5)));
            }
            let c = rng.random_range(0..=2);
            if c > 0 {
                roles.push(role(Circulating, c));
            }
            Topology::Roundabout
        }
        Category::PreCrash => {
            maneuvers.push(cav(0, Straight));
            roles.push(role(Crossing, 1));
            roles.push(role(ParkedObstacle, 1));
            if rng.random_bool(0.4) {
                roles.push(role(Pedestrian, 1));
            }
            Topology::Intersection4way
        }
    };
    ScenarioSchema {
        category,
        topology,
        maneuvers,
        constraints,
        actor_roles: roles,
        weather,
        variant: rng.random(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Canned(Vec<String>, usize);

    impl SchemaProposer for Canned {
        fn propose(&mut self, req: &ProposalRequest) -> Result<String, String> {
            assert_eq!(req.attempt as usize, self.1);
            let r = self.0[self.1.min(self.0.len() - 1)].clone();
            self.1 += 1;
            Ok(r)
        }
    }

    #[test]
    fn left_turn_templates_carry_oncoming_roles() {
        let out = propose(Category::UnprotectedLeftTurn, 3, &mut Proposer::Template { seed: 7 }).unwrap();
        assert_eq!(out.len(), 3);
        for s in &out {
            assert_eq!(
                s.maneuvers.iter().filter(|m| m.intent == ManeuverIntent::LeftTurn).count(),
                1
            );
            assert!(s.role_count(RoleKind::Oncoming) >= 1);
            assert!(validate_schema(s).is_empty());
        }
        let again = propose(Category::UnprotectedLeftTurn, 3, &mut Proposer::Template { seed: 7 }).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn every_template_is_valid() {
        for &c in Category::ALL {
            for i in 0..20 {
                let s = template(c, i, 3);
                assert!(validate_schema(&s).is_empty(), "{c} {i}: {:?}", validate_schema(&s));
            }
        }
    }

    #[test]
    fn missing_maneuvers_is_a_field_diagnostic() {
        let err = parse_schema_response(r#"{"category":"pre_crash","topology":"intersection_4way"}"#).unwrap_err();
        assert!(err.iter().any(|d| d.field == "maneuvers" && d.message.contains("missing")), "{err:?}");
    }

    #[test]
    fn undeclared_constraint_cav_is_rejected() {
        let text = r#"[{"category":"pre_crash","topology":"intersection_4way",
            "maneuvers":[{"cav":"cav1","intent":"straight"}],
            "constraints":[{"a":"cav1","b":"ghost","min_offset_s":0,"max_offset_s":1}]}]"#;
        let err = parse_schema_response(text).unwrap_err();
        assert_eq!(err[0].field, "[0].constraints[0].b");
    }

    #[test]
    fn external_retries_with_diagnostics_then_keeps_raw() {
        let good = serde_json::to_string(&vec![template(Category::PreCrash, 0, 1)]).unwrap();
        let mut ok = Canned(vec!["not json".into(), good], 0);
        let out = propose(
            Category::PreCrash,
            1,
            &mut Proposer::External {
                client: &mut ok,
                examples: vec![],
            },
        )
        .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(ok.1, 2);

        let mut bad = Canned(vec![r#"{"category":"pre_crash"}"#.into()], 0);
        let err = propose(
            Category::PreCrash,
            1,
            &mut Proposer::External {
                client: &mut bad,
                examples: vec![],
            },
        )
        .unwrap_err();
        match err {
            GenError::Proposal { raw, diagnostics, .. } => {
                assert_eq!(raw, r#"{"category":"pre_crash"}"#);
                assert!(diagnostics.iter().any(|d| d.field == "maneuvers"));
            }
            e => panic!("{e}"),
        }
        assert_eq!(bad.1, 3);
    }
}
