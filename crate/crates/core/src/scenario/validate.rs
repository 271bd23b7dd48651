use super::{ActorBehavior, ActorClass, LaneGraph, Scenario, PEDESTRIAN_RADIUS};
use crate::geometry::{OrientedBox, Vec2};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    LaneDanglingReference,
    LaneDegenerateCenterline,
    LaneNonPositiveWidth,
    LaneNonPositiveSpeedLimit,
    DuplicateId,
    NoCav,
    NonPositiveDuration,
    InvalidFootprint,
    SpawnOffLane,
    SpawnOverlap,
    RouteTooShort,
    RouteRepeatedWaypoint,
    RouteWaypointOffLane,
    RouteNonPositiveSpeedCap,
    TrackEmpty,
    TrackNonMonotonicTime,
    FollowUnknownLane,
    FollowStationOutOfRange,
    NonFiniteValue,
}

/// One broken rule, naming the field path and the entities involved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: Rule,
    pub field: String,
    pub entities: Vec<String>,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} at {} [{}]", self.rule, self.field, self.entities.join(", "))
    }
}

fn v(rule: Rule, field: impl Into<String>, entities: &[&str]) -> Violation {
    Violation {
        rule,
        field: field.into(),
        entities: entities.iter().map(|s| s.to_string()).collect(),
    }
}

pub(crate) fn validate_lane_graph(g: &LaneGraph, out: &mut Vec<Violation>) {
    let mut seen = BTreeSet::new();
    for lane in &g.lanes {
        let id = lane.id.as_str();
        if !seen.insert(id) {
            out.push(v(Rule::DuplicateId, format!("map.lane[{id}].id"), &[id]));
        }
        if !lane.is_well_formed() {
            out.push(v(Rule::LaneDegenerateCenterline, format!("map.lane[{id}].centerline"), &[id]));
        }
        if lane.centerline().iter().any(|p| !p.is_finite()) {
            out.push(v(Rule::NonFiniteValue, format!("map.lane[{id}].centerline"), &[id]));
        }
        if !(lane.width > 0.0) {
            out.push(v(Rule::LaneNonPositiveWidth, format!("map.lane[{id}].width"), &[id]));
        }
        if !(lane.speed_limit > 0.0) {
            out.push(v(Rule::LaneNonPositiveSpeedLimit, format!("map.lane[{id}].speed_limit"), &[id]));
        }
        for s in &lane.successors {
            if g.lane(s).is_none() {
                out.push(v(Rule::LaneDanglingReference, format!("map.lane[{id}].successors"), &[id, s]));
            }
        }
        for p in &lane.predecessors {
            if g.lane(p).is_none() {
                out.push(v(Rule::LaneDanglingReference, format!("map.lane[{id}].predecessors"), &[id, p]));
            }
        }
    }
}

enum Shape {
    Box(OrientedBox),
    Disc(Vec2),
}

fn shapes_overlap(a: &Shape, b: &Shape) -> bool {
    match (a, b) {
        (Shape::Box(x), Shape::Box(y)) => x.overlaps(y),
        (Shape::Box(x), Shape::Disc(c)) | (Shape::Disc(c), Shape::Box(x)) => x.overlaps_disc(*c, PEDESTRIAN_RADIUS),
        (Shape::Disc(c), Shape::Disc(d)) => c.dist(*d) <= 2.0 * PEDESTRIAN_RADIUS,
    }
}

/// Checks every scenario rule; an empty result means the scenario is valid.
pub fn validate_scenario(s: &Scenario) -> Vec<Violation> {
    let mut out = Vec::new();
    validate_lane_graph(&s.map, &mut out);
    let map_usable = !s.map.is_empty();

    if s.cavs.is_empty() {
        out.push(v(Rule::NoCav, "cavs", &[&s.id]));
    }
    if !(s.max_duration_s > 0.0 && s.max_duration_s.is_finite()) {
        out.push(v(Rule::NonPositiveDuration, "max_duration_s", &[&s.id]));
    }

    let mut ids = BTreeSet::new();
    let all_ids = s
        .cavs
        .iter()
        .map(|c| c.id.as_str())
        .chain(s.background_actors.iter().map(|a| a.id.as_str()))
        .chain(s.static_objects.iter().map(|o| o.id.as_str()))
        .chain(s.infrastructure.iter().map(|i| i.id.as_str()));
    for id in all_ids {
        if !ids.insert(id) {
            out.push(v(Rule::DuplicateId, format!("entity[{id}].id"), &[id]));
        }
    }

    // (id, shape, is static) at tick 0
    let mut bodies: Vec<(&str, Shape, bool)> = Vec::new();

    for c in &s.cavs {
        let id = c.id.as_str();
        if !c.footprint.is_valid() {
            out.push(v(Rule::InvalidFootprint, format!("cav[{id}].footprint"), &[id]));
        }
        let finite = [c.spawn.x, c.spawn.y, c.spawn.yaw, c.spawn_speed]
            .iter()
            .all(|x| x.is_finite());
        if !finite {
            out.push(v(Rule::NonFiniteValue, format!("cav[{id}].spawn"), &[id]));
        } else if map_usable && !s.map.on_road(c.spawn.position()) {
            out.push(v(Rule::SpawnOffLane, format!("cav[{id}].spawn"), &[id]));
        }
        let r = &c.route;
        if r.waypoints.len() < 2 || !(r.length() > 0.0) {
            out.push(v(Rule::RouteTooShort, format!("cav[{id}].route.waypoints"), &[id]));
        }
        for (i, w) in r.waypoints.windows(2).enumerate() {
            if w[0] == w[1] {
                out.push(v(
                    Rule::RouteRepeatedWaypoint,
                    format!("cav[{id}].route.waypoints[{}]", i + 1),
                    &[id],
                ));
            }
        }
        for (i, w) in r.waypoints.iter().enumerate() {
            if !w.is_finite() {
                out.push(v(Rule::NonFiniteValue, format!("cav[{id}].route.waypoints[{i}]"), &[id]));
            } else if map_usable && !s.map.on_road(*w) {
                out.push(v(Rule::RouteWaypointOffLane, format!("cav[{id}].route.waypoints[{i}]"), &[id]));
            }
        }
        if !(r.target_speed_cap > 0.0) {
            out.push(v(Rule::RouteNonPositiveSpeedCap, format!("cav[{id}].route.speed_cap"), &[id]));
        }
        if c.footprint.is_valid() && finite {
            bodies.push((id, Shape::Box(c.footprint.at(&c.spawn)), false));
        }
    }

    for a in &s.background_actors {
        let id = a.id.as_str();
        if !a.footprint.is_valid() {
            out.push(v(Rule::InvalidFootprint, format!("actor[{id}].footprint"), &[id]));
        }
        match &a.behavior {
            ActorBehavior::Replay(track) => {
                if track.frames.is_empty() {
                    out.push(v(Rule::TrackEmpty, format!("actor[{id}].track"), &[id]));
                    continue;
                }
                if track.frames.windows(2).any(|w| !(w[1].t > w[0].t)) {
                    out.push(v(Rule::TrackNonMonotonicTime, format!("actor[{id}].track.t"), &[id]));
                }
                if track
                    .frames
                    .iter()
                    .any(|f| ![f.t, f.x, f.y, f.yaw, f.v].iter().all(|x| x.is_finite()))
                {
                    out.push(v(Rule::NonFiniteValue, format!("actor[{id}].track"), &[id]));
                    continue;
                }
            }
            ActorBehavior::ReactiveFollow { lane, station, .. } => match s.map.lane(lane) {
                None => {
                    out.push(v(Rule::FollowUnknownLane, format!("actor[{id}].behavior.lane"), &[id, lane]));
                    continue;
                }
                Some(l) => {
                    if !(*station >= 0.0 && *station <= l.length()) {
                        out.push(v(
                            Rule::FollowStationOutOfRange,
                            format!("actor[{id}].behavior.station"),
                            &[id, lane],
                        ));
                        continue;
                    }
                }
            },
        }
        let Some((pose, _)) = a.spawn_state(&s.map) else { continue };
        if a.class != ActorClass::Pedestrian && map_usable && !s.map.on_road(pose.position()) {
            out.push(v(Rule::SpawnOffLane, format!("actor[{id}].spawn"), &[id]));
        }
        if a.footprint.is_valid() {
            let shape = if a.class == ActorClass::Pedestrian {
                Shape::Disc(pose.position())
            } else {
                Shape::Box(a.footprint.at(&pose))
            };
            bodies.push((id, shape, false));
        }
    }

    for o in &s.static_objects {
        let id = o.id.as_str();
        if !(o.bbox.length > 0.0 && o.bbox.width > 0.0) {
            out.push(v(Rule::InvalidFootprint, format!("static[{id}].size"), &[id]));
        } else {
            bodies.push((id, Shape::Box(o.bbox), true));
        }
    }

    for i in 0..bodies.len() {
        for j in (i + 1)..bodies.len() {
            if bodies[i].2 && bodies[j].2 {
                continue;
            }
            if shapes_overlap(&bodies[i].1, &bodies[j].1) {
                out.push(v(
                    Rule::SpawnOverlap,
                    format!("spawn[{},{}]", bodies[i].0, bodies[j].0),
                    &[bodies[i].0, bodies[j].0],
                ));
            }
        }
    }
    out
}
