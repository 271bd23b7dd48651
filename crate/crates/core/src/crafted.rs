//! Hand-built scenario suites whose outcomes follow from their geometry.

use crate::geometry::{OrientedBox, Pose2, Vec2};
use crate::maps::{self, Side};
use crate::scenario::{
    ActorBehavior, ActorClass, ActorSpec, ActorTrack, Bucket, CavSpec, Category, Footprint, InfraSpec, LaneGraph,
    RouteSpec, Scenario, StaticObject, TrackFrame, Weather,
};
use crate::sim::DT;

fn base(id: &str, category: Category, map: LaneGraph, duration: f64) -> Scenario {
    Scenario {
        id: id.to_string(),
        bucket: Bucket::Interaction,
        category,
        interactivity: category.interactivity(),
        weather: Weather::Default,
        max_duration_s: duration,
        map,
        cavs: Vec::new(),
        background_actors: Vec::new(),
        static_objects: Vec::new(),
        infrastructure: Vec::new(),
    }
}

/// CAV spawned on the first waypoint, facing the first segment.
pub fn cav_on(id: &str, route: Vec<Vec2>, speed: f64, cap: f64) -> CavSpec {
    let h = (route[1] - route[0]).angle();
    CavSpec {
        id: id.to_string(),
        spawn: Pose2::new(route[0].x, route[0].y, h),
        spawn_speed: speed,
        footprint: Footprint::CAR,
        route: RouteSpec::new(route, cap),
    }
}

/// One CAV on an empty straight road from standstill.
pub fn straight_route(length: f64, cap: f64) -> Scenario {
    let map = maps::straight_2lane(length + 20.0);
    let mut s = base("straight_route", Category::OvertakingTwoLane, map, 60.0);
    s.cavs.push(cav_on(
        "cav1",
        vec![Vec2::new(5.0, -1.75), Vec2::new(5.0 + length, -1.75)],
        0.0,
        cap,
    ));
    s
}

/// Occluded-crossing variant parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccludedCrossing {
    /// Ego front-to-pedestrian gap when the pedestrian starts walking, m.
    pub trigger_gap: f64,
    pub ped_speed: f64,
}

/// An occluded-crossing scenario and its slack at zero latency.
#[derive(Debug, Clone)]
pub struct OccludedCase {
    pub scenario: Scenario,
    pub params: OccludedCrossing,
    /// How much later than the first shared sighting braking could start and
    /// still stop short of the pedestrian, s.
    pub reaction_margin_s: f64,
}

const EGO_SPEED: f64 = 8.0;
const EGO_START_X: f64 = 10.0;
const PED_X: f64 = 120.0;

/// Stop distance from `v` under full braking, counting one tick of sensing
/// delay and one of command delay.
pub fn stop_distance(v: f64) -> f64 {
    2.0 * v * DT + v * v / (2.0 * 8.0)
}

pub fn occluded_crossing(idx: usize, p: OccludedCrossing) -> OccludedCase {
    let lane_y = -1.75;
    let map = maps::straight_2lane(260.0);
    let mut s = base(&format!("occluded_crossing_{idx:02}"), Category::PreCrash, map, 40.0);
    s.cavs.push(cav_on(
        "ego",
        vec![Vec2::new(EGO_START_X, lane_y), Vec2::new(240.0, lane_y)],
        EGO_SPEED,
        EGO_SPEED,
    ));
    let half = 0.5 * Footprint::CAR.length;
    let half_w = 0.5 * Footprint::CAR.width;
    let ped_r = crate::scenario::PEDESTRIAN_RADIUS;
    // the ego front is `trigger_gap` short of the pedestrian when it starts walking
    let ego_center_at_trigger = PED_X - ped_r - p.trigger_gap - half;
    let t_start = ((ego_center_at_trigger - EGO_START_X) / EGO_SPEED / DT).round() * DT;
    // undisturbed, the ego front arrives 0.1 s after the pedestrian enters its path
    let arrive = p.trigger_gap / EGO_SPEED;
    let offset = half_w + ped_r + p.ped_speed * (arrive - 0.1);
    let y0 = lane_y - offset;
    let y1 = lane_y + 9.0;
    let walk = (y1 - y0) / p.ped_speed;
    let h = std::f64::consts::FRAC_PI_2;
    let mut frames = vec![
        TrackFrame { t: 0.0, x: PED_X, y: y0, yaw: h, v: 0.0 },
        TrackFrame { t: t_start, x: PED_X, y: y0, yaw: h, v: 0.0 },
    ];
    let n = (walk / DT).ceil() as usize;
    for k in 1..=n {
        let t = (t_start + k as f64 * DT).min(t_start + walk);
        let y = (y0 + p.ped_speed * k as f64 * DT).min(y1);
        frames.push(TrackFrame { t, x: PED_X, y, yaw: h, v: if k < n { p.ped_speed } else { 0.0 } });
    }
    frames.dedup_by(|b, a| b.t <= a.t);
    s.background_actors.push(ActorSpec {
        id: "ped".into(),
        class: ActorClass::Pedestrian,
        footprint: Footprint::PEDESTRIAN,
        behavior: ActorBehavior::Replay(ActorTrack::new(frames)),
    });
    // parked van at the lane edge, its front just short of the crossing line
    let van_len = 9.0;
    let van_w = 2.4;
    let van_y = lane_y - 1.75 - 0.15 - 0.5 * van_w;
    s.static_objects.push(StaticObject {
        id: "parked_van".into(),
        label: "vehicle.van".into(),
        bbox: OrientedBox::new(Vec2::new(PED_X - 0.6 - 0.5 * van_len, van_y), van_len, van_w, 0.0),
    });
    s.infrastructure.push(InfraSpec {
        id: "rsu".into(),
        pose: Pose2::new(PED_X + 6.0, 8.0, -std::f64::consts::FRAC_PI_2),
        sensor_range: 60.0,
    });
    let reaction_margin_s = (p.trigger_gap - stop_distance(EGO_SPEED)) / EGO_SPEED;
    OccludedCase {
        scenario: s,
        params: p,
        reaction_margin_s,
    }
}

/// Ten occluded-crossing variants in increasing order of margin; the first
/// four leave less than 0.4 s.
pub fn occluded_crossing_suite() -> Vec<OccludedCase> {
    const VARIANTS: [(f64, f64); 10] = [
        (5.2, 2.6),
        (5.6, 3.2),
        (6.0, 2.6),
        (6.4, 3.2),
        (7.2, 2.6),
        (8.0, 3.2),
        (8.5, 2.6),
        (9.0, 3.2),
        (10.0, 2.6),
        (11.0, 3.2),
    ];
    VARIANTS
        .iter()
        .enumerate()
        .map(|(i, &(g, v))| occluded_crossing(i, OccludedCrossing { trigger_gap: g, ped_speed: v }))
        .collect()
}

/// Multi-CAV junction conflict: each entry is (arrival side, exit side, distance
/// from the junction box at spawn).
#[derive(Debug, Clone)]
pub struct ConflictCase {
    pub scenario: Scenario,
    /// Every CAV reaches the conflict zone at the same time at constant speed.
    pub symmetric: bool,
}

const JUNCTION_ARM: f64 = 90.0;
pub fn junction_conflict(idx: usize, legs: &[(Side, Side, f64)], speed: f64) -> ConflictCase {
    let map = maps::intersection_4way(JUNCTION_ARM);
    let mut s = base(
        &format!("junction_conflict_{idx:02}"),
        Category::IntersectionDeadlockResolution,
        map,
        45.0,
    );
    for (k, &(from, to, back)) in legs.iter().enumerate() {
        let route = maps::approach_route(&s.map, from, to, back).expect("junction lanes");
        s.cavs.push(cav_on(&format!("cav{}", k + 1), route, speed, 8.0));
    }
    let first = legs[0].2;
    let symmetric = legs.iter().all(|l| (l.2 - first).abs() < 1e-9);
    ConflictCase { scenario: s, symmetric }
}

/// Ten junction conflicts; the first five are symmetric.
pub fn junction_conflict_suite() -> Vec<ConflictCase> {
    use Side::*;
    let cases: Vec<Vec<(Side, Side, f64)>> = vec![
        vec![(W, E, 30.0), (S, N, 30.0)],
        vec![(W, E, 35.0), (S, N, 35.0)],
        vec![(E, W, 30.0), (N, S, 30.0)],
        vec![(W, E, 30.0), (S, N, 30.0), (E, W, 30.0)],
        vec![(W, E, 25.0), (N, S, 25.0)],
        vec![(W, E, 30.0), (S, N, 36.0)],
        vec![(W, N, 30.0), (E, W, 32.0)],
        vec![(S, N, 30.0), (E, W, 26.0), (W, E, 40.0)],
        vec![(W, E, 30.0), (S, N, 31.0), (E, W, 33.0), (N, S, 34.0)],
        vec![(S, W, 28.0), (W, E, 31.0)],
    ];
    cases
        .iter()
        .enumerate()
        .map(|(i, legs)| junction_conflict(i, legs, 8.0))
        .collect()
}
