//! Fixed-step world model: vehicle kinematics, background actors, contacts and
//! the closed-loop episode driver.

mod actors;
mod episode;
mod trace;

pub use actors::{
    idm_acceleration, lane_chain, reactive_follow_step, replay_actor_step, IdmParams, ReactiveActor,
};
pub use episode::{
    run_episode, Bindings, Episode, EpisodeConfig, EpisodeError, EpisodeOutput, StepReport, TerminationMode, WaitEdge,
};
pub use trace::{EpisodeTrace, TraceEvent, TraceRecord};

use crate::geometry::{OrientedBox, Pose2, Vec2};
use crate::scenario::{ActorClass, Footprint, StaticObject, PEDESTRIAN_RADIUS};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Simulation step in seconds (20 Hz).
pub const DT: f64 = 0.05;
pub const TICK_RATE_HZ: u64 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TickClock {
    pub tick: u64,
}

impl TickClock {
    pub const DT: f64 = DT;

    pub fn time(&self) -> f64 {
        self.tick as f64 * DT
    }

    pub fn advance(&mut self) {
        self.tick += 1;
    }
}

pub fn tick_time(tick: u64) -> f64 {
    tick as f64 * DT
}

/// Longitudinal and steering limits of the kinematic model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsParams {
    pub a_max: f64,
    pub b_max: f64,
    /// Linear drag, 1/s.
    pub drag: f64,
    pub max_steer_deg: f64,
}

impl Default for DynamicsParams {
    fn default() -> Self {
        Self {
            a_max: 3.0,
            b_max: 8.0,
            drag: 0.05,
            max_steer_deg: 35.0,
        }
    }
}

pub const DEFAULT_WHEELBASE: f64 = 2.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub v: f64,
    pub footprint: Footprint,
    pub wheelbase: f64,
}

impl VehicleState {
    pub fn new(pose: Pose2, v: f64, footprint: Footprint) -> Self {
        Self {
            x: pose.x,
            y: pose.y,
            yaw: pose.yaw,
            v,
            footprint,
            wheelbase: DEFAULT_WHEELBASE,
        }
    }

    pub fn pose(&self) -> Pose2 {
        Pose2::new(self.x, self.y, self.yaw)
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn bbox(&self) -> OrientedBox {
        self.footprint.at(&self.pose())
    }

    pub fn velocity(&self) -> Vec2 {
        Vec2::from_angle(self.yaw) * self.v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlCommand {
    pub throttle: f64,
    pub brake: f64,
    pub steer: f64,
}

impl ControlCommand {
    pub const THROTTLE_MAX: f64 = 0.75;
    pub const FULL_BRAKE: ControlCommand = ControlCommand {
        throttle: 0.0,
        brake: 1.0,
        steer: 0.0,
    };

    /// Clamps every channel into range and resolves throttle/brake overlap in
    /// favor of the brake.
    pub fn clamped(self, steer_clip: f64) -> Self {
        let clean = |x: f64, lo: f64, hi: f64| if x.is_nan() { 0.0 } else { x.clamp(lo, hi) };
        let brake = clean(self.brake, 0.0, 1.0);
        let throttle = if brake > 0.0 {
            0.0
        } else {
            clean(self.throttle, 0.0, Self::THROTTLE_MAX)
        };
        Self {
            throttle,
            brake,
            steer: clean(self.steer, -steer_clip, steer_clip),
        }
    }

    pub fn within_bounds(&self, steer_clip: f64) -> bool {
        (0.0..=Self::THROTTLE_MAX).contains(&self.throttle)
            && (0.0..=1.0).contains(&self.brake)
            && self.steer.abs() <= steer_clip
            && !(self.throttle > 0.0 && self.brake > 0.0)
    }
}

/// Kinematic bicycle update with the default dynamics limits.
pub fn bicycle_step(s: &VehicleState, c: &ControlCommand, dt: f64) -> VehicleState {
    bicycle_step_with(&DynamicsParams::default(), s, c, dt)
}

pub fn bicycle_step_with(p: &DynamicsParams, s: &VehicleState, c: &ControlCommand, dt: f64) -> VehicleState {
    debug_assert!(dt > 0.0);
    let a = p.a_max * c.throttle - p.b_max * c.brake - p.drag * s.v;
    let v_next = (s.v + a * dt).max(0.0);
    let delta = c.steer * p.max_steer_deg.to_radians();
    let yaw_next = s.yaw + s.v / s.wheelbase * delta.tan() * dt;
    let heading = 0.5 * (s.yaw + yaw_next);
    let speed = 0.5 * (s.v + v_next);
    VehicleState {
        x: s.x + speed * heading.cos() * dt,
        y: s.y + speed * heading.sin() * dt,
        yaw: crate::geometry::wrap_angle(yaw_next),
        v: v_next,
        ..*s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PedestrianState {
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub heading: f64,
}

impl PedestrianState {
    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn velocity(&self) -> Vec2 {
        Vec2::from_angle(self.heading) * self.v
    }
}

/// Everything present at one tick.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub tick: u64,
    /// CAVs, background vehicles and cyclists.
    pub vehicles: BTreeMap<String, VehicleState>,
    pub pedestrians: BTreeMap<String, PedestrianState>,
    pub static_objects: Vec<StaticObject>,
    /// Class of every non-static entity; CAVs are `vehicle`.
    pub classes: BTreeMap<String, ActorClass>,
    pub cavs: BTreeSet<String>,
    pub seed: u64,
}

impl WorldState {
    pub fn empty(seed: u64) -> Self {
        Self {
            tick: 0,
            vehicles: BTreeMap::new(),
            pedestrians: BTreeMap::new(),
            static_objects: Vec::new(),
            classes: BTreeMap::new(),
            cavs: BTreeSet::new(),
            seed,
        }
    }

    pub fn class_of(&self, id: &str) -> Option<ActorClass> {
        self.classes.get(id).copied()
    }

    /// Every footprint in the world, in a stable order (vehicles, pedestrians, statics).
    pub fn bodies(&self) -> Vec<Body<'_>> {
        let mut out = Vec::with_capacity(self.vehicles.len() + self.pedestrians.len() + self.static_objects.len());
        for (id, v) in &self.vehicles {
            out.push(Body {
                id,
                kind: BodyKind::Vehicle(self.class_of(id).unwrap_or(ActorClass::Vehicle)),
                shape: Shape::Box(v.bbox()),
                velocity: v.velocity(),
            });
        }
        for (id, p) in &self.pedestrians {
            out.push(Body {
                id,
                kind: BodyKind::Pedestrian,
                shape: Shape::Disc(p.position(), PEDESTRIAN_RADIUS),
                velocity: p.velocity(),
            });
        }
        for o in &self.static_objects {
            out.push(Body {
                id: &o.id,
                kind: BodyKind::Static,
                shape: Shape::Box(o.bbox),
                velocity: Vec2::ZERO,
            });
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Box(OrientedBox),
    Disc(Vec2, f64),
}

impl Shape {
    pub fn center(&self) -> Vec2 {
        match self {
            Shape::Box(b) => b.center,
            Shape::Disc(c, _) => *c,
        }
    }

    pub fn bounding_radius(&self) -> f64 {
        match self {
            Shape::Box(b) => 0.5 * b.length.hypot(b.width),
            Shape::Disc(_, r) => *r,
        }
    }

    pub fn overlaps(&self, other: &Shape) -> bool {
        if self.center().dist(other.center()) > self.bounding_radius() + other.bounding_radius() {
            return false;
        }
        match (self, other) {
            (Shape::Box(a), Shape::Box(b)) => a.overlaps(b),
            (Shape::Box(a), Shape::Disc(c, r)) | (Shape::Disc(c, r), Shape::Box(a)) => a.overlaps_disc(*c, *r),
            (Shape::Disc(c, r), Shape::Disc(d, q)) => c.dist(*d) <= r + q,
        }
    }

    pub fn intersects_segment(&self, a: Vec2, b: Vec2) -> bool {
        match self {
            Shape::Box(bx) => bx.intersects_segment(a, b),
            Shape::Disc(c, r) => {
                let (_, foot) = crate::geometry::project_on_segment(*c, a, b);
                foot.dist(*c) <= *r
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BodyKind {
    Vehicle(ActorClass),
    Pedestrian,
    Static,
}

#[derive(Debug, Clone, Copy)]
pub struct Body<'a> {
    pub id: &'a str,
    pub kind: BodyKind,
    pub shape: Shape,
    pub velocity: Vec2,
}

/// All overlapping pairs, each reported once as `(a, b)` with `a < b`.
/// Static objects are not tested against each other.
pub fn collision_check(w: &WorldState) -> Vec<(String, String)> {
    let bodies = w.bodies();
    let mut out = Vec::new();
    for i in 0..bodies.len() {
        for j in (i + 1)..bodies.len() {
            let (a, b) = (&bodies[i], &bodies[j]);
            if a.kind == BodyKind::Static && b.kind == BodyKind::Static {
                continue;
            }
            if a.shape.overlaps(&b.shape) {
                let (x, y) = if a.id < b.id { (a.id, b.id) } else { (b.id, a.id) };
                out.push((x.to_string(), y.to_string()));
            }
        }
    }
    out.sort();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn car(x: f64, y: f64, yaw: f64, v: f64) -> VehicleState {
        VehicleState::new(Pose2::new(x, y, yaw), v, Footprint::CAR)
    }

    #[test]
    fn straight_line_displacement() {
        let p = DynamicsParams {
            drag: 0.0,
            ..Default::default()
        };
        let s = bicycle_step_with(&p, &car(0.0, 0.0, 0.3, 10.0), &ControlCommand::default(), 0.05);
        let d = Vec2::new(s.x, s.y);
        assert!((d.norm() - 0.5).abs() < 1e-12);
        assert!((d.angle() - 0.3).abs() < 1e-12);
        assert_eq!(s.yaw, 0.3);
        assert_eq!(s.v, 10.0);
    }

    #[test]
    fn brake_never_reverses() {
        let s = bicycle_step(&car(0.0, 0.0, 0.0, 0.0), &ControlCommand::FULL_BRAKE, DT);
        assert_eq!(s.v, 0.0);
        assert_eq!((s.x, s.y), (0.0, 0.0));
    }

    #[test]
    fn full_circle_matches_turning_radius() {
        let p = DynamicsParams {
            drag: 0.0,
            ..Default::default()
        };
        let steer = 0.4;
        let delta = steer * p.max_steer_deg.to_radians();
        let radius = DEFAULT_WHEELBASE / f64::tan(delta);
        let v = 5.0;
        let mut s = car(0.0, 0.0, 0.0, v);
        let cmd = ControlCommand {
            steer,
            ..Default::default()
        };
        let steps = (2.0 * std::f64::consts::PI * radius / (v * DT)).ceil() as usize;
        let mut pts = Vec::with_capacity(steps);
        for _ in 0..steps {
            s = bicycle_step_with(&p, &s, &cmd, DT);
            pts.push(s.position());
        }
        // the circle is centered on the left normal of the start pose
        let center = Vec2::new(0.0, radius);
        for q in &pts {
            let r = q.dist(center);
            assert!((r - radius).abs() / radius < 0.01, "r = {r}, expected {radius}");
        }
        let diameter = pts.iter().map(|q| q.norm()).fold(0.0, f64::max);
        assert!((diameter / 2.0 - radius).abs() / radius < 0.01);
    }

    #[test]
    fn identical_boxes_collide() {
        let mut w = WorldState::empty(0);
        w.vehicles.insert("a".into(), car(0.0, 0.0, 0.0, 0.0));
        w.vehicles.insert("b".into(), car(0.0, 0.0, 0.0, 0.0));
        assert_eq!(collision_check(&w), vec![("a".to_string(), "b".to_string())]);
    }

    #[test]
    fn distant_boxes_do_not_collide() {
        let mut w = WorldState::empty(0);
        w.vehicles.insert("a".into(), car(0.0, 0.0, 0.0, 0.0));
        w.vehicles.insert("b".into(), car(10.0, 0.0, 1.0, 0.0));
        assert!(collision_check(&w).is_empty());
    }

    fn sampled_overlap(a: &Shape, b: &Shape) -> bool {
        // 1 cm grid over the first shape's bounding square
        let c = a.center();
        let r = a.bounding_radius();
        let n = (2.0 * r / 0.01).ceil() as i64;
        let inside = |s: &Shape, p: Vec2| match s {
            Shape::Box(bx) => bx.contains(p),
            Shape::Disc(q, rr) => q.dist(p) <= *rr,
        };
        for i in 0..=n {
            for j in 0..=n {
                let p = Vec2::new(c.x - r + i as f64 * 0.01, c.y - r + j as f64 * 0.01);
                if inside(a, p) && inside(b, p) {
                    return true;
                }
            }
        }
        false
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn sat_matches_sampling(
            x in -4.0..4.0f64, y in -3.0..3.0f64, yaw in -3.2..3.2f64,
            l in 0.5..3.0f64, w in 0.3..1.5f64, disc in proptest::bool::ANY,
        ) {
            let a = Shape::Box(OrientedBox::new(Vec2::ZERO, 2.0, 1.0, 0.3));
            let b = if disc {
                Shape::Disc(Vec2::new(x, y), 0.3)
            } else {
                Shape::Box(OrientedBox::new(Vec2::new(x, y), l, w, yaw))
            };
            let exact = a.overlaps(&b);
            let sampled = sampled_overlap(&a, &b);
            // sampling can only miss slivers thinner than the grid
            if exact != sampled {
                prop_assert!(exact && !sampled);
                let shrink = match b {
                    Shape::Box(bb) => Shape::Box(OrientedBox::new(bb.center, (bb.length - 0.03).max(0.01), (bb.width - 0.03).max(0.01), bb.yaw)),
                    Shape::Disc(c, r) => Shape::Disc(c, r - 0.015),
                };
                prop_assert!(!a.overlaps(&shrink));
            }
        }

        #[test]
        fn contacts_are_symmetric(ax in -5.0..5.0f64, ay in -5.0..5.0f64, byaw in -3.0..3.0f64) {
            let mut w1 = WorldState::empty(0);
            w1.vehicles.insert("a".into(), car(ax, ay, 0.2, 0.0));
            w1.vehicles.insert("b".into(), car(0.0, 0.0, byaw, 0.0));
            let mut w2 = WorldState::empty(0);
            w2.vehicles.insert("b".into(), car(ax, ay, 0.2, 0.0));
            w2.vehicles.insert("a".into(), car(0.0, 0.0, byaw, 0.0));
            prop_assert_eq!(collision_check(&w1).len(), collision_check(&w2).len());
        }
    }
}
