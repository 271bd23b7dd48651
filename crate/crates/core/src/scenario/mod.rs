//! Scenario and map model: the executable episode description, its on-disk
//! directory layout, validation rules and summary statistics.

mod io;
mod lanes;
mod stats;
mod validate;

pub use io::{
    parse_lane_graph, parse_scenario_dir, parse_track, serialize_lane_graph, serialize_scenario_dir,
    serialize_track, ScenarioError,
};
pub use lanes::{nearest_lane_projection, Lane, LaneGraph, LaneProjection, Topology};
pub use stats::{scenario_statistics, suite_statistics, ScenarioStats, SuiteStats};
pub use validate::{validate_scenario, Rule, Violation};

/// Lane-graph rules only.
pub fn validate_map(g: &LaneGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    validate::validate_lane_graph(g, &mut out);
    out
}

use crate::geometry::{wrap_angle, OrientedBox, Pose2, Vec2};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Pedestrians are modeled as discs of this radius.
pub const PEDESTRIAN_RADIUS: f64 = 0.3;

macro_rules! string_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $s:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $s)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self {
                    $($name::$variant => $s),+
                }
            }

            pub fn parse(s: &str) -> Option<Self> {
                match s {
                    $($s => Some($name::$variant),)+
                    _ => None,
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

string_enum!(
    /// Scenario source bucket.
    Bucket {
        Interdrive => "interdrive",
        Interaction => "interaction",
        V2xpnp => "v2xpnp",
    }
);

string_enum!(
    Interactivity {
        StaticAvoidance => "static_avoidance",
        DynamicAvoidance => "dynamic_avoidance",
        DynamicCoordination => "dynamic_coordination",
    }
);

string_enum!(
    /// Interaction categories of the generated-scenario bucket.
    Category {
        PreCrash => "pre_crash",
        BlockedLaneObstacle => "blocked_lane_obstacle",
        ConstructionZone => "construction_zone",
        HighwayOnRampMerge => "highway_on_ramp_merge",
        InteractiveLaneChange => "interactive_lane_change",
        IntersectionDeadlockResolution => "intersection_deadlock_resolution",
        MajorMinorUnsignalizedEntry => "major_minor_unsignalized_entry",
        OvertakingTwoLane => "overtaking_two_lane",
        PedestrianCrosswalk => "pedestrian_crosswalk",
        RoundaboutNavigation => "roundabout_navigation",
        UnprotectedLeftTurn => "unprotected_left_turn",
    }
);

impl Category {
    pub fn interactivity(&self) -> Interactivity {
        use Category::*;
        match self {
            BlockedLaneObstacle | ConstructionZone | OvertakingTwoLane => Interactivity::StaticAvoidance,
            PedestrianCrosswalk => Interactivity::DynamicAvoidance,
            PreCrash
            | HighwayOnRampMerge
            | InteractiveLaneChange
            | IntersectionDeadlockResolution
            | MajorMinorUnsignalizedEntry
            | RoundaboutNavigation
            | UnprotectedLeftTurn => Interactivity::DynamicCoordination,
        }
    }

    pub fn description(&self) -> &'static str {
        use Category::*;
        match self {
            PreCrash => "occlusion and limited perception range with dangerous interaction behavior",
            BlockedLaneObstacle => "static obstacles block the travel lane",
            ConstructionZone => "work-zone lane constriction",
            HighwayOnRampMerge => "ramp merges into highway",
            InteractiveLaneChange => "multi-lane weaving interactions",
            IntersectionDeadlockResolution => "uncontrolled multi-vehicle right-of-way",
            MajorMinorUnsignalizedEntry => "minor road enters major road at an unsignalized junction",
            OvertakingTwoLane => "pass a vehicle or obstacle with oncoming traffic",
            PedestrianCrosswalk => "pedestrians crossing the vehicle travel path",
            RoundaboutNavigation => "multiple vehicles yield, merge and travel through a roundabout",
            UnprotectedLeftTurn => "left turn through oncoming traffic",
        }
    }
}

string_enum!(
    /// Weather preset; a label only, it does not alter dynamics.
    Weather {
        Default => "default",
        Cloudy => "cloudy",
        Night => "night",
        Rain => "rain",
    }
);

string_enum!(
    ActorClass {
        Vehicle => "vehicle",
        Pedestrian => "pedestrian",
        Cyclist => "cyclist",
    }
);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub length: f64,
    pub width: f64,
}

impl Footprint {
    pub const CAR: Footprint = Footprint {
        length: 4.6,
        width: 2.0,
    };
    pub const PEDESTRIAN: Footprint = Footprint {
        length: 0.6,
        width: 0.6,
    };
    pub const CYCLIST: Footprint = Footprint {
        length: 1.8,
        width: 0.7,
    };

    pub fn is_valid(&self) -> bool {
        self.length > 0.0 && self.width > 0.0 && self.length.is_finite() && self.width.is_finite()
    }

    pub fn at(&self, pose: &Pose2) -> OrientedBox {
        OrientedBox::new(pose.position(), self.length, self.width, pose.yaw)
    }
}

/// Traffic-control stand-in: the route must not be crossed at `position`
/// before `release_time_s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopLine {
    pub position: Vec2,
    pub release_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteSpec {
    pub waypoints: Vec<Vec2>,
    pub target_speed_cap: f64,
    pub stop_lines: Vec<StopLine>,
}

impl RouteSpec {
    pub fn new(waypoints: Vec<Vec2>, target_speed_cap: f64) -> Self {
        Self {
            waypoints,
            target_speed_cap,
            stop_lines: Vec::new(),
        }
    }

    pub fn length(&self) -> f64 {
        crate::geometry::polyline_length(&self.waypoints)
    }

    /// Sum of absolute heading changes between successive segments, in degrees.
    pub fn cumulative_heading_change_deg(&self) -> f64 {
        let headings: Vec<f64> = self
            .waypoints
            .windows(2)
            .filter(|w| w[0] != w[1])
            .map(|w| (w[1] - w[0]).angle())
            .collect();
        headings
            .windows(2)
            .map(|h| wrap_angle(h[1] - h[0]).abs())
            .sum::<f64>()
            .to_degrees()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CavSpec {
    pub id: String,
    pub spawn: Pose2,
    pub spawn_speed: f64,
    pub footprint: Footprint,
    pub route: RouteSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackFrame {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub v: f64,
}

impl TrackFrame {
    pub fn pose(&self) -> Pose2 {
        Pose2::new(self.x, self.y, self.yaw)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorTrack {
    pub frames: Vec<TrackFrame>,
    /// Log rate the frames were recorded at, when known.
    pub rate_hz: Option<f64>,
}

impl ActorTrack {
    pub fn new(frames: Vec<TrackFrame>) -> Self {
        Self { frames, rate_hz: None }
    }

    pub fn start_time(&self) -> f64 {
        self.frames.first().map_or(0.0, |f| f.t)
    }

    pub fn end_time(&self) -> f64 {
        self.frames.last().map_or(0.0, |f| f.t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActorBehavior {
    Replay(ActorTrack),
    /// Car-following along a lane chain starting at `station` on `lane`.
    ReactiveFollow {
        lane: String,
        station: f64,
        speed: f64,
        target_speed: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorSpec {
    pub id: String,
    pub class: ActorClass,
    pub footprint: Footprint,
    pub behavior: ActorBehavior,
}

impl ActorSpec {
    /// Pose and speed at tick 0.
    pub fn spawn_state(&self, map: &LaneGraph) -> Option<(Pose2, f64)> {
        match &self.behavior {
            ActorBehavior::Replay(track) => {
                let f = track.frames.first()?;
                Some((f.pose(), f.v))
            }
            ActorBehavior::ReactiveFollow { lane, station, speed, .. } => {
                let lane = map.lane(lane)?;
                let (p, h) = lane.point_at(*station);
                Some((Pose2::new(p.x, p.y, h), *speed))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaticObject {
    pub id: String,
    pub label: String,
    pub bbox: OrientedBox,
}

/// Fixed roadside unit that shares what it perceives.
#[derive(Debug, Clone, PartialEq)]
pub struct InfraSpec {
    pub id: String,
    pub pose: Pose2,
    pub sensor_range: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: String,
    pub bucket: Bucket,
    pub category: Category,
    pub interactivity: Interactivity,
    pub weather: Weather,
    pub max_duration_s: f64,
    pub map: LaneGraph,
    pub cavs: Vec<CavSpec>,
    pub background_actors: Vec<ActorSpec>,
    pub static_objects: Vec<StaticObject>,
    pub infrastructure: Vec<InfraSpec>,
}

impl Scenario {
    pub fn map_id(&self) -> &str {
        &self.map.map_id
    }

    pub fn cav(&self, id: &str) -> Option<&CavSpec> {
        self.cavs.iter().find(|c| c.id == id)
    }

    /// Copy with every coordinate shifted by `(dx, dy)`.
    pub fn translated(&self, dx: f64, dy: f64) -> Scenario {
        let d = Vec2::new(dx, dy);
        let mv = |p: Vec2| p + d;
        let mvp = |p: Pose2| Pose2::new(p.x + dx, p.y + dy, p.yaw);
        let mut s = self.clone();
        let lanes = s
            .map
            .lanes
            .iter()
            .map(|l| {
                Lane::new(
                    l.id.clone(),
                    l.centerline().iter().copied().map(mv).collect(),
                    l.width,
                    l.speed_limit,
                    l.successors.clone(),
                    l.predecessors.clone(),
                )
            })
            .collect();
        let crosswalks = s
            .map
            .crosswalks
            .iter()
            .map(|c| c.iter().copied().map(mv).collect())
            .collect();
        let mut map = LaneGraph::new(s.map.map_id.clone(), lanes, crosswalks);
        map.topology = s.map.topology;
        s.map = map;
        for c in &mut s.cavs {
            c.spawn = mvp(c.spawn);
            c.route.waypoints.iter_mut().for_each(|w| *w = mv(*w));
            c.route.stop_lines.iter_mut().for_each(|sl| sl.position = mv(sl.position));
        }
        for a in &mut s.background_actors {
            if let ActorBehavior::Replay(track) = &mut a.behavior {
                for f in &mut track.frames {
                    f.x += dx;
                    f.y += dy;
                }
            }
        }
        for o in &mut s.static_objects {
            o.bbox.center = mv(o.bbox.center);
        }
        for i in &mut s.infrastructure {
            i.pose = mvp(i.pose);
        }
        s
    }
}
