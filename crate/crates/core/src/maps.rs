//! Procedural map crops, one per road topology, plus lane-chain routing.

use crate::geometry::Vec2;
use crate::scenario::{Lane, LaneGraph, Topology};
use std::collections::{BTreeMap, VecDeque};

pub const LANE_WIDTH: f64 = 3.5;
const HALF: f64 = LANE_WIDTH / 2.0;
const SPEED_LIMIT: f64 = 13.9;

/// Approach side of a junction arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    E,
    N,
    W,
    S,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::E, Side::N, Side::W, Side::S];

    /// Unit vector from the junction center toward this side.
    pub fn dir(self) -> Vec2 {
        match self {
            Side::E => Vec2::new(1.0, 0.0),
            Side::N => Vec2::new(0.0, 1.0),
            Side::W => Vec2::new(-1.0, 0.0),
            Side::S => Vec2::new(0.0, -1.0),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Side::E => "E",
            Side::N => "N",
            Side::W => "W",
            Side::S => "S",
        }
    }

    fn index(self) -> usize {
        Side::ALL.iter().position(|s| *s == self).unwrap_or(0)
    }

    fn from_index(i: usize) -> Side {
        Side::ALL[i % 4]
    }

    pub fn opposite(self) -> Side {
        Side::from_index(self.index() + 2)
    }

    /// Exit side of a left turn for traffic arriving from `self`.
    pub fn left_of(self) -> Side {
        Side::from_index(self.index() + 3)
    }

    /// Exit side of a right turn for traffic arriving from `self`.
    pub fn right_of(self) -> Side {
        Side::from_index(self.index() + 1)
    }
}

/// Right-hand normal of a travel direction.
fn right(u: Vec2) -> Vec2 {
    Vec2::new(u.y, -u.x)
}

fn bezier(p0: Vec2, p1: Vec2, p2: Vec2, p3: Vec2, n: usize) -> Vec<Vec2> {
    (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64;
            let m = 1.0 - t;
            p0 * (m * m * m) + p1 * (3.0 * m * m * t) + p2 * (3.0 * m * t * t) + p3 * (t * t * t)
        })
        .collect()
}

fn line(a: Vec2, b: Vec2, step: f64) -> Vec<Vec2> {
    let n = ((a.dist(b) / step).ceil() as usize).max(1);
    (0..=n).map(|i| a.lerp(b, i as f64 / n as f64)).collect()
}

struct Builder {
    lanes: Vec<(String, Vec<Vec2>)>,
    links: Vec<(String, String)>,
}

impl Builder {
    fn new() -> Self {
        Self {
            lanes: Vec::new(),
            links: Vec::new(),
        }
    }

    fn lane(&mut self, id: impl Into<String>, pts: Vec<Vec2>) {
        self.lanes.push((id.into(), pts));
    }

    fn link(&mut self, a: impl Into<String>, b: impl Into<String>) {
        self.links.push((a.into(), b.into()));
    }

    fn build(self, map_id: &str, topology: Topology) -> LaneGraph {
        let mut succ: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut pred: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (a, b) in &self.links {
            succ.entry(a.clone()).or_default().push(b.clone());
            pred.entry(b.clone()).or_default().push(a.clone());
        }
        let lanes = self
            .lanes
            .into_iter()
            .map(|(id, pts)| {
                let s = succ.remove(&id).unwrap_or_default();
                let p = pred.remove(&id).unwrap_or_default();
                Lane::new(id, pts, LANE_WIDTH, SPEED_LIMIT, s, p)
            })
            .collect();
        LaneGraph::new(map_id, lanes, Vec::new()).with_topology(topology)
    }
}

/// Signalless junction with arms on `sides`; junction box half size `box_half`.
fn junction(map_id: &str, topology: Topology, sides: &[Side], arm: f64, box_half: f64) -> LaneGraph {
    let mut b = Builder::new();
    for &s in sides {
        let d = s.dir();
        let u_in = d * -1.0;
        let start = d * arm + right(u_in) * HALF;
        let end = d * box_half + right(u_in) * HALF;
        b.lane(format!("{}_in", s.as_str()), line(start, end, 10.0));
        let o0 = d * box_half + right(d) * HALF;
        let o1 = d * arm + right(d) * HALF;
        b.lane(format!("{}_out", s.as_str()), line(o0, o1, 10.0));
    }
    for &a in sides {
        for &c in sides {
            if a == c {
                continue;
            }
            let u_in = a.dir() * -1.0;
            let p0 = a.dir() * box_half + right(u_in) * HALF;
            let p3 = c.dir() * box_half + right(c.dir()) * HALF;
            let k = 0.55 * p0.dist(p3);
            let pts = if c == a.opposite() {
                line(p0, p3, 2.0)
            } else {
                bezier(p0, p0 + u_in * k, p3 - c.dir() * k, p3, 16)
            };
            let id = format!("{}_{}", a.as_str(), c.as_str());
            b.lane(id.clone(), pts);
            b.link(format!("{}_in", a.as_str()), id.clone());
            b.link(id, format!("{}_out", c.as_str()));
        }
    }
    let mut g = b.build(map_id, topology);
    // crosswalks just outside the junction box
    g.crosswalks = sides
        .iter()
        .map(|s| {
            let d = s.dir();
            let c = d * (box_half + 2.0);
            vec![c + right(d) * (2.0 * LANE_WIDTH), c - right(d) * (2.0 * LANE_WIDTH)]
        })
        .collect();
    g
}

pub fn intersection_4way(arm: f64) -> LaneGraph {
    junction("town_x4", Topology::Intersection4way, &Side::ALL, arm, BOX_HALF)
}

/// Stem on the south side.
pub fn t_junction(arm: f64) -> LaneGraph {
    junction("town_t3", Topology::TJunction, &[Side::E, Side::W, Side::S], arm, BOX_HALF)
}

/// Two-way road along x: `east` at y = -1.75 and `west` at y = +1.75.
pub fn straight_2lane(length: f64) -> LaneGraph {
    let mut b = Builder::new();
    b.lane("east", line(Vec2::new(0.0, -HALF), Vec2::new(length, -HALF), 10.0));
    b.lane("west", line(Vec2::new(length, HALF), Vec2::new(0.0, HALF), 10.0));
    b.build("road_2l", Topology::Straight2lane)
}

/// Eastbound two-lane highway with an on-ramp merging into the right lane.
pub fn highway_ramp(length: f64) -> LaneGraph {
    let merge_x = 0.5 * length;
    let right_y = -HALF - LANE_WIDTH;
    let mut b = Builder::new();
    b.lane("main_left", line(Vec2::new(0.0, -HALF), Vec2::new(length, -HALF), 10.0));
    b.lane("main_right_a", line(Vec2::new(0.0, right_y), Vec2::new(merge_x, right_y), 10.0));
    b.lane("main_right_b", line(Vec2::new(merge_x, right_y), Vec2::new(length, right_y), 10.0));
    let r0 = Vec2::new(merge_x - 90.0, right_y - 30.0);
    let r1 = Vec2::new(merge_x - 40.0, right_y - 12.0);
    let mut ramp = line(r0, r1, 10.0);
    ramp.pop();
    ramp.extend(bezier(r1, r1 + Vec2::new(20.0, 7.2), Vec2::new(merge_x - 15.0, right_y), Vec2::new(merge_x, right_y), 12));
    b.lane("ramp", ramp);
    b.link("main_right_a", "main_right_b");
    b.link("ramp", "main_right_b");
    b.build("hwy_ramp", Topology::HighwayRamp)
}

/// Counter-clockwise single-lane roundabout of radius `radius` with four arms.
pub fn roundabout(radius: f64, arm: f64) -> LaneGraph {
    let mut b = Builder::new();
    let gap = 20f64.to_radians();
    let arc = |a0: f64, a1: f64| -> Vec<Vec2> {
        let n = (((a1 - a0) * radius / 2.0).ceil() as usize).max(2);
        (0..=n)
            .map(|i| Vec2::from_angle(a0 + (a1 - a0) * i as f64 / n as f64) * radius)
            .collect()
    };
    for (k, s) in Side::ALL.iter().enumerate() {
        let th = k as f64 * std::f64::consts::FRAC_PI_2;
        // ring piece at this arm (exit point to entry point), then to the next arm
        b.lane(format!("ring_{}_at", s.as_str()), arc(th - gap, th + gap));
        b.lane(format!("ring_{}_to", s.as_str()), arc(th + gap, th + std::f64::consts::FRAC_PI_2 - gap));
        let next = Side::ALL[(k + 1) % 4];
        b.link(format!("ring_{}_at", s.as_str()), format!("ring_{}_to", s.as_str()));
        b.link(format!("ring_{}_to", s.as_str()), format!("ring_{}_at", next.as_str()));

        let d = s.dir();
        let u_in = d * -1.0;
        let mouth = radius + 8.0;
        b.lane(format!("{}_in", s.as_str()), line(d * arm + right(u_in) * HALF, d * mouth + right(u_in) * HALF, 10.0));
        b.lane(format!("{}_out", s.as_str()), line(d * mouth + right(d) * HALF, d * arm + right(d) * HALF, 10.0));
        let entry = Vec2::from_angle(th + gap) * radius;
        let exit = Vec2::from_angle(th - gap) * radius;
        let tan_entry = Vec2::from_angle(th + gap + std::f64::consts::FRAC_PI_2);
        let tan_exit = Vec2::from_angle(th - gap + std::f64::consts::FRAC_PI_2);
        let p_in = d * mouth + right(u_in) * HALF;
        let p_out = d * mouth + right(d) * HALF;
        b.lane(format!("{}_enter", s.as_str()), bezier(p_in, p_in + u_in * 4.0, entry - tan_entry * 4.0, entry, 10));
        b.lane(format!("{}_exit", s.as_str()), bezier(exit, exit + tan_exit * 4.0, p_out - d * 4.0, p_out, 10));
        b.link(format!("{}_in", s.as_str()), format!("{}_enter", s.as_str()));
        b.link(format!("{}_enter", s.as_str()), format!("ring_{}_to", s.as_str()));
        b.link(format!("ring_{}_to", Side::ALL[(k + 3) % 4].as_str()), format!("{}_exit", s.as_str()));
        b.link(format!("{}_exit", s.as_str()), format!("{}_out", s.as_str()));
    }
    b.build("town_rb", Topology::Roundabout)
}

/// The built-in map library, one crop per topology.
pub fn library() -> Vec<LaneGraph> {
    vec![
        intersection_4way(90.0),
        t_junction(90.0),
        roundabout(16.0, 90.0),
        straight_2lane(260.0),
        highway_ramp(320.0),
    ]
}

/// Concatenated centerline of a lane sequence; `None` if an id is unknown or
/// consecutive lanes are not linked.
pub fn chain_polyline(g: &LaneGraph, lanes: &[&str]) -> Option<Vec<Vec2>> {
    let mut pts: Vec<Vec2> = Vec::new();
    for (i, id) in lanes.iter().enumerate() {
        let lane = g.lane(id)?;
        if i > 0 && !g.lane(lanes[i - 1])?.successors.iter().any(|s| s == id) {
            return None;
        }
        for p in lane.centerline() {
            if pts.last().is_none_or(|q| q.dist(*p) > 1e-6) {
                pts.push(*p);
            }
        }
    }
    Some(pts)
}

/// Half size of the junction box in [`intersection_4way`] and [`t_junction`].
pub const BOX_HALF: f64 = 7.0;

/// Route through a junction from arm `from` to arm `to`, starting `back`
/// metres before the junction box.
pub fn approach_route(g: &LaneGraph, from: Side, to: Side, back: f64) -> Option<Vec<Vec2>> {
    let in_id = format!("{}_in", from.as_str());
    let conn = format!("{}_{}", from.as_str(), to.as_str());
    let out_id = format!("{}_out", to.as_str());
    let pts = chain_polyline(g, &[&in_id, &conn, &out_id])?;
    let u_in = from.dir() * -1.0;
    let start = from.dir() * (BOX_HALF + back) + right(u_in) * HALF;
    let mut out = vec![start];
    out.extend(pts.into_iter().filter(|p| (*p - start).dot(u_in) > 0.5));
    Some(out)
}

/// Shortest lane sequence (by lane count) from `from` to `to`.
pub fn lane_path(g: &LaneGraph, from: &str, to: &str) -> Option<Vec<String>> {
    let mut prev: BTreeMap<String, String> = BTreeMap::new();
    let mut q = VecDeque::from([from.to_string()]);
    let mut seen = std::collections::BTreeSet::from([from.to_string()]);
    while let Some(cur) = q.pop_front() {
        if cur == to {
            let mut path = vec![cur.clone()];
            let mut c = cur;
            while let Some(p) = prev.get(&c) {
                path.push(p.clone());
                c = p.clone();
            }
            path.reverse();
            return Some(path);
        }
        for s in &g.lane(&cur)?.successors {
            if seen.insert(s.clone()) {
                prev.insert(s.clone(), cur.clone());
                q.push_back(s.clone());
            }
        }
    }
    None
}
