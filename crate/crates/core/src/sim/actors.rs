use super::WorldState;
use crate::geometry::{cumulative_lengths, point_at_station, project_on_segment, wrap_angle, Pose2, Vec2};
use crate::scenario::{ActorTrack, LaneGraph};
use serde::{Deserialize, Serialize};

/// Pose and speed of a replayed track at time `t`; holds the end frames outside the track.
pub fn replay_actor_step(track: &ActorTrack, t: f64) -> (Pose2, f64) {
    let f = &track.frames;
    let first = f[0];
    let last = f[f.len() - 1];
    if t <= first.t {
        return (first.pose(), first.v);
    }
    if t >= last.t {
        return (last.pose(), last.v);
    }
    let i = f.partition_point(|fr| fr.t <= t) - 1;
    let (a, b) = (f[i], f[i + 1]);
    if t == a.t {
        return (a.pose(), a.v);
    }
    let u = (t - a.t) / (b.t - a.t);
    let yaw = wrap_angle(a.yaw + wrap_angle(b.yaw - a.yaw) * u);
    (
        Pose2::new(a.x + (b.x - a.x) * u, a.y + (b.y - a.y) * u, yaw),
        a.v + (b.v - a.v) * u,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdmParams {
    /// Standstill distance, m.
    pub s0: f64,
    /// Desired time headway, s.
    pub time_headway: f64,
    pub a_max: f64,
    /// Comfortable deceleration, m/s².
    pub b_comf: f64,
    pub delta: f64,
    /// Leaders farther than this along the path are ignored, m.
    pub horizon: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            s0: 2.0,
            time_headway: 1.5,
            a_max: 1.5,
            b_comf: 2.5,
            delta: 4.0,
            horizon: 60.0,
        }
    }
}

/// IDM acceleration; `leader` is `(bumper gap, closing speed v - v_leader)`.
pub fn idm_acceleration(p: &IdmParams, v: f64, v0: f64, leader: Option<(f64, f64)>) -> f64 {
    let free = if v0 > 0.0 { 1.0 - (v / v0).powf(p.delta) } else { -1.0 };
    let interaction = match leader {
        Some((gap, dv)) => {
            let s_star = p.s0 + (v * p.time_headway + v * dv / (2.0 * (p.a_max * p.b_comf).sqrt())).max(0.0);
            let g = gap.max(1e-3);
            (s_star / g).powi(2)
        }
        None => 0.0,
    };
    p.a_max * (free - interaction)
}

/// Centerline of `start` followed by the straightest successors until `max_len` or a repeat.
pub fn lane_chain(map: &LaneGraph, start: &str, max_len: f64) -> Vec<Vec2> {
    let mut pts: Vec<Vec2> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    let mut cur = map.lane(start);
    let mut len = 0.0;
    while let Some(lane) = cur {
        if !seen.insert(lane.id.clone()) {
            break;
        }
        for p in lane.centerline() {
            if pts.last().is_some_and(|l: &Vec2| l.dist(*p) < 1e-9) {
                continue;
            }
            pts.push(*p);
        }
        len += lane.length();
        if len >= max_len {
            break;
        }
        // straightest continuation
        let end_heading = match lane.centerline() {
            [.., a, b] => (*b - *a).angle(),
            _ => 0.0,
        };
        cur = lane
            .successors
            .iter()
            .filter_map(|s| map.lane(s))
            .filter(|l| l.centerline().len() >= 2)
            .min_by(|x, y| {
                let turn = |l: &crate::scenario::Lane| {
                    let c = l.centerline();
                    wrap_angle((c[c.len() - 1] - c[0]).angle() - end_heading).abs()
                };
                turn(x).total_cmp(&turn(y))
            });
    }
    pts
}

/// Background vehicle driven by IDM along a fixed lane path.
#[derive(Debug, Clone, PartialEq)]
pub struct ReactiveActor {
    pub id: String,
    pub path: Vec<Vec2>,
    pub cumulative: Vec<f64>,
    pub station: f64,
    pub v: f64,
    pub target_speed: f64,
    pub length: f64,
    pub width: f64,
    pub lane_width: f64,
}

impl ReactiveActor {
    pub fn new(id: impl Into<String>, path: Vec<Vec2>, station: f64, v: f64, target_speed: f64, length: f64, width: f64) -> Self {
        let cumulative = cumulative_lengths(&path);
        Self {
            id: id.into(),
            path,
            cumulative,
            station,
            v,
            target_speed,
            length,
            width,
            lane_width: 3.5,
        }
    }

    pub fn pose(&self) -> Pose2 {
        let (p, h) = point_at_station(&self.path, &self.cumulative, self.station);
        Pose2::new(p.x, p.y, h)
    }

    /// Nearest entity ahead on the path: `(bumper gap, leader speed along path)`.
    pub fn leader(&self, w: &WorldState, horizon: f64) -> Option<(f64, f64)> {
        let here = self.pose().position();
        let reach = horizon + self.length;
        let s_hi = self.station + reach;
        let mut best: Option<(f64, f64)> = None;
        for body in w.bodies() {
            if body.id == self.id {
                continue;
            }
            let c = body.shape.center();
            if c.dist(here) > reach + 10.0 {
                continue;
            }
            let (half_len, half_wid) = match body.shape {
                super::Shape::Box(b) => (0.5 * b.length, 0.5 * b.width),
                super::Shape::Disc(_, r) => (r, r),
            };
            let Some((s, d, heading)) = self.project_window(c, self.station, s_hi) else { continue };
            let ahead = s - self.station;
            if ahead <= 0.0 {
                continue;
            }
            let rel = match body.shape {
                super::Shape::Box(b) => wrap_angle(b.yaw - heading),
                super::Shape::Disc(..) => 0.0,
            };
            let along = half_len * rel.cos().abs() + half_wid * rel.sin().abs();
            let across = half_len * rel.sin().abs() + half_wid * rel.cos().abs();
            if d.abs() > 0.5 * self.width + across + 0.3 {
                continue;
            }
            let extent = along;
            let gap = ahead - 0.5 * self.length - extent;
            let v_lead = body.velocity.dot(Vec2::from_angle(heading));
            if best.is_none_or(|(g, _)| gap < g) {
                best = Some((gap, v_lead));
            }
        }
        best
    }

    fn project_window(&self, p: Vec2, s_lo: f64, s_hi: f64) -> Option<(f64, f64, f64)> {
        let n = self.path.len();
        let mut best: Option<(f64, f64, f64, f64)> = None;
        for i in 0..n.saturating_sub(1) {
            if self.cumulative[i + 1] < s_lo - 1.0 || self.cumulative[i] > s_hi {
                continue;
            }
            let (a, b) = (self.path[i], self.path[i + 1]);
            let (t, foot) = project_on_segment(p, a, b);
            let dist = p.dist(foot);
            if best.is_none_or(|bb| dist < bb.0) {
                let side = (b - a).cross(p - foot);
                let s = self.cumulative[i] + (self.cumulative[i + 1] - self.cumulative[i]) * t;
                best = Some((dist, s, if side >= 0.0 { dist } else { -dist }, (b - a).angle()));
            }
        }
        // beyond the path end the path extends straight
        let total = *self.cumulative.last()?;
        if s_hi > total && n >= 2 {
            let h = (self.path[n - 1] - self.path[n - 2]).angle();
            let local = (p - self.path[n - 1]).rotate(-h);
            if local.x > 0.0 && best.is_none_or(|bb| local.y.abs() < bb.0) {
                best = Some((local.y.abs(), total + local.x, local.y, h));
            }
        }
        best.map(|(_, s, d, h)| (s, d, h))
    }
}

/// One IDM step; the advance is clamped so the bumper gap never drops below `s0`.
pub fn reactive_follow_step(a: &ReactiveActor, w: &WorldState, p: &IdmParams, dt: f64) -> ReactiveActor {
    let leader = a.leader(w, p.horizon);
    let acc = idm_acceleration(p, a.v, a.target_speed, leader.map(|(g, vl)| (g, a.v - vl)));
    let mut v_next = (a.v + acc * dt).max(0.0);
    let mut ds = 0.5 * (a.v + v_next) * dt;
    if let Some((gap, _)) = leader {
        let room = (gap - p.s0).max(0.0);
        if ds > room {
            ds = room;
            v_next = v_next.min(2.0 * room / dt - a.v).max(0.0);
        }
    }
    ReactiveActor {
        station: a.station + ds,
        v: v_next,
        ..a.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{Footprint, TrackFrame};
    use crate::sim::{VehicleState, DT};

    fn track() -> ActorTrack {
        ActorTrack::new(vec![
            TrackFrame { t: 0.0, x: 0.0, y: 0.0, yaw: 3.1, v: 1.0 },
            TrackFrame { t: 1.0, x: 1.0, y: 0.0, yaw: -3.1, v: 3.0 },
        ])
    }

    #[test]
    fn replay_hits_frames_and_midpoints() {
        let t = track();
        let (p, v) = replay_actor_step(&t, 0.0);
        assert_eq!((p.x, p.y, p.yaw, v), (0.0, 0.0, 3.1, 1.0));
        let (p, v) = replay_actor_step(&t, 0.5);
        assert_eq!((p.x, p.y), (0.5, 0.0));
        assert_eq!(v, 2.0);
        assert!((p.yaw.abs() - std::f64::consts::PI).abs() < 1e-9, "yaw {}", p.yaw);
        let (p, _) = replay_actor_step(&t, 7.0);
        assert_eq!((p.x, p.y), (1.0, 0.0));
    }

    fn road() -> Vec<Vec2> {
        vec![Vec2::new(0.0, 0.0), Vec2::new(2000.0, 0.0)]
    }

    fn world_with(actors: &[&ReactiveActor]) -> WorldState {
        let mut w = WorldState::empty(0);
        for a in actors {
            let fp = Footprint { length: a.length, width: a.width };
            w.vehicles.insert(a.id.clone(), VehicleState::new(a.pose(), a.v, fp));
        }
        w
    }

    #[test]
    fn free_road_equilibrium_holds_speed() {
        let a = ReactiveActor::new("a", road(), 0.0, 10.0, 10.0, 4.6, 2.0);
        let w = world_with(&[&a]);
        let n = reactive_follow_step(&a, &w, &IdmParams::default(), DT);
        assert_eq!(n.v, 10.0);
    }

    #[test]
    fn stationary_leader_means_deceleration() {
        let a = ReactiveActor::new("a", road(), 0.0, 5.0, 10.0, 4.6, 2.0);
        let lead = ReactiveActor::new("b", road(), 4.6 + 5.0, 0.0, 0.0, 4.6, 2.0);
        let w = world_with(&[&a, &lead]);
        let (gap, _) = a.leader(&w, 60.0).unwrap();
        assert!((gap - 5.0).abs() < 1e-9);
        let acc = idm_acceleration(&IdmParams::default(), a.v, a.target_speed, Some((gap, a.v)));
        assert!(acc < 0.0);
    }

    #[test]
    fn platoon_keeps_standstill_gap() {
        let p = IdmParams::default();
        let mut lead = ReactiveActor::new("lead", road(), 40.0, 12.0, 12.0, 4.6, 2.0);
        let mut follow = ReactiveActor::new("follow", road(), 0.0, 15.0, 20.0, 4.6, 2.0);
        for tick in 0..(60 * 20) {
            // leader brakes hard, stops, then pulls away
            let t = tick as f64 * DT;
            lead.target_speed = if (10.0..25.0).contains(&t) { 0.0 } else { 12.0 };
            let w = world_with(&[&lead, &follow]);
            let next_lead = if lead.target_speed == 0.0 {
                ReactiveActor { v: (lead.v - 6.0 * DT).max(0.0), station: lead.station + lead.v * DT * 0.5 + (lead.v - 6.0 * DT).max(0.0) * DT * 0.5, ..lead.clone() }
            } else {
                reactive_follow_step(&lead, &w, &p, DT)
            };
            follow = reactive_follow_step(&follow, &w, &p, DT);
            lead = next_lead;
            let gap = lead.station - follow.station - 4.6;
            assert!(gap >= p.s0 - 1e-9, "gap {gap} at tick {tick}");
        }
    }
}
