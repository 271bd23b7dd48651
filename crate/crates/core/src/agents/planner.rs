use super::{
    fuse_detections, pedestrian_like, self_filter_radius, Detection, Observation, PlannedTrajectory, Policy,
    PolicyError, PolicyHistory, PolicyOutput, PLAN_HORIZON_S, PLAN_STEP_S,
};
use crate::control::PlanPoint;
use crate::geometry::{cumulative_lengths, point_at_station, project_on_polyline, wrap_angle, Vec2};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerParams {
    /// Brake when the constant-velocity time to collision falls below this, s.
    pub ttc_brake: f64,
    /// Brake when the bumper gap falls below this, m.
    pub gap_brake: f64,
    /// Distance kept to a threat when stopped, m.
    pub stop_buffer: f64,
    pub corridor_margin: f64,
    /// Look-ahead for pedestrians and cyclists walking into the corridor, s.
    pub predict_horizon: f64,
    pub cruise_cap: f64,
    /// Deceleration used to shape the stopping profile, m/s².
    pub plan_decel: f64,
    /// Straight extension appended past the route end, m.
    pub route_extension: f64,
}

impl Default for PlannerParams {
    fn default() -> Self {
        Self {
            ttc_brake: 2.0,
            gap_brake: 6.0,
            stop_buffer: 2.0,
            corridor_margin: 0.5,
            predict_horizon: 2.0,
            cruise_cap: 8.0,
            plan_decel: 3.0,
            route_extension: 40.0,
        }
    }
}

/// A detection the planner brakes for.
#[derive(Debug, Clone, PartialEq)]
pub struct Threat {
    pub station: f64,
    pub gap: f64,
    pub ttc: f64,
    /// Distance along the route at which the ego center should come to rest.
    pub stop_distance: f64,
}

struct RouteFrame {
    pts: Vec<Vec2>,
    cum: Vec<f64>,
}

impl RouteFrame {
    fn new(obs: &Observation, extension: f64) -> Self {
        let mut pts = obs.route_remaining.clone();
        if pts.len() < 2 {
            let start = pts.first().copied().unwrap_or(obs.ego.position());
            pts = vec![start, start + Vec2::from_angle(obs.ego.yaw) * 1.0];
        }
        let n = pts.len();
        let dir = pts[n - 1] - pts[n - 2];
        let dir = if dir.norm() > 0.0 { dir * (1.0 / dir.norm()) } else { Vec2::from_angle(obs.ego.yaw) };
        pts.push(pts[n - 1] + dir * extension);
        let cum = cumulative_lengths(&pts);
        Self { pts, cum }
    }

    fn point(&self, s: f64) -> Vec2 {
        point_at_station(&self.pts, &self.cum, s).0
    }
}

fn assess(frame: &RouteFrame, obs: &Observation, det: &Detection, p: &PlannerParams) -> Option<Threat> {
    let pr = project_on_polyline(det.center, &frame.pts, &frame.cum)?;
    if pr.station <= 0.0 {
        return None;
    }
    let ego = &obs.ego;
    let seg = frame.pts[pr.segment + 1] - frame.pts[pr.segment];
    let heading = seg.angle();
    let t = Vec2::from_angle(heading);
    let n = t.perp();
    let rel = wrap_angle(det.yaw - heading);
    let (hl, hw) = (0.5 * det.length, 0.5 * det.width);
    let along = hl * rel.cos().abs() + hw * rel.sin().abs();
    let across = hl * rel.sin().abs() + hw * rel.cos().abs();
    let corridor = 0.5 * ego.footprint.width + across + p.corridor_margin;
    let v = det.velocity();
    let in_corridor = pr.offset.abs() < corridor;
    let enters = pedestrian_like(det.class) && !in_corridor && {
        let v_lat = v.dot(n);
        pr.offset * v_lat < 0.0 && (pr.offset.abs() - corridor) / v_lat.abs() <= p.predict_horizon
    };
    if !in_corridor && !enters {
        return None;
    }
    let gap = pr.station - along - 0.5 * ego.footprint.length;
    let closing = ego.v - v.dot(t).max(0.0);
    let ttc = if closing > 1e-9 { gap.max(0.0) / closing } else { f64::INFINITY };
    if ttc < p.ttc_brake || gap < p.gap_brake {
        Some(Threat {
            station: pr.station,
            gap,
            ttc,
            stop_distance: gap - p.stop_buffer,
        })
    } else {
        None
    }
}

/// Threats among world-frame `obstacles` for this observation.
pub fn threats(obs: &Observation, obstacles: &[Detection], p: &PlannerParams) -> Vec<Threat> {
    let frame = RouteFrame::new(obs, p.route_extension);
    obstacles.iter().filter_map(|d| assess(&frame, obs, d, p)).collect()
}

/// Route-following plan that comes to rest before the nearest triggered threat,
/// active stop line or any of `extra_stops` (distances along the remaining route).
pub fn plan_along_route(obs: &Observation, obstacles: &[Detection], extra_stops: &[f64], p: &PlannerParams) -> PlannedTrajectory {
    let frame = RouteFrame::new(obs, p.route_extension);
    let half_len = 0.5 * obs.ego.footprint.length;
    let mut stop = extra_stops.iter().copied().fold(f64::INFINITY, f64::min);
    for d in obstacles {
        if let Some(t) = assess(&frame, obs, d, p) {
            stop = stop.min(t.stop_distance);
        }
    }
    for sl in &obs.stop_lines {
        if obs.time_s >= sl.release_time_s {
            continue;
        }
        if let Some(pr) = project_on_polyline(sl.position, &frame.pts, &frame.cum) {
            let d = pr.station - half_len - 1.0;
            if d > -half_len {
                stop = stop.min(d);
            }
        }
    }
    let v_cruise = p.cruise_cap.min(obs.route_speed_cap).max(0.0);
    let steps = (PLAN_HORIZON_S / PLAN_STEP_S).round() as usize;
    let sub = 50usize;
    let h = PLAN_STEP_S / sub as f64;
    let mut s = 0.0f64;
    let mut points = Vec::with_capacity(steps + 1);
    points.push(PlanPoint {
        t: obs.time_s,
        p: obs.ego.position(),
    });
    for k in 1..=steps {
        for _ in 0..sub {
            let room = (stop - s).max(0.0);
            let v = v_cruise.min((2.0 * p.plan_decel * room).sqrt());
            s += v * h;
        }
        points.push(PlanPoint {
            t: obs.time_s + PLAN_STEP_S * k as f64,
            p: frame.point(s),
        });
    }
    PlannedTrajectory { points }
}

fn own_world(obs: &Observation) -> Vec<Detection> {
    let pose = obs.ego.pose();
    obs.detections.iter().map(|d| d.to_world(&pose)).collect()
}

/// Own detections fused with shared ones, world frame. Shared detections of the
/// ego itself are discarded.
pub(crate) fn fused_world(obs: &Observation) -> Vec<Detection> {
    let pose = obs.ego.pose();
    let r = self_filter_radius(&obs.ego);
    let received: Vec<Detection> = obs
        .received_detections()
        .into_iter()
        .filter(|d| d.center.norm() > r)
        .collect();
    fuse_detections(&obs.detections, &received)
        .into_iter()
        .map(|d| d.to_world(&pose))
        .collect()
}

/// Brakes only for what its own sensors see.
pub struct SingleAgentPolicy {
    params: PlannerParams,
}

impl SingleAgentPolicy {
    pub fn new(params: PlannerParams) -> Self {
        Self { params }
    }
}

impl Policy for SingleAgentPolicy {
    fn name(&self) -> &str {
        "single"
    }

    fn plan(&mut self, obs: &Observation, _history: &PolicyHistory) -> Result<PolicyOutput, PolicyError> {
        let perceived = own_world(obs);
        Ok(PolicyOutput {
            plan: Some(plan_along_route(obs, &perceived, &[], &self.params)),
            perceived,
            ..Default::default()
        })
    }
}

/// The single-agent rule over own and shared detections.
pub struct CoopPerceptionPolicy {
    params: PlannerParams,
}

impl CoopPerceptionPolicy {
    pub fn new(params: PlannerParams) -> Self {
        Self { params }
    }
}

impl Policy for CoopPerceptionPolicy {
    fn name(&self) -> &str {
        "coop_perception"
    }

    fn plan(&mut self, obs: &Observation, _history: &PolicyHistory) -> Result<PolicyOutput, PolicyError> {
        let perceived = fused_world(obs);
        Ok(PolicyOutput {
            plan: Some(plan_along_route(obs, &perceived, &[], &self.params)),
            perceived,
            ..Default::default()
        })
    }
}

/// Follows the route at cruise speed and never brakes for anything.
pub struct CruisePolicy {
    params: PlannerParams,
}

impl CruisePolicy {
    pub fn new(params: PlannerParams) -> Self {
        Self { params }
    }
}

impl Policy for CruisePolicy {
    fn name(&self) -> &str {
        "cruise"
    }

    fn plan(&mut self, obs: &Observation, _history: &PolicyHistory) -> Result<PolicyOutput, PolicyError> {
        let obs = Observation {
            stop_lines: Vec::new(),
            ..obs.clone()
        };
        Ok(PolicyOutput {
            plan: Some(plan_along_route(&obs, &[], &[], &self.params)),
            perceived: own_world(&obs),
            ..Default::default()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::DetectionClass;
    use super::*;
    use crate::control::adaptive_target_speed;
    use crate::geometry::Pose2;
    use crate::scenario::Footprint;
    use crate::sim::VehicleState;
    use crate::v2x::{Payload, V2XMessage};

    fn obs(v: f64) -> Observation {
        Observation {
            tick: 0,
            time_s: 0.0,
            ego_id: "ego".into(),
            ego: VehicleState::new(Pose2::new(0.0, 0.0, 0.0), v, Footprint::CAR),
            route_remaining: vec![Vec2::new(0.0, 0.0), Vec2::new(100.0, 0.0)],
            route_progress_m: 0.0,
            route_speed_cap: 8.0,
            stop_lines: vec![],
            detections: vec![],
            messages: vec![],
        }
    }

    fn obstacle(x: f64, y: f64, class: DetectionClass, yaw: f64, speed: f64) -> Detection {
        let (length, width) = match class {
            DetectionClass::Pedestrian => (0.6, 0.6),
            _ => (4.6, 2.0),
        };
        Detection {
            center: Vec2::new(x, y),
            length,
            width,
            yaw,
            class,
            speed,
            source: "ego".into(),
            score: 1.0,
        }
    }

    #[test]
    fn clear_route_runs_at_cruise() {
        let o = obs(8.0);
        let plan = plan_along_route(&o, &[], &[], &PlannerParams::default());
        assert_eq!(plan.points.len(), 7);
        assert!(plan.is_well_formed(0.0));
        assert!((adaptive_target_speed(&plan.points, 8.0, 4) - 8.0).abs() < 1e-9);
        assert!(plan.points.iter().all(|p| p.p.y.abs() < 1e-12));
    }

    #[test]
    fn stopped_vehicle_ahead_stops_plan_short() {
        let mut o = obs(4.0);
        // rear bumper 5 m ahead of the ego's front
        let x = 2.3 + 5.0 + 2.3;
        o.detections = vec![obstacle(x, 0.0, DetectionClass::Vehicle, 0.0, 0.0)];
        let mut p = SingleAgentPolicy::new(PlannerParams::default());
        let out = p.plan(&o, &PolicyHistory::default()).unwrap();
        let plan = out.plan.unwrap();
        let last = plan.points.last().unwrap().p.x;
        assert!(last + 2.3 < x - 2.3, "front {last} reaches obstacle");
        let tail = &plan.points[5..];
        assert!(tail[0].p.dist(tail[1].p) < 1e-6, "plan speed reaches zero");
    }

    #[test]
    fn parallel_traffic_is_ignored() {
        let mut o = obs(8.0);
        o.detections = vec![obstacle(8.0, 3.5, DetectionClass::Vehicle, std::f64::consts::PI, 8.0)];
        assert!(threats(&o, &own_world(&o), &PlannerParams::default()).is_empty());
    }

    #[test]
    fn pedestrian_walking_into_path_is_a_threat() {
        let mut o = obs(8.0);
        o.detections = vec![obstacle(14.0, 3.5, DetectionClass::Pedestrian, -std::f64::consts::FRAC_PI_2, 1.5)];
        assert_eq!(threats(&o, &own_world(&o), &PlannerParams::default()).len(), 1);
        // walking away is not
        o.detections[0].yaw = std::f64::consts::FRAC_PI_2;
        assert!(threats(&o, &own_world(&o), &PlannerParams::default()).is_empty());
    }

    #[test]
    fn coop_without_messages_equals_single() {
        let mut o = obs(6.0);
        o.detections = vec![obstacle(12.0, 0.2, DetectionClass::Vehicle, 0.0, 0.0)];
        let h = PolicyHistory::default();
        let a = SingleAgentPolicy::new(PlannerParams::default()).plan(&o, &h).unwrap();
        let b = CoopPerceptionPolicy::new(PlannerParams::default()).plan(&o, &h).unwrap();
        assert_eq!(a.plan, b.plan);
    }

    #[test]
    fn shared_hidden_pedestrian_stops_coop_only() {
        let mut o = obs(8.0);
        let ped = obstacle(12.0, 0.0, DetectionClass::Pedestrian, 1.57, 1.0);
        o.messages = vec![V2XMessage {
            sender: "rsu".into(),
            tick_sent: 0,
            seq: 0,
            payload: Payload::PerceptionShare {
                detections: vec![Detection { source: "rsu".into(), ..ped.to_local(&Pose2::new(20.0, 10.0, 1.0)) }],
                sender_pose: Pose2::new(20.0, 10.0, 1.0),
            },
        }];
        let h = PolicyHistory::default();
        let single = SingleAgentPolicy::new(PlannerParams::default()).plan(&o, &h).unwrap().plan.unwrap();
        let coop = CoopPerceptionPolicy::new(PlannerParams::default()).plan(&o, &h).unwrap().plan.unwrap();
        assert!((adaptive_target_speed(&single.points, 8.0, 4) - 8.0).abs() < 1e-9);
        assert!(adaptive_target_speed(&coop.points, 8.0, 4) < 6.0);
        assert!(coop.points.last().unwrap().p.x < 12.0 - 2.3);
    }

    #[test]
    fn stop_line_holds_until_release() {
        let mut o = obs(0.0);
        o.stop_lines = vec![super::super::StopConstraint {
            position: Vec2::new(3.3, 0.0),
            release_time_s: 5.0,
        }];
        let plan = plan_along_route(&o, &[], &[], &PlannerParams::default());
        assert!(plan.points.iter().all(|p| p.p.x <= 1e-9));
        o.time_s = 5.0;
        let plan = plan_along_route(&o, &[], &[], &PlannerParams::default());
        assert!(plan.points.last().unwrap().p.x > 10.0);
    }
}
