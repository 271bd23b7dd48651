use super::{validate_schema, GenError, ManeuverIntent, RoleKind, ScenarioSchema};
use crate::geometry::{OrientedBox, Pose2, Vec2};
use crate::maps::{self, Side, BOX_HALF, LANE_WIDTH};
use crate::rng::substream;
use crate::scenario::{
    validate_scenario, ActorBehavior, ActorClass, ActorSpec, ActorTrack, Bucket, CavSpec, Footprint, InfraSpec,
    LaneGraph, RouteSpec, Scenario, StaticObject, Topology, TrackFrame,
};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

const SPEED: f64 = 8.0;
const ATTEMPTS: usize = 48;
/// Minimum spacing between spawn stations on the same lane, m.
const SPACING: f64 = 10.0;
const HALF: f64 = LANE_WIDTH / 2.0;

fn right(u: Vec2) -> Vec2 {
    Vec2::new(u.y, -u.x)
}

/// Instantiates against the built-in map library.
pub fn instantiate(schema: &ScenarioSchema) -> Result<Scenario, GenError> {
    instantiate_with(schema, &maps::library())
}

/// Picks the first library map whose topology matches, then searches for a
/// concrete placement satisfying the schema.
pub fn instantiate_with(schema: &ScenarioSchema, library: &[LaneGraph]) -> Result<Scenario, GenError> {
    let diags = validate_schema(schema);
    if !diags.is_empty() {
        return Err(GenError::InvalidSchema(diags));
    }
    let map = library
        .iter()
        .find(|g| g.topology == Some(schema.topology))
        .ok_or(GenError::NoMatchingRegion(schema.topology))?;
    let slots = slot_count(map);
    if schema.maneuvers.len() > slots {
        return Err(GenError::Infeasible(format!(
            "{} CAV maneuvers need as many spawn slots; map {} offers {slots}",
            schema.maneuvers.len(),
            map.map_id
        )));
    }
    let mut rng = substream(schema.variant, &["instantiate", schema.category.as_str(), schema.topology.as_str()]);
    let mut last = String::from("no attempt made");
    for _ in 0..ATTEMPTS {
        let attempt = match schema.topology {
            Topology::Intersection4way | Topology::TJunction => junction(schema, map, &mut rng),
            Topology::Roundabout => roundabout(schema, map, &mut rng),
            Topology::Straight2lane => two_lane(schema, map, &mut rng),
            Topology::HighwayRamp => highway(schema, map, &mut rng),
        };
        match attempt {
            Ok(s) => {
                let v = validate_scenario(&s);
                if v.is_empty() {
                    return Ok(s);
                }
                last = format!("placement violates {}", v[0]);
            }
            Err(reason) => last = reason,
        }
    }
    Err(GenError::Infeasible(format!("no placement after {ATTEMPTS} attempts: {last}")))
}

fn junction_sides(g: &LaneGraph) -> Vec<Side> {
    Side::ALL
        .into_iter()
        .filter(|s| g.lane(&format!("{}_in", s.as_str())).is_some())
        .collect()
}

fn slot_count(g: &LaneGraph) -> usize {
    match g.topology {
        Some(Topology::Intersection4way | Topology::TJunction | Topology::Roundabout) => junction_sides(g).len(),
        Some(Topology::Straight2lane) => 2,
        Some(Topology::HighwayRamp) => 3,
        None => 0,
    }
}

fn shell(schema: &ScenarioSchema, map: &LaneGraph) -> Scenario {
    Scenario {
        id: format!("gen_{}_{}", schema.category.as_str(), &schema.digest()[..10]),
        bucket: Bucket::Interaction,
        category: schema.category,
        interactivity: schema.category.interactivity(),
        weather: schema.weather,
        max_duration_s: 0.0,
        map: map.clone(),
        cavs: Vec::new(),
        background_actors: Vec::new(),
        static_objects: Vec::new(),
        infrastructure: Vec::new(),
    }
}

fn finish(mut s: Scenario) -> Scenario {
    let longest = s.cavs.iter().map(|c| c.route.length()).fold(0.0, f64::max);
    s.max_duration_s = (1.6 * longest / SPEED + 10.0).ceil().max(30.0);
    s
}

fn make_cav(id: &str, route: Vec<Vec2>) -> CavSpec {
    let h = (route[1] - route[0]).angle();
    CavSpec {
        id: id.to_string(),
        spawn: Pose2::new(route[0].x, route[0].y, h),
        spawn_speed: SPEED,
        footprint: Footprint::CAR,
        route: RouteSpec::new(route, SPEED),
    }
}

/// Route over `lanes` starting at `station` on the first one.
fn route_from(g: &LaneGraph, lanes: &[&str], station: f64) -> Option<Vec<Vec2>> {
    let first = g.lane(lanes[0])?;
    let (start, _) = first.point_at(station);
    let mut pts = vec![start];
    let cum = first.cumulative();
    for (p, s) in first.centerline().iter().zip(cum) {
        if *s > station + 0.5 {
            pts.push(*p);
        }
    }
    if lanes.len() > 1 {
        let rest = maps::chain_polyline(g, lanes)?;
        let skip = first.centerline().len();
        for p in rest.into_iter().skip(skip.saturating_sub(1)) {
            if pts.last().is_none_or(|q| q.dist(p) > 1e-6) {
                pts.push(p);
            }
        }
    }
    (pts.len() >= 2).then_some(pts)
}

/// Distance to the conflict area per CAV, honoring the timing constraints.
fn solve_backs(schema: &ScenarioSchema, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Result<Vec<f64>, String> {
    let n = schema.maneuvers.len();
    let idx: BTreeMap<&str, usize> = schema
        .maneuvers
        .iter()
        .enumerate()
        .map(|(i, m)| (m.cav.as_str(), i))
        .collect();
    let mut back: Vec<Option<f64>> = vec![None; n];
    let base_hi = hi.min(lo + 25.0);
    back[0] = Some(rng.random_range(lo + 5.0..base_hi.max(lo + 5.5)));
    for _ in 0..=n {
        for c in &schema.constraints {
            let (a, b) = (idx[c.a.as_str()], idx[c.b.as_str()]);
            let off = rng.random_range(c.min_offset_s..=c.max_offset_s);
            match (back[a], back[b]) {
                (Some(x), None) => back[b] = Some(x + SPEED * off),
                (None, Some(y)) => back[a] = Some(y - SPEED * off),
                _ => {}
            }
        }
        let b0 = back[0].unwrap_or(lo);
        for (i, b) in back.iter_mut().enumerate() {
            let id = &schema.maneuvers[i].cav;
            // unconstrained CAVs arrive near the first one
            if b.is_none() && !schema.constraints.iter().any(|c| &c.a == id || &c.b == id) {
                *b = Some(b0 + rng.random_range(-6.0..6.0));
            }
        }
    }
    let out: Vec<f64> = back.iter().map(|b| b.unwrap_or(lo + 5.0)).collect();
    for c in &schema.constraints {
        let (a, b) = (idx[c.a.as_str()], idx[c.b.as_str()]);
        let off = (out[b] - out[a]) / SPEED;
        if off < c.min_offset_s - 1e-9 || off > c.max_offset_s + 1e-9 {
            return Err(format!("constraint {}->{} cannot hold together with the others", c.a, c.b));
        }
    }
    for (i, b) in out.iter().enumerate() {
        if *b < lo || *b > hi {
            return Err(format!(
                "{} would spawn {:.1} m from the conflict area, outside [{lo}, {hi}]",
                schema.maneuvers[i].cav, b
            ));
        }
    }
    Ok(out)
}

/// Spawn stations already taken per lane.
#[derive(Default)]
struct Occupancy(BTreeMap<String, Vec<f64>>);

impl Occupancy {
    fn take(&mut self, lane: &str, s: f64) {
        self.0.entry(lane.to_string()).or_default().push(s);
    }

    /// First free station at or after `want` (stepping forward), within `[lo, hi]`.
    fn fit(&self, lane: &str, mut want: f64, lo: f64, hi: f64, step: f64) -> Option<f64> {
        let taken = self.0.get(lane).cloned().unwrap_or_default();
        for _ in 0..16 {
            if want < lo || want > hi {
                return None;
            }
            if taken.iter().all(|t| (t - want).abs() >= SPACING) {
                return Some(want);
            }
            want += step;
        }
        None
    }
}

fn follower(id: String, lane: &str, station: f64, speed: f64) -> ActorSpec {
    ActorSpec {
        id,
        class: ActorClass::Vehicle,
        footprint: Footprint::CAR,
        behavior: ActorBehavior::ReactiveFollow {
            lane: lane.to_string(),
            station,
            speed,
            target_speed: speed,
        },
    }
}

/// Replay track along `path` at `speed`, holding the first point until `t0`.
fn walk(path: &[Vec2], speed: f64, t0: f64) -> ActorTrack {
    let h0 = (path[1] - path[0]).angle();
    let mut frames = vec![TrackFrame { t: 0.0, x: path[0].x, y: path[0].y, yaw: h0, v: 0.0 }];
    if t0 > 0.0 {
        frames.push(TrackFrame { t: t0, x: path[0].x, y: path[0].y, yaw: h0, v: 0.0 });
    }
    let mut t = t0;
    for w in path.windows(2) {
        let d = w[0].dist(w[1]);
        let n = ((d / (speed * 0.1)).ceil() as usize).max(1);
        let h = (w[1] - w[0]).angle();
        for k in 1..=n {
            let u = k as f64 / n as f64;
            let p = w[0].lerp(w[1], u);
            frames.push(TrackFrame { t: t + u * d / speed, x: p.x, y: p.y, yaw: h, v: speed });
        }
        t += d / speed;
    }
    if let Some(l) = frames.last_mut() {
        l.v = 0.0;
    }
    frames.dedup_by(|b, a| b.t <= a.t);
    ActorTrack::new(frames)
}

fn pedestrian(id: String, track: ActorTrack) -> ActorSpec {
    ActorSpec {
        id,
        class: ActorClass::Pedestrian,
        footprint: Footprint::PEDESTRIAN,
        behavior: ActorBehavior::Replay(track),
    }
}

fn junction(schema: &ScenarioSchema, map: &LaneGraph, rng: &mut ChaCha8Rng) -> Result<Scenario, String> {
    let mut s = shell(schema, map);
    let sides = junction_sides(map);
    let in_len = map
        .lane(&format!("{}_in", sides[0].as_str()))
        .map(|l| l.length())
        .ok_or("junction map lacks approach lanes")?;
    let mut order = sides.clone();
    order.shuffle(rng);
    let has = |x: Side| sides.contains(&x);
    let mut legs: Vec<(Side, Side)> = Vec::new();
    for m in &schema.maneuvers {
        let pick = order.iter().copied().find(|&from| {
            let to = match m.intent {
                ManeuverIntent::LeftTurn => from.left_of(),
                ManeuverIntent::RightTurn => from.right_of(),
                _ => from.opposite(),
            };
            has(to) && !legs.iter().any(|l| l.0 == from)
        });
        let Some(from) = pick else {
            return Err(format!("no free approach realizes {:?} for {}", m.intent, m.cav));
        };
        let to = match m.intent {
            ManeuverIntent::LeftTurn => from.left_of(),
            ManeuverIntent::RightTurn => from.right_of(),
            _ => from.opposite(),
        };
        legs.push((from, to));
    }
    let backs = solve_backs(schema, rng, 12.0, in_len - 12.0)?;
    let mut occ = Occupancy::default();
    for (i, ((from, to), back)) in legs.iter().zip(&backs).enumerate() {
        let in_id = format!("{}_in", from.as_str());
        let conn = format!("{}_{}", from.as_str(), to.as_str());
        let out_id = format!("{}_out", to.as_str());
        let route = route_from(map, &[&in_id, &conn, &out_id], in_len - back).ok_or("broken junction lanes")?;
        occ.take(&in_id, in_len - back);
        s.cavs.push(make_cav(&schema.maneuvers[i].cav, route));
    }
    let (ego_from, ego_to) = legs[0];
    let ego_back = backs[0];
    let mut n_actor = 0usize;
    let mut next_id = |prefix: &str| {
        n_actor += 1;
        format!("{prefix}{n_actor}")
    };

    // vehicles approaching on other arms, timed to reach the box near the ego
    let approach = |side: Side, k: usize, s: &mut Scenario, occ: &mut Occupancy, rng: &mut ChaCha8Rng, id: String| {
        let lane = format!("{}_in", side.as_str());
        let want = (in_len - (ego_back + rng.random_range(-8.0..8.0) + 12.0 * k as f64)).min(in_len - 10.0);
        let station = occ
            .fit(&lane, want, 2.0, in_len - 10.0, -SPACING)
            .ok_or_else(|| format!("no room for a vehicle on {lane}"))?;
        occ.take(&lane, station);
        s.background_actors.push(follower(id, &lane, station, SPEED));
        Ok::<(), String>(())
    };
    for k in 0..schema.role_count(RoleKind::Oncoming) as usize {
        let side = if has(ego_from.opposite()) {
            ego_from.opposite()
        } else {
            *sides.iter().find(|x| **x != ego_from).ok_or("single-arm map")?
        };
        let id = next_id("oncoming");
        approach(side, k, &mut s, &mut occ, rng, id)?;
    }
    for k in 0..schema.role_count(RoleKind::Crossing) as usize {
        let mut cands: Vec<Side> = [ego_from.right_of(), ego_from.left_of()].into_iter().filter(|x| has(*x)).collect();
        if cands.is_empty() {
            cands.push(ego_from.opposite());
        }
        let side = cands[(k + rng.random_range(0..2usize)) % cands.len()];
        let id = next_id("crossing");
        approach(side, k / cands.len(), &mut s, &mut occ, rng, id)?;
    }
    // pedestrians cross the ego's exit arm around its arrival
    let peds = schema.role_count(RoleKind::Pedestrian) as usize;
    if peds > 0 {
        let d = ego_to.dir();
        let c = d * (BOX_HALF + 2.0);
        let a = c + right(d) * (2.0 * LANE_WIDTH);
        let b = c - right(d) * (2.0 * LANE_WIDTH);
        let arrive = (ego_back + BOX_HALF + 2.0) / SPEED;
        for k in 0..peds {
            let (p0, p1) = if k % 2 == 0 { (a, b) } else { (b, a) };
            let out = (p0 - p1) * (1.0 / p0.dist(p1));
            let p0 = p0 + out * (0.9 * (k / 2) as f64);
            let speed = rng.random_range(1.2..1.8);
            let t0 = (arrive - 0.5 * p0.dist(p1) / speed + rng.random_range(-1.5..1.0) + 1.2 * k as f64).max(0.0);
            let id = next_id("ped");
            s.background_actors.push(pedestrian(id, walk(&[p0, p1], speed, t0)));
        }
    }
    // parked vans on the ego approach, off the carriageway
    for k in 0..schema.role_count(RoleKind::ParkedObstacle) as usize {
        let u_in = ego_from.dir() * -1.0;
        let along = BOX_HALF + 6.0 + 11.0 * k as f64 + rng.random_range(0.0..4.0);
        let center = ego_from.dir() * along + right(u_in) * (LANE_WIDTH + 1.4);
        s.static_objects.push(StaticObject {
            id: format!("parked{}", k + 1),
            label: "vehicle.van".into(),
            bbox: OrientedBox::new(center, 6.0, 2.2, u_in.angle()),
        });
    }
    if schema.role_count(RoleKind::Pedestrian) > 0 || schema.role_count(RoleKind::Crossing) > 0 {
        let corner = Vec2::new(BOX_HALF + 5.0, BOX_HALF + 5.0);
        s.infrastructure.push(InfraSpec {
            id: "rsu".into(),
            pose: Pose2::new(corner.x, corner.y, (-corner).angle()),
            sensor_range: 60.0,
        });
    }
    Ok(finish(s))
}

fn roundabout(schema: &ScenarioSchema, map: &LaneGraph, rng: &mut ChaCha8Rng) -> Result<Scenario, String> {
    let mut s = shell(schema, map);
    let sides = junction_sides(map);
    let in_len = map
        .lane(&format!("{}_in", sides[0].as_str()))
        .map(|l| l.length())
        .ok_or("roundabout lacks approach lanes")?;
    let mut order = sides.clone();
    order.shuffle(rng);
    let backs = solve_backs(schema, rng, 8.0, in_len - 8.0)?;
    for (i, m) in schema.maneuvers.iter().enumerate() {
        let from = order[i];
        let exits: Vec<Side> = sides.iter().copied().filter(|x| *x != from).collect();
        let to = exits[rng.random_range(0..exits.len())];
        let path = maps::lane_path(map, &format!("{}_in", from.as_str()), &format!("{}_out", to.as_str()))
            .ok_or("roundabout exit unreachable")?;
        let ids: Vec<&str> = path.iter().map(|x| x.as_str()).collect();
        let route = route_from(map, &ids, in_len - backs[i]).ok_or("broken roundabout lanes")?;
        s.cavs.push(make_cav(&m.cav, route));
    }
    let circ = schema.role_count(RoleKind::Circulating) as usize;
    if circ > sides.len() {
        return Err(format!("{circ} circulating vehicles exceed {} ring pieces", sides.len()));
    }
    let start = rng.random_range(0..sides.len());
    for k in 0..circ {
        let side = sides[(start + k) % sides.len()];
        s.background_actors.push(follower(
            format!("ring{}", k + 1),
            &format!("ring_{}_to", side.as_str()),
            0.0,
            6.0,
        ));
    }
    Ok(finish(s))
}

/// Two-way road: `dir` +1 travels east on `east`, -1 west on `west`.
struct RoadFrame {
    length: f64,
}

impl RoadFrame {
    fn lane_y(dir: f64) -> f64 {
        -dir * HALF
    }

    /// World point at station `x` along travel direction `dir`, on the lane with centre `y`.
    fn at(&self, dir: f64, x: f64, y: f64) -> Vec2 {
        if dir > 0.0 {
            Vec2::new(x, y)
        } else {
            Vec2::new(self.length - x, y)
        }
    }
}

fn two_lane(schema: &ScenarioSchema, map: &LaneGraph, rng: &mut ChaCha8Rng) -> Result<Scenario, String> {
    let mut s = shell(schema, map);
    let length = map.lane("east").map(|l| l.length()).ok_or("road lacks an east lane")?;
    let road = RoadFrame { length };
    let end = length - 10.0;
    let ego_s0 = rng.random_range(10.0..30.0);
    let own = RoadFrame::lane_y(1.0);
    let other = RoadFrame::lane_y(-1.0);
    let parked = schema.role_count(RoleKind::ParkedObstacle) as usize;
    let work = schema.role_count(RoleKind::WorkZone) as usize;
    let lead = schema.role_count(RoleKind::Lead) as usize;
    let overtaking = schema.maneuvers[0].intent == ManeuverIntent::Overtake;

    // blocked stretch of the ego lane [x_obs, x_obs + len]
    let mut x_obs = ego_s0 + rng.random_range(70.0..110.0);
    let mut block_len = 0.0;
    let mut lead_station = None;
    if lead > 0 {
        let gap = rng.random_range(22.0..32.0);
        let v_lead = 3.0;
        let st = ego_s0 + gap;
        let catch = (gap - 8.0) / (SPEED - v_lead);
        x_obs = st + v_lead * catch - 6.0;
        block_len = 30.0;
        lead_station = Some((st, v_lead));
    }
    if overtaking && parked > 0 {
        block_len = 5.0 * parked as f64 + 2.0 * (parked as f64 - 1.0);
    }
    if work > 0 {
        block_len = 16.0 * work as f64;
    }
    if x_obs + block_len + 40.0 > end {
        return Err("blocked stretch does not fit on the road".into());
    }

    for (i, m) in schema.maneuvers.iter().enumerate() {
        let dir = if i == 0 { 1.0 } else { -1.0 };
        let y = RoadFrame::lane_y(dir);
        let oy = RoadFrame::lane_y(-dir);
        let s0 = if i == 0 { ego_s0 } else { rng.random_range(10.0..40.0) };
        let route = if m.intent == ManeuverIntent::Overtake && i == 0 && block_len > 0.0 {
            vec![
                road.at(dir, s0, y),
                road.at(dir, x_obs - 20.0, y),
                road.at(dir, x_obs - 8.0, oy),
                road.at(dir, x_obs + block_len + 8.0, oy),
                road.at(dir, x_obs + block_len + 20.0, y),
                road.at(dir, end, y),
            ]
        } else {
            vec![road.at(dir, s0, y), road.at(dir, 0.5 * (s0 + end), y), road.at(dir, end, y)]
        };
        if route.windows(2).any(|w| (w[1] - w[0]).dot(Vec2::new(dir, 0.0)) <= 0.0) {
            return Err("route stations are not increasing".into());
        }
        s.cavs.push(make_cav(&m.cav, route));
    }

    let mut occ = Occupancy::default();
    occ.take("east", ego_s0);
    if let Some(c2) = s.cavs.get(1) {
        occ.take("west", length - c2.spawn.x);
    }
    if let Some((st, v)) = lead_station {
        s.background_actors.push(follower("lead1".into(), "east", st, v));
        occ.take("east", st);
    }
    for k in 0..parked {
        let x = x_obs + 7.0 * k as f64;
        let y = if overtaking { own } else { own - HALF - 1.3 };
        s.static_objects.push(StaticObject {
            id: format!("parked{}", k + 1),
            label: "vehicle.parked".into(),
            bbox: OrientedBox::new(Vec2::new(x + 2.5, y), 5.0, 2.0, 0.0),
        });
    }
    for w in 0..work {
        let x0 = x_obs + 16.0 * w as f64;
        for k in 0..6 {
            let lat = match k {
                0 => 1.3,
                1 => 0.6,
                _ => 0.0,
            };
            s.static_objects.push(StaticObject {
                id: format!("cone{}_{}", w + 1, k + 1),
                label: "construction.cone".into(),
                bbox: OrientedBox::new(Vec2::new(x0 + 3.0 * k as f64, own - lat), 0.5, 0.5, 0.0),
            });
        }
        s.static_objects.push(StaticObject {
            id: format!("barrier{}", w + 1),
            label: "construction.barrier".into(),
            bbox: OrientedBox::new(Vec2::new(x0 + 10.0, own - 1.0), 8.0, 0.6, 0.0),
        });
    }
    // oncoming traffic meets the ego beside the blocked stretch
    for k in 0..schema.role_count(RoleKind::Oncoming) as usize {
        let meet = x_obs + rng.random_range(0.0..block_len.max(10.0) + 20.0) + 15.0 * k as f64;
        let t_meet = (x_obs - ego_s0) / SPEED;
        let want = length - meet - SPEED * t_meet;
        let st = occ
            .fit("west", want.max(2.0), 2.0, length - 20.0, SPACING)
            .ok_or("no room for oncoming traffic")?;
        occ.take("west", st);
        s.background_actors.push(follower(format!("oncoming{}", k + 1), "west", st, SPEED));
    }
    for k in 0..schema.role_count(RoleKind::Pedestrian) as usize {
        let x = (x_obs + block_len + 35.0 + 4.0 * k as f64).min(end - 5.0);
        let (y0, y1) = if k % 2 == 0 { (own - 6.0, other + 6.0) } else { (other + 6.0, own - 6.0) };
        let speed = rng.random_range(1.2..1.8);
        let arrive = (x - ego_s0) / SPEED;
        let t0 = (arrive - 4.0 / speed + rng.random_range(-1.5..1.0)).max(0.0);
        s.background_actors
            .push(pedestrian(format!("ped{}", k + 1), walk(&[Vec2::new(x, y0), Vec2::new(x, y1)], speed, t0)));
    }
    Ok(finish(s))
}

fn highway(schema: &ScenarioSchema, map: &LaneGraph, rng: &mut ChaCha8Rng) -> Result<Scenario, String> {
    let mut s = shell(schema, map);
    let ramp = map.lane("ramp").ok_or("highway lacks a ramp")?;
    let ra = map.lane("main_right_a").ok_or("highway lacks main_right_a")?;
    let left = map.lane("main_left").ok_or("highway lacks main_left")?;
    let merge_x = ra.length();
    let total = left.length();
    let ramp_len = ramp.length();
    let backs = solve_backs(schema, rng, 15.0, (ramp_len - 5.0).min(merge_x - 5.0))?;
    let mut used: Vec<&str> = Vec::new();
    let mut occ = Occupancy::default();
    let right_y = ra.centerline()[0].y;
    let left_y = left.centerline()[0].y;
    let end = total - 10.0;
    let mut ego_lane = ("", 0.0);
    for (i, m) in schema.maneuvers.iter().enumerate() {
        let back = backs[i];
        let route = match m.intent {
            ManeuverIntent::Merge => {
                if used.contains(&"ramp") {
                    return Err("only one CAV can start on the ramp".into());
                }
                used.push("ramp");
                occ.take("ramp", ramp_len - back);
                let mut r = route_from(map, &["ramp", "main_right_b"], ramp_len - back).ok_or("broken ramp")?;
                r.retain(|p| p.x <= end + 1e-9);
                r.push(Vec2::new(end, right_y));
                r.dedup_by(|b, a| a.dist(*b) < 1e-6);
                r
            }
            _ => {
                let mut lanes = ["main_right_a", "main_left"];
                if rng.random_bool(0.5) {
                    lanes.swap(0, 1);
                }
                let Some(lane) = lanes.into_iter().find(|l| !used.contains(l)) else {
                    return Err("no free mainline lane".into());
                };
                used.push(lane);
                let x0 = merge_x - back;
                occ.take(lane, x0);
                let (y, oy) = if lane == "main_left" { (left_y, right_y) } else { (right_y, left_y) };
                if m.intent == ManeuverIntent::LaneChange {
                    let xl = merge_x + rng.random_range(-20.0..20.0);
                    if xl - 10.0 <= x0 {
                        return Err("lane change starts before the spawn".into());
                    }
                    vec![
                        Vec2::new(x0, y),
                        Vec2::new(xl, y),
                        Vec2::new(xl + 25.0, oy),
                        Vec2::new(end, oy),
                    ]
                } else {
                    vec![Vec2::new(x0, y), Vec2::new(merge_x, y), Vec2::new(end, y)]
                }
            }
        };
        if i == 0 {
            ego_lane = (used[0], if used[0] == "ramp" { ramp_len - back } else { merge_x - back });
        }
        s.cavs.push(make_cav(&m.cav, route));
    }
    for k in 0..schema.role_count(RoleKind::Mainline) as usize {
        let lane = if k % 2 == 0 { "main_right_a" } else { "main_left" };
        let want = merge_x - (backs[0] + rng.random_range(-10.0..10.0) + 12.0 * (k / 2) as f64);
        let st = occ
            .fit(lane, want, 2.0, merge_x - 5.0, -SPACING)
            .or_else(|| occ.fit(lane, want, 2.0, merge_x - 5.0, SPACING))
            .ok_or("no room for mainline traffic")?;
        occ.take(lane, st);
        let v = rng.random_range(7.0..10.0);
        s.background_actors.push(follower(format!("mainline{}", k + 1), lane, st, v));
    }
    for k in 0..schema.role_count(RoleKind::Lead) as usize {
        let (lane, st0) = ego_lane;
        let len = map.lane(lane).map(|l| l.length()).unwrap_or(0.0);
        let st = occ
            .fit(lane, st0 + 25.0 + 12.0 * k as f64, 0.0, len - 5.0, SPACING)
            .ok_or("no room for a lead vehicle")?;
        occ.take(lane, st);
        s.background_actors.push(follower(format!("lead{}", k + 1), lane, st, 5.0));
    }
    Ok(finish(s))
}

#[cfg(test)]
mod tests {
    use super::super::{propose, template, Maneuver, Proposer};
    use super::*;
    use crate::scenario::Category;

    fn schema(topology: Topology, intents: &[ManeuverIntent]) -> ScenarioSchema {
        ScenarioSchema {
            category: Category::IntersectionDeadlockResolution,
            topology,
            maneuvers: intents
                .iter()
                .enumerate()
                .map(|(i, &intent)| Maneuver {
                    cav: format!("cav{}", i + 1),
                    intent,
                })
                .collect(),
            constraints: vec![],
            actor_roles: vec![],
            weather: crate::scenario::Weather::Default,
            variant: 5,
        }
    }

    #[test]
    fn left_turn_turns_about_ninety_degrees() {
        let s = instantiate(&schema(Topology::Intersection4way, &[ManeuverIntent::LeftTurn])).unwrap();
        let r = &s.cavs[0].route.waypoints;
        let h0 = (r[1] - r[0]).angle();
        let h1 = (r[r.len() - 1] - r[r.len() - 2]).angle();
        let turn = crate::geometry::wrap_angle(h1 - h0).to_degrees();
        assert!((turn - 90.0).abs() < 5.0, "{turn}");
    }

    #[test]
    fn too_many_cavs_is_infeasible() {
        let six = [ManeuverIntent::Straight; 6];
        let err = instantiate(&schema(Topology::Straight2lane, &six)).unwrap_err();
        assert!(matches!(err, GenError::Infeasible(_)), "{err}");
    }

    #[test]
    fn missing_topology_is_no_region() {
        let lib = vec![maps::straight_2lane(200.0)];
        let err = instantiate_with(&schema(Topology::Roundabout, &[ManeuverIntent::RoundaboutPass]), &lib).unwrap_err();
        assert!(matches!(err, GenError::NoMatchingRegion(Topology::Roundabout)));
    }

    #[test]
    fn unsatisfiable_offsets_are_infeasible() {
        let mut s = schema(Topology::Intersection4way, &[ManeuverIntent::Straight, ManeuverIntent::Straight]);
        s.constraints.push(super::super::TimingConstraint {
            a: "cav1".into(),
            b: "cav2".into(),
            min_offset_s: 30.0,
            max_offset_s: 31.0,
        });
        assert!(matches!(instantiate(&s), Err(GenError::Infeasible(_))));
    }

    #[test]
    fn templates_instantiate_for_every_category() {
        for &c in Category::ALL {
            for sch in propose(c, 12, &mut Proposer::Template { seed: 11 }).unwrap() {
                let s = instantiate(&sch).unwrap_or_else(|e| panic!("{c}: {e}\n{sch:?}"));
                assert!(validate_scenario(&s).is_empty());
                assert_eq!(s.cavs.len(), sch.maneuvers.len());
            }
        }
        let a = instantiate(&template(Category::PreCrash, 0, 1)).unwrap();
        let b = instantiate(&template(Category::PreCrash, 0, 1)).unwrap();
        assert_eq!(a, b);
    }
}
