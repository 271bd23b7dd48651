use crate::geometry::{cumulative_lengths, discrete_frechet, point_at_station, OrientedBox, Vec2};
use crate::scenario::{ActorBehavior, Scenario};
use crate::sim::{lane_chain, replay_actor_step, DT};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;

const POS_Q: f64 = 0.5;
const YAW_Q_DEG: f64 = 5.0;
/// Routes closer than this everywhere count as duplicates, m.
pub const FRECHET_DUP_M: f64 = 2.0;

fn q(x: f64, step: f64) -> i64 {
    (x / step).round() as i64
}

fn qp(out: &mut String, p: Vec2) {
    let _ = write!(out, "{},{};", q(p.x, POS_Q), q(p.y, POS_Q));
}

fn qyaw(yaw: f64) -> i64 {
    let k = q(yaw.to_degrees(), YAW_Q_DEG);
    k.rem_euclid((360.0 / YAW_Q_DEG) as i64)
}

/// Hash of the normalized labels plus spawn and route geometry quantized at
/// 0.5 m / 5 degrees. Entity ids do not enter it.
pub fn fingerprint(s: &Scenario) -> String {
    let mut t = String::new();
    let topo = s.map.topology.map_or("none", |x| x.as_str());
    let _ = write!(t, "{}|{}|{}|{}|{}|", s.category, topo, s.map.map_id, s.weather, s.cavs.len());
    let mut cavs: Vec<String> = s
        .cavs
        .iter()
        .map(|c| {
            let mut x = String::new();
            qp(&mut x, c.spawn.position());
            let _ = write!(x, "{}|{}|", qyaw(c.spawn.yaw), q(c.spawn_speed, POS_Q));
            for w in &c.route.waypoints {
                qp(&mut x, *w);
            }
            x
        })
        .collect();
    cavs.sort();
    let mut actors: Vec<String> = s
        .background_actors
        .iter()
        .filter_map(|a| {
            let (pose, v) = a.spawn_state(&s.map)?;
            let mut x = format!("{}|", a.class);
            qp(&mut x, pose.position());
            let _ = write!(x, "{}|{}", qyaw(pose.yaw), q(v, POS_Q));
            Some(x)
        })
        .collect();
    actors.sort();
    let mut statics: Vec<String> = s
        .static_objects
        .iter()
        .map(|o| {
            let mut x = format!("{}|", o.label);
            qp(&mut x, o.bbox.center);
            let _ = write!(x, "{}", qyaw(o.bbox.yaw));
            x
        })
        .collect();
    statics.sort();
    for part in [cavs, actors, statics] {
        t.push_str(&part.join("/"));
        t.push('#');
    }
    hex::encode(Sha256::digest(t.as_bytes()))
}

/// Points every `step` metres along a polyline, ends included.
fn resample(pts: &[Vec2], step: f64) -> Vec<Vec2> {
    if pts.len() < 2 {
        return pts.to_vec();
    }
    let cum = cumulative_lengths(pts);
    let total = cum[cum.len() - 1];
    let n = ((total / step).ceil() as usize).max(1);
    (0..=n)
        .map(|i| point_at_station(pts, &cum, total * i as f64 / n as f64).0)
        .collect()
}

/// Largest per-CAV route Frechet distance, CAVs paired in id order; `None`
/// when the scenarios are not comparable.
fn route_distance(pool: &[Scenario], ia: usize, ib: usize, cache: &mut [Option<Vec<Vec<Vec2>>>]) -> Option<f64> {
    let (a, b) = (&pool[ia], &pool[ib]);
    if a.cavs.len() != b.cavs.len() || a.map.map_id != b.map.map_id {
        return None;
    }
    let mut ca: Vec<&crate::scenario::CavSpec> = a.cavs.iter().collect();
    let mut cb: Vec<&crate::scenario::CavSpec> = b.cavs.iter().collect();
    ca.sort_by(|x, y| x.id.cmp(&y.id));
    cb.sort_by(|x, y| x.id.cmp(&y.id));
    // endpoints bound the distance from below
    for (x, y) in ca.iter().zip(&cb) {
        let (wx, wy) = (&x.route.waypoints, &y.route.waypoints);
        if wx[0].dist(wy[0]) >= FRECHET_DUP_M || wx[wx.len() - 1].dist(wy[wy.len() - 1]) >= FRECHET_DUP_M {
            return Some(f64::INFINITY);
        }
    }
    for &i in &[ia, ib] {
        if cache[i].is_none() {
            let mut cs: Vec<&crate::scenario::CavSpec> = pool[i].cavs.iter().collect();
            cs.sort_by(|x, y| x.id.cmp(&y.id));
            cache[i] = Some(cs.iter().map(|c| resample(&c.route.waypoints, 1.0)).collect());
        }
    }
    let ra = cache[ia].as_ref().expect("cached");
    let rb = cache[ib].as_ref().expect("cached");
    Some(ra.iter().zip(rb).map(|(x, y)| discrete_frechet(x, y)).fold(0.0, f64::max))
}

/// Keeps the first member of each fingerprint group, then drops any later
/// scenario whose routes all lie within 2 m (discrete Frechet on 1 m
/// resampled routes) of an earlier survivor.
pub fn duplicate_filter(pool: &[Scenario]) -> Vec<Scenario> {
    let mut seen = std::collections::BTreeSet::new();
    let mut keep: Vec<usize> = Vec::new();
    let mut cache: Vec<Option<Vec<Vec<Vec2>>>> = vec![None; pool.len()];
    for (i, s) in pool.iter().enumerate() {
        if !seen.insert(fingerprint(s)) {
            continue;
        }
        let dup = keep.iter().any(|&k| {
            route_distance(pool, k, i, &mut cache).is_some_and(|d| d < FRECHET_DUP_M)
        });
        if !dup {
            keep.push(i);
        }
    }
    keep.into_iter().map(|i| pool[i].clone()).collect()
}

/// Earliest time at which two boxes moving at constant velocities touch;
/// `Some(0.0)` if they already overlap, `None` if they never meet.
pub fn time_to_contact(a: &OrientedBox, va: Vec2, b: &OrientedBox, vb: Vec2) -> Option<f64> {
    let w = vb - va;
    let (a1, a2) = a.axes();
    let (b1, b2) = b.axes();
    let ca = a.corners();
    let cb = b.corners();
    let mut enter = f64::NEG_INFINITY;
    let mut exit = f64::INFINITY;
    for n in [a1, a2, b1, b2] {
        let (amin, amax) = ca.iter().map(|p| p.dot(n)).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(x), h.max(x)));
        let (bmin, bmax) = cb.iter().map(|p| p.dot(n)).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(x), h.max(x)));
        let r = w.dot(n);
        if r.abs() < 1e-12 {
            if bmax < amin || bmin > amax {
                return None;
            }
            continue;
        }
        let t1 = (amin - bmax) / r;
        let t2 = (amax - bmin) / r;
        enter = enter.max(t1.min(t2));
        exit = exit.min(t1.max(t2));
    }
    (enter <= exit && exit >= 0.0).then(|| enter.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifficultyBand {
    pub min_ttc_low: f64,
    pub min_ttc_high: f64,
}

impl DifficultyBand {
    pub fn new(low: f64, high: f64) -> Result<Self, String> {
        if !(low > 0.0 && high > low && high.is_finite()) {
            return Err(format!("difficulty band needs 0 < low < high, got [{low}, {high}]"));
        }
        Ok(Self {
            min_ttc_low: low,
            min_ttc_high: high,
        })
    }

    pub fn contains(&self, ttc: f64) -> bool {
        ttc >= self.min_ttc_low && ttc <= self.min_ttc_high
    }
}

impl Default for DifficultyBand {
    fn default() -> Self {
        Self {
            min_ttc_low: 0.5,
            min_ttc_high: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenResult {
    /// `None` means no conflict ever appears (infinite TTC).
    pub min_ttc: Option<f64>,
    pub accept: bool,
    pub pair: Option<(String, String)>,
    pub tick: Option<u64>,
}

struct Mover {
    id: String,
    cav: bool,
    length: f64,
    width: f64,
    motion: Motion,
}

enum Motion {
    Path { pts: Vec<Vec2>, cum: Vec<f64>, s0: f64, v: f64 },
    Track(crate::scenario::ActorTrack),
    Fixed(OrientedBox),
}

impl Mover {
    /// Box and velocity at `t`, or `None` once the agent has left.
    fn at(&self, t: f64) -> Option<(OrientedBox, Vec2)> {
        match &self.motion {
            Motion::Path { pts, cum, s0, v } => {
                let s = s0 + v * t;
                if s > cum[cum.len() - 1] + 1e-9 {
                    return None;
                }
                let (p, h) = point_at_station(pts, cum, s);
                Some((OrientedBox::new(p, self.length, self.width, h), Vec2::from_angle(h) * *v))
            }
            Motion::Track(tr) => {
                let (pose, v) = replay_actor_step(tr, t);
                Some((
                    OrientedBox::new(pose.position(), self.length, self.width, pose.yaw),
                    Vec2::from_angle(pose.yaw) * v,
                ))
            }
            Motion::Fixed(b) => Some((*b, Vec2::ZERO)),
        }
    }
}

fn movers(s: &Scenario) -> Vec<Mover> {
    let mut out = Vec::new();
    for c in &s.cavs {
        let cum0 = cumulative_lengths(&c.route.waypoints);
        let s0 = crate::geometry::project_on_polyline(c.spawn.position(), &c.route.waypoints, &cum0)
            .map_or(0.0, |p| p.station);
        out.push(Mover {
            id: c.id.clone(),
            cav: true,
            length: c.footprint.length,
            width: c.footprint.width,
            motion: Motion::Path {
                pts: c.route.waypoints.clone(),
                cum: cum0,
                s0,
                v: c.spawn_speed,
            },
        });
    }
    for a in &s.background_actors {
        let motion = match &a.behavior {
            ActorBehavior::Replay(tr) => Motion::Track(tr.clone()),
            ActorBehavior::ReactiveFollow { lane, station, speed, .. } => {
                let pts = lane_chain(&s.map, lane, station + 2000.0);
                if pts.len() < 2 {
                    continue;
                }
                let cum = cumulative_lengths(&pts);
                Motion::Path { pts, cum, s0: *station, v: *speed }
            }
        };
        out.push(Mover {
            id: a.id.clone(),
            cav: false,
            length: a.footprint.length,
            width: a.footprint.width,
            motion,
        });
    }
    for o in &s.static_objects {
        out.push(Mover {
            id: o.id.clone(),
            cav: false,
            length: o.bbox.length,
            width: o.bbox.width,
            motion: Motion::Fixed(o.bbox),
        });
    }
    out
}

/// Rolls every agent out at constant speed along its route or lane chain
/// (replay actors follow their tracks). At each tick the constant-velocity
/// time to contact is evaluated for every pair involving a CAV; a pair's TTC
/// is sampled when a predicted contact first appears (conflict onset), and the
/// minimum over all onsets is returned with the pair and tick.
pub fn min_ttc(s: &Scenario) -> (Option<f64>, Option<(String, String)>, Option<u64>) {
    let ms = movers(s);
    let ticks = (s.max_duration_s / DT).round() as u64;
    let mut pairs: Vec<(usize, usize, bool)> = Vec::new();
    for i in 0..ms.len() {
        for j in (i + 1)..ms.len() {
            if ms[i].cav || ms[j].cav {
                pairs.push((i, j, false));
            }
        }
    }
    let mut best: (Option<f64>, Option<(String, String)>, Option<u64>) = (None, None, None);
    for k in 0..=ticks {
        let t = k as f64 * DT;
        let states: Vec<Option<(OrientedBox, Vec2)>> = ms.iter().map(|m| m.at(t)).collect();
        for (i, j, predicted) in pairs.iter_mut() {
            let ttc = match (&states[*i], &states[*j]) {
                (Some((ba, va)), Some((bb, vb))) => time_to_contact(ba, *va, bb, *vb),
                _ => None,
            };
            if let Some(x) = ttc {
                if !*predicted && best.0.is_none_or(|b| x < b) {
                    best = (Some(x), Some((ms[*i].id.clone(), ms[*j].id.clone())), Some(k));
                }
            }
            *predicted = ttc.is_some();
        }
    }
    best
}

/// Accepts iff the minimum constant-velocity TTC lies inside `band`.
pub fn difficulty_screen(s: &Scenario, band: &DifficultyBand) -> ScreenResult {
    let (ttc, pair, tick) = min_ttc(s);
    ScreenResult {
        min_ttc: ttc,
        accept: ttc.is_some_and(|x| band.contains(x)),
        pair,
        tick,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_on_boxes() {
        let a = OrientedBox::new(Vec2::new(0.0, 0.0), 4.0, 2.0, 0.0);
        let b = OrientedBox::new(Vec2::new(8.0, 0.0), 4.0, 2.0, std::f64::consts::PI);
        let t = time_to_contact(&a, Vec2::new(10.0, 0.0), &b, Vec2::new(-10.0, 0.0)).unwrap();
        assert!((t - 0.2).abs() < 1e-12);
        assert_eq!(time_to_contact(&a, Vec2::new(-1.0, 0.0), &b, Vec2::new(1.0, 0.0)), None);
        assert_eq!(time_to_contact(&a, Vec2::ZERO, &a, Vec2::ZERO), Some(0.0));
    }

    #[test]
    fn parallel_lanes_never_touch() {
        let a = OrientedBox::new(Vec2::new(0.0, 0.0), 4.0, 2.0, 0.0);
        let b = OrientedBox::new(Vec2::new(30.0, 3.5), 4.0, 2.0, 0.0);
        assert_eq!(time_to_contact(&a, Vec2::new(10.0, 0.0), &b, Vec2::new(-10.0, 0.0)), None);
    }
}
