//! Conversion of recorded driving logs into executable scenarios: ingestion,
//! rigid registration against a lane graph, lane snapping, role assignment
//! and export.

use crate::geometry::{polyline_length, wrap_angle, OrientedBox, Pose2, Vec2};
use crate::rng::substream;
use crate::scenario::{
    parse_lane_graph, serialize_lane_graph, serialize_scenario_dir, validate_scenario, ActorBehavior, ActorClass,
    ActorSpec, ActorTrack, Bucket, CavSpec, Category, Footprint, InfraSpec, LaneGraph, RouteSpec, Scenario,
    ScenarioError, StaticObject, TrackFrame, Violation, Weather,
};
use crate::sim::replay_actor_step;
use crate::textio::fmt_f64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub const LOG_HEADER: &str = "# coopbench-log v1";
/// Tracks are only snapped to lanes whose tangent lies within this angle.
pub const HEADING_GATE: f64 = std::f64::consts::FRAC_PI_4;
/// Registration fails above this RMS lateral residual (m).
pub const MAX_ALIGNMENT_RMS: f64 = 2.0;
pub const MIN_ALIGNMENT_POINTS: usize = 20;
const MAX_ALIGNMENT_POINTS: usize = 300;
const THETA_RANGE_DEG: i32 = 10;
const SEARCH_RADIUS: i32 = 40;
/// Residuals beyond this count as outliers in the registration objective.
const TRUNCATION: f64 = 2.0;

#[derive(Debug, thiserror::Error)]
pub enum Real2SimError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("log line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("log designates no CAV")]
    NoCav,
    #[error("designated CAV {0} has no track")]
    UnknownCav(String),
    #[error("tracks share no common time window")]
    NoCommonWindow,
    #[error("map {0} is neither embedded nor in the library")]
    UnknownMap(String),
    #[error("only {found} on-road vehicle points, need {MIN_ALIGNMENT_POINTS}")]
    NotEnoughPoints { found: usize },
    #[error("alignment failed: RMS residual {rms:.3} m over {points} points")]
    AlignmentFailed { rms: f64, points: usize, history: Vec<f64> },
    #[error("converted scenario failed validation: {}", .violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Validation {
        violations: Vec<Violation>,
        report: Box<ConversionReport>,
    },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum MapRef {
    Library(String),
    Embedded(LaneGraph),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogTrack {
    pub id: String,
    pub class: ActorClass,
    pub footprint: Footprint,
    pub track: ActorTrack,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrivingLog {
    pub id: String,
    pub map: MapRef,
    pub rate_hz: f64,
    pub category: Option<Category>,
    pub cavs: Vec<String>,
    pub infrastructure: Vec<InfraSpec>,
    pub objects: Vec<StaticObject>,
    pub tracks: Vec<LogTrack>,
}

impl DrivingLog {
    pub fn track(&self, id: &str) -> Option<&LogTrack> {
        self.tracks.iter().find(|t| t.id == id)
    }

    /// Latest start and earliest end over all tracks.
    pub fn window(&self) -> (f64, f64) {
        let t0 = self.tracks.iter().map(|t| t.track.start_time()).fold(f64::NEG_INFINITY, f64::max);
        let t1 = self.tracks.iter().map(|t| t.track.end_time()).fold(f64::INFINITY, f64::min);
        (t0, t1)
    }

    pub fn check(&self) -> Result<(), Real2SimError> {
        if self.cavs.is_empty() {
            return Err(Real2SimError::NoCav);
        }
        for c in &self.cavs {
            if self.track(c).is_none() {
                return Err(Real2SimError::UnknownCav(c.clone()));
            }
        }
        let (t0, t1) = self.window();
        if !(t1 > t0) {
            return Err(Real2SimError::NoCommonWindow);
        }
        Ok(())
    }
}

/// Rigid 2D transform `p -> R(theta) p + (dx, dy)` from log to map frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AlignmentTransform {
    pub dx: f64,
    pub dy: f64,
    pub theta: f64,
}

impl AlignmentTransform {
    pub const IDENTITY: AlignmentTransform = AlignmentTransform {
        dx: 0.0,
        dy: 0.0,
        theta: 0.0,
    };

    pub fn new(dx: f64, dy: f64, theta: f64) -> Self {
        Self { dx, dy, theta }
    }

    pub fn is_finite(&self) -> bool {
        self.dx.is_finite() && self.dy.is_finite() && self.theta.is_finite()
    }

    pub fn apply(&self, p: Vec2) -> Vec2 {
        p.rotate(self.theta) + Vec2::new(self.dx, self.dy)
    }

    pub fn apply_pose(&self, p: Pose2) -> Pose2 {
        let q = self.apply(p.position());
        Pose2::new(q.x, q.y, wrap_angle(p.yaw + self.theta))
    }

    pub fn inverse(&self) -> Self {
        let t = Vec2::new(-self.dx, -self.dy).rotate(-self.theta);
        Self::new(t.x, t.y, -self.theta)
    }

    /// `self` applied after `first`.
    pub fn after(&self, first: &AlignmentTransform) -> Self {
        let t = Vec2::new(first.dx, first.dy).rotate(self.theta) + Vec2::new(self.dx, self.dy);
        Self::new(t.x, t.y, self.theta + first.theta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub transform: AlignmentTransform,
    /// RMS lateral residual of the registration points (m).
    pub rms: f64,
    /// Registration objective after the coarse search and each accepted refinement.
    pub history: Vec<f64>,
    pub points: usize,
}

// ---------------------------------------------------------------- log format

fn fmt_err(line: usize, message: impl Into<String>) -> Real2SimError {
    Real2SimError::Format {
        line,
        message: message.into(),
    }
}

pub fn ingest_log(path: &Path) -> Result<DrivingLog, Real2SimError> {
    let text = fs::read_to_string(path).map_err(|source| Real2SimError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut log = parse_log(&text)?;
    if log.id.is_empty() {
        log.id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "log".into());
    }
    Ok(log)
}

/// Parses the line-oriented log format. Header lines come first:
/// `id`, `map <id>` or a `lanes` ... `end` block, `rate <hz>`, optional
/// `category`, `cavs <ids>`, `infra id x y yaw range`,
/// `object id label x y yaw length width`; then one
/// `track id class length width` block per actor holding `t x y yaw v` rows
/// and closed by `end`.
pub fn parse_log(text: &str) -> Result<DrivingLog, Real2SimError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, LOG_HEADER)) => {}
        _ => return Err(fmt_err(1, format!("expected header {LOG_HEADER:?}"))),
    }
    let mut id = String::new();
    let mut map = None;
    let mut rate_hz = None;
    let mut category = None;
    let mut cavs: Option<Vec<String>> = None;
    let mut infrastructure = Vec::new();
    let mut objects = Vec::new();
    let mut tracks: Vec<LogTrack> = Vec::new();

    let nums = |n: usize, toks: &[&str], want: usize| -> Result<Vec<f64>, Real2SimError> {
        if toks.len() != want {
            return Err(fmt_err(n, format!("expected {want} numeric fields, got {}", toks.len())));
        }
        toks.iter()
            .map(|t| t.parse::<f64>().map_err(|_| fmt_err(n, format!("not a number: {t}"))))
            .collect()
    };

    while let Some((n, line)) = lines.next() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks[0] {
            "id" if toks.len() == 2 => id = toks[1].to_string(),
            "map" if toks.len() == 2 => map = Some(MapRef::Library(toks[1].to_string())),
            "lanes" => {
                let mut body = String::new();
                loop {
                    match lines.next() {
                        Some((_, "end")) => break,
                        Some((_, l)) => {
                            body.push_str(l);
                            body.push('\n');
                        }
                        None => return Err(fmt_err(n, "unterminated lanes block")),
                    }
                }
                let g = parse_lane_graph(&body).map_err(|e| fmt_err(n, format!("embedded lane graph: {e}")))?;
                map = Some(MapRef::Embedded(g));
            }
            "rate" => {
                let r = nums(n, &toks[1..], 1)?[0];
                if !(r > 0.0 && r.is_finite()) {
                    return Err(fmt_err(n, "rate must be positive"));
                }
                rate_hz = Some(r);
            }
            "category" if toks.len() == 2 => {
                category = Some(Category::parse(toks[1]).ok_or_else(|| fmt_err(n, format!("unknown category {}", toks[1])))?);
            }
            "cavs" => cavs = Some(toks[1..].iter().map(|s| s.to_string()).collect()),
            "infra" if toks.len() == 6 => {
                let v = nums(n, &toks[2..], 4)?;
                infrastructure.push(InfraSpec {
                    id: toks[1].to_string(),
                    pose: Pose2::new(v[0], v[1], v[2]),
                    sensor_range: v[3],
                });
            }
            "object" if toks.len() == 8 => {
                let v = nums(n, &toks[3..], 5)?;
                objects.push(StaticObject {
                    id: toks[1].to_string(),
                    label: toks[2].to_string(),
                    bbox: OrientedBox::new(Vec2::new(v[0], v[1]), v[3], v[4], v[2]),
                });
            }
            "track" if toks.len() == 5 => {
                let class = ActorClass::parse(toks[2]).ok_or_else(|| fmt_err(n, format!("unknown class {}", toks[2])))?;
                let fp = nums(n, &toks[3..], 2)?;
                let mut frames = Vec::new();
                loop {
                    match lines.next() {
                        Some((_, "end")) => break,
                        Some((_, "")) => {}
                        Some((m, row)) => {
                            let v = nums(m, &row.split_whitespace().collect::<Vec<_>>(), 5)?;
                            if let Some(prev) = frames.last().map(|f: &TrackFrame| f.t) {
                                if !(v[0] > prev) {
                                    return Err(fmt_err(m, "track timestamps must increase"));
                                }
                            }
                            frames.push(TrackFrame {
                                t: v[0],
                                x: v[1],
                                y: v[2],
                                yaw: v[3],
                                v: v[4],
                            });
                        }
                        None => return Err(fmt_err(n, format!("unterminated track {}", toks[1]))),
                    }
                }
                if frames.is_empty() {
                    return Err(fmt_err(n, format!("track {} has no rows", toks[1])));
                }
                if tracks.iter().any(|t| t.id == toks[1]) {
                    return Err(fmt_err(n, format!("duplicate track {}", toks[1])));
                }
                tracks.push(LogTrack {
                    id: toks[1].to_string(),
                    class,
                    footprint: Footprint {
                        length: fp[0],
                        width: fp[1],
                    },
                    track: ActorTrack::new(frames),
                });
            }
            other => return Err(fmt_err(n, format!("unrecognised record {other:?}"))),
        }
    }
    let map = map.ok_or_else(|| fmt_err(1, "missing `map` or `lanes` header"))?;
    let rate_hz = rate_hz.ok_or_else(|| fmt_err(1, "missing `rate` header"))?;
    for t in &mut tracks {
        t.track.rate_hz = Some(rate_hz);
    }
    let log = DrivingLog {
        id,
        map,
        rate_hz,
        category,
        cavs: cavs.unwrap_or_default(),
        infrastructure,
        objects,
        tracks,
    };
    log.check()?;
    Ok(log)
}

pub fn serialize_log(log: &DrivingLog) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{LOG_HEADER}");
    if !log.id.is_empty() {
        let _ = writeln!(s, "id {}", log.id);
    }
    match &log.map {
        MapRef::Library(id) => {
            let _ = writeln!(s, "map {id}");
        }
        MapRef::Embedded(g) => {
            s.push_str("lanes\n");
            s.push_str(&serialize_lane_graph(g));
            s.push_str("end\n");
        }
    }
    let _ = writeln!(s, "rate {}", fmt_f64(log.rate_hz));
    if let Some(c) = log.category {
        let _ = writeln!(s, "category {c}");
    }
    let _ = writeln!(s, "cavs {}", log.cavs.join(" "));
    for i in &log.infrastructure {
        let _ = writeln!(
            s,
            "infra {} {} {} {} {}",
            i.id,
            fmt_f64(i.pose.x),
            fmt_f64(i.pose.y),
            fmt_f64(i.pose.yaw),
            fmt_f64(i.sensor_range)
        );
    }
    for o in &log.objects {
        let b = &o.bbox;
        let _ = writeln!(
            s,
            "object {} {} {} {} {} {} {}",
            o.id,
            o.label,
            fmt_f64(b.center.x),
            fmt_f64(b.center.y),
            fmt_f64(b.yaw),
            fmt_f64(b.length),
            fmt_f64(b.width)
        );
    }
    for t in &log.tracks {
        let _ = writeln!(
            s,
            "track {} {} {} {}",
            t.id,
            t.class,
            fmt_f64(t.footprint.length),
            fmt_f64(t.footprint.width)
        );
        for f in &t.track.frames {
            let _ = writeln!(
                s,
                "{} {} {} {} {}",
                fmt_f64(f.t),
                fmt_f64(f.x),
                fmt_f64(f.y),
                fmt_f64(f.yaw),
                fmt_f64(f.v)
            );
        }
        s.push_str("end\n");
    }
    s
}

/// The lane graph a log refers to.
pub fn resolve_map(log: &DrivingLog, library: &[LaneGraph]) -> Result<LaneGraph, Real2SimError> {
    match &log.map {
        MapRef::Embedded(g) => Ok(g.clone()),
        MapRef::Library(id) => library
            .iter()
            .find(|g| &g.map_id == id)
            .cloned()
            .ok_or_else(|| Real2SimError::UnknownMap(id.clone())),
    }
}

/// Copy of `log` with every pose mapped through `t`.
pub fn transform_log(log: &DrivingLog, t: &AlignmentTransform) -> DrivingLog {
    let mut out = log.clone();
    for tr in &mut out.tracks {
        for f in &mut tr.track.frames {
            let p = t.apply_pose(f.pose());
            f.x = p.x;
            f.y = p.y;
            f.yaw = p.yaw;
        }
    }
    for i in &mut out.infrastructure {
        i.pose = t.apply_pose(i.pose);
    }
    for o in &mut out.objects {
        o.bbox = OrientedBox::new(t.apply(o.bbox.center), o.bbox.length, o.bbox.width, wrap_angle(o.bbox.yaw + t.theta));
    }
    out
}

// ---------------------------------------------------------------- alignment

fn registration_points(log: &DrivingLog) -> Vec<(Vec2, f64)> {
    let all: Vec<(Vec2, f64)> = log
        .tracks
        .iter()
        .filter(|t| t.class != ActorClass::Pedestrian)
        .flat_map(|t| t.track.frames.iter().map(|f| (Vec2::new(f.x, f.y), f.yaw)))
        .collect();
    if all.len() <= MAX_ALIGNMENT_POINTS {
        return all;
    }
    (0..MAX_ALIGNMENT_POINTS)
        .map(|k| all[k * all.len() / MAX_ALIGNMENT_POINTS])
        .collect()
}

fn residual(g: &LaneGraph, p: Vec2, heading: f64) -> Option<(f64, Vec2)> {
    g.nearest_with_heading(p, heading, HEADING_GATE).map(|pr| (pr.distance, pr.foot))
}

/// Truncated sum of squared lateral residuals.
fn objective(g: &LaneGraph, pts: &[(Vec2, f64)], t: &AlignmentTransform) -> f64 {
    pts.iter()
        .map(|&(p, h)| {
            let d = residual(g, t.apply(p), h + t.theta).map_or(TRUNCATION, |r| r.0.min(TRUNCATION));
            d * d
        })
        .sum()
}

fn rms_residual(g: &LaneGraph, pts: &[(Vec2, f64)], t: &AlignmentTransform) -> f64 {
    let sum: f64 = pts
        .iter()
        .map(|&(p, h)| {
            let q = t.apply(p);
            let d = residual(g, q, h + t.theta)
                .map(|r| r.0)
                .or_else(|| g.nearest(q).map(|pr| pr.distance))
                .unwrap_or(f64::INFINITY);
            d * d
        })
        .sum();
    (sum / pts.len() as f64).sqrt()
}

/// Coarse search: for each rotation on a 1 degree grid every track point votes
/// for the translations that would put it on a heading-compatible lane sample.
fn coarse_candidates(g: &LaneGraph, pts: &[(Vec2, f64)]) -> Vec<(u32, AlignmentTransform)> {
    let mut samples: Vec<(Vec2, Vec2)> = Vec::new();
    for lane in &g.lanes {
        let len = lane.length();
        let n = (len.ceil() as usize).max(1);
        for k in 0..=n {
            let (p, h) = lane.point_at(len * k as f64 / n as f64);
            samples.push((p, Vec2::from_angle(h)));
        }
    }
    let side = (2 * SEARCH_RADIUS + 1) as usize;
    let r = SEARCH_RADIUS as f64;
    let cos_gate = HEADING_GATE.cos();
    let mut out = Vec::new();
    for deg in -THETA_RANGE_DEG..=THETA_RANGE_DEG {
        let theta = (deg as f64).to_radians();
        let mut votes = vec![0u32; side * side];
        let mut stamp = vec![usize::MAX; side * side];
        for (i, &(p, h)) in pts.iter().enumerate() {
            let pr = p.rotate(theta);
            let u = Vec2::from_angle(h + theta);
            for &(q, hq) in &samples {
                if hq.dot(u) < cos_gate {
                    continue;
                }
                let d = q - pr;
                if d.x.abs() > r || d.y.abs() > r {
                    continue;
                }
                let cx = (d.x.round() as i32 + SEARCH_RADIUS) as usize;
                let cy = (d.y.round() as i32 + SEARCH_RADIUS) as usize;
                let cell = cy * side + cx;
                if stamp[cell] != i {
                    stamp[cell] = i;
                    votes[cell] += 1;
                }
            }
        }
        let mut best = (0u32, 0usize);
        for cy in 1..side - 1 {
            for cx in 1..side - 1 {
                let mut s = 0;
                for oy in 0..3 {
                    for ox in 0..3 {
                        s += votes[(cy + oy - 1) * side + cx + ox - 1];
                    }
                }
                // centre counts double so the blur keeps a sharp maximum
                s += votes[cy * side + cx];
                if s > best.0 {
                    best = (s, cy * side + cx);
                }
            }
        }
        let (cx, cy) = ((best.1 % side) as f64 - r, (best.1 / side) as f64 - r);
        out.push((best.0, AlignmentTransform::new(cx, cy, theta)));
    }
    out.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.theta.abs().total_cmp(&b.1.theta.abs())));
    out
}

/// Point-to-foot Procrustes refinement; a step is kept only when it lowers
/// the objective, so the history is non-increasing.
fn refine(g: &LaneGraph, pts: &[(Vec2, f64)], start: AlignmentTransform) -> (AlignmentTransform, Vec<f64>) {
    let mut t = start;
    let mut f = objective(g, pts, &t);
    let mut history = vec![f];
    for _ in 0..200 {
        let pairs: Vec<(Vec2, Vec2)> = pts
            .iter()
            .filter_map(|&(p, h)| {
                let q = t.apply(p);
                residual(g, q, h + t.theta).filter(|r| r.0 < TRUNCATION).map(|r| (q, r.1))
            })
            .collect();
        if pairs.len() < 3 {
            break;
        }
        let n = pairs.len() as f64;
        let pc = pairs.iter().fold(Vec2::ZERO, |a, p| a + p.0) * (1.0 / n);
        let qc = pairs.iter().fold(Vec2::ZERO, |a, p| a + p.1) * (1.0 / n);
        let (mut sc, mut sd) = (0.0, 0.0);
        for (p, q) in &pairs {
            let (a, b) = (*p - pc, *q - qc);
            sc += a.cross(b);
            sd += a.dot(b);
        }
        let delta = sc.atan2(sd);
        let mut improved = false;
        let mut scale = 1.0;
        for _ in 0..6 {
            let d = delta * scale;
            // p -> R(d)(p - pc) + target, the centroid moved part way to qc
            let target = pc + (qc - pc) * scale;
            let off = target - pc.rotate(d);
            let step = AlignmentTransform::new(off.x, off.y, d);
            let cand = step.after(&t);
            let fc = objective(g, pts, &cand);
            if fc < f - 1e-12 {
                t = cand;
                f = fc;
                history.push(f);
                improved = true;
                break;
            }
            scale *= 0.5;
        }
        if !improved || history.len() >= 2 && history[history.len() - 2] - f < 1e-10 {
            break;
        }
    }
    (t, history)
}

/// Rigid transform registering the log's vehicle points to the lane graph.
pub fn estimate_alignment(log: &DrivingLog, g: &LaneGraph) -> Result<Alignment, Real2SimError> {
    let pts = registration_points(log);
    if pts.len() < MIN_ALIGNMENT_POINTS || g.is_empty() {
        return Err(Real2SimError::NotEnoughPoints { found: pts.len() });
    }
    let mut best: Option<(f64, AlignmentTransform, Vec<f64>)> = None;
    for (_, start) in coarse_candidates(g, &pts).into_iter().take(3) {
        let (t, history) = refine(g, &pts, start);
        let f = *history.last().expect("history starts non-empty");
        if best.as_ref().is_none_or(|b| f < b.0) {
            best = Some((f, t, history));
        }
    }
    let (_, transform, history) = best.expect("at least one candidate");
    let rms = rms_residual(g, &pts, &transform);
    if !(rms <= MAX_ALIGNMENT_RMS) || !transform.is_finite() {
        return Err(Real2SimError::AlignmentFailed {
            rms,
            points: pts.len(),
            history,
        });
    }
    Ok(Alignment {
        transform,
        rms,
        history,
        points: pts.len(),
    })
}

// ---------------------------------------------------------------- snapping

#[derive(Debug, Clone, PartialEq)]
pub struct SnappedTrack {
    pub id: String,
    pub track: ActorTrack,
    /// Lateral distance to the heading-compatible lane per frame; `None` when no lane passes the gate.
    pub residuals: Vec<Option<f64>>,
    /// Frames kept raw because they lie too far from any compatible lane.
    pub flagged: Vec<usize>,
}

/// Maps `track` through `t` and pulls each frame onto the nearest
/// heading-compatible centerline when within half that lane's width.
pub fn snap_to_lane_graph(track: &LogTrack, g: &LaneGraph, t: &AlignmentTransform) -> SnappedTrack {
    let mut frames = Vec::with_capacity(track.track.frames.len());
    let mut residuals = Vec::with_capacity(frames.capacity());
    let mut flagged = Vec::new();
    for (i, f) in track.track.frames.iter().enumerate() {
        let pose = t.apply_pose(f.pose());
        let pr = g.nearest_with_heading(pose.position(), pose.yaw, HEADING_GATE);
        residuals.push(pr.map(|p| p.distance));
        let mut p = pose.position();
        if track.class != ActorClass::Pedestrian {
            match pr {
                Some(pr) if pr.distance <= 0.5 * g.lanes[pr.lane_index].width => {
                    if pr.distance > 1e-9 {
                        p = pr.foot;
                    }
                }
                _ => flagged.push(i),
            }
        }
        frames.push(TrackFrame {
            t: f.t,
            x: p.x,
            y: p.y,
            yaw: pose.yaw,
            v: f.v,
        });
    }
    SnappedTrack {
        id: track.id.clone(),
        track: ActorTrack {
            frames,
            rate_hz: track.track.rate_hz,
        },
        residuals,
        flagged,
    }
}

// ---------------------------------------------------------------- roles and export

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoleOptions {
    /// Actor classes that become lane-following reactive actors instead of replays.
    #[serde(default)]
    pub reactive: BTreeSet<ActorClass>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Roles {
    pub cavs: Vec<CavSpec>,
    pub actors: Vec<ActorSpec>,
    pub infrastructure: Vec<InfraSpec>,
    pub static_objects: Vec<StaticObject>,
    pub snapped: Vec<SnappedTrack>,
    pub window: (f64, f64),
}

/// Track restricted to `[t0, t1]` and shifted so it starts at zero.
fn clip(track: &ActorTrack, t0: f64, t1: f64) -> ActorTrack {
    let eps = 1e-9;
    let at = |t: f64| {
        let (p, v) = replay_actor_step(track, t);
        TrackFrame {
            t,
            x: p.x,
            y: p.y,
            yaw: p.yaw,
            v,
        }
    };
    let mut frames = Vec::new();
    if track.frames.iter().all(|f| (f.t - t0).abs() > eps) {
        frames.push(at(t0));
    }
    frames.extend(track.frames.iter().copied().filter(|f| f.t >= t0 - eps && f.t <= t1 + eps));
    if track.frames.iter().all(|f| (f.t - t1).abs() > eps) {
        frames.push(at(t1));
    }
    for f in &mut frames {
        f.t = (f.t - t0).max(0.0);
    }
    frames.dedup_by(|b, a| b.t <= a.t);
    ActorTrack {
        frames,
        rate_hz: track.rate_hz,
    }
}

pub fn assign_roles(log: &DrivingLog, g: &LaneGraph, t: &AlignmentTransform, opts: &RoleOptions) -> Roles {
    let (t0, t1) = log.window();
    let cav_ids: BTreeSet<&str> = log.cavs.iter().map(String::as_str).collect();
    let mut roles = Roles {
        cavs: Vec::new(),
        actors: Vec::new(),
        infrastructure: Vec::new(),
        static_objects: Vec::new(),
        snapped: Vec::new(),
        window: (t0, t1),
    };
    for lt in &log.tracks {
        let snapped = snap_to_lane_graph(lt, g, t);
        let track = clip(&snapped.track, t0, t1);
        let first = track.frames[0];
        if cav_ids.contains(lt.id.as_str()) {
            let mut waypoints: Vec<Vec2> = Vec::with_capacity(track.frames.len());
            for f in &track.frames {
                let p = Vec2::new(f.x, f.y);
                if waypoints.last().is_none_or(|q| q.dist(p) > 1e-6) {
                    waypoints.push(p);
                }
            }
            let vmax = track.frames.iter().map(|f| f.v).fold(0.0, f64::max);
            roles.cavs.push(CavSpec {
                id: lt.id.clone(),
                spawn: first.pose(),
                spawn_speed: first.v.max(0.0),
                footprint: lt.footprint,
                route: RouteSpec::new(waypoints, vmax.max(1.0)),
            });
        } else {
            let reactive = opts.reactive.contains(&lt.class) && lt.class != ActorClass::Pedestrian;
            let follow = reactive
                .then(|| g.nearest_with_heading(Vec2::new(first.x, first.y), first.yaw, HEADING_GATE))
                .flatten()
                .filter(|pr| pr.distance <= 0.5 * g.lanes[pr.lane_index].width);
            let behavior = match follow {
                Some(pr) => {
                    let lane = &g.lanes[pr.lane_index];
                    let mean_v = track.frames.iter().map(|f| f.v).sum::<f64>() / track.frames.len() as f64;
                    ActorBehavior::ReactiveFollow {
                        lane: lane.id.clone(),
                        station: pr.station.clamp(0.0, lane.length()),
                        speed: first.v.max(0.0),
                        target_speed: mean_v.max(1.0),
                    }
                }
                None => ActorBehavior::Replay(track),
            };
            roles.actors.push(ActorSpec {
                id: lt.id.clone(),
                class: lt.class,
                footprint: lt.footprint,
                behavior,
            });
        }
        roles.snapped.push(snapped);
    }
    roles.infrastructure = log
        .infrastructure
        .iter()
        .map(|i| InfraSpec {
            id: i.id.clone(),
            pose: t.apply_pose(i.pose),
            sensor_range: i.sensor_range,
        })
        .collect();
    roles.static_objects = transform_log(
        &DrivingLog {
            tracks: Vec::new(),
            infrastructure: Vec::new(),
            ..log.clone()
        },
        t,
    )
    .objects;
    roles
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedPoint {
    pub track: String,
    pub t: f64,
    pub residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleCounts {
    pub cavs: usize,
    pub replay_actors: usize,
    pub reactive_actors: usize,
    pub infrastructure: usize,
    pub static_objects: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionReport {
    pub log_id: String,
    pub scenario_id: String,
    pub transform: AlignmentTransform,
    pub rms_residual: f64,
    pub objective_history: Vec<f64>,
    pub window: (f64, f64),
    pub max_snap_residual: f64,
    pub flagged: Vec<FlaggedPoint>,
    pub roles: RoleCounts,
}

/// Builds the scenario and its report without touching the file system.
pub fn convert_log(
    log: &DrivingLog,
    g: &LaneGraph,
    alignment: &Alignment,
    opts: &RoleOptions,
) -> Result<(Scenario, ConversionReport), Real2SimError> {
    log.check()?;
    let t = alignment.transform;
    let roles = assign_roles(log, g, &t, opts);
    let category = log.category.unwrap_or(Category::PreCrash);
    let (t0, t1) = roles.window;
    let scenario = Scenario {
        id: format!("v2xpnp_{}", log.id),
        bucket: Bucket::V2xpnp,
        category,
        interactivity: category.interactivity(),
        weather: Weather::Default,
        max_duration_s: (1.5 * (t1 - t0) + 10.0).ceil(),
        map: g.clone(),
        cavs: roles.cavs.clone(),
        background_actors: roles.actors.clone(),
        static_objects: roles.static_objects.clone(),
        infrastructure: roles.infrastructure.clone(),
    };
    let mut flagged = Vec::new();
    let mut max_snap: f64 = 0.0;
    for (st, lt) in roles.snapped.iter().zip(&log.tracks) {
        for &i in &st.flagged {
            flagged.push(FlaggedPoint {
                track: st.id.clone(),
                t: st.track.frames[i].t,
                residual: st.residuals[i],
            });
        }
        if lt.class != ActorClass::Pedestrian {
            for (i, r) in st.residuals.iter().enumerate() {
                if let Some(r) = r {
                    if !st.flagged.contains(&i) {
                        max_snap = max_snap.max(*r);
                    }
                }
            }
        }
    }
    let reactive = scenario
        .background_actors
        .iter()
        .filter(|a| matches!(a.behavior, ActorBehavior::ReactiveFollow { .. }))
        .count();
    let report = ConversionReport {
        log_id: log.id.clone(),
        scenario_id: scenario.id.clone(),
        transform: t,
        rms_residual: alignment.rms,
        objective_history: alignment.history.clone(),
        window: roles.window,
        max_snap_residual: max_snap,
        flagged,
        roles: RoleCounts {
            cavs: scenario.cavs.len(),
            replay_actors: scenario.background_actors.len() - reactive,
            reactive_actors: reactive,
            infrastructure: scenario.infrastructure.len(),
            static_objects: scenario.static_objects.len(),
        },
    };
    let violations = validate_scenario(&scenario);
    if !violations.is_empty() {
        return Err(Real2SimError::Validation {
            violations,
            report: Box::new(report),
        });
    }
    Ok((scenario, report))
}

/// Converts and writes `<out>/<scenario id>/` plus its `conversion_report.json`.
pub fn export_scenario(
    log: &DrivingLog,
    g: &LaneGraph,
    alignment: &Alignment,
    opts: &RoleOptions,
    out: &Path,
) -> Result<(Scenario, ConversionReport), Real2SimError> {
    let (scenario, report) = convert_log(log, g, alignment, opts)?;
    let dir = out.join(&scenario.id);
    serialize_scenario_dir(&scenario, &dir)?;
    let path = dir.join("conversion_report.json");
    let json = serde_json::to_string_pretty(&report).expect("report serialization");
    fs::write(&path, json + "\n").map_err(|source| Real2SimError::Io { path, source })?;
    Ok((scenario, report))
}

/// Ingest, register, convert and export one log file.
pub fn convert_file(
    path: &Path,
    library: &[LaneGraph],
    opts: &RoleOptions,
    out: &Path,
) -> Result<(Scenario, ConversionReport), Real2SimError> {
    let log = ingest_log(path)?;
    let g = resolve_map(&log, library)?;
    let alignment = estimate_alignment(&log, &g)?;
    export_scenario(&log, &g, &alignment, opts, out)
}

// ---------------------------------------------------------------- synthetic logs

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub cavs: usize,
    pub vehicles: usize,
    pub pedestrians: usize,
    pub duration_s: f64,
    pub rate_hz: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            cavs: 2,
            vehicles: 6,
            pedestrians: 2,
            duration_s: 8.0,
            rate_hz: 10.0,
        }
    }
}

fn constant_speed_track(path: &[Vec2], s0: f64, v: f64, spec: &SyntheticSpec) -> ActorTrack {
    let cum = crate::geometry::cumulative_lengths(path);
    let n = (spec.duration_s * spec.rate_hz).round() as usize;
    let frames = (0..=n)
        .map(|k| {
            let t = k as f64 / spec.rate_hz;
            let (p, h) = crate::geometry::point_at_station(path, &cum, s0 + v * t);
            TrackFrame { t, x: p.x, y: p.y, yaw: h, v }
        })
        .collect();
    ActorTrack {
        frames,
        rate_hz: Some(spec.rate_hz),
    }
}

/// Log recorded in the map frame with vehicles driving lane chains at constant
/// speed. Each chain starts on a distinct entry lane slot so no two vehicles
/// share a start position.
pub fn synthetic_log(g: &LaneGraph, spec: &SyntheticSpec, seed: u64) -> DrivingLog {
    let mut rng = substream(seed, &["synthetic-log", &g.map_id]);
    let mut entries: Vec<&str> = g
        .lanes
        .iter()
        .filter(|l| l.predecessors.is_empty())
        .map(|l| l.id.as_str())
        .collect();
    if entries.is_empty() {
        entries = g.lanes.iter().map(|l| l.id.as_str()).collect();
    }
    let speed = 8.0;
    let spacing = 12.0;
    let mut tracks = Vec::new();
    let total = spec.cavs + spec.vehicles;
    for k in 0..total {
        let entry = entries[k % entries.len()];
        let slot = (k / entries.len()) as f64;
        let mut chain = vec![entry.to_string()];
        while let Some(lane) = g.lane(chain.last().expect("non-empty")) {
            if lane.successors.is_empty() || chain.len() > 6 {
                break;
            }
            let next = lane.successors[rng.random_range(0..lane.successors.len())].clone();
            if chain.contains(&next) {
                break;
            }
            chain.push(next);
        }
        let ids: Vec<&str> = chain.iter().map(String::as_str).collect();
        let path = crate::maps::chain_polyline(g, &ids).unwrap_or_else(|| g.lane(entry).expect("entry").centerline().to_vec());
        // later slots start further up the lane, all at the same speed
        let s0 = 4.0 + spacing * (slot + 1.0) - spacing * 0.5 + rng.random_range(0.0..2.0);
        let s0 = (polyline_length(&path) * 0.5).min(s0);
        let id = if k < spec.cavs {
            format!("cav{}", k + 1)
        } else {
            format!("veh{}", k - spec.cavs + 1)
        };
        tracks.push(LogTrack {
            id,
            class: ActorClass::Vehicle,
            footprint: Footprint::CAR,
            track: constant_speed_track(&path, s0, speed, spec),
        });
    }
    let (lo, hi) = g.bounds().unwrap_or((Vec2::ZERO, Vec2::ZERO));
    for k in 0..spec.pedestrians {
        let a = Vec2::new(rng.random_range(lo.x..=hi.x), hi.y + 4.0 + 2.0 * k as f64);
        let b = a + Vec2::new(20.0, 0.0);
        tracks.push(LogTrack {
            id: format!("ped{}", k + 1),
            class: ActorClass::Pedestrian,
            footprint: Footprint::PEDESTRIAN,
            track: constant_speed_track(&[a, b], 0.0, 1.3, spec),
        });
    }
    DrivingLog {
        id: format!("synthetic_{seed}"),
        map: MapRef::Library(g.map_id.clone()),
        rate_hz: spec.rate_hz,
        category: None,
        cavs: (1..=spec.cavs).map(|k| format!("cav{k}")).collect(),
        infrastructure: vec![InfraSpec {
            id: "rsu1".into(),
            pose: Pose2::new(12.0, 12.0, 0.0),
            sensor_range: 60.0,
        }],
        objects: Vec::new(),
        tracks,
    }
}
