//! Scenario directory layout:
//!
//! ```text
//! <dir>/manifest                 key = value text (ids, labels, CAVs, objects)
//! <dir>/routes/<cav>.route.xml   ordered <waypoint/> elements and speed cap
//! <dir>/actors.manifest          one actor record per line
//! <dir>/tracks/<actor>.track     `t x y yaw v` rows
//! <dir>/maps/<map_id>.lanes      lane graph
//! ```

use super::{
    validate_scenario, ActorBehavior, ActorClass, ActorSpec, ActorTrack, Bucket, CavSpec, Category, Footprint,
    InfraSpec, Interactivity, Lane, LaneGraph, RouteSpec, Scenario, StaticObject, StopLine, Topology, TrackFrame,
    Violation, Weather,
};
use crate::geometry::{OrientedBox, Pose2, Vec2};
use crate::textio::{fmt_f64, parse_f64};
use quick_xml::events::Event;
use serde::Deserialize;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {file}: {message}")]
    Format { file: PathBuf, message: String },
    #[error("scenario {id} failed validation: {}", .violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Validation { id: String, violations: Vec<Violation> },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ScenarioError + '_ {
    move |source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(file: &Path, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Format {
        file: file.to_path_buf(),
        message: message.into(),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRaw {
    id: String,
    bucket: String,
    category: String,
    interactivity: String,
    map_id: String,
    weather: String,
    max_duration_s: f64,
    #[serde(default)]
    cav: Vec<CavRaw>,
    #[serde(default)]
    static_object: Vec<StaticRaw>,
    #[serde(default)]
    infrastructure: Vec<InfraRaw>,
}

#[derive(Deserialize)]
struct CavRaw {
    id: String,
    x: f64,
    y: f64,
    yaw: f64,
    speed: f64,
    length: f64,
    width: f64,
}

#[derive(Deserialize)]
struct StaticRaw {
    id: String,
    label: String,
    x: f64,
    y: f64,
    yaw: f64,
    length: f64,
    width: f64,
}

#[derive(Deserialize)]
struct InfraRaw {
    id: String,
    x: f64,
    y: f64,
    yaw: f64,
    range: f64,
}

fn quote(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization")
}

/// Reads and validates a scenario directory.
pub fn parse_scenario_dir(dir: &Path) -> Result<Scenario, ScenarioError> {
    let manifest_path = dir.join("manifest");
    if !manifest_path.is_file() {
        return Err(format_err(&manifest_path, "missing scenario manifest"));
    }
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let raw: ManifestRaw = toml::from_str(&text).map_err(|e| format_err(&manifest_path, e.to_string()))?;

    let bucket = Bucket::parse(&raw.bucket)
        .ok_or_else(|| format_err(&manifest_path, format!("field `bucket`: unknown value {:?}", raw.bucket)))?;
    let category = Category::parse(&raw.category)
        .ok_or_else(|| format_err(&manifest_path, format!("field `category`: unknown value {:?}", raw.category)))?;
    let interactivity = Interactivity::parse(&raw.interactivity).ok_or_else(|| {
        format_err(
            &manifest_path,
            format!("field `interactivity`: unknown value {:?}", raw.interactivity),
        )
    })?;
    let weather = Weather::parse(&raw.weather)
        .ok_or_else(|| format_err(&manifest_path, format!("field `weather`: unknown value {:?}", raw.weather)))?;

    let map = load_map(dir, &raw.map_id)?;

    let mut cavs = Vec::with_capacity(raw.cav.len());
    for c in raw.cav {
        let route_path = dir.join("routes").join(format!("{}.route.xml", c.id));
        let route = parse_route_xml(&route_path)?;
        cavs.push(CavSpec {
            id: c.id,
            spawn: Pose2::new(c.x, c.y, c.yaw),
            spawn_speed: c.speed,
            footprint: Footprint {
                length: c.length,
                width: c.width,
            },
            route,
        });
    }

    let actors_path = dir.join("actors.manifest");
    let background_actors = if actors_path.is_file() {
        parse_actor_manifest(dir, &actors_path)?
    } else {
        Vec::new()
    };

    let scenario = Scenario {
        id: raw.id,
        bucket,
        category,
        interactivity,
        weather,
        max_duration_s: raw.max_duration_s,
        map,
        cavs,
        background_actors,
        static_objects: raw
            .static_object
            .into_iter()
            .map(|o| StaticObject {
                id: o.id,
                label: o.label,
                bbox: OrientedBox::new(Vec2::new(o.x, o.y), o.length, o.width, o.yaw),
            })
            .collect(),
        infrastructure: raw
            .infrastructure
            .into_iter()
            .map(|i| InfraSpec {
                id: i.id,
                pose: Pose2::new(i.x, i.y, i.yaw),
                sensor_range: i.range,
            })
            .collect(),
    };

    let violations = validate_scenario(&scenario);
    if !violations.is_empty() {
        return Err(ScenarioError::Validation {
            id: scenario.id.clone(),
            violations,
        });
    }
    Ok(scenario)
}

fn load_map(dir: &Path, map_id: &str) -> Result<LaneGraph, ScenarioError> {
    let name = format!("{map_id}.lanes");
    let candidates = [
        dir.join("maps").join(&name),
        dir.parent().map(|p| p.join("maps").join(&name)).unwrap_or_default(),
    ];
    for c in &candidates {
        if c.is_file() {
            let text = fs::read_to_string(c).map_err(io_err(c))?;
            let g = parse_lane_graph(&text).map_err(|m| format_err(c, m))?;
            if g.map_id != map_id {
                return Err(format_err(c, format!("map file declares id {:?}, expected {map_id:?}", g.map_id)));
            }
            return Ok(g);
        }
    }
    Err(format_err(&candidates[0], format!("lane graph for map {map_id:?} not found")))
}

fn parse_route_xml(path: &Path) -> Result<RouteSpec, ScenarioError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut reader = quick_xml::Reader::from_str(&text);
    let mut waypoints = Vec::new();
    let mut stop_lines = Vec::new();
    let mut speed_cap = None;
    loop {
        match reader.read_event() {
            Ok(Event::Start(e)) | Ok(Event::Empty(e)) => {
                let name = e.name();
                let attr = |key: &str| -> Result<Option<f64>, ScenarioError> {
                    for a in e.attributes() {
                        let a = a.map_err(|err| format_err(path, err.to_string()))?;
                        if a.key.as_ref() == key.as_bytes() {
                            let v = a
                                .unescape_value()
                                .map_err(|err| format_err(path, err.to_string()))?;
                            return parse_f64(&v)
                                .map(Some)
                                .ok_or_else(|| format_err(path, format!("attribute `{key}`: not a number: {v}")));
                        }
                    }
                    Ok(None)
                };
                let need = |key: &str, v: Option<f64>| {
                    v.ok_or_else(|| format_err(path, format!("missing attribute `{key}`")))
                };
                match name.as_ref() {
                    b"route" => speed_cap = attr("speed_cap")?,
                    b"waypoint" => {
                        let x = need("x", attr("x")?)?;
                        let y = need("y", attr("y")?)?;
                        waypoints.push(Vec2::new(x, y));
                    }
                    b"stop" => {
                        let x = need("x", attr("x")?)?;
                        let y = need("y", attr("y")?)?;
                        let until = need("until", attr("until")?)?;
                        stop_lines.push(StopLine {
                            position: Vec2::new(x, y),
                            release_time_s: until,
                        });
                    }
                    _ => {}
                }
            }
            Ok(Event::Eof) => break,
            Ok(_) => {}
            Err(e) => return Err(format_err(path, e.to_string())),
        }
    }
    let target_speed_cap = speed_cap.ok_or_else(|| format_err(path, "missing attribute `speed_cap` on <route>"))?;
    Ok(RouteSpec {
        waypoints,
        target_speed_cap,
        stop_lines,
    })
}

fn parse_actor_manifest(dir: &Path, path: &Path) -> Result<Vec<ActorSpec>, ScenarioError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: &str| format_err(path, format!("line {}: {m}", lineno + 1));
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 5 {
            return Err(bad("expected `id class length width behavior ...`"));
        }
        let class = ActorClass::parse(tok[1]).ok_or_else(|| bad(&format!("unknown class {:?}", tok[1])))?;
        let num = |i: usize, what: &str| -> Result<f64, ScenarioError> {
            tok.get(i)
                .and_then(|t| parse_f64(t))
                .ok_or_else(|| bad(&format!("field `{what}` missing or not a number")))
        };
        let footprint = Footprint {
            length: num(2, "length")?,
            width: num(3, "width")?,
        };
        let behavior = match tok[4] {
            "replay" => {
                let tpath = dir.join("tracks").join(format!("{}.track", tok[0]));
                let ttext = fs::read_to_string(&tpath).map_err(io_err(&tpath))?;
                ActorBehavior::Replay(parse_track(&ttext).map_err(|m| format_err(&tpath, m))?)
            }
            "follow" => ActorBehavior::ReactiveFollow {
                lane: tok
                    .get(5)
                    .ok_or_else(|| bad("field `lane` missing"))?
                    .to_string(),
                station: num(6, "station")?,
                speed: num(7, "speed")?,
                target_speed: num(8, "target_speed")?,
            },
            other => return Err(bad(&format!("unknown behavior {other:?}"))),
        };
        out.push(ActorSpec {
            id: tok[0].to_string(),
            class,
            footprint,
            behavior,
        });
    }
    Ok(out)
}

/// Parses `t x y yaw v` rows; an optional `# rate_hz <r>` header records the log rate.
pub fn parse_track(text: &str) -> Result<ActorTrack, String> {
    let mut frames = Vec::new();
    let mut rate_hz = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let mut it = rest.split_whitespace();
            if it.next() == Some("rate_hz") {
                rate_hz = it.next().and_then(parse_f64);
            }
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| parse_f64(t).ok_or_else(|| format!("line {}: not a number: {t}", lineno + 1)))
            .collect::<Result<_, _>>()?;
        if v.len() != 5 {
            return Err(format!("line {}: expected 5 columns `t x y yaw v`", lineno + 1));
        }
        frames.push(TrackFrame {
            t: v[0],
            x: v[1],
            y: v[2],
            yaw: v[3],
            v: v[4],
        });
    }
    Ok(ActorTrack { frames, rate_hz })
}

pub fn serialize_track(track: &ActorTrack) -> String {
    let mut s = String::new();
    if let Some(r) = track.rate_hz {
        let _ = writeln!(s, "# rate_hz {}", fmt_f64(r));
    }
    for f in &track.frames {
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
    s
}

/// Lane-graph text: `map_id`, optional `topology`, then one record per lane
/// `id width speed_limit | x0 y0 x1 y1 ... | succ: ids | pred: ids` and
/// `crosswalk x0 y0 ...` polygons.
pub fn parse_lane_graph(text: &str) -> Result<LaneGraph, String> {
    let mut map_id = None;
    let mut topology = None;
    let mut lanes = Vec::new();
    let mut crosswalks = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        let err = |m: &str| format!("line {}: {m}", lineno + 1);
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("map_id ") {
            map_id = Some(rest.trim().to_string());
            continue;
        }
        if let Some(rest) = line.strip_prefix("topology ") {
            topology = Some(Topology::parse(rest.trim()).ok_or_else(|| err("unknown topology"))?);
            continue;
        }
        if let Some(rest) = line.strip_prefix("crosswalk ") {
            crosswalks.push(parse_points(rest).map_err(|m| err(&m))?);
            continue;
        }
        let parts: Vec<&str> = line.split('|').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(err("lane record needs 4 `|`-separated fields"));
        }
        let head: Vec<&str> = parts[0].split_whitespace().collect();
        if head.len() != 3 {
            return Err(err("lane header must be `id width speed_limit`"));
        }
        let width = parse_f64(head[1]).ok_or_else(|| err("bad width"))?;
        let speed = parse_f64(head[2]).ok_or_else(|| err("bad speed_limit"))?;
        let pts = parse_points(parts[1]).map_err(|m| err(&m))?;
        let ids = |field: &str, prefix: &str| -> Result<Vec<String>, String> {
            field
                .strip_prefix(prefix)
                .map(|r| r.split_whitespace().map(str::to_string).collect())
                .ok_or_else(|| err(&format!("expected `{prefix}` field")))
        };
        lanes.push(Lane::new(
            head[0],
            pts,
            width,
            speed,
            ids(parts[2], "succ:")?,
            ids(parts[3], "pred:")?,
        ));
    }
    let mut g = LaneGraph::new(map_id.ok_or("missing `map_id` line")?, lanes, crosswalks);
    g.topology = topology;
    Ok(g)
}

fn parse_points(s: &str) -> Result<Vec<Vec2>, String> {
    let v: Vec<f64> = s
        .split_whitespace()
        .map(|t| parse_f64(t).ok_or_else(|| format!("not a number: {t}")))
        .collect::<Result<_, _>>()?;
    if v.len() % 2 != 0 {
        return Err("odd number of coordinates".into());
    }
    Ok(v.chunks(2).map(|c| Vec2::new(c[0], c[1])).collect())
}

pub fn serialize_lane_graph(g: &LaneGraph) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "map_id {}", g.map_id);
    if let Some(t) = g.topology {
        let _ = writeln!(s, "topology {t}");
    }
    for l in &g.lanes {
        let pts: Vec<String> = l
            .centerline()
            .iter()
            .map(|p| format!("{} {}", fmt_f64(p.x), fmt_f64(p.y)))
            .collect();
        let _ = writeln!(
            s,
            "{} {} {} | {} | succ: {} | pred: {}",
            l.id,
            fmt_f64(l.width),
            fmt_f64(l.speed_limit),
            pts.join(" "),
            l.successors.join(" "),
            l.predecessors.join(" ")
        );
    }
    for c in &g.crosswalks {
        let pts: Vec<String> = c.iter().map(|p| format!("{} {}", fmt_f64(p.x), fmt_f64(p.y))).collect();
        let _ = writeln!(s, "crosswalk {}", pts.join(" "));
    }
    s
}

fn write(path: &Path, contents: &str) -> Result<(), ScenarioError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

/// Writes the canonical directory layout for `s` into `dir`.
pub fn serialize_scenario_dir(s: &Scenario, dir: &Path) -> Result<(), ScenarioError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut m = String::new();
    let _ = writeln!(m, "id = {}", quote(&s.id));
    let _ = writeln!(m, "bucket = {}", quote(s.bucket.as_str()));
    let _ = writeln!(m, "category = {}", quote(s.category.as_str()));
    let _ = writeln!(m, "interactivity = {}", quote(s.interactivity.as_str()));
    let _ = writeln!(m, "map_id = {}", quote(&s.map.map_id));
    let _ = writeln!(m, "weather = {}", quote(s.weather.as_str()));
    let _ = writeln!(m, "max_duration_s = {}", fmt_f64(s.max_duration_s));
    for c in &s.cavs {
        let _ = writeln!(m, "\n[[cav]]");
        let _ = writeln!(m, "id = {}", quote(&c.id));
        let _ = writeln!(m, "x = {}", fmt_f64(c.spawn.x));
        let _ = writeln!(m, "y = {}", fmt_f64(c.spawn.y));
        let _ = writeln!(m, "yaw = {}", fmt_f64(c.spawn.yaw));
        let _ = writeln!(m, "speed = {}", fmt_f64(c.spawn_speed));
        let _ = writeln!(m, "length = {}", fmt_f64(c.footprint.length));
        let _ = writeln!(m, "width = {}", fmt_f64(c.footprint.width));
    }
    for o in &s.static_objects {
        let _ = writeln!(m, "\n[[static_object]]");
        let _ = writeln!(m, "id = {}", quote(&o.id));
        let _ = writeln!(m, "label = {}", quote(&o.label));
        let _ = writeln!(m, "x = {}", fmt_f64(o.bbox.center.x));
        let _ = writeln!(m, "y = {}", fmt_f64(o.bbox.center.y));
        let _ = writeln!(m, "yaw = {}", fmt_f64(o.bbox.yaw));
        let _ = writeln!(m, "length = {}", fmt_f64(o.bbox.length));
        let _ = writeln!(m, "width = {}", fmt_f64(o.bbox.width));
    }
    for i in &s.infrastructure {
        let _ = writeln!(m, "\n[[infrastructure]]");
        let _ = writeln!(m, "id = {}", quote(&i.id));
        let _ = writeln!(m, "x = {}", fmt_f64(i.pose.x));
        let _ = writeln!(m, "y = {}", fmt_f64(i.pose.y));
        let _ = writeln!(m, "yaw = {}", fmt_f64(i.pose.yaw));
        let _ = writeln!(m, "range = {}", fmt_f64(i.sensor_range));
    }
    write(&dir.join("manifest"), &m)?;

    let routes = dir.join("routes");
    if routes.is_dir() {
        fs::remove_dir_all(&routes).map_err(io_err(&routes))?;
    }
    for c in &s.cavs {
        let mut x = String::new();
        let _ = writeln!(
            x,
            "<route cav={} speed_cap=\"{}\">",
            quote(&c.id),
            fmt_f64(c.route.target_speed_cap)
        );
        for w in &c.route.waypoints {
            let _ = writeln!(x, "  <waypoint x=\"{}\" y=\"{}\" z=\"0\"/>", fmt_f64(w.x), fmt_f64(w.y));
        }
        for sl in &c.route.stop_lines {
            let _ = writeln!(
                x,
                "  <stop x=\"{}\" y=\"{}\" until=\"{}\"/>",
                fmt_f64(sl.position.x),
                fmt_f64(sl.position.y),
                fmt_f64(sl.release_time_s)
            );
        }
        x.push_str("</route>\n");
        write(&routes.join(format!("{}.route.xml", c.id)), &x)?;
    }

    let tracks = dir.join("tracks");
    if tracks.is_dir() {
        fs::remove_dir_all(&tracks).map_err(io_err(&tracks))?;
    }
    let mut a = String::new();
    for actor in &s.background_actors {
        let _ = write!(
            a,
            "{} {} {} {}",
            actor.id,
            actor.class,
            fmt_f64(actor.footprint.length),
            fmt_f64(actor.footprint.width)
        );
        match &actor.behavior {
            ActorBehavior::Replay(track) => {
                a.push_str(" replay\n");
                write(&tracks.join(format!("{}.track", actor.id)), &serialize_track(track))?;
            }
            ActorBehavior::ReactiveFollow {
                lane,
                station,
                speed,
                target_speed,
            } => {
                let _ = writeln!(
                    a,
                    " follow {lane} {} {} {}",
                    fmt_f64(*station),
                    fmt_f64(*speed),
                    fmt_f64(*target_speed)
                );
            }
        }
    }
    write(&dir.join("actors.manifest"), &a)?;
    write(
        &dir.join("maps").join(format!("{}.lanes", s.map.map_id)),
        &serialize_lane_graph(&s.map),
    )?;
    Ok(())
}
