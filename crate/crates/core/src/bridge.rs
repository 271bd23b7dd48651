//! Live takeover session: one episode driven tick by tick, with newline
//! delimited JSON frames in both directions. No I/O happens here; the server
//! owns the socket and the pacing clock.

use crate::bench::{trace_digest, DemoTick, DemonstrationLog};
use crate::scenario::{serialize_lane_graph, ActorClass, Scenario, PEDESTRIAN_RADIUS};
use crate::sim::{Bindings, ControlCommand, Episode, EpisodeConfig, EpisodeError, DT};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EgoState {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub v: f64,
    pub throttle: f64,
    pub brake: f64,
    pub steer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoFrame {
    pub id: String,
    #[serde(flatten)]
    pub state: EgoState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorFrame {
    pub id: String,
    pub class: ActorClass,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub v: f64,
    pub length: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStatus {
    pub rc_pct: f64,
    pub infractions: usize,
    pub timer_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    pub tick: u64,
    pub sim_time_s: f64,
    pub ego: EgoFrame,
    pub actors: Vec<ActorFrame>,
    pub route: Vec<[f64; 2]>,
    pub lane_graph_digest: String,
    pub episode: EpisodeStatus,
    #[serde(default)]
    pub paused: bool,
    #[serde(default)]
    pub takeover: bool,
    #[serde(default)]
    pub recording: bool,
    #[serde(default)]
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventFrame {
    pub tick: u64,
    pub kind: String,
    pub details: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerFrame {
    State(Box<StateFrame>),
    Event(EventFrame),
}

impl ServerFrame {
    /// One NDJSON line, newline included.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("frame serializes") + "\n"
    }

    pub fn as_state(&self) -> Option<&StateFrame> {
        match self {
            ServerFrame::State(s) => Some(s),
            ServerFrame::Event(_) => None,
        }
    }

    pub fn as_event(&self) -> Option<&EventFrame> {
        match self {
            ServerFrame::Event(e) => Some(e),
            ServerFrame::State(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionVerb {
    Pause,
    Resume,
    Reset,
    RecordStart,
    RecordStop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientFrame {
    Control {
        #[serde(default)]
        tick_hint: Option<u64>,
        #[serde(default)]
        throttle: f64,
        #[serde(default)]
        brake: f64,
        #[serde(default)]
        steer: f64,
        #[serde(default)]
        takeover: bool,
    },
    Session { verb: SessionVerb },
}

impl ClientFrame {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("frame serializes") + "\n"
    }

    pub fn parse(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line.trim())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BridgeError {
    #[error("scenario has no CAV {0}")]
    UnknownCav(String),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
}

pub struct BridgeSession {
    scenario: Scenario,
    bindings: Bindings,
    cfg: EpisodeConfig,
    seed: u64,
    cav: String,
    lane_digest: String,
    episode: Episode,
    paused: bool,
    control: ControlCommand,
    takeover: bool,
    failsafe: bool,
    flagged: bool,
    inputs: Vec<DemoTick>,
    recording_from: Option<u64>,
    demos: Vec<DemonstrationLog>,
}

impl BridgeSession {
    /// `cav` is the human-controllable vehicle; it follows its bound policy until takeover.
    pub fn new(scenario: Scenario, bindings: Bindings, cfg: EpisodeConfig, seed: u64, cav: &str) -> Result<Self, BridgeError> {
        if scenario.cav(cav).is_none() {
            return Err(BridgeError::UnknownCav(cav.to_string()));
        }
        let episode = Episode::new(&scenario, &bindings, &cfg, seed)?;
        let lane_digest = hex::encode(Sha256::digest(serialize_lane_graph(&scenario.map).as_bytes()));
        Ok(Self {
            scenario,
            bindings,
            cfg,
            seed,
            cav: cav.to_string(),
            lane_digest,
            episode,
            paused: false,
            control: ControlCommand::default(),
            takeover: false,
            failsafe: false,
            flagged: false,
            inputs: Vec::new(),
            recording_from: None,
            demos: Vec::new(),
        })
    }

    pub fn tick(&self) -> u64 {
        self.episode.tick()
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    pub fn is_done(&self) -> bool {
        self.episode.is_done()
    }

    /// Set once a client dropped while holding the vehicle.
    pub fn is_flagged(&self) -> bool {
        self.flagged
    }

    pub fn takeover(&self) -> bool {
        self.takeover
    }

    pub fn cav(&self) -> &str {
        &self.cav
    }

    pub fn episode(&self) -> &Episode {
        &self.episode
    }

    pub fn demos(&self) -> &[DemonstrationLog] {
        &self.demos
    }

    fn event(&self, kind: &str, details: impl Into<String>) -> ServerFrame {
        ServerFrame::Event(EventFrame {
            tick: self.tick(),
            kind: kind.to_string(),
            details: details.into(),
        })
    }

    /// Parses one NDJSON line; malformed input yields an `error` event.
    pub fn handle_line(&mut self, line: &str) -> Vec<ServerFrame> {
        if line.trim().is_empty() {
            return Vec::new();
        }
        match ClientFrame::parse(line) {
            Ok(f) => self.handle_frame(f),
            Err(e) => vec![self.event("error", format!("malformed frame: {e}"))],
        }
    }

    /// Control frames are latest-wins and take effect at the next tick;
    /// session verbs apply immediately.
    pub fn handle_frame(&mut self, frame: ClientFrame) -> Vec<ServerFrame> {
        match frame {
            ClientFrame::Control {
                throttle,
                brake,
                steer,
                takeover,
                ..
            } => {
                let was = self.takeover;
                self.control = ControlCommand { throttle, brake, steer }.clamped(1.0);
                self.takeover = takeover;
                if takeover {
                    self.failsafe = false;
                }
                if was != takeover {
                    let kind = if takeover { "takeover" } else { "release" };
                    return vec![self.event(kind, self.cav.clone())];
                }
                Vec::new()
            }
            ClientFrame::Session { verb } => self.session(verb),
        }
    }

    fn session(&mut self, verb: SessionVerb) -> Vec<ServerFrame> {
        match verb {
            SessionVerb::Pause => {
                self.paused = true;
                vec![self.event("session", "paused"), self.state_frame()]
            }
            SessionVerb::Resume => {
                self.paused = false;
                vec![self.event("session", "resumed")]
            }
            SessionVerb::Reset => {
                self.episode = Episode::new(&self.scenario, &self.bindings, &self.cfg, self.seed)
                    .expect("scenario validated at session start");
                self.control = ControlCommand::default();
                self.takeover = false;
                self.failsafe = false;
                self.inputs.clear();
                self.recording_from = None;
                vec![self.event("session", "reset"), self.state_frame()]
            }
            SessionVerb::RecordStart => {
                self.recording_from = Some(self.tick());
                vec![self.event("session", "recording")]
            }
            SessionVerb::RecordStop => match self.recording_from.take() {
                None => vec![self.event("error", "record_stop without record_start")],
                Some(from) => {
                    let demo = self.demo(from);
                    let details = format!("demo {} ticks {}", self.demos.len(), demo.ticks.len());
                    self.demos.push(demo);
                    vec![self.event("recorded", details)]
                }
            },
        }
    }

    /// Snapshot of everything since the last reset as a replayable log.
    pub fn demo(&self, recorded_from: u64) -> DemonstrationLog {
        let outcome = self
            .episode
            .results()
            .into_iter()
            .find(|r| r.cav_id == self.cav)
            .expect("controlled CAV exists");
        DemonstrationLog {
            scenario_id: self.scenario.id.clone(),
            cav_id: self.cav.clone(),
            seed: self.seed,
            bindings: self.bindings.clone(),
            config: self.cfg.clone(),
            recorded_from,
            ticks: self.inputs.clone(),
            outcome,
            trace_digest: trace_digest(self.episode.trace()),
        }
    }

    /// Operator command in force for the coming step, if any.
    fn override_command(&self) -> Option<ControlCommand> {
        if self.failsafe {
            Some(ControlCommand::FULL_BRAKE)
        } else if self.takeover {
            Some(self.control)
        } else {
            None
        }
    }

    /// Advances one tick unless paused or finished; returns the frames to broadcast.
    pub fn step(&mut self) -> Vec<ServerFrame> {
        if self.paused || self.episode.is_done() {
            return Vec::new();
        }
        let o = self.override_command();
        self.episode.set_override(&self.cav, o);
        let before = self.episode.world().vehicles.get(&self.cav).copied();
        let tick = self.tick();
        let report = self.episode.step();
        let applied = report
            .commands
            .get(&self.cav)
            .copied()
            .or_else(|| self.episode.last_command(&self.cav))
            .unwrap_or_default();
        let (x, y, yaw, v) = before.map_or((0.0, 0.0, 0.0, 0.0), |b| (b.x, b.y, b.yaw, b.v));
        self.inputs.push(DemoTick {
            tick,
            x,
            y,
            yaw,
            v,
            command: o.map(|c| c.clamped(1.0)).unwrap_or(applied),
            takeover: o.is_some(),
        });
        let mut out: Vec<ServerFrame> = report
            .events
            .into_iter()
            .map(|e| {
                ServerFrame::Event(EventFrame {
                    tick: e.tick,
                    kind: e.kind,
                    details: e.details,
                })
            })
            .collect();
        out.push(self.state_frame());
        if report.done {
            let r = self.episode.results();
            let details = r
                .iter()
                .map(|r| format!("{} ds={:.2} rc={:.2} success={}", r.cav_id, r.ds, r.rc_pct, r.success))
                .collect::<Vec<_>>()
                .join("; ");
            out.push(self.event("done", details));
        }
        out
    }

    /// Client went away: if it held the vehicle, brake fully from the next tick on.
    pub fn disconnect(&mut self) -> Vec<ServerFrame> {
        if self.takeover {
            self.failsafe = true;
            self.flagged = true;
            self.episode.set_override(&self.cav, Some(ControlCommand::FULL_BRAKE));
            return vec![self.event("failsafe", format!("{} full brake after disconnect", self.cav))];
        }
        Vec::new()
    }

    pub fn state_frame(&self) -> ServerFrame {
        let w = self.episode.world();
        let ego = w.vehicles.get(&self.cav).copied();
        let cmd = self.episode.last_command(&self.cav).unwrap_or_default();
        let e = ego.map_or(EgoState::default(), |v| EgoState {
            x: v.x,
            y: v.y,
            yaw: v.yaw,
            v: v.v,
            throttle: cmd.throttle,
            brake: cmd.brake,
            steer: cmd.steer,
        });
        let mut actors = Vec::new();
        for (id, v) in &w.vehicles {
            if *id == self.cav {
                continue;
            }
            actors.push(ActorFrame {
                id: id.clone(),
                class: w.class_of(id).unwrap_or(ActorClass::Vehicle),
                x: v.x,
                y: v.y,
                yaw: v.yaw,
                v: v.v,
                length: v.footprint.length,
                width: v.footprint.width,
            });
        }
        for (id, p) in &w.pedestrians {
            actors.push(ActorFrame {
                id: id.clone(),
                class: ActorClass::Pedestrian,
                x: p.x,
                y: p.y,
                yaw: p.heading,
                v: p.v,
                length: 2.0 * PEDESTRIAN_RADIUS,
                width: 2.0 * PEDESTRIAN_RADIUS,
            });
        }
        let route = self
            .scenario
            .cav(&self.cav)
            .map(|c| c.route.waypoints.iter().map(|p| [p.x, p.y]).collect())
            .unwrap_or_default();
        let tick = self.tick();
        ServerFrame::State(Box::new(StateFrame {
            tick,
            sim_time_s: tick as f64 * DT,
            ego: EgoFrame {
                id: self.cav.clone(),
                state: e,
            },
            actors,
            route,
            lane_graph_digest: self.lane_digest.clone(),
            episode: EpisodeStatus {
                rc_pct: self.episode.route_completion(&self.cav).unwrap_or(0.0),
                infractions: self.episode.infractions(&self.cav).len(),
                timer_s: tick as f64 * DT,
            },
            paused: self.paused,
            takeover: self.takeover,
            recording: self.recording_from.is_some(),
            done: self.episode.is_done(),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::PolicyKind;
    use crate::bench::verify_demo;
    use crate::crafted;

    fn session() -> BridgeSession {
        let s = crafted::straight_route(200.0, 8.0);
        let b = Bindings::uniform(&s, PolicyKind::Single);
        BridgeSession::new(s, b, EpisodeConfig::default(), 1, "cav1").unwrap()
    }

    fn brake(takeover: bool) -> ClientFrame {
        ClientFrame::Control {
            tick_hint: None,
            throttle: 0.0,
            brake: 1.0,
            steer: 0.0,
            takeover,
        }
    }

    #[test]
    fn frames_parse_with_unknown_fields() {
        let f = ClientFrame::parse(r#"{"type":"control","throttle":0.5,"takeover":true,"gear":3}"#).unwrap();
        assert!(matches!(f, ClientFrame::Control { takeover: true, .. }));
        let f = ClientFrame::parse(r#"{"type":"session","verb":"record_start","x":1}"#).unwrap();
        assert_eq!(f, ClientFrame::Session { verb: SessionVerb::RecordStart });
        let mut s = session();
        let out = s.handle_line("{nope");
        assert_eq!(out[0].as_event().unwrap().kind, "error");
    }

    #[test]
    fn brake_shows_in_next_state_frame() {
        let mut s = session();
        for _ in 0..40 {
            s.step();
        }
        let t = s.tick();
        s.handle_frame(brake(true));
        let out = s.step();
        let st = out.iter().find_map(ServerFrame::as_state).unwrap();
        assert_eq!(st.tick, t + 1);
        assert_eq!(st.ego.state.brake, 1.0);
    }

    #[test]
    fn disconnect_during_takeover_brakes_within_one_tick() {
        let mut s = session();
        for _ in 0..30 {
            s.step();
        }
        s.handle_frame(ClientFrame::Control {
            tick_hint: None,
            throttle: 0.6,
            brake: 0.0,
            steer: 0.0,
            takeover: true,
        });
        s.step();
        s.disconnect();
        assert!(s.is_flagged());
        let out = s.step();
        assert_eq!(out.iter().find_map(ServerFrame::as_state).unwrap().ego.state.brake, 1.0);
    }

    #[test]
    fn pause_resume_matches_uninterrupted_run() {
        let script = |s: &mut BridgeSession, pause: bool| {
            for k in 0..120u64 {
                if k == 50 {
                    s.handle_frame(brake(true));
                }
                if k == 70 {
                    s.handle_frame(brake(false));
                }
                if pause && k == 60 {
                    s.handle_frame(ClientFrame::Session { verb: SessionVerb::Pause });
                    for _ in 0..5 {
                        assert!(s.step().is_empty());
                    }
                    s.handle_frame(ClientFrame::Session { verb: SessionVerb::Resume });
                }
                s.step();
            }
            s.episode().trace().to_text()
        };
        let (mut a, mut b) = (session(), session());
        assert_eq!(script(&mut a, false), script(&mut b, true));
    }

    #[test]
    fn recorded_demo_replays_identically() {
        let mut s = session();
        s.handle_frame(ClientFrame::Session { verb: SessionVerb::RecordStart });
        for k in 0..400u64 {
            if k == 20 {
                s.handle_frame(ClientFrame::Control {
                    tick_hint: Some(k),
                    throttle: 0.4,
                    brake: 0.0,
                    steer: 0.01,
                    takeover: true,
                });
            }
            if k == 60 {
                s.handle_frame(brake(false));
            }
            s.step();
        }
        s.handle_frame(ClientFrame::Session { verb: SessionVerb::RecordStop });
        let demo = &s.demos()[0];
        assert!(verify_demo(demo, &crafted::straight_route(200.0, 8.0)).unwrap());
    }
}
