use super::actors::{lane_chain, replay_actor_step, reactive_follow_step, IdmParams, ReactiveActor};
use super::trace::{EpisodeTrace, TraceEvent, TraceRecord};
use super::{bicycle_step_with, collision_check, BodyKind, ControlCommand, DynamicsParams, PedestrianState, VehicleState, WorldState, DT};
use crate::agents::{
    sense_from, Detection, Observation, PlannedTrajectory, Policy, PolicyHistory, PolicyKind, StopConstraint,
    SENSOR_RANGE,
};
use crate::control::{track_plan, ControllerProfile, TrackingState};
use crate::geometry::{cumulative_lengths, project_on_polyline, Pose2, Vec2};
use crate::metrics::{EpisodeResult, InfractionEvent, InfractionKind, OpenLoopSample, PenaltyTable, RouteProgress};
use crate::rng::substream;
use crate::scenario::{validate_scenario, ActorBehavior, ActorClass, Scenario, Violation};
use crate::v2x::{Channel, ChannelConfig, Payload, PriorityKey};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationMode {
    /// Any collision involving a CAV ends the episode.
    #[default]
    Terminate,
    ContinueWithPenalty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub channel: ChannelConfig,
    pub termination: TerminationMode,
    pub controller: String,
    pub penalties: PenaltyTable,
    pub sensor_range: f64,
    /// Gaussian noise on own-sensor detection centers, m.
    pub detection_noise_sigma: f64,
    /// Continuous time off route before the timeout infraction, s.
    pub off_route_timeout_s: f64,
    pub collect_open_loop: bool,
    pub open_loop_every_ticks: u64,
    pub dynamics: DynamicsParams,
    pub idm: IdmParams,
    pub max_duration_s: Option<f64>,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            channel: ChannelConfig::default(),
            termination: TerminationMode::Terminate,
            controller: "v2x_controller".into(),
            penalties: PenaltyTable::default(),
            sensor_range: SENSOR_RANGE,
            detection_noise_sigma: 0.0,
            off_route_timeout_s: 10.0,
            collect_open_loop: false,
            open_loop_every_ticks: 10,
            dynamics: DynamicsParams::default(),
            idm: IdmParams::default(),
            max_duration_s: None,
        }
    }
}

impl EpisodeConfig {
    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

/// Policy binding per CAV id.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Bindings(pub BTreeMap<String, PolicyKind>);

impl Bindings {
    pub fn uniform(s: &Scenario, kind: PolicyKind) -> Self {
        Self(s.cavs.iter().map(|c| (c.id.clone(), kind.clone())).collect())
    }

    pub fn with(mut self, cav: &str, kind: PolicyKind) -> Self {
        self.0.insert(cav.to_string(), kind);
        self
    }

    pub fn get(&self, cav: &str) -> Option<&PolicyKind> {
        self.0.get(cav)
    }

    /// Label used in results: the binding when all CAVs agree, else `mixed`.
    pub fn label(&self) -> String {
        let kinds: BTreeSet<String> = self.0.values().map(|k| k.to_string()).collect();
        match kinds.len() {
            1 => kinds.into_iter().next().unwrap_or_default(),
            _ => "mixed".into(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EpisodeError {
    #[error("scenario {id} is invalid: {} violation(s)", violations.len())]
    InvalidScenario { id: String, violations: Vec<Violation> },
    #[error("CAV {0} has no policy binding")]
    UnboundCav(String),
    #[error("policy binding {0} needs an external transport")]
    ExternalUnavailable(String),
    #[error("unknown controller profile {0}")]
    UnknownController(String),
    #[error("invalid channel configuration")]
    InvalidChannel,
}

/// A directed wait edge observed at one tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaitEdge {
    pub tick: u64,
    pub waiter: String,
    pub holder: String,
    pub waiter_key: Option<PriorityKey>,
    pub holder_key: Option<PriorityKey>,
}

/// What happened during one tick; handed to bridge listeners.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepReport {
    pub tick: u64,
    pub commands: BTreeMap<String, ControlCommand>,
    pub events: Vec<TraceEvent>,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct EpisodeOutput {
    pub trace: EpisodeTrace,
    pub results: Vec<EpisodeResult>,
    pub open_loop: Vec<OpenLoopSample>,
    pub wait_edges: Vec<WaitEdge>,
}

struct CavRuntime {
    id: String,
    policy: Box<dyn Policy>,
    policy_label: String,
    history: PolicyHistory,
    tracking: TrackingState,
    progress: RouteProgress,
    speed_cap: f64,
    stop_lines: Vec<(StopConstraint, f64, bool)>,
    last_cmd: ControlCommand,
    plan: Option<PlannedTrajectory>,
    pending: Option<(u64, PlannedTrajectory)>,
    busy_until: u64,
    compute_delay: u64,
    active: bool,
    failed: bool,
    infractions: Vec<InfractionEvent>,
    completion_tick: Option<u64>,
    off_route_ticks: u64,
    off_route_flagged: bool,
    contacts: BTreeSet<String>,
    priority: Option<PriorityKey>,
    waits_for: Vec<String>,
    last_obs_dets: Vec<Detection>,
    fresh: bool,
}

enum ActorRuntime {
    Replay { id: String, class: ActorClass, track: crate::scenario::ActorTrack, frozen: bool },
    Reactive { class: ActorClass, actor: ReactiveActor },
}

struct PendingSample {
    sample: OpenLoopSample,
    ego: String,
    others: Vec<String>,
}

/// A running episode. Ticks advance one at a time through [`Episode::step`].
pub struct Episode {
    scenario: Scenario,
    cfg: EpisodeConfig,
    seed: u64,
    profile: ControllerProfile,
    world: WorldState,
    channel: Channel,
    cavs: Vec<CavRuntime>,
    actors: Vec<ActorRuntime>,
    trace: EpisodeTrace,
    wait_edges: Vec<WaitEdge>,
    overrides: BTreeMap<String, ControlCommand>,
    max_ticks: u64,
    done: bool,
    positions: Vec<BTreeMap<String, Vec2>>,
    samples: Vec<PendingSample>,
}

impl Episode {
    /// Episode with built-in policies for every binding.
    pub fn new(scenario: &Scenario, bindings: &Bindings, cfg: &EpisodeConfig, seed: u64) -> Result<Self, EpisodeError> {
        Self::with_factory(scenario, bindings, cfg, seed, &mut |cav, kind| kind.builtin(cav))
    }

    /// Episode whose policies come from `factory`, called once per CAV in id order.
    pub fn with_factory(
        scenario: &Scenario,
        bindings: &Bindings,
        cfg: &EpisodeConfig,
        seed: u64,
        factory: &mut dyn FnMut(&str, &PolicyKind) -> Option<Box<dyn Policy>>,
    ) -> Result<Self, EpisodeError> {
        assert!((DT - 0.05).abs() < f64::EPSILON, "fixed 20 Hz step");
        let violations = validate_scenario(scenario);
        if !violations.is_empty() {
            return Err(EpisodeError::InvalidScenario {
                id: scenario.id.clone(),
                violations,
            });
        }
        if !cfg.channel.is_valid() {
            return Err(EpisodeError::InvalidChannel);
        }
        let profile = ControllerProfile::named(&cfg.controller).ok_or_else(|| EpisodeError::UnknownController(cfg.controller.clone()))?;
        let mut world = WorldState::empty(seed);
        let mut channel = Channel::new(cfg.channel.clone(), seed);
        let mut specs: Vec<&crate::scenario::CavSpec> = scenario.cavs.iter().collect();
        specs.sort_by(|a, b| a.id.cmp(&b.id));
        let mut cavs = Vec::new();
        for spec in specs {
            let kind = bindings.get(&spec.id).ok_or_else(|| EpisodeError::UnboundCav(spec.id.clone()))?;
            let policy = factory(&spec.id, kind).ok_or_else(|| EpisodeError::ExternalUnavailable(kind.to_string()))?;
            let lane_width = scenario.map.nearest(spec.spawn.position()).map_or(3.5, |p| scenario.map.lanes[p.lane_index].width);
            let mut progress = RouteProgress::new(&spec.route.waypoints, 2.0 * lane_width);
            progress.update(spec.spawn.position());
            let cum = cumulative_lengths(&spec.route.waypoints);
            let stop_lines = spec
                .route
                .stop_lines
                .iter()
                .map(|sl| {
                    let st = project_on_polyline(sl.position, &spec.route.waypoints, &cum).map_or(0.0, |p| p.station);
                    (
                        StopConstraint {
                            position: sl.position,
                            release_time_s: sl.release_time_s,
                        },
                        st,
                        false,
                    )
                })
                .collect();
            let mut st = VehicleState::new(spec.spawn, spec.spawn_speed, spec.footprint);
            st.wheelbase = st.wheelbase.min(spec.footprint.length);
            world.vehicles.insert(spec.id.clone(), st);
            world.classes.insert(spec.id.clone(), ActorClass::Vehicle);
            world.cavs.insert(spec.id.clone());
            channel.register(spec.id.clone());
            let policy_label = kind.to_string();
            cavs.push(CavRuntime {
                id: spec.id.clone(),
                policy,
                policy_label: policy_label.clone(),
                history: PolicyHistory::default(),
                tracking: TrackingState::new(&profile),
                progress,
                speed_cap: spec.route.target_speed_cap,
                stop_lines,
                last_cmd: ControlCommand::default(),
                plan: None,
                pending: None,
                busy_until: 0,
                compute_delay: cfg.channel.compute_delay_ticks.get(&policy_label).copied().unwrap_or(0),
                active: true,
                failed: false,
                infractions: Vec::new(),
                completion_tick: None,
                off_route_ticks: 0,
                off_route_flagged: false,
                contacts: BTreeSet::new(),
                priority: None,
                waits_for: Vec::new(),
                last_obs_dets: Vec::new(),
                fresh: false,
            });
        }
        for i in &scenario.infrastructure {
            channel.register(i.id.clone());
        }
        let mut actors = Vec::new();
        for a in &scenario.background_actors {
            match &a.behavior {
                ActorBehavior::Replay(track) => actors.push(ActorRuntime::Replay {
                    id: a.id.clone(),
                    class: a.class,
                    track: track.clone(),
                    frozen: false,
                }),
                ActorBehavior::ReactiveFollow {
                    lane,
                    station,
                    speed,
                    target_speed,
                } => {
                    let path = lane_chain(&scenario.map, lane, station + 2000.0);
                    let mut actor = ReactiveActor::new(a.id.clone(), path, *station, *speed, *target_speed, a.footprint.length, a.footprint.width);
                    actor.lane_width = scenario.map.lane(lane).map_or(3.5, |l| l.width);
                    actors.push(ActorRuntime::Reactive { class: a.class, actor });
                }
            }
            world.classes.insert(a.id.clone(), a.class);
        }
        world.static_objects = scenario.static_objects.clone();
        let duration = cfg.max_duration_s.unwrap_or(scenario.max_duration_s);
        let mut ep = Episode {
            scenario: scenario.clone(),
            cfg: cfg.clone(),
            seed,
            profile,
            world,
            channel,
            cavs,
            actors,
            trace: EpisodeTrace {
                scenario_id: scenario.id.clone(),
                seed,
                cfg_digest: cfg.digest(),
                ..Default::default()
            },
            wait_edges: Vec::new(),
            overrides: BTreeMap::new(),
            max_ticks: (duration / DT).round() as u64,
            done: false,
            positions: Vec::new(),
            samples: Vec::new(),
        };
        ep.place_actors(0);
        ep.record_positions();
        Ok(ep)
    }

    fn place_actors(&mut self, tick: u64) {
        let t = tick as f64 * DT;
        let scenario = &self.scenario;
        for a in &self.actors {
            match a {
                ActorRuntime::Replay { id, class, track, frozen } => {
                    if *frozen {
                        if let Some(p) = self.world.pedestrians.get_mut(id) {
                            p.v = 0.0;
                        }
                        if let Some(v) = self.world.vehicles.get_mut(id) {
                            v.v = 0.0;
                        }
                        continue;
                    }
                    let (pose, v) = replay_actor_step(track, t);
                    insert_actor(&mut self.world, scenario, id, *class, pose, v);
                }
                ActorRuntime::Reactive { class, actor } => {
                    // leaves the world once it runs off the end of its lane chain
                    if actor.station >= actor.cumulative.last().copied().unwrap_or(0.0) - 1e-6 {
                        self.world.vehicles.remove(&actor.id);
                        self.world.pedestrians.remove(&actor.id);
                        continue;
                    }
                    insert_actor(&mut self.world, scenario, &actor.id, *class, actor.pose(), actor.v);
                }
            }
        }
    }

    fn record_positions(&mut self) {
        if !self.cfg.collect_open_loop {
            return;
        }
        let mut m = BTreeMap::new();
        for (id, v) in &self.world.vehicles {
            m.insert(id.clone(), v.position());
        }
        for (id, p) in &self.world.pedestrians {
            m.insert(id.clone(), p.position());
        }
        self.positions.push(m);
    }

    pub fn tick(&self) -> u64 {
        self.world.tick
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.cfg
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn trace(&self) -> &EpisodeTrace {
        &self.trace
    }

    pub fn channel(&self) -> &Channel {
        &self.channel
    }

    /// Replace a CAV's command with `cmd` from the next controller stage on; `None` hands control back.
    pub fn set_override(&mut self, cav: &str, cmd: Option<ControlCommand>) {
        match cmd {
            Some(c) => {
                self.overrides.insert(cav.to_string(), c.clamped(1.0));
            }
            None => {
                self.overrides.remove(cav);
            }
        }
    }

    pub fn last_command(&self, cav: &str) -> Option<ControlCommand> {
        self.cavs.iter().find(|c| c.id == cav).map(|c| c.last_cmd)
    }

    pub fn route_completion(&self, cav: &str) -> Option<f64> {
        self.cavs.iter().find(|c| c.id == cav).map(|c| c.progress.completion_pct())
    }

    pub fn infractions(&self, cav: &str) -> Vec<InfractionEvent> {
        self.cavs.iter().find(|c| c.id == cav).map_or(Vec::new(), |c| c.infractions.clone())
    }

    pub fn current_plan(&self, cav: &str) -> Option<&PlannedTrajectory> {
        self.cavs.iter().find(|c| c.id == cav).and_then(|c| c.plan.as_ref())
    }

    fn event(&mut self, report: &mut StepReport, tick: u64, kind: &str, details: String) {
        let e = TraceEvent {
            tick,
            kind: kind.to_string(),
            details,
        };
        self.trace.events.push(e.clone());
        report.events.push(e);
    }

    /// Advances the episode by one tick.
    pub fn step(&mut self) -> StepReport {
        let t = self.world.tick;
        let now = t as f64 * DT;
        let mut report = StepReport {
            tick: t,
            ..Default::default()
        };
        if self.done {
            report.done = true;
            return report;
        }
        let range = self.cfg.sensor_range;

        // 0: sense and share
        for i in 0..self.cavs.len() {
            if !self.cavs[i].active {
                continue;
            }
            let id = self.cavs[i].id.clone();
            let ego = self.world.vehicles[&id];
            let pose = ego.pose();
            let mut dets: Vec<Detection> = sense_from(&self.world, ego.position(), Some(&id), range, &id)
                .into_iter()
                .map(|d| d.to_local(&pose))
                .collect();
            if self.cfg.detection_noise_sigma > 0.0 {
                let mut rng = substream(self.seed, &["det-noise", &id, &t.to_string()]);
                let n = Normal::new(0.0, self.cfg.detection_noise_sigma).expect("finite sigma");
                for d in &mut dets {
                    d.center = d.center + Vec2::new(n.sample(&mut rng), n.sample(&mut rng));
                }
            }
            self.channel.send(
                &id,
                t,
                Payload::PerceptionShare {
                    detections: dets.clone(),
                    sender_pose: pose,
                },
            );
            self.cavs[i].last_obs_dets = dets;
        }
        for infra in &self.scenario.infrastructure {
            let dets: Vec<Detection> = sense_from(&self.world, infra.pose.position(), None, infra.sensor_range, &infra.id)
                .into_iter()
                .map(|d| d.to_local(&infra.pose))
                .collect();
            self.channel.send(
                &infra.id,
                t,
                Payload::PerceptionShare {
                    detections: dets,
                    sender_pose: infra.pose,
                },
            );
        }

        // 1-3: deliver, observe, plan
        let mut outgoing: Vec<(String, Payload)> = Vec::new();
        let mut perceived: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
        for i in 0..self.cavs.len() {
            let messages = self.channel.deliver_due(t, &self.cavs[i].id.clone());
            let c = &mut self.cavs[i];
            if !c.active {
                continue;
            }
            c.waits_for.clear();
            if let Some((ready, _)) = &c.pending {
                if *ready <= t {
                    c.plan = c.pending.take().map(|(_, p)| p);
                    c.plan_fresh();
                }
            }
            if c.failed || t < c.busy_until {
                continue;
            }
            let ego = self.world.vehicles[&c.id];
            let obs = Observation {
                tick: t,
                time_s: now,
                ego_id: c.id.clone(),
                ego,
                route_remaining: c.progress.remaining(),
                route_progress_m: c.progress.station(),
                route_speed_cap: c.speed_cap,
                stop_lines: c.stop_lines.iter().filter(|s| !s.2).map(|s| s.0).collect(),
                detections: std::mem::take(&mut c.last_obs_dets),
                messages,
            };
            c.history.push(obs.clone());
            match c.policy.plan(&obs, &c.history) {
                Ok(out) => {
                    for m in out.messages {
                        outgoing.push((c.id.clone(), m));
                    }
                    c.waits_for = out.waits_for;
                    if let Some(k) = out.priority {
                        c.priority = Some(k);
                    }
                    let plan = out.plan.filter(|p| p.is_well_formed(now));
                    match plan {
                        Some(p) => {
                            perceived.insert(c.id.clone(), out.perceived);
                            if c.compute_delay == 0 {
                                c.plan = Some(p);
                                c.plan_fresh();
                            } else {
                                c.pending = Some((t + c.compute_delay, p));
                                c.busy_until = t + c.compute_delay;
                            }
                        }
                        None => c.fail(),
                    }
                }
                Err(_) => c.fail(),
            }
            if c.failed {
                let id = c.id.clone();
                self.event(&mut report, t, "policy_failure", id);
            }
        }
        for (sender, payload) in outgoing {
            self.channel.send(&sender, t, payload);
        }
        let keys: BTreeMap<String, Option<PriorityKey>> = self.cavs.iter().map(|c| (c.id.clone(), c.priority.clone())).collect();
        let mut wait_events = Vec::new();
        for c in &self.cavs {
            for h in &c.waits_for {
                let edge = WaitEdge {
                    tick: t,
                    waiter: c.id.clone(),
                    holder: h.clone(),
                    waiter_key: c.priority.clone(),
                    holder_key: keys.get(h).cloned().flatten(),
                };
                wait_events.push(format!("{} {}", edge.waiter, edge.holder));
                self.wait_edges.push(edge);
            }
        }
        for d in wait_events {
            self.event(&mut report, t, "wait", d);
        }

        // 4: control
        let mut commands = BTreeMap::new();
        for c in &mut self.cavs {
            if !c.active {
                continue;
            }
            let ego = self.world.vehicles[&c.id];
            let cmd = if c.failed {
                ControlCommand::FULL_BRAKE
            } else if let Some(o) = self.overrides.get(&c.id) {
                // keep the tracker warm so a hand-back is smooth
                if let Some(plan) = &c.plan {
                    track_plan(&self.profile, &mut c.tracking, &ego, &plan.points, c.speed_cap, DT);
                }
                *o
            } else if c.take_fresh() {
                let plan = c.plan.as_ref().expect("fresh plan");
                track_plan(&self.profile, &mut c.tracking, &ego, &plan.points, c.speed_cap, DT)
            } else {
                c.last_cmd
            };
            c.last_cmd = cmd;
            commands.insert(c.id.clone(), cmd);
            self.trace.records.push(TraceRecord {
                tick: t,
                id: c.id.clone(),
                x: ego.x,
                y: ego.y,
                yaw: ego.yaw,
                v: ego.v,
                throttle: cmd.throttle,
                brake: cmd.brake,
                steer: cmd.steer,
            });
        }

        // open-loop sample bookkeeping
        if self.cfg.collect_open_loop && t % self.cfg.open_loop_every_ticks.max(1) == 0 {
            self.capture_samples(t, &perceived);
        }

        // 5: advance the world
        let world_t = self.world.clone();
        for (id, cmd) in &commands {
            let s = self.world.vehicles[id];
            let next = bicycle_step_with(&self.cfg.dynamics, &s, cmd, DT);
            self.world.vehicles.insert(id.clone(), next);
        }
        for a in &mut self.actors {
            if let ActorRuntime::Reactive { actor, .. } = a {
                *actor = reactive_follow_step(actor, &world_t, &self.cfg.idm, DT);
            }
        }
        self.world.tick = t + 1;
        self.place_actors(t + 1);

        // 6: contacts and infractions
        let pairs = collision_check(&self.world);
        let kinds: BTreeMap<String, BodyKind> = self.world.bodies().iter().map(|b| (b.id.to_string(), b.kind)).collect();
        let mut touching: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (a, b) in &pairs {
            touching.entry(a.clone()).or_default().insert(b.clone());
            touching.entry(b.clone()).or_default().insert(a.clone());
        }
        // replay actors hold still after touching a CAV
        for a in &mut self.actors {
            if let ActorRuntime::Replay { id, frozen, .. } = a {
                if !*frozen && touching.get(id.as_str()).is_some_and(|s| s.iter().any(|o| self.world.cavs.contains(o))) {
                    *frozen = true;
                }
            }
        }
        let mut collided = false;
        let mut new_events = Vec::new();
        for c in &mut self.cavs {
            if !c.active {
                continue;
            }
            let now_touching = touching.get(&c.id).cloned().unwrap_or_default();
            for other in now_touching.difference(&c.contacts) {
                let kind = match kinds.get(other) {
                    Some(BodyKind::Pedestrian) => InfractionKind::CollisionPedestrian,
                    Some(BodyKind::Static) => InfractionKind::CollisionStatic,
                    Some(BodyKind::Vehicle(ActorClass::Pedestrian)) => InfractionKind::CollisionPedestrian,
                    _ => InfractionKind::CollisionVehicle,
                };
                c.infractions.push(InfractionEvent::new(kind, t + 1, &self.cfg.penalties, Some(other.clone())));
                new_events.push((kind.as_str().to_string(), format!("{} {}", c.id, other)));
                collided = true;
            }
            c.contacts = now_touching;
            let pos = self.world.vehicles[&c.id].position();
            if !c.failed {
                c.progress.update(pos);
            }
            let front = c.progress.station() + 0.5 * self.world.vehicles[&c.id].footprint.length;
            for (sl, station, crossed) in &mut c.stop_lines {
                if !*crossed && front > *station {
                    *crossed = true;
                    if (t + 1) as f64 * DT < sl.release_time_s {
                        c.infractions.push(InfractionEvent::new(InfractionKind::RedLight, t + 1, &self.cfg.penalties, None));
                        new_events.push(("red_light".into(), c.id.clone()));
                    }
                }
            }
            if c.progress.is_off_route() {
                c.off_route_ticks += 1;
                if !c.off_route_flagged && c.off_route_ticks as f64 * DT > self.cfg.off_route_timeout_s {
                    c.off_route_flagged = true;
                    c.infractions.push(InfractionEvent::new(InfractionKind::OffRouteTimeout, t + 1, &self.cfg.penalties, None));
                    new_events.push(("off_route_timeout".into(), c.id.clone()));
                }
            } else {
                c.off_route_ticks = 0;
            }
            if c.progress.is_complete() && !c.failed {
                c.completion_tick = Some(t + 1);
                c.active = false;
                new_events.push(("route_complete".into(), c.id.clone()));
            }
        }
        for (k, d) in new_events {
            self.event(&mut report, t + 1, &k, d);
        }
        for c in &self.cavs {
            if !c.active && self.world.vehicles.contains_key(&c.id) {
                self.world.vehicles.remove(&c.id);
                self.channel.unregister(&c.id);
            }
        }
        self.record_positions();

        let all_inactive = self.cavs.iter().all(|c| !c.active);
        let timed_out = t + 1 >= self.max_ticks;
        if (collided && self.cfg.termination == TerminationMode::Terminate) || all_inactive || timed_out {
            self.done = true;
        }
        report.commands = commands;
        report.done = self.done;
        report
    }

    fn capture_samples(&mut self, t: u64, perceived: &BTreeMap<String, Vec<Detection>>) {
        let range = self.cfg.sensor_range;
        for c in &self.cavs {
            let (Some(plan), Some(per)) = (&c.plan, perceived.get(&c.id)) else { continue };
            let Some(ego) = self.world.vehicles.get(&c.id) else { continue };
            let mut gt = Vec::new();
            let mut others = Vec::new();
            for b in self.world.bodies() {
                if b.id == c.id || b.shape.center().dist(ego.position()) > range {
                    continue;
                }
                gt.push(match b.shape {
                    super::Shape::Box(bx) => bx,
                    super::Shape::Disc(center, _) => crate::geometry::OrientedBox::new(center, 0.6, 0.6, b.velocity.angle()),
                });
                if b.kind != BodyKind::Static {
                    others.push(b.id.to_string());
                }
            }
            let statics: Vec<Vec<Vec2>> = self
                .world
                .static_objects
                .iter()
                .filter(|o| o.bbox.center.dist(ego.position()) <= range)
                .map(|o| vec![o.bbox.center; 7])
                .collect();
            self.samples.push(PendingSample {
                sample: OpenLoopSample {
                    scenario_id: self.scenario.id.clone(),
                    cav_id: c.id.clone(),
                    tick: t,
                    gt_boxes: gt,
                    predictions: per.iter().map(|d| (d.bbox(), d.score)).collect(),
                    origin: ego.position(),
                    origin_yaw: ego.yaw,
                    plan: plan.points.iter().skip(1).map(|p| p.p).collect(),
                    gt_future: Vec::new(),
                    others_future: statics,
                    grid_dt: 0.5,
                },
                ego: c.id.clone(),
                others,
            });
        }
    }

    fn finish_samples(&mut self) -> Vec<OpenLoopSample> {
        let mut out = Vec::new();
        let stride = (0.5 / DT).round() as usize;
        for ps in std::mem::take(&mut self.samples) {
            let t0 = ps.sample.tick as usize;
            let at = |k: usize, id: &str| self.positions.get(t0 + k * stride).and_then(|m| m.get(id)).copied();
            let gt: Option<Vec<Vec2>> = (1..=6).map(|k| at(k, &ps.ego)).collect();
            let Some(gt) = gt else { continue };
            let mut s = ps.sample;
            s.gt_future = gt;
            for o in &ps.others {
                let track: Option<Vec<Vec2>> = (0..=6).map(|k| at(k, o)).collect();
                if let Some(track) = track {
                    s.others_future.push(track);
                }
            }
            out.push(s);
        }
        out
    }

    pub fn results(&self) -> Vec<EpisodeResult> {
        self.cavs
            .iter()
            .map(|c| {
                EpisodeResult {
                    scenario_id: self.scenario.id.clone(),
                    bucket: self.scenario.bucket,
                    category: self.scenario.category,
                    cav_id: c.id.clone(),
                    policy: c.policy_label.clone(),
                    seed: self.seed,
                    rc_pct: c.progress.completion_pct(),
                    ip: 1.0,
                    ds: 0.0,
                    success: false,
                    infractions: c.infractions.clone(),
                    duration_ticks: self.world.tick,
                    completion_tick: c.completion_tick,
                    failed: c.failed,
                }
                .finalize()
            })
            .collect()
    }

    /// Runs to termination and returns everything collected.
    pub fn run(mut self) -> EpisodeOutput {
        while !self.done {
            self.step();
        }
        self.finish()
    }

    pub fn finish(mut self) -> EpisodeOutput {
        let results = self.results();
        let open_loop = self.finish_samples();
        let done_tick = self.world.tick;
        self.trace.events.push(TraceEvent {
            tick: done_tick,
            kind: "end".into(),
            details: results
                .iter()
                .map(|r| format!("{}:{:?}", r.cav_id, r.ds))
                .collect::<Vec<_>>()
                .join(" "),
        });
        EpisodeOutput {
            trace: self.trace,
            results,
            open_loop,
            wait_edges: self.wait_edges,
        }
    }
}

impl CavRuntime {
    fn fail(&mut self) {
        self.failed = true;
        self.plan = None;
        self.pending = None;
    }

    fn plan_fresh(&mut self) {
        self.fresh = true;
    }

    fn take_fresh(&mut self) -> bool {
        std::mem::replace(&mut self.fresh, false) && self.plan.is_some()
    }
}

fn insert_actor(w: &mut WorldState, s: &Scenario, id: &str, class: ActorClass, pose: Pose2, v: f64) {
    let spec = s.background_actors.iter().find(|a| a.id == id);
    match class {
        ActorClass::Pedestrian => {
            w.pedestrians.insert(
                id.to_string(),
                PedestrianState {
                    x: pose.x,
                    y: pose.y,
                    v,
                    heading: pose.yaw,
                },
            );
        }
        _ => {
            let fp = spec.map_or(crate::scenario::Footprint::CAR, |a| a.footprint);
            let mut st = VehicleState::new(pose, v, fp);
            st.wheelbase = st.wheelbase.min(fp.length);
            w.vehicles.insert(id.to_string(), st);
        }
    }
}

/// Runs one episode with built-in policies.
pub fn run_episode(s: &Scenario, bindings: &Bindings, cfg: &EpisodeConfig, seed: u64) -> Result<EpisodeOutput, EpisodeError> {
    Ok(Episode::new(s, bindings, cfg, seed)?.run())
}
