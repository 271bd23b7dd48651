use super::planner::{fused_world, plan_along_route, PlannerParams};
use super::{Observation, Policy, PolicyError, PolicyHistory, PolicyOutput};
use crate::geometry::{cumulative_lengths, segments_intersect, Vec2};
use crate::v2x::{Intent, IntentAction, Payload, PriorityKey};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NegotiationParams {
    /// Distance kept between a yielding vehicle's front and the conflict point, m.
    pub clearance: f64,
    /// Slack added to arrival windows when testing overlap, s.
    pub window_buffer: f64,
    pub announce_period_ticks: u64,
    /// A winner's claim is considered void this long after its claimed exit, s.
    pub release_after_s: f64,
    /// Speed floor for arrival estimates, m/s.
    pub min_speed: f64,
    /// How long cleared intents keep being broadcast, s.
    pub cleared_repeat_s: f64,
}

impl Default for NegotiationParams {
    fn default() -> Self {
        Self {
            clearance: 5.0,
            window_buffer: 1.0,
            announce_period_ticks: 20,
            release_after_s: 1.0,
            min_speed: 2.0,
            cleared_repeat_s: 2.0,
        }
    }
}

#[derive(Debug, Clone)]
struct PeerRoute {
    route: Vec<Vec2>,
    cum: Vec<f64>,
    speed: f64,
    sent_s: f64,
    half_length: f64,
}

#[derive(Debug, Clone)]
struct PeerIntent {
    intent: Intent,
    sent_s: f64,
}

#[derive(Debug, Clone)]
struct Conflict {
    id: String,
    point: Vec2,
    /// Absolute station of the conflict point on the own route.
    station: f64,
    claimed: (f64, f64),
    passed_at: Option<f64>,
}

/// Rule-based negotiation: peers announce routes, overlapping arrival windows at a
/// route crossing open a conflict, and a sticky global priority key decides who yields.
pub struct NegotiationPolicy {
    id: String,
    planner: PlannerParams,
    params: NegotiationParams,
    peers: BTreeMap<String, PeerRoute>,
    intents: BTreeMap<(String, String), PeerIntent>,
    conflicts: BTreeMap<String, Conflict>,
    key: Option<PriorityKey>,
}

pub fn conflict_id(a: &str, b: &str) -> String {
    if a < b {
        format!("{a}|{b}")
    } else {
        format!("{b}|{a}")
    }
}

/// First crossing of `own` with `other`, as (own station, other station, point).
/// Collinear overlaps are not crossings.
fn first_crossing(own: &[Vec2], own_cum: &[f64], other: &[Vec2], other_cum: &[f64]) -> Option<(f64, f64, Vec2)> {
    for i in 0..own.len().saturating_sub(1) {
        let mut best: Option<(f64, f64, Vec2)> = None;
        for j in 0..other.len().saturating_sub(1) {
            if let Some(p) = segments_intersect(own[i], own[i + 1], other[j], other[j + 1]) {
                let s_own = own_cum[i] + own[i].dist(p);
                let s_other = other_cum[j] + other[j].dist(p);
                if best.is_none_or(|b| s_own < b.0) {
                    best = Some((s_own, s_other, p));
                }
            }
        }
        if best.is_some() {
            return best;
        }
    }
    None
}

impl NegotiationPolicy {
    pub fn new(id: &str, planner: PlannerParams, params: NegotiationParams) -> Self {
        Self {
            id: id.to_string(),
            planner,
            params,
            peers: BTreeMap::new(),
            intents: BTreeMap::new(),
            conflicts: BTreeMap::new(),
            key: None,
        }
    }

    pub fn priority(&self) -> Option<&PriorityKey> {
        self.key.as_ref()
    }

    fn window(&self, now: f64, dist: f64, v: f64, half_len: f64) -> (f64, f64) {
        let v = v.max(self.params.min_speed);
        let c = self.params.clearance;
        (now + (dist - c - half_len).max(0.0) / v, now + (dist + c + half_len).max(0.0) / v)
    }

    fn ingest(&mut self, obs: &Observation) {
        for m in &obs.messages {
            let sent_s = crate::sim::tick_time(m.tick_sent);
            match &m.payload {
                Payload::RouteAnnounce { route, speed, half_length } if route.len() >= 2 => {
                    self.peers.insert(
                        m.sender.clone(),
                        PeerRoute {
                            cum: cumulative_lengths(route),
                            route: route.clone(),
                            speed: *speed,
                            sent_s,
                            half_length: *half_length,
                        },
                    );
                }
                Payload::Intent(intent) => {
                    self.intents.insert(
                        (m.sender.clone(), intent.conflict_id.clone()),
                        PeerIntent {
                            intent: intent.clone(),
                            sent_s,
                        },
                    );
                }
                _ => {}
            }
        }
    }

    fn detect(&mut self, obs: &Observation, route: &[Vec2], cum: &[f64]) {
        let now = obs.time_s;
        let half = 0.5 * obs.ego.footprint.length;
        let mut found = Vec::new();
        for (peer, pr) in &self.peers {
            if self.conflicts.contains_key(peer) {
                continue;
            }
            let Some((s_me, s_peer, point)) = first_crossing(route, cum, &pr.route, &pr.cum) else { continue };
            let cid = conflict_id(&self.id, peer);
            let invited = self.intents.contains_key(&(peer.clone(), cid.clone()));
            let s_peer_now = s_peer - pr.speed * (now - pr.sent_s);
            if s_peer_now < -(self.params.clearance + 2.0 * pr.half_length) && !invited {
                continue;
            }
            let mine = self.window(now, s_me, obs.ego.v, half);
            let theirs = self.window(now, s_peer_now, pr.speed, pr.half_length);
            let b = self.params.window_buffer;
            let overlap = mine.0 < theirs.1 + b && theirs.0 < mine.1 + b;
            if overlap || invited {
                found.push((
                    peer.clone(),
                    Conflict {
                        id: cid,
                        point,
                        station: obs.route_progress_m + s_me,
                        claimed: mine,
                        passed_at: None,
                    },
                ));
            }
        }
        for (peer, c) in found {
            self.conflicts.insert(peer, c);
        }
    }
}

impl Policy for NegotiationPolicy {
    fn name(&self) -> &str {
        "negotiation"
    }

    fn plan(&mut self, obs: &Observation, _history: &PolicyHistory) -> Result<PolicyOutput, PolicyError> {
        let now = obs.time_s;
        let half = 0.5 * obs.ego.footprint.length;
        self.ingest(obs);
        let route = &obs.route_remaining;
        let cum = cumulative_lengths(route);
        if route.len() >= 2 {
            self.detect(obs, route, &cum);
        }

        // progress bookkeeping and claims
        let progress = obs.route_progress_m;
        let mut earliest: Option<f64> = None;
        for c in self.conflicts.values_mut() {
            if c.passed_at.is_none() && progress > c.station + half + 2.0 {
                c.passed_at = Some(now);
                c.claimed.1 = now;
            }
            if c.passed_at.is_none() {
                let dist = c.station - progress;
                let v = obs.ego.v.max(self.params.min_speed);
                let cl = self.params.clearance;
                c.claimed = (now + (dist - cl - half).max(0.0) / v, now + (dist + cl + half).max(0.0) / v);
                earliest = Some(earliest.map_or(c.claimed.0, |e: f64| e.min(c.claimed.0)));
            }
        }
        if self.key.is_none() {
            if let Some(t) = earliest {
                self.key = Some(PriorityKey::new(t, self.id.clone()));
            }
        }

        let mut stops = Vec::new();
        let mut waits_for = Vec::new();
        let mut messages = Vec::new();
        for (peer, c) in &self.conflicts {
            let mut action = IntentAction::Proceed;
            if c.passed_at.is_none() {
                let theirs = self.intents.get(&(peer.clone(), c.id.clone()));
                if let (Some(mine), Some(pi)) = (&self.key, theirs) {
                    let cleared = pi.intent.claimed.1 <= pi.sent_s || now > pi.intent.claimed.1 + self.params.release_after_s;
                    if pi.intent.priority < *mine && !cleared {
                        action = IntentAction::Yield;
                        waits_for.push(peer.clone());
                        stops.push(c.station - progress - self.params.clearance - half);
                    }
                }
            }
            let recent = c.passed_at.is_none_or(|t| now - t <= self.params.cleared_repeat_s);
            if let (Some(key), true) = (&self.key, recent) {
                messages.push(Payload::Intent(Intent {
                    conflict_id: c.id.clone(),
                    conflict_point: c.point,
                    claimed: c.claimed,
                    action,
                    priority: key.clone(),
                }));
            }
        }
        if obs.tick % self.params.announce_period_ticks == 0 && route.len() >= 2 {
            messages.push(Payload::RouteAnnounce {
                route: route.clone(),
                speed: obs.ego.v,
                half_length: half,
            });
        }

        let perceived = fused_world(obs);
        let plan = plan_along_route(obs, &perceived, &stops, &self.planner);
        Ok(PolicyOutput {
            plan: Some(plan),
            messages,
            waits_for,
            perceived,
            priority: self.priority().cloned(),
        })
    }
}

/// True when the directed wait graph has no cycle.
pub fn wait_graph_acyclic(edges: &[(String, String)]) -> bool {
    let mut adj: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (a, b) in edges {
        adj.entry(a).or_default().push(b);
    }
    // 0 unvisited, 1 on stack, 2 done
    let mut state: BTreeMap<&str, u8> = BTreeMap::new();
    fn visit<'a>(n: &'a str, adj: &BTreeMap<&'a str, Vec<&'a str>>, state: &mut BTreeMap<&'a str, u8>) -> bool {
        match state.get(n) {
            Some(1) => return false,
            Some(2) => return true,
            _ => {}
        }
        state.insert(n, 1);
        for m in adj.get(n).into_iter().flatten() {
            if !visit(m, adj, state) {
                return false;
            }
        }
        state.insert(n, 2);
        true
    }
    let nodes: Vec<&str> = adj.keys().copied().collect();
    nodes.into_iter().all(|n| visit(n, &adj, &mut state))
}
