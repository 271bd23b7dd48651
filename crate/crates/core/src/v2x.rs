//! Inter-agent message bus with deterministic latency and relative-pose noise.

use crate::agents::Detection;
use crate::geometry::{wrap_angle, Pose2, Vec2};
use crate::rng::substream;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntentAction {
    Proceed,
    Yield,
}

/// Total order used to resolve conflicts: earlier claimed arrival first, then lower id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorityKey {
    /// Claimed arrival time at the first conflict, in 0.1 s units.
    pub arrival_ds: i64,
    pub id: String,
}

impl PriorityKey {
    pub fn new(arrival_s: f64, id: impl Into<String>) -> Self {
        Self {
            arrival_ds: (arrival_s * 10.0).round() as i64,
            id: id.into(),
        }
    }
}

impl Eq for PriorityKey {}

impl PartialOrd for PriorityKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for PriorityKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.arrival_ds, &self.id).cmp(&(other.arrival_ds, &other.id))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intent {
    pub conflict_id: String,
    pub conflict_point: Vec2,
    /// Claimed occupancy interval of the conflict zone, absolute seconds.
    pub claimed: (f64, f64),
    pub action: IntentAction,
    pub priority: PriorityKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    /// Detections in the sender frame plus the sender pose (perturbed on send).
    PerceptionShare { detections: Vec<Detection>, sender_pose: Pose2 },
    Intent(Intent),
    /// Remaining route, current speed and half length, broadcast once per second.
    RouteAnnounce { route: Vec<Vec2>, speed: f64, half_length: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct V2XMessage {
    pub sender: String,
    pub tick_sent: u64,
    pub seq: u64,
    pub payload: Payload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseRedraw {
    #[default]
    PerMessage,
    PerEpisode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelConfig {
    pub latency_ticks: u64,
    pub pos_noise_sigma_m: f64,
    pub rot_noise_sigma_deg: f64,
    /// Noise seed; the episode seed when absent.
    pub seed: Option<u64>,
    pub noise_redraw: NoiseRedraw,
    /// Per-policy inference delay in ticks; the previous command is held meanwhile.
    pub compute_delay_ticks: BTreeMap<String, u64>,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            latency_ticks: 0,
            pos_noise_sigma_m: 0.0,
            rot_noise_sigma_deg: 0.0,
            seed: None,
            noise_redraw: NoiseRedraw::PerMessage,
            compute_delay_ticks: BTreeMap::new(),
        }
    }
}

impl ChannelConfig {
    pub fn is_valid(&self) -> bool {
        self.pos_noise_sigma_m >= 0.0
            && self.rot_noise_sigma_deg >= 0.0
            && self.pos_noise_sigma_m.is_finite()
            && self.rot_noise_sigma_deg.is_finite()
    }

    pub fn is_clean(&self) -> bool {
        self.latency_ticks == 0 && self.pos_noise_sigma_m == 0.0 && self.rot_noise_sigma_deg == 0.0
    }
}

/// Adds zero-mean Gaussian noise to position (per axis, meters) and yaw (degrees).
pub fn perturb_pose<R: rand::Rng>(cfg: &ChannelConfig, rng: &mut R, pose: Pose2) -> Pose2 {
    let pos = Normal::new(0.0, cfg.pos_noise_sigma_m).expect("validated sigma");
    let rot = Normal::new(0.0, cfg.rot_noise_sigma_deg.to_radians()).expect("validated sigma");
    let dx = pos.sample(rng);
    let dy = pos.sample(rng);
    let dyaw = rot.sample(rng);
    Pose2::new(pose.x + dx, pose.y + dy, wrap_angle(pose.yaw + dyaw))
}

/// Maps sender-frame detections into the receiver frame via the world frame.
pub fn transform_detections(detections: &[Detection], sender_pose: &Pose2, receiver_pose: &Pose2) -> Vec<Detection> {
    detections
        .iter()
        .map(|d| {
            let world = sender_pose.to_world(d.center);
            Detection {
                center: receiver_pose.to_local(world),
                yaw: wrap_angle(d.yaw + sender_pose.yaw - receiver_pose.yaw),
                ..d.clone()
            }
        })
        .collect()
}

type InboxKey = (u64, String, u64);

/// Per-receiver delivery queues ordered by (delivery tick, sender, sequence).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    cfg: ChannelConfig,
    seed: u64,
    receivers: BTreeSet<String>,
    #[serde(with = "inbox_serde")]
    inboxes: BTreeMap<String, BTreeMap<InboxKey, V2XMessage>>,
    next_seq: BTreeMap<String, u64>,
}

mod inbox_serde {
    use super::{InboxKey, V2XMessage};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    type Inboxes = BTreeMap<String, BTreeMap<InboxKey, V2XMessage>>;

    pub fn serialize<S: Serializer>(v: &Inboxes, s: S) -> Result<S::Ok, S::Error> {
        let flat: BTreeMap<&String, Vec<(&InboxKey, &V2XMessage)>> =
            v.iter().map(|(k, q)| (k, q.iter().collect())).collect();
        flat.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Inboxes, D::Error> {
        let flat: BTreeMap<String, Vec<(InboxKey, V2XMessage)>> = BTreeMap::deserialize(d)?;
        Ok(flat.into_iter().map(|(k, q)| (k, q.into_iter().collect())).collect())
    }
}

impl Channel {
    pub fn new(cfg: ChannelConfig, episode_seed: u64) -> Self {
        let seed = cfg.seed.unwrap_or(episode_seed);
        Self {
            cfg,
            seed,
            receivers: BTreeSet::new(),
            inboxes: BTreeMap::new(),
            next_seq: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.cfg
    }

    pub fn register(&mut self, id: impl Into<String>) {
        let id = id.into();
        self.inboxes.entry(id.clone()).or_default();
        self.receivers.insert(id);
    }

    pub fn unregister(&mut self, id: &str) {
        self.receivers.remove(id);
        self.inboxes.remove(id);
    }

    /// Enqueues for every registered receiver except the sender; returns the sequence number.
    /// Shared poses are perturbed here, once per message.
    pub fn send(&mut self, sender: &str, tick_sent: u64, payload: Payload) -> u64 {
        let seq_slot = self.next_seq.entry(sender.to_string()).or_insert(0);
        let seq = *seq_slot;
        *seq_slot += 1;
        let payload = match payload {
            Payload::PerceptionShare { detections, sender_pose } => {
                let seq_s = seq.to_string();
                let mut parts = vec!["v2x-noise", sender];
                if self.cfg.noise_redraw == NoiseRedraw::PerMessage {
                    parts.push(&seq_s);
                }
                let mut rng = substream(self.seed, &parts);
                Payload::PerceptionShare {
                    detections,
                    sender_pose: perturb_pose(&self.cfg, &mut rng, sender_pose),
                }
            }
            other => other,
        };
        let msg = V2XMessage {
            sender: sender.to_string(),
            tick_sent,
            seq,
            payload,
        };
        let due = tick_sent + self.cfg.latency_ticks;
        for r in &self.receivers {
            if r == sender {
                continue;
            }
            self.inboxes
                .get_mut(r)
                .expect("registered receiver")
                .insert((due, sender.to_string(), seq), msg.clone());
        }
        seq
    }

    /// Removes and returns the messages due at or before `now` for `receiver`.
    pub fn deliver_due(&mut self, now: u64, receiver: &str) -> Vec<V2XMessage> {
        let Some(q) = self.inboxes.get_mut(receiver) else {
            return Vec::new();
        };
        let rest = q.split_off(&(now + 1, String::new(), 0));
        let due = std::mem::replace(q, rest);
        due.into_values().collect()
    }

    pub fn pending(&self, receiver: &str) -> usize {
        self.inboxes.get(receiver).map_or(0, |q| q.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::DetectionClass;
    use proptest::prelude::*;

    fn det(x: f64, y: f64, yaw: f64) -> Detection {
        Detection {
            center: Vec2::new(x, y),
            length: 4.0,
            width: 2.0,
            yaw,
            class: DetectionClass::Vehicle,
            speed: 0.0,
            source: "s".into(),
            score: 1.0,
        }
    }

    #[test]
    fn zero_latency_same_tick() {
        let mut ch = Channel::new(ChannelConfig::default(), 1);
        ch.register("a");
        ch.register("b");
        ch.send("a", 3, Payload::RouteAnnounce { route: vec![], speed: 0.0, half_length: 2.3 });
        assert_eq!(ch.deliver_due(3, "b").len(), 1);
        assert!(ch.deliver_due(3, "a").is_empty());
    }

    #[test]
    fn six_tick_latency() {
        let cfg = ChannelConfig {
            latency_ticks: 6,
            ..Default::default()
        };
        let mut ch = Channel::new(cfg, 1);
        ch.register("a");
        ch.register("b");
        ch.send("a", 10, Payload::RouteAnnounce { route: vec![], speed: 0.0, half_length: 2.3 });
        assert!(ch.deliver_due(15, "b").is_empty());
        let got = ch.deliver_due(16, "b");
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].tick_sent, 10);
    }

    #[test]
    fn zero_sigma_is_identity() {
        let cfg = ChannelConfig::default();
        let mut rng = substream(0, &["x"]);
        let p = Pose2::new(1.5, -2.0, 0.7);
        assert_eq!(perturb_pose(&cfg, &mut rng, p), p);
    }

    #[test]
    fn identical_frames_leave_detections_unchanged() {
        let p = Pose2::new(3.0, 4.0, 0.5);
        let d = vec![det(1.0, 2.0, 0.3)];
        let out = transform_detections(&d, &p, &p);
        assert!((out[0].center.x - 1.0).abs() < 1e-12);
        assert!((out[0].center.y - 2.0).abs() < 1e-12);
        assert!((out[0].yaw - 0.3).abs() < 1e-12);
    }

    #[test]
    fn sender_rotated_quarter_turn() {
        let receiver = Pose2::new(0.0, 0.0, 0.0);
        let sender = Pose2::new(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        let out = transform_detections(&[det(1.0, 0.0, 0.0)], &sender, &receiver);
        // a point ahead of the sender lies on the receiver's left
        assert!(out[0].center.x.abs() < 1e-12);
        assert!((out[0].center.y - 1.0).abs() < 1e-12);
        // expressed the other way round, coordinates rotate by -90 degrees
        let back = transform_detections(&[det(1.0, 0.0, 0.0)], &receiver, &sender);
        assert!((back[0].center.y + 1.0).abs() < 1e-12);
    }

    fn homogeneous(p: &Pose2) -> [[f64; 3]; 3] {
        let (s, c) = p.yaw.sin_cos();
        [[c, -s, p.x], [s, c, p.y], [0.0, 0.0, 1.0]]
    }

    fn invert(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
        // rigid inverse: R^T, -R^T t
        let r = [[m[0][0], m[1][0]], [m[0][1], m[1][1]]];
        let t = [m[0][2], m[1][2]];
        [
            [r[0][0], r[0][1], -(r[0][0] * t[0] + r[0][1] * t[1])],
            [r[1][0], r[1][1], -(r[1][0] * t[0] + r[1][1] * t[1])],
            [0.0, 0.0, 1.0],
        ]
    }

    fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        out
    }

    proptest! {
        #[test]
        fn transform_matches_matrix_composition(
            sx in -100.0..100.0f64, sy in -100.0..100.0f64, syaw in -3.1..3.1f64,
            rx in -100.0..100.0f64, ry in -100.0..100.0f64, ryaw in -3.1..3.1f64,
            dx in -50.0..50.0f64, dy in -50.0..50.0f64,
        ) {
            let s = Pose2::new(sx, sy, syaw);
            let r = Pose2::new(rx, ry, ryaw);
            let out = transform_detections(&[det(dx, dy, 0.0)], &s, &r);
            let m = matmul(&invert(&homogeneous(&r)), &homogeneous(&s));
            let ex = m[0][0] * dx + m[0][1] * dy + m[0][2];
            let ey = m[1][0] * dx + m[1][1] * dy + m[1][2];
            prop_assert!((out[0].center.x - ex).abs() < 1e-9);
            prop_assert!((out[0].center.y - ey).abs() < 1e-9);
        }

        #[test]
        fn delivery_matches_scan(
            sends in proptest::collection::vec((0u64..40, 0usize..3), 0..60),
            latency in 0u64..8,
        ) {
            let ids = ["a", "b", "c"];
            let cfg = ChannelConfig { latency_ticks: latency, ..Default::default() };
            let mut ch = Channel::new(cfg, 9);
            for id in ids { ch.register(id); }
            let mut sends = sends;
            sends.sort();
            let mut log: Vec<(u64, String, u64, u64)> = vec![]; // (due, sender, seq, sent)
            let mut delivered: BTreeMap<&str, Vec<(u64, String, u64)>> = BTreeMap::new();
            let mut k = 0;
            for now in 0..60u64 {
                while k < sends.len() && sends[k].0 == now {
                    let sender = ids[sends[k].1];
                    let seq = ch.send(sender, now, Payload::RouteAnnounce { route: vec![], speed: 0.0, half_length: 1.0 });
                    log.push((now + latency, sender.to_string(), seq, now));
                    k += 1;
                }
                for r in ids {
                    let got: Vec<(u64, String, u64)> = ch.deliver_due(now, r).into_iter().map(|m| (m.tick_sent + latency, m.sender, m.seq)).collect();
                    let expected: Vec<(u64, String, u64)> = {
                        let mut e: Vec<(u64, String, u64)> = log.iter()
                            .filter(|(due, s, _, _)| *due <= now && s != r)
                            .filter(|(due, s, seq, _)| !delivered.get(r).is_some_and(|d| d.contains(&(*due, s.clone(), *seq))))
                            .map(|(due, s, seq, _)| (*due, s.clone(), *seq)).collect();
                        e.sort();
                        e
                    };
                    prop_assert_eq!(&got, &expected);
                    delivered.entry(r).or_default().extend(got);
                }
            }
        }
    }

    #[test]
    fn state_serialization_roundtrips() {
        let cfg = ChannelConfig {
            latency_ticks: 2,
            pos_noise_sigma_m: 0.6,
            rot_noise_sigma_deg: 0.6,
            ..Default::default()
        };
        let mut ch = Channel::new(cfg, 4);
        ch.register("a");
        ch.register("b");
        ch.send("a", 0, Payload::PerceptionShare { detections: vec![det(1.0, 1.0, 0.1)], sender_pose: Pose2::new(1.0, 2.0, 0.3) });
        ch.send("b", 1, Payload::RouteAnnounce { route: vec![Vec2::new(0.0, 0.0)], speed: 1.0, half_length: 2.3 });
        let text = serde_json::to_string(&ch).unwrap();
        let back: Channel = serde_json::from_str(&text).unwrap();
        assert_eq!(back, ch);
    }
}
