//! Closed-loop scores, open-loop scores and their aggregation.

mod openloop;
mod report;

pub use openloop::{
    ade, ap_at_iou, collision_rate, iou_bev, sample_violates, CollisionRateMode, OpenLoopMetrics, OpenLoopSample, CR_LATERAL_M,
    CR_TTC_S,
};
pub use report::{
    correlation_report, harmonic_mean_ds_sr, pearson, spearman, BenchmarkReport, CategoryStats, CorrelationReport,
    CorrelationRow, GroupStats, PolicyPoint,
};

use crate::geometry::{cumulative_lengths, project_on_polyline, Vec2};
use crate::scenario::{Bucket, Category};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("trajectory length mismatch: {plan} plan points vs {gt} ground-truth points")]
    LengthMismatch { plan: usize, gt: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfractionKind {
    CollisionPedestrian,
    CollisionVehicle,
    CollisionStatic,
    RedLight,
    OffRouteTimeout,
}

impl InfractionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::CollisionPedestrian => "collision_pedestrian",
            Self::CollisionVehicle => "collision_vehicle",
            Self::CollisionStatic => "collision_static",
            Self::RedLight => "red_light",
            Self::OffRouteTimeout => "off_route_timeout",
        }
    }

    pub fn is_collision(&self) -> bool {
        matches!(self, Self::CollisionPedestrian | Self::CollisionVehicle | Self::CollisionStatic)
    }
}

/// Multiplicative penalty per infraction kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PenaltyTable {
    pub collision_pedestrian: f64,
    pub collision_vehicle: f64,
    pub collision_static: f64,
    pub red_light: f64,
    pub off_route_timeout: f64,
}

impl Default for PenaltyTable {
    fn default() -> Self {
        Self {
            collision_pedestrian: 0.50,
            collision_vehicle: 0.60,
            collision_static: 0.65,
            red_light: 0.70,
            off_route_timeout: 0.70,
        }
    }
}

impl PenaltyTable {
    pub fn coefficient(&self, kind: InfractionKind) -> f64 {
        match kind {
            InfractionKind::CollisionPedestrian => self.collision_pedestrian,
            InfractionKind::CollisionVehicle => self.collision_vehicle,
            InfractionKind::CollisionStatic => self.collision_static,
            InfractionKind::RedLight => self.red_light,
            InfractionKind::OffRouteTimeout => self.off_route_timeout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfractionEvent {
    pub kind: InfractionKind,
    pub tick: u64,
    pub coefficient: f64,
    /// The other party, when there is one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub other: Option<String>,
}

impl InfractionEvent {
    pub fn new(kind: InfractionKind, tick: u64, table: &PenaltyTable, other: Option<String>) -> Self {
        Self {
            kind,
            tick,
            coefficient: table.coefficient(kind),
            other,
        }
    }
}

/// Product of the event coefficients; 1 for no events.
pub fn infraction_penalty(events: &[InfractionEvent]) -> f64 {
    events.iter().map(|e| e.coefficient).product()
}

pub fn driving_score(rc_pct: f64, ip: f64) -> f64 {
    rc_pct * ip
}

/// Route completion needed for a success, percent.
pub const SUCCESS_RC_PCT: f64 = 99.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub scenario_id: String,
    pub bucket: Bucket,
    pub category: Category,
    pub cav_id: String,
    pub policy: String,
    pub seed: u64,
    pub rc_pct: f64,
    pub ip: f64,
    pub ds: f64,
    pub success: bool,
    pub infractions: Vec<InfractionEvent>,
    pub duration_ticks: u64,
    /// Tick at which the route was completed.
    pub completion_tick: Option<u64>,
    /// The policy failed and the vehicle was frozen.
    pub failed: bool,
}

impl EpisodeResult {
    /// Fills in IP, DS and the success flag from RC and the infraction list.
    pub fn finalize(mut self) -> Self {
        self.ip = infraction_penalty(&self.infractions);
        self.ds = driving_score(self.rc_pct, self.ip);
        self.success = success(&self);
        self
    }
}

pub fn success(r: &EpisodeResult) -> bool {
    r.rc_pct >= SUCCESS_RC_PCT && r.infractions.is_empty() && !r.failed
}

/// Monotone progress of a vehicle along its route.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteProgress {
    pts: Vec<Vec2>,
    cum: Vec<f64>,
    best: f64,
    /// Lateral deviation beyond which progress is not credited, m.
    pub off_route_bound: f64,
    last_offset: f64,
}

impl RouteProgress {
    pub fn new(route: &[Vec2], off_route_bound: f64) -> Self {
        Self {
            cum: cumulative_lengths(route),
            pts: route.to_vec(),
            best: 0.0,
            off_route_bound,
            last_offset: 0.0,
        }
    }

    pub fn total(&self) -> f64 {
        *self.cum.last().unwrap_or(&0.0)
    }

    /// Credits `p` and returns the best station so far.
    pub fn update(&mut self, p: Vec2) -> f64 {
        if let Some(pr) = project_on_polyline(p, &self.pts, &self.cum) {
            self.last_offset = pr.distance;
            if pr.distance <= self.off_route_bound && pr.station > self.best {
                self.best = pr.station;
            }
        }
        self.best
    }

    pub fn station(&self) -> f64 {
        self.best
    }

    /// Deviation from the route at the last update, m.
    pub fn deviation(&self) -> f64 {
        self.last_offset
    }

    pub fn is_off_route(&self) -> bool {
        self.last_offset > self.off_route_bound
    }

    pub fn completion_pct(&self) -> f64 {
        let total = self.total();
        if total <= 0.0 {
            return 0.0;
        }
        (100.0 * self.best / total).clamp(0.0, 100.0)
    }

    pub fn is_complete(&self) -> bool {
        self.best >= self.total() - 1e-9
    }

    /// Route polyline from the current progress point to the end.
    pub fn remaining(&self) -> Vec<Vec2> {
        crate::geometry::slice_polyline(&self.pts, &self.cum, self.best, self.total())
    }

    pub fn route(&self) -> &[Vec2] {
        &self.pts
    }
}

/// Route completion in percent for a position trace.
pub fn route_completion(trace: &[Vec2], route: &[Vec2], off_route_bound: f64) -> f64 {
    let mut rp = RouteProgress::new(route, off_route_bound);
    for p in trace {
        rp.update(*p);
    }
    rp.completion_pct()
}
