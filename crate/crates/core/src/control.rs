//! PID tracking stack: longitudinal and lateral PID, adaptive target speed and
//! throttle/brake arbitration.

use crate::geometry::{wrap_angle, Vec2};
use crate::sim::{ControlCommand, VehicleState};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

impl PidGains {
    pub const fn new(kp: f64, ki: f64, kd: f64) -> Self {
        Self { kp, ki, kd }
    }

    pub fn is_valid(&self) -> bool {
        self.kp.is_finite() && self.ki.is_finite() && self.kd.is_finite() && self.kp >= 0.0
    }
}

pub const DEFAULT_WINDUP: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidState {
    pub integral: f64,
    pub prev_error: Option<f64>,
    pub windup: f64,
}

impl Default for PidState {
    fn default() -> Self {
        Self::new(DEFAULT_WINDUP)
    }
}

impl PidState {
    pub fn new(windup: f64) -> Self {
        Self {
            integral: 0.0,
            prev_error: None,
            windup,
        }
    }
}

/// `kp·e + ki·∫e + kd·de/dt`; the integral is clamped to the windup bound and the
/// derivative term is zero on the first call.
pub fn pid_step(g: &PidGains, s: &PidState, error: f64, dt: f64) -> (f64, PidState) {
    debug_assert!(dt > 0.0);
    let integral = (s.integral + error * dt).clamp(-s.windup, s.windup);
    let derivative = s.prev_error.map_or(0.0, |p| (error - p) / dt);
    let out = g.kp * error + g.ki * integral + g.kd * derivative;
    (
        out,
        PidState {
            integral,
            prev_error: Some(error),
            windup: s.windup,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BrakeMode {
    /// Brake is 1 when speed exceeds target by `margin`, else 0.
    Binary { margin: f64 },
    Continuous { max: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TargetSpeedMode {
    Fixed { speed: f64 },
    Adaptive { cap: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerProfile {
    pub name: String,
    pub longitudinal: PidGains,
    pub lateral: PidGains,
    pub throttle_max: f64,
    pub brake_mode: BrakeMode,
    pub steer_clip: f64,
    pub target_speed: TargetSpeedMode,
    pub windup: f64,
    /// Below this target the binary brake holds the vehicle at rest, m/s.
    pub stop_hold_speed: f64,
    pub lookahead_min: f64,
    pub lookahead_time: f64,
    pub adaptive_pairs: usize,
}

impl ControllerProfile {
    fn base(name: &str, lateral: PidGains, brake_mode: BrakeMode, steer_clip: f64, target_speed: TargetSpeedMode) -> Self {
        Self {
            name: name.into(),
            longitudinal: PidGains::new(5.0, 1.0, 0.1),
            lateral,
            throttle_max: ControlCommand::THROTTLE_MAX,
            brake_mode,
            steer_clip,
            target_speed,
            windup: DEFAULT_WINDUP,
            stop_hold_speed: 0.4,
            lookahead_min: 4.0,
            lookahead_time: 0.5,
            adaptive_pairs: 4,
        }
    }

    /// Cooperative-driving controller with adaptive speed capped at 8 m/s.
    pub fn v2x() -> Self {
        Self::base(
            "v2x_controller",
            PidGains::new(1.0, 0.2, 0.1),
            BrakeMode::Binary { margin: 0.5 },
            1.0,
            TargetSpeedMode::Adaptive { cap: 8.0 },
        )
    }

    /// Same controller with the 5 m/s cap.
    pub fn v2x_cap5() -> Self {
        Self {
            name: "v2x_controller_cap5".into(),
            target_speed: TargetSpeedMode::Adaptive { cap: 5.0 },
            ..Self::v2x()
        }
    }

    /// Fixed-speed rule-based tracker, 21.6 km/h.
    pub fn vehicle_pid() -> Self {
        Self::base(
            "vehicle_pid",
            PidGains::new(0.5, 0.05, 0.2),
            BrakeMode::Continuous { max: 0.5 },
            0.8,
            TargetSpeedMode::Fixed { speed: 21.6 / 3.6 },
        )
    }

    /// Human-takeover variant of the fixed-speed tracker, 28.8 km/h.
    pub fn vehicle_pid_hitl() -> Self {
        Self {
            name: "vehicle_pid_hitl".into(),
            target_speed: TargetSpeedMode::Fixed { speed: 28.8 / 3.6 },
            ..Self::vehicle_pid()
        }
    }

    pub fn named(name: &str) -> Option<Self> {
        [Self::v2x(), Self::v2x_cap5(), Self::vehicle_pid(), Self::vehicle_pid_hitl()]
            .into_iter()
            .find(|p| p.name == name)
    }

    pub fn speed_cap(&self) -> f64 {
        match self.target_speed {
            TargetSpeedMode::Fixed { speed } => speed,
            TargetSpeedMode::Adaptive { cap } => cap,
        }
    }
}

/// Timestamped plan waypoints, world frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanPoint {
    pub t: f64,
    pub p: Vec2,
}

/// Mean spacing over the first `pairs` waypoint pairs divided by their time step, clamped to `[0, cap]`.
pub fn adaptive_target_speed(plan: &[PlanPoint], cap: f64, pairs: usize) -> f64 {
    if plan.len() < 2 {
        return 0.0;
    }
    let k = pairs.max(1).min(plan.len() - 1);
    let mut total = 0.0;
    let mut n = 0usize;
    for w in plan.windows(2).take(k) {
        let dt = w[1].t - w[0].t;
        if dt > 0.0 {
            total += w[0].p.dist(w[1].p) / dt;
            n += 1;
        }
    }
    if n == 0 {
        return 0.0;
    }
    (total / n as f64).clamp(0.0, cap)
}

/// Point on the plan polyline at arc length `dist` from its start (clamped to the end).
fn point_along(plan: &[PlanPoint], dist: f64) -> Vec2 {
    let mut remaining = dist;
    for w in plan.windows(2) {
        let seg = w[0].p.dist(w[1].p);
        if seg >= remaining && seg > 0.0 {
            return w[0].p.lerp(w[1].p, remaining / seg);
        }
        remaining -= seg;
    }
    plan.last().map_or(Vec2::ZERO, |p| p.p)
}

/// Per-vehicle controller state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingState {
    pub longitudinal: PidState,
    pub lateral: PidState,
}

impl TrackingState {
    pub fn new(profile: &ControllerProfile) -> Self {
        Self {
            longitudinal: PidState::new(profile.windup),
            lateral: PidState::new(profile.windup),
        }
    }
}

/// Steering toward a lookahead point on the plan, from a PID on heading error.
pub fn lateral_control(profile: &ControllerProfile, state: &mut PidState, ego: &VehicleState, plan: &[PlanPoint], dt: f64) -> f64 {
    let lookahead = profile.lookahead_min.max(profile.lookahead_time * ego.v);
    let ego_p = ego.position();
    let target = point_along(plan, lookahead);
    let to_target = target - ego_p;
    if to_target.norm() < 0.5 {
        let (_, next) = pid_step(&profile.lateral, state, 0.0, dt);
        *state = next;
        return 0.0;
    }
    let err = wrap_angle(to_target.angle() - ego.yaw);
    let (out, next) = pid_step(&profile.lateral, state, err, dt);
    *state = next;
    out.clamp(-profile.steer_clip, profile.steer_clip)
}

/// Throttle and brake from a PID on the speed error; the two are never both positive.
pub fn longitudinal_control(profile: &ControllerProfile, state: &mut PidState, v: f64, v_target: f64, dt: f64) -> (f64, f64) {
    let err = v_target - v;
    let (out, next) = pid_step(&profile.longitudinal, state, err, dt);
    match profile.brake_mode {
        BrakeMode::Binary { margin } => {
            if v > v_target + margin || v_target < profile.stop_hold_speed {
                // integration is suspended while braking
                *state = PidState {
                    prev_error: Some(err),
                    ..*state
                };
                (0.0, 1.0)
            } else {
                let throttle = out.clamp(0.0, profile.throttle_max);
                if out > profile.throttle_max && err > 0.0 {
                    // conditional integration: no accumulation while saturated
                    *state = PidState {
                        prev_error: Some(err),
                        ..*state
                    };
                } else {
                    *state = next;
                }
                (throttle, 0.0)
            }
        }
        BrakeMode::Continuous { max } => {
            if out >= 0.0 {
                if out > profile.throttle_max && err > 0.0 {
                    *state = PidState {
                        prev_error: Some(err),
                        ..*state
                    };
                } else {
                    *state = next;
                }
                (out.min(profile.throttle_max), 0.0)
            } else {
                *state = next;
                (0.0, (-out).min(max))
            }
        }
    }
}

/// Full tracking step from a plan to an arbitrated command.
pub fn track_plan(profile: &ControllerProfile, st: &mut TrackingState, ego: &VehicleState, plan: &[PlanPoint], route_cap: f64, dt: f64) -> ControlCommand {
    let target = match profile.target_speed {
        TargetSpeedMode::Adaptive { cap } => adaptive_target_speed(plan, cap.min(route_cap), profile.adaptive_pairs),
        TargetSpeedMode::Fixed { speed } => {
            // the fixed tracker still stops when the plan does
            let planned = adaptive_target_speed(plan, speed.min(route_cap), profile.adaptive_pairs);
            if planned < profile.stop_hold_speed {
                0.0
            } else {
                speed.min(route_cap)
            }
        }
    };
    let steer = if plan.len() >= 2 {
        lateral_control(profile, &mut st.lateral, ego, plan, dt)
    } else {
        0.0
    };
    let (throttle, brake) = longitudinal_control(profile, &mut st.longitudinal, ego.v, target, dt);
    ControlCommand { throttle, brake, steer }.clamped(profile.steer_clip)
}
