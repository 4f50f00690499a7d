use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// Rear-axle position, meters.
    pub x: f64,
    pub y: f64,
    /// Radians in (−π, π].
    pub heading: f64,
    /// m/s, never negative.
    pub speed: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsConfig {
    pub wheelbase: f64,
    pub max_steer: f64,
    /// Speed reached at throttle 1 (10 km/h).
    pub cruise_speed: f64,
    /// Time constant of the speed response.
    pub speed_tau: f64,
    pub dt: f64,
    pub length: f64,
    pub half_width: f64,
    /// Distance from the rear axle to the body center.
    pub center_offset: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            wheelbase: 2.5,
            max_steer: 35f64.to_radians(),
            cruise_speed: 10.0 / 3.6,
            speed_tau: 0.5,
            dt: 0.05,
            length: 4.0,
            half_width: 0.9,
            center_offset: 1.25,
        }
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut a = (a + PI).rem_euclid(2.0 * PI) - PI;
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// Result of one integration step; `clamped` reports out-of-range inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stepped {
    pub state: VehicleState,
    pub clamped: bool,
}

/// Kinematic bicycle step with midpoint heading integration: the vehicle
/// moves along the chord of the arc it turns through.
pub fn step_dynamics(cfg: &DynamicsConfig, s: VehicleState, steer: f64, throttle: f64, dt: f64) -> Stepped {
    let mut clamped = false;
    let mut clamp = |v: f64, lo: f64, hi: f64| {
        if v.is_nan() {
            clamped = true;
            return 0.0;
        }
        if v < lo || v > hi {
            clamped = true;
        }
        v.clamp(lo, hi)
    };
    let steer = clamp(steer, -1.0, 1.0);
    let throttle = clamp(throttle, 0.0, 1.0);
    let dt = clamp(dt, 1e-6, 0.2);
    let target = throttle * cfg.cruise_speed;
    let speed = (s.speed + (target - s.speed) * (dt / cfg.speed_tau).min(1.0)).max(0.0);
    let v = 0.5 * (s.speed + speed);
    let omega = v / cfg.wheelbase * (steer * cfg.max_steer).tan();
    let dtheta = omega * dt;
    let mid = s.heading + 0.5 * dtheta;
    let state = VehicleState {
        x: s.x + v * dt * mid.cos(),
        y: s.y + v * dt * mid.sin(),
        heading: wrap_angle(s.heading + dtheta),
        speed,
    };
    Stepped { state, clamped }
}

/// Unit forward and right vectors; components below 1e-12 are snapped to
/// zero so axis-aligned headings are exact.
pub fn frame_vectors(heading: f64) -> ((f64, f64), (f64, f64)) {
    let snap = |v: f64| if v.abs() < 1e-12 { 0.0 } else { v };
    let (s, c) = heading.sin_cos();
    let f = (snap(c), snap(s));
    (f, (f.1, -f.0))
}

/// Body corners (front-left, front-right, rear-right, rear-left).
pub fn footprint(cfg: &DynamicsConfig, s: &VehicleState) -> [(f64, f64); 4] {
    let (f, r) = frame_vectors(s.heading);
    let cx = s.x + f.0 * cfg.center_offset;
    let cy = s.y + f.1 * cfg.center_offset;
    let (hl, hw) = (cfg.length / 2.0, cfg.half_width);
    let p = |a: f64, b: f64| (cx + f.0 * a + r.0 * b, cy + f.1 * a + r.1 * b);
    [p(hl, -hw), p(hl, hw), p(-hl, hw), p(-hl, -hw)]
}
