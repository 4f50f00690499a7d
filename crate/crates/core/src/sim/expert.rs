use super::dynamics::{wrap_angle, DynamicsConfig, VehicleState};
use super::route::{Projection, Route};

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertConfig {
    pub lookahead: f64,
    /// Beyond this distance from the route the expert gives up.
    pub recovery_distance: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig { lookahead: 4.0, recovery_distance: 3.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpertSteer {
    pub steer: f64,
    pub projection: Projection,
    pub failed: bool,
}

/// Pure pursuit toward the route point `lookahead` meters ahead of the
/// closest point, normalized by the steering limit.
pub fn expert_control(
    cfg: &ExpertConfig,
    dynamics: &DynamicsConfig,
    state: &VehicleState,
    route: &Route,
    hint: usize,
) -> ExpertSteer {
    let projection = route.project(state.x, state.y, hint);
    let target = route.points[route.index_ahead(projection.index, cfg.lookahead)];
    let (dx, dy) = (target.x - state.x, target.y - state.y);
    let dist = (dx * dx + dy * dy).sqrt();
    let steer = if dist < 1e-9 {
        0.0
    } else {
        let alpha = wrap_angle(dy.atan2(dx) - state.heading);
        let delta = (2.0 * dynamics.wheelbase * alpha.sin() / dist.max(cfg.lookahead)).atan();
        (delta / dynamics.max_steer).clamp(-1.0, 1.0)
    };
    ExpertSteer { steer, projection, failed: projection.distance > cfg.recovery_distance }
}
