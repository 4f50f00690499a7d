use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dynamics::{footprint, frame_vectors, step_dynamics, DynamicsConfig, VehicleState};
use super::expert::{expert_control, ExpertConfig};
use super::render::{augment, render_scene, AgentBox, Frame, RenderConfig, WeatherPreset};
use super::route::Route;
use super::town::TownMap;
use crate::error::{Error, Result};
use crate::policy::HighLevelCommand;

/// Everything the controller may look at on one step.
pub struct Observation<'a> {
    pub step: usize,
    pub frame: Option<&'a Frame>,
    pub command: HighLevelCommand,
    pub state: &'a VehicleState,
    pub route: &'a Route,
    pub route_index: usize,
    pub agents: &'a [AgentBox],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Control {
    pub steer: f64,
    pub throttle: f64,
    /// Expert steer for this observation when it differs from the executed one.
    pub label: Option<f64>,
    pub attention: Option<Vec<f64>>,
}

impl Control {
    pub fn new(steer: f64, throttle: f64) -> Self {
        Control { steer, throttle, label: None, attention: None }
    }
}

pub trait Controller {
    /// Whether observations must carry a rendered frame.
    fn needs_frame(&self) -> bool {
        true
    }
    fn control(&mut self, obs: &Observation) -> Result<Control>;
}

/// Scripted vehicle following a route at constant speed, stopping while the
/// ego vehicle is in front of it.
#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    pub route: Route,
    pub s: f64,
    pub speed: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl Agent {
    fn pose(&self) -> (f64, f64, f64) {
        let pts = &self.route.points;
        let i = pts.partition_point(|p| p.s < self.s).min(pts.len() - 1);
        let p = pts[i];
        (p.x, p.y, p.heading)
    }

    pub fn shape(&self) -> AgentBox {
        let (x, y, heading) = self.pose();
        AgentBox { x, y, heading, half_length: self.half_length, half_width: self.half_width }
    }

    fn finished(&self) -> bool {
        self.s >= self.route.length()
    }
}

/// True when `(x, y)` lies in a corridor `reach` meters ahead of a pose.
pub fn in_front(pose: (f64, f64, f64), x: f64, y: f64, reach: f64, half_width: f64) -> bool {
    let (f, r) = frame_vectors(pose.2);
    let (dx, dy) = (x - pose.0, y - pose.1);
    let along = dx * f.0 + dy * f.1;
    let side = dx * r.0 + dy * r.1;
    along > 0.0 && along <= reach && side.abs() <= half_width
}

/// Oncoming traffic: agents driving the reversed route in the other lane.
pub fn spawn_oncoming(town: &TownMap, route: &Route, count: usize, seed: u64) -> Result<Vec<Agent>> {
    let mut nodes = route.nodes.clone();
    nodes.reverse();
    let back = Route::from_nodes(town, &nodes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = back.length();
    let cruise = DynamicsConfig::default().cruise_speed;
    Ok((0..count)
        .map(|i| {
            let base = len * (i as f64 + 0.5) / count as f64;
            Agent {
                route: back.clone(),
                s: (base + rng.random_range(-3.0..3.0)).clamp(0.0, len),
                speed: cruise * rng.random_range(0.6..0.9),
                half_length: 2.0,
                half_width: 0.9,
            }
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub route: Route,
    pub weather: WeatherPreset,
    pub agents: Vec<Agent>,
    /// Seeds per-frame photometric noise.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeLimits {
    pub max_steps: usize,
    pub goal_radius: f64,
    /// Leaving the route by more than this ends the episode.
    pub max_route_distance: f64,
    pub record_attention: bool,
}

impl EpisodeLimits {
    pub fn with_budget(max_steps: usize) -> Self {
        EpisodeLimits { max_steps, goal_radius: 2.0, max_route_distance: 5.0, record_attention: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    pub completion: f64,
    pub offroad_count: u32,
    pub collision_count: u32,
    pub steps: usize,
    pub attention_log: Option<Vec<Vec<f64>>>,
    pub failure: Option<String>,
    pub clamp_count: u32,
}

/// What an observer sees after each control decision.
pub struct StepRecord<'a> {
    pub step: usize,
    pub frame: Option<&'a Frame>,
    pub command: HighLevelCommand,
    pub state: &'a VehicleState,
    pub control: &'a Control,
}

fn project_box(corners: &[(f64, f64); 4], axis: (f64, f64)) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for c in corners {
        let p = c.0 * axis.0 + c.1 * axis.1;
        lo = lo.min(p);
        hi = hi.max(p);
    }
    (lo, hi)
}

fn box_corners(b: &AgentBox) -> [(f64, f64); 4] {
    let (f, r) = frame_vectors(b.heading);
    let p = |a: f64, s: f64| (b.x + f.0 * a + r.0 * s, b.y + f.1 * a + r.1 * s);
    [p(b.half_length, -b.half_width), p(b.half_length, b.half_width), p(-b.half_length, b.half_width), p(-b.half_length, -b.half_width)]
}

/// Separating-axis overlap test for two rectangles.
pub fn boxes_overlap(a: &[(f64, f64); 4], b: &[(f64, f64); 4]) -> bool {
    for poly in [a, b] {
        for i in 0..2 {
            let (p, q) = (poly[i], poly[i + 1]);
            let axis = (q.1 - p.1, p.0 - q.0);
            let (a0, a1) = project_box(a, axis);
            let (b0, b1) = project_box(b, axis);
            if a1 < b0 || b1 < a0 {
                return false;
            }
        }
    }
    true
}

pub struct Simulator<'t> {
    pub town: &'t TownMap,
    pub dynamics: DynamicsConfig,
    pub render: RenderConfig,
}

impl<'t> Simulator<'t> {
    pub fn new(town: &'t TownMap, render: RenderConfig) -> Self {
        Simulator { town, dynamics: DynamicsConfig::default(), render }
    }

    pub fn run_episode(&self, controller: &mut dyn Controller, scenario: &Scenario, limits: &EpisodeLimits) -> EpisodeResult {
        self.run_observed(controller, scenario, limits, &mut |_| Ok(()))
    }

    /// Closed-loop rollout; `observer` sees every executed step and may abort
    /// the episode by returning an error.
    pub fn run_observed(
        &self,
        controller: &mut dyn Controller,
        scenario: &Scenario,
        limits: &EpisodeLimits,
        observer: &mut dyn FnMut(&StepRecord) -> Result<()>,
    ) -> EpisodeResult {
        let route = &scenario.route;
        let goal = route.goal();
        let length = route.length();
        let mut state = route.start_state(self.dynamics.cruise_speed);
        let mut agents = scenario.agents.clone();
        let mut hint = 0;
        let mut progress: f64 = 0.0;
        let mut res = EpisodeResult {
            success: false,
            completion: 0.0,
            offroad_count: 0,
            collision_count: 0,
            steps: 0,
            attention_log: limits.record_attention.then(Vec::new),
            failure: None,
            clamp_count: 0,
        };
        loop {
            let proj = route.project(state.x, state.y, hint);
            hint = proj.index;
            progress = progress.max(route.points[hint].s);
            res.completion = if length > 0.0 { (progress / length).min(1.0) } else { 0.0 };
            if ((state.x - goal.0).powi(2) + (state.y - goal.1).powi(2)).sqrt() <= limits.goal_radius {
                res.success = true;
                res.completion = 1.0;
                break;
            }
            let body = footprint(&self.dynamics, &state);
            if body.iter().any(|&(x, y)| !self.town.drivable(x, y)) {
                res.offroad_count += 1;
                res.failure = Some(format!("off-road at step {}", res.steps));
                break;
            }
            let shapes: Vec<AgentBox> = agents.iter().map(Agent::shape).collect();
            if shapes.iter().any(|s| boxes_overlap(&body, &box_corners(s))) {
                res.collision_count += 1;
                res.failure = Some(format!("collision at step {}", res.steps));
                break;
            }
            if proj.distance > limits.max_route_distance {
                res.failure = Some(format!("left the route at step {}", res.steps));
                break;
            }
            if res.steps >= limits.max_steps {
                res.failure = Some(format!("budget of {} steps exhausted", limits.max_steps));
                break;
            }
            let command = route.points[hint].command;
            let frame = controller.needs_frame().then(|| {
                let mut values = render_scene(self.town, &state, &shapes, &self.render);
                augment(&mut values, &scenario.weather, scenario.seed, res.steps as u64);
                Frame::from_unit(self.render.width, self.render.height, &values)
            });
            let obs = Observation {
                step: res.steps,
                frame: frame.as_ref(),
                command,
                state: &state,
                route,
                route_index: hint,
                agents: &shapes,
            };
            let control = match controller.control(&obs) {
                Ok(c) => c,
                Err(e) => {
                    res.failure = Some(format!("controller error: {e}"));
                    break;
                }
            };
            if let Err(e) = observer(&StepRecord { step: res.steps, frame: frame.as_ref(), command, state: &state, control: &control }) {
                res.failure = Some(format!("observer error: {e}"));
                break;
            }
            if let (Some(log), Some(a)) = (res.attention_log.as_mut(), control.attention.as_ref()) {
                log.push(a.clone());
            }
            let stepped = step_dynamics(&self.dynamics, state, control.steer, control.throttle, self.dynamics.dt);
            res.clamp_count += stepped.clamped as u32;
            state = stepped.state;
            let ego = (state.x, state.y, state.heading);
            for a in &mut agents {
                let (x, y, h) = a.pose();
                if !in_front((x, y, h), ego.0, ego.1, 9.0, 2.5) {
                    a.s += a.speed * self.dynamics.dt;
                }
            }
            agents.retain(|a| !a.finished());
            res.steps += 1;
        }
        res
    }

    /// Steps the expert needs on this scenario without any frames.
    pub fn expert_steps(&self, scenario: &Scenario) -> Result<usize> {
        let mut expert = ExpertController::new(self.dynamics.clone());
        let limits = EpisodeLimits::with_budget(100_000);
        let r = self.run_episode(&mut expert, scenario, &limits);
        if !r.success {
            return Err(Error::Planning(format!("expert failed on {}: {}", scenario.route.id, r.failure.unwrap_or_default())));
        }
        Ok(r.steps)
    }
}

/// Throttle used while yielding to a vehicle ahead.
pub const CRAWL: f64 = 0.15;

/// Full throttle, or [`CRAWL`] while a vehicle is right ahead.
pub fn yield_throttle(obs: &Observation) -> f64 {
    let s = obs.state;
    let blocked = obs.agents.iter().any(|a| in_front((s.x, s.y, s.heading), a.x, a.y, 7.0, 2.0));
    if blocked {
        CRAWL
    } else {
        1.0
    }
}

/// Pure-pursuit driver that slows to a crawl for vehicles right ahead.
pub struct ExpertController {
    pub config: ExpertConfig,
    pub dynamics: DynamicsConfig,
    pub render_frames: bool,
}

impl ExpertController {
    pub fn new(dynamics: DynamicsConfig) -> Self {
        ExpertController { config: ExpertConfig::default(), dynamics, render_frames: false }
    }

    fn decide(&self, obs: &Observation) -> Result<Control> {
        let e = expert_control(&self.config, &self.dynamics, obs.state, obs.route, obs.route_index);
        if e.failed {
            return Err(Error::Planning(format!("expert is {:.2} m off the route", e.projection.distance)));
        }
        Ok(Control::new(e.steer, yield_throttle(obs)))
    }
}

impl Controller for ExpertController {
    fn needs_frame(&self) -> bool {
        self.render_frames
    }

    fn control(&mut self, obs: &Observation) -> Result<Control> {
        self.decide(obs)
    }
}

/// Expert whose executed steering is perturbed by seeded triangular pulses;
/// the clean expert steer is reported as the label.
pub struct NoisyExpert {
    expert: ExpertController,
    rng: ChaCha8Rng,
    /// Probability of starting a pulse on a quiet step.
    pub rate: f64,
    pub amplitude: f64,
    pulse: Option<(usize, usize, f64)>,
}

impl NoisyExpert {
    pub fn new(dynamics: DynamicsConfig, seed: u64) -> Self {
        let mut expert = ExpertController::new(dynamics);
        expert.render_frames = true;
        NoisyExpert { expert, rng: ChaCha8Rng::seed_from_u64(seed), rate: 0.02, amplitude: 0.35, pulse: None }
    }
}

impl Controller for NoisyExpert {
    fn control(&mut self, obs: &Observation) -> Result<Control> {
        let clean = self.expert.decide(obs)?;
        if self.pulse.is_none() && self.rng.random::<f64>() < self.rate {
            let len = self.rng.random_range(10..30);
            let amp = self.amplitude * self.rng.random_range(0.4..1.0) * if self.rng.random::<bool>() { 1.0 } else { -1.0 };
            self.pulse = Some((obs.step, len, amp));
        }
        let mut noise = 0.0;
        if let Some((start, len, amp)) = self.pulse {
            let t = (obs.step - start) as f64 / len as f64;
            noise = amp * (1.0 - (2.0 * t - 1.0).abs());
            if obs.step + 1 >= start + len {
                self.pulse = None;
            }
        }
        Ok(Control { steer: (clean.steer + noise).clamp(-1.0, 1.0), throttle: clean.throttle, label: Some(clean.steer), attention: None })
    }
}
