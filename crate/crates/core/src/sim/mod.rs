//! Deterministic top-down town simulator: procedural grid towns, kinematic
//! bicycle dynamics, a pure-pursuit expert, a forward-facing pseudo-perspective
//! renderer with photometric weather presets, and a closed-loop episode runner.

pub mod dynamics;
pub mod episode;
pub mod expert;
pub mod render;
pub mod route;
pub mod town;

pub use dynamics::{step_dynamics, wrap_angle, DynamicsConfig, Stepped, VehicleState};
pub use episode::{
    spawn_oncoming, Agent, Control, Controller, EpisodeLimits, EpisodeResult, ExpertController, NoisyExpert,
    Observation, Scenario, Simulator, StepRecord,
};
pub use expert::{expert_control, ExpertConfig, ExpertSteer};
pub use render::{augment, preset, render, render_scene, weather_presets, AgentBox, Frame, RenderConfig, WeatherPreset};
pub use route::{classify_turn, plan_route, Projection, Route, RoutePoint};
pub use town::{build_town, build_town_with, Surface, TownConfig, TownMap};
