//! Closed-loop benchmark, attention overlays and variant comparison.

pub mod compare;
pub mod overlay;

pub use compare::{ablated_config, ablation_box_removal, compare_variants, AblationResult, Comparison, Verdict};
pub use overlay::{
    command_color, decoded_region_shade, overlay_frame, overlay_name, rank_correlation, render_attention_overlay, shade_map,
};

use std::fmt::{self, Write as _};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{random_walk_route, DatasetManifest, GenConfig};
use crate::error::{bail, Result};
use crate::policy::{PolicyModel, DESK_INPUT};
use crate::sim::episode::yield_throttle;
use crate::sim::{
    build_town_with, spawn_oncoming, weather_presets, Control, Controller, EpisodeLimits, EpisodeResult, ExpertController,
    Observation, RenderConfig, Route, Scenario, Simulator, TownConfig, TownMap, WeatherPreset,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Straight,
    OneTurn,
    Navigation,
    NavigationDynamic,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Straight, Task::OneTurn, Task::Navigation, Task::NavigationDynamic];

    pub fn name(self) -> &'static str {
        match self {
            Task::Straight => "straight",
            Task::OneTurn => "one_turn",
            Task::Navigation => "navigation",
            Task::NavigationDynamic => "navigation_dynamic",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Town and weather pairing; one column of the result table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    TrainSeen,
    TrainUnseen,
    TestSeen,
    TestUnseen,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::TrainSeen, Condition::TrainUnseen, Condition::TestSeen, Condition::TestUnseen];

    pub fn name(self) -> &'static str {
        match self {
            Condition::TrainSeen => "train_town/seen",
            Condition::TrainUnseen => "train_town/unseen",
            Condition::TestSeen => "test_town/seen",
            Condition::TestUnseen => "test_town/unseen",
        }
    }

    pub fn test_town(self) -> bool {
        matches!(self, Condition::TestSeen | Condition::TestUnseen)
    }

    pub fn seen_weather(self) -> bool {
        matches!(self, Condition::TrainSeen | Condition::TestSeen)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub seed: u64,
    pub episodes_per_cell: usize,
    pub resolution: (usize, usize),
    /// Must match the town the training data was recorded in.
    pub town_a_seed: u64,
    pub town_a_blocks: (usize, usize),
    pub town_b_seed: u64,
    pub town_b_blocks: (usize, usize),
    pub navigation_segments: usize,
    pub agents: usize,
    pub conditions: Vec<Condition>,
    /// Episode budget as a multiple of the expert's step count.
    pub budget_factor: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        let g = GenConfig::default();
        SuiteConfig {
            seed: 0,
            episodes_per_cell: 10,
            resolution: DESK_INPUT,
            town_a_seed: g.town_seed,
            town_a_blocks: g.blocks,
            town_b_seed: 1001,
            town_b_blocks: (3, 5),
            navigation_segments: 4,
            agents: 3,
            conditions: Condition::ALL.to_vec(),
            budget_factor: 2.0,
        }
    }
}

impl SuiteConfig {
    /// Training town only, as used for box-removal ablations.
    pub fn town_a_only(mut self) -> Self {
        self.conditions.retain(|c| !c.test_town());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes_per_cell < 10 {
            bail!(Config, "episodes_per_cell must be at least 10, got {}", self.episodes_per_cell);
        }
        if self.conditions.is_empty() {
            bail!(Config, "suite has no conditions");
        }
        if self.navigation_segments < 3 {
            bail!(Config, "navigation routes need at least 3 segments");
        }
        if !(self.budget_factor >= 1.0) {
            bail!(Config, "budget_factor must be at least 1");
        }
        if (self.town_b_seed, self.town_b_blocks) == (self.town_a_seed, self.town_a_blocks) {
            bail!(Config, "test town must differ from the training town");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EpisodeSpec {
    pub task: Task,
    pub condition: Condition,
    pub scenario: Scenario,
    pub budget: usize,
}

#[derive(Clone, Debug)]
pub struct BenchmarkSuite {
    pub config: SuiteConfig,
    pub town_a: TownMap,
    pub town_b: TownMap,
    pub episodes: Vec<EpisodeSpec>,
}

impl BenchmarkSuite {
    pub fn town(&self, c: Condition) -> &TownMap {
        if c.test_town() {
            &self.town_b
        } else {
            &self.town_a
        }
    }

    pub fn count(&self, task: Task, condition: Condition) -> usize {
        self.episodes.iter().filter(|e| e.task == task && e.condition == condition).count()
    }

    /// Fails if any test-town route was used for training.
    pub fn check_hygiene(&self, manifest: &DatasetManifest) -> Result<()> {
        let b = (self.config.town_b_seed, self.config.town_b_blocks);
        if manifest.town == self.town_b.name || manifest.town_geometry == Some(b) {
            bail!(Config, "training data was recorded in the test town");
        }
        let used: std::collections::HashSet<&str> = manifest.episodes.iter().map(|e| e.route_id.as_str()).collect();
        for e in self.episodes.iter().filter(|e| e.condition.test_town()) {
            if used.contains(e.scenario.route.id.as_str()) {
                bail!(Config, "test route {} appears in the training manifest", e.scenario.route.id);
            }
        }
        Ok(())
    }
}

fn straight_routes(town: &TownMap) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for a in 0..town.nodes.len() {
        for (b, _) in town.neighbors(a) {
            for (c, _) in town.neighbors(b) {
                let (na, nb, nc) = (&town.nodes[a], &town.nodes[b], &town.nodes[c]);
                let col = na.col == nb.col && nb.col == nc.col && na.row != nc.row;
                let row = na.row == nb.row && nb.row == nc.row && na.col != nc.col;
                if col || row {
                    out.push(vec![a, b, c]);
                }
            }
        }
    }
    out
}

fn turn_routes(town: &TownMap) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for a in 0..town.nodes.len() {
        for (b, _) in town.neighbors(a) {
            for (c, _) in town.neighbors(b) {
                let (na, nb, nc) = (&town.nodes[a], &town.nodes[b], &town.nodes[c]);
                let turns = (na.col == nb.col) != (nb.col == nc.col);
                if turns {
                    out.push(vec![a, b, c]);
                }
            }
        }
    }
    out
}

/// Routes for one task in one town; `n` distinct routes where the town has
/// enough.
fn task_routes(sim: &Simulator, task: Task, n: usize, segments: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Route>> {
    let town = sim.town;
    let mut candidates: Vec<Vec<usize>> = match task {
        Task::Straight => straight_routes(town),
        Task::OneTurn => turn_routes(town),
        _ => Vec::new(),
    };
    candidates.shuffle(rng);
    let mut out: Vec<Route> = Vec::new();
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > 1000 {
            bail!(Planning, "could not find {} {} routes in {}", n, task, town.name);
        }
        let route = match task {
            Task::Straight | Task::OneTurn => {
                if candidates.is_empty() {
                    bail!(Planning, "{} has no {} routes", town.name, task);
                }
                Route::from_nodes(town, &candidates[(attempts - 1) % candidates.len()])?
            }
            _ => match random_walk_route(town, segments, &[0.0; 4], rng) {
                Some(r) => r,
                None => continue,
            },
        };
        let fresh = !out.iter().any(|r| r.id == route.id);
        let turns = route.maneuvers.iter().any(|&(_, c)| c.is_turn());
        if (fresh || attempts > 200) && (turns || task == Task::Straight) {
            out.push(route);
        }
    }
    Ok(out)
}

/// Builds the task × condition episode lists. Routes are drawn per town and
/// shared by that town's weather conditions.
pub fn build_suite(cfg: &SuiteConfig) -> Result<BenchmarkSuite> {
    cfg.validate()?;
    let town_a = build_town_with("town_a", cfg.town_a_seed, TownConfig { blocks: cfg.town_a_blocks, ..TownConfig::default() })?;
    let town_b = build_town_with("town_b", cfg.town_b_seed, TownConfig { blocks: cfg.town_b_blocks, ..TownConfig::default() })?;
    let render = RenderConfig::new(cfg.resolution.0, cfg.resolution.1);
    let presets = weather_presets();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut episodes = Vec::new();
    for (town, test) in [(&town_a, false), (&town_b, true)] {
        let conds: Vec<Condition> = cfg.conditions.iter().copied().filter(|c| c.test_town() == test).collect();
        if conds.is_empty() {
            continue;
        }
        let sim = Simulator::new(town, render.clone());
        let nav = task_routes(&sim, Task::Navigation, cfg.episodes_per_cell, cfg.navigation_segments, &mut rng)?;
        for task in Task::ALL {
            let routes = match task {
                Task::Navigation | Task::NavigationDynamic => nav.clone(),
                _ => task_routes(&sim, task, cfg.episodes_per_cell, cfg.navigation_segments, &mut rng)?,
            };
            for &condition in &conds {
                let weathers: Vec<&WeatherPreset> = presets.iter().filter(|p| p.seen == condition.seen_weather()).collect();
                for (i, route) in routes.iter().enumerate() {
                    let seed = rng.random::<u64>();
                    let agents = if task == Task::NavigationDynamic { spawn_oncoming(town, route, cfg.agents, seed)? } else { Vec::new() };
                    let scenario = Scenario { route: route.clone(), weather: weathers[i % weathers.len()].clone(), agents, seed };
                    let expert = sim.expert_steps(&scenario)?;
                    let budget = (expert as f64 * cfg.budget_factor).ceil() as usize;
                    episodes.push(EpisodeSpec { task, condition, scenario, budget });
                }
            }
        }
    }
    Ok(BenchmarkSuite { config: cfg.clone(), town_a, town_b, episodes })
}

/// Steering from the network for the active command; throttle follows the
/// same yielding rule as the expert.
pub struct ModelController<'m> {
    model: &'m PolicyModel,
    pub record_attention: bool,
}

impl<'m> ModelController<'m> {
    pub fn new(model: &'m PolicyModel) -> Self {
        ModelController { model, record_attention: false }
    }
}

impl Controller for ModelController<'_> {
    fn control(&mut self, obs: &Observation) -> Result<Control> {
        let Some(frame) = obs.frame else {
            bail!(Contract, "model controller needs a frame");
        };
        let trace = self.model.forward(&frame.to_tensor(), obs.command)?;
        if !trace.steer.is_finite() {
            bail!(Numeric, "model produced steer {}", trace.steer);
        }
        let mut c = Control::new(trace.steer.clamp(-1.0, 1.0), yield_throttle(obs));
        if self.record_attention {
            c.attention = trace.alpha;
        }
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub task: Task,
    pub condition: Condition,
    pub route_id: String,
    pub weather: String,
    pub result: EpisodeResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub task: Task,
    pub condition: Condition,
    pub episodes: usize,
    pub successes: usize,
}

impl Cell {
    /// Percent of episodes that succeeded.
    pub fn rate(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            100.0 * self.successes as f64 / self.episodes as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub label: String,
    pub cells: Vec<Cell>,
    pub episodes: Vec<EpisodeOutcome>,
}

impl BenchmarkReport {
    fn from_outcomes(label: &str, episodes: Vec<EpisodeOutcome>) -> Self {
        let mut cells: Vec<Cell> = Vec::new();
        for e in &episodes {
            let i = match cells.iter().position(|c| c.task == e.task && c.condition == e.condition) {
                Some(i) => i,
                None => {
                    cells.push(Cell { task: e.task, condition: e.condition, episodes: 0, successes: 0 });
                    cells.len() - 1
                }
            };
            cells[i].episodes += 1;
            cells[i].successes += e.result.success as usize;
        }
        cells.sort_by_key(|c| (c.task, c.condition));
        BenchmarkReport { label: label.to_string(), cells, episodes }
    }

    pub fn rate(&self, task: Task, condition: Condition) -> Option<f64> {
        self.cells.iter().find(|c| c.task == task && c.condition == condition).map(Cell::rate)
    }

    /// Success over all conditions of a task.
    pub fn task_rate(&self, task: Task) -> Option<f64> {
        let (n, s) = self.cells.iter().filter(|c| c.task == task).fold((0, 0), |(n, s), c| (n + c.episodes, s + c.successes));
        (n > 0).then(|| 100.0 * s as f64 / n as f64)
    }

    /// Mean of the task rates.
    pub fn average(&self) -> f64 {
        let rates: Vec<f64> = Task::ALL.iter().filter_map(|&t| self.task_rate(t)).collect();
        rates.iter().sum::<f64>() / rates.len().max(1) as f64
    }

    pub fn conditions(&self) -> Vec<Condition> {
        let mut c: Vec<Condition> = self.cells.iter().map(|c| c.condition).collect();
        c.sort();
        c.dedup();
        c
    }

    pub fn to_text(&self) -> String {
        let conds = self.conditions();
        let mut s = format!("{}\n{:<20}", self.label, "task");
        for c in &conds {
            let _ = write!(s, "{:>19}", c.name());
        }
        s.push('\n');
        for t in Task::ALL {
            let _ = write!(s, "{:<20}", t.name());
            for &c in &conds {
                match self.rate(t, c) {
                    Some(r) => {
                        let _ = write!(s, "{:>18.1}%", r);
                    }
                    None => {
                        let _ = write!(s, "{:>19}", "-");
                    }
                }
            }
            s.push('\n');
        }
        let _ = writeln!(s, "average success {:.1}%", self.average());
        s
    }
}

/// Runs every suite episode with a fresh controller from `make`. Episodes
/// are spread over `workers` threads; the report does not depend on the
/// worker count.
pub fn run_benchmark<'a, F>(suite: &BenchmarkSuite, label: &str, workers: usize, make: F) -> Result<BenchmarkReport>
where
    F: Fn() -> Box<dyn Controller + 'a> + Sync,
{
    let workers = workers.clamp(1, suite.episodes.len().max(1));
    let render = RenderConfig::new(suite.config.resolution.0, suite.config.resolution.1);
    let run = |e: &EpisodeSpec| {
        let sim = Simulator::new(suite.town(e.condition), render.clone());
        let mut ctl = make();
        let result = sim.run_episode(ctl.as_mut(), &e.scenario, &EpisodeLimits::with_budget(e.budget));
        EpisodeOutcome {
            task: e.task,
            condition: e.condition,
            route_id: e.scenario.route.id.clone(),
            weather: e.scenario.weather.name.clone(),
            result,
        }
    };
    let outcomes: Vec<EpisodeOutcome> = if workers == 1 {
        suite.episodes.iter().map(run).collect()
    } else {
        let mut slots: Vec<Option<EpisodeOutcome>> = vec![None; suite.episodes.len()];
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let run = &run;
                    s.spawn(move || suite.episodes.iter().enumerate().skip(w).step_by(workers).map(|(i, e)| (i, run(e))).collect::<Vec<_>>())
                })
                .collect();
            for h in handles {
                for (i, o) in h.join().expect("benchmark worker panicked") {
                    slots[i] = Some(o);
                }
            }
        });
        slots.into_iter().map(|o| o.expect("every episode ran")).collect()
    };
    Ok(BenchmarkReport::from_outcomes(label, outcomes))
}

pub fn run_expert(suite: &BenchmarkSuite, workers: usize) -> Result<BenchmarkReport> {
    run_benchmark(suite, "expert", workers, || Box::new(ExpertController::new(Default::default())))
}

pub fn run_model(suite: &BenchmarkSuite, model: &PolicyModel, label: &str, workers: usize) -> Result<BenchmarkReport> {
    if model.config().input != suite.config.resolution {
        bail!(Config, "model expects {:?} frames but the suite renders {:?}", model.config().input, suite.config.resolution);
    }
    run_benchmark(suite, label, workers, || Box::new(ModelController::new(model)))
}
