use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ppm::write_ppm;
use super::{DatasetManifest, EpisodeEntry, Split, INCOMPLETE_MARKER, MANIFEST_FILE};
use crate::error::{bail, Error, Result};
use crate::policy::HighLevelCommand;
use crate::sim::{
    build_town_with, spawn_oncoming, weather_presets, Control, Controller, DynamicsConfig, EpisodeLimits, NoisyExpert,
    Observation, RenderConfig, Route, Scenario, Simulator, TownConfig, TownMap,
};

/// One line of `measurements.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub i: usize,
    pub steer: f64,
    pub throttle: f64,
    pub command: HighLevelCommand,
    pub speed: f64,
    pub offroad: bool,
    pub collision: bool,
}

/// Contents of an episode's `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub route_id: String,
    pub town: String,
    pub weather: String,
    pub frames: usize,
    pub steps: usize,
    pub width: usize,
    pub height: usize,
    pub record_interval: usize,
}

/// Requests a rendered frame only on steps that will be written.
struct Sampled<'c> {
    inner: &'c mut dyn Controller,
    interval: usize,
    step: usize,
}

impl Controller for Sampled<'_> {
    fn needs_frame(&self) -> bool {
        self.inner.needs_frame() || self.step % self.interval == 0
    }

    fn control(&mut self, obs: &Observation) -> Result<Control> {
        self.step += 1;
        self.inner.control(obs)
    }
}

/// Runs one episode and writes every `interval`-th step to `out_dir`. The
/// recorded steer is the controller's label when it reports one (the clean
/// expert steer under noise injection), else the executed steer. The
/// directory keeps an `INCOMPLETE` marker unless the episode succeeds and
/// every file is written.
pub fn record_episode(
    sim: &Simulator,
    controller: &mut dyn Controller,
    scenario: &Scenario,
    limits: &EpisodeLimits,
    out_dir: &Path,
    interval: usize,
) -> Result<EpisodeMeta> {
    if interval == 0 {
        bail!(Config, "record interval must be at least 1");
    }
    let frames_dir = out_dir.join("frames");
    fs::create_dir_all(&frames_dir)?;
    let marker = out_dir.join(INCOMPLETE_MARKER);
    fs::write(&marker, b"")?;
    let mut jsonl = BufWriter::new(fs::File::create(out_dir.join("measurements.jsonl"))?);
    let mut written = 0;
    let mut io_error: Option<Error> = None;
    let mut sampled = Sampled { inner: controller, interval, step: 0 };
    let result = sim.run_observed(&mut sampled, scenario, limits, &mut |rec| {
        if rec.step % interval != 0 {
            return Ok(());
        }
        let Some(frame) = rec.frame else {
            return Err(Error::Contract("no frame on a recording step".into()));
        };
        let m = Measurement {
            i: written,
            steer: rec.control.label.unwrap_or(rec.control.steer),
            throttle: rec.control.throttle,
            command: rec.command,
            speed: rec.state.speed,
            offroad: false,
            collision: false,
        };
        let res = write_ppm(&frames_dir.join(format!("{written:06}.ppm")), frame)
            .and_then(|_| Ok(serde_json::to_writer(&mut jsonl, &m)?))
            .and_then(|_| Ok(jsonl.write_all(b"\n")?));
        if let Err(e) = res {
            let msg = e.to_string();
            io_error = Some(e);
            return Err(Error::Contract(msg));
        }
        written += 1;
        Ok(())
    });
    if let Some(e) = io_error {
        return Err(e);
    }
    jsonl.flush()?;
    if !result.success {
        bail!(Planning, "episode on {} failed: {}", scenario.route.id, result.failure.unwrap_or_default());
    }
    let meta = EpisodeMeta {
        route_id: scenario.route.id.clone(),
        town: sim.town.name.clone(),
        weather: scenario.weather.name.clone(),
        frames: written,
        steps: result.steps,
        width: sim.render.width,
        height: sim.render.height,
        record_interval: interval,
    };
    fs::write(out_dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    fs::remove_file(&marker)?;
    Ok(meta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub town_seed: u64,
    pub blocks: (usize, usize),
    pub resolution: (usize, usize),
    /// Stop adding episodes once this many frames are recorded.
    pub target_frames: usize,
    pub record_interval: usize,
    /// Segments per route, inclusive range.
    pub min_segments: usize,
    pub max_segments: usize,
    pub val_fraction: f64,
    /// Share of episodes with oncoming traffic.
    pub dynamic_fraction: f64,
    pub agents_per_episode: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            town_seed: 1,
            blocks: (4, 4),
            resolution: crate::policy::DESK_INPUT,
            target_frames: 20_000,
            record_interval: 3,
            min_segments: 3,
            max_segments: 5,
            val_fraction: 0.1,
            dynamic_fraction: 0.3,
            agents_per_episode: 2,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_frames == 0 || self.record_interval == 0 {
            bail!(Config, "target_frames and record_interval must be positive");
        }
        if self.min_segments < 1 || self.max_segments < self.min_segments {
            bail!(Config, "segment range {}..={} is empty", self.min_segments, self.max_segments);
        }
        if !(0.0..1.0).contains(&self.val_fraction) || !(0.0..=1.0).contains(&self.dynamic_fraction) {
            bail!(Config, "fractions must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn town(&self) -> Result<TownMap> {
        build_town_with("town_a", self.town_seed, TownConfig { blocks: self.blocks, ..TownConfig::default() })
    }
}

/// Self-avoiding random walk of `segments` segments. At each node the next
/// branch is drawn with weights favoring commands that are so far
/// under-represented in `share`.
pub fn random_walk_route(town: &TownMap, segments: usize, share: &[f64; 4], rng: &mut ChaCha8Rng) -> Option<Route> {
    let start = rng.random_range(0..town.nodes.len());
    let mut nodes = vec![start];
    for _ in 0..segments {
        let here = *nodes.last().expect("non-empty");
        let options: Vec<usize> = town.neighbors(here).into_iter().map(|(n, _)| n).filter(|n| !nodes.contains(n)).collect();
        if options.is_empty() {
            return None;
        }
        let next = if nodes.len() < 2 {
            *options.choose(rng).expect("non-empty")
        } else {
            let prev = nodes[nodes.len() - 2];
            let d_in = unit(town.node_pos(prev), town.node_pos(here));
            let weight = |&n: &usize| {
                let cmd = crate::sim::classify_turn(d_in, unit(town.node_pos(here), town.node_pos(n)));
                cmd.map_or(0.0, |c| (0.35 - share[c.index()]).max(0.02).powi(2))
            };
            *options.choose_weighted(rng, weight).ok()?
        };
        nodes.push(next);
    }
    Route::from_nodes(town, &nodes).ok()
}

fn unit(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let n = dx.hypot(dy);
    (dx / n, dy / n)
}

/// Fraction of route points under each command.
pub fn command_share(routes: &[Route]) -> [f64; 4] {
    let mut counts = [0usize; 4];
    for r in routes {
        for p in &r.points {
            counts[p.command.index()] += 1;
        }
    }
    let total = counts.iter().sum::<usize>().max(1) as f64;
    counts.map(|c| c as f64 / total)
}

/// Records a full demonstration set in Town A under the four seen weather
/// presets and writes `manifest.json`. Each route is driven once, so the
/// validation split holds out whole routes.
pub fn generate_dataset(cfg: &GenConfig, root: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let town = cfg.town()?;
    let (w, h) = cfg.resolution;
    let sim = Simulator::new(&town, RenderConfig::new(w, h));
    let seen: Vec<_> = weather_presets().into_iter().filter(|p| p.seen).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    fs::create_dir_all(root)?;

    let mut used = HashSet::new();
    let mut routes: Vec<Route> = Vec::new();
    let mut entries = Vec::new();
    let mut frames = 0;
    let mut attempts = 0;
    while frames < cfg.target_frames {
        attempts += 1;
        if attempts > 50 * (entries.len() + 10) {
            bail!(Planning, "could not find enough distinct routes ({} found)", entries.len());
        }
        let share = command_share(&routes);
        let segments = rng.random_range(cfg.min_segments..=cfg.max_segments);
        let Some(route) = random_walk_route(&town, segments, &share, &mut rng) else {
            continue;
        };
        if !used.insert(route.id.clone()) {
            continue;
        }
        let k = entries.len();
        let weather = seen[k % seen.len()].clone();
        let ep_seed = rng.random::<u64>();
        let agents = if rng.random::<f64>() < cfg.dynamic_fraction {
            spawn_oncoming(&town, &route, cfg.agents_per_episode, ep_seed)?
        } else {
            Vec::new()
        };
        let scenario = Scenario { route: route.clone(), weather, agents, seed: ep_seed };
        let dir_name = format!("episode_{k:04}");
        let dir = root.join(&dir_name);
        let budget = 2 * sim.expert_steps(&scenario)?;
        let mut expert = NoisyExpert::new(DynamicsConfig::default(), ep_seed);
        match record_episode(&sim, &mut expert, &scenario, &EpisodeLimits::with_budget(budget), &dir, cfg.record_interval) {
            Ok(meta) => {
                frames += meta.frames;
                entries.push(EpisodeEntry {
                    dir: dir_name,
                    route_id: meta.route_id,
                    weather: meta.weather,
                    frames: meta.frames,
                    split: Split::Train,
                    dynamic: !scenario.agents.is_empty(),
                });
                routes.push(route);
            }
            Err(e) if e.kind() == crate::ErrorKind::Planning => {
                log::warn!("discarding {}: {}", dir_name, e);
                fs::remove_dir_all(&dir)?;
            }
            Err(e) => return Err(e),
        }
    }

    let n_val = ((entries.len() as f64 * cfg.val_fraction).round() as usize).max(usize::from(cfg.val_fraction > 0.0));
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.shuffle(&mut rng);
    for &i in order.iter().take(n_val) {
        entries[i].split = Split::Val;
    }
    let manifest = DatasetManifest { version: 1, town: town.name.clone(), town_geometry: Some((cfg.town_seed, cfg.blocks)), resolution: cfg.resolution, episodes: entries };
    manifest.check()?;
    fs::write(root.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}
