//! Demonstration recording and loading: episodes are directories of binary
//! PPM frames plus a JSONL measurement log, indexed by `manifest.json`.

mod ppm;
mod record;

pub use ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm};
pub use record::{
    command_share, generate_dataset, random_walk_route, record_episode, EpisodeMeta, GenConfig, Measurement,
};

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::policy::{Batch, HighLevelCommand};
use crate::sim::Frame;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";
/// Share of unreadable samples above which loading fails.
pub const MAX_CORRUPT_FRACTION: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    /// Directory name under the dataset root.
    pub dir: String,
    pub route_id: String,
    pub weather: String,
    pub frames: usize,
    pub split: Split,
    #[serde(default)]
    pub dynamic: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub town: String,
    /// Generator seed and block layout of the town, when known.
    #[serde(default)]
    pub town_geometry: Option<(u64, (usize, usize))>,
    pub resolution: (usize, usize),
    pub episodes: Vec<EpisodeEntry>,
}

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<DatasetManifest> {
        let m: DatasetManifest = serde_json::from_slice(&fs::read(root.join(MANIFEST_FILE))?)?;
        m.check()?;
        Ok(m)
    }

    /// Version, resolution and split hygiene: no route in both splits.
    pub fn check(&self) -> Result<()> {
        if self.version != 1 {
            bail!(Corrupt, "unsupported manifest version {}", self.version);
        }
        if self.resolution.0 == 0 || self.resolution.1 == 0 {
            bail!(Corrupt, "manifest resolution is empty");
        }
        let train = self.route_ids(Split::Train);
        if let Some(r) = self.route_ids(Split::Val).intersection(&train).next() {
            bail!(Corrupt, "route {} appears in both splits", r);
        }
        Ok(())
    }

    pub fn route_ids(&self, split: Split) -> HashSet<String> {
        self.episodes.iter().filter(|e| e.split == split).map(|e| e.route_id.clone()).collect()
    }

    pub fn frames(&self, split: Split) -> usize {
        self.episodes.iter().filter(|e| e.split == split).map(|e| e.frames).sum()
    }
}

/// One recorded sample `(z_i, a_i)` with its command and measurements.
#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    pub frame: Frame,
    pub command: HighLevelCommand,
    pub steer: f64,
    pub speed: f64,
    pub offroad: bool,
    pub collision: bool,
}

/// A split held in memory as 8-bit frames.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub width: usize,
    pub height: usize,
    frames: Vec<u8>,
    pub commands: Vec<HighLevelCommand>,
    pub steers: Vec<f64>,
    pub speeds: Vec<f64>,
    pub flags: Vec<(bool, bool)>,
    /// Samples dropped as unreadable.
    pub skipped: usize,
}

impl Dataset {
    pub fn new(width: usize, height: usize) -> Self {
        Dataset { width, height, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.commands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.commands.is_empty()
    }

    fn frame_bytes(&self) -> usize {
        self.width * self.height * 3
    }

    pub fn push(&mut self, d: Demonstration) -> Result<()> {
        if (d.frame.width, d.frame.height) != (self.width, self.height) {
            bail!(Geometry, "frame {}x{} in a {}x{} dataset", d.frame.width, d.frame.height, self.width, self.height);
        }
        self.frames.extend_from_slice(&d.frame.data);
        self.commands.push(d.command);
        self.steers.push(d.steer);
        self.speeds.push(d.speed);
        self.flags.push((d.offroad, d.collision));
        Ok(())
    }

    pub fn frame(&self, i: usize) -> Frame {
        let n = self.frame_bytes();
        Frame { width: self.width, height: self.height, data: self.frames[i * n..(i + 1) * n].to_vec() }
    }

    pub fn get(&self, i: usize) -> Demonstration {
        Demonstration {
            frame: self.frame(i),
            command: self.commands[i],
            steer: self.steers[i],
            speed: self.speeds[i],
            offroad: self.flags[i].0,
            collision: self.flags[i].1,
        }
    }

    /// Sample indices for one epoch: a shuffle seeded from `(seed, epoch)`,
    /// cut into batches of `batch_size` with the last partial batch kept.
    pub fn epoch_batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }

    /// Training batch with frames scaled to `[0, 1]`.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let n = self.frame_bytes();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend(self.frames[i * n..(i + 1) * n].iter().map(|&b| b as f64 / 255.0));
        }
        Batch {
            frames: Tensor::new(vec![indices.len(), self.height, self.width, 3], data).expect("batch dims"),
            commands: indices.iter().map(|&i| self.commands[i]).collect(),
            targets: indices.iter().map(|&i| self.steers[i]).collect(),
        }
    }

    /// Sample counts per command, indexed by command code.
    pub fn command_counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for cmd in &self.commands {
            c[cmd.index()] += 1;
        }
        c
    }
}

fn parse_measurement(line: &str, expect_i: usize) -> Option<Measurement> {
    let m: Measurement = serde_json::from_str(line).ok()?;
    let valid = m.i == expect_i && m.steer.is_finite() && (-1.0..=1.0).contains(&m.steer) && m.speed.is_finite();
    valid.then_some(m)
}

/// Loads every episode of `split`. Unreadable frames or measurement lines
/// are skipped with a warning; more than 1% of them is fatal.
pub fn load_split(root: &Path, manifest: &DatasetManifest, split: Split) -> Result<Dataset> {
    let (w, h) = manifest.resolution;
    let mut ds = Dataset::new(w, h);
    let mut expected = 0;
    for ep in manifest.episodes.iter().filter(|e| e.split == split) {
        let dir = root.join(&ep.dir);
        expected += ep.frames;
        if dir.join(INCOMPLETE_MARKER).exists() {
            log::warn!("{} is marked incomplete; skipping its {} frames", ep.dir, ep.frames);
            ds.skipped += ep.frames;
            continue;
        }
        let file = match fs::File::open(dir.join("measurements.jsonl")) {
            Ok(f) => f,
            Err(e) => {
                log::warn!("{}: {}", ep.dir, e);
                ds.skipped += ep.frames;
                continue;
            }
        };
        let mut seen = 0;
        for (k, line) in BufReader::new(file).lines().enumerate() {
            seen += 1;
            let Some(m) = line.ok().and_then(|l| parse_measurement(&l, k)) else {
                log::warn!("{}: bad measurement line {}", ep.dir, k);
                ds.skipped += 1;
                continue;
            };
            let frame = match read_ppm(&dir.join("frames").join(format!("{k:06}.ppm"))) {
                Ok(f) if (f.width, f.height) == (w, h) => f,
                Ok(f) => {
                    log::warn!("{}: frame {} is {}x{}", ep.dir, k, f.width, f.height);
                    ds.skipped += 1;
                    continue;
                }
                Err(e) => {
                    log::warn!("{}: frame {}: {}", ep.dir, k, e);
                    ds.skipped += 1;
                    continue;
                }
            };
            ds.push(Demonstration {
                frame,
                command: m.command,
                steer: m.steer,
                speed: m.speed,
                offroad: m.offroad,
                collision: m.collision,
            })?;
        }
        if seen < ep.frames {
            log::warn!("{}: {} of {} measurement lines present", ep.dir, seen, ep.frames);
            ds.skipped += ep.frames - seen;
        }
    }
    let total = expected.max(ds.len() + ds.skipped);
    if total > 0 && ds.skipped as f64 > MAX_CORRUPT_FRACTION * total as f64 {
        bail!(Corrupt, "{} of {} samples unreadable", ds.skipped, total);
    }
    Ok(ds)
}

pub fn load_dataset(root: &Path, split: Split) -> Result<Dataset> {
    let manifest = DatasetManifest::load(root)?;
    load_split(root, &manifest, split)
}
