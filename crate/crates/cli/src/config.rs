//! Flat `key = value` run configuration with dotted section prefixes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use drive_attn::bench::{Condition, SuiteConfig};
use drive_attn::data::GenConfig;
use drive_attn::policy::{HighLevelCommand, ModelConfig, Variant};
use drive_attn::roi::{BoxType, Lattice};
use drive_attn::train::TrainConfig;
use drive_attn::{Error, Result};

const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("data.root", "data"),
    ("data.town_seed", "1"),
    ("data.blocks", "4x4"),
    ("data.target_frames", "20000"),
    ("data.record_interval", "3"),
    ("data.min_segments", "3"),
    ("data.max_segments", "5"),
    ("data.val_fraction", "0.1"),
    ("data.dynamic_fraction", "0.3"),
    ("data.agents", "2"),
    ("model.variant", "full_attention"),
    ("model.input", "128x72"),
    ("model.grid.big_h", "6/6"),
    ("model.grid.big_v", "2/1"),
    ("model.grid.medium", "8/2"),
    ("model.grid.small", "32/4"),
    ("model.dense", "512,128,50,10"),
    ("train.epochs", "20"),
    ("train.batch_size", "64"),
    ("train.lr", "0.0001"),
    ("train.grad_clip", "none"),
    ("bench.episodes", "10"),
    ("bench.town_b_seed", "1001"),
    ("bench.town_b_blocks", "3x5"),
    ("bench.agents", "3"),
    ("bench.navigation_segments", "4"),
    ("bench.budget_factor", "2"),
    ("bench.conditions", "train_seen,train_unseen,test_seen,test_unseen"),
    ("bench.workers", "1"),
    ("explain.scenes", "5"),
    ("gradcheck.samples", "20"),
    ("gradcheck.command", "turn_left"),
    ("ablate.remove", "medium"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("{key} = {value}: expected {what}"))
}

impl RunConfig {
    pub fn defaults() -> Self {
        RunConfig { values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }

    /// `default` or a path to a config file layered over the defaults.
    pub fn load(spec: Option<&str>) -> Result<Self> {
        let mut cfg = Self::defaults();
        match spec {
            None | Some("default") => {}
            Some(path) => {
                let text = fs::read_to_string(path)?;
                cfg.apply_text(&text)?;
            }
        }
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value", n + 1)));
            };
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key '{key}'"))),
        }
    }

    /// Every key, one `key = value` line each, sorted.
    pub fn resolved(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("key has a default")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key);
        v.parse().map_err(|_| bad(key, v, std::any::type_name::<T>()))
    }

    fn pair(&self, key: &str, sep: char) -> Result<(usize, usize)> {
        let v = self.raw(key);
        let (a, b) = v.split_once(sep).ok_or_else(|| bad(key, v, &format!("A{sep}B")))?;
        match (a.trim().parse(), b.trim().parse()) {
            (Ok(a), Ok(b)) => Ok((a, b)),
            _ => Err(bad(key, v, &format!("A{sep}B with integers"))),
        }
    }

    pub fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.raw(key))
    }

    pub fn data_root(&self) -> PathBuf {
        self.path("data.root")
    }

    pub fn gen_config(&self) -> Result<GenConfig> {
        let cfg = GenConfig {
            seed: self.get("seed")?,
            town_seed: self.get("data.town_seed")?,
            blocks: self.pair("data.blocks", 'x')?,
            resolution: self.pair("model.input", 'x')?,
            target_frames: self.get("data.target_frames")?,
            record_interval: self.get("data.record_interval")?,
            min_segments: self.get("data.min_segments")?,
            max_segments: self.get("data.max_segments")?,
            val_fraction: self.get("data.val_fraction")?,
            dynamic_fraction: self.get("data.dynamic_fraction")?,
            agents_per_episode: self.get("data.agents")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let lattice = |key: &str| self.pair(key, '/').map(|(count, rows)| Lattice { count, rows });
        let mut m = ModelConfig::desk(self.get::<Variant>("model.variant")?);
        m.input = self.pair("model.input", 'x')?;
        m.grid.big_h = lattice("model.grid.big_h")?;
        m.grid.big_v = lattice("model.grid.big_v")?;
        m.grid.medium = lattice("model.grid.medium")?;
        m.grid.small = lattice("model.grid.small")?;
        let dense = self.raw("model.dense");
        m.dense = dense.split(',').map(|s| s.trim().parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad("model.dense", dense, "a comma list of sizes"))?;
        Ok(m)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let clip = self.raw("train.grad_clip");
        let cfg = TrainConfig {
            epochs: self.get("train.epochs")?,
            batch_size: self.get("train.batch_size")?,
            lr: self.get("train.lr")?,
            seed: self.get("seed")?,
            model: self.model_config()?,
            data: self.data_root(),
            grad_clip: if clip == "none" { None } else { Some(clip.parse().map_err(|_| bad("train.grad_clip", clip, "none or a number"))?) },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn suite_config(&self) -> Result<SuiteConfig> {
        let conds = self.raw("bench.conditions");
        let conditions = conds
            .split(',')
            .map(|c| match c.trim() {
                "train_seen" => Ok(Condition::TrainSeen),
                "train_unseen" => Ok(Condition::TrainUnseen),
                "test_seen" => Ok(Condition::TestSeen),
                "test_unseen" => Ok(Condition::TestUnseen),
                _ => Err(bad("bench.conditions", conds, "train_seen, train_unseen, test_seen or test_unseen")),
            })
            .collect::<Result<Vec<_>>>()?;
        let cfg = SuiteConfig {
            seed: self.get("seed")?,
            episodes_per_cell: self.get("bench.episodes")?,
            resolution: self.pair("model.input", 'x')?,
            town_a_seed: self.get("data.town_seed")?,
            town_a_blocks: self.pair("data.blocks", 'x')?,
            town_b_seed: self.get("bench.town_b_seed")?,
            town_b_blocks: self.pair("bench.town_b_blocks", 'x')?,
            navigation_segments: self.get("bench.navigation_segments")?,
            agents: self.get("bench.agents")?,
            conditions,
            budget_factor: self.get("bench.budget_factor")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn command(&self) -> Result<HighLevelCommand> {
        let v = self.raw("gradcheck.command");
        HighLevelCommand::ALL.into_iter().find(|c| c.name() == v).ok_or_else(|| bad("gradcheck.command", v, "a command name"))
    }

    pub fn removed_types(&self) -> Result<Vec<BoxType>> {
        let v = self.raw("ablate.remove");
        v.split(',').map(|s| s.trim().parse::<BoxType>()).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.resolved"), self.resolved())?;
        Ok(())
    }
}
