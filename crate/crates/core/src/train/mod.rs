//! Training loop, checkpoints and offline evaluation.

mod checkpoint;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{load_split, Dataset, DatasetManifest, Split};
use crate::error::{bail, Result};
use crate::policy::{HighLevelCommand, ModelConfig, PolicyModel, Variant};
use crate::tensor::{AdamConfig, AdamState};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Constant Adam learning rate.
    pub lr: f64,
    pub seed: u64,
    pub model: ModelConfig,
    /// Dataset root holding `manifest.json`.
    pub data: PathBuf,
    /// Global gradient-norm limit; off by default.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            lr: 1e-4,
            seed: 0,
            model: ModelConfig::desk(Variant::FullAttention),
            data: PathBuf::from("data"),
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            bail!(Config, "epochs must be at least 1");
        }
        if self.batch_size < 1 {
            bail!(Config, "batch_size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!(Config, "lr must be positive, got {}", self.lr);
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                bail!(Config, "grad_clip must be positive");
            }
        }
        Ok(())
    }

    /// Two configs describe the same run up to its length.
    fn same_run(&self, other: &TrainConfig) -> bool {
        TrainConfig { epochs: 0, ..self.clone() } == TrainConfig { epochs: 0, ..other.clone() }
    }
}

/// MSE per command, `None` when the command has no samples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CommandMse {
    pub follow_lane: Option<f64>,
    pub go_straight: Option<f64>,
    pub turn_left: Option<f64>,
    pub turn_right: Option<f64>,
}

impl CommandMse {
    pub fn get(&self, cmd: HighLevelCommand) -> Option<f64> {
        match cmd {
            HighLevelCommand::FollowLane => self.follow_lane,
            HighLevelCommand::GoStraight => self.go_straight,
            HighLevelCommand::TurnLeft => self.turn_left,
            HighLevelCommand::TurnRight => self.turn_right,
        }
    }

    fn from_sums(sse: &[f64; 4], counts: &[usize; 4]) -> Self {
        let f = |i: usize| (counts[i] > 0).then(|| sse[i] / counts[i] as f64);
        CommandMse { follow_lane: f(0), go_straight: f(1), turn_left: f(2), turn_right: f(3) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OfflineEval {
    pub mse_total: f64,
    pub mse_per_command: CommandMse,
    pub counts: [usize; 4],
}

fn summarize(sse: [f64; 4], counts: [usize; 4]) -> OfflineEval {
    let n: usize = counts.iter().sum();
    OfflineEval { mse_total: sse.iter().sum::<f64>() / n as f64, mse_per_command: CommandMse::from_sums(&sse, &counts), counts }
}

/// Steering MSE of `model` over `data`, each sample through its own
/// command's head.
pub fn evaluate_offline(model: &PolicyModel, data: &Dataset, batch_size: usize) -> Result<OfflineEval> {
    if data.is_empty() {
        bail!(Contract, "evaluation set is empty");
    }
    let (w, h) = model.config().input;
    if (data.width, data.height) != (w, h) {
        bail!(Config, "model expects {}x{} frames, data has {}x{}", w, h, data.width, data.height);
    }
    let mut sse = [0.0; 4];
    let mut counts = [0; 4];
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let b = data.batch(chunk);
        let pred = model.predict_batch(b.frames, &b.commands)?;
        for ((p, t), c) in pred.iter().zip(&b.targets).zip(&b.commands) {
            sse[c.index()] += (p - t).powi(2);
            counts[c.index()] += 1;
        }
    }
    Ok(summarize(sse, counts))
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: Split,
    pub mse: f64,
    pub mse_per_command: CommandMse,
    /// Wall-clock time of the epoch; the only field that varies between
    /// identical runs.
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub initial_val: Option<OfflineEval>,
    pub best_val_mse: Option<f64>,
    pub final_val: Option<OfflineEval>,
    pub final_train_mse: f64,
    /// Steps in which a head without samples received gradient.
    pub gating_leaks: usize,
    pub steps: usize,
    pub max_alpha_sum_error: f64,
    pub max_attended_excess: f64,
}

fn append_metrics(path: &Path, rec: &MetricsRecord) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_vec(rec)?;
    line.push(b'\n');
    f.write_all(&line)?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Loads the dataset named by `cfg.data` and trains into `out_dir`.
pub fn train(cfg: &TrainConfig, out_dir: &Path, resume: bool) -> Result<TrainReport> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(&cfg.data)?;
    if manifest.resolution != cfg.model.input {
        bail!(Config, "dataset is {:?} but the model expects {:?}", manifest.resolution, cfg.model.input);
    }
    let train_set = load_split(&cfg.data, &manifest, Split::Train)?;
    let val_set = load_split(&cfg.data, &manifest, Split::Val)?;
    train_on(cfg, &train_set, &val_set, out_dir, resume)
}

/// Training on in-memory splits. Writes `metrics.jsonl`, `best.ckpt`
/// (lowest validation MSE) and `final.ckpt` (rewritten after every epoch, so
/// a divergence leaves the last good epoch on disk). With `resume`, an
/// existing `final.ckpt` of the same run is continued.
pub fn train_on(cfg: &TrainConfig, train_set: &Dataset, val_set: &Dataset, out_dir: &Path, resume: bool) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        bail!(Config, "training split is empty");
    }
    if (train_set.width, train_set.height) != cfg.model.input {
        bail!(Config, "frames are {}x{} but the model expects {:?}", train_set.width, train_set.height, cfg.model.input);
    }
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.json"), serde_json::to_vec_pretty(cfg)?)?;
    let metrics = out_dir.join(METRICS_FILE);
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    let best_path = out_dir.join(BEST_CHECKPOINT);

    let adam_cfg = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut report = TrainReport {
        epochs: 0,
        initial_val: None,
        best_val_mse: None,
        final_val: None,
        final_train_mse: f64::NAN,
        gating_leaks: 0,
        steps: 0,
        max_alpha_sum_error: 0.0,
        max_attended_excess: 0.0,
    };
    let (mut model, mut adam, start) = match resume.then(|| load_checkpoint(&final_path)) {
        Some(Ok(ck)) => {
            if !ck.config.same_run(cfg) {
                bail!(Config, "{} belongs to a different run", final_path.display());
            }
            let kept: Vec<MetricsRecord> = read_metrics(&metrics)?.into_iter().filter(|r| r.epoch as u64 <= ck.epoch).collect();
            report.initial_val = None;
            report.best_val_mse = kept.iter().filter(|r| r.split == Split::Val && r.epoch > 0).map(|r| r.mse).reduce(f64::min);
            let mut text = Vec::new();
            for r in &kept {
                text.extend(serde_json::to_vec(r)?);
                text.push(b'\n');
            }
            fs::write(&metrics, text)?;
            (ck.model()?, ck.adam, ck.epoch as usize + 1)
        }
        Some(Err(e)) if !matches!(e, crate::Error::Io(_)) => return Err(e),
        _ => {
            let model = PolicyModel::init(cfg.model.clone(), cfg.seed)?;
            let adam = AdamState::new(model.params(), adam_cfg);
            fs::write(&metrics, b"")?;
            if !val_set.is_empty() {
                let t = Instant::now();
                let ev = evaluate_offline(&model, val_set, cfg.batch_size)?;
                append_metrics(&metrics, &record(0, Split::Val, &ev, t))?;
                report.initial_val = Some(ev);
            }
            (model, adam, 1)
        }
    };

    for epoch in start..=cfg.epochs {
        let t = Instant::now();
        let mut sse = [0.0; 4];
        let mut counts = [0; 4];
        for idx in train_set.epoch_batches(cfg.batch_size, cfg.seed, epoch as u64) {
            let batch = train_set.batch(&idx);
            let (stats, leaks) = model.train_step_with(&batch, &mut adam, cfg.grad_clip)?;
            report.gating_leaks += leaks;
            report.steps += 1;
            report.max_alpha_sum_error = report.max_alpha_sum_error.max(stats.alpha_sum_error);
            report.max_attended_excess = report.max_attended_excess.max(stats.attended_excess);
            for ((p, y), c) in stats.predictions.iter().zip(&batch.targets).zip(&batch.commands) {
                sse[c.index()] += (p - y).powi(2);
                counts[c.index()] += 1;
            }
        }
        let train_eval = summarize(sse, counts);
        report.final_train_mse = train_eval.mse_total;
        let ck = Checkpoint { config: cfg.clone(), epoch: epoch as u64, rng: (cfg.seed, epoch as u64 + 1), params: model.params().clone(), adam: adam.clone() };
        save_checkpoint(&ck, &final_path)?;
        append_metrics(&metrics, &record(epoch, Split::Train, &train_eval, t))?;
        if !val_set.is_empty() {
            let ev = evaluate_offline(&model, val_set, cfg.batch_size)?;
            if report.best_val_mse.is_none_or(|b| ev.mse_total < b) {
                report.best_val_mse = Some(ev.mse_total);
                save_checkpoint(&ck, &best_path)?;
            }
            append_metrics(&metrics, &record(epoch, Split::Val, &ev, t))?;
            report.final_val = Some(ev);
        }
        log::info!("epoch {epoch}: train mse {:.5}", train_eval.mse_total);
        report.epochs = epoch;
    }
    if val_set.is_empty() && !best_path.exists() {
        fs::copy(&final_path, &best_path)?;
    }
    Ok(report)
}

fn record(epoch: usize, split: Split, ev: &OfflineEval, started: Instant) -> MetricsRecord {
    MetricsRecord {
        epoch,
        split,
        mse: ev.mse_total,
        mse_per_command: ev.mse_per_command.clone(),
        wall_ms: started.elapsed().as_millis() as u64,
    }
}
