mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use drive_attn::bench::{
    ablation_box_removal, build_suite, decoded_region_shade, overlay_frame, overlay_name, rank_correlation, run_expert, run_model,
};
use drive_attn::data::{generate_dataset, load_split, read_ppm, write_ppm, DatasetManifest, Split};
use drive_attn::policy::{model_gradient_check, HighLevelCommand, PolicyModel};
use drive_attn::roi::generate_grid;
use drive_attn::train::{evaluate_offline, load_checkpoint, train};
use drive_attn::{Error, Result};
use serde_json::json;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "drive-attn", version, about = "Attention-based conditional driving policy: data, training, benchmark, explanations")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// `default` or a key = value config file.
    #[arg(long)]
    config: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Record expert demonstrations into --out.
    GenData(Common),
    /// Train a policy on `data.root` into --out.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue the run in --out from its last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Steering MSE of a checkpoint on a dataset split.
    EvalOffline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Closed-loop benchmark of a checkpoint, or of the expert.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "expert", required_unless_present = "expert")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        expert: bool,
    },
    /// Attention overlays for held-out scenes under every command.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference gradient check of the full model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Coordinates per parameter tensor.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Print the region grid, one region per line.
    GridDump(Common),
    /// Train and benchmark with box types removed from the grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated box types, overriding `ablate.remove`.
        #[arg(long)]
        remove: Option<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train { .. } => "train",
            Command::EvalOffline { .. } => "eval-offline",
            Command::Bench { .. } => "bench",
            Command::Explain { .. } => "explain",
            Command::Gradcheck { .. } => "gradcheck",
            Command::GridDump(_) => "grid-dump",
            Command::Ablate { .. } => "ablate",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData(c) | Command::GridDump(c) => c,
            Command::Train { common, .. }
            | Command::EvalOffline { common, .. }
            | Command::Bench { common, .. }
            | Command::Explain { common, .. }
            | Command::Gradcheck { common, .. }
            | Command::Ablate { common, .. } => common,
        }
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    for o in &common.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("--set {o}: expected KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = common.seed {
        cfg.set("seed", &s.to_string())?;
    }
    Ok(cfg)
}

/// Artifact directory bookkeeping: the resolved config and a manifest of
/// written files.
struct Out {
    dir: PathBuf,
    artifacts: Vec<String>,
}

impl Out {
    fn new(dir: PathBuf, cfg: &RunConfig) -> Result<Self> {
        cfg.write(&dir)?;
        Ok(Out { dir, artifacts: vec!["config.resolved".into()] })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.artifacts.push(name.into());
        Ok(())
    }

    fn finish(mut self, command: &str) -> Result<()> {
        self.artifacts.sort();
        self.artifacts.dedup();
        let m = json!({ "command": command, "artifacts": self.artifacts });
        fs::write(self.dir.join("run_manifest.json"), serde_json::to_vec_pretty(&m)?)?;
        Ok(())
    }
}

fn model_from(path: &Path) -> Result<PolicyModel> {
    load_checkpoint(path)?.model()
}

fn run(cmd: &Command) -> Result<()> {
    let common = cmd.common();
    let cfg = resolve(common)?;
    log::info!("resolved config for {}:\n{}", cmd.name(), cfg.resolved());
    let out_dir = common.out.clone().unwrap_or_else(|| PathBuf::from("out").join(cmd.name()));
    match cmd {
        Command::GenData(_) => {
            let gen = cfg.gen_config()?;
            let manifest = generate_dataset(&gen, &out_dir)?;
            let mut out = Out::new(out_dir, &cfg)?;
            out.artifacts.push(drive_attn::data::MANIFEST_FILE.into());
            out.artifacts.extend(manifest.episodes.iter().map(|e| e.dir.clone()));
            println!("{} episodes, {} train frames, {} val frames", manifest.episodes.len(), manifest.frames(Split::Train), manifest.frames(Split::Val));
            out.finish(cmd.name())
        }
        Command::Train { resume, .. } => {
            let tc = cfg.train_config()?;
            let mut out = Out::new(out_dir, &cfg)?;
            let report = train(&tc, &out.dir, *resume)?;
            out.artifacts.extend(["config.json", "metrics.jsonl", "best.ckpt", "final.ckpt"].map(String::from));
            out.write("train_report.json", &serde_json::to_vec_pretty(&report)?)?;
            println!("{}", serde_json::to_string(&report)?);
            out.finish(cmd.name())
        }
        Command::EvalOffline { checkpoint, split, .. } => {
            let split = match split.as_str() {
                "train" => Split::Train,
                "val" => Split::Val,
                s => return Err(Error::Config(format!("unknown split '{s}'"))),
            };
            let model = model_from(checkpoint)?;
            let root = cfg.data_root();
            let data = load_split(&root, &DatasetManifest::load(&root)?, split)?;
            let ev = evaluate_offline(&model, &data, cfg.get("train.batch_size")?)?;
            let text = serde_json::to_string_pretty(&ev)?;
            let mut out = Out::new(out_dir, &cfg)?;
            out.write("eval.json", text.as_bytes())?;
            println!("{text}");
            out.finish(cmd.name())
        }
        Command::Bench { checkpoint, .. } => {
            let suite_cfg = cfg.suite_config()?;
            let workers: usize = cfg.get("bench.workers")?;
            let suite = build_suite(&suite_cfg)?;
            let manifest_path = cfg.data_root().join(drive_attn::data::MANIFEST_FILE);
            if manifest_path.exists() {
                suite.check_hygiene(&DatasetManifest::load(&cfg.data_root())?)?;
            }
            let report = match checkpoint {
                Some(p) => run_model(&suite, &model_from(p)?, &p.display().to_string(), workers)?,
                None => run_expert(&suite, workers)?,
            };
            let mut out = Out::new(out_dir, &cfg)?;
            out.write("report.json", &serde_json::to_vec_pretty(&report)?)?;
            out.write("report.txt", report.to_text().as_bytes())?;
            print!("{}", report.to_text());
            out.finish(cmd.name())
        }
        Command::Explain { checkpoint, .. } => {
            let model = model_from(checkpoint)?;
            let root = cfg.data_root();
            let manifest = DatasetManifest::load(&root)?;
            let scenes: usize = cfg.get("explain.scenes")?;
            let picked: Vec<_> = manifest.episodes.iter().filter(|e| e.split == Split::Val).take(scenes).collect();
            if picked.is_empty() {
                return Err(Error::Config("dataset has no validation episodes to explain".into()));
            }
            let mut out = Out::new(out_dir, &cfg)?;
            let grid = model.grid().clone();
            let mut rows = Vec::new();
            for e in picked {
                let i = e.frames / 2;
                let frame = read_ppm(&root.join(&e.dir).join("frames").join(format!("{i:06}.ppm")))?;
                for cmd in HighLevelCommand::ALL {
                    let trace = model.forward(&frame.to_tensor(), cmd)?;
                    let alpha = trace.alpha.ok_or_else(|| Error::Config(format!("variant {} has no attention weights", model.variant())))?;
                    let name = overlay_name(&e.dir, i, cmd);
                    let over = overlay_frame(&frame, &grid, &alpha, cmd)?;
                    write_ppm(&out.dir.join(&name), &over)?;
                    out.artifacts.push(name.clone());
                    let rho = rank_correlation(&alpha, &decoded_region_shade(&frame, &over, &grid, cmd));
                    println!("{name}\tsteer {:+.4}\trank correlation {rho:.4}", trace.steer);
                    rows.push(json!({ "overlay": name, "command": cmd.name(), "steer": trace.steer, "alpha": alpha, "rank_correlation": rho }));
                }
            }
            out.write("explain.json", &serde_json::to_vec_pretty(&rows)?)?;
            out.finish(cmd.name())
        }
        Command::Gradcheck { samples, .. } => {
            let samples = match samples {
                Some(s) => *s,
                None => cfg.get("gradcheck.samples")?,
            };
            let g = model_gradient_check(cfg.model_config()?, cfg.command()?, samples, cfg.get("seed")?)?;
            println!(
                "max relative error {:.3e} (backbone {:.3e}, attention {:.3e}, dense {:.3e}) over {} coordinates",
                g.max_rel_error, g.backbone, g.attention, g.dense, g.coordinates
            );
            if common.out.is_some() {
                let mut out = Out::new(out_dir, &cfg)?;
                out.write("gradcheck.json", &serde_json::to_vec_pretty(&json!({ "max_rel_error": g.max_rel_error, "coordinates": g.coordinates }))?)?;
                out.finish(cmd.name())?;
            }
            if g.max_rel_error >= 1e-4 {
                return Err(Error::Numeric(format!("gradient check failed: {:.3e} >= 1e-4", g.max_rel_error)));
            }
            Ok(())
        }
        Command::GridDump(_) => {
            let grid = generate_grid(&cfg.model_config()?.grid)?;
            print!("{}", grid.dump());
            if common.out.is_some() {
                let mut out = Out::new(out_dir, &cfg)?;
                out.write("grid.tsv", grid.dump().as_bytes())?;
                out.finish(cmd.name())?;
            }
            Ok(())
        }
        Command::Ablate { remove, .. } => {
            let mut cfg = cfg;
            if let Some(r) = remove {
                cfg.set("ablate.remove", r)?;
            }
            let types = cfg.removed_types()?;
            let base = cfg.train_config()?;
            let suite = cfg.suite_config()?;
            let mut out = Out::new(out_dir, &cfg)?;
            let res = ablation_box_removal(&base, &types, &suite, &out.dir.join("train"), cfg.get("bench.workers")?)?;
            out.artifacts.push("train".into());
            out.write("ablation.json", &serde_json::to_vec_pretty(&res)?)?;
            out.write("report.txt", res.report.to_text().as_bytes())?;
            println!("{} regions after removal", res.regions);
            print!("{}", res.report.to_text());
            out.finish(cmd.name())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} command={} msg={:?}", e.kind(), cli.command.name(), msg);
            ExitCode::from(1)
        }
    }
}
