use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_suite, run_model, BenchmarkReport, Condition, SuiteConfig, Task};
use crate::error::{bail, Result};
use crate::policy::{ModelConfig, Variant};
use crate::roi::{generate_grid, BoxType, GridConfig};
use crate::train::{load_checkpoint, train, TrainConfig, TrainReport, BEST_CHECKPOINT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub holds: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub labels: Vec<String>,
    /// Conditions present in every report; all rates are taken over these.
    pub conditions: Vec<Condition>,
    /// Per task, success in percent for each label.
    pub rows: Vec<(Task, Vec<f64>)>,
    pub averages: Vec<f64>,
    pub verdicts: Vec<Verdict>,
}

/// Success of `task` pooled over `conds`.
pub fn task_rate_on(report: &BenchmarkReport, task: Task, conds: &[Condition]) -> f64 {
    let (n, s) = report
        .cells
        .iter()
        .filter(|c| c.task == task && conds.contains(&c.condition))
        .fold((0, 0), |(n, s), c| (n + c.episodes, s + c.successes));
    if n == 0 {
        0.0
    } else {
        100.0 * s as f64 / n as f64
    }
}

/// Training setup with the architecture fields blanked, so configs that
/// differ only in variant or grid compare equal.
fn data_and_schedule(cfg: &TrainConfig) -> TrainConfig {
    let m = &cfg.model;
    TrainConfig { model: ModelConfig { input: m.input, backbone: m.backbone.clone(), dense: m.dense.clone(), ..ModelConfig::default() }, ..cfg.clone() }
}

fn is_full_grid(m: &ModelConfig) -> bool {
    m.regions.is_none() && m.grid == GridConfig::default()
}

impl Comparison {
    fn index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn rate(&self, label: &str, task: Task) -> Option<f64> {
        let i = self.index(label)?;
        self.rows.iter().find(|(t, _)| *t == task).map(|(_, r)| r[i])
    }

    /// Cell-wise difference `a - b` over tasks.
    pub fn difference(&self, a: &str, b: &str) -> Option<Vec<(Task, f64)>> {
        let (i, j) = (self.index(a)?, self.index(b)?);
        Some(self.rows.iter().map(|(t, r)| (*t, r[i] - r[j])).collect())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<20}", "task");
        for l in &self.labels {
            let _ = write!(s, "{:>18}", l);
        }
        s.push('\n');
        for (t, r) in &self.rows {
            let _ = write!(s, "{:<20}", t.name());
            for v in r {
                let _ = write!(s, "{:>17.1}%", v);
            }
            s.push('\n');
        }
        let _ = write!(s, "{:<20}", "average");
        for v in &self.averages {
            let _ = write!(s, "{:>17.1}%", v);
        }
        s.push('\n');
        for v in &self.verdicts {
            let _ = writeln!(s, "{} {}: {}", if v.holds { "HOLDS" } else { "FAILS" }, v.name, v.detail);
        }
        s
    }
}

/// Joint table of labelled runs plus directional verdicts for the pairs
/// that are present. Refuses runs whose data, seed or schedule differ, and
/// reports from different suites.
pub fn compare_variants(runs: &[(String, TrainConfig, BenchmarkReport)]) -> Result<Comparison> {
    let Some((_, first_cfg, first)) = runs.first() else {
        bail!(Config, "nothing to compare");
    };
    let base = data_and_schedule(first_cfg);
    let mut conditions = first.conditions();
    for (label, cfg, rep) in runs {
        if data_and_schedule(cfg) != base {
            bail!(Config, "run {label} was trained with a different data or training setup; comparison refused");
        }
        conditions.retain(|c| rep.conditions().contains(c));
    }
    if conditions.is_empty() {
        bail!(Config, "reports share no benchmark condition");
    }
    for (label, _, rep) in runs {
        let routes = |r: &BenchmarkReport| {
            r.episodes.iter().filter(|e| conditions.contains(&e.condition)).map(|e| (e.task, e.condition, e.route_id.clone())).collect::<Vec<_>>()
        };
        if routes(rep) != routes(first) {
            bail!(Config, "run {label} was benchmarked on a different suite");
        }
    }
    let labels: Vec<String> = runs.iter().map(|(l, _, _)| l.clone()).collect();
    let rows: Vec<(Task, Vec<f64>)> =
        Task::ALL.iter().map(|&t| (t, runs.iter().map(|(_, _, r)| task_rate_on(r, t, &conditions)).collect())).collect();
    let averages = (0..runs.len()).map(|i| rows.iter().map(|(_, r)| r[i]).sum::<f64>() / rows.len() as f64).collect();
    let mut cmp = Comparison { labels, conditions, rows, averages, verdicts: Vec::new() };

    let find = |v: Variant| runs.iter().position(|(_, c, _)| c.model.variant == v && is_full_grid(&c.model));
    if let (Some(f), Some(n)) = (find(Variant::FullAttention), find(Variant::NoAttention)) {
        let (a, b) = (cmp.averages[f], cmp.averages[n]);
        cmp.verdicts.push(Verdict {
            name: "full_attention_vs_no_attention".into(),
            holds: a >= b,
            detail: format!("average success {a:.1}% vs {b:.1}%"),
        });
    }
    if let (Some(f), Some(i)) = (find(Variant::FullAttention), find(Variant::IndependentRoi)) {
        let rate = |k: usize, t: Task| cmp.rows.iter().find(|(x, _)| *x == t).map_or(0.0, |(_, r)| r[k]);
        let (fs, is) = (rate(f, Task::Straight), rate(i, Task::Straight));
        let (ft, it) = (rate(f, Task::OneTurn), rate(i, Task::OneTurn));
        cmp.verdicts.push(Verdict {
            name: "independent_roi_straight".into(),
            holds: (fs - is).abs() <= 10.0,
            detail: format!("straight {is:.1}% vs full {fs:.1}%, allowed gap 10"),
        });
        cmp.verdicts.push(Verdict {
            name: "independent_roi_one_turn".into(),
            holds: ft - it >= 20.0,
            detail: format!("one turn {it:.1}% vs full {ft:.1}%, required gap 20"),
        });
    }
    Ok(cmp)
}

/// `base` with the given box types removed from its grid.
pub fn ablated_config(base: &TrainConfig, remove: &[BoxType]) -> Result<TrainConfig> {
    if base.model.regions.is_some() {
        bail!(Config, "box removal needs a generated grid, not an explicit region list");
    }
    let mut grid = base.model.grid.clone();
    for &t in remove {
        if t == BoxType::Full {
            bail!(Config, "the full-image box is not part of the grid");
        }
        grid = grid.without(t);
    }
    if grid.total() == 0 {
        bail!(Config, "removing {:?} leaves no regions", remove.iter().map(|t| t.name()).collect::<Vec<_>>());
    }
    generate_grid(&grid)?;
    let mut cfg = base.clone();
    cfg.model.grid = grid;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub removed: Vec<BoxType>,
    pub regions: usize,
    pub train: TrainReport,
    pub report: BenchmarkReport,
}

/// Trains on a grid lacking `remove` (resuming an existing run in
/// `out_dir`) and benchmarks the best checkpoint in the training town.
pub fn ablation_box_removal(base: &TrainConfig, remove: &[BoxType], suite: &SuiteConfig, out_dir: &Path, workers: usize) -> Result<AblationResult> {
    let cfg = ablated_config(base, remove)?;
    let suite_cfg = suite.clone().town_a_only();
    suite_cfg.validate()?;
    let train_report = train(&cfg, out_dir, true)?;
    let model = load_checkpoint(&out_dir.join(BEST_CHECKPOINT))?.model()?;
    let suite = build_suite(&suite_cfg)?;
    let label = format!("no_{}", remove.iter().map(|t| t.name()).collect::<Vec<_>>().join("_"));
    let report = run_model(&suite, &model, &label, workers)?;
    Ok(AblationResult { removed: remove.to_vec(), regions: cfg.model.grid.total(), train: train_report, report })
}
