use std::path::Path;

use crate::data::write_ppm;
use crate::error::{bail, Result};
use crate::policy::HighLevelCommand;
use crate::roi::{project_region, RoIGrid};
use crate::sim::Frame;

pub fn command_color(cmd: HighLevelCommand) -> [u8; 3] {
    match cmd {
        HighLevelCommand::FollowLane => [0, 255, 0],
        HighLevelCommand::TurnLeft => [255, 0, 0],
        HighLevelCommand::TurnRight => [0, 255, 255],
        HighLevelCommand::GoStraight => [255, 255, 0],
    }
}

/// `{episode}_{frame}_{command}.ppm`
pub fn overlay_name(episode: &str, frame: usize, cmd: HighLevelCommand) -> String {
    format!("{episode}_{frame:06}_{}.ppm", cmd.name())
}

/// Per-pixel sum of the α of every region covering the pixel, scaled so the
/// largest value is 1. Regions are projected to pixels the same way they are
/// projected to feature cells.
pub fn shade_map(width: usize, height: usize, grid: &RoIGrid, alpha: &[f64]) -> Result<Vec<f64>> {
    if alpha.len() != grid.len() {
        bail!(Contract, "{} attention weights for {} regions", alpha.len(), grid.len());
    }
    let sum: f64 = alpha.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || alpha.iter().any(|a| !(*a >= 0.0)) {
        bail!(Contract, "attention weights sum to {sum}, expected 1");
    }
    let mut shade = vec![0.0; width * height];
    for (r, &a) in grid.regions().iter().zip(alpha) {
        let rect = project_region(r, width, height);
        for y in rect.y0..rect.y1 {
            for v in &mut shade[y * width + rect.x0..y * width + rect.x1] {
                *v += a;
            }
        }
    }
    let max = shade.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        shade.iter_mut().for_each(|v| *v /= max);
    }
    Ok(shade)
}

/// The frame with the command color blended in at 50% opacity times the
/// pixel's shade.
pub fn overlay_frame(frame: &Frame, grid: &RoIGrid, alpha: &[f64], cmd: HighLevelCommand) -> Result<Frame> {
    let shade = shade_map(frame.width, frame.height, grid, alpha)?;
    let color = command_color(cmd);
    let mut data = frame.data.clone();
    for (p, px) in data.chunks_exact_mut(3).enumerate() {
        let o = 0.5 * shade[p];
        for c in 0..3 {
            px[c] = ((1.0 - o) * px[c] as f64 + o * color[c] as f64).round() as u8;
        }
    }
    Frame::new(frame.width, frame.height, data)
}

pub fn render_attention_overlay(frame: &Frame, grid: &RoIGrid, alpha: &[f64], cmd: HighLevelCommand, out_path: &Path) -> Result<()> {
    let f = overlay_frame(frame, grid, alpha, cmd)?;
    write_ppm(out_path, &f)
}

/// Mean shade inside each region recovered from an overlay and its base
/// frame: per pixel, the blend weight along the channel where the command
/// color differs most from the base.
pub fn decoded_region_shade(base: &Frame, overlay: &Frame, grid: &RoIGrid, cmd: HighLevelCommand) -> Vec<f64> {
    let color = command_color(cmd);
    let (w, h) = (base.width, base.height);
    let mut shade = vec![0.0; w * h];
    for p in 0..w * h {
        let (c, gap) = (0..3).map(|c| (c, color[c] as f64 - base.data[p * 3 + c] as f64)).max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).expect("3 channels");
        if gap.abs() > 0.0 {
            shade[p] = 2.0 * (overlay.data[p * 3 + c] as f64 - base.data[p * 3 + c] as f64) / gap;
        }
    }
    grid.regions()
        .iter()
        .map(|r| {
            let rect = project_region(r, w, h);
            let mut s = 0.0;
            for y in rect.y0..rect.y1 {
                s += shade[y * w + rect.x0..y * w + rect.x1].iter().sum::<f64>();
            }
            s / ((rect.x1 - rect.x0) * (rect.y1 - rect.y0)) as f64
        })
        .collect()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn rank_correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return if va == vb { 1.0 } else { 0.0 };
    }
    cov / (va * vb).sqrt()
}
