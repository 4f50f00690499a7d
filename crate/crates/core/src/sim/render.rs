use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dynamics::{frame_vectors, VehicleState};
use super::town::{Surface, TownMap};
use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// 8-bit RGB image, row-major `[H, W, 3]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Frame> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            bail!(Geometry, "frame {}x{} needs {} bytes, got {}", width, height, width * height * 3, data.len());
        }
        Ok(Frame { width, height, data })
    }

    /// Quantizes `[H, W, 3]` values in `[0, 1]`.
    pub fn from_unit(width: usize, height: usize, values: &[f64]) -> Frame {
        let data = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Frame { width, height, data }
    }

    pub fn to_unit(&self) -> Vec<f64> {
        self.data.iter().map(|&b| b as f64 / 255.0).collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, 3], self.to_unit()).expect("frame dims are consistent")
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    /// Fraction of rows above the horizon.
    pub horizon: f64,
    /// Ground distance seen by the bottom row, meters.
    pub d_near: f64,
    /// Ground beyond this distance fades to haze.
    pub d_far: f64,
    /// tan(horizontal field of view / 2).
    pub half_fov_tan: f64,
    /// Camera position ahead of the rear axle.
    pub camera_forward: f64,
}

impl RenderConfig {
    pub fn new(width: usize, height: usize) -> Self {
        RenderConfig { width, height, horizon: 0.3, d_near: 2.0, d_far: 30.0, half_fov_tan: 1.0, camera_forward: 2.0 }
    }
}

/// Oriented box drawn on the ground plane (another vehicle).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentBox {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl AgentBox {
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (f, r) = frame_vectors(self.heading);
        let (dx, dy) = (px - self.x, py - self.y);
        let along = dx * f.0 + dy * f.1;
        let side = dx * r.0 + dy * r.1;
        along.abs() <= self.half_length && side.abs() <= self.half_width
    }
}

const SKY: [f64; 3] = [0.55, 0.70, 0.90];
const HAZE: [f64; 3] = [0.70, 0.74, 0.78];
const AGENT: [f64; 3] = [0.80, 0.15, 0.12];

fn surface_color(s: Surface) -> [f64; 3] {
    match s {
        Surface::Grass => [0.30, 0.52, 0.24],
        Surface::Sidewalk => [0.66, 0.63, 0.58],
        Surface::Asphalt => [0.30, 0.30, 0.32],
        Surface::CenterDash => [0.92, 0.80, 0.20],
        Surface::EdgeLine => [0.93, 0.93, 0.93],
        Surface::Intersection => [0.38, 0.37, 0.40],
        Surface::Crosswalk => [0.86, 0.86, 0.86],
    }
}

/// Ground point seen through pixel `(u, v)`, or `None` above the horizon or
/// beyond the haze distance.
pub fn pixel_ground(cfg: &RenderConfig, state: &VehicleState, u: usize, v: usize) -> Option<(f64, f64)> {
    let v_h = (cfg.horizon * cfg.height as f64).round();
    let t = (v as f64 + 0.5 - v_h) / (cfg.height as f64 - v_h);
    if t <= 0.0 {
        return None;
    }
    let d = cfg.d_near / t;
    if d > cfg.d_far {
        return None;
    }
    // symmetric about the image center: pixel u and W-1-u get opposite signs
    let w = cfg.width as f64;
    let lat = (2.0 * u as f64 + 1.0 - w) / w * d * cfg.half_fov_tan;
    let (f, r) = frame_vectors(state.heading);
    let cx = state.x + f.0 * cfg.camera_forward;
    let cy = state.y + f.1 * cfg.camera_forward;
    Some((cx + f.0 * d + r.0 * lat, cy + f.1 * d + r.1 * lat))
}

/// Forward-facing pseudo-perspective view, values in `[0, 1]`, `[H, W, 3]`.
pub fn render_scene(town: &TownMap, state: &VehicleState, agents: &[AgentBox], cfg: &RenderConfig) -> Vec<f64> {
    let (w, h) = (cfg.width, cfg.height);
    let mut out = vec![0.0; w * h * 3];
    let v_h = (cfg.horizon * h as f64).round() as usize;
    for v in 0..h {
        for u in 0..w {
            let color = if v < v_h {
                SKY
            } else {
                match pixel_ground(cfg, state, u, v) {
                    None => HAZE,
                    Some((x, y)) => {
                        if agents.iter().any(|a| a.contains(x, y)) {
                            AGENT
                        } else {
                            surface_color(town.surface_at(x, y))
                        }
                    }
                }
            };
            out[(v * w + u) * 3..(v * w + u) * 3 + 3].copy_from_slice(&color);
        }
    }
    out
}

/// Static-world render as a tensor.
pub fn render(town: &TownMap, state: &VehicleState, cfg: &RenderConfig) -> Tensor {
    Tensor::new(vec![cfg.height, cfg.width, 3], render_scene(town, state, &[], cfg)).expect("render dims")
}

/// Photometric weather analog applied after rendering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeatherPreset {
    pub name: String,
    pub brightness: f64,
    pub noise_sigma: f64,
    pub hue_shift_deg: f64,
    /// Whether the preset is used for training data.
    pub seen: bool,
}

impl WeatherPreset {
    fn new(name: &str, brightness: f64, noise_sigma: f64, hue_shift_deg: f64, seen: bool) -> Self {
        WeatherPreset { name: name.into(), brightness, noise_sigma, hue_shift_deg, seen }
    }

    pub fn is_identity(&self) -> bool {
        self.brightness == 1.0 && self.noise_sigma == 0.0 && self.hue_shift_deg == 0.0
    }
}

/// Four training presets followed by two held-out ones.
pub fn weather_presets() -> Vec<WeatherPreset> {
    vec![
        WeatherPreset::new("clear", 1.0, 0.0, 0.0, true),
        WeatherPreset::new("overcast", 0.85, 0.01, -8.0, true),
        WeatherPreset::new("wet", 0.72, 0.02, 4.0, true),
        WeatherPreset::new("dusk", 1.1, 0.0, 16.0, true),
        WeatherPreset::new("night", 0.5, 0.03, -4.0, false),
        WeatherPreset::new("storm", 0.8, 0.04, -28.0, false),
    ]
}

pub fn preset(name: &str) -> Result<WeatherPreset> {
    match weather_presets().into_iter().find(|p| p.name == name) {
        Some(p) => Ok(p),
        None => bail!(Config, "unknown weather preset '{}'", name),
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

/// Applies hue shift, brightness scale and Gaussian noise in place, then
/// clamps to `[0, 1]`. Noise is seeded by `(seed, index)`. The identity
/// preset leaves values untouched.
pub fn augment(values: &mut [f64], preset: &WeatherPreset, seed: u64, index: u64) {
    if preset.is_identity() {
        return;
    }
    if preset.hue_shift_deg != 0.0 {
        for px in values.chunks_exact_mut(3) {
            let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
            let (r, g, b) = hsv_to_rgb(h + preset.hue_shift_deg, s, v);
            px.copy_from_slice(&[r, g, b]);
        }
    }
    if preset.brightness != 1.0 {
        values.iter_mut().for_each(|v| *v *= preset.brightness);
    }
    if preset.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let normal = Normal::new(0.0, preset.noise_sigma).expect("finite sigma");
        values.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    values.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2, 0.5, 0.7), (0.9, 0.1, 0.1), (0.3, 0.3, 0.3), (0.0, 0.8, 0.2)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_preset_is_noop() {
        let mut v = vec![0.1, 0.5, 0.9];
        augment(&mut v, &preset("clear").unwrap(), 1, 2);
        assert_eq!(v, vec![0.1, 0.5, 0.9]);
    }

    #[test]
    fn quantization_round_trip() {
        let f = Frame::new(2, 1, vec![0, 128, 255, 7, 8, 9]).unwrap();
        assert_eq!(Frame::from_unit(2, 1, &f.to_unit()), f);
    }
}
