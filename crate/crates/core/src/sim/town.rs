use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Error, Result};

/// Geometry constants of a procedural town, in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct TownConfig {
    pub blocks: (usize, usize),
    pub block_len: f64,
    /// Block lengths are drawn from `block_len ± jitter`.
    pub jitter: f64,
    pub lane_half_width: f64,
    pub sidewalk_width: f64,
    /// Half size of the square drivable area around every node.
    pub intersection_half: f64,
    pub vehicle_half_width: f64,
}

impl Default for TownConfig {
    fn default() -> Self {
        TownConfig {
            blocks: (4, 4),
            block_len: 44.0,
            jitter: 8.0,
            lane_half_width: 2.0,
            sidewalk_width: 2.5,
            intersection_half: 8.0,
            vehicle_half_width: 0.9,
        }
    }
}

impl TownConfig {
    pub fn road_half_width(&self) -> f64 {
        2.0 * self.lane_half_width
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Node {
    pub x: f64,
    pub y: f64,
    pub col: usize,
    pub row: usize,
}

/// Straight road between two adjacent nodes, `a < b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub a: usize,
    pub b: usize,
    pub length: f64,
}

/// What lies on the ground at a world point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surface {
    Grass,
    Sidewalk,
    Asphalt,
    CenterDash,
    EdgeLine,
    Intersection,
    Crosswalk,
}

impl Surface {
    pub fn drivable(self) -> bool {
        !matches!(self, Surface::Grass | Surface::Sidewalk)
    }
}

/// Grid-of-blocks town: node columns at `xs`, rows at `ys`, every adjacent
/// pair joined by a two-lane road, right-hand traffic.
#[derive(Clone, Debug, PartialEq)]
pub struct TownMap {
    pub name: String,
    pub seed: u64,
    pub config: TownConfig,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub nodes: Vec<Node>,
    pub segments: Vec<Segment>,
}

pub fn build_town(seed: u64, blocks: (usize, usize)) -> Result<TownMap> {
    build_town_with("town", seed, TownConfig { blocks, ..TownConfig::default() })
}

pub fn build_town_with(name: &str, seed: u64, config: TownConfig) -> Result<TownMap> {
    let (bx, by) = config.blocks;
    if bx < 2 || by < 2 {
        bail!(Config, "town needs at least 2x2 blocks, got {}x{}", bx, by);
    }
    if config.lane_half_width <= config.vehicle_half_width {
        bail!(Config, "lane half-width {} must exceed vehicle half-width {}", config.lane_half_width, config.vehicle_half_width);
    }
    let min_block = 2.0 * config.intersection_half + 8.0;
    if config.block_len - config.jitter < min_block || config.jitter < 0.0 {
        bail!(Config, "blocks must stay longer than {} m", min_block);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut axis = |n: usize| {
        let mut v = vec![0.0];
        for _ in 0..n {
            let j = if config.jitter > 0.0 { rng.random_range(-config.jitter..=config.jitter) } else { 0.0 };
            let last = *v.last().expect("non-empty");
            v.push(last + config.block_len + j);
        }
        v
    };
    let xs = axis(bx);
    let ys = axis(by);
    let mut nodes = Vec::new();
    for (row, &y) in ys.iter().enumerate() {
        for (col, &x) in xs.iter().enumerate() {
            nodes.push(Node { x, y, col, row });
        }
    }
    let cols = xs.len();
    let mut segments = Vec::new();
    for row in 0..ys.len() {
        for col in 0..bx {
            let a = row * cols + col;
            segments.push(Segment { a, b: a + 1, length: xs[col + 1] - xs[col] });
        }
    }
    for row in 0..by {
        for col in 0..cols {
            let a = row * cols + col;
            segments.push(Segment { a, b: a + cols, length: ys[row + 1] - ys[row] });
        }
    }
    let town = TownMap { name: name.to_string(), seed, config, xs, ys, nodes, segments };
    town.validate()?;
    Ok(town)
}

fn nearest(sorted: &[f64], v: f64) -> usize {
    let i = sorted.partition_point(|&x| x < v);
    if i == 0 {
        0
    } else if i == sorted.len() || v - sorted[i - 1] <= sorted[i] - v {
        i - 1
    } else {
        i
    }
}

impl TownMap {
    pub fn node_at(&self, col: usize, row: usize) -> usize {
        row * self.xs.len() + col
    }

    pub fn node_pos(&self, n: usize) -> (f64, f64) {
        (self.nodes[n].x, self.nodes[n].y)
    }

    /// Segments incident to a node.
    pub fn branches(&self, n: usize) -> Vec<usize> {
        (0..self.segments.len()).filter(|&s| self.segments[s].a == n || self.segments[s].b == n).collect()
    }

    pub fn neighbors(&self, n: usize) -> Vec<(usize, f64)> {
        self.branches(n)
            .into_iter()
            .map(|s| {
                let seg = self.segments[s];
                (if seg.a == n { seg.b } else { seg.a }, seg.length)
            })
            .collect()
    }

    pub fn segment_between(&self, a: usize, b: usize) -> Option<usize> {
        let (lo, hi) = (a.min(b), a.max(b));
        self.segments.iter().position(|s| s.a == lo && s.b == hi)
    }

    /// Structural checks: connectivity, each branch joining one segment end,
    /// lane wide enough for the vehicle.
    pub fn validate(&self) -> Result<()> {
        if self.config.lane_half_width <= self.config.vehicle_half_width {
            bail!(Config, "lane narrower than vehicle");
        }
        for (i, s) in self.segments.iter().enumerate() {
            if s.a >= self.nodes.len() || s.b >= self.nodes.len() || s.a >= s.b {
                bail!(Config, "segment {} has invalid ends", i);
            }
            if self.segments.iter().filter(|o| o.a == s.a && o.b == s.b).count() != 1 {
                bail!(Config, "segment {} duplicated", i);
            }
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(n) = stack.pop() {
            for (m, _) in self.neighbors(n) {
                if !seen[m] {
                    seen[m] = true;
                    stack.push(m);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            bail!(Config, "town graph is disconnected");
        }
        Ok(())
    }

    /// Ground type at a world point.
    pub fn surface_at(&self, x: f64, y: f64) -> Surface {
        let c = &self.config;
        let hw = c.road_half_width();
        let s = c.intersection_half;
        let (ci, ri) = (nearest(&self.xs, x), nearest(&self.ys, y));
        let (dx, dy) = (x - self.xs[ci], y - self.ys[ri]);
        if dx.abs() <= s && dy.abs() <= s {
            // crosswalk bands across each arm, just inside the square edge
            let band = |along: f64, lateral: f64| {
                along.abs() >= s - 2.5 && along.abs() <= s - 0.5 && lateral.abs() <= hw && (lateral + 8.0).rem_euclid(1.0) < 0.5
            };
            if band(dx, dy) || band(dy, dx) {
                return Surface::Crosswalk;
            }
            return Surface::Intersection;
        }
        let x_span = x >= self.xs[0] && x <= *self.xs.last().expect("nodes");
        let y_span = y >= self.ys[0] && y <= *self.ys.last().expect("nodes");
        let marking = |lateral: f64, along: f64| {
            if lateral.abs() < 0.15 && along.rem_euclid(6.0) < 3.0 {
                Surface::CenterDash
            } else if lateral.abs() > hw - 0.35 {
                Surface::EdgeLine
            } else {
                Surface::Asphalt
            }
        };
        if x_span && dy.abs() <= hw {
            return marking(dy, x);
        }
        if y_span && dx.abs() <= hw {
            return marking(dx, y);
        }
        let walk = hw + c.sidewalk_width;
        let near_node = dx.abs() <= s + c.sidewalk_width && dy.abs() <= s + c.sidewalk_width;
        if near_node || (x_span && dy.abs() <= walk) || (y_span && dx.abs() <= walk) {
            return Surface::Sidewalk;
        }
        Surface::Grass
    }

    pub fn drivable(&self, x: f64, y: f64) -> bool {
        self.surface_at(x, y).drivable()
    }

    /// Versioned line-oriented text form.
    pub fn serialize(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        s.push_str("town v1\n");
        s.push_str(&format!("name {}\nseed {}\n", self.name, self.seed));
        s.push_str(&format!("blocks {} {}\n", c.blocks.0, c.blocks.1));
        s.push_str(&format!(
            "geometry {:?} {:?} {:?} {:?} {:?} {:?}\n",
            c.block_len, c.jitter, c.lane_half_width, c.sidewalk_width, c.intersection_half, c.vehicle_half_width
        ));
        for (i, n) in self.nodes.iter().enumerate() {
            s.push_str(&format!("node {} {} {} {:?} {:?}\n", i, n.col, n.row, n.x, n.y));
        }
        for (i, seg) in self.segments.iter().enumerate() {
            s.push_str(&format!("segment {} {} {} {:?}\n", i, seg.a, seg.b, seg.length));
        }
        s
    }

    pub fn parse(text: &str) -> Result<TownMap> {
        let bad = |line: &str| Error::Corrupt(format!("bad town line '{line}'"));
        let mut lines = text.lines();
        if lines.next() != Some("town v1") {
            bail!(Corrupt, "unsupported town format");
        }
        let mut name = String::new();
        let mut seed = 0;
        let mut config = TownConfig::default();
        let mut nodes = Vec::new();
        let mut segments = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            let num = |i: usize| -> Result<f64> { f.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| bad(line)) };
            let int = |i: usize| -> Result<usize> { f.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| bad(line)) };
            match f.first().copied() {
                Some("name") => name = f.get(1).ok_or_else(|| bad(line))?.to_string(),
                Some("seed") => seed = f.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| bad(line))?,
                Some("blocks") => config.blocks = (int(1)?, int(2)?),
                Some("geometry") => {
                    config.block_len = num(1)?;
                    config.jitter = num(2)?;
                    config.lane_half_width = num(3)?;
                    config.sidewalk_width = num(4)?;
                    config.intersection_half = num(5)?;
                    config.vehicle_half_width = num(6)?;
                }
                Some("node") if int(1)? == nodes.len() => nodes.push(Node { col: int(2)?, row: int(3)?, x: num(4)?, y: num(5)? }),
                Some("segment") if int(1)? == segments.len() => segments.push(Segment { a: int(2)?, b: int(3)?, length: num(4)? }),
                Some(_) => return Err(bad(line)),
                None => {}
            }
        }
        let cols = config.blocks.0 + 1;
        let xs = nodes.iter().take(cols).map(|n| n.x).collect();
        let ys = nodes.iter().step_by(cols).map(|n| n.y).collect();
        let town = TownMap { name, seed, config, xs, ys, nodes, segments };
        if town.nodes.len() != cols * (town.config.blocks.1 + 1) {
            bail!(Corrupt, "node count does not match blocks");
        }
        town.validate()?;
        Ok(town)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_counts() {
        let t = build_town(1, (2, 2)).unwrap();
        assert_eq!(t.segments.len(), 12);
        assert_eq!(t.nodes.len(), 9);
        assert_eq!(t.branches(t.node_at(1, 1)).len(), 4);
        assert_eq!(t.branches(t.node_at(0, 0)).len(), 2);
    }

    #[test]
    fn degenerate_size_rejected() {
        assert_eq!(build_town(1, (1, 3)).unwrap_err().kind(), crate::ErrorKind::Config);
    }

    #[test]
    fn serialization_round_trips() {
        let t = build_town(7, (3, 2)).unwrap();
        let s = t.serialize();
        assert_eq!(s, build_town(7, (3, 2)).unwrap().serialize());
        assert_eq!(TownMap::parse(&s).unwrap(), t);
    }

    #[test]
    fn surfaces() {
        let t = build_town(3, (2, 2)).unwrap();
        let (x, y) = t.node_pos(t.node_at(1, 1));
        assert!(matches!(t.surface_at(x, y), Surface::Intersection));
        let mid = (x + t.xs[2]) / 2.0;
        assert!(t.drivable(mid, y + 1.5));
        assert_eq!(t.surface_at(mid, y + 5.0), Surface::Sidewalk);
        assert_eq!(t.surface_at(mid, y + 15.0), Surface::Grass);
    }
}
