use petgraph::algo::astar;
use petgraph::graph::{NodeIndex, UnGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dynamics::VehicleState;
use super::town::TownMap;
use crate::error::{bail, Result};
use crate::policy::HighLevelCommand;

/// Spacing of route samples, meters.
pub const ROUTE_STEP: f64 = 0.25;
/// Distance before an intersection at which its turn command becomes active.
pub const ANNOTATION_APPROACH: f64 = 12.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutePoint {
    pub x: f64,
    pub y: f64,
    /// Arc length from the route start.
    pub s: f64,
    pub heading: f64,
    pub command: HighLevelCommand,
}

/// Lane-center path through a sequence of adjacent nodes. The path starts
/// where the first node's intersection ends and stops where the last node's
/// begins; every intermediate node is one annotated maneuver.
#[derive(Clone, Debug, PartialEq)]
pub struct Route {
    pub id: String,
    pub nodes: Vec<usize>,
    pub points: Vec<RoutePoint>,
    /// `(node, command)` for each intermediate node.
    pub maneuvers: Vec<(usize, HighLevelCommand)>,
}

/// Nearest-point projection of a position onto a route.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub index: usize,
    pub distance: f64,
    /// Positive when the position is left of the path.
    pub lateral: f64,
}

fn unit(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let n = (dx * dx + dy * dy).sqrt();
    (dx / n, dy / n)
}

/// Turn command implied by leaving along `d_out` after arriving along `d_in`.
pub fn classify_turn(d_in: (f64, f64), d_out: (f64, f64)) -> Option<HighLevelCommand> {
    let cross = d_in.0 * d_out.1 - d_in.1 * d_out.0;
    let dot = d_in.0 * d_out.0 + d_in.1 * d_out.1;
    if cross > 0.5 {
        Some(HighLevelCommand::TurnLeft)
    } else if cross < -0.5 {
        Some(HighLevelCommand::TurnRight)
    } else if dot > 0.5 {
        Some(HighLevelCommand::GoStraight)
    } else {
        None
    }
}

fn push_line(pts: &mut Vec<(f64, f64)>, a: (f64, f64), b: (f64, f64)) {
    let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
    let n = (len / ROUTE_STEP).ceil().max(1.0) as usize;
    for i in 1..=n {
        let t = i as f64 / n as f64;
        pts.push((a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t));
    }
}

fn push_arc(pts: &mut Vec<(f64, f64)>, center: (f64, f64), radius: f64, a0: f64, sweep: f64) {
    let n = ((radius * sweep.abs()) / ROUTE_STEP).ceil().max(1.0) as usize;
    for i in 1..=n {
        let a = a0 + sweep * i as f64 / n as f64;
        pts.push((center.0 + radius * a.cos(), center.1 + radius * a.sin()));
    }
}

impl Route {
    pub fn from_nodes(town: &TownMap, nodes: &[usize]) -> Result<Route> {
        if nodes.len() < 2 {
            bail!(Planning, "a route needs at least two nodes");
        }
        for w in nodes.windows(2) {
            if town.segment_between(w[0], w[1]).is_none() {
                bail!(Planning, "nodes {} and {} are not adjacent", w[0], w[1]);
            }
        }
        let c = &town.config;
        let (s, lane) = (c.intersection_half, c.lane_half_width);
        let dirs: Vec<(f64, f64)> = nodes.windows(2).map(|w| unit(town.node_pos(w[0]), town.node_pos(w[1]))).collect();
        let right = |d: (f64, f64)| (d.1, -d.0);
        let at = |n: usize, d: (f64, f64), along: f64| {
            let (x, y) = town.node_pos(n);
            let r = right(d);
            (x + d.0 * along + r.0 * lane, y + d.1 * along + r.1 * lane)
        };

        let start = at(nodes[0], dirs[0], s);
        let mut pts = vec![start];
        // (index of box entry, index of box exit, command) per maneuver
        let mut spans = Vec::new();
        let mut maneuvers = Vec::new();
        for k in 1..nodes.len() {
            let d_in = dirs[k - 1];
            let entry = at(nodes[k], d_in, -s);
            let from = *pts.last().expect("non-empty");
            push_line(&mut pts, from, entry);
            if k == nodes.len() - 1 {
                break;
            }
            let d_out = dirs[k];
            let Some(cmd) = classify_turn(d_in, d_out) else {
                bail!(Planning, "route reverses at node {}", nodes[k]);
            };
            let first = pts.len() - 1;
            let exit = at(nodes[k], d_out, s);
            match cmd {
                HighLevelCommand::GoStraight => push_line(&mut pts, entry, exit),
                _ => {
                    let r_in = right(d_in);
                    let (radius, sign) = if cmd == HighLevelCommand::TurnRight { (s - lane, 1.0) } else { (s + lane, -1.0) };
                    let center = (entry.0 + sign * radius * r_in.0, entry.1 + sign * radius * r_in.1);
                    let a0 = (entry.1 - center.1).atan2(entry.0 - center.0);
                    let sweep = if cmd == HighLevelCommand::TurnRight { -std::f64::consts::FRAC_PI_2 } else { std::f64::consts::FRAC_PI_2 };
                    push_arc(&mut pts, center, radius, a0, sweep);
                    *pts.last_mut().expect("non-empty") = exit;
                }
            }
            spans.push((first, pts.len() - 1, cmd));
            maneuvers.push((nodes[k], cmd));
        }

        let mut points = Vec::with_capacity(pts.len());
        let mut acc = 0.0;
        for (i, &(x, y)) in pts.iter().enumerate() {
            if i > 0 {
                let p = pts[i - 1];
                acc += ((x - p.0).powi(2) + (y - p.1).powi(2)).sqrt();
            }
            let (a, b) = if i + 1 < pts.len() { (pts[i], pts[i + 1]) } else { (pts[i - 1], pts[i]) };
            points.push(RoutePoint { x, y, s: acc, heading: (b.1 - a.1).atan2(b.0 - a.0), command: HighLevelCommand::FollowLane });
        }
        for &(first, last, cmd) in &spans {
            let from = points[first].s - ANNOTATION_APPROACH;
            for p in points.iter_mut().take(last + 1) {
                if p.s >= from {
                    p.command = cmd;
                }
            }
        }
        let id = format!("{}:{}", town.name, nodes.iter().map(|n| n.to_string()).collect::<Vec<_>>().join("-"));
        Ok(Route { id, nodes: nodes.to_vec(), points, maneuvers })
    }

    pub fn length(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.s)
    }

    pub fn goal(&self) -> (f64, f64) {
        let p = self.points.last().expect("route has points");
        (p.x, p.y)
    }

    /// Vehicle pose at the route start, moving at `speed`.
    pub fn start_state(&self, speed: f64) -> VehicleState {
        let p = self.points[0];
        VehicleState { x: p.x, y: p.y, heading: p.heading, speed }
    }

    /// Closest route point searched around `hint` (from 10 m behind to 30 m
    /// ahead), which keeps projection monotone through self-approaching turns.
    pub fn project(&self, x: f64, y: f64, hint: usize) -> Projection {
        let back = (10.0 / ROUTE_STEP) as usize;
        let ahead = (30.0 / ROUTE_STEP) as usize;
        let lo = hint.saturating_sub(back);
        let hi = (hint + ahead).min(self.points.len() - 1);
        let mut best = (lo, f64::INFINITY);
        for i in lo..=hi {
            let p = &self.points[i];
            let d = (p.x - x).powi(2) + (p.y - y).powi(2);
            if d < best.1 {
                best = (i, d);
            }
        }
        let p = &self.points[best.0];
        let (f0, f1) = (p.heading.cos(), p.heading.sin());
        let lateral = f0 * (y - p.y) - f1 * (x - p.x);
        Projection { index: best.0, distance: best.1.sqrt(), lateral }
    }

    /// First route index at least `dist` meters of arc length past `index`.
    pub fn index_ahead(&self, index: usize, dist: f64) -> usize {
        let target = self.points[index].s + dist;
        let rest = &self.points[index..];
        index + rest.partition_point(|p| p.s < target).min(rest.len() - 1)
    }
}

/// Shortest node path between two nodes; edge lengths get a seeded
/// perturbation far below a millimeter so ties break reproducibly.
pub fn plan_route(town: &TownMap, start: usize, goal: usize, seed: u64) -> Result<Route> {
    let n = town.nodes.len();
    if start >= n || goal >= n {
        bail!(Planning, "node out of range ({} nodes)", n);
    }
    if start == goal {
        bail!(Planning, "start and goal coincide");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g: UnGraph<(), f64> = UnGraph::with_capacity(n, town.segments.len());
    for _ in 0..n {
        g.add_node(());
    }
    for s in &town.segments {
        g.add_edge(NodeIndex::new(s.a), NodeIndex::new(s.b), s.length + rng.random_range(0.0..1e-6));
    }
    let Some((_, path)) = astar(&g, NodeIndex::new(start), |v| v.index() == goal, |e| *e.weight(), |_| 0.0) else {
        bail!(Planning, "goal {} unreachable from {}", goal, start);
    };
    let nodes: Vec<usize> = path.into_iter().map(|v| v.index()).collect();
    Route::from_nodes(town, &nodes)
}
