use drive_attn::policy::HighLevelCommand;
use drive_attn::sim::render::pixel_ground;
use drive_attn::sim::*;
use drive_attn::ErrorKind;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn clear() -> WeatherPreset {
    preset("clear").unwrap()
}

fn scenario(route: Route) -> Scenario {
    Scenario { route, weather: clear(), agents: vec![], seed: 0 }
}

#[test]
fn town_counts_follow_grid_arithmetic() {
    for (bx, by) in [(2, 2), (3, 2), (4, 4), (5, 3)] {
        let t = build_town(1, (bx, by)).unwrap();
        assert_eq!(t.nodes.len(), (bx + 1) * (by + 1));
        assert_eq!(t.segments.len(), bx * (by + 1) + by * (bx + 1));
    }
}

#[test]
fn towns_are_deterministic_and_seed_dependent() {
    let a = build_town(5, (4, 4)).unwrap().serialize();
    assert_eq!(a, build_town(5, (4, 4)).unwrap().serialize());
    assert_ne!(a, build_town(6, (4, 4)).unwrap().serialize());
}

#[test]
fn town_rejects_degenerate_specs() {
    assert_eq!(build_town(1, (0, 0)).unwrap_err().kind(), ErrorKind::Config);
    let narrow = TownConfig { lane_half_width: 0.8, ..TownConfig::default() };
    assert_eq!(build_town_with("n", 1, narrow).unwrap_err().kind(), ErrorKind::Config);
}

#[test]
fn town_parse_rejects_garbage() {
    assert_eq!(TownMap::parse("town v2\n").unwrap_err().kind(), ErrorKind::Corrupt);
    let t = build_town(1, (2, 2)).unwrap().serialize();
    let broken = t.replace("segment 0", "segment x");
    assert!(TownMap::parse(&broken).is_err());
}

#[test]
fn circle_radius_matches_analytic() {
    let c = DynamicsConfig::default();
    let mut s = VehicleState { x: 0.0, y: 0.0, heading: 0.0, speed: c.cruise_speed };
    let mut pts = Vec::new();
    for _ in 0..4000 {
        s = step_dynamics(&c, s, 0.5, 1.0, c.dt).state;
        pts.push((s.x, s.y));
    }
    // fit the center as the centroid over whole laps
    let expect = c.wheelbase / (0.5 * c.max_steer).tan();
    let (mx, my) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (mx, my) = (mx / pts.len() as f64, my / pts.len() as f64);
    assert!((mx).abs() < 0.5 && (my - expect).abs() < 0.5, "center {mx} {my}");
    for &(x, y) in &pts {
        let r = (x * x + (y - expect).powi(2)).sqrt();
        assert!((r - expect).abs() / expect < 0.01, "radius {r} vs {expect}");
    }
}

proptest! {
    #[test]
    fn mirrored_steering_mirrors_trajectory(steers in prop::collection::vec(-1.0f64..1.0, 1..200), y0 in -5.0f64..5.0, h0 in -1.0f64..1.0) {
        let c = DynamicsConfig::default();
        let mut a = VehicleState { x: 3.0, y: y0, heading: h0, speed: 1.0 };
        let mut b = VehicleState { x: 3.0, y: -y0, heading: -h0, speed: 1.0 };
        for &st in &steers {
            a = step_dynamics(&c, a, st, 1.0, c.dt).state;
            b = step_dynamics(&c, b, -st, 1.0, c.dt).state;
            prop_assert!((a.x - b.x).abs() < 1e-9 && (a.y + b.y).abs() < 1e-9);
            prop_assert!((a.heading + b.heading).abs() < 1e-9 && a.speed == b.speed);
        }
    }

    #[test]
    fn dynamics_keep_state_invariants(steer in -3.0f64..3.0, throttle in -1.0f64..2.0, h in -10.0f64..10.0, v in 0.0f64..5.0) {
        let c = DynamicsConfig::default();
        let s = step_dynamics(&c, VehicleState { x: 0.0, y: 0.0, heading: h, speed: v }, steer, throttle, 0.05).state;
        prop_assert!(s.speed >= 0.0);
        prop_assert!(s.heading > -std::f64::consts::PI && s.heading <= std::f64::consts::PI);
    }
}

fn straight_route() -> (TownMap, Route) {
    let t = build_town(1, (3, 3)).unwrap();
    let r = Route::from_nodes(&t, &[t.node_at(0, 1), t.node_at(1, 1), t.node_at(2, 1)]).unwrap();
    (t, r)
}

#[test]
fn expert_aligned_on_straight_is_zero() {
    let (_, r) = straight_route();
    let c = DynamicsConfig::default();
    let p = r.points[40];
    let s = VehicleState { x: p.x, y: p.y, heading: p.heading, speed: 2.0 };
    let e = expert_control(&ExpertConfig::default(), &c, &s, &r, 40);
    assert!(e.steer.abs() < 1e-6, "{}", e.steer);
    assert!(!e.failed);
}

#[test]
fn expert_offsets_give_opposite_steer() {
    let (_, r) = straight_route();
    let c = DynamicsConfig::default();
    let p = r.points[40];
    let (f, rt) = (p.heading.cos(), p.heading.sin());
    for d in [0.1, 0.5, 1.5] {
        let at = |o: f64| VehicleState { x: p.x - rt * o, y: p.y + f * o, heading: p.heading, speed: 2.0 };
        let l = expert_control(&ExpertConfig::default(), &c, &at(d), &r, 40).steer;
        let rr = expert_control(&ExpertConfig::default(), &c, &at(-d), &r, 40).steer;
        assert!(l < 0.0 && (l + rr).abs() < 1e-9, "{l} {rr}");
    }
    let far = VehicleState { x: p.x - rt * 4.0, y: p.y + f * 4.0, heading: p.heading, speed: 2.0 };
    assert!(expert_control(&ExpertConfig::default(), &c, &far, &r, 40).failed);
}

fn floyd_warshall(t: &TownMap) -> Vec<Vec<f64>> {
    let n = t.nodes.len();
    let mut d = vec![vec![f64::INFINITY; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0.0;
    }
    for s in &t.segments {
        d[s.a][s.b] = s.length;
        d[s.b][s.a] = s.length;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d
}

#[test]
fn planned_paths_are_shortest() {
    let t = build_town(3, (4, 4)).unwrap();
    let d = floyd_warshall(&t);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for k in 0..200 {
        let a = rng.random_range(0..t.nodes.len());
        let b = rng.random_range(0..t.nodes.len());
        if a == b {
            assert_eq!(plan_route(&t, a, b, k).unwrap_err().kind(), ErrorKind::Planning);
            continue;
        }
        let r = plan_route(&t, a, b, k).unwrap();
        let len: f64 = r.nodes.windows(2).map(|w| t.segments[t.segment_between(w[0], w[1]).unwrap()].length).sum();
        assert!((len - d[a][b]).abs() < 1e-4, "{len} vs {}", d[a][b]);
    }
}

#[test]
fn every_traversal_is_annotated_once() {
    let t = build_town(2, (4, 4)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in 0..60 {
        let a = rng.random_range(0..t.nodes.len());
        let b = (a + 1 + rng.random_range(0..t.nodes.len() - 1)) % t.nodes.len();
        let r = plan_route(&t, a, b, k).unwrap();
        assert_eq!(r.maneuvers.len(), r.nodes.len() - 2);
        // each maneuver forms one contiguous block of its command, and turn
        // commands appear nowhere else
        let mut blocks = Vec::new();
        for p in &r.points {
            if p.command != HighLevelCommand::FollowLane && blocks.last() != Some(&p.command) {
                blocks.push(p.command);
            } else if p.command == HighLevelCommand::FollowLane && blocks.last() != Some(&p.command) {
                blocks.push(p.command);
            }
        }
        let turns: Vec<_> = blocks.into_iter().filter(|c| *c != HighLevelCommand::FollowLane).collect();
        // consecutive identical maneuvers may merge when blocks are short
        assert!(turns.len() <= r.maneuvers.len());
        for m in &r.maneuvers {
            let (x, y) = t.node_pos(m.0);
            let near = r.points.iter().filter(|p| (p.x - x).abs() < 2.0 && (p.y - y).abs() < 2.0 || (p.x - x).hypot(p.y - y) < 6.5);
            assert!(near.clone().count() > 0);
            assert!(near.into_iter().all(|p| p.command == m.1));
        }
    }
}

#[test]
fn unreachable_or_invalid_goal_is_planning_error() {
    let t = build_town(1, (2, 2)).unwrap();
    assert_eq!(plan_route(&t, 0, 99, 0).unwrap_err().kind(), ErrorKind::Planning);
}

#[test]
fn render_is_deterministic() {
    let (t, r) = straight_route();
    let s = r.start_state(2.0);
    let cfg = RenderConfig::new(128, 72);
    let a = render(&t, &s, &cfg);
    let b = render(&t, &s, &cfg);
    assert_eq!(a.data(), b.data());
    assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn reversed_view_on_symmetric_straight_is_mirrored() {
    let cfg = TownConfig { block_len: 100.0, jitter: 0.0, ..TownConfig::default() };
    let t = build_town_with("sym", 0, cfg).unwrap();
    let y = t.ys[1] + 1.3;
    // dashes repeat every 6 m, so x = 49.5 is a mirror axis of the markings
    let fwd = VehicleState { x: 49.5, y, heading: 0.0, speed: 0.0 };
    let back = VehicleState { heading: std::f64::consts::PI, ..fwd };
    let rc = RenderConfig::new(96, 54);
    let a = render_scene(&t, &fwd, &[], &rc);
    let b = render_scene(&t, &back, &[], &rc);
    let (w, h) = (rc.width, rc.height);
    for v in 0..h {
        for u in 0..w {
            let i = (v * w + u) * 3;
            let j = (v * w + (w - 1 - u)) * 3;
            assert_eq!(a[i..i + 3], b[j..j + 3], "pixel {u},{v}");
        }
    }
}

#[test]
fn road_fraction_on_straight_is_moderate() {
    let (t, r) = straight_route();
    let rc = RenderConfig::new(128, 72);
    for idx in [20, 60, 100] {
        let p = r.points[idx];
        let s = VehicleState { x: p.x, y: p.y, heading: p.heading, speed: 2.0 };
        let mut road = 0;
        let mut ground = 0;
        for v in 0..rc.height {
            for u in 0..rc.width {
                if let Some((x, y)) = pixel_ground(&rc, &s, u, v) {
                    ground += 1;
                    road += t.drivable(x, y) as usize;
                }
            }
        }
        let frac = road as f64 / (rc.width * rc.height) as f64;
        assert!(ground > 0 && (0.2..=0.8).contains(&frac), "road fraction {frac}");
    }
}

#[test]
fn agents_are_drawn() {
    let (t, r) = straight_route();
    let s = r.start_state(2.0);
    let rc = RenderConfig::new(128, 72);
    let p = r.points[60];
    let agent = AgentBox { x: p.x, y: p.y, heading: p.heading, half_length: 2.0, half_width: 0.9 };
    assert_ne!(render_scene(&t, &s, &[agent], &rc), render_scene(&t, &s, &[], &rc));
}

#[test]
fn brightness_scales_mid_gray() {
    let p = WeatherPreset { name: "b".into(), brightness: 1.2, noise_sigma: 0.0, hue_shift_deg: 0.0, seen: true };
    let mut v = vec![0.5; 30];
    augment(&mut v, &p, 3, 0);
    assert!(v.iter().all(|x| (x - 0.6).abs() < 1e-15));
}

#[test]
fn noise_variance_matches_sigma() {
    let sigma = 0.05;
    let p = WeatherPreset { name: "n".into(), brightness: 1.0, noise_sigma: sigma, hue_shift_deg: 0.0, seen: true };
    let mut v = vec![0.5; 1_000_000];
    augment(&mut v, &p, 11, 7);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    assert!((var / (sigma * sigma) - 1.0).abs() < 0.05, "var {var}");
    let mut again = vec![0.5; 1_000_000];
    augment(&mut again, &p, 11, 7);
    assert_eq!(v, again);
}

#[test]
fn presets_split_four_seen_two_unseen() {
    let all = weather_presets();
    assert_eq!(all.iter().filter(|p| p.seen).count(), 4);
    assert_eq!(all.iter().filter(|p| !p.seen).count(), 2);
    assert_eq!(preset("fog").unwrap_err().kind(), ErrorKind::Config);
    for p in &all {
        let mut v: Vec<f64> = (0..300).map(|i| (i % 17) as f64 / 16.0).collect();
        augment(&mut v, p, 1, 2);
        assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
    }
}

#[test]
fn zero_budget_fails_with_no_completion() {
    let (t, r) = straight_route();
    let sim = Simulator::new(&t, RenderConfig::new(128, 72));
    let mut e = ExpertController::new(DynamicsConfig::default());
    let res = sim.run_episode(&mut e, &scenario(r), &EpisodeLimits::with_budget(0));
    assert!(!res.success);
    assert_eq!(res.completion, 0.0);
    assert_eq!(res.steps, 0);
}

struct Constant(f64);

impl Controller for Constant {
    fn needs_frame(&self) -> bool {
        false
    }
    fn control(&mut self, _: &Observation) -> drive_attn::Result<Control> {
        Ok(Control::new(self.0, 1.0))
    }
}

#[test]
fn leaving_the_road_terminates_immediately() {
    let (t, r) = straight_route();
    let sim = Simulator::new(&t, RenderConfig::new(128, 72));
    let mut first_off = None;
    let res = sim.run_observed(&mut Constant(-1.0), &scenario(r.clone()), &EpisodeLimits::with_budget(2000), &mut |_| Ok(()));
    assert_eq!(res.offroad_count, 1);
    assert!(!res.success);
    // replay the same controls open-loop to find the first off-road step
    let c = DynamicsConfig::default();
    let mut s = r.start_state(c.cruise_speed);
    for k in 0..2000 {
        let body = drive_attn::sim::dynamics::footprint(&c, &s);
        if body.iter().any(|&(x, y)| !t.drivable(x, y)) {
            first_off = Some(k);
            break;
        }
        s = step_dynamics(&c, s, -1.0, 1.0, c.dt).state;
    }
    assert_eq!(Some(res.steps), first_off);
}

struct Failing;

impl Controller for Failing {
    fn control(&mut self, _: &Observation) -> drive_attn::Result<Control> {
        Err(drive_attn::Error::Numeric("boom".into()))
    }
}

#[test]
fn controller_errors_fail_the_episode() {
    let (t, r) = straight_route();
    let sim = Simulator::new(&t, RenderConfig::new(64, 64));
    let res = sim.run_episode(&mut Failing, &scenario(r), &EpisodeLimits::with_budget(10));
    assert!(!res.success);
    assert!(res.failure.unwrap().contains("boom"));
}

fn random_routes(t: &TownMap, n: usize, seed: u64) -> Vec<Route> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    while out.len() < n {
        let a = rng.random_range(0..t.nodes.len());
        let b = rng.random_range(0..t.nodes.len());
        if a != b {
            out.push(plan_route(t, a, b, out.len() as u64).unwrap());
        }
    }
    out
}

#[test]
fn expert_succeeds_on_town_routes() {
    let t = build_town(1, (4, 4)).unwrap();
    let sim = Simulator::new(&t, RenderConfig::new(128, 72));
    for (k, r) in random_routes(&t, 40, 2).into_iter().enumerate() {
        let agents = spawn_oncoming(&t, &r, 2, k as u64).unwrap();
        let sc = Scenario { route: r, weather: clear(), agents, seed: k as u64 };
        let mut e = ExpertController::new(DynamicsConfig::default());
        let res = sim.run_episode(&mut e, &sc, &EpisodeLimits::with_budget(20_000));
        assert!(res.success, "{}: {:?}", sc.route.id, res.failure);
        assert_eq!(res.completion, 1.0);
        assert_eq!(res.offroad_count + res.collision_count + res.clamp_count, 0);
    }
}

#[test]
fn expert_succeeds_on_test_town() {
    let t = build_town_with("townb", 77, TownConfig { blocks: (3, 5), block_len: 40.0, jitter: 10.0, ..TownConfig::default() }).unwrap();
    let sim = Simulator::new(&t, RenderConfig::new(128, 72));
    for r in random_routes(&t, 20, 5) {
        let mut e = ExpertController::new(DynamicsConfig::default());
        let res = sim.run_episode(&mut e, &scenario(r), &EpisodeLimits::with_budget(20_000));
        assert!(res.success, "{:?}", res.failure);
    }
}

#[test]
fn noisy_expert_recovers_and_labels_clean_steer() {
    let t = build_town(1, (4, 4)).unwrap();
    let sim = Simulator::new(&t, RenderConfig::new(32, 18));
    let mut perturbed = 0;
    for (k, r) in random_routes(&t, 10, 3).into_iter().enumerate() {
        let mut e = NoisyExpert::new(DynamicsConfig::default(), k as u64);
        let res = sim.run_observed(&mut e, &scenario(r), &EpisodeLimits::with_budget(20_000), &mut |rec| {
            let label = rec.control.label.unwrap();
            assert!((-1.0..=1.0).contains(&label));
            perturbed += (label != rec.control.steer) as usize;
            Ok(())
        });
        assert!(res.success, "{:?}", res.failure);
    }
    assert!(perturbed > 100, "{perturbed}");
}

#[test]
fn episodes_are_deterministic() {
    let t = build_town(1, (4, 4)).unwrap();
    let r = plan_route(&t, 0, 24, 0).unwrap();
    let sim = Simulator::new(&t, RenderConfig::new(32, 18));
    let run = || {
        let mut frames = Vec::new();
        let agents = spawn_oncoming(&t, &r, 2, 4).unwrap();
        let sc = Scenario { route: r.clone(), weather: preset("wet").unwrap(), agents, seed: 4 };
        let res = sim.run_observed(&mut NoisyExpert::new(DynamicsConfig::default(), 1), &sc, &EpisodeLimits::with_budget(5000), &mut |rec| {
            frames.push(rec.frame.unwrap().data.clone());
            Ok(())
        });
        (res, frames)
    };
    let (a, fa) = run();
    let (b, fb) = run();
    assert_eq!(a, b);
    assert_eq!(fa, fb);
}

#[test]
fn expert_steps_drive_the_budget() {
    let (t, r) = straight_route();
    let sim = Simulator::new(&t, RenderConfig::new(32, 18));
    let n = sim.expert_steps(&scenario(r.clone())).unwrap();
    let expect = r.length() / DynamicsConfig::default().cruise_speed / 0.05;
    assert!((n as f64 - expect).abs() < 0.1 * expect, "{n} vs {expect}");
    let res = sim.run_episode(&mut ExpertController::new(DynamicsConfig::default()), &scenario(r), &EpisodeLimits::with_budget(n));
    assert!(res.success);
}
