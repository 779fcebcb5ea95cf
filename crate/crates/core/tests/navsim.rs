use std::f64::consts::PI;

use dynexit::navsim::{
    cosine_metrics, eval_closed_loop, expert_rollout, gen_world, load_dataset, make_dataset, render, waypoint_to_world,
    world_to_waypoint, ClosedLoopReport, ExpertPolicy, Policy, Pose, Segment, SimConfig, StepContext, World,
};
use dynexit::decoder::Prediction;
use dynexit::tensor::Tensor;
use dynexit::Result;
use proptest::prelude::*;

fn cfg() -> SimConfig {
    SimConfig::default()
}

#[test]
fn world_generation_is_deterministic() {
    assert_eq!(gen_world(11, &cfg()).unwrap(), gen_world(11, &cfg()).unwrap());
    assert_ne!(gen_world(11, &cfg()).unwrap(), gen_world(12, &cfg()).unwrap());
}

/// Independent flood fill over a fine point grid, using only obstacle distances.
fn flood_connected(world: &World, radius: f64) -> bool {
    let res = 0.1;
    let n = (world.size / res) as usize;
    let obstacles = world.obstacles();
    let free = |i: usize, j: usize| {
        let p = [(i as f64 + 0.5) * res, (j as f64 + 0.5) * res];
        obstacles.iter().all(|s| dynexit::navsim::point_segment_distance(p, s) >= radius)
    };
    let cell = |p: [f64; 2]| ((p[0] / res) as usize, (p[1] / res) as usize);
    let (s, g) = (cell(world.start.position()), cell(world.goal));
    let mut seen = vec![false; n * n];
    let mut stack = vec![s];
    seen[s.1 * n + s.0] = true;
    while let Some((i, j)) = stack.pop() {
        if (i, j) == g {
            return true;
        }
        for (di, dj) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
            let (x, y) = (i as i64 + di, j as i64 + dj);
            if x < 0 || y < 0 || x >= n as i64 || y >= n as i64 {
                continue;
            }
            let (x, y) = (x as usize, y as usize);
            if !seen[y * n + x] && free(x, y) {
                seen[y * n + x] = true;
                stack.push((x, y));
            }
        }
    }
    false
}

#[test]
fn hundred_worlds_are_connected_with_distant_goals() {
    let c = cfg();
    let mut frames = Vec::new();
    for seed in 0..100 {
        let w = gen_world(seed, &c).unwrap();
        let d = (w.goal[0] - w.start.x).hypot(w.goal[1] - w.start.y);
        assert!(d >= 5.0, "seed {seed}: goal {d} m from start");
        assert!(w.clearance_at(w.start.position()) >= c.clearance);
        assert!(w.clearance_at(w.goal) >= c.clearance);
        assert!(flood_connected(&w, c.agent_radius), "seed {seed} not connected");
        if seed < 20 {
            frames.push(expert_rollout(&w, 0, &c).unwrap().len());
        }
    }
    let mean = frames.iter().sum::<usize>() as f64 / frames.len() as f64;
    assert!((40.0..=125.0).contains(&mean), "mean episode length {mean} frames");
}

#[test]
fn facing_a_wall_gives_uniform_columns() {
    let world = World {
        seed: 0,
        size: 10.0,
        walls: vec![Segment::new([3.0, -50.0], [3.0, 50.0])],
        landmarks: vec![],
        start: Pose::new(0.0, 0.0, 0.0),
        goal: [1.0, 0.0],
    };
    let img = render(&world, &Pose::new(1.0, 0.0, 0.0), 32, 90.0);
    for x in 1..32 {
        for y in 0..32 {
            for c in 0..3 {
                assert_eq!(img.get(y, x, c), img.get(y, 0, c), "column {x} row {y}");
            }
        }
    }
}

#[test]
fn rendering_is_deterministic_and_yaw_periodic() {
    let c = cfg();
    let w = gen_world(3, &c).unwrap();
    for yaw in [0.0, 0.5, 1.0, -1.25, 2.5] {
        let p = Pose::new(w.start.x, w.start.y, yaw);
        let a = render(&w, &p, 32, 90.0);
        assert_eq!(a, render(&w, &p, 32, 90.0));
        assert_eq!(a, render(&w, &Pose::new(p.x, p.y, yaw + 2.0 * PI), 32, 90.0));
    }
}

#[test]
fn straight_corridor_has_constant_actions() {
    let c = cfg();
    let world = World {
        seed: 0,
        size: 8.0,
        walls: vec![
            Segment::new([0.0, 0.0], [8.0, 0.0]),
            Segment::new([8.0, 0.0], [8.0, 8.0]),
            Segment::new([8.0, 8.0], [0.0, 8.0]),
            Segment::new([0.0, 8.0], [0.0, 0.0]),
        ],
        landmarks: vec![],
        start: Pose::new(1.125, 4.125, 0.0),
        goal: [7.125, 4.125],
    };
    let ep = expert_rollout(&world, 0, &c).unwrap();
    for a in &ep.actions {
        assert!((a[0] - 1.0).abs() < 1e-12 && a[1].abs() < 1e-12);
    }
    for (t, ws) in ep.waypoints.iter().enumerate() {
        for w in ws {
            assert!(w[1].abs() < 1e-12, "t={t}: waypoint off axis {w:?}");
            assert!(w[0] >= 0.0);
        }
    }
}

#[test]
fn episode_invariants() {
    let c = cfg();
    for seed in 0..5 {
        let ep = expert_rollout(&gen_world(seed, &c).unwrap(), 0, &c).unwrap();
        assert_eq!(ep.actions.len(), ep.poses.len() - 1);
        let steps: f64 = ep.poses.windows(2).map(|w| (w[1].x - w[0].x).hypot(w[1].y - w[0].y)).sum();
        assert!((steps - ep.length).abs() < 1e-9);
        let last = ep.poses.last().unwrap();
        assert!((last.x - ep.world.goal[0]).hypot(last.y - ep.world.goal[1]) < 1e-9);
        for t in 0..ep.len() {
            for (h, w) in ep.waypoints[t].iter().enumerate() {
                let target = ep.poses[(t + h + 1).min(ep.len() - 1)];
                let back = waypoint_to_world(&ep.poses[t], *w);
                assert!((back[0] - target.x).abs() < 1e-9 && (back[1] - target.y).abs() < 1e-9);
            }
        }
    }
}

proptest! {
    #[test]
    fn waypoint_round_trip(x in -20.0f64..20.0, y in -20.0f64..20.0, yaw in -PI..PI, tx in -20.0f64..20.0, ty in -20.0f64..20.0) {
        let p = Pose::new(x, y, yaw);
        let w = world_to_waypoint(&p, [tx, ty]);
        let back = waypoint_to_world(&p, w);
        prop_assert!((back[0] - tx).abs() < 1e-12 && (back[1] - ty).abs() < 1e-12);
    }
}

#[test]
fn dataset_split_and_sample_validity() {
    let c = cfg();
    assert!(make_dataset(4, 1, 0.8, &c).is_err());
    let ds = make_dataset(10, 7, 0.8, &c).unwrap();
    assert_eq!((ds.manifest.train.len(), ds.manifest.test.len()), (8, 2));
    assert!(ds.manifest.train.iter().all(|i| !ds.manifest.test.contains(i)));
    for s in ds.train.iter().chain(&ds.test) {
        let ep = &ds.episodes[s.episode];
        assert!(s.t >= c.past_frames && s.t + s.d <= ep.len() - 1 && s.t + c.n_waypoints <= ep.len() - 1);
        assert!(s.d >= c.d_min && s.d <= c.d_max);
        assert_eq!(s.input.frames.len(), c.past_frames + 1);
        assert_eq!(s.input.goal, ep.images[s.t + s.d]);
    }
    assert!(ds.train.iter().all(|s| ds.manifest.train.contains(&s.episode)));
    assert!(ds.test.iter().all(|s| ds.manifest.test.contains(&s.episode)));

    let again = make_dataset(10, 7, 0.8, &c).unwrap();
    assert_eq!(again.train, ds.train);
    assert_eq!(again.test, ds.test);

    let dir = tempfile::tempdir().unwrap();
    dynexit::navsim::write_dataset(dir.path(), &ds).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.manifest, ds.manifest);
    assert_eq!(loaded.train, ds.train);
    assert_eq!(loaded.test, ds.test);
}

fn worlds(n: u64) -> Vec<World> {
    (0..n).map(|s| gen_world(1000 + s, &cfg()).unwrap()).collect()
}

#[test]
fn expert_scores_one() {
    let r = eval_closed_loop(&mut ExpertPolicy, &worlds(10), 400, &cfg()).unwrap();
    assert_eq!(r.success_rate, 1.0);
    assert!(r.reached.iter().all(|&r| r));
}

struct Fixed(Vec<[f64; 2]>);

impl Policy for Fixed {
    fn waypoints(&mut self, _: &StepContext) -> Result<Vec<[f64; 2]>> {
        Ok(self.0.clone())
    }
}

/// Steers at the closest obstacle point.
struct WallSeeker;

impl Policy for WallSeeker {
    fn waypoints(&mut self, ctx: &StepContext) -> Result<Vec<[f64; 2]>> {
        let p = ctx.pose.position();
        let closest = ctx
            .episode
            .world
            .obstacles()
            .iter()
            .map(|s| {
                let (dx, dy) = (s.b[0] - s.a[0], s.b[1] - s.a[1]);
                let t = (((p[0] - s.a[0]) * dx + (p[1] - s.a[1]) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
                [s.a[0] + t * dx, s.a[1] + t * dy]
            })
            .min_by(|a, b| (a[0] - p[0]).hypot(a[1] - p[1]).total_cmp(&(b[0] - p[0]).hypot(b[1] - p[1])))
            .unwrap();
        Ok(vec![world_to_waypoint(&ctx.pose, closest)])
    }
}

#[test]
fn immediate_collision_scores_near_zero() {
    let r: ClosedLoopReport = eval_closed_loop(&mut WallSeeker, &worlds(5), 400, &cfg()).unwrap();
    assert!(r.collided.iter().all(|&c| c), "{r:?}");
    let mut scores = r.scores.clone();
    scores.sort_by(f64::total_cmp);
    assert!(scores[2] < 0.05 && r.success_rate < 0.1, "{r:?}");
}

#[test]
fn fixed_policy_is_no_better_than_expert() {
    let r = eval_closed_loop(&mut Fixed(vec![[1.0, 0.0]]), &worlds(5), 400, &cfg()).unwrap();
    assert!(r.success_rate <= 1.0);
    assert!(r.scores.iter().all(|s| (0.0..=1.0).contains(s)));
}

fn pred(a: &[f64], w: &[f64], d: f64) -> Prediction {
    Prediction {
        action: Tensor::new(vec![a.len() / 2, 2], a.to_vec()).unwrap(),
        waypoints: Tensor::new(vec![w.len() / 2, 2], w.to_vec()).unwrap(),
        distance: d,
    }
}

fn target(a: &[f64], w: &[f64], d: f64) -> dynexit::navsim::Target {
    dynexit::navsim::Target {
        action: Tensor::new(vec![a.len() / 2, 2], a.to_vec()).unwrap(),
        waypoints: Tensor::new(vec![w.len() / 2, 2], w.to_vec()).unwrap(),
        distance: d,
    }
}

#[test]
fn cosine_metric_examples() {
    let (a, w) = ([1.0, 0.0, 0.6, 0.8], [0.1, 0.0, 0.2, 0.05]);
    let m = cosine_metrics(&[pred(&a, &w, 0.3)], &[target(&a, &w, 0.3)]).unwrap();
    assert!((m.sim_a - 100.0).abs() < 1e-12 && (m.sim_w - 100.0).abs() < 1e-12);
    assert!(m.loss_action.abs() < 1e-12 && m.loss_dist == 0.0);
    let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
    let m = cosine_metrics(&[pred(&neg(&a), &neg(&w), 0.3)], &[target(&a, &w, 0.3)]).unwrap();
    assert!((m.sim_a + 100.0).abs() < 1e-12 && (m.sim_w + 100.0).abs() < 1e-12);
    let z = cosine_metrics(&[pred(&[0.0; 4], &w, 0.0)], &[target(&a, &w, 0.0)]).unwrap();
    assert_eq!(z.sim_a, 0.0);
}

#[test]
fn batch_metric_is_mean_of_per_sample() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let mut v = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let preds: Vec<Prediction> = (0..7).map(|_| pred(&v(10), &v(10), v(1)[0])).collect();
    let targets: Vec<_> = (0..7).map(|_| target(&v(10), &v(10), v(1)[0])).collect();
    let batch = cosine_metrics(&preds, &targets).unwrap();
    let singles: Vec<_> =
        preds.iter().zip(&targets).map(|(p, t)| cosine_metrics(&[p.clone()], &[t.clone()]).unwrap()).collect();
    let mean = |f: fn(&dynexit::navsim::Metrics) -> f64| singles.iter().map(f).sum::<f64>() / 7.0;
    assert!((batch.sim_a - mean(|m| m.sim_a)).abs() < 1e-12);
    assert!((batch.sim_w - mean(|m| m.sim_w)).abs() < 1e-12);
    assert!((batch.loss_action - mean(|m| m.loss_action)).abs() < 1e-12);
    assert!((batch.loss_dist - mean(|m| m.loss_dist)).abs() < 1e-12);
}
