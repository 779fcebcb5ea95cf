use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{point_segment_distance, segment_distance, Segment};
use super::{Pose, SimConfig};
use crate::error::{Error, Result};

const MAX_ATTEMPTS: usize = 200;
const GOAL_TRIES: usize = 20;

const PALETTE: [[u8; 3]; 6] =
    [[220, 40, 40], [40, 180, 60], [50, 80, 220], [230, 200, 40], [200, 60, 200], [40, 200, 210]];

/// Solid colored box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub min: [f64; 2],
    pub max: [f64; 2],
    pub color: [u8; 3],
}

impl Landmark {
    pub fn edges(&self) -> [Segment; 4] {
        let [x0, y0] = self.min;
        let [x1, y1] = self.max;
        [
            Segment::new([x0, y0], [x1, y0]),
            Segment::new([x1, y0], [x1, y1]),
            Segment::new([x1, y1], [x0, y1]),
            Segment::new([x0, y1], [x0, y0]),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub seed: u64,
    pub size: f64,
    pub walls: Vec<Segment>,
    pub landmarks: Vec<Landmark>,
    pub start: Pose,
    pub goal: [f64; 2],
}

impl World {
    /// Every collidable segment with its base color.
    pub fn surfaces(&self) -> Vec<(Segment, [u8; 3])> {
        let mut out: Vec<(Segment, [u8; 3])> = self
            .walls
            .iter()
            .map(|w| {
                // horizontal and vertical walls get different grays
                let shade = if (w.a[1] - w.b[1]).abs() < 1e-12 { 175 } else { 125 };
                (*w, [shade, shade, shade])
            })
            .collect();
        for l in &self.landmarks {
            out.extend(l.edges().into_iter().map(|e| (e, l.color)));
        }
        out
    }

    pub fn obstacles(&self) -> Vec<Segment> {
        self.surfaces().into_iter().map(|(s, _)| s).collect()
    }

    pub fn clearance_at(&self, p: [f64; 2]) -> f64 {
        self.obstacles().iter().map(|s| point_segment_distance(p, s)).fold(f64::INFINITY, f64::min)
    }

    /// Whether a disc of `radius` swept along `a -> b` touches an obstacle.
    pub fn sweep_collides(&self, a: [f64; 2], b: [f64; 2], radius: f64) -> bool {
        let m = Segment::new(a, b);
        self.obstacles().iter().any(|s| segment_distance(&m, s) < radius)
    }
}

/// Occupancy grid of cells whose centers keep the configured clearance.
pub(crate) struct Grid {
    pub n: usize,
    pub res: f64,
    pub free: Vec<bool>,
}

impl Grid {
    pub fn build(world: &World, cfg: &SimConfig) -> Self {
        let n = (world.size / cfg.grid_resolution).round() as usize;
        let obstacles = world.obstacles();
        let free = (0..n * n)
            .map(|idx| {
                let p = Grid::center_of(idx % n, idx / n, cfg.grid_resolution);
                obstacles.iter().all(|s| point_segment_distance(p, s) >= cfg.clearance)
            })
            .collect();
        Grid { n, res: cfg.grid_resolution, free }
    }

    fn center_of(i: usize, j: usize, res: f64) -> [f64; 2] {
        [(i as f64 + 0.5) * res, (j as f64 + 0.5) * res]
    }

    pub fn center(&self, idx: usize) -> [f64; 2] {
        Grid::center_of(idx % self.n, idx / self.n, self.res)
    }

    pub fn cell_of(&self, p: [f64; 2]) -> Option<usize> {
        let (i, j) = ((p[0] / self.res).floor(), (p[1] / self.res).floor());
        (i >= 0.0 && j >= 0.0 && (i as usize) < self.n && (j as usize) < self.n).then(|| j as usize * self.n + i as usize)
    }

    /// 8-neighbours with integer step costs; diagonals need both side cells free.
    fn neighbours(&self, idx: usize) -> Vec<(usize, u64)> {
        let (i, j) = ((idx % self.n) as isize, (idx / self.n) as isize);
        let n = self.n as isize;
        let free = |x: isize, y: isize| x >= 0 && y >= 0 && x < n && y < n && self.free[(y * n + x) as usize];
        let mut out = Vec::with_capacity(8);
        for (dx, dy) in [(-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)] {
            let (x, y) = (i + dx, j + dy);
            if !free(x, y) {
                continue;
            }
            let diagonal = dx != 0 && dy != 0;
            if diagonal && !(free(i + dx, j) && free(i, j + dy)) {
                continue;
            }
            out.push(((y * n + x) as usize, if diagonal { 14 } else { 10 }));
        }
        out
    }

    /// Flood fill from `start`.
    pub fn reachable(&self, start: usize) -> Vec<bool> {
        let mut seen = vec![false; self.free.len()];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(c) = queue.pop_front() {
            for (nb, _) in self.neighbours(c) {
                if !seen[nb] {
                    seen[nb] = true;
                    queue.push_back(nb);
                }
            }
        }
        seen
    }

    /// Dijkstra shortest path as cell indices.
    pub fn shortest_path(&self, start: usize, goal: usize) -> Option<Vec<usize>> {
        let mut dist = vec![u64::MAX; self.free.len()];
        let mut prev = vec![usize::MAX; self.free.len()];
        let mut heap = BinaryHeap::from([Reverse((0u64, start))]);
        dist[start] = 0;
        while let Some(Reverse((d, c))) = heap.pop() {
            if c == goal {
                break;
            }
            if d > dist[c] {
                continue;
            }
            for (nb, w) in self.neighbours(c) {
                if d + w < dist[nb] {
                    dist[nb] = d + w;
                    prev[nb] = c;
                    heap.push(Reverse((d + w, nb)));
                }
            }
        }
        if dist[goal] == u64::MAX {
            return None;
        }
        let mut path = vec![goal];
        while *path.last().unwrap() != start {
            path.push(prev[*path.last().unwrap()]);
        }
        path.reverse();
        Some(path)
    }
}

fn line_of_sight(obstacles: &[Segment], a: [f64; 2], b: [f64; 2], clearance: f64) -> bool {
    let m = Segment::new(a, b);
    obstacles.iter().all(|s| segment_distance(&m, s) >= clearance)
}

/// Grid shortest path from start to goal, smoothed by greedy line of sight.
pub(crate) fn plan_path(world: &World, cfg: &SimConfig) -> Option<Vec<[f64; 2]>> {
    let grid = Grid::build(world, cfg);
    let (s, g) = (grid.cell_of(world.start.position())?, grid.cell_of(world.goal)?);
    let cells = grid.shortest_path(s, g)?;
    let mut raw: Vec<[f64; 2]> = cells.iter().map(|&c| grid.center(c)).collect();
    raw[0] = world.start.position();
    *raw.last_mut().unwrap() = world.goal;
    let obstacles = world.obstacles();
    let los_clearance = cfg.clearance - 0.05;
    let mut path = vec![raw[0]];
    let mut i = 0;
    while i + 1 < raw.len() {
        let mut j = raw.len() - 1;
        while j > i + 1 && !line_of_sight(&obstacles, raw[i], raw[j], los_clearance) {
            j -= 1;
        }
        path.push(raw[j]);
        i = j;
    }
    Some(path)
}

pub(crate) fn path_length(path: &[[f64; 2]]) -> f64 {
    path.windows(2).map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1])).sum()
}

fn random_layout(seed: u64, size: f64, rng: &mut ChaCha8Rng) -> World {
    let mut walls = vec![
        Segment::new([0.0, 0.0], [size, 0.0]),
        Segment::new([size, 0.0], [size, size]),
        Segment::new([size, size], [0.0, size]),
        Segment::new([0.0, size], [0.0, 0.0]),
    ];
    for _ in 0..rng.gen_range(3..=5) {
        let (x, y) = (rng.gen_range(1.0..size - 1.0), rng.gen_range(1.0..size - 1.0));
        let len = rng.gen_range(2.0..5.0);
        let end = if rng.gen_bool(0.5) { [(x + len).min(size), y] } else { [x, (y + len).min(size)] };
        walls.push(Segment::new([x, y], end));
    }
    let mut colors = PALETTE.to_vec();
    colors.shuffle(rng);
    let landmarks = colors
        .into_iter()
        .take(rng.gen_range(4..=6))
        .map(|color| {
            let (w, h) = (rng.gen_range(0.4..0.9), rng.gen_range(0.4..0.9));
            let (x, y) = (rng.gen_range(0.8..size - 0.8 - w), rng.gen_range(0.8..size - 0.8 - h));
            Landmark { min: [x, y], max: [x + w, y + h], color }
        })
        .collect();
    World { seed, size, walls, landmarks, start: Pose::new(0.0, 0.0, 0.0), goal: [0.0, 0.0] }
}

/// Deterministic world from `seed` with a verified start-to-goal path.
pub fn gen_world(seed: u64, cfg: &SimConfig) -> Result<World> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let mut world = random_layout(seed, cfg.world_size, &mut rng);
        let grid = Grid::build(&world, cfg);
        let free: Vec<usize> = (0..grid.free.len()).filter(|&c| grid.free[c]).collect();
        if free.is_empty() {
            continue;
        }
        let start = free[rng.gen_range(0..free.len())];
        let reach = grid.reachable(start);
        let sp = grid.center(start);
        let candidates: Vec<usize> = free
            .iter()
            .copied()
            .filter(|&c| {
                let g = grid.center(c);
                reach[c] && (g[0] - sp[0]).hypot(g[1] - sp[1]) >= cfg.min_goal_distance
            })
            .collect();
        if candidates.is_empty() {
            continue;
        }
        for _ in 0..GOAL_TRIES {
            let goal = candidates[rng.gen_range(0..candidates.len())];
            world.start = Pose::new(sp[0], sp[1], 0.0);
            world.goal = grid.center(goal);
            let Some(path) = plan_path(&world, cfg) else { continue };
            if path_length(&path) > cfg.max_path_length {
                continue;
            }
            if path.windows(2).any(|w| world.sweep_collides(w[0], w[1], cfg.agent_radius)) {
                continue;
            }
            let d = [path[1][0] - path[0][0], path[1][1] - path[0][1]];
            world.start = Pose::new(sp[0], sp[1], d[1].atan2(d[0]));
            return Ok(world);
        }
    }
    Err(Error::Data(format!("world generation for seed {seed} exhausted {MAX_ATTEMPTS} attempts")))
}
