use serde::{Deserialize, Serialize};

use super::world::plan_path;
use super::{render, world_to_waypoint, Pose, SimConfig, World};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: usize,
    pub world: World,
    pub poses: Vec<Pose>,
    /// Unit world-frame heading of each step `t -> t + 1`.
    pub actions: Vec<[f64; 2]>,
    /// Agent-frame offsets to the next `n_waypoints` poses (clamped at the end).
    pub waypoints: Vec<Vec<[f64; 2]>>,
    pub length: f64,
    #[serde(skip)]
    pub images: Vec<Image>,
    #[serde(skip)]
    pub goal_image: Option<Image>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Arc length travelled up to pose `k`.
    pub fn progress_at(&self, k: usize) -> f64 {
        self.poses[..=k].windows(2).fold(0.0, |acc, w| acc + (w[1].x - w[0].x).hypot(w[1].y - w[0].y))
    }

    /// Step headings `t..t + n` expressed in the agent frame at `t`, clamped at the end.
    pub fn action_window(&self, t: usize, n: usize) -> Vec<[f64; 2]> {
        let yaw = self.poses[t].yaw;
        (0..n)
            .map(|k| {
                let a = self.actions[(t + k).min(self.actions.len() - 1)];
                let frame = Pose::new(0.0, 0.0, yaw);
                world_to_waypoint(&frame, a)
            })
            .collect()
    }
}

/// Positions every `step` meters along `path`, ending exactly at its last point.
fn resample(path: &[[f64; 2]], step: f64) -> Vec<[f64; 2]> {
    let mut out = vec![path[0]];
    let mut seg = 0;
    let mut pos = path[0];
    loop {
        let mut remaining = step;
        loop {
            let end = path[seg + 1];
            let d = (end[0] - pos[0]).hypot(end[1] - pos[1]);
            if d >= remaining {
                let f = remaining / d;
                pos = [pos[0] + f * (end[0] - pos[0]), pos[1] + f * (end[1] - pos[1])];
                break;
            }
            remaining -= d;
            pos = end;
            seg += 1;
            if seg + 1 == path.len() {
                if out.last() != Some(&pos) {
                    out.push(pos);
                }
                return out;
            }
        }
        out.push(pos);
    }
}

/// Expert episode along the smoothed shortest path at constant speed.
pub fn expert_rollout(world: &World, id: usize, cfg: &SimConfig) -> Result<Episode> {
    let path = plan_path(world, cfg).ok_or_else(|| Error::Data(format!("world {} has no path to its goal", world.seed)))?;
    let points = resample(&path, cfg.step_length);
    if points.len() < 2 {
        return Err(Error::Data(format!("world {} start coincides with goal", world.seed)));
    }
    let actions: Vec<[f64; 2]> = points
        .windows(2)
        .map(|w| {
            let (dx, dy) = (w[1][0] - w[0][0], w[1][1] - w[0][1]);
            let n = dx.hypot(dy);
            [dx / n, dy / n]
        })
        .collect();
    let poses: Vec<Pose> = points
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let a = actions[k.min(actions.len() - 1)];
            Pose::new(p[0], p[1], a[1].atan2(a[0]))
        })
        .collect();
    let waypoints = (0..poses.len())
        .map(|t| {
            (1..=cfg.n_waypoints)
                .map(|h| world_to_waypoint(&poses[t], poses[(t + h).min(poses.len() - 1)].position()))
                .collect()
        })
        .collect();
    let images: Vec<Image> = poses.iter().map(|p| render(world, p, cfg.image_size, cfg.fov_deg)).collect();
    let goal_image = images.last().cloned();
    let length = points.windows(2).map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1])).sum();
    Ok(Episode { id, world: world.clone(), poses, actions, waypoints, length, images, goal_image })
}
