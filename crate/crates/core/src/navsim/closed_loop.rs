use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{expert_rollout, render, waypoint_to_world, world_to_waypoint, Episode, Pose, SimConfig, World};
use crate::error::{Error, Result};
use crate::image::Image;

/// Expert poses ahead of the current progress considered when updating it.
const PROGRESS_WINDOW: usize = 24;
/// Farthest the agent may be from the expert pose it is credited with.
const PROGRESS_RADIUS: f64 = 1.0;

pub struct StepContext<'a> {
    /// Last `p + 1` observations, oldest first.
    pub frames: &'a [Image],
    pub goal: &'a Image,
    pub pose: Pose,
    pub episode: &'a Episode,
    pub step: usize,
}

/// Maps an observation window and goal to agent-frame waypoints.
pub trait Policy {
    fn waypoints(&mut self, ctx: &StepContext) -> Result<Vec<[f64; 2]>>;
}

/// Heads for the expert poses following the nearest one, expressed in the agent's frame.
pub struct ExpertPolicy;

impl Policy for ExpertPolicy {
    fn waypoints(&mut self, ctx: &StepContext) -> Result<Vec<[f64; 2]>> {
        let k = (0..ctx.episode.len())
            .min_by(|&a, &b| {
                let d = |k: usize| (ctx.episode.poses[k].x - ctx.pose.x).hypot(ctx.episode.poses[k].y - ctx.pose.y);
                d(a).total_cmp(&d(b))
            })
            .ok_or_else(|| Error::Data("empty expert episode".into()))?;
        let n = ctx.episode.waypoints[k].len();
        let last = ctx.episode.len() - 1;
        Ok((1..=n).map(|h| world_to_waypoint(&ctx.pose, ctx.episode.poses[(k + h).min(last)].position())).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopReport {
    pub scores: Vec<f64>,
    pub reached: Vec<bool>,
    pub collided: Vec<bool>,
    pub success_rate: f64,
}

fn run_world(policy: &mut dyn Policy, world: &World, max_steps: usize, cfg: &SimConfig) -> Result<(f64, bool, bool)> {
    let ep = expert_rollout(world, 0, cfg)?;
    let n = ep.len();
    let mut pose = ep.poses[0];
    let first = render(world, &pose, cfg.image_size, cfg.fov_deg);
    let mut history: VecDeque<Image> = std::iter::repeat(first).take(cfg.past_frames + 1).collect();
    let mut progress = 0;
    let mut collided = false;
    for step in 0..max_steps {
        let frames: Vec<Image> = history.iter().cloned().collect();
        let goal = &ep.images[(progress + cfg.subgoal_offset).min(n - 1)];
        let ctx = StepContext { frames: &frames, goal, pose, episode: &ep, step };
        let w = policy.waypoints(&ctx)?;
        let first = *w.first().ok_or_else(|| Error::invalid("policy returned no waypoints"))?;
        if !first.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "policy waypoint" });
        }
        let target = waypoint_to_world(&pose, first);
        let mut mv = [target[0] - pose.x, target[1] - pose.y];
        let len = mv[0].hypot(mv[1]);
        let max_len = 2.0 * cfg.step_length;
        if len > max_len {
            mv = [mv[0] * max_len / len, mv[1] * max_len / len];
        }
        let next = [pose.x + mv[0], pose.y + mv[1]];
        if world.sweep_collides(pose.position(), next, cfg.agent_radius) {
            collided = true;
            break;
        }
        let yaw = if len > 1e-9 { mv[1].atan2(mv[0]) } else { pose.yaw };
        pose = Pose::new(next[0], next[1], yaw);
        let hi = (progress + PROGRESS_WINDOW).min(n - 1);
        let (best, dist) = (progress..=hi)
            .map(|k| (k, (ep.poses[k].x - pose.x).hypot(ep.poses[k].y - pose.y)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("nonempty window");
        if dist <= PROGRESS_RADIUS {
            progress = progress.max(best);
        }
        if (pose.x - world.goal[0]).hypot(pose.y - world.goal[1]) <= cfg.goal_tolerance {
            return Ok((1.0, true, false));
        }
        history.pop_front();
        history.push_back(render(world, &pose, cfg.image_size, cfg.fov_deg));
    }
    Ok(((ep.progress_at(progress) / ep.length).min(1.0), false, collided))
}

/// Mean progress ratio over `worlds`; reaching the goal scores 1.
pub fn eval_closed_loop(
    policy: &mut dyn Policy,
    worlds: &[World],
    max_steps: usize,
    cfg: &SimConfig,
) -> Result<ClosedLoopReport> {
    let mut report = ClosedLoopReport { scores: vec![], reached: vec![], collided: vec![], success_rate: 0.0 };
    for world in worlds {
        let (score, reached, collided) = run_world(policy, world, max_steps, cfg)?;
        report.scores.push(score);
        report.reached.push(reached);
        report.collided.push(collided);
    }
    if !report.scores.is_empty() {
        report.success_rate = report.scores.iter().sum::<f64>() / report.scores.len() as f64;
    }
    Ok(report)
}
