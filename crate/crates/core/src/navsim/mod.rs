//! Procedural planar navigation worlds, raycast rendering, expert episodes,
//! datasets and closed-loop evaluation.

mod closed_loop;
mod dataset;
mod expert;
mod geometry;
mod metrics;
mod render;
mod world;

use serde::{Deserialize, Serialize};

pub use closed_loop::{eval_closed_loop, ClosedLoopReport, ExpertPolicy, Policy, StepContext};
pub use dataset::{
    load_dataset, make_dataset, read_episode, read_manifest, write_dataset, write_episode, Dataset, Sample, SplitManifest,
    Target, ARCHIVE_VERSION,
};
pub use expert::{expert_rollout, Episode};
pub use geometry::{point_segment_distance, segment_distance, Segment};
pub use metrics::{cosine_metrics, Metrics};
pub use render::render;
pub use world::{gen_world, Landmark, World};

/// Simulator and dataset settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Side of the square map in meters.
    pub world_size: f64,
    pub grid_resolution: f64,
    /// Minimum obstacle distance of grid cells the expert may use.
    pub clearance: f64,
    pub agent_radius: f64,
    /// Meters travelled per frame (0.5 m/s at 4 Hz).
    pub step_length: f64,
    pub image_size: usize,
    pub fov_deg: f64,
    pub min_goal_distance: f64,
    pub max_path_length: f64,
    pub past_frames: usize,
    pub n_waypoints: usize,
    pub d_min: usize,
    pub d_max: usize,
    pub samples_per_episode: usize,
    /// Frames ahead of the agent's progress used as the closed-loop subgoal.
    pub subgoal_offset: usize,
    pub goal_tolerance: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            world_size: 12.0,
            grid_resolution: 0.25,
            clearance: 0.35,
            agent_radius: 0.2,
            step_length: 0.125,
            image_size: 32,
            fov_deg: 90.0,
            min_goal_distance: 5.0,
            max_path_length: 15.0,
            past_frames: 5,
            n_waypoints: 5,
            d_min: 1,
            // 20 m at 0.125 m per frame
            d_max: 160,
            samples_per_episode: 4,
            subgoal_offset: 6,
            goal_tolerance: 0.3,
        }
    }
}

/// Planar pose with yaw in `(-pi, pi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Pose { x, y, yaw: normalize_angle(yaw) }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    if a > -PI && a <= PI {
        return a;
    }
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r + 2.0 * PI
    } else {
        r
    }
}

/// Agent-frame offset `(target - P) R(yaw)` with `R = [[cos, -sin], [sin, cos]]`
/// applied to a row vector.
pub fn world_to_waypoint(pose: &Pose, target: [f64; 2]) -> [f64; 2] {
    let (s, c) = pose.yaw.sin_cos();
    let (dx, dy) = (target[0] - pose.x, target[1] - pose.y);
    [dx * c + dy * s, -dx * s + dy * c]
}

/// Inverse of [`world_to_waypoint`]: `P + w R(yaw)^T`.
pub fn waypoint_to_world(pose: &Pose, w: [f64; 2]) -> [f64; 2] {
    let (s, c) = pose.yaw.sin_cos();
    [pose.x + w[0] * c - w[1] * s, pose.y + w[0] * s + w[1] * c]
}
