use super::geometry::ray_hit;
use super::{Pose, World};
use crate::image::Image;

const WALL_HEIGHT: f64 = 1.0;
const CAMERA_HEIGHT: f64 = 0.5;
const SKY: [f64; 3] = [0.55, 0.7, 0.9];
const FLOOR: [f64; 3] = [0.45, 0.38, 0.3];

/// Forward-facing raycast view. Column shading uses the perpendicular wall
/// distance so a wall facing the camera renders with uniform columns.
pub fn render(world: &World, pose: &Pose, size: usize, fov_deg: f64) -> Image {
    let surfaces = world.surfaces();
    let half = (fov_deg.to_radians() / 2.0).tan();
    let focal = size as f64 / 2.0 / half;
    let (sin_y, cos_y) = pose.yaw.sin_cos();
    let forward = [cos_y, sin_y];
    let left = [-sin_y, cos_y];
    let origin = pose.position();
    let mut img = Image::filled(size, size, 3, 0);
    let mid = size as f64 / 2.0;
    for col in 0..size {
        // camera-plane offset, positive to the left
        let u = (1.0 - 2.0 * (col as f64 + 0.5) / size as f64) * half;
        let dir = [forward[0] + u * left[0], forward[1] + u * left[1]];
        let norm = dir[0].hypot(dir[1]);
        let unit = [dir[0] / norm, dir[1] / norm];
        let hit = surfaces
            .iter()
            .filter_map(|(s, color)| ray_hit(origin, unit, s).map(|t| (t, color)))
            .min_by(|a, b| a.0.total_cmp(&b.0));
        let (top, bottom, color) = match hit {
            Some((t, color)) => {
                let perp = (t / norm).max(1e-6);
                let shade = 1.0 / (1.0 + 0.15 * perp);
                let c = color.map(|v| v as f64 / 255.0 * shade);
                (mid - focal * (WALL_HEIGHT - CAMERA_HEIGHT) / perp, mid + focal * CAMERA_HEIGHT / perp, c)
            }
            None => (mid, mid, [0.0; 3]),
        };
        for row in 0..size {
            let y = row as f64 + 0.5;
            let rgb = if y < top {
                let f = y / mid;
                SKY.map(|v| v * (1.0 - 0.2 * f))
            } else if y >= bottom {
                let f = (y - mid) / mid;
                FLOOR.map(|v| v * (0.6 + 0.4 * f))
            } else {
                color
            };
            for (ch, v) in rgb.into_iter().enumerate() {
                img.set(row, col, ch, v);
            }
        }
    }
    img
}
