//! Column raycaster producing egocentric RGB frames.

use serde::{Deserialize, Serialize};

use super::map::WorldMap;
use super::pose::Pose;
use crate::error::{Error, Result};

/// Row-major `H x W x C` image with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub height: usize,
    pub width: usize,
}

impl Default for Resolution {
    fn default() -> Self {
        Resolution { height: 32, width: 32 }
    }
}

impl Frame {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape("frame", format!("{height}x{width}x{channels} vs {} values", data.len())));
        }
        Ok(Frame { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Frame { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Copy clamped to `[0, 1]`, for visualization.
    pub fn clamped(&self) -> Frame {
        Frame { data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(), ..self.clone() }
    }

    pub fn same_dims(&self, other: &Frame) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

const FOV: f64 = std::f64::consts::FRAC_PI_2;

const PALETTE: [[f64; 3]; 8] = [
    [0.85, 0.25, 0.20],
    [0.20, 0.65, 0.25],
    [0.25, 0.35, 0.85],
    [0.90, 0.80, 0.20],
    [0.75, 0.30, 0.80],
    [0.20, 0.80, 0.80],
    [0.95, 0.55, 0.15],
    [0.55, 0.55, 0.55],
];

/// Result of casting one ray.
#[derive(Debug, Clone, Copy)]
pub struct RayHit {
    /// Distance along the view direction (fisheye-corrected).
    pub perp_dist: f64,
    pub texture: u8,
    /// Coordinate along the hit face, oriented consistently with the face
    /// normal so it is invariant to rotating the whole map.
    pub face_u: f64,
}

/// Casts a ray from `(x, y)` along `dir` (not necessarily unit) with DDA.
/// Distances are returned in units of `dir`'s length.
pub fn cast_ray(map: &WorldMap, x: f64, y: f64, dir: [f64; 2]) -> RayHit {
    let mut cx = x.floor() as i64;
    let mut cy = y.floor() as i64;
    let delta_x = if dir[0] == 0.0 { f64::INFINITY } else { (1.0 / dir[0]).abs() };
    let delta_y = if dir[1] == 0.0 { f64::INFINITY } else { (1.0 / dir[1]).abs() };
    let (step_x, mut side_x) = if dir[0] < 0.0 { (-1, (x - cx as f64) * delta_x) } else { (1, (cx as f64 + 1.0 - x) * delta_x) };
    let (step_y, mut side_y) = if dir[1] < 0.0 { (-1, (y - cy as f64) * delta_y) } else { (1, (cy as f64 + 1.0 - y) * delta_y) };
    let limit = 4 * (map.width + map.height) + 8;
    for _ in 0..limit {
        let hit_x_face = side_x < side_y;
        if hit_x_face {
            side_x += delta_x;
            cx += step_x;
        } else {
            side_y += delta_y;
            cy += step_y;
        }
        if let Some(tex) = map.wall_texture(cx, cy) {
            let perp = if hit_x_face { side_x - delta_x } else { side_y - delta_y };
            let hx = x + perp * dir[0];
            let hy = y + perp * dir[1];
            // Outward normal faces the viewer; tangent is the normal turned +90 deg.
            let normal = if hit_x_face { [-(step_x as f64), 0.0] } else { [0.0, -(step_y as f64)] };
            let tangent = [-normal[1], normal[0]];
            let face_u = (hx * tangent[0] + hy * tangent[1]).rem_euclid(1.0);
            return RayHit { perp_dist: perp, texture: tex, face_u };
        }
    }
    RayHit { perp_dist: f64::INFINITY, texture: 0, face_u: 0.0 }
}

/// Renders the view from `pose`. Fails when the pose is inside a wall.
pub fn render(map: &WorldMap, pose: &Pose, res: Resolution) -> Result<Frame> {
    if !map.is_free(pose.x, pose.y) {
        return Err(Error::InsideWall { x: pose.x, y: pose.y });
    }
    let (h, w) = (res.height, res.width);
    let mut data = vec![0f32; h * w * 3];
    let (s, c) = pose.yaw.sin_cos();
    let dir = [c, s];
    let half = (FOV / 2.0).tan();
    let right = [s * half, -c * half];
    let hf = h as f64;
    for col in 0..w {
        let cam = 2.0 * (col as f64 + 0.5) / w as f64 - 1.0;
        let ray = [dir[0] + right[0] * cam, dir[1] + right[1] * cam];
        let hit = cast_ray(map, pose.x, pose.y, ray);
        let line = hf / hit.perp_dist.max(1e-6);
        let top = hf / 2.0 - line / 2.0;
        let bottom = hf / 2.0 + line / 2.0;
        let fog = 1.0 / (1.0 + 0.12 * hit.perp_dist);
        let base = PALETTE[hit.texture as usize % PALETTE.len()];
        for row in 0..h {
            let yc = row as f64 + 0.5;
            let rgb = if yc >= top && yc < bottom {
                let v = (yc - top) / line;
                let checker = ((hit.face_u * 4.0).floor() as i64 + (v * 4.0).floor() as i64).rem_euclid(2);
                let pattern = if checker == 0 { 1.0 } else { 0.6 };
                [base[0] * pattern * fog, base[1] * pattern * fog, base[2] * pattern * fog]
            } else if yc < top {
                let t = yc / hf;
                [0.45 + 0.2 * t, 0.6 + 0.2 * t, 0.9]
            } else {
                let t = (yc - hf / 2.0) / (hf / 2.0);
                [0.25 + 0.2 * t, 0.22 + 0.18 * t, 0.18 + 0.12 * t]
            };
            let i = (row * w + col) * 3;
            for ch in 0..3 {
                data[i + ch] = rgb[ch] as f32;
            }
        }
    }
    Frame::new(h, w, 3, data)
}
