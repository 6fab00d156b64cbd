//! Random global rotation, orthographic projection, and 2D shift/scale.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::Rng;

use crate::config::AugmentConfig;
use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Pixel placement of body coordinates: `pixel = center + pixels_per_unit·(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionFrame {
    pub center: [f64; 2],
    pub pixels_per_unit: f64,
}

impl ProjectionFrame {
    /// Body units map straight to pixels around the origin.
    pub fn unit() -> Self {
        Self {
            center: [0.0, 0.0],
            pixels_per_unit: 1.0,
        }
    }

    /// Centered in an `height × width` image, one body unit covering
    /// `extent` of the half height.
    pub fn for_image(height: usize, width: usize, extent: f64) -> Self {
        Self {
            center: [width as f64 / 2.0, height as f64 / 2.0],
            pixels_per_unit: extent * height as f64 / 2.0,
        }
    }
}

/// One draw of the augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub shift: [f64; 2],
    pub scale: f64,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        Self {
            roll: 0.0,
            pitch: 0.0,
            yaw: 0.0,
            shift: [0.0, 0.0],
            scale: 1.0,
        }
    }

    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let mut sym = |r: f64| {
            if r > 0.0 {
                rng.random_range(-r..=r)
            } else {
                0.0
            }
        };
        let roll = sym(cfg.roll_deg).to_radians();
        let pitch = sym(cfg.pitch_deg).to_radians();
        let yaw = sym(cfg.yaw_deg).to_radians();
        let shift = [sym(cfg.shift_px), sym(cfg.shift_px)];
        let scale = if cfg.scale_max > cfg.scale_min {
            rng.random_range(cfg.scale_min..=cfg.scale_max)
        } else {
            cfg.scale_min
        };
        Self {
            roll,
            pitch,
            yaw,
            shift,
            scale,
        }
    }

    /// Intrinsic roll (about the viewing axis z), then pitch (x), then yaw
    /// (the vertical axis y): `R = Rz·Rx·Ry`.
    pub fn rotation(&self) -> Matrix3<f64> {
        let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), self.roll);
        let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), self.pitch);
        let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), self.yaw);
        (rz * rx * ry).into_inner()
    }

    /// The 2D map applied after projection: `y ↦ center + scale·(y − center) + shift`.
    pub fn apply_2d(&self, frame: &ProjectionFrame, p: [f64; 2]) -> [f64; 2] {
        [
            frame.center[0] + self.scale * (p[0] - frame.center[0]) + self.shift[0],
            frame.center[1] + self.scale * (p[1] - frame.center[1]) + self.shift[1],
        ]
    }
}

/// Rotates every row of an `N × 3` tensor.
pub fn rotate_points(points: &Tensor, r: &Matrix3<f64>) -> Result<Tensor> {
    if points.rank() != 2 || points.shape()[1] != 3 {
        return Err(contract("rotation needs N×3 points"));
    }
    let mut out = Vec::with_capacity(points.len());
    for i in 0..points.shape()[0] {
        let p = points.row(i);
        let q = r * Vector3::new(p[0], p[1], p[2]);
        out.extend_from_slice(&[q.x, q.y, q.z]);
    }
    Ok(Tensor::new(points.shape(), out)?)
}

/// Orthographic drop of z into pixels, before augmentation.
pub fn project_orthographic(points: &Tensor, frame: &ProjectionFrame) -> Vec<[f64; 2]> {
    (0..points.shape()[0])
        .map(|i| {
            let p = points.row(i);
            [
                frame.center[0] + frame.pixels_per_unit * p[0],
                frame.center[1] + frame.pixels_per_unit * p[1],
            ]
        })
        .collect()
}

/// Rotated 3D points and their augmented 2D pixel positions.
pub fn augment_and_project(
    points: &Tensor,
    draw: &AugmentDraw,
    frame: &ProjectionFrame,
) -> Result<(Tensor, Vec<[f64; 2]>)> {
    let rotated = rotate_points(points, &draw.rotation())?;
    let px = project_orthographic(&rotated, frame)
        .into_iter()
        .map(|p| draw.apply_2d(frame, p))
        .collect();
    Ok((rotated, px))
}
