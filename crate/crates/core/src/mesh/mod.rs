//! Mesh predictions, weak-perspective projection, joint regression, and the
//! two-branch ensemble.

mod heads;
mod template;

pub use heads::{BranchPrediction, MeshHead, Upsampler};
pub use template::{JointRegressor, TemplateMesh};

use std::fmt::Write as _;

use crate::error::{contract, Result};
use crate::tensor::{Tensor, Var};

/// `(x, y, z) ↦ s·(x, y) + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakPerspectiveCamera {
    pub scale: f64,
    pub translation: [f64; 2],
}

impl WeakPerspectiveCamera {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            translation: [0.0, 0.0],
        }
    }

    /// From a `[s, tx, ty]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.shape() != [3] {
            return Err(contract(format!(
                "camera tensor must be [3], got {:?}",
                t.shape()
            )));
        }
        let d = t.data();
        Ok(Self {
            scale: d[0],
            translation: [d[1], d[2]],
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[3],
            vec![self.scale, self.translation[0], self.translation[1]],
        )
        .expect("finite camera")
    }
}

/// Projects `N × 3` points; depth is dropped.
pub fn project_weak_perspective(points: &Tensor, cam: &WeakPerspectiveCamera) -> Result<Tensor> {
    if points.rank() != 2 || points.shape()[1] != 3 {
        return Err(contract(format!(
            "projection needs N×3 points, got {:?}",
            points.shape()
        )));
    }
    let n = points.shape()[0];
    Ok(Tensor::from_fn(&[n, 2], |i| {
        cam.scale * points.get(&[i / 2, i % 2]) + cam.translation[i % 2]
    })?)
}

/// Differentiable projection of `N × 3` points by a `[s, tx, ty]` camera.
pub fn project_var<'g>(points: Var<'g>, cam: Var<'g>) -> Result<Var<'g>> {
    let xy = points.slice(1, 0, 2)?;
    let s = cam.slice(0, 0, 1)?.reshape(&[1, 1])?;
    let t = cam.slice(0, 1, 3)?.reshape(&[1, 2])?;
    Ok(xy.mul(s)?.add(t)?)
}

/// Differentiable `W·V` with a constant regressor.
pub fn regress_var<'g>(vertices: Var<'g>, reg: &JointRegressor) -> Result<Var<'g>> {
    let w = vertices.graph().constant(reg.weights.clone())?;
    Ok(w.matmul(vertices)?)
}

pub fn regress_joints(vertices: &Tensor, reg: &JointRegressor) -> Result<Tensor> {
    reg.apply(vertices)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchTag {
    Keypoint,
    Image,
    Fused,
}

impl BranchTag {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Keypoint => "keypoint",
            Self::Image => "image",
            Self::Fused => "fused",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshPrediction {
    /// `M_coarse × 3`.
    pub coarse: Tensor,
    /// `M_full × 3`.
    pub full: Tensor,
    /// `K_joint × 3`.
    pub joints: Tensor,
    pub camera: WeakPerspectiveCamera,
    pub branch: BranchTag,
}

fn mix(a: &Tensor, b: &Tensor, lambda: f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(contract(format!(
            "ensemble shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if lambda == 1.0 {
        return Ok(a.clone());
    }
    if lambda == 0.0 {
        return Ok(b.clone());
    }
    Ok(Tensor::new(
        a.shape(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
            .collect(),
    )?)
}

/// `λ·keypoint + (1−λ)·image` for vertices, joints, and the camera.
pub fn ensemble(kp: &MeshPrediction, img: &MeshPrediction, lambda: f64) -> Result<MeshPrediction> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(contract(format!("ensemble weight {lambda} outside [0, 1]")));
    }
    let l = lambda;
    let endpoint = if l == 1.0 {
        Some(kp)
    } else if l == 0.0 {
        Some(img)
    } else {
        None
    };
    if let Some(p) = endpoint {
        return Ok(MeshPrediction {
            branch: BranchTag::Fused,
            ..p.clone()
        });
    }
    Ok(MeshPrediction {
        coarse: mix(&kp.coarse, &img.coarse, l)?,
        full: mix(&kp.full, &img.full, l)?,
        joints: mix(&kp.joints, &img.joints, l)?,
        camera: WeakPerspectiveCamera {
            scale: l * kp.camera.scale + (1.0 - l) * img.camera.scale,
            translation: [
                l * kp.camera.translation[0] + (1.0 - l) * img.camera.translation[0],
                l * kp.camera.translation[1] + (1.0 - l) * img.camera.translation[1],
            ],
        },
        branch: BranchTag::Fused,
    })
}

/// Plain-text mesh dump: `v x y z` per vertex then `e i j` per edge.
pub fn export_mesh(vertices: &Tensor, edges: &[(usize, usize)]) -> Result<String> {
    if vertices.rank() != 2 || vertices.shape()[1] != 3 {
        return Err(contract("mesh export needs N×3 vertices"));
    }
    let mut s = String::new();
    for r in 0..vertices.shape()[0] {
        let v = vertices.row(r);
        let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
    }
    for (a, b) in edges {
        let _ = writeln!(s, "e {a} {b}");
    }
    Ok(s)
}
