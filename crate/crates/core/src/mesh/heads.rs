//! Per-branch prediction heads and the coarse→full upsampler.

use super::{BranchTag, MeshPrediction, TemplateMesh, WeakPerspectiveCamera};
use crate::attention::{Linear, Mlp};
use crate::error::{contract, Result};
use crate::params::{Binder, Init, ParamStore};
use crate::tensor::{Tensor, Var};
use crate::tokens::{TokenRole, TokenSequence};

/// One branch's mesh, joints, and camera as graph values.
#[derive(Debug, Clone, Copy)]
pub struct BranchPrediction<'g> {
    /// `M_coarse × 3`.
    pub coarse: Var<'g>,
    /// `M_full × 3`.
    pub full: Var<'g>,
    /// `K_joint × 3`.
    pub joints: Var<'g>,
    /// `[s, tx, ty]` with `s > 0`.
    pub camera: Var<'g>,
}

impl BranchPrediction<'_> {
    pub fn to_prediction(&self, branch: BranchTag) -> Result<MeshPrediction> {
        Ok(MeshPrediction {
            coarse: self.coarse.tensor(),
            full: self.full.tensor(),
            joints: self.joints.tensor(),
            camera: WeakPerspectiveCamera::from_tensor(&self.camera.tensor())?,
            branch,
        })
    }
}

/// `V_full = U·V_coarse + B` with `U: M_full × M_coarse`, `B: M_full × 3`.
#[derive(Debug, Clone)]
pub struct Upsampler {
    pub name: String,
    pub coarse: usize,
    pub full: usize,
}

impl Upsampler {
    pub fn new(name: impl Into<String>, coarse: usize, full: usize) -> Self {
        Self {
            name: name.into(),
            coarse,
            full,
        }
    }

    /// Interpolation weights from the template: coarse vertices map to
    /// themselves, every other vertex blends its two nearest coarse vertices
    /// by inverse distance. Without a full template, each full vertex copies
    /// the coarse vertex at the proportional index.
    pub fn interpolation_weights(template: &TemplateMesh) -> Result<Tensor> {
        let (mc, mf) = (template.coarse_count(), template.full_vertices);
        let mut u = vec![0.0; mf * mc];
        match (&template.full, &template.coarse_index) {
            (Some(full), Some(index)) => {
                for i in 0..mf {
                    if let Some(c) = index.iter().position(|&k| k == i) {
                        u[i * mc + c] = 1.0;
                        continue;
                    }
                    let v = full.row(i);
                    let mut d: Vec<(f64, usize)> = (0..mc)
                        .map(|c| {
                            let p = template.coarse.row(c);
                            let d2: f64 = (0..3).map(|a| (v[a] - p[a]).powi(2)).sum();
                            (d2.sqrt(), c)
                        })
                        .collect();
                    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                    if mc == 1 {
                        u[i * mc] = 1.0;
                        continue;
                    }
                    let (d0, c0) = d[0];
                    let (d1, c1) = d[1];
                    let total = d0 + d1;
                    let (w0, w1) = if total > 0.0 {
                        (d1 / total, d0 / total)
                    } else {
                        (1.0, 0.0)
                    };
                    u[i * mc + c0] += w0;
                    u[i * mc + c1] += w1;
                }
            }
            _ => {
                for i in 0..mf {
                    u[i * mc + (i * mc) / mf] = 1.0;
                }
            }
        }
        Ok(Tensor::new(&[mf, mc], u)?)
    }

    pub fn init(&self, store: &mut ParamStore, template: &TemplateMesh) -> Result<()> {
        if template.coarse_count() != self.coarse || template.full_vertices != self.full {
            return Err(contract("upsampler dimensions do not match the template"));
        }
        store.insert(
            format!("{}.weight", self.name),
            Self::interpolation_weights(template)?,
        );
        store.insert(
            format!("{}.bias", self.name),
            Tensor::zeros(&[self.full, 3])?,
        );
        Ok(())
    }

    pub fn forward<'g>(&self, b: &Binder<'g, '_>, coarse: Var<'g>) -> Result<Var<'g>> {
        let u = b.param(&format!("{}.weight", self.name))?;
        let bias = b.param(&format!("{}.bias", self.name))?;
        Ok(u.matmul(coarse)?.add(bias)?)
    }
}

/// Vertex/joint residual heads, camera MLP, and upsampler of one branch.
#[derive(Debug, Clone)]
pub struct MeshHead {
    pub vertex: Linear,
    pub joint: Linear,
    pub camera: Mlp,
    pub upsampler: Upsampler,
}

impl MeshHead {
    pub fn new(name: &str, d_model: usize, coarse: usize, full: usize) -> Self {
        Self {
            vertex: Linear::new(format!("{name}.vertex"), d_model, 3),
            joint: Linear::new(format!("{name}.joint"), d_model, 3),
            camera: Mlp::new(&format!("{name}.camera"), d_model, d_model, 3),
            upsampler: Upsampler::new(format!("{name}.upsample"), coarse, full),
        }
    }

    pub fn init(
        &self,
        store: &mut ParamStore,
        init: &mut Init,
        template: &TemplateMesh,
    ) -> Result<()> {
        self.vertex.init(store, init)?;
        self.joint.init(store, init)?;
        self.camera.init(store, init)?;
        self.upsampler.init(store, template)
    }

    pub fn forward<'g>(
        &self,
        b: &Binder<'g, '_>,
        tokens: &TokenSequence<'g>,
        template: &TemplateMesh,
    ) -> Result<BranchPrediction<'g>> {
        let v_tokens = tokens.role_features(TokenRole::Vertex)?;
        let j_tokens = tokens.role_features(TokenRole::Joint)?;
        if v_tokens.shape()[0] != template.coarse_count()
            || j_tokens.shape()[0] != template.joint_count()
        {
            return Err(contract(
                "token roles do not cover every template vertex and joint",
            ));
        }
        let coarse = b
            .constant(template.coarse.clone())?
            .add(self.vertex.forward(b, v_tokens)?)?;
        let joints = b
            .constant(template.joints.clone())?
            .add(self.joint.forward(b, j_tokens)?)?;
        let d = tokens.dim();
        let pooled = tokens.features.mean_axis(0)?.reshape(&[1, d])?;
        let raw = self.camera.forward(b, pooled)?.reshape(&[3])?;
        let camera = Var::concat(&[raw.slice(0, 0, 1)?.softplus()?, raw.slice(0, 1, 3)?], 0)?;
        let full = self.upsampler.forward(b, coarse)?;
        Ok(BranchPrediction {
            coarse,
            full,
            joints,
            camera,
        })
    }
}
