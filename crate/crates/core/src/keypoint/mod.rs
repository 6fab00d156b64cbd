//! Keypoint branch front end: heatmap/offset maps, the skeleton GCN, and
//! keypoint-branch token assembly.

mod maps;
mod skeleton;

pub use maps::{
    decode_keypoints, render_gt_maps, HeatmapSet, Keypoints2D, HEATMAP_STRIDE, OFFSET_LIMIT,
    OFFSET_RADIUS,
};
pub use skeleton::{SkeletonGraph, COCO_EDGES, COCO_NAMES};

use crate::attention::Linear;
use crate::error::{contract, Result};
use crate::mesh::TemplateMesh;
use crate::params::{Binder, Init, ParamStore};
use crate::tensor::{Tensor, Var};
use crate::tokens::{TokenRole, TokenSequence};

/// Stacked graph convolutions `X ← relu(Â·X·Θ + b)`.
#[derive(Debug, Clone)]
pub struct Gcn {
    pub layers: Vec<Linear>,
}

impl Gcn {
    pub fn new(name: &str, d_in: usize, width: usize, depth: usize) -> Self {
        Self {
            layers: (0..depth)
                .map(|l| {
                    Linear::new(
                        format!("{name}.{l}"),
                        if l == 0 { d_in } else { width },
                        width,
                    )
                })
                .collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.d_out)
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Init) -> Result<()> {
        for l in &self.layers {
            store.insert(l.weight_name(), init.he(&[l.d_in, l.d_out], l.d_in)?);
            store.insert(l.bias_name(), Tensor::zeros(&[l.d_out])?);
        }
        Ok(())
    }

    pub fn forward<'g>(
        &self,
        b: &Binder<'g, '_>,
        x: Var<'g>,
        adjacency: &Tensor,
    ) -> Result<Var<'g>> {
        let a = b.constant(adjacency.clone())?;
        let mut h = x;
        for l in &self.layers {
            let w = b.param(&l.weight_name())?;
            let bias = b.param(&l.bias_name())?;
            h = a.matmul(h)?.matmul(w)?.add(bias)?.relu()?;
        }
        Ok(h)
    }
}

/// Builds `F_kp`: template tokens `(xyz ⊕ pooled feature)` then keypoint
/// tokens `(feature ⊕ normalized 2D)`, each linearly projected to `d_model`.
#[derive(Debug, Clone)]
pub struct KeypointTokenizer {
    pub template_proj: Linear,
    pub keypoint_proj: Linear,
}

impl KeypointTokenizer {
    pub fn new(name: &str, feature_dim: usize, d_model: usize) -> Self {
        Self {
            template_proj: Linear::new(format!("{name}.template"), 3 + feature_dim, d_model),
            keypoint_proj: Linear::new(format!("{name}.keypoint"), feature_dim + 2, d_model),
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Init) -> Result<()> {
        self.template_proj.init(store, init)?;
        self.keypoint_proj.init(store, init)
    }

    pub fn forward<'g>(
        &self,
        b: &Binder<'g, '_>,
        features: Var<'g>,
        coords: Var<'g>,
        template: &TemplateMesh,
    ) -> Result<TokenSequence<'g>> {
        let fs = features.shape();
        if fs.len() != 2 || fs[1] + 3 != self.template_proj.d_in || coords.shape() != [fs[0], 2] {
            return Err(contract(format!(
                "keypoint features {fs:?} / coords {:?} do not match the tokenizer",
                coords.shape()
            )));
        }
        let n_template = template.coarse_count() + template.joint_count();
        let xyz = b.constant(Tensor::new(
            &[n_template, 3],
            [template.coarse.data(), template.joints.data()].concat(),
        )?)?;
        let pooled = features
            .mean_axis(0)?
            .reshape(&[1, fs[1]])?
            .broadcast_to(&[n_template, fs[1]])?;
        let template_tokens = self
            .template_proj
            .forward(b, Var::concat(&[xyz, pooled], 1)?)?;
        let kp_tokens = self
            .keypoint_proj
            .forward(b, Var::concat(&[features, coords], 1)?)?;
        let mut roles = vec![TokenRole::Vertex; template.coarse_count()];
        roles.extend(vec![TokenRole::Joint; template.joint_count()]);
        roles.extend(vec![TokenRole::Keypoint; fs[0]]);
        TokenSequence::new(Var::concat(&[template_tokens, kp_tokens], 0)?, roles)
    }
}
