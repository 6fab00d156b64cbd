//! Cross-modal attention between image and keypoint tokens, with the
//! keypoint-side MLP that replaces it when no image is available.

use super::layers::{multi_head, LayerNorm, Linear, Mlp, QkvProjection};
use crate::error::{contract, Result};
use crate::params::{Binder, Init, ParamStore};
use crate::tensor::{Tensor, Var};

#[derive(Debug, Clone)]
pub struct CrossModalAttention {
    pub heads: usize,
    pub img_qkv: QkvProjection,
    pub kp_qkv: QkvProjection,
    pub img_out: Linear,
    pub kp_out: Linear,
    pub ln_img: LayerNorm,
    pub ln_kp: LayerNorm,
    /// Absent when the modality switch is disabled.
    pub switch: Option<Mlp>,
}

/// Everything one cross-modal module produces.
#[derive(Debug, Clone)]
pub struct CrossModalOutput<'g> {
    /// `LN(F_img^MHA + F_img)`; absent without an image.
    pub img_att: Option<Var<'g>>,
    /// `LN(F_kp^MHA + F_kp)` with an image, `LN(MLP(F_kp) + F_kp)` without.
    pub kp_att: Var<'g>,
    /// Keypoint-side attention output, kept for the consistency loss.
    pub kp_mha: Option<Var<'g>>,
    pub kp_mlp: Option<Var<'g>>,
    /// Image queries over keypoint keys (`T_img × T_kp`), head-averaged.
    pub attn_img_over_kp: Option<Tensor>,
    /// Keypoint queries over image keys (`T_kp × T_img`), head-averaged.
    pub attn_kp_over_img: Option<Tensor>,
}

impl<'g> CrossModalOutput<'g> {
    pub fn image_output(&self) -> Result<Var<'g>> {
        self.img_att.ok_or_else(|| {
            contract("image-branch output requested but the image modality is absent")
        })
    }

    /// The (attention, MLP) pair the consistency loss compares, if both exist.
    pub fn consistency_pair(&self) -> Option<(Var<'g>, Var<'g>)> {
        Some((self.kp_mha?, self.kp_mlp?))
    }
}

impl CrossModalAttention {
    pub fn new(name: &str, d_model: usize, heads: usize, eps: f64, modality_switch: bool) -> Self {
        Self {
            heads,
            img_qkv: QkvProjection::new(&format!("{name}.img"), d_model),
            kp_qkv: QkvProjection::new(&format!("{name}.kp"), d_model),
            img_out: Linear::new(format!("{name}.img.out"), d_model, d_model),
            kp_out: Linear::new(format!("{name}.kp.out"), d_model, d_model),
            ln_img: LayerNorm::new(format!("{name}.ln_img"), d_model, eps),
            ln_kp: LayerNorm::new(format!("{name}.ln_kp"), d_model, eps),
            switch: modality_switch
                .then(|| Mlp::new(&format!("{name}.switch"), d_model, d_model, d_model)),
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Init) -> Result<()> {
        self.img_qkv.init(store, init)?;
        self.kp_qkv.init(store, init)?;
        self.img_out.init(store, init)?;
        self.kp_out.init(store, init)?;
        self.ln_img.init(store)?;
        self.ln_kp.init(store)?;
        if let Some(m) = &self.switch {
            m.init(store, init)?;
        }
        Ok(())
    }

    /// Parameters feeding the keypoint-side attention output: keypoint
    /// queries, image keys and values, and the keypoint output projection.
    pub fn keypoint_side_params(&self) -> Vec<String> {
        let mut names = vec![
            self.kp_qkv.q.weight_name(),
            self.kp_qkv.q.bias_name(),
            self.img_qkv.k.weight_name(),
            self.img_qkv.k.bias_name(),
            self.img_qkv.v.weight_name(),
            self.img_qkv.v.bias_name(),
        ];
        names.push(self.kp_out.weight_name());
        names.push(self.kp_out.bias_name());
        names
    }

    /// Final keypoint combination `LN(update + F_kp)`, shared by both cases.
    pub fn combine_keypoint<'g>(
        &self,
        b: &Binder<'g, '_>,
        update: Var<'g>,
        f_kp: Var<'g>,
    ) -> Result<Var<'g>> {
        self.ln_kp.forward(b, update.add(f_kp)?)
    }

    pub fn forward<'g>(
        &self,
        b: &Binder<'g, '_>,
        f_img: Option<Var<'g>>,
        f_kp: Var<'g>,
    ) -> Result<CrossModalOutput<'g>> {
        let kp_mlp = match &self.switch {
            Some(m) => Some(m.forward(b, f_kp)?),
            None => None,
        };
        let Some(f_img) = f_img else {
            let mlp = kp_mlp.ok_or_else(|| {
                contract("image modality absent and no modality switch is configured")
            })?;
            return Ok(CrossModalOutput {
                img_att: None,
                kp_att: self.combine_keypoint(b, mlp, f_kp)?,
                kp_mha: None,
                kp_mlp,
                attn_img_over_kp: None,
                attn_kp_over_img: None,
            });
        };
        let q_img = self.img_qkv.q.forward(b, f_img)?;
        let k_img = self.img_qkv.k.forward(b, f_img)?;
        let v_img = self.img_qkv.v.forward(b, f_img)?;
        let q_kp = self.kp_qkv.q.forward(b, f_kp)?;
        let k_kp = self.kp_qkv.k.forward(b, f_kp)?;
        let v_kp = self.kp_qkv.v.forward(b, f_kp)?;

        let (img_heads, attn_img) = multi_head(q_img, k_kp, v_kp, self.heads)?;
        let img_mha = self.img_out.forward(b, img_heads)?;
        let (kp_heads, attn_kp) = multi_head(q_kp, k_img, v_img, self.heads)?;
        let kp_mha = self.kp_out.forward(b, kp_heads)?;

        Ok(CrossModalOutput {
            img_att: Some(self.ln_img.forward(b, img_mha.add(f_img)?)?),
            kp_att: self.combine_keypoint(b, kp_mha, f_kp)?,
            kp_mha: Some(kp_mha),
            kp_mlp,
            attn_img_over_kp: Some(attn_img),
            attn_kp_over_img: Some(attn_kp),
        })
    }
}

/// Ablation baselines that replace cross attention with pooled exchange.
#[derive(Debug, Clone)]
pub enum PooledFusion {
    /// `F' = LN(F + mean(other))`.
    Add { ln_img: LayerNorm, ln_kp: LayerNorm },
    /// `F' = LN(F + P([F ⊕ mean(other)]))` with a `2d → d` projection.
    Concat {
        proj_img: Linear,
        proj_kp: Linear,
        ln_img: LayerNorm,
        ln_kp: LayerNorm,
    },
}

impl PooledFusion {
    pub fn add(name: &str, d_model: usize, eps: f64) -> Self {
        Self::Add {
            ln_img: LayerNorm::new(format!("{name}.ln_img"), d_model, eps),
            ln_kp: LayerNorm::new(format!("{name}.ln_kp"), d_model, eps),
        }
    }

    pub fn concat(name: &str, d_model: usize, eps: f64) -> Self {
        Self::Concat {
            proj_img: Linear::new(format!("{name}.img.proj"), 2 * d_model, d_model),
            proj_kp: Linear::new(format!("{name}.kp.proj"), 2 * d_model, d_model),
            ln_img: LayerNorm::new(format!("{name}.ln_img"), d_model, eps),
            ln_kp: LayerNorm::new(format!("{name}.ln_kp"), d_model, eps),
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Init) -> Result<()> {
        match self {
            Self::Add { ln_img, ln_kp } => {
                ln_img.init(store)?;
                ln_kp.init(store)
            }
            Self::Concat {
                proj_img,
                proj_kp,
                ln_img,
                ln_kp,
            } => {
                proj_img.init(store, init)?;
                proj_kp.init(store, init)?;
                ln_img.init(store)?;
                ln_kp.init(store)
            }
        }
    }

    fn pooled<'g>(x: Var<'g>, rows: usize) -> Result<Var<'g>> {
        let d = x.shape()[1];
        Ok(x.mean_axis(0)?.reshape(&[1, d])?.broadcast_to(&[rows, d])?)
    }

    fn one_side<'g>(
        &self,
        b: &Binder<'g, '_>,
        x: Var<'g>,
        other: Var<'g>,
        image_side: bool,
    ) -> Result<Var<'g>> {
        let pooled = Self::pooled(other, x.shape()[0])?;
        match self {
            Self::Add { ln_img, ln_kp } => {
                let ln = if image_side { ln_img } else { ln_kp };
                ln.forward(b, x.add(pooled)?)
            }
            Self::Concat {
                proj_img,
                proj_kp,
                ln_img,
                ln_kp,
            } => {
                let (proj, ln) = if image_side {
                    (proj_img, ln_img)
                } else {
                    (proj_kp, ln_kp)
                };
                let mixed = proj.forward(b, Var::concat(&[x, pooled], 1)?)?;
                ln.forward(b, x.add(mixed)?)
            }
        }
    }

    /// Exchanges pooled features; a missing side leaves the other unchanged.
    pub fn forward<'g>(
        &self,
        b: &Binder<'g, '_>,
        f_img: Option<Var<'g>>,
        f_kp: Option<Var<'g>>,
    ) -> Result<(Option<Var<'g>>, Option<Var<'g>>)> {
        match (f_img, f_kp) {
            (Some(i), Some(k)) => Ok((
                Some(self.one_side(b, i, k, true)?),
                Some(self.one_side(b, k, i, false)?),
            )),
            other => Ok(other),
        }
    }
}
