//! Stacked blocks: front self-attention, fusion, back self-attention.

use super::cross::{CrossModalAttention, PooledFusion};
use super::encoder::EncoderLayer;
use crate::config::{BlockConfig, BranchMode, FusionMode};
use crate::error::Result;
use crate::params::{Binder, Init, ParamStore};
use crate::tensor::{Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    ImageSelf,
    KeypointSelf,
    ImageOverKeypoint,
    KeypointOverImage,
}

/// One exported attention matrix (rows = queries, head-averaged).
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub name: String,
    pub kind: AttentionKind,
    pub weights: Tensor,
}

#[derive(Debug, Clone)]
pub enum FusionStage {
    Cross(CrossModalAttention),
    Pooled(PooledFusion),
}

#[derive(Debug, Clone)]
pub struct XFormerBlock {
    pub name: String,
    pub front_img: Vec<EncoderLayer>,
    pub front_kp: Vec<EncoderLayer>,
    pub fusion: Vec<FusionStage>,
    pub back_img: Vec<EncoderLayer>,
    pub back_kp: Vec<EncoderLayer>,
}

/// Output of a block or a whole stack.
#[derive(Debug, Clone, Default)]
pub struct BlockOutput<'g> {
    pub img: Option<Var<'g>>,
    pub kp: Option<Var<'g>>,
    /// `(F_kp^MHA, F_kp^MLP)` from every cross-modal module that saw an image.
    pub consistency: Vec<(Var<'g>, Var<'g>)>,
    pub attention: Vec<AttentionRecord>,
}

#[derive(Debug, Clone, Copy)]
pub struct StackShape {
    pub d_model: usize,
    pub heads: usize,
    pub eps: f64,
    pub branches: BranchMode,
    pub modality_switch: bool,
}

fn layers(prefix: &str, n: usize, present: bool, s: &StackShape) -> Vec<EncoderLayer> {
    if !present {
        return Vec::new();
    }
    (0..n)
        .map(|i| EncoderLayer::new(&format!("{prefix}.{i}"), s.d_model, s.heads, s.eps))
        .collect()
}

fn run_layers<'g>(
    b: &Binder<'g, '_>,
    layers: &[EncoderLayer],
    x: Option<Var<'g>>,
    kind: AttentionKind,
    records: &mut Vec<AttentionRecord>,
) -> Result<Option<Var<'g>>> {
    let Some(mut x) = x else { return Ok(None) };
    for layer in layers {
        let (y, w) = layer.forward(b, x)?;
        records.push(AttentionRecord {
            name: layer.out.name.clone(),
            kind,
            weights: w,
        });
        x = y;
    }
    Ok(Some(x))
}

impl XFormerBlock {
    pub fn new(name: &str, cfg: &BlockConfig, s: &StackShape) -> Self {
        let (has_img, has_kp) = (
            s.branches.has_image_branch(),
            s.branches.has_keypoint_branch(),
        );
        let fused = s.branches == BranchMode::Both;
        let fusion = if !fused {
            Vec::new()
        } else {
            match cfg.fusion {
                FusionMode::CrossAttention => (0..cfg.n_cross)
                    .map(|i| {
                        FusionStage::Cross(CrossModalAttention::new(
                            &format!("{name}.cross.{i}"),
                            s.d_model,
                            s.heads,
                            s.eps,
                            s.modality_switch,
                        ))
                    })
                    .collect(),
                FusionMode::Add => vec![FusionStage::Pooled(PooledFusion::add(
                    &format!("{name}.add"),
                    s.d_model,
                    s.eps,
                ))],
                FusionMode::Concat => vec![FusionStage::Pooled(PooledFusion::concat(
                    &format!("{name}.concat"),
                    s.d_model,
                    s.eps,
                ))],
                FusionMode::None => Vec::new(),
            }
        };
        Self {
            name: name.to_string(),
            front_img: layers(&format!("{name}.front.img"), cfg.n_front, has_img, s),
            front_kp: layers(&format!("{name}.front.kp"), cfg.n_front, has_kp, s),
            fusion,
            back_img: layers(&format!("{name}.back.img"), cfg.n_back, has_img, s),
            back_kp: layers(&format!("{name}.back.kp"), cfg.n_back, has_kp, s),
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Init) -> Result<()> {
        for l in self.front_img.iter().chain(&self.front_kp) {
            l.init(store, init)?;
        }
        for f in &self.fusion {
            match f {
                FusionStage::Cross(c) => c.init(store, init)?,
                FusionStage::Pooled(p) => p.init(store, init)?,
            }
        }
        for l in self.back_img.iter().chain(&self.back_kp) {
            l.init(store, init)?;
        }
        Ok(())
    }

    pub fn cross_modules(&self) -> impl Iterator<Item = &CrossModalAttention> {
        self.fusion.iter().filter_map(|f| match f {
            FusionStage::Cross(c) => Some(c),
            FusionStage::Pooled(_) => None,
        })
    }

    pub fn forward<'g>(
        &self,
        b: &Binder<'g, '_>,
        f_img: Option<Var<'g>>,
        f_kp: Option<Var<'g>>,
    ) -> Result<BlockOutput<'g>> {
        let mut out = BlockOutput::default();
        let mut img = run_layers(
            b,
            &self.front_img,
            f_img,
            AttentionKind::ImageSelf,
            &mut out.attention,
        )?;
        let mut kp = run_layers(
            b,
            &self.front_kp,
            f_kp,
            AttentionKind::KeypointSelf,
            &mut out.attention,
        )?;
        for stage in &self.fusion {
            match stage {
                FusionStage::Cross(c) => {
                    let Some(k) = kp else { continue };
                    let o = c.forward(b, img, k)?;
                    if let Some(pair) = o.consistency_pair() {
                        out.consistency.push(pair);
                    }
                    if let (Some(a), Some(w)) = (o.attn_img_over_kp, o.attn_kp_over_img) {
                        out.attention.push(AttentionRecord {
                            name: c.img_out.name.clone(),
                            kind: AttentionKind::ImageOverKeypoint,
                            weights: a,
                        });
                        out.attention.push(AttentionRecord {
                            name: c.kp_out.name.clone(),
                            kind: AttentionKind::KeypointOverImage,
                            weights: w,
                        });
                    }
                    img = o.img_att;
                    kp = Some(o.kp_att);
                }
                FusionStage::Pooled(p) => (img, kp) = p.forward(b, img, kp)?,
            }
        }
        out.img = run_layers(
            b,
            &self.back_img,
            img,
            AttentionKind::ImageSelf,
            &mut out.attention,
        )?;
        out.kp = run_layers(
            b,
            &self.back_kp,
            kp,
            AttentionKind::KeypointSelf,
            &mut out.attention,
        )?;
        Ok(out)
    }
}

/// `n_blocks` blocks applied in sequence.
#[derive(Debug, Clone)]
pub struct XFormerStack {
    pub blocks: Vec<XFormerBlock>,
}

impl XFormerStack {
    pub fn new(name: &str, cfg: &BlockConfig, s: &StackShape) -> Self {
        Self {
            blocks: (0..cfg.n_blocks)
                .map(|i| XFormerBlock::new(&format!("{name}.{i}"), cfg, s))
                .collect(),
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Init) -> Result<()> {
        self.blocks.iter().try_for_each(|blk| blk.init(store, init))
    }

    pub fn cross_modules(&self) -> impl Iterator<Item = &CrossModalAttention> {
        self.blocks.iter().flat_map(XFormerBlock::cross_modules)
    }

    pub fn forward<'g>(
        &self,
        b: &Binder<'g, '_>,
        f_img: Option<Var<'g>>,
        f_kp: Option<Var<'g>>,
    ) -> Result<BlockOutput<'g>> {
        let mut acc = BlockOutput {
            img: f_img,
            kp: f_kp,
            ..BlockOutput::default()
        };
        for blk in &self.blocks {
            let o = blk.forward(b, acc.img, acc.kp)?;
            acc.img = o.img;
            acc.kp = o.kp;
            acc.consistency.extend(o.consistency);
            acc.attention.extend(o.attention);
        }
        Ok(acc)
    }
}
