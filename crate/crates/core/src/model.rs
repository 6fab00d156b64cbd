//! The full two-branch network: backbone and detector, both tokenizers, the
//! block stack, per-branch mesh heads, and the ensemble.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionKind, AttentionRecord, StackShape, XFormerStack};
use crate::config::ModelConfig;
use crate::data::BodyModel;
use crate::error::{contract, Result};
use crate::image::{Backbone, HeatmapVars, ImageTokenizer, KeypointDecoder};
use crate::keypoint::{
    decode_keypoints, Gcn, HeatmapSet, KeypointTokenizer, Keypoints2D, SkeletonGraph,
};
use crate::mesh::{
    ensemble, BranchPrediction, BranchTag, JointRegressor, MeshHead, MeshPrediction, TemplateMesh,
};
use crate::params::{Binder, Init, ParamStore};
use crate::tensor::{Graph, Tensor};
use crate::tokens::{TokenRole, TokenSequence};

/// Fixed, non-learned data the network is built around.
#[derive(Debug, Clone)]
pub struct ModelAssets {
    pub template: TemplateMesh,
    pub joint_regressor: JointRegressor,
    pub skeleton: SkeletonGraph,
}

impl ModelAssets {
    /// Assets taken from the procedural body at the configured resolution.
    pub fn procedural(cfg: &ModelConfig) -> Result<Self> {
        let body = BodyModel::new(
            cfg.full_vertices,
            cfg.coarse_vertices,
            cfg.num_joints,
            cfg.num_keypoints,
        )?;
        Ok(Self {
            template: body.template().clone(),
            joint_regressor: body.joint_regressor().clone(),
            skeleton: SkeletonGraph::for_keypoints(cfg.num_keypoints)?,
        })
    }
}

/// What the network sees for one sample.
#[derive(Debug, Clone, Copy, Default)]
pub struct ModelInput<'a> {
    /// `3 × H × W`; absent for mocap samples.
    pub image: Option<&'a Tensor>,
    /// Keypoint-branch input in pixels; decoded from the heatmaps when absent.
    pub keypoints: Option<&'a Keypoints2D>,
}

/// Everything one forward pass produces, as graph values.
#[derive(Debug, Clone)]
pub struct ModelOutput<'g> {
    pub heatmaps: Option<HeatmapVars<'g>>,
    pub keypoint: Option<BranchPrediction<'g>>,
    pub image: Option<BranchPrediction<'g>>,
    pub consistency: Vec<(crate::tensor::Var<'g>, crate::tensor::Var<'g>)>,
    pub attention: Vec<AttentionRecord>,
    pub keypoint_roles: Vec<TokenRole>,
    pub image_roles: Vec<TokenRole>,
    /// The 2D keypoints the keypoint branch consumed.
    pub keypoints_used: Option<Keypoints2D>,
}

impl ModelOutput<'_> {
    /// Query and key token roles of an attention record of the given kind.
    pub fn roles_for(&self, kind: AttentionKind) -> (&[TokenRole], &[TokenRole]) {
        let (img, kp) = (self.image_roles.as_slice(), self.keypoint_roles.as_slice());
        match kind {
            AttentionKind::ImageSelf => (img, img),
            AttentionKind::KeypointSelf => (kp, kp),
            AttentionKind::ImageOverKeypoint => (img, kp),
            AttentionKind::KeypointOverImage => (kp, img),
        }
    }
}

/// Detached predictions: per branch and fused.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub heatmaps: Option<HeatmapSet>,
    pub keypoint: Option<MeshPrediction>,
    pub image: Option<MeshPrediction>,
    pub fused: MeshPrediction,
}

impl Prediction {
    pub fn branch(&self, tag: BranchTag) -> Option<&MeshPrediction> {
        match tag {
            BranchTag::Keypoint => self.keypoint.as_ref(),
            BranchTag::Image => self.image.as_ref(),
            BranchTag::Fused => Some(&self.fused),
        }
    }
}

#[derive(Debug)]
pub struct XFormerModel {
    pub config: ModelConfig,
    pub assets: ModelAssets,
    pub backbone: Option<Backbone>,
    pub decoder: Option<KeypointDecoder>,
    pub image_tokenizer: Option<ImageTokenizer>,
    pub gcn: Option<Gcn>,
    pub keypoint_tokenizer: Option<KeypointTokenizer>,
    pub stack: XFormerStack,
    pub keypoint_head: Option<MeshHead>,
    pub image_head: Option<MeshHead>,
    backbone_calls: AtomicU64,
}

impl XFormerModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let assets = ModelAssets::procedural(&config)?;
        Self::with_assets(config, assets)
    }

    pub fn with_assets(config: ModelConfig, assets: ModelAssets) -> Result<Self> {
        config.validate()?;
        let c = &config;
        if assets.template.coarse_count() != c.coarse_vertices
            || assets.template.joint_count() != c.num_joints
            || assets.template.full_vertices != c.full_vertices
            || assets.skeleton.names.len() != c.num_keypoints
            || assets.joint_regressor.rows() != c.num_joints
            || assets.joint_regressor.vertices() != c.full_vertices
        {
            return Err(contract("model assets do not match the configuration"));
        }
        let (kp, img) = (
            c.branches.has_keypoint_branch(),
            c.branches.has_image_branch(),
        );
        let head = |name: &str| MeshHead::new(name, c.d_model, c.coarse_vertices, c.full_vertices);
        let shape = StackShape {
            d_model: c.d_model,
            heads: c.heads,
            eps: c.layer_norm_eps,
            branches: c.branches,
            modality_switch: c.modality_switch,
        };
        Ok(Self {
            backbone: c
                .has_backbone()
                .then(|| Backbone::new("backbone", &c.backbone_channels)),
            decoder: c.has_decoder().then(|| {
                KeypointDecoder::new(
                    "decoder",
                    &c.backbone_channels,
                    &c.decoder_channels,
                    c.num_keypoints,
                )
            }),
            image_tokenizer: img.then(|| {
                ImageTokenizer::new(
                    "image.tokens",
                    c.global_channels(),
                    c.grid_channels(),
                    c.d_model,
                )
            }),
            gcn: kp.then(|| Gcn::new("keypoint.gcn", 2, c.gcn_width, c.gcn_depth)),
            keypoint_tokenizer: kp
                .then(|| KeypointTokenizer::new("keypoint.tokens", c.gcn_width, c.d_model)),
            stack: XFormerStack::new("xformer", &c.blocks, &shape),
            keypoint_head: kp.then(|| head("keypoint.head")),
            image_head: img.then(|| head("image.head")),
            backbone_calls: AtomicU64::new(0),
            config,
            assets,
        })
    }

    /// Fresh parameters drawn from `seed`.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut rng);
        if let Some(m) = &self.backbone {
            m.init(&mut store, &mut init)?;
        }
        if let Some(m) = &self.decoder {
            m.init(&mut store, &mut init)?;
        }
        if let Some(m) = &self.image_tokenizer {
            m.init(&mut store, &mut init)?;
        }
        if let Some(m) = &self.gcn {
            m.init(&mut store, &mut init)?;
        }
        if let Some(m) = &self.keypoint_tokenizer {
            m.init(&mut store, &mut init)?;
        }
        self.stack.init(&mut store, &mut init)?;
        for h in self.keypoint_head.iter().chain(&self.image_head) {
            h.init(&mut store, &mut init, &self.assets.template)?;
        }
        Ok(store)
    }

    /// How many times the backbone has run; stays 0 when no image is seen.
    pub fn backbone_calls(&self) -> u64 {
        self.backbone_calls.load(Ordering::Relaxed)
    }

    pub fn forward<'g>(
        &self,
        b: &Binder<'g, '_>,
        input: ModelInput<'_>,
    ) -> Result<ModelOutput<'g>> {
        let c = &self.config;
        let template = &self.assets.template;
        let (h, w) = (c.image_height, c.image_width);

        let feats = match (input.image, &self.backbone) {
            (Some(img), Some(bb)) => {
                if img.shape() != [3, h, w] {
                    return Err(contract(format!(
                        "image must be 3×{h}×{w}, got {:?}",
                        img.shape()
                    )));
                }
                self.backbone_calls.fetch_add(1, Ordering::Relaxed);
                Some(bb.forward(b, b.constant(img.clone())?)?)
            }
            _ => None,
        };
        let heatmaps = match (&feats, &self.decoder) {
            (Some(f), Some(d)) => Some(d.forward(b, f)?),
            _ => None,
        };

        let mut keypoints_used = None;
        let kp_tokens = match (&self.gcn, &self.keypoint_tokenizer) {
            (Some(gcn), Some(tok)) => {
                let kp = match (input.keypoints, &heatmaps) {
                    (Some(k), _) => k.clone(),
                    (None, Some(maps)) => {
                        decode_keypoints(&maps.to_set()?, c.visibility_threshold)?
                    }
                    (None, None) => {
                        return Err(contract(
                            "keypoint branch needs keypoints or an image to detect them",
                        ))
                    }
                };
                if kp.len() != c.num_keypoints {
                    return Err(contract(format!(
                        "{} keypoints given, {} expected",
                        kp.len(),
                        c.num_keypoints
                    )));
                }
                let coords = b.constant(kp.normalized(h, w)?)?;
                let features = gcn.forward(b, coords, &self.assets.skeleton.adjacency)?;
                keypoints_used = Some(kp);
                Some(tok.forward(b, features, coords, template)?)
            }
            _ => None,
        };
        let img_tokens: Option<TokenSequence<'g>> = match (&feats, &self.image_tokenizer) {
            (Some(f), Some(tok)) => Some(tok.forward(b, f, template)?),
            (None, Some(_)) if !c.branches.has_keypoint_branch() => {
                return Err(contract("image-only model needs an image"));
            }
            _ => None,
        };

        let out = self.stack.forward(
            b,
            img_tokens.as_ref().map(|t| t.features),
            kp_tokens.as_ref().map(|t| t.features),
        )?;

        let keypoint = match (&self.keypoint_head, &kp_tokens, out.kp) {
            (Some(head), Some(tokens), Some(f)) => {
                Some(head.forward(b, &tokens.with_features(f)?, template)?)
            }
            _ => None,
        };
        let image = match (&self.image_head, &img_tokens, out.img) {
            (Some(head), Some(tokens), Some(f)) => {
                Some(head.forward(b, &tokens.with_features(f)?, template)?)
            }
            _ => None,
        };
        Ok(ModelOutput {
            heatmaps,
            keypoint,
            image,
            consistency: out.consistency,
            attention: out.attention,
            keypoint_roles: kp_tokens.map(|t| t.roles).unwrap_or_default(),
            image_roles: img_tokens.map(|t| t.roles).unwrap_or_default(),
            keypoints_used,
        })
    }

    /// Inference with frozen parameters; the fused output is the
    /// `λ`-ensemble when both branches ran, otherwise the single branch.
    pub fn predict(&self, params: &ParamStore, input: ModelInput<'_>) -> Result<Prediction> {
        self.predict_with_weight(params, input, self.config.ensemble_weight)
    }

    pub fn predict_with_weight(
        &self,
        params: &ParamStore,
        input: ModelInput<'_>,
        lambda: f64,
    ) -> Result<Prediction> {
        let g = Graph::new();
        let b = params.bind_frozen(&g);
        let out = self.forward(&b, input)?;
        let keypoint = out
            .keypoint
            .map(|p| p.to_prediction(BranchTag::Keypoint))
            .transpose()?;
        let image = out
            .image
            .map(|p| p.to_prediction(BranchTag::Image))
            .transpose()?;
        let fused = match (&keypoint, &image) {
            (Some(k), Some(i)) => ensemble(k, i, lambda)?,
            (Some(only), None) | (None, Some(only)) => MeshPrediction {
                branch: BranchTag::Fused,
                ..only.clone()
            },
            (None, None) => return Err(contract("no branch produced a prediction")),
        };
        Ok(Prediction {
            heatmaps: out.heatmaps.map(|m| m.to_set()).transpose()?,
            keypoint,
            image,
            fused,
        })
    }

    /// Token counts `(image, keypoint)` entering the block stack.
    pub fn token_counts(&self) -> (usize, usize) {
        let c = &self.config;
        (
            if c.branches.has_image_branch() {
                c.image_tokens()
            } else {
                0
            },
            if c.branches.has_keypoint_branch() {
                c.keypoint_tokens()
            } else {
                0
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::BranchMode;

    fn small() -> (XFormerModel, ParamStore) {
        let m = XFormerModel::new(ModelConfig::small_toy()).unwrap();
        let p = m.init_params(0).unwrap();
        (m, p)
    }

    #[test]
    fn forward_shapes() {
        let (m, p) = small();
        let img = Tensor::from_fn(&[3, 128, 128], |i| ((i * 31) % 17) as f64 / 17.0).unwrap();
        let pred = m
            .predict(
                &p,
                ModelInput {
                    image: Some(&img),
                    keypoints: None,
                },
            )
            .unwrap();
        assert_eq!(pred.fused.full.shape(), &[128, 3]);
        assert_eq!(pred.keypoint.as_ref().unwrap().joints.shape(), &[14, 3]);
        assert_eq!(
            pred.heatmaps.as_ref().unwrap().heatmaps.shape(),
            &[17, 32, 32]
        );
        assert!(pred.fused.camera.scale > 0.0);
        assert_eq!(m.backbone_calls(), 1);
    }

    #[test]
    fn keypoints_alone_use_the_switch_path() {
        let (m, p) = small();
        let kp = Keypoints2D::new(vec![[64.0, 64.0]; 17], vec![true; 17]).unwrap();
        let pred = m
            .predict(
                &p,
                ModelInput {
                    image: None,
                    keypoints: Some(&kp),
                },
            )
            .unwrap();
        assert!(pred.image.is_none());
        assert_eq!(pred.fused.full, pred.keypoint.unwrap().full);
        assert_eq!(m.backbone_calls(), 0);
    }

    #[test]
    fn image_only_model_has_no_detector() {
        let cfg = ModelConfig {
            branches: BranchMode::ImageOnly,
            ..ModelConfig::small_toy()
        };
        let m = XFormerModel::new(cfg).unwrap();
        assert!(m.decoder.is_none() && m.gcn.is_none());
        let p = m.init_params(1).unwrap();
        assert!(p
            .names()
            .all(|n| !n.starts_with("decoder") && !n.starts_with("keypoint")));
    }
}
