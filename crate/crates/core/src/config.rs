//! Model, training, and data configuration with load-time validation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the two branches exchange information inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    CrossAttention,
    Add,
    Concat,
    None,
}

/// Which prediction branches exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchMode {
    Both,
    KeypointOnly,
    ImageOnly,
}

impl BranchMode {
    pub fn has_keypoint_branch(self) -> bool {
        matches!(self, Self::Both | Self::KeypointOnly)
    }

    pub fn has_image_branch(self) -> bool {
        matches!(self, Self::Both | Self::ImageOnly)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    /// Self-attention layers per branch before fusion.
    pub n_front: usize,
    /// Cross-modal modules per block (ignored unless fusion is cross-attention).
    pub n_cross: usize,
    /// Self-attention layers per branch after fusion.
    pub n_back: usize,
    /// Number of stacked blocks.
    pub n_blocks: usize,
    pub fusion: FusionMode,
}

impl BlockConfig {
    pub fn small() -> Self {
        Self {
            n_front: 0,
            n_cross: 1,
            n_back: 0,
            n_blocks: 1,
            fusion: FusionMode::CrossAttention,
        }
    }

    pub fn large() -> Self {
        Self {
            n_front: 1,
            n_cross: 1,
            n_back: 2,
            n_blocks: 3,
            fusion: FusionMode::CrossAttention,
        }
    }

    /// Fusion stages per block as actually built.
    pub fn fusion_stages(&self) -> usize {
        match self.fusion {
            FusionMode::CrossAttention => self.n_cross,
            FusionMode::Add | FusionMode::Concat => 1,
            FusionMode::None => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 {
            return Err(Error::Config("n_blocks must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Detector keypoints (COCO layout by default).
    pub num_keypoints: usize,
    /// Regressed 3D joints.
    pub num_joints: usize,
    pub coarse_vertices: usize,
    pub full_vertices: usize,
    pub blocks: BlockConfig,
    pub branches: BranchMode,
    /// Keypoint-side MLP that stands in for cross attention when no image is present.
    pub modality_switch: bool,
    /// Weight of the keypoint branch in the fused prediction.
    pub ensemble_weight: f64,
    pub backbone_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    pub gcn_depth: usize,
    pub gcn_width: usize,
    pub heatmap_sigma: f64,
    pub visibility_threshold: f64,
    pub layer_norm_eps: f64,
    pub root_joint: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// 128² input, one cross-modal module, 32/128-vertex meshes.
    pub fn small_toy() -> Self {
        Self {
            image_height: 128,
            image_width: 128,
            d_model: 64,
            heads: 4,
            num_keypoints: 17,
            num_joints: 14,
            coarse_vertices: 32,
            full_vertices: 128,
            blocks: BlockConfig::small(),
            branches: BranchMode::Both,
            modality_switch: true,
            ensemble_weight: 0.5,
            backbone_channels: vec![8, 16, 32, 64, 128],
            decoder_channels: vec![64, 32, 16],
            gcn_depth: 2,
            gcn_width: 64,
            heatmap_sigma: 2.0,
            visibility_threshold: 0.05,
            layer_norm_eps: 1e-5,
            root_joint: 0,
            seed: 0,
        }
    }

    pub fn large_toy() -> Self {
        Self {
            blocks: BlockConfig::large(),
            ..Self::small_toy()
        }
    }

    /// Full-size mesh resolution (431 coarse, 6890 full vertices); meant for
    /// shape checks and benchmarking, not training.
    pub fn paper_shape() -> Self {
        Self {
            coarse_vertices: 431,
            full_vertices: 6890,
            ..Self::small_toy()
        }
    }

    /// Looks up a named preset.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "small_toy" => Ok(Self::small_toy()),
            "large_toy" => Ok(Self::large_toy()),
            "paper_shape" => Ok(Self::paper_shape()),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn heatmap_size(&self) -> (usize, usize) {
        (self.image_height / 4, self.image_width / 4)
    }

    pub fn grid_size(&self) -> (usize, usize) {
        (self.image_height / 16, self.image_width / 16)
    }

    /// Vertex plus joint tokens shared by both branches.
    pub fn template_tokens(&self) -> usize {
        self.coarse_vertices + self.num_joints
    }

    pub fn image_tokens(&self) -> usize {
        let (gh, gw) = self.grid_size();
        self.template_tokens() + gh * gw
    }

    pub fn keypoint_tokens(&self) -> usize {
        self.template_tokens() + self.num_keypoints
    }

    /// Channel width of the stride-16 stage (the grid-token source).
    pub fn grid_channels(&self) -> usize {
        self.backbone_channels[3]
    }

    pub fn global_channels(&self) -> usize {
        self.backbone_channels[4]
    }

    /// Whether the detector head (heatmaps + offsets) is built.
    pub fn has_decoder(&self) -> bool {
        self.branches.has_keypoint_branch()
    }

    /// Whether the backbone is built at all.
    pub fn has_backbone(&self) -> bool {
        self.has_decoder() || self.branches.has_image_branch()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_height == 0
            || self.image_width == 0
            || self.image_height % 32 != 0
            || self.image_width % 32 != 0
        {
            return fail(format!(
                "image extent {}×{} must be positive multiples of 32",
                self.image_height, self.image_width
            ));
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        for (name, v) in [
            ("num_keypoints", self.num_keypoints),
            ("num_joints", self.num_joints),
            ("coarse_vertices", self.coarse_vertices),
            ("gcn_depth", self.gcn_depth),
            ("gcn_width", self.gcn_width),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.full_vertices < self.coarse_vertices {
            return fail(format!(
                "full_vertices {} below coarse_vertices {}",
                self.full_vertices, self.coarse_vertices
            ));
        }
        if self.backbone_channels.len() != 5 || self.backbone_channels.contains(&0) {
            return fail("backbone needs five positive stage widths".into());
        }
        if self.decoder_channels.len() != 3 || self.decoder_channels.contains(&0) {
            return fail("decoder needs three positive upsampling widths".into());
        }
        if !(0.0..=1.0).contains(&self.ensemble_weight) {
            return fail(format!(
                "ensemble_weight {} outside [0, 1]",
                self.ensemble_weight
            ));
        }
        if !(self.heatmap_sigma > 0.0 && self.layer_norm_eps > 0.0) {
            return fail("heatmap_sigma and layer_norm_eps must be positive".into());
        }
        if self.root_joint >= self.num_joints {
            return fail(format!("root_joint {} out of range", self.root_joint));
        }
        self.blocks.validate()
    }
}

/// Per-term loss weights; all default to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub map: f64,
    pub kp_vertex: f64,
    pub kp_joint: f64,
    pub kp_joint_reg: f64,
    pub kp_proj: f64,
    pub img_vertex: f64,
    pub img_joint: f64,
    pub img_joint_reg: f64,
    pub img_proj: f64,
    pub consistency: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            map: 1.0,
            kp_vertex: 1.0,
            kp_joint: 1.0,
            kp_joint_reg: 1.0,
            kp_proj: 1.0,
            img_vertex: 1.0,
            img_joint: 1.0,
            img_joint_reg: 1.0,
            img_proj: 1.0,
            consistency: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.map,
            self.kp_vertex,
            self.kp_joint,
            self.kp_joint_reg,
            self.kp_proj,
            self.img_vertex,
            self.img_joint,
            self.img_joint_reg,
            self.img_proj,
            self.consistency,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(
                "loss weights must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Where the keypoint branch gets its 2D input for image samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeypointSource {
    /// Annotated keypoints.
    GroundTruth,
    /// Keypoints decoded from the predicted heatmaps.
    Decoded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub weights: LossWeights,
    pub consistency_loss: bool,
    /// Supervise the keypoint-branch camera on image-free samples.
    pub mocap_reprojection: bool,
    /// Drop image-free samples from the training stream.
    pub skip_mocap: bool,
    pub train_keypoints: KeypointSource,
    pub eval_keypoints: KeypointSource,
    /// Evaluate on the held-out set every this many steps (0 disables).
    pub eval_every: u64,
    /// Worker threads for per-sample gradients; reduction order is fixed.
    pub threads: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            steps: 1000,
            weights: LossWeights::default(),
            consistency_loss: true,
            mocap_reprojection: true,
            skip_mocap: false,
            train_keypoints: KeypointSource::GroundTruth,
            eval_keypoints: KeypointSource::Decoded,
            eval_every: 0,
            threads: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.eps > 0.0) {
            return Err(Error::Config("lr and eps must be positive".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.threads == 0 {
            return Err(Error::Config(
                "batch_size and threads must be positive".into(),
            ));
        }
        self.weights.validate()
    }
}

/// Ranges of the random global transform applied to every body.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub roll_deg: f64,
    pub pitch_deg: f64,
    pub yaw_deg: f64,
    pub shift_px: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            roll_deg: 30.0,
            pitch_deg: 30.0,
            yaw_deg: 60.0,
            shift_px: 20.0,
            scale_min: 0.9,
            scale_max: 1.1,
        }
    }
}

impl AugmentConfig {
    /// No rotation, shift, or scaling.
    pub fn identity() -> Self {
        Self {
            roll_deg: 0.0,
            pitch_deg: 0.0,
            yaw_deg: 0.0,
            shift_px: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [self.roll_deg, self.pitch_deg, self.yaw_deg, self.shift_px];
        if ranges.iter().any(|r| !(r.is_finite() && *r >= 0.0))
            || !(self.scale_min > 0.0 && self.scale_min <= self.scale_max)
        {
            return Err(Error::Config("invalid augmentation ranges".into()));
        }
        Ok(())
    }
}

/// Sample counts per dataset type plus the stream seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct DatasetSpec {
    pub image_3d: usize,
    pub image_2d_only: usize,
    pub image_pseudo3d: usize,
    pub mocap: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn total(&self) -> usize {
        self.image_3d + self.image_2d_only + self.image_pseudo3d + self.mocap
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub train: DatasetSpec,
    pub eval: DatasetSpec,
    pub augment: AugmentConfig,
    /// Largest per-axis joint rotation, in degrees.
    pub articulation_deg: f64,
    /// Fraction of the half image height covered by a unit body coordinate.
    pub body_extent: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: DatasetSpec {
                image_3d: 48,
                image_2d_only: 8,
                image_pseudo3d: 8,
                mocap: 32,
                seed: 1,
            },
            eval: DatasetSpec {
                image_3d: 16,
                seed: 2,
                ..DatasetSpec::default()
            },
            augment: AugmentConfig::default(),
            articulation_deg: 20.0,
            body_extent: 0.6,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.articulation_deg >= 0.0 && self.body_extent > 0.0) {
            return Err(Error::Config(
                "articulation and body extent must be nonnegative/positive".into(),
            ));
        }
        self.augment.validate()
    }
}

/// Everything a training run needs; the `train` command's config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn small_toy() -> Self {
        Self {
            model: ModelConfig::small_toy(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_count_tokens() {
        for name in ["small_toy", "large_toy", "paper_shape"] {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
        let small = ModelConfig::small_toy();
        assert_eq!(small.image_tokens(), 32 + 14 + 64);
        assert_eq!(small.keypoint_tokens(), 32 + 14 + 17);
        assert_eq!(small.d_head(), 16);
        let paper = ModelConfig::paper_shape();
        assert_eq!(paper.template_tokens(), 445);
        assert_eq!(paper.image_tokens(), 445 + 64);
        let large = ModelConfig::large_toy().blocks;
        assert_eq!(
            (large.n_front, large.n_cross, large.n_back, large.n_blocks),
            (1, 1, 2, 3)
        );
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut c = ModelConfig::small_toy();
        c.heads = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::small_toy();
        c.image_height = 100;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::small_toy();
        c.blocks.n_blocks = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn experiment_json_roundtrip() {
        let cfg = ExperimentConfig::small_toy();
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(cfg, back);
    }
}
