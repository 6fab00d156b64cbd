//! Pose samples of the four dataset types and the deterministic sample stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::augment::{augment_and_project, AugmentDraw, ProjectionFrame};
use super::body::{Articulation, BodyModel};
use super::render::{part_color, render_splats, Splat};
use crate::config::{AugmentConfig, DataConfig, DatasetSpec, ModelConfig};
use crate::error::{contract, Result};
use crate::keypoint::Keypoints2D;
use crate::mesh::JointRegressor;
use crate::tensor::Tensor;

/// Standard deviation of the label noise on pseudo-3D vertices.
pub const PSEUDO_LABEL_NOISE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DatasetType {
    Image3d,
    Image2dOnly,
    ImagePseudo3d,
    Mocap,
}

impl DatasetType {
    pub const ALL: [DatasetType; 4] = [
        Self::Image3d,
        Self::Image2dOnly,
        Self::ImagePseudo3d,
        Self::Mocap,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Image3d => "image_3d",
            Self::Image2dOnly => "image_2d_only",
            Self::ImagePseudo3d => "image_pseudo3d",
            Self::Mocap => "mocap",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn has_image(self) -> bool {
        self != Self::Mocap
    }

    pub fn has_3d(self) -> bool {
        self != Self::Image2dOnly
    }

    fn count(self, spec: &DatasetSpec) -> usize {
        match self {
            Self::Image3d => spec.image_3d,
            Self::Image2dOnly => spec.image_2d_only,
            Self::ImagePseudo3d => spec.image_pseudo3d,
            Self::Mocap => spec.mocap,
        }
    }
}

impl std::fmt::Display for DatasetType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One training or evaluation example. Pixel coordinates throughout;
/// 3D targets are in body units after the global rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSample {
    pub dataset_type: DatasetType,
    /// `(height, width)` of the (possibly absent) image.
    pub image_size: [usize; 2],
    /// `3 × H × W` in `[0, 1]`.
    pub image: Option<Tensor>,
    /// COCO keypoints: the keypoint-branch input and heatmap target.
    pub keypoints: Option<Keypoints2D>,
    /// Projected regressed joints: the reprojection target.
    pub joints2d: Option<Keypoints2D>,
    /// `K_joint × 3`.
    pub joints3d: Option<Tensor>,
    /// `M_full × 3`.
    pub vertices3d: Option<Tensor>,
    pub sequence: u32,
    pub frame: u32,
}

impl PoseSample {
    /// Checks the field-presence rules of the sample's dataset type.
    pub fn validate(&self) -> Result<()> {
        let t = self.dataset_type;
        let has_3d = self.joints3d.is_some() && self.vertices3d.is_some();
        let ok = match t {
            DatasetType::Mocap => {
                self.image.is_none()
                    && self.keypoints.is_some()
                    && self.joints2d.is_some()
                    && has_3d
            }
            DatasetType::Image2dOnly => {
                self.image.is_some()
                    && self.keypoints.is_some()
                    && self.joints2d.is_some()
                    && self.joints3d.is_none()
                    && self.vertices3d.is_none()
            }
            DatasetType::Image3d | DatasetType::ImagePseudo3d => {
                self.image.is_some()
                    && self.keypoints.is_some()
                    && self.joints2d.is_some()
                    && has_3d
            }
        };
        if !ok {
            return Err(contract(format!("{t} sample has the wrong set of fields")));
        }
        if let Some(img) = &self.image {
            if img.shape() != [3, self.image_size[0], self.image_size[1]] {
                return Err(contract("image shape disagrees with image_size"));
            }
        }
        if let (Some(j), Some(j2)) = (&self.joints3d, &self.joints2d) {
            if j.shape()[0] != j2.len() {
                return Err(contract("2D and 3D joint counts differ"));
            }
        }
        Ok(())
    }

    /// Reprojection targets in normalized image units, `K_joint × 2`.
    pub fn normalized_joints2d(&self) -> Result<Option<Tensor>> {
        let [h, w] = self.image_size;
        self.joints2d
            .as_ref()
            .map(|j| j.normalized(h, w))
            .transpose()
    }
}

fn inside(p: [f64; 2], height: usize, width: usize) -> bool {
    p[0] >= 0.0 && p[1] >= 0.0 && p[0] < width as f64 && p[1] < height as f64
}

fn to_keypoints(px: Vec<[f64; 2]>, height: usize, width: usize) -> Result<Keypoints2D> {
    let vis = px.iter().map(|&p| inside(p, height, width)).collect();
    Keypoints2D::new(px, vis)
}

/// Turns a posed body into an image-free sample: random global rotation,
/// orthographic projection, then 2D shift/scale applied to both the keypoint
/// input and the joint targets.
pub fn mocap_to_sample(
    vertices: &Tensor,
    joints: &Tensor,
    keypoint_regressor: &JointRegressor,
    augment: &AugmentConfig,
    frame: &ProjectionFrame,
    image_size: [usize; 2],
    rng: &mut impl Rng,
) -> Result<PoseSample> {
    let draw = AugmentDraw::sample(augment, rng);
    let (v_rot, _) = augment_and_project(vertices, &draw, frame)?;
    let (j_rot, j_px) = augment_and_project(joints, &draw, frame)?;
    let (_, kp_px) = augment_and_project(&keypoint_regressor.apply(vertices)?, &draw, frame)?;
    let [h, w] = image_size;
    Ok(PoseSample {
        dataset_type: DatasetType::Mocap,
        image_size,
        image: None,
        keypoints: Some(to_keypoints(kp_px, h, w)?),
        joints2d: Some(to_keypoints(j_px, h, w)?),
        joints3d: Some(j_rot),
        vertices3d: Some(v_rot),
        sequence: 0,
        frame: 0,
    })
}

/// Draws samples of every dataset type from one procedural body.
#[derive(Debug, Clone)]
pub struct SampleGenerator {
    pub body: BodyModel,
    pub image_size: [usize; 2],
    pub augment: AugmentConfig,
    pub articulation_deg: f64,
    pub frame: ProjectionFrame,
}

impl SampleGenerator {
    pub fn new(model: &ModelConfig, data: &DataConfig) -> Result<Self> {
        let body = BodyModel::new(
            model.full_vertices,
            model.coarse_vertices,
            model.num_joints,
            model.num_keypoints,
        )?;
        Ok(Self {
            body,
            image_size: [model.image_height, model.image_width],
            augment: data.augment,
            articulation_deg: data.articulation_deg,
            frame: ProjectionFrame::for_image(
                model.image_height,
                model.image_width,
                data.body_extent,
            ),
        })
    }

    /// Weak-perspective camera `[s, tx, ty]` that maps the rotated body onto
    /// the augmented 2D targets in normalized units (square images only).
    pub fn normalized_camera(&self, draw: &AugmentDraw) -> [f64; 3] {
        let [h, w] = self.image_size;
        let f = &self.frame;
        let s = 2.0 * draw.scale * f.pixels_per_unit / w as f64;
        let tx = 2.0 * (f.center[0] + draw.shift[0]) / w as f64 - 1.0;
        let ty = 2.0 * (f.center[1] + draw.shift[1]) / h as f64 - 1.0;
        [s, tx, ty]
    }

    /// Renders rotated full-resolution vertices under the draw's 2D map.
    pub fn render(
        &self,
        rotated: &Tensor,
        draw: &AugmentDraw,
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        let segments = self.body.vertex_segments();
        let splats: Vec<Splat> = (0..rotated.shape()[0])
            .map(|i| {
                let p = rotated.row(i);
                let px = [
                    self.frame.center[0] + self.frame.pixels_per_unit * p[0],
                    self.frame.center[1] + self.frame.pixels_per_unit * p[1],
                ];
                Splat {
                    pixel: draw.apply_2d(&self.frame, px),
                    depth: p[2],
                    color: part_color(segments.get(i).copied().unwrap_or(0)),
                }
            })
            .collect();
        let [h, w] = self.image_size;
        render_splats(&splats, h, w, rng)
    }

    /// The sample at stream position `index`; a pure function of
    /// `(spec.seed, index, dataset type, type-local index)`.
    pub fn sample(
        &self,
        spec: &DatasetSpec,
        index: usize,
        dataset_type: DatasetType,
        local: usize,
    ) -> Result<PoseSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(index as u64);
        let art = Articulation::sample(&mut rng, self.articulation_deg);
        let (vertices, joints) = self.body.generate(&art)?;
        let [h, w] = self.image_size;
        let mut sample = if dataset_type == DatasetType::Mocap {
            mocap_to_sample(
                &vertices,
                &joints,
                self.body.keypoint_regressor(),
                &self.augment,
                &self.frame,
                self.image_size,
                &mut rng,
            )?
        } else {
            let draw = AugmentDraw::sample(&self.augment, &mut rng);
            let (v_rot, _) = augment_and_project(&vertices, &draw, &self.frame)?;
            let (mut j_rot, j_px) = augment_and_project(&joints, &draw, &self.frame)?;
            let kp3 = self.body.keypoint_regressor().apply(&vertices)?;
            let (_, kp_px) = augment_and_project(&kp3, &draw, &self.frame)?;
            let image = self.render(&v_rot, &draw, &mut rng)?;
            let mut v_label = v_rot;
            if dataset_type == DatasetType::ImagePseudo3d {
                let noise = Tensor::from_fn(v_label.shape(), |_| {
                    PSEUDO_LABEL_NOISE
                        * (rng.random::<f64>() + rng.random::<f64>() + rng.random::<f64>() - 1.5)
                        * 2.0
                })?;
                for (a, b) in v_label.data_mut().iter_mut().zip(noise.data()) {
                    *a += b;
                }
                j_rot = self.body.joint_regressor().apply(&v_label)?;
            }
            let has_3d = dataset_type.has_3d();
            PoseSample {
                dataset_type,
                image_size: self.image_size,
                image: Some(image),
                keypoints: Some(to_keypoints(kp_px, h, w)?),
                joints2d: Some(to_keypoints(j_px, h, w)?),
                joints3d: has_3d.then_some(j_rot),
                vertices3d: has_3d.then_some(v_label),
                sequence: 0,
                frame: 0,
            }
        };
        sample.sequence = dataset_type.code() as u32;
        sample.frame = local as u32;
        sample.validate()?;
        Ok(sample)
    }

    /// Lazily generated stream in `dataset_plan` order.
    pub fn stream<'a>(
        &'a self,
        spec: &'a DatasetSpec,
    ) -> impl Iterator<Item = Result<PoseSample>> + 'a {
        dataset_plan(spec)
            .into_iter()
            .enumerate()
            .map(move |(i, (t, local))| self.sample(spec, i, t, local))
    }

    pub fn make_dataset(&self, spec: &DatasetSpec) -> Result<Vec<PoseSample>> {
        self.stream(spec).collect()
    }
}

/// Interleaved order of `(type, type-local index)`: the `k`-th of `n` samples
/// of a type sits at fractional position `(k + ½)/n`; ties go by type order.
pub fn dataset_plan(spec: &DatasetSpec) -> Vec<(DatasetType, usize)> {
    let mut keyed: Vec<(f64, DatasetType, usize)> = Vec::with_capacity(spec.total());
    for t in DatasetType::ALL {
        let n = t.count(spec);
        for k in 0..n {
            keyed.push(((k as f64 + 0.5) / n as f64, t, k));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, t, k)| (t, k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    fn generator() -> SampleGenerator {
        let cfg = ExperimentConfig::small_toy();
        SampleGenerator::new(&cfg.model, &cfg.data).unwrap()
    }

    #[test]
    fn plan_interleaves_exact_counts() {
        let spec = DatasetSpec {
            image_3d: 4,
            image_2d_only: 2,
            image_pseudo3d: 0,
            mocap: 2,
            seed: 0,
        };
        let plan = dataset_plan(&spec);
        assert_eq!(plan.len(), 8);
        let mocap = plan
            .iter()
            .filter(|(t, _)| *t == DatasetType::Mocap)
            .count();
        assert_eq!(mocap, 2);
        assert_ne!(plan[7].0, DatasetType::Mocap, "{plan:?}");
    }

    #[test]
    fn mocap_only_stream_has_no_images() {
        let spec = DatasetSpec {
            mocap: 10,
            seed: 3,
            ..DatasetSpec::default()
        };
        let data = generator().make_dataset(&spec).unwrap();
        assert_eq!(data.len(), 10);
        assert!(data
            .iter()
            .all(|s| s.image.is_none() && s.dataset_type == DatasetType::Mocap));
    }

    #[test]
    fn every_type_obeys_its_field_rules() {
        let g = generator();
        let spec = DatasetSpec {
            image_3d: 1,
            image_2d_only: 1,
            image_pseudo3d: 1,
            mocap: 1,
            seed: 9,
        };
        for s in g.make_dataset(&spec).unwrap() {
            s.validate().unwrap();
        }
    }

    #[test]
    fn camera_reproduces_joint_targets() {
        let g = SampleGenerator {
            augment: AugmentConfig::default(),
            ..generator()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draw = AugmentDraw::sample(&g.augment, &mut rng);
        let (_, j) = g.body.generate(&Articulation::rest()).unwrap();
        let (j_rot, px) = augment_and_project(&j, &draw, &g.frame).unwrap();
        let [s, tx, ty] = g.normalized_camera(&draw);
        for (i, p) in px.iter().enumerate() {
            let r = j_rot.row(i);
            assert!((s * r[0] + tx - (2.0 * p[0] / 128.0 - 1.0)).abs() < 1e-12);
            assert!((s * r[1] + ty - (2.0 * p[1] / 128.0 - 1.0)).abs() < 1e-12);
        }
    }
}
