//! Procedural articulated body: a tube mesh around a 16-joint skeleton.
//!
//! Coordinates are y-down (matching image rows), roughly two units tall and
//! centered on the pelvis. Every vertex rides rigidly on one bone segment.

use nalgebra::{Rotation3, Vector3};
use rand::Rng;

use crate::error::{contract, Result};
use crate::mesh::{JointRegressor, TemplateMesh};
use crate::tensor::Tensor;

pub const SKELETON_JOINTS: usize = 16;

/// Parent of each skeleton joint (`usize::MAX` for the pelvis root).
const PARENT: [usize; SKELETON_JOINTS] =
    [usize::MAX, 0, 1, 2, 0, 4, 5, 0, 7, 8, 8, 10, 11, 8, 13, 14];

const REST: [[f64; 3]; SKELETON_JOINTS] = [
    [0.0, 0.0, 0.0],     // pelvis
    [-0.18, 0.05, 0.0],  // right hip
    [-0.18, 0.5, 0.02],  // right knee
    [-0.18, 0.92, 0.0],  // right ankle
    [0.18, 0.05, 0.0],   // left hip
    [0.18, 0.5, 0.02],   // left knee
    [0.18, 0.92, 0.0],   // left ankle
    [0.0, -0.3, 0.0],    // spine
    [0.0, -0.6, 0.0],    // neck
    [0.0, -0.82, 0.02],  // head
    [-0.3, -0.56, 0.0],  // right shoulder
    [-0.42, -0.28, 0.0], // right elbow
    [-0.5, -0.02, 0.05], // right wrist
    [0.3, -0.56, 0.0],   // left shoulder
    [0.42, -0.28, 0.0],  // left elbow
    [0.5, -0.02, 0.05],  // left wrist
];

/// Bone segments: (driving joint, start, end, tube radius). Segments that end
/// past the skeleton (head top, feet, hands) are driven by their last joint.
const SEGMENTS: [(usize, [f64; 3], [f64; 3], f64); 20] = [
    (0, REST[0], REST[1], 0.09),
    (1, REST[1], REST[2], 0.08),
    (2, REST[2], REST[3], 0.06),
    (3, REST[3], [-0.18, 0.98, 0.16], 0.04),
    (0, REST[0], REST[4], 0.09),
    (4, REST[4], REST[5], 0.08),
    (5, REST[5], REST[6], 0.06),
    (6, REST[6], [0.18, 0.98, 0.16], 0.04),
    (0, REST[0], REST[7], 0.15),
    (7, REST[7], REST[8], 0.14),
    (8, REST[8], REST[9], 0.05),
    (9, REST[9], [0.0, -1.0, 0.02], 0.1),
    (8, REST[8], REST[10], 0.05),
    (10, REST[10], REST[11], 0.05),
    (11, REST[11], REST[12], 0.04),
    (12, REST[12], [-0.53, 0.1, 0.06], 0.035),
    (8, REST[8], REST[13], 0.05),
    (13, REST[13], REST[14], 0.05),
    (14, REST[14], REST[15], 0.04),
    (15, REST[15], [0.53, 0.1, 0.06], 0.035),
];

/// Skeleton joints that anchor the 14 regressed 3D joints.
pub const JOINT_ANCHORS: [usize; 14] = [0, 1, 2, 3, 4, 5, 6, 8, 10, 11, 12, 13, 14, 15];

pub const JOINT_NAMES: [&str; 14] = [
    "pelvis",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
    "neck",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
];

/// COCO keypoint anchors (nose, eyes, ears, shoulders, elbows, wrists, hips,
/// knees, ankles; left before right).
const KEYPOINT_ANCHORS: [[f64; 3]; 17] = [
    [0.0, -0.86, 0.12],
    [0.04, -0.9, 0.1],
    [-0.04, -0.9, 0.1],
    [0.1, -0.88, 0.0],
    [-0.1, -0.88, 0.0],
    REST[13],
    REST[10],
    REST[14],
    REST[11],
    REST[15],
    REST[12],
    REST[4],
    REST[1],
    REST[5],
    REST[2],
    REST[6],
    REST[3],
];

const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;

/// Per-joint local rotations plus global shape scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct Articulation {
    /// Axis-angle (radians) per skeleton joint; the root entry is ignored.
    pub rotations: [[f64; 3]; SKELETON_JOINTS],
    pub height_scale: f64,
    pub width_scale: f64,
}

impl Articulation {
    pub fn rest() -> Self {
        Self {
            rotations: [[0.0; 3]; SKELETON_JOINTS],
            height_scale: 1.0,
            width_scale: 1.0,
        }
    }

    /// Uniform per-axis angles in `±max_deg` and mild shape variation.
    pub fn sample(rng: &mut impl Rng, max_deg: f64) -> Self {
        let a = max_deg.to_radians();
        let mut rotations = [[0.0; 3]; SKELETON_JOINTS];
        for r in rotations.iter_mut().skip(1) {
            for c in r.iter_mut() {
                *c = if a > 0.0 {
                    rng.random_range(-a..=a)
                } else {
                    0.0
                };
            }
        }
        Self {
            rotations,
            height_scale: rng.random_range(0.92..=1.08),
            width_scale: rng.random_range(0.85..=1.15),
        }
    }
}

/// Which segment each vertex sits on and where.
#[derive(Debug, Clone)]
struct VertexSite {
    segment: usize,
    t: f64,
    angle: f64,
}

/// The procedural body at a chosen mesh resolution.
#[derive(Debug, Clone)]
pub struct BodyModel {
    sites: Vec<VertexSite>,
    coarse_index: Vec<usize>,
    template: TemplateMesh,
    joint_regressor: JointRegressor,
    keypoint_regressor: JointRegressor,
}

fn perpendicular_basis(dir: Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if dir.z.abs() < 0.9 {
        Vector3::z()
    } else {
        Vector3::x()
    };
    let u = dir.cross(&helper).normalize();
    let w = dir.cross(&u).normalize();
    (u, w)
}

/// Splits `total` items over `weights` by largest remainder, at least one each
/// when there is room.
fn allocate(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let floor_one = total >= weights.len();
    let spare = if floor_one {
        total - weights.len()
    } else {
        total
    };
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * spare as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = spare - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    if floor_one {
        counts.iter_mut().for_each(|c| *c += 1);
    }
    counts
}

fn anchors_for(count: usize, named: &[[f64; 3]], rest_full: &Tensor) -> Vec<[f64; 3]> {
    let m = rest_full.shape()[0];
    (0..count)
        .map(|i| {
            named.get(i).copied().unwrap_or_else(|| {
                let r = rest_full.row((i * 7919) % m);
                [r[0], r[1], r[2]]
            })
        })
        .collect()
}

impl BodyModel {
    pub fn new(
        full_vertices: usize,
        coarse_vertices: usize,
        num_joints: usize,
        num_keypoints: usize,
    ) -> Result<Self> {
        if coarse_vertices == 0
            || full_vertices < coarse_vertices
            || num_joints == 0
            || num_keypoints == 0
        {
            return Err(contract(
                "body model needs 0 < coarse ≤ full vertices and positive joint counts",
            ));
        }
        let lengths: Vec<f64> = SEGMENTS
            .iter()
            .map(|(_, a, b, r)| {
                let d = Vector3::from(*b) - Vector3::from(*a);
                d.norm() * (0.5 + r * 4.0)
            })
            .collect();
        let counts = allocate(full_vertices, &lengths);
        let mut sites = Vec::with_capacity(full_vertices);
        for (segment, &n) in counts.iter().enumerate() {
            for k in 0..n {
                sites.push(VertexSite {
                    segment,
                    t: (k as f64 + 0.5) / n as f64,
                    angle: (k as f64 * GOLDEN_ANGLE) % std::f64::consts::TAU,
                });
            }
        }
        let coarse_index: Vec<usize> = (0..coarse_vertices)
            .map(|i| ((2 * i + 1) * full_vertices) / (2 * coarse_vertices))
            .collect();

        let mut body = Self {
            sites,
            coarse_index,
            template: TemplateMesh {
                coarse: Tensor::zeros(&[1, 3])?,
                joints: Tensor::zeros(&[1, 3])?,
                full_vertices,
                edges: Vec::new(),
                full: None,
                coarse_index: None,
            },
            joint_regressor: JointRegressor::new(Tensor::ones(&[1, 1])?)?,
            keypoint_regressor: JointRegressor::new(Tensor::ones(&[1, 1])?)?,
        };
        let rest_full = body.pose_vertices(&Articulation::rest())?;
        let named_joints: Vec<[f64; 3]> = JOINT_ANCHORS.iter().map(|&j| REST[j]).collect();
        body.joint_regressor = JointRegressor::gaussian(
            &rest_full,
            &anchors_for(num_joints, &named_joints, &rest_full),
            6,
            0.06,
        )?;
        body.keypoint_regressor = JointRegressor::gaussian(
            &rest_full,
            &anchors_for(num_keypoints, &KEYPOINT_ANCHORS, &rest_full),
            4,
            0.04,
        )?;

        let coarse = Tensor::from_fn(&[coarse_vertices, 3], |i| {
            rest_full.get(&[body.coarse_index[i / 3], i % 3])
        })?;
        let mut edges = Vec::new();
        for i in 1..coarse_vertices {
            if body.sites[body.coarse_index[i]].segment
                == body.sites[body.coarse_index[i - 1]].segment
            {
                edges.push((i - 1, i));
            }
        }
        body.template = TemplateMesh {
            coarse,
            joints: body.joint_regressor.apply(&rest_full)?,
            full_vertices,
            edges,
            full: Some(rest_full),
            coarse_index: Some(body.coarse_index.clone()),
        };
        Ok(body)
    }

    pub fn template(&self) -> &TemplateMesh {
        &self.template
    }

    pub fn joint_regressor(&self) -> &JointRegressor {
        &self.joint_regressor
    }

    pub fn keypoint_regressor(&self) -> &JointRegressor {
        &self.keypoint_regressor
    }

    pub fn coarse_index(&self) -> &[usize] {
        &self.coarse_index
    }

    /// Bone segment of each full-resolution vertex.
    pub fn vertex_segments(&self) -> Vec<usize> {
        self.sites.iter().map(|s| s.segment).collect()
    }

    pub fn segment_count() -> usize {
        SEGMENTS.len()
    }

    pub fn full_vertices(&self) -> usize {
        self.sites.len()
    }

    /// Global joint frames and positions by forward kinematics.
    fn kinematics(&self, art: &Articulation) -> (Vec<Rotation3<f64>>, Vec<Vector3<f64>>) {
        let h = art.height_scale;
        let mut frames = vec![Rotation3::identity(); SKELETON_JOINTS];
        let mut pos = vec![Vector3::zeros(); SKELETON_JOINTS];
        for j in 1..SKELETON_JOINTS {
            let p = PARENT[j];
            let local = Rotation3::from_scaled_axis(Vector3::from(art.rotations[j]));
            frames[j] = frames[p] * local;
            let bone = (Vector3::from(REST[j]) - Vector3::from(REST[p])) * h;
            pos[j] = pos[p] + frames[p] * bone;
        }
        (frames, pos)
    }

    /// Full-resolution vertices (`M_full × 3`) in the given articulation.
    pub fn pose_vertices(&self, art: &Articulation) -> Result<Tensor> {
        let (frames, pos) = self.kinematics(art);
        let h = art.height_scale;
        let mut data = Vec::with_capacity(self.sites.len() * 3);
        for site in &self.sites {
            let (joint, a, b, radius) = SEGMENTS[site.segment];
            let (a, b) = (Vector3::from(a), Vector3::from(b));
            let dir = (b - a).normalize();
            let (u, w) = perpendicular_basis(dir);
            let rest_offset = (a - Vector3::from(REST[joint])) + (b - a) * site.t;
            let ring = (u * site.angle.cos() + w * site.angle.sin()) * radius * art.width_scale;
            let local = rest_offset * h + ring * h;
            let v = pos[joint] + frames[joint] * local;
            data.extend_from_slice(&[v.x, v.y, v.z]);
        }
        Ok(Tensor::new(&[self.sites.len(), 3], data)?)
    }

    /// `(V_full, J3D)` with `J3D = W·V_full` by construction.
    pub fn generate(&self, art: &Articulation) -> Result<(Tensor, Tensor)> {
        let v = self.pose_vertices(art)?;
        let j = self.joint_regressor.apply(&v)?;
        Ok((v, j))
    }

    /// Rows of `V_full` at the coarse indices.
    pub fn coarse_of(&self, full: &Tensor) -> Result<Tensor> {
        Ok(Tensor::from_fn(&[self.coarse_index.len(), 3], |i| {
            full.get(&[self.coarse_index[i / 3], i % 3])
        })?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rest_articulation_reproduces_template() {
        let body = BodyModel::new(128, 32, 14, 17).unwrap();
        let (v, j) = body.generate(&Articulation::rest()).unwrap();
        assert_eq!(&v, body.template().full.as_ref().unwrap());
        assert_eq!(j, body.template().joints);
        assert_eq!(body.coarse_of(&v).unwrap(), body.template().coarse);
        body.template().validate().unwrap();
    }

    #[test]
    fn joints_are_regressed_and_deterministic() {
        let body = BodyModel::new(128, 32, 14, 17).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            body.generate(&Articulation::sample(&mut rng, 25.0))
                .unwrap()
        };
        let (v, j) = draw(3);
        assert_eq!((v.clone(), j.clone()), draw(3));
        let jr = body.joint_regressor().apply(&v).unwrap();
        assert!(j.max_abs_diff(&jr) <= 1e-12);
        assert_ne!(v, draw(4).0);
    }

    #[test]
    fn allocation_covers_total() {
        for total in [5, 20, 128, 6890] {
            let c = allocate(total, &[1.0, 2.5, 0.3, 4.0]);
            assert_eq!(c.iter().sum::<usize>(), total);
        }
        let body = BodyModel::new(6890, 431, 14, 17).unwrap();
        assert_eq!(body.template().coarse_count(), 431);
    }
}
