//! Training objectives and their routing by dataset type.
//!
//! Every L1 term is a mean absolute difference so magnitudes do not depend on
//! map resolution or vertex count; point losses average the per-point L1 sum.

use std::fmt::Write as _;

use crate::config::LossWeights;
use crate::data::{DatasetType, PoseSample};
use crate::error::{contract, Result};
use crate::image::HeatmapVars;
use crate::keypoint::{render_gt_maps, HeatmapSet};
use crate::mesh::{project_var, regress_var, BranchPrediction, JointRegressor};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LossTerm {
    Map,
    KpVertex,
    KpJoint,
    KpJointReg,
    KpProj,
    ImgVertex,
    ImgJoint,
    ImgJointReg,
    ImgProj,
    Consistency,
}

impl LossTerm {
    pub const ALL: [LossTerm; 10] = [
        Self::Map,
        Self::KpVertex,
        Self::KpJoint,
        Self::KpJointReg,
        Self::KpProj,
        Self::ImgVertex,
        Self::ImgJoint,
        Self::ImgJointReg,
        Self::ImgProj,
        Self::Consistency,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Map => "map",
            Self::KpVertex => "kp_vertex",
            Self::KpJoint => "kp_joint",
            Self::KpJointReg => "kp_joint_reg",
            Self::KpProj => "kp_proj",
            Self::ImgVertex => "img_vertex",
            Self::ImgJoint => "img_joint",
            Self::ImgJointReg => "img_joint_reg",
            Self::ImgProj => "img_proj",
            Self::Consistency => "consistency",
        }
    }

    pub fn weight(self, w: &LossWeights) -> f64 {
        match self {
            Self::Map => w.map,
            Self::KpVertex => w.kp_vertex,
            Self::KpJoint => w.kp_joint,
            Self::KpJointReg => w.kp_joint_reg,
            Self::KpProj => w.kp_proj,
            Self::ImgVertex => w.img_vertex,
            Self::ImgJoint => w.img_joint,
            Self::ImgJointReg => w.img_joint_reg,
            Self::ImgProj => w.img_proj,
            Self::Consistency => w.consistency,
        }
    }

    fn is_image_side(self) -> bool {
        matches!(
            self,
            Self::ImgVertex | Self::ImgJoint | Self::ImgJointReg | Self::ImgProj
        )
    }

    fn is_keypoint_side(self) -> bool {
        matches!(
            self,
            Self::KpVertex | Self::KpJoint | Self::KpJointReg | Self::KpProj
        )
    }
}

impl std::fmt::Display for LossTerm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Switches that shrink the routed term sets (ablations and the mocap
/// reprojection question).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutingOptions {
    pub keypoint_branch: bool,
    pub image_branch: bool,
    pub consistency: bool,
    pub mocap_reprojection: bool,
}

impl Default for RoutingOptions {
    fn default() -> Self {
        Self {
            keypoint_branch: true,
            image_branch: true,
            consistency: true,
            mocap_reprojection: true,
        }
    }
}

/// Active loss terms for a dataset type.
///
/// * image with 3D or pseudo-3D labels: every term
/// * image with 2D labels only: map, both reprojections, consistency
/// * mocap: keypoint-branch vertex, joint, regressed-joint, reprojection
pub fn active_terms(t: DatasetType, opts: &RoutingOptions) -> Vec<LossTerm> {
    use LossTerm::*;
    let base: &[LossTerm] = match t {
        DatasetType::Image3d | DatasetType::ImagePseudo3d => &LossTerm::ALL,
        DatasetType::Image2dOnly => &[Map, KpProj, ImgProj, Consistency],
        DatasetType::Mocap => &[KpVertex, KpJoint, KpJointReg, KpProj],
    };
    base.iter()
        .copied()
        .filter(|term| {
            !(term.is_image_side() && !opts.image_branch
                || term.is_keypoint_side() && !opts.keypoint_branch
                || *term == Map && !opts.keypoint_branch
                || *term == Consistency
                    && !(opts.consistency && opts.image_branch && opts.keypoint_branch)
                || *term == KpProj && t == DatasetType::Mocap && !opts.mocap_reprojection)
        })
        .collect()
}

fn check_shape(what: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(contract(format!("{what}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

/// `(1/K)Σ w_k·mean|Ĥ_k − H_k| + (1/K)Σ w_k·mean|Ô_k − O_k|`.
pub fn loss_map<'g>(pred: &HeatmapVars<'g>, gt: &HeatmapSet, weights: &[f64]) -> Result<Var<'g>> {
    check_shape("heatmap loss", &pred.heat.shape(), gt.heatmaps.shape())?;
    check_shape("offset loss", &pred.offsets.shape(), gt.offsets.shape())?;
    let k = gt.keypoints();
    if weights.len() != k {
        return Err(contract(format!(
            "{} keypoint weights for {k} maps",
            weights.len()
        )));
    }
    let g = pred.heat.graph();
    let w = g.constant(Tensor::new(&[k], weights.to_vec())?)?;
    let per_map = |p: Var<'g>, t: &Tensor| -> Result<Var<'g>> {
        let n = t.len() / k;
        let d = p.sub(g.constant(t.clone())?)?.abs()?.reshape(&[k, n])?;
        Ok(d.mean_axis(1)?.mul(w)?.sum()?.scale(1.0 / k as f64)?)
    };
    Ok(per_map(pred.heat, &gt.heatmaps)?.add(per_map(pred.offsets, &gt.offsets)?)?)
}

/// Mean over points of the per-point L1 distance (`N × 3`).
pub fn loss_points<'g>(pred: Var<'g>, gt: &Tensor) -> Result<Var<'g>> {
    check_shape("point loss", &pred.shape(), gt.shape())?;
    let n = gt.shape().first().copied().unwrap_or(1).max(1);
    Ok(pred
        .sub(pred.graph().constant(gt.clone())?)?
        .l1_sum()?
        .scale(1.0 / n as f64)?)
}

pub fn loss_vertex<'g>(pred: Var<'g>, gt: &Tensor) -> Result<Var<'g>> {
    loss_points(pred, gt)
}

pub fn loss_joint<'g>(pred: Var<'g>, gt: &Tensor) -> Result<Var<'g>> {
    loss_points(pred, gt)
}

/// Joint loss on joints regressed from the predicted vertices.
pub fn loss_joint_reg<'g>(vertices: Var<'g>, gt: &Tensor, reg: &JointRegressor) -> Result<Var<'g>> {
    loss_points(regress_var(vertices, reg)?, gt)
}

/// Visibility-masked mean absolute difference between projected joints and
/// normalized 2D targets; zero (with zero gradient) when nothing is visible.
pub fn loss_reproj<'g>(
    joints: Var<'g>,
    camera: Var<'g>,
    gt: &Tensor,
    visible: &[bool],
) -> Result<Var<'g>> {
    let js = joints.shape();
    if js.len() != 2 || js[1] != 3 {
        return Err(contract("reprojection needs K×3 joints"));
    }
    check_shape("reprojection loss", &[js[0], 2], gt.shape())?;
    if visible.len() != js[0] {
        return Err(contract("visibility count differs from joint count"));
    }
    let g = joints.graph();
    let mask = Tensor::from_fn(&[js[0], 2], |i| if visible[i / 2] { 1.0 } else { 0.0 })?;
    let n_vis = visible.iter().filter(|&&v| v).count();
    let diff = project_var(joints, camera)?
        .sub(g.constant(gt.clone())?)?
        .abs()?;
    Ok(diff
        .mul(g.constant(mask)?)?
        .sum()?
        .scale(1.0 / (2 * n_vis).max(1) as f64)?)
}

/// `‖F_mha − F_mlp‖_F / √T`; gradients reach both arguments.
pub fn loss_consistency<'g>(attended: Var<'g>, surrogate: Var<'g>) -> Result<Var<'g>> {
    let s = attended.shape();
    check_shape("consistency loss", &s, &surrogate.shape())?;
    let t = s.first().copied().unwrap_or(1).max(1);
    Ok(attended
        .sub(surrogate)?
        .l2_norm()?
        .scale(1.0 / (t as f64).sqrt())?)
}

/// The graph-side outputs the losses read.
#[derive(Debug, Clone, Default)]
pub struct LossOutputs<'g> {
    pub heatmaps: Option<HeatmapVars<'g>>,
    pub keypoint: Option<BranchPrediction<'g>>,
    pub image: Option<BranchPrediction<'g>>,
    /// `(F_kp^MHA, F_kp^MLP)` per cross-modal module.
    pub consistency: Vec<(Var<'g>, Var<'g>)>,
}

/// Supervision for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTargets {
    pub dataset_type: DatasetType,
    pub maps: Option<HeatmapSet>,
    pub keypoint_weights: Vec<f64>,
    pub vertices: Option<Tensor>,
    pub joints: Option<Tensor>,
    /// Normalized image units.
    pub joints2d: Option<Tensor>,
    pub joints2d_visible: Vec<bool>,
}

impl LossTargets {
    /// Targets read off a sample; heatmaps are rendered from its keypoints.
    pub fn from_sample(sample: &PoseSample, heatmap_sigma: f64) -> Result<Self> {
        let [h, w] = sample.image_size;
        let maps = match (&sample.keypoints, sample.dataset_type.has_image()) {
            (Some(kp), true) => Some(render_gt_maps(kp, h, w, heatmap_sigma)?),
            _ => None,
        };
        Ok(Self {
            dataset_type: sample.dataset_type,
            keypoint_weights: sample
                .keypoints
                .as_ref()
                .map(|k| k.visibility_weights())
                .unwrap_or_default(),
            maps,
            vertices: sample.vertices3d.clone(),
            joints: sample.joints3d.clone(),
            joints2d: sample.normalized_joints2d()?,
            joints2d_visible: sample
                .joints2d
                .as_ref()
                .map(|j| j.visible.clone())
                .unwrap_or_default(),
        })
    }
}

/// Named value per active term plus the weighted total.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub terms: Vec<(LossTerm, f64)>,
    pub total: f64,
}

impl LossReport {
    pub fn get(&self, term: LossTerm) -> Option<f64> {
        self.terms.iter().find(|(t, _)| *t == term).map(|(_, v)| *v)
    }

    pub fn csv_header() -> String {
        let mut s = String::from("step,total");
        for t in LossTerm::ALL {
            let _ = write!(s, ",{t}");
        }
        s
    }

    /// One CSV row; inactive terms are empty cells.
    pub fn csv_row(&self, step: u64) -> String {
        let mut s = format!("{step},{}", self.total);
        for t in LossTerm::ALL {
            match self.get(t) {
                Some(v) => {
                    let _ = write!(s, ",{v}");
                }
                None => s.push(','),
            }
        }
        s
    }

    /// Averages reports term by term; a term's mean is over the reports that
    /// contain it.
    pub fn mean(reports: &[LossReport]) -> Option<LossReport> {
        if reports.is_empty() {
            return None;
        }
        let mut terms = Vec::new();
        for t in LossTerm::ALL {
            let vals: Vec<f64> = reports.iter().filter_map(|r| r.get(t)).collect();
            if !vals.is_empty() {
                terms.push((t, vals.iter().sum::<f64>() / vals.len() as f64));
            }
        }
        let total = reports.iter().map(|r| r.total).sum::<f64>() / reports.len() as f64;
        Some(LossReport { terms, total })
    }
}

fn need<T: Copy>(x: Option<T>, what: &str, t: DatasetType) -> Result<T> {
    x.ok_or_else(|| {
        contract(format!(
            "{t} sample: {what} required by an active loss is absent"
        ))
    })
}

fn need_ref<'a, T>(x: &'a Option<T>, what: &str, t: DatasetType) -> Result<&'a T> {
    x.as_ref().ok_or_else(|| {
        contract(format!(
            "{t} sample: {what} required by an active loss is absent"
        ))
    })
}

/// Weighted sum of `terms` with a per-term report. Every term must belong to
/// the dataset type's full routing set and have its outputs and targets.
pub fn total_loss<'g>(
    graph: &'g Graph,
    terms: &[LossTerm],
    outputs: &LossOutputs<'g>,
    targets: &LossTargets,
    weights: &LossWeights,
    regressor: &JointRegressor,
) -> Result<(Var<'g>, LossReport)> {
    let t = targets.dataset_type;
    let allowed = active_terms(t, &RoutingOptions::default());
    let mut total = graph.constant(Tensor::scalar(0.0)?)?;
    let mut report = Vec::with_capacity(terms.len());
    for &term in terms {
        if !allowed.contains(&term) {
            return Err(contract(format!(
                "loss {term} is not defined for {t} samples"
            )));
        }
        let value = match term {
            LossTerm::Map => loss_map(
                &need(outputs.heatmaps, "heatmap prediction", t)?,
                need_ref(&targets.maps, "heatmap target", t)?,
                &targets.keypoint_weights,
            )?,
            LossTerm::KpVertex | LossTerm::ImgVertex => {
                let p = branch(outputs, term, t)?;
                loss_vertex(p.full, need_ref(&targets.vertices, "vertex target", t)?)?
            }
            LossTerm::KpJoint | LossTerm::ImgJoint => {
                let p = branch(outputs, term, t)?;
                loss_joint(p.joints, need_ref(&targets.joints, "joint target", t)?)?
            }
            LossTerm::KpJointReg | LossTerm::ImgJointReg => {
                let p = branch(outputs, term, t)?;
                loss_joint_reg(
                    p.full,
                    need_ref(&targets.joints, "joint target", t)?,
                    regressor,
                )?
            }
            LossTerm::KpProj | LossTerm::ImgProj => {
                let p = branch(outputs, term, t)?;
                loss_reproj(
                    p.joints,
                    p.camera,
                    need_ref(&targets.joints2d, "2D joint target", t)?,
                    &targets.joints2d_visible,
                )?
            }
            LossTerm::Consistency => {
                if outputs.consistency.is_empty() {
                    return Err(contract(
                        "consistency loss needs an attended keypoint feature",
                    ));
                }
                let mut acc: Option<Var<'g>> = None;
                for &(a, s) in &outputs.consistency {
                    let l = loss_consistency(a, s)?;
                    acc = Some(match acc {
                        None => l,
                        Some(x) => x.add(l)?,
                    });
                }
                acc.expect("nonempty")
                    .scale(1.0 / outputs.consistency.len() as f64)?
            }
        };
        let v = value.item();
        report.push((term, v));
        total = total.add(value.scale(term.weight(weights))?)?;
    }
    let total_value = total.item();
    Ok((
        total,
        LossReport {
            terms: report,
            total: total_value,
        },
    ))
}

fn branch<'g>(
    outputs: &LossOutputs<'g>,
    term: LossTerm,
    t: DatasetType,
) -> Result<BranchPrediction<'g>> {
    if term.is_image_side() {
        need(outputs.image, "image-branch prediction", t)
    } else {
        need(outputs.keypoint, "keypoint-branch prediction", t)
    }
}
