//! MPJPE, Procrustes-aligned MPJPE, and per-vertex error.

use std::fmt::Write as _;

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::error::{contract, Error, Result};
use crate::mesh::{BranchTag, MeshPrediction};
use crate::tensor::Tensor;

/// The 14 evaluated joints of a 17-joint Human3.6M-style skeleton (ankles,
/// knees, hips, wrists, elbows, shoulders, thorax, head); pelvis, spine and
/// neck are left out.
pub const H36M_EVAL_14: [usize; 14] = [3, 2, 1, 4, 5, 6, 16, 15, 14, 11, 12, 13, 8, 10];

/// Which joints are scored and which one anchors root-centering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricOptions {
    pub root: usize,
    /// Scored joints after root-centering; all joints when `None`.
    pub subset: Option<Vec<usize>>,
}

impl MetricOptions {
    pub fn all_joints(root: usize) -> Self {
        Self { root, subset: None }
    }

    /// The 14-of-17 protocol when the skeleton has 17 joints, else every joint.
    pub fn for_joint_count(joints: usize, root: usize) -> Self {
        Self {
            root,
            subset: (joints == 17).then(|| H36M_EVAL_14.to_vec()),
        }
    }
}

fn points(t: &Tensor, what: &str) -> Result<Vec<Vector3<f64>>> {
    if t.rank() != 2 || t.shape()[1] != 3 {
        return Err(contract(format!("{what} must be N×3, got {:?}", t.shape())));
    }
    Ok((0..t.shape()[0])
        .map(|i| Vector3::from_row_slice(t.row(i)))
        .collect())
}

fn paired(pred: &Tensor, gt: &Tensor) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>)> {
    if pred.shape() != gt.shape() {
        return Err(contract(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let (p, g) = (points(pred, "prediction")?, points(gt, "target")?);
    if p.is_empty() {
        return Err(contract("metrics need at least one point"));
    }
    Ok((p, g))
}

fn select(points: &[Vector3<f64>], subset: &Option<Vec<usize>>) -> Result<Vec<Vector3<f64>>> {
    match subset {
        None => Ok(points.to_vec()),
        Some(idx) => idx
            .iter()
            .map(|&i| {
                points
                    .get(i)
                    .copied()
                    .ok_or_else(|| contract(format!("joint subset index {i} out of range")))
            })
            .collect(),
    }
}

fn mean_distance(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).sum::<f64>() / a.len() as f64
}

fn root_of(p: &[Vector3<f64>], root: usize) -> Result<Vector3<f64>> {
    p.get(root)
        .copied()
        .ok_or_else(|| contract(format!("root joint {root} out of range")))
}

/// Mean joint distance after subtracting each side's root joint.
pub fn mpjpe(pred: &Tensor, gt: &Tensor, opts: &MetricOptions) -> Result<f64> {
    let (p, g) = paired(pred, gt)?;
    let (rp, rg) = (root_of(&p, opts.root)?, root_of(&g, opts.root)?);
    let p: Vec<_> = p.iter().map(|v| v - rp).collect();
    let g: Vec<_> = g.iter().map(|v| v - rg).collect();
    Ok(mean_distance(
        &select(&p, &opts.subset)?,
        &select(&g, &opts.subset)?,
    ))
}

/// The similarity transform `x ↦ s·R·x + t` taking `x` closest to `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }
}

fn centroid(p: &[Vector3<f64>]) -> Vector3<f64> {
    p.iter().sum::<Vector3<f64>>() / p.len() as f64
}

/// Closed-form similarity fit from the SVD of the centered cross-covariance,
/// with a sign flip on the last axis when the fit would reflect.
pub fn procrustes_fit(x: &[Vector3<f64>], y: &[Vector3<f64>]) -> Result<Similarity> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::Alignment("need at least 3 paired points".into()));
    }
    let (mx, my) = (centroid(x), centroid(y));
    let xc: Vec<_> = x.iter().map(|p| p - mx).collect();
    let yc: Vec<_> = y.iter().map(|p| p - my).collect();
    let var_x: f64 = xc.iter().map(|p| p.norm_squared()).sum();
    let spread = DMatrix::from_fn(xc.len(), 3, |i, j| xc[i][j])
        .svd(false, false)
        .singular_values;
    if var_x <= 0.0 || spread[1] <= 1e-10 * spread[0].max(f64::MIN_POSITIVE) {
        return Err(Error::Alignment(
            "source points are collinear or coincident".into(),
        ));
    }
    let cov: Matrix3<f64> = yc.iter().zip(&xc).map(|(b, a)| b * a.transpose()).sum();
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * vt;
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * d[(i, i)]).sum();
    let scale = trace / var_x;
    if !(scale > 0.0) {
        return Err(Error::Alignment("non-positive optimal scale".into()));
    }
    let translation = my - rotation * mx * scale;
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// `x` aligned onto `y` by the best similarity transform.
pub fn procrustes_align(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (xp, yp) = paired(x, y)?;
    let sim = procrustes_fit(&xp, &yp)?;
    let out: Vec<f64> = xp
        .iter()
        .flat_map(|p| sim.apply(p).iter().copied().collect::<Vec<_>>())
        .collect();
    Ok(Tensor::new(x.shape(), out)?)
}

/// MPJPE after Procrustes alignment on the scored joints.
pub fn pa_mpjpe(pred: &Tensor, gt: &Tensor, opts: &MetricOptions) -> Result<f64> {
    let (p, g) = paired(pred, gt)?;
    let (p, g) = (select(&p, &opts.subset)?, select(&g, &opts.subset)?);
    let sim = procrustes_fit(&p, &g)?;
    let aligned: Vec<_> = p.iter().map(|v| sim.apply(v)).collect();
    Ok(mean_distance(&aligned, &g))
}

/// Mean vertex distance after moving each mesh by its own root offset.
pub fn pve(pred: &Tensor, gt: &Tensor, root_pred: [f64; 3], root_gt: [f64; 3]) -> Result<f64> {
    let (p, g) = paired(pred, gt)?;
    let (rp, rg) = (Vector3::from(root_pred), Vector3::from(root_gt));
    let p: Vec<_> = p.iter().map(|v| v - rp).collect();
    let g: Vec<_> = g.iter().map(|v| v - rg).collect();
    Ok(mean_distance(&p, &g))
}

/// Metrics of one sample for one output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMetrics {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub pve: f64,
}

/// Scores one prediction against ground-truth joints and full vertices.
pub fn score(
    pred: &MeshPrediction,
    joints: &Tensor,
    vertices: &Tensor,
    opts: &MetricOptions,
) -> Result<SampleMetrics> {
    let root = |t: &Tensor| -> Result<[f64; 3]> {
        if opts.root >= t.shape()[0] {
            return Err(contract(format!("root joint {} out of range", opts.root)));
        }
        let r = t.row(opts.root);
        Ok([r[0], r[1], r[2]])
    };
    Ok(SampleMetrics {
        mpjpe: mpjpe(&pred.joints, joints, opts)?,
        pa_mpjpe: pa_mpjpe(&pred.joints, joints, opts)?,
        pve: pve(&pred.full, vertices, root(&pred.joints)?, root(joints)?)?,
    })
}

/// Averages for one output plus the per-sample breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub branch: BranchTag,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub pve: f64,
    pub per_sample: Vec<SampleMetrics>,
}

impl EvalRow {
    pub fn from_samples(branch: BranchTag, per_sample: Vec<SampleMetrics>) -> Self {
        let n = per_sample.len().max(1) as f64;
        let avg = |f: fn(&SampleMetrics) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
        Self {
            branch,
            mpjpe: avg(|m| m.mpjpe),
            pa_mpjpe: avg(|m| m.pa_mpjpe),
            pve: avg(|m| m.pve),
            per_sample,
        }
    }
}

/// Fused and per-branch rows, in body units.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn row(&self, branch: BranchTag) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.branch == branch)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("output,mpjpe,pa_mpjpe,pve,samples\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.branch.as_str(),
                r.mpjpe,
                r.pa_mpjpe,
                r.pve,
                r.per_sample.len()
            );
        }
        s
    }

    pub fn per_sample_csv(&self) -> String {
        let mut s = String::from("output,sample,mpjpe,pa_mpjpe,pve\n");
        for r in &self.rows {
            for (i, m) in r.per_sample.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{},{i},{},{},{}",
                    r.branch.as_str(),
                    m.mpjpe,
                    m.pa_mpjpe,
                    m.pve
                );
            }
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<8}  MPJPE {:>9.5}  PA-MPJPE {:>9.5}  PVE {:>9.5}  (n={})",
                r.branch.as_str(),
                r.mpjpe,
                r.pa_mpjpe,
                r.pve,
                r.per_sample.len()
            );
        }
        s
    }
}
