//! Template mesh and linear joint regressor assets.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{contract, format_err, Result};
use crate::tensor::Tensor;

/// Rest-pose coarse mesh and joints used for positional token content and as
/// the residual base of the vertex/joint heads.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateMesh {
    /// `M_coarse × 3`.
    pub coarse: Tensor,
    /// `K_joint × 3`.
    pub joints: Tensor,
    pub full_vertices: usize,
    pub edges: Vec<(usize, usize)>,
    /// Full-resolution rest vertices, when known (`M_full × 3`).
    pub full: Option<Tensor>,
    /// Full-mesh index of each coarse vertex, when the coarse mesh is a subset.
    pub coarse_index: Option<Vec<usize>>,
}

impl TemplateMesh {
    pub fn coarse_count(&self) -> usize {
        self.coarse.shape()[0]
    }

    pub fn joint_count(&self) -> usize {
        self.joints.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.coarse.rank() != 2
            || self.coarse.shape()[1] != 3
            || self.joints.rank() != 2
            || self.joints.shape()[1] != 3
        {
            return Err(contract("template vertices and joints must be N×3"));
        }
        if self.full_vertices < self.coarse_count() {
            return Err(contract("template full vertex count below coarse count"));
        }
        if let Some((a, b)) = self
            .edges
            .iter()
            .find(|(a, b)| *a >= self.coarse_count() || *b >= self.coarse_count())
        {
            return Err(contract(format!("template edge ({a}, {b}) out of range")));
        }
        if let Some(f) = &self.full {
            if f.shape() != [self.full_vertices, 3] {
                return Err(contract("full template shape mismatch"));
            }
        }
        if let Some(idx) = &self.coarse_index {
            if idx.len() != self.coarse_count() || idx.iter().any(|&i| i >= self.full_vertices) {
                return Err(contract("coarse index does not match the template"));
            }
        }
        Ok(())
    }

    /// Parses `v x y z`, `j x y z`, and `e i j` lines; `#` starts a comment.
    pub fn parse(text: &str, full_vertices: usize) -> Result<Self> {
        let mut verts = Vec::new();
        let mut joints = Vec::new();
        let mut edges = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let tag = parts.next().unwrap_or_default();
            let fields: Vec<&str> = parts.collect();
            let bad = || format_err("template mesh", format!("line {}: `{raw}`", lineno + 1));
            match (tag, fields.len()) {
                ("v" | "j", 3) => {
                    let xyz = fields
                        .iter()
                        .map(|f| f.parse::<f64>().map_err(|_| bad()))
                        .collect::<Result<Vec<_>>>()?;
                    if tag == "v" { &mut verts } else { &mut joints }.extend(xyz);
                }
                ("e", 2) => {
                    let a = fields[0].parse().map_err(|_| bad())?;
                    let b = fields[1].parse().map_err(|_| bad())?;
                    edges.push((a, b));
                }
                _ => return Err(bad()),
            }
        }
        if verts.is_empty() || joints.is_empty() {
            return Err(format_err(
                "template mesh",
                "needs at least one vertex and one joint",
            ));
        }
        let t = Self {
            coarse: Tensor::new(&[verts.len() / 3, 3], verts)?,
            joints: Tensor::new(&[joints.len() / 3, 3], joints)?,
            full_vertices,
            edges,
            full: None,
            coarse_index: None,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path, full_vertices: usize) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, full_vertices)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in 0..self.coarse_count() {
            let v = self.coarse.row(r);
            let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
        }
        for r in 0..self.joint_count() {
            let v = self.joints.row(r);
            let _ = writeln!(s, "j {} {} {}", v[0], v[1], v[2]);
        }
        for (a, b) in &self.edges {
            let _ = writeln!(s, "e {a} {b}");
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }
}

/// Row-stochastic `K × M` map from mesh vertices to points (`J = W·V`).
#[derive(Debug, Clone, PartialEq)]
pub struct JointRegressor {
    pub weights: Tensor,
}

impl JointRegressor {
    pub fn new(weights: Tensor) -> Result<Self> {
        if weights.rank() != 2 {
            return Err(contract("joint regressor must be a matrix"));
        }
        let m = weights.shape()[1];
        for r in 0..weights.shape()[0] {
            let row = weights.row(r);
            let sum: f64 = row.iter().sum();
            if row.iter().any(|w| *w < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(contract(format!(
                    "regressor row {r} is not a convex combination (sum {sum})"
                )));
            }
        }
        debug_assert!(m > 0);
        Ok(Self { weights })
    }

    pub fn rows(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn vertices(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Normalized Gaussian weights over the `neighbors` template vertices
    /// nearest to each anchor.
    pub fn gaussian(
        vertices: &Tensor,
        anchors: &[[f64; 3]],
        neighbors: usize,
        sigma: f64,
    ) -> Result<Self> {
        let m = vertices.shape()[0];
        let n = neighbors.clamp(1, m);
        let mut w = vec![0.0; anchors.len() * m];
        for (r, a) in anchors.iter().enumerate() {
            let mut d2: Vec<(f64, usize)> = (0..m)
                .map(|i| {
                    let v = vertices.row(i);
                    (
                        (v[0] - a[0]).powi(2) + (v[1] - a[1]).powi(2) + (v[2] - a[2]).powi(2),
                        i,
                    )
                })
                .collect();
            d2.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            let nearest = d2[0].0;
            let picks = &d2[..n];
            let raw: Vec<f64> = picks
                .iter()
                .map(|(d, _)| (-(d - nearest) / (2.0 * sigma * sigma)).exp())
                .collect();
            let total: f64 = raw.iter().sum();
            for ((_, i), v) in picks.iter().zip(raw) {
                w[r * m + i] = v / total;
            }
        }
        Self::new(Tensor::new(&[anchors.len(), m], w)?)
    }

    /// Plain text: one whitespace-separated row of weights per joint.
    pub fn parse(text: &str) -> Result<Self> {
        let rows: Vec<Vec<f64>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_whitespace()
                    .map(|f| {
                        f.parse::<f64>()
                            .map_err(|_| format_err("joint regressor", format!("bad value `{f}`")))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        Self::new(Tensor::from_rows(&rows)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        (0..self.rows())
            .map(|r| {
                let cells: Vec<String> = self.weights.row(r).iter().map(f64::to_string).collect();
                cells.join(" ") + "\n"
            })
            .collect()
    }

    /// `W·V` for `V: M × 3`, computed outside any graph.
    pub fn apply(&self, vertices: &Tensor) -> Result<Tensor> {
        if vertices.rank() != 2 || vertices.shape()[0] != self.vertices() {
            return Err(contract(format!(
                "regressor expects {} vertices, got {:?}",
                self.vertices(),
                vertices.shape()
            )));
        }
        let c = vertices.shape()[1];
        let data = crate::tensor::kernels::matmul(
            self.weights.data(),
            vertices.data(),
            self.rows(),
            self.vertices(),
            c,
        );
        Ok(Tensor::new(&[self.rows(), c], data)?)
    }
}
