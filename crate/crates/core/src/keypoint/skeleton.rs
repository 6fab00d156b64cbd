//! Keypoint connectivity and its normalized adjacency.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tensor::Tensor;

pub const COCO_NAMES: [&str; 17] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

pub const COCO_EDGES: [(usize, usize); 18] = [
    (0, 1),
    (0, 2),
    (1, 3),
    (2, 4),
    (0, 5),
    (0, 6),
    (5, 6),
    (5, 7),
    (7, 9),
    (6, 8),
    (8, 10),
    (5, 11),
    (6, 12),
    (11, 12),
    (11, 13),
    (13, 15),
    (12, 14),
    (14, 16),
];

/// On-disk form: `{"nodes": [...], "edges": [[a, b], ...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SkeletonFile {
    nodes: Vec<String>,
    edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonGraph {
    pub names: Vec<String>,
    pub edges: Vec<(usize, usize)>,
    /// `D^{-1/2} (A + I) D^{-1/2}`.
    pub adjacency: Tensor,
}

impl SkeletonGraph {
    pub fn new(names: Vec<String>, edges: Vec<(usize, usize)>) -> Result<Self> {
        let k = names.len();
        if k == 0 {
            return Err(contract("skeleton needs at least one node"));
        }
        let mut a = vec![0.0; k * k];
        for i in 0..k {
            a[i * k + i] = 1.0;
        }
        for &(i, j) in &edges {
            if i >= k || j >= k {
                return Err(contract(format!(
                    "skeleton edge ({i}, {j}) out of range for {k} nodes"
                )));
            }
            a[i * k + j] = 1.0;
            a[j * k + i] = 1.0;
        }
        let mut seen = vec![false; k];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for j in 0..k {
                if a[i * k + j] != 0.0 && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        if seen.contains(&false) {
            return Err(contract("skeleton graph is not connected"));
        }
        let inv_sqrt: Vec<f64> = (0..k)
            .map(|i| 1.0 / a[i * k..(i + 1) * k].iter().sum::<f64>().sqrt())
            .collect();
        let adj = Tensor::from_fn(&[k, k], |idx| {
            let (i, j) = (idx / k, idx % k);
            inv_sqrt[i] * a[idx] * inv_sqrt[j]
        })?;
        Ok(Self {
            names,
            edges,
            adjacency: adj,
        })
    }

    pub fn coco() -> Self {
        Self::new(
            COCO_NAMES.iter().map(|s| s.to_string()).collect(),
            COCO_EDGES.to_vec(),
        )
        .expect("valid COCO skeleton")
    }

    /// A path graph `0 − 1 − … − (k−1)` for non-COCO keypoint counts.
    pub fn chain(k: usize) -> Result<Self> {
        Self::new(
            (0..k).map(|i| format!("kp{i}")).collect(),
            (1..k).map(|i| (i - 1, i)).collect(),
        )
    }

    /// COCO layout for 17 keypoints, a chain otherwise.
    pub fn for_keypoints(k: usize) -> Result<Self> {
        if k == COCO_NAMES.len() {
            Ok(Self::coco())
        } else {
            Self::chain(k)
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: SkeletonFile = serde_json::from_str(text)?;
        Self::new(f.nodes, f.edges)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&SkeletonFile {
            nodes: self.names.clone(),
            edges: self.edges.clone(),
        })?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adjacency_is_symmetric_normalized() {
        let g = SkeletonGraph::coco();
        let k = g.len();
        for i in 0..k {
            for j in 0..k {
                assert_eq!(g.adjacency.get(&[i, j]), g.adjacency.get(&[j, i]));
            }
        }
        // path of three: degrees (with self loops) 2, 3, 2
        let p = SkeletonGraph::chain(3).unwrap();
        assert!((p.adjacency.get(&[0, 1]) - 1.0 / (6.0f64).sqrt()).abs() < 1e-15);
        assert!((p.adjacency.get(&[1, 1]) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_disconnected_and_roundtrips_json() {
        assert!(SkeletonGraph::new(vec!["a".into(), "b".into()], vec![]).is_err());
        let g = SkeletonGraph::coco();
        assert_eq!(SkeletonGraph::from_json(&g.to_json().unwrap()).unwrap(), g);
    }
}
