//! Heatmap/offset targets and their decoding into pixel coordinates.

use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Offsets are stored in heatmap cells and clamped to this magnitude.
pub const OFFSET_LIMIT: f64 = 2.0;
/// Offsets are written only for cells closer than this to the keypoint.
pub const OFFSET_RADIUS: f64 = 2.0;
/// Input pixels per heatmap cell.
pub const HEATMAP_STRIDE: f64 = 4.0;

/// Per-keypoint confidence maps (`K × h × w`) and x/y offset maps
/// (`K × 2 × h × w`) at a quarter of the input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapSet {
    pub heatmaps: Tensor,
    pub offsets: Tensor,
}

impl HeatmapSet {
    pub fn new(heatmaps: Tensor, offsets: Tensor) -> Result<Self> {
        let hs = heatmaps.shape();
        if hs.len() != 3 || offsets.shape() != [hs[0], 2, hs[1], hs[2]] {
            return Err(contract(format!(
                "heatmaps {:?} and offsets {:?} disagree",
                heatmaps.shape(),
                offsets.shape()
            )));
        }
        if offsets.data().iter().any(|o| o.abs() > OFFSET_LIMIT) {
            return Err(contract("offset outside [-2, 2]"));
        }
        Ok(Self { heatmaps, offsets })
    }

    pub fn keypoints(&self) -> usize {
        self.heatmaps.shape()[0]
    }

    /// `(h, w)` of each map.
    pub fn extent(&self) -> (usize, usize) {
        (self.heatmaps.shape()[1], self.heatmaps.shape()[2])
    }
}

/// 2D keypoints in input-image pixels with per-point visibility.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoints2D {
    pub coords: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

impl Keypoints2D {
    pub fn new(coords: Vec<[f64; 2]>, visible: Vec<bool>) -> Result<Self> {
        if coords.len() != visible.len() {
            return Err(contract("keypoint coordinate and visibility counts differ"));
        }
        if coords.iter().flatten().any(|c| !c.is_finite()) {
            return Err(contract("non-finite keypoint coordinate"));
        }
        Ok(Self { coords, visible })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Coordinates mapped to `[-1, 1]` by the image extent; invisible rows zeroed.
    pub fn normalized(&self, height: usize, width: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(self.len() * 2);
        for (c, &vis) in self.coords.iter().zip(&self.visible) {
            if vis {
                data.push(2.0 * c[0] / width as f64 - 1.0);
                data.push(2.0 * c[1] / height as f64 - 1.0);
            } else {
                data.extend([0.0, 0.0]);
            }
        }
        Ok(Tensor::new(&[self.len(), 2], data)?)
    }

    pub fn visibility_weights(&self) -> Vec<f64> {
        self.visible
            .iter()
            .map(|&v| if v { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Gaussian heatmaps (peak 1 at the keypoint) and offsets `c/4 − cell` for
/// cells within distance 2; invisible keypoints get all-zero maps.
pub fn render_gt_maps(
    kp: &Keypoints2D,
    height: usize,
    width: usize,
    sigma: f64,
) -> Result<HeatmapSet> {
    if height % 4 != 0 || width % 4 != 0 || height == 0 || width == 0 {
        return Err(contract(format!(
            "image extent {height}×{width} not divisible by 4"
        )));
    }
    let (h, w) = (height / 4, width / 4);
    let k = kp.len();
    let mut heat = vec![0.0; k * h * w];
    let mut off = vec![0.0; k * 2 * h * w];
    let denom = 2.0 * sigma * sigma;
    for (i, (c, &vis)) in kp.coords.iter().zip(&kp.visible).enumerate() {
        if !vis {
            continue;
        }
        let (mx, my) = (c[0] / HEATMAP_STRIDE, c[1] / HEATMAP_STRIDE);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (mx - x as f64, my - y as f64);
                let d2 = dx * dx + dy * dy;
                heat[(i * h + y) * w + x] = (-d2 / denom).exp();
                if d2.sqrt() < OFFSET_RADIUS {
                    off[((i * 2) * h + y) * w + x] = dx.clamp(-OFFSET_LIMIT, OFFSET_LIMIT);
                    off[((i * 2 + 1) * h + y) * w + x] = dy.clamp(-OFFSET_LIMIT, OFFSET_LIMIT);
                }
            }
        }
    }
    HeatmapSet::new(
        Tensor::new(&[k, h, w], heat)?,
        Tensor::new(&[k, 2, h, w], off)?,
    )
}

/// Argmax cell plus its offset, scaled back to input pixels. Ties go to the
/// first cell in row-major order; a keypoint is visible iff its peak exceeds
/// `threshold`. Coordinates are clamped to the image rectangle.
pub fn decode_keypoints(maps: &HeatmapSet, threshold: f64) -> Result<Keypoints2D> {
    let (h, w) = maps.extent();
    let heat = maps.heatmaps.data();
    let off = maps.offsets.data();
    let mut coords = Vec::with_capacity(maps.keypoints());
    let mut visible = Vec::with_capacity(maps.keypoints());
    for k in 0..maps.keypoints() {
        let plane = &heat[k * h * w..(k + 1) * h * w];
        let mut best = 0;
        for (i, &v) in plane.iter().enumerate() {
            if v > plane[best] {
                best = i;
            }
        }
        let (py, px) = (best / w, best % w);
        let ox = off[((k * 2) * h + py) * w + px];
        let oy = off[((k * 2 + 1) * h + py) * w + px];
        let x = HEATMAP_STRIDE * (px as f64 + ox);
        let y = HEATMAP_STRIDE * (py as f64 + oy);
        let (wmax, hmax) = (HEATMAP_STRIDE * w as f64, HEATMAP_STRIDE * h as f64);
        coords.push([x.clamp(0.0, wmax), y.clamp(0.0, hmax)]);
        visible.push(plane[best] > threshold);
    }
    Keypoints2D::new(coords, visible)
}
