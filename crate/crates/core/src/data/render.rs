//! Splat renderer: projected vertices become colored blobs over noise.

use rand::Rng;

use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Blob standard deviation in pixels; blobs are cut off at three of these.
pub const BLOB_SIGMA: f64 = 1.0;
/// Background noise amplitude.
pub const BACKGROUND_LEVEL: f64 = 0.15;

/// A splat: pixel position, depth (larger = farther), RGB color.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat {
    pub pixel: [f64; 2],
    pub depth: f64,
    pub color: [f64; 3],
}

/// Fixed palette cycled over body parts.
pub fn part_color(part: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 8] = [
        [0.9, 0.3, 0.3],
        [0.3, 0.9, 0.3],
        [0.3, 0.4, 0.95],
        [0.9, 0.85, 0.25],
        [0.85, 0.3, 0.9],
        [0.25, 0.9, 0.9],
        [0.95, 0.6, 0.2],
        [0.6, 0.6, 0.6],
    ];
    PALETTE[part % PALETTE.len()]
}

/// Uniform noise background, `3 × height × width` in `[0, BACKGROUND_LEVEL]`.
pub fn background(height: usize, width: usize, rng: &mut impl Rng) -> Result<Tensor> {
    Ok(Tensor::from_fn(&[3, height, width], |_| {
        rng.random_range(0.0..BACKGROUND_LEVEL)
    })?)
}

/// Adds every splat as a truncated Gaussian blob, brighter when nearer, then
/// clamps to `[0, 1]`.
pub fn render_splats(
    splats: &[Splat],
    height: usize,
    width: usize,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if height == 0 || width == 0 {
        return Err(contract("render target must be nonempty"));
    }
    let mut img = background(height, width, rng)?;
    let radius = 3.0 * BLOB_SIGMA;
    let data = img.data_mut();
    for s in splats {
        let brightness = (0.75 - 0.25 * s.depth).clamp(0.3, 1.0);
        let (cx, cy) = (s.pixel[0], s.pixel[1]);
        let x0 = (cx - radius).floor().max(0.0) as usize;
        let y0 = (cy - radius).floor().max(0.0) as usize;
        let x1 = ((cx + radius).ceil().max(-1.0) as isize).min(width as isize - 1);
        let y1 = ((cy + radius).ceil().max(-1.0) as isize).min(height as isize - 1);
        if x1 < 0 || y1 < 0 {
            continue;
        }
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let d2 = dx * dx + dy * dy;
                if d2 > radius * radius {
                    continue;
                }
                let w = brightness * (-d2 / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp();
                for (c, col) in s.color.iter().enumerate() {
                    data[(c * height + y) * width + x] += w * col;
                }
            }
        }
    }
    data.iter_mut().for_each(|v| *v = v.min(1.0));
    Ok(img)
}
