//! Raw numeric kernels on row-major slices.
//!
//! Every accumulation runs in a fixed index order so that results are
//! bitwise reproducible, and so that the im2col convolution path produces
//! exactly the same bits as the direct loop path.

/// Geometry of a square-stride, symmetric-padding 2D convolution over one
/// `channels × height × width` feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Output extent of a forward convolution, or `None` if the kernel does
    /// not fit.
    pub fn conv_out(&self) -> Option<(usize, usize)> {
        let ph = self.in_h + 2 * self.padding;
        let pw = self.in_w + 2 * self.padding;
        if self.stride == 0 || ph < self.kernel_h || pw < self.kernel_w {
            return None;
        }
        Some((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    /// Output extent of a transposed convolution, or `None` if non-positive.
    pub fn transposed_out(&self) -> Option<(usize, usize)> {
        if self.stride == 0 {
            return None;
        }
        let h = (self.in_h - 1) * self.stride + self.kernel_h;
        let w = (self.in_w - 1) * self.stride + self.kernel_w;
        let h = h.checked_sub(2 * self.padding)?;
        let w = w.checked_sub(2 * self.padding)?;
        (h > 0 && w > 0).then_some((h, w))
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`, accumulating over `k` in increasing order.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_acc(a, b, &mut out, m, k, n);
    out
}

/// `out += a · b` with the same ordering guarantees as [`matmul`].
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Unfolds input patches: rows are `(channel, ky, kx)`, columns are output
/// positions in row-major order. Out-of-bounds taps are zero.
pub fn im2col(x: &[f64], g: &ConvGeometry, out_h: usize, out_w: usize) -> Vec<f64> {
    let kk = g.kernel_h * g.kernel_w;
    let positions = out_h * out_w;
    let mut cols = vec![0.0; g.in_channels * kk * positions];
    for c in 0..g.in_channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let r = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[r * positions..(r + 1) * positions];
                for oy in 0..out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..out_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[oy * out_w + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column entries back onto the
/// `in_channels × in_h × in_w` map, visiting rows `(c, ky, kx)` then
/// positions in row-major order.
pub fn col2im(cols: &[f64], g: &ConvGeometry, out_h: usize, out_w: usize) -> Vec<f64> {
    let positions = out_h * out_w;
    let mut x = vec![0.0; g.in_channels * g.in_h * g.in_w];
    for c in 0..g.in_channels {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let r = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[r * positions..(r + 1) * positions];
                for oy in 0..out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for ox in 0..out_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            plane[iy as usize * g.in_w + ix as usize] += src[oy * out_w + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn add_bias(out: &mut [f64], bias: Option<&[f64]>, positions: usize) {
    if let Some(b) = bias {
        for (o, &bv) in b.iter().enumerate() {
            out[o * positions..(o + 1) * positions]
                .iter_mut()
                .for_each(|v| *v += bv);
        }
    }
}

/// Cross-correlation through im2col + matmul. Weights are
/// `out_channels × in_channels × kernel_h × kernel_w`.
pub fn conv2d_im2col(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeometry) -> Vec<f64> {
    let (oh, ow) = g.conv_out().expect("conv geometry validated by caller");
    let cols = im2col(x, g, oh, ow);
    let kdim = g.in_channels * g.kernel_h * g.kernel_w;
    let mut out = matmul(w, &cols, g.out_channels, kdim, oh * ow);
    add_bias(&mut out, bias, oh * ow);
    out
}

/// Reference cross-correlation with explicit loops; bit-equal to
/// [`conv2d_im2col`].
pub fn conv2d_direct(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeometry) -> Vec<f64> {
    let (oh, ow) = g.conv_out().expect("conv geometry validated by caller");
    let mut out = vec![0.0; g.out_channels * oh * ow];
    for o in 0..g.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for c in 0..g.in_channels {
                    for ky in 0..g.kernel_h {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        for kx in 0..g.kernel_w {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                continue;
                            }
                            let wv =
                                w[((o * g.in_channels + c) * g.kernel_h + ky) * g.kernel_w + kx];
                            acc += wv * x[(c * g.in_h + iy as usize) * g.in_w + ix as usize];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    add_bias(&mut out, bias, oh * ow);
    out
}

/// The convolution whose output grid is this transposed convolution's input:
/// same kernel/stride/padding, mapping `out_channels × out_h × out_w` back to
/// `in_channels × in_h × in_w`.
fn transposed_as_conv(g: &ConvGeometry, out_h: usize, out_w: usize) -> ConvGeometry {
    ConvGeometry {
        in_channels: g.out_channels,
        out_channels: g.in_channels,
        in_h: out_h,
        in_w: out_w,
        ..*g
    }
}

/// Transposed convolution via matmul + col2im. Weights are
/// `in_channels × out_channels × kernel_h × kernel_w`.
pub fn conv_transpose2d_col2im(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeometry,
) -> Vec<f64> {
    let (oh, ow) = g
        .transposed_out()
        .expect("transposed geometry validated by caller");
    let kk = g.kernel_h * g.kernel_w;
    let positions = g.in_h * g.in_w;
    // cols[(co, ky, kx), p] = Σ_ci w[ci, (co, ky, kx)] · x[ci, p]
    let wt = transpose(w, g.in_channels, g.out_channels * kk);
    let cols = matmul(&wt, x, g.out_channels * kk, g.in_channels, positions);
    let mut out = col2im(&cols, &transposed_as_conv(g, oh, ow), g.in_h, g.in_w);
    add_bias(&mut out, bias, oh * ow);
    out
}

/// Loop form of [`conv_transpose2d_col2im`] with the same accumulation order.
pub fn conv_transpose2d_direct(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeometry,
) -> Vec<f64> {
    let (oh, ow) = g
        .transposed_out()
        .expect("transposed geometry validated by caller");
    let kk = g.kernel_h * g.kernel_w;
    let mut out = vec![0.0; g.out_channels * oh * ow];
    for co in 0..g.out_channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                for iy in 0..g.in_h {
                    let oy = (iy * g.stride + ky) as isize - g.padding as isize;
                    if oy < 0 || oy >= oh as isize {
                        continue;
                    }
                    for ix in 0..g.in_w {
                        let ox = (ix * g.stride + kx) as isize - g.padding as isize;
                        if ox < 0 || ox >= ow as isize {
                            continue;
                        }
                        let mut acc = 0.0;
                        for ci in 0..g.in_channels {
                            acc += w[ci * g.out_channels * kk
                                + (co * g.kernel_h + ky) * g.kernel_w
                                + kx]
                                * x[(ci * g.in_h + iy) * g.in_w + ix];
                        }
                        out[(co * oh + oy as usize) * ow + ox as usize] += acc;
                    }
                }
            }
        }
    }
    add_bias(&mut out, bias, oh * ow);
    out
}

/// Gradients of a forward convolution: `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    d_out: &[f64],
    g: &ConvGeometry,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = g.conv_out().expect("conv geometry validated by caller");
    let positions = oh * ow;
    let kdim = g.in_channels * g.kernel_h * g.kernel_w;
    let cols = im2col(x, g, oh, ow);
    let d_w = matmul(
        d_out,
        &transpose(&cols, kdim, positions),
        g.out_channels,
        positions,
        kdim,
    );
    let d_cols = matmul(
        &transpose(w, g.out_channels, kdim),
        d_out,
        kdim,
        g.out_channels,
        positions,
    );
    let d_x = col2im(&d_cols, g, oh, ow);
    let d_b = row_sums(d_out, g.out_channels, positions);
    (d_x, d_w, d_b)
}

/// Gradients of a transposed convolution: `(d_input, d_weight, d_bias)`.
pub fn conv_transpose2d_backward(
    x: &[f64],
    w: &[f64],
    d_out: &[f64],
    g: &ConvGeometry,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = g
        .transposed_out()
        .expect("transposed geometry validated by caller");
    let kk = g.kernel_h * g.kernel_w;
    let positions = g.in_h * g.in_w;
    let cg = transposed_as_conv(g, oh, ow);
    // d_cols[(co,ky,kx), p] gathers the output gradient seen by each tap.
    let d_cols = im2col(d_out, &cg, g.in_h, g.in_w);
    let rows = g.out_channels * kk;
    let d_x = matmul(w, &d_cols, g.in_channels, rows, positions);
    let d_w = matmul(
        x,
        &transpose(&d_cols, rows, positions),
        g.in_channels,
        positions,
        rows,
    );
    let d_b = row_sums(d_out, g.out_channels, oh * ow);
    (d_x, d_w, d_b)
}

pub fn row_sums(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|r| a[r * cols..(r + 1) * cols].iter().sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(c: usize, o: usize, h: usize, w: usize, k: usize, s: usize, p: usize) -> ConvGeometry {
        ConvGeometry {
            in_channels: c,
            out_channels: o,
            in_h: h,
            in_w: w,
            kernel_h: k,
            kernel_w: k,
            stride: s,
            padding: p,
        }
    }

    #[test]
    fn matmul_hand_example() {
        let out = matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0], 2, 2, 1);
        assert_eq!(out, vec![17.0, 39.0]);
    }

    #[test]
    fn sliding_window_sums() {
        let x: Vec<f64> = (1..=9).map(f64::from).collect();
        let g = geom(1, 1, 3, 3, 2, 1, 0);
        let out = conv2d_im2col(&x, &[1.0; 4], None, &g);
        assert_eq!(out, vec![12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn im2col_matches_direct_bitwise() {
        let mut state = 7u64;
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for &(c, o, h, w, k, s, p) in &[
            (3, 4, 9, 7, 3, 2, 1),
            (2, 3, 8, 8, 3, 1, 1),
            (1, 2, 5, 6, 2, 2, 0),
            (4, 2, 4, 4, 1, 1, 0),
        ] {
            let g = geom(c, o, h, w, k, s, p);
            let x: Vec<f64> = (0..c * h * w).map(|_| next()).collect();
            let wt: Vec<f64> = (0..o * c * k * k).map(|_| next()).collect();
            let b: Vec<f64> = (0..o).map(|_| next()).collect();
            let a = conv2d_im2col(&x, &wt, Some(&b), &g);
            let d = conv2d_direct(&x, &wt, Some(&b), &g);
            assert!(a.iter().zip(&d).all(|(u, v)| u.to_bits() == v.to_bits()));

            let tw: Vec<f64> = (0..c * o * k * k).map(|_| next()).collect();
            if g.transposed_out().is_some() {
                let a = conv_transpose2d_col2im(&x, &tw, Some(&b), &g);
                let d = conv_transpose2d_direct(&x, &tw, Some(&b), &g);
                assert!(a.iter().zip(&d).all(|(u, v)| u.to_bits() == v.to_bits()));
            }
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv^T(y)> for matching weights.
        let g = geom(2, 3, 6, 6, 4, 2, 1);
        let (oh, ow) = g.conv_out().unwrap();
        let x: Vec<f64> = (0..2 * 36).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..3 * oh * ow).map(|i| (i as f64 * 0.91).cos()).collect();
        let w: Vec<f64> = (0..3 * 2 * 16).map(|i| (i as f64 * 0.13).sin()).collect();
        let cx = conv2d_direct(&x, &w, None, &g);
        let tg = ConvGeometry {
            in_channels: 3,
            out_channels: 2,
            in_h: oh,
            in_w: ow,
            ..g
        };
        assert_eq!(tg.transposed_out(), Some((6, 6)));
        let ty = conv_transpose2d_direct(&y, &w, None, &tg);
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&ty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
