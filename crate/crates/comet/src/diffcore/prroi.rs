//! Precise RoI pooling: each output bin is the exact integral average of the
//! bilinearly interpolated feature surface over the bin's continuous
//! rectangle, with analytic gradients for the features and all four box
//! coordinates.

use super::tensor::Tensor;
use crate::{Error, Result};

/// Bilinear hat kernel h(t) = max(0, 1 - |t|); feature value F[i][j] sits at
/// the integer lattice point (j, i).
#[inline]
fn hat(t: f64) -> f64 {
    let a = 1.0 - t.abs();
    if a > 0.0 {
        a
    } else {
        0.0
    }
}

/// Antiderivative of the hat kernel, G(u) = integral of h over (-inf, u].
#[inline]
fn hat_int(u: f64) -> f64 {
    if u <= -1.0 {
        0.0
    } else if u <= 0.0 {
        let s = u + 1.0;
        0.5 * s * s
    } else if u <= 1.0 {
        0.5 + u - 0.5 * u * u
    } else {
        1.0
    }
}

/// Integration weights of the hat kernels centered at each lattice index in
/// [0, len) against the interval [a, b]; returns (first_index, weights).
fn interval_weights(a: f64, b: f64, len: usize) -> (usize, Vec<f64>) {
    let lo = (a - 1.0).ceil().max(0.0) as usize;
    let hi_f = (b + 1.0).floor();
    if hi_f < 0.0 || lo >= len {
        return (0, Vec::new());
    }
    let hi = (hi_f as usize).min(len - 1);
    if lo > hi {
        return (0, Vec::new());
    }
    let w = (lo..=hi).map(|k| hat_int(b - k as f64) - hat_int(a - k as f64)).collect();
    (lo, w)
}

/// Pointwise hat weights at coordinate q; at most two lattice cells carry
/// non-zero weight.
fn point_weights(q: f64, len: usize) -> [(usize, f64); 2] {
    let mut out = [(0usize, 0.0f64); 2];
    let base = q.floor();
    for (slot, k) in [(0usize, base), (1usize, base + 1.0)] {
        if k >= 0.0 && (k as usize) < len {
            out[slot] = (k as usize, hat(q - k));
        }
    }
    out
}

pub fn check_roi_box(b: &[f64], context: &str) -> Result<()> {
    if b.iter().any(|v| !v.is_finite()) || b[2] <= 0.0 || b[3] <= 0.0 {
        return Err(Error::invalid_box(context, b[2], b[3]));
    }
    Ok(())
}

/// Forward pass. `feat` is (F, C, H, W); `boxes` is an R x 4 row-major slice
/// of (x, y, w, h) in feature coordinates; `batch_idx[r]` selects the feature
/// map each RoI pools from. Output is (R, C, bins.0, bins.1).
pub fn prroi_fwd(
    feat: &Tensor,
    boxes: &[f64],
    batch_idx: &[usize],
    bins: (usize, usize),
) -> Result<Tensor> {
    let (f, c, h, w) = feat.dims4("prroi_pool")?;
    let r = batch_idx.len();
    if boxes.len() != r * 4 {
        return Err(Error::shape("prroi_pool", format!("{} boxes vs {} batch indices", boxes.len() / 4, r)));
    }
    if bins.0 == 0 || bins.1 == 0 {
        return Err(Error::shape("prroi_pool", "bins must be >= 1"));
    }
    let (br, bc) = bins;
    let mut out = Tensor::zeros(&[r, c, br, bc]);
    for ri in 0..r {
        let b = &boxes[ri * 4..ri * 4 + 4];
        check_roi_box(b, "prroi_pool")?;
        if batch_idx[ri] >= f {
            return Err(Error::shape("prroi_pool", format!("batch index {} out of {f}", batch_idx[ri])));
        }
        let fbase = batch_idx[ri] * c * h * w;
        let (bx, by, bw, bh) = (b[0], b[1], b[2], b[3]);
        let binw = bw / bc as f64;
        let binh = bh / br as f64;
        let inv_area = 1.0 / (binw * binh);
        for bi in 0..br {
            let y1 = by + bi as f64 * binh;
            let (i0, hy) = interval_weights(y1, y1 + binh, h);
            for bj in 0..bc {
                let x1 = bx + bj as f64 * binw;
                let (j0, hx) = interval_weights(x1, x1 + binw, w);
                if hx.is_empty() || hy.is_empty() {
                    continue;
                }
                for ci in 0..c {
                    let plane = &feat.data()[fbase + ci * h * w..fbase + (ci + 1) * h * w];
                    let mut acc = 0.0;
                    for (di, &wy) in hy.iter().enumerate() {
                        let row = (i0 + di) * w + j0;
                        let mut rowacc = 0.0;
                        for (dj, &wx) in hx.iter().enumerate() {
                            rowacc += wx * plane[row + dj];
                        }
                        acc += wy * rowacc;
                    }
                    out.data_mut()[((ri * c + ci) * br + bi) * bc + bj] = acc * inv_area;
                }
            }
        }
    }
    Ok(out)
}

/// Backward pass; returns (d_feat, d_boxes) with d_boxes shaped R x 4.
pub fn prroi_bwd(
    feat: &Tensor,
    boxes: &[f64],
    batch_idx: &[usize],
    bins: (usize, usize),
    out: &Tensor,
    gout: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (_, c, h, w) = feat.dims4("prroi_pool")?;
    let r = batch_idx.len();
    let (br, bc) = bins;
    let mut dfeat = Tensor::zeros(feat.shape());
    let mut dboxes = Tensor::zeros(&[r, 4]);
    for ri in 0..r {
        let b = &boxes[ri * 4..ri * 4 + 4];
        let fbase = batch_idx[ri] * c * h * w;
        let (bx, by, bw, bh) = (b[0], b[1], b[2], b[3]);
        let binw = bw / bc as f64;
        let binh = bh / br as f64;
        let inv_area = 1.0 / (binw * binh);
        let mut dbox = [0.0f64; 4];
        for bi in 0..br {
            let y1 = by + bi as f64 * binh;
            let y2 = y1 + binh;
            let (i0, hy) = interval_weights(y1, y2, h);
            let py1 = point_weights(y1, h);
            let py2 = point_weights(y2, h);
            for bj in 0..bc {
                let x1 = bx + bj as f64 * binw;
                let x2 = x1 + binw;
                let (j0, hx) = interval_weights(x1, x2, w);
                let px1 = point_weights(x1, w);
                let px2 = point_weights(x2, w);
                for ci in 0..c {
                    let g = gout.data()[((ri * c + ci) * br + bi) * bc + bj];
                    if g == 0.0 {
                        continue;
                    }
                    let v = out.data()[((ri * c + ci) * br + bi) * bc + bj];
                    let plane_off = fbase + ci * h * w;
                    // feature gradient: g * Hy_i * Hx_j / area
                    {
                        let dplane = &mut dfeat.data_mut()[plane_off..plane_off + h * w];
                        for (di, &wy) in hy.iter().enumerate() {
                            let row = (i0 + di) * w + j0;
                            let gy = g * wy * inv_area;
                            for (dj, &wx) in hx.iter().enumerate() {
                                dplane[row + dj] += gy * wx;
                            }
                        }
                    }
                    let plane = &feat.data()[plane_off..plane_off + h * w];
                    // line integrals of the interpolated surface along the
                    // four bin edges
                    let mut lx1 = 0.0;
                    let mut lx2 = 0.0;
                    for (di, &wy) in hy.iter().enumerate() {
                        let row = (i0 + di) * w;
                        for (jj, pw) in px1 {
                            lx1 += wy * pw * plane[row + jj];
                        }
                        for (jj, pw) in px2 {
                            lx2 += wy * pw * plane[row + jj];
                        }
                    }
                    let mut my1 = 0.0;
                    let mut my2 = 0.0;
                    for (dj, &wx) in hx.iter().enumerate() {
                        let col = j0 + dj;
                        for (ii, pw) in py1 {
                            my1 += wx * pw * plane[ii * w + col];
                        }
                        for (ii, pw) in py2 {
                            my2 += wx * pw * plane[ii * w + col];
                        }
                    }
                    let dv_dx1 = -lx1 * inv_area + v / binw;
                    let dv_dx2 = lx2 * inv_area - v / binw;
                    let dv_dy1 = -my1 * inv_area + v / binh;
                    let dv_dy2 = my2 * inv_area - v / binh;
                    dbox[0] += g * (dv_dx1 + dv_dx2);
                    dbox[1] += g * (dv_dy1 + dv_dy2);
                    dbox[2] += g * (dv_dx1 * bj as f64 + dv_dx2 * (bj + 1) as f64) / bc as f64;
                    dbox[3] += g * (dv_dy1 * bi as f64 + dv_dy2 * (bi + 1) as f64) / br as f64;
                }
            }
        }
        dboxes.data_mut()[ri * 4..ri * 4 + 4].copy_from_slice(&dbox);
    }
    Ok((dfeat, dboxes))
}

/// Bilinear interpolation of a (C, H, W) map at continuous (x, y); reads
/// outside the lattice are zero.
pub fn bilinear_sample(feat: &Tensor, x: f64, y: f64) -> Result<Vec<f64>> {
    let shape = feat.shape();
    if shape.len() != 3 {
        return Err(Error::shape("bilinear_sample", format!("expected (C,H,W), got {:?}", shape)));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let px = point_weights(x, w);
    let py = point_weights(y, h);
    let mut out = vec![0.0; c];
    for ci in 0..c {
        let plane = &feat.data()[ci * h * w..(ci + 1) * h * w];
        let mut acc = 0.0;
        for (ii, wy) in py {
            for (jj, wx) in px {
                acc += wy * wx * plane[ii * w + jj];
            }
        }
        out[ci] = acc;
    }
    Ok(out)
}

/// Per-channel (d/dx, d/dy) of `bilinear_sample`; undefined exactly on
/// lattice lines where the subgradient of the hat kernel is used.
pub fn bilinear_sample_grad_xy(feat: &Tensor, x: f64, y: f64) -> Result<Vec<(f64, f64)>> {
    let shape = feat.shape();
    if shape.len() != 3 {
        return Err(Error::shape("bilinear_sample", format!("expected (C,H,W), got {:?}", shape)));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let px = point_weights(x, w);
    let py = point_weights(y, h);
    let dhat = |t: f64| if t.abs() >= 1.0 || t == 0.0 { 0.0 } else if t > 0.0 { -1.0 } else { 1.0 };
    let mut out = vec![(0.0, 0.0); c];
    for ci in 0..c {
        let plane = &feat.data()[ci * h * w..(ci + 1) * h * w];
        let mut gx = 0.0;
        let mut gy = 0.0;
        for (ii, wy) in py {
            for (jj, wx) in px {
                let v = plane[ii * w + jj];
                gx += wy * dhat(x - jj as f64) * v;
                gy += wx * dhat(y - ii as f64) * v;
            }
        }
        out[ci] = (gx, gy);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn constant_field_bins_and_zero_coord_grads() {
        let feat = Tensor::full(&[1, 2, 12, 12], 2.5);
        let boxes = [2.3, 3.1, 5.0, 4.2];
        let out = prroi_fwd(&feat, &boxes, &[0], (3, 3)).unwrap();
        for &v in out.data() {
            assert!((v - 2.5).abs() < 1e-12);
        }
        let gout = Tensor::full(out.shape(), 1.0);
        let (_, dbox) = prroi_bwd(&feat, &boxes, &[0], (3, 3), &out, &gout).unwrap();
        for &g in dbox.data() {
            assert!(g.abs() < 1e-9, "coordinate gradient {g} not ~0 on constant field");
        }
    }

    #[test]
    fn linear_ramp_gives_bin_centers() {
        // f(x, y) = x over the lattice; the exact average over a bin is the
        // bin's center abscissa while the box stays inside the lattice hull.
        let w = 16usize;
        let mut feat = Tensor::zeros(&[1, 1, 12, w]);
        for i in 0..12 {
            for j in 0..w {
                feat.data_mut()[i * w + j] = j as f64;
            }
        }
        let boxes = [3.25, 4.5, 6.0, 3.0];
        let out = prroi_fwd(&feat, &boxes, &[0], (1, 3)).unwrap();
        for bj in 0..3 {
            let center = 3.25 + (bj as f64 + 0.5) * 2.0;
            assert!((out.data()[bj] - center).abs() < 1e-9);
        }
    }

    #[test]
    fn unit_bin_over_locally_constant_cell() {
        let mut feat = Tensor::zeros(&[1, 1, 8, 8]);
        for i in 3..6 {
            for j in 3..6 {
                feat.data_mut()[i * 8 + j] = 7.0;
            }
        }
        // (1,1)-bin box snapped onto the cell at (4,4)
        let boxes = [3.5, 3.5, 1.0, 1.0];
        let out = prroi_fwd(&feat, &boxes, &[0], (1, 1)).unwrap();
        assert!((out.data()[0] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn finite_difference_gradients() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for case in 0..10 {
            let (h, w, c) = (10, 11, 2);
            let mut feat = Tensor::zeros(&[1, c, h, w]);
            for v in feat.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let bx = rng.random_range(0.7..4.0) + 0.137;
            let by = rng.random_range(0.7..4.0) + 0.271;
            let bw = rng.random_range(1.5..5.0);
            let bh = rng.random_range(1.5..5.0);
            let boxes = [bx, by, bw, bh];
            let bins = (3, 3);
            let out = prroi_fwd(&feat, &boxes, &[0], bins).unwrap();
            let mut gout = Tensor::zeros(out.shape());
            for v in gout.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let (dfeat, dbox) = prroi_bwd(&feat, &boxes, &[0], bins, &out, &gout).unwrap();
            let scalar = |f: &Tensor, b: &[f64]| -> f64 {
                let o = prroi_fwd(f, b, &[0], bins).unwrap();
                o.data().iter().zip(gout.data()).map(|(a, g)| a * g).sum()
            };
            let eps = 1e-6;
            for k in 0..4 {
                let mut bp = boxes;
                let mut bm = boxes;
                bp[k] += eps;
                bm[k] -= eps;
                let fd = (scalar(&feat, &bp) - scalar(&feat, &bm)) / (2.0 * eps);
                assert!(
                    rel_err(dbox.data()[k], fd) < 1e-4,
                    "case {case} coord {k}: analytic {} vs fd {fd}",
                    dbox.data()[k]
                );
            }
            for idx in [0usize, 37, 93, c * h * w - 1] {
                let mut fp = feat.clone();
                let mut fm = feat.clone();
                fp.data_mut()[idx] += eps;
                fm.data_mut()[idx] -= eps;
                let fd = (scalar(&fp, &boxes) - scalar(&fm, &boxes)) / (2.0 * eps);
                assert!(
                    rel_err(dfeat.data()[idx], fd) < 1e-4,
                    "case {case} feat {idx}: analytic {} vs fd {fd}",
                    dfeat.data()[idx]
                );
            }
        }
    }

    #[test]
    fn bilinear_sample_basics() {
        let mut feat = Tensor::zeros(&[1, 2, 2]);
        feat.data_mut().copy_from_slice(&[0.0, 0.0, 1.0, 1.0]);
        // lattice point
        assert_eq!(bilinear_sample(&feat, 1.0, 1.0).unwrap()[0], 1.0);
        // midpoint of a vertically split square
        assert!((bilinear_sample(&feat, 0.5, 0.5).unwrap()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bilinear_sample_fd_gradient() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut feat = Tensor::zeros(&[1, 6, 6]);
        for v in feat.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        for _ in 0..20 {
            let x = rng.random_range(0.6..4.4) + 0.0137;
            let y = rng.random_range(0.6..4.4) + 0.0213;
            let (gx, gy) = bilinear_sample_grad_xy(&feat, x, y).unwrap()[0];
            let eps = 1e-6;
            let fx = (bilinear_sample(&feat, x + eps, y).unwrap()[0]
                - bilinear_sample(&feat, x - eps, y).unwrap()[0])
                / (2.0 * eps);
            let fy = (bilinear_sample(&feat, x, y + eps).unwrap()[0]
                - bilinear_sample(&feat, x, y - eps).unwrap()[0])
                / (2.0 * eps);
            assert!((gx - fx).abs() < 1e-6, "gx {gx} vs {fx}");
            assert!((gy - fy).abs() < 1e-6, "gy {gy} vs {fy}");
        }
    }
}
