//! Functional forward/backward kernels behind the graph ops: im2col/col2im
//! convolution and transposed convolution, fully-connected, batch
//! normalization and average pooling.

use super::tensor::Tensor;
use crate::{Error, Result};

/// Row-major GEMM: c = alpha * op(a) * op(b) + beta * c where op(a) is m x k.
/// If `ta`, `a` is stored k x m (transposed access), likewise `tb` for `b`.
pub fn gemm(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k, "gemm a too short");
    assert!(b.len() >= k * n, "gemm b too short");
    assert!(c.len() >= m * n, "gemm c too short");
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub dilation: (usize, usize),
}

#[derive(Debug, Clone, Copy)]
pub struct DeconvSpec {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub out_pad: (usize, usize),
    pub dilation: (usize, usize),
}

pub fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize, dil: usize) -> Result<usize> {
    let eff = dil * (k - 1) + 1;
    let padded = input + 2 * pad;
    if padded < eff {
        return Err(Error::shape(
            "conv2d",
            format!("input {input} (pad {pad}) smaller than effective kernel {eff}"),
        ));
    }
    Ok((padded - eff) / stride + 1)
}

/// Unfold one image (c, h, w) into columns (c*kh*kw, oh*ow), zero-padding
/// out-of-bounds reads.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.pad;
    let (dh, dw) = spec.dilation;
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    let mut row = 0usize;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let base = row * oh * ow;
                row += 1;
                for oi in 0..oh {
                    let ii = (oi * sh + ki * dh) as isize - ph as isize;
                    let out_row = &mut cols[base + oi * ow..base + (oi + 1) * ow];
                    if ii < 0 || ii >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * w..(ii as usize + 1) * w];
                    for (oj, slot) in out_row.iter_mut().enumerate() {
                        let jj = (oj * sw + kj * dw) as isize - pw as isize;
                        *slot = if jj < 0 || jj >= w as isize { 0.0 } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatter-add columns back into the (c, h, w) image.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    x: &mut [f64],
) {
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.pad;
    let (dh, dw) = spec.dilation;
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    let mut row = 0usize;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let base = row * oh * ow;
                row += 1;
                for oi in 0..oh {
                    let ii = (oi * sh + ki * dh) as isize - ph as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * w..(ii as usize + 1) * w];
                    let src = &cols[base + oi * ow..base + (oi + 1) * ow];
                    for (oj, &v) in src.iter().enumerate() {
                        let jj = (oj * sw + kj * dw) as isize - pw as isize;
                        if jj >= 0 && jj < w as isize {
                            dst[jj as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn conv_dims(
    x: &Tensor,
    w: &Tensor,
    spec: &ConvSpec,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, wd) = x.dims4("conv2d input")?;
    let (o, wc, kh, kw) = w.dims4("conv2d weight")?;
    if wc != c {
        return Err(Error::shape(
            "conv2d",
            format!("input channels {c} != weight channels {wc}"),
        ));
    }
    let oh = conv_out_size(h, kh, spec.stride.0, spec.pad.0, spec.dilation.0)?;
    let ow = conv_out_size(wd, kw, spec.stride.1, spec.pad.1, spec.dilation.1)?;
    Ok((n, c, h, wd, o, kh, kw, oh, ow))
}

pub fn conv2d_fwd(x: &Tensor, w: &Tensor, b: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let (n, c, h, wd, o, kh, kw, oh, ow) = conv_dims(x, w, spec)?;
    if b.shape() != [o] {
        return Err(Error::shape("conv2d", format!("bias {:?} != [{o}]", b.shape())));
    }
    let ckk = c * kh * kw;
    let mut cols = vec![0.0; ckk * oh * ow];
    let mut y = Tensor::zeros(&[n, o, oh, ow]);
    for ni in 0..n {
        im2col(&x.data()[ni * c * h * wd..], c, h, wd, kh, kw, spec, oh, ow, &mut cols);
        let out = &mut y.data_mut()[ni * o * oh * ow..(ni + 1) * o * oh * ow];
        gemm(false, false, o, ckk, oh * ow, 1.0, w.data(), &cols, 0.0, out);
        for oi in 0..o {
            let bias = b.data()[oi];
            for v in &mut out[oi * oh * ow..(oi + 1) * oh * ow] {
                *v += bias;
            }
        }
    }
    Ok(y)
}

pub fn conv2d_bwd(
    x: &Tensor,
    w: &Tensor,
    spec: &ConvSpec,
    gout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, wd, o, kh, kw, oh, ow) = conv_dims(x, w, spec)?;
    let ckk = c * kh * kw;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[o]);
    let mut cols = vec![0.0; ckk * oh * ow];
    let mut dcols = vec![0.0; ckk * oh * ow];
    for ni in 0..n {
        let g = &gout.data()[ni * o * oh * ow..(ni + 1) * o * oh * ow];
        im2col(&x.data()[ni * c * h * wd..], c, h, wd, kh, kw, spec, oh, ow, &mut cols);
        gemm(false, true, o, oh * ow, ckk, 1.0, g, &cols, 1.0, dw.data_mut());
        gemm(true, false, ckk, o, oh * ow, 1.0, w.data(), g, 0.0, &mut dcols);
        col2im(&dcols, c, h, wd, kh, kw, spec, oh, ow, &mut dx.data_mut()[ni * c * h * wd..]);
        for oi in 0..o {
            db.data_mut()[oi] += g[oi * oh * ow..(oi + 1) * oh * ow].iter().sum::<f64>();
        }
    }
    Ok((dx, dw, db))
}

fn deconv_dims(
    x: &Tensor,
    w: &Tensor,
    spec: &DeconvSpec,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (n, cin, h, wd) = x.dims4("deconv2d input")?;
    let (wcin, cout, kh, kw) = w.dims4("deconv2d weight")?;
    if wcin != cin {
        return Err(Error::shape(
            "deconv2d",
            format!("input channels {cin} != weight channels {wcin}"),
        ));
    }
    if spec.out_pad.0 >= spec.stride.0 || spec.out_pad.1 >= spec.stride.1 {
        return Err(Error::shape("deconv2d", "output padding must be smaller than stride"));
    }
    let oh = (h - 1) * spec.stride.0 + spec.dilation.0 * (kh - 1) + 1 + spec.out_pad.0;
    let ow = (wd - 1) * spec.stride.1 + spec.dilation.1 * (kw - 1) + 1 + spec.out_pad.1;
    let oh = oh.checked_sub(2 * spec.pad.0).ok_or_else(|| {
        Error::shape("deconv2d", format!("padding {} too large for output", spec.pad.0))
    })?;
    let ow = ow.checked_sub(2 * spec.pad.1).ok_or_else(|| {
        Error::shape("deconv2d", format!("padding {} too large for output", spec.pad.1))
    })?;
    Ok((n, cin, h, wd, cout, kh, kw, oh, ow))
}

fn deconv_conv_spec(spec: &DeconvSpec) -> ConvSpec {
    ConvSpec { stride: spec.stride, pad: spec.pad, dilation: spec.dilation }
}

pub fn deconv2d_fwd(x: &Tensor, w: &Tensor, b: &Tensor, spec: &DeconvSpec) -> Result<Tensor> {
    let (n, cin, h, wd, cout, kh, kw, oh, ow) = deconv_dims(x, w, spec)?;
    if b.shape() != [cout] {
        return Err(Error::shape("deconv2d", format!("bias {:?} != [{cout}]", b.shape())));
    }
    let cspec = deconv_conv_spec(spec);
    // The forward pass is the adjoint of a convolution mapping (oh, ow) back
    // to (h, w); sanity-check that arithmetic before scattering.
    let back_h = conv_out_size(oh, kh, spec.stride.0, spec.pad.0, spec.dilation.0)?;
    let back_w = conv_out_size(ow, kw, spec.stride.1, spec.pad.1, spec.dilation.1)?;
    if back_h != h || back_w != wd {
        return Err(Error::shape(
            "deconv2d",
            format!("inconsistent geometry: ({h},{wd}) vs conv image ({back_h},{back_w})"),
        ));
    }
    let ckk = cout * kh * kw;
    let hw = h * wd;
    let mut tmp = vec![0.0; ckk * hw];
    let mut y = Tensor::zeros(&[n, cout, oh, ow]);
    for ni in 0..n {
        let xs = &x.data()[ni * cin * hw..(ni + 1) * cin * hw];
        gemm(true, false, ckk, cin, hw, 1.0, w.data(), xs, 0.0, &mut tmp);
        let out = &mut y.data_mut()[ni * cout * oh * ow..(ni + 1) * cout * oh * ow];
        col2im(&tmp, cout, oh, ow, kh, kw, &cspec, h, wd, out);
        for co in 0..cout {
            let bias = b.data()[co];
            for v in &mut out[co * oh * ow..(co + 1) * oh * ow] {
                *v += bias;
            }
        }
    }
    Ok(y)
}

pub fn deconv2d_bwd(
    x: &Tensor,
    w: &Tensor,
    spec: &DeconvSpec,
    gout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, cin, h, wd, cout, kh, kw, oh, ow) = deconv_dims(x, w, spec)?;
    let cspec = deconv_conv_spec(spec);
    let ckk = cout * kh * kw;
    let hw = h * wd;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[cout]);
    let mut gcols = vec![0.0; ckk * hw];
    for ni in 0..n {
        let g = &gout.data()[ni * cout * oh * ow..(ni + 1) * cout * oh * ow];
        im2col(g, cout, oh, ow, kh, kw, &cspec, h, wd, &mut gcols);
        let dxs = &mut dx.data_mut()[ni * cin * hw..(ni + 1) * cin * hw];
        gemm(false, false, cin, ckk, hw, 1.0, w.data(), &gcols, 0.0, dxs);
        let xs = &x.data()[ni * cin * hw..(ni + 1) * cin * hw];
        gemm(false, true, cin, hw, ckk, 1.0, xs, &gcols, 1.0, dw.data_mut());
        for co in 0..cout {
            db.data_mut()[co] += g[co * oh * ow..(co + 1) * oh * ow].iter().sum::<f64>();
        }
    }
    Ok((dx, dw, db))
}

pub fn linear_fwd(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, f) = x.dims2("linear input")?;
    let (o, wf) = w.dims2("linear weight")?;
    if wf != f {
        return Err(Error::shape("linear", format!("input features {f} != weight features {wf}")));
    }
    if b.shape() != [o] {
        return Err(Error::shape("linear", format!("bias {:?} != [{o}]", b.shape())));
    }
    let mut y = Tensor::zeros(&[n, o]);
    gemm(false, true, n, f, o, 1.0, x.data(), w.data(), 0.0, y.data_mut());
    for ni in 0..n {
        for oi in 0..o {
            y.data_mut()[ni * o + oi] += b.data()[oi];
        }
    }
    Ok(y)
}

pub fn linear_bwd(x: &Tensor, w: &Tensor, gout: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, f) = x.dims2("linear input")?;
    let (o, _) = w.dims2("linear weight")?;
    let mut dx = Tensor::zeros(&[n, f]);
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[o]);
    gemm(false, false, n, o, f, 1.0, gout.data(), w.data(), 0.0, dx.data_mut());
    gemm(true, false, o, n, f, 1.0, gout.data(), x.data(), 0.0, dw.data_mut());
    for ni in 0..n {
        for oi in 0..o {
            db.data_mut()[oi] += gout.data()[ni * o + oi];
        }
    }
    Ok((dx, dw, db))
}

/// Normalization layout: rank-4 tensors normalize per channel over
/// (batch, height, width); rank-2 per feature over the batch.
fn bn_layout(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [n, c, h, w] => Ok((*n, *c, h * w)),
        [n, f] => Ok((*n, *f, 1)),
        s => Err(Error::shape("batch_norm", format!("unsupported rank {:?}", s))),
    }
}

pub struct BnSaved {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var_unbiased: Vec<f64>,
    pub train: bool,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub fn bn_fwd(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    train: bool,
) -> Result<(Tensor, BnSaved)> {
    let (n, c, inner) = bn_layout(x)?;
    for (name, t) in [("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)] {
        if t.shape() != [c] {
            return Err(Error::shape("batch_norm", format!("{name} {:?} != [{c}]", t.shape())));
        }
    }
    let m = n * inner;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    if train {
        if m == 0 {
            return Err(Error::shape("batch_norm", "empty batch"));
        }
        for ci in 0..c {
            let mut sum = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * inner;
                sum += x.data()[base..base + inner].iter().sum::<f64>();
            }
            let mu = sum / m as f64;
            let mut sq = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * inner;
                for &v in &x.data()[base..base + inner] {
                    sq += (v - mu) * (v - mu);
                }
            }
            mean[ci] = mu;
            var[ci] = sq / m as f64;
        }
    } else {
        mean.copy_from_slice(running_mean.data());
        var.copy_from_slice(running_var.data());
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * inner;
            let (mu, is) = (mean[ci], inv_std[ci]);
            let (g, b) = (gamma.data()[ci], beta.data()[ci]);
            for k in 0..inner {
                let xh = (x.data()[base + k] - mu) * is;
                xhat.data_mut()[base + k] = xh;
                y.data_mut()[base + k] = g * xh + b;
            }
        }
    }
    let var_unbiased = if m > 1 {
        var.iter().map(|&v| v * m as f64 / (m as f64 - 1.0)).collect()
    } else {
        var.clone()
    };
    Ok((y, BnSaved { xhat, inv_std, batch_mean: mean, batch_var_unbiased: var_unbiased, train }))
}

pub fn bn_bwd(saved: &BnSaved, gamma: &Tensor, gout: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, inner) = bn_layout(&saved.xhat)?;
    let m = (n * inner) as f64;
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let mut dx = Tensor::zeros(saved.xhat.shape());
    for ci in 0..c {
        let mut gsum = 0.0;
        let mut gxsum = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * inner;
            for k in 0..inner {
                let g = gout.data()[base + k];
                gsum += g;
                gxsum += g * saved.xhat.data()[base + k];
            }
        }
        dbeta.data_mut()[ci] = gsum;
        dgamma.data_mut()[ci] = gxsum;
        let gm = gamma.data()[ci];
        let is = saved.inv_std[ci];
        for ni in 0..n {
            let base = (ni * c + ci) * inner;
            for k in 0..inner {
                let g = gout.data()[base + k];
                dx.data_mut()[base + k] = if saved.train {
                    gm * is * (g - gsum / m - saved.xhat.data()[base + k] * gxsum / m)
                } else {
                    gm * is * g
                };
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

pub fn avg_pool2d_fwd(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("avg_pool2d input")?;
    let oh = conv_out_size(h, k, stride, pad, 1)?;
    let ow = conv_out_size(w, k, stride, pad, 1)?;
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let norm = 1.0 / (k * k) as f64;
    for ni in 0..n {
        for ci in 0..c {
            let plane = &x.data()[(ni * c + ci) * h * w..];
            let out = &mut y.data_mut()[(ni * c + ci) * oh * ow..(ni * c + ci + 1) * oh * ow];
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut sum = 0.0;
                    for ki in 0..k {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj >= 0 && jj < w as isize {
                                sum += plane[ii as usize * w + jj as usize];
                            }
                        }
                    }
                    out[oi * ow + oj] = sum * norm;
                }
            }
        }
    }
    Ok(y)
}

pub fn avg_pool2d_bwd(
    xshape: &[usize],
    k: usize,
    stride: usize,
    pad: usize,
    gout: &Tensor,
) -> Result<Tensor> {
    let mut dx = Tensor::zeros(xshape);
    let (n, c, h, w) = dx.dims4("avg_pool2d input")?;
    let (_, _, oh, ow) = gout.dims4("avg_pool2d grad")?;
    let norm = 1.0 / (k * k) as f64;
    for ni in 0..n {
        for ci in 0..c {
            let g = &gout.data()[(ni * c + ci) * oh * ow..];
            let plane = &mut dx.data_mut()[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            for oi in 0..oh {
                for oj in 0..ow {
                    let gv = g[oi * ow + oj] * norm;
                    for ki in 0..k {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj >= 0 && jj < w as isize {
                                plane[ii as usize * w + jj as usize] += gv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::from_vec(&[1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let spec = ConvSpec { stride: (1, 1), pad: (0, 0), dilation: (1, 1) };
        let y = conv2d_fwd(&x, &w, &b, &spec).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_known_sum() {
        // 2x2 all-ones kernel over a 3x3 ramp: top-left window sums 0+1+3+4.
        let x = Tensor::from_vec(&[1, 1, 3, 3], (0..9).map(|i| i as f64).collect()).unwrap();
        let w = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let b = Tensor::zeros(&[1]);
        let spec = ConvSpec { stride: (1, 1), pad: (0, 0), dilation: (1, 1) };
        let y = conv2d_fwd(&x, &w, &b, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[8.0, 12.0, 20.0, 24.0]);
    }

    #[test]
    fn deconv_shape_matches_formula() {
        // 9 -> 18 with the 3x3/stride-2/pad-1/out-pad-1 geometry.
        let x = Tensor::zeros(&[1, 2, 9, 9]);
        let w = Tensor::zeros(&[2, 3, 3, 3]);
        let b = Tensor::zeros(&[3]);
        let spec = DeconvSpec { stride: (2, 2), pad: (1, 1), out_pad: (1, 1), dilation: (1, 1) };
        let y = deconv2d_fwd(&x, &w, &b, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 3, 18, 18]);
    }

    #[test]
    fn linear_known_values() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![10.0, 0.0]).unwrap();
        let y = linear_fwd(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[11.0, 6.0, 14.0, 15.0]);
    }

    #[test]
    fn bn_train_normalizes() {
        let x = Tensor::from_vec(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let gamma = Tensor::full(&[1], 1.0);
        let beta = Tensor::zeros(&[1]);
        let rm = Tensor::zeros(&[1]);
        let rv = Tensor::full(&[1], 1.0);
        let (y, saved) = bn_fwd(&x, &gamma, &beta, &rm, &rv, true).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((saved.batch_mean[0] - 2.5).abs() < 1e-12);
        // unbiased variance of {1,2,3,4} is 5/3
        assert!((saved.batch_var_unbiased[0] - 5.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn gap_like_pool_constant() {
        let x = Tensor::full(&[1, 2, 4, 4], 3.25);
        let y = avg_pool2d_fwd(&x, 3, 1, 1).unwrap();
        // interior cells average nine copies of the constant
        assert!((y.data()[5] - 3.25).abs() < 1e-12);
    }
}
