//! Differentiable operations. Every op validates shapes and finiteness up
//! front and returns `Err` on misuse; backward closures are recorded on the
//! tape only when some input requires gradients.

use super::matmul::{matmul_abt_acc, matmul_acc, matmul_atb_acc};
use super::{Tape, Tensor};
use crate::error::{CoreError, Result};

fn check_finite(t: &Tensor, ctx: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(CoreError::NonFinite(ctx.to_string()))
    }
}

fn shape4(t: &Tensor, ctx: &str) -> Result<[usize; 4]> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(CoreError::Shape(format!("{ctx}: expected 4-d tensor, got {s:?}")));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// Elementwise sum of two same-shape tensors.
pub fn add(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(CoreError::Shape(format!(
            "add: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    check_finite(a, "add lhs")?;
    check_finite(b, "add rhs")?;
    let out_data: Vec<f64> = {
        let ad = a.data_ref();
        let bd = b.data_ref();
        ad.iter().zip(bd.iter()).map(|(x, y)| x + y).collect()
    };
    let rg = a.requires_grad() || b.requires_grad();
    let out = Tensor::new(&a.shape(), out_data, rg)?;
    if rg {
        let (ai, bi, oi) = (a.clone(), b.clone(), out.clone());
        tape.record(Box::new(move || {
            let Some(g) = oi.grad() else { return };
            if ai.requires_grad() {
                ai.accumulate_grad(&g);
            }
            if bi.requires_grad() {
                bi.accumulate_grad(&g);
            }
        }));
    }
    Ok(out)
}

/// Multiply by a compile-time-constant scalar.
pub fn scale(tape: &mut Tape, x: &Tensor, c: f64) -> Result<Tensor> {
    if !c.is_finite() {
        return Err(CoreError::NonFinite("scale factor".into()));
    }
    check_finite(x, "scale input")?;
    let out_data: Vec<f64> = x.data_ref().iter().map(|v| v * c).collect();
    let out = Tensor::new(&x.shape(), out_data, x.requires_grad())?;
    if x.requires_grad() {
        let (xi, oi) = (x.clone(), out.clone());
        tape.record(Box::new(move || {
            let Some(g) = oi.grad() else { return };
            let delta: Vec<f64> = g.iter().map(|v| v * c).collect();
            xi.accumulate_grad(&delta);
        }));
    }
    Ok(out)
}

/// Rectified linear unit (gradient at exactly zero is zero).
pub fn relu(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    check_finite(x, "relu input")?;
    let out_data: Vec<f64> = x.data_ref().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    let out = Tensor::new(&x.shape(), out_data, x.requires_grad())?;
    if x.requires_grad() {
        let (xi, oi) = (x.clone(), out.clone());
        tape.record(Box::new(move || {
            let Some(g) = oi.grad() else { return };
            let delta: Vec<f64> = {
                let xd = xi.data_ref();
                g.iter().zip(xd.iter()).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }).collect()
            };
            xi.accumulate_grad(&delta);
        }));
    }
    Ok(out)
}

/// Copying reshape to a same-numel shape.
pub fn reshape(tape: &mut Tape, x: &Tensor, new_shape: &[usize]) -> Result<Tensor> {
    let numel: usize = new_shape.iter().product();
    if numel != x.numel() {
        return Err(CoreError::Shape(format!(
            "reshape: numel mismatch {:?} -> {:?}",
            x.shape(),
            new_shape
        )));
    }
    check_finite(x, "reshape input")?;
    let out = Tensor::new(new_shape, x.data(), x.requires_grad())?;
    if x.requires_grad() {
        let (xi, oi) = (x.clone(), out.clone());
        tape.record(Box::new(move || {
            let Some(g) = oi.grad() else { return };
            xi.accumulate_grad(&g);
        }));
    }
    Ok(out)
}

fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [f64],
) {
    debug_assert_eq!(col.len(), c * kh * kw * oh * ow);
    let l = oh * ow;
    for cc in 0..c {
        let xoff = cc * h * w;
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((cc * kh + ky) * kw + kx) * l;
                for oy in 0..oh {
                    let yy = (oy * stride + ky) as isize - pad as isize;
                    let dst = row + oy * ow;
                    if yy < 0 || yy >= h as isize {
                        col[dst..dst + ow].fill(0.0);
                        continue;
                    }
                    let src = xoff + yy as usize * w;
                    for ox in 0..ow {
                        let xx = (ox * stride + kx) as isize - pad as isize;
                        col[dst + ox] = if xx < 0 || xx >= w as isize {
                            0.0
                        } else {
                            x[src + xx as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_acc(
    dcol: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
) {
    let l = oh * ow;
    for cc in 0..c {
        let xoff = cc * h * w;
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((cc * kh + ky) * kw + kx) * l;
                for oy in 0..oh {
                    let yy = (oy * stride + ky) as isize - pad as isize;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    let dst = xoff + yy as usize * w;
                    for ox in 0..ow {
                        let xx = (ox * stride + kx) as isize - pad as isize;
                        if xx >= 0 && xx < w as isize {
                            dx[dst + xx as usize] += dcol[row + oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-d convolution, NCHW input, OIHW kernel, per-output-channel bias.
pub fn conv2d(
    tape: &mut Tape,
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let [n, c, h, w] = shape4(input, "conv2d input")?;
    let [o, kc, kh, kw] = shape4(kernel, "conv2d kernel")?;
    if kc != c {
        return Err(CoreError::Shape(format!(
            "conv2d: kernel expects {kc} input channels, input has {c}"
        )));
    }
    if bias.shape() != vec![o] {
        return Err(CoreError::Shape(format!(
            "conv2d: bias shape {:?} != [{o}]",
            bias.shape()
        )));
    }
    if stride == 0 {
        return Err(CoreError::Shape("conv2d: stride must be >= 1".into()));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(CoreError::Shape(format!(
            "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    check_finite(input, "conv2d input")?;
    check_finite(kernel, "conv2d kernel")?;
    check_finite(bias, "conv2d bias")?;

    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let l = oh * ow;
    let ckk = c * kh * kw;
    let pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;

    let mut out_data = vec![0.0; n * o * l];
    let mut cols: Vec<f64> = Vec::new();
    {
        let xd = input.data_ref();
        let kd = kernel.data_ref();
        let bd = bias.data_ref();
        if !pointwise {
            cols = vec![0.0; n * ckk * l];
        }
        for ni in 0..n {
            let xslice = &xd[ni * c * h * w..(ni + 1) * c * h * w];
            let oslice = &mut out_data[ni * o * l..(ni + 1) * o * l];
            if pointwise {
                matmul_acc(&kd, xslice, oslice, o, c, l);
            } else {
                let colslice = &mut cols[ni * ckk * l..(ni + 1) * ckk * l];
                im2col(xslice, c, h, w, kh, kw, stride, pad, oh, ow, colslice);
                matmul_acc(&kd, colslice, oslice, o, ckk, l);
            }
            for oc in 0..o {
                let bv = bd[oc];
                for v in &mut oslice[oc * l..(oc + 1) * l] {
                    *v += bv;
                }
            }
        }
    }
    let rg = input.requires_grad() || kernel.requires_grad() || bias.requires_grad();
    let out = Tensor::new(&[n, o, oh, ow], out_data, rg)?;
    if rg {
        let (xi, ki, bi, oi) = (input.clone(), kernel.clone(), bias.clone(), out.clone());
        tape.record(Box::new(move || {
            let Some(g) = oi.grad() else { return };
            if bi.requires_grad() {
                bi.with_grad_mut(|gb| {
                    for ni in 0..n {
                        for oc in 0..o {
                            let off = (ni * o + oc) * l;
                            gb[oc] += g[off..off + l].iter().sum::<f64>();
                        }
                    }
                });
            }
            if ki.requires_grad() {
                let xd = xi.data_ref();
                ki.with_grad_mut(|gk| {
                    for ni in 0..n {
                        let dout = &g[ni * o * l..(ni + 1) * o * l];
                        if pointwise {
                            let xslice = &xd[ni * c * l..(ni + 1) * c * l];
                            matmul_abt_acc(dout, xslice, gk, o, l, c);
                        } else {
                            let colslice = &cols[ni * ckk * l..(ni + 1) * ckk * l];
                            matmul_abt_acc(dout, colslice, gk, o, l, ckk);
                        }
                    }
                });
            }
            if xi.requires_grad() {
                let kd = ki.data_ref().to_vec();
                xi.with_grad_mut(|gx| {
                    for ni in 0..n {
                        let dout = &g[ni * o * l..(ni + 1) * o * l];
                        if pointwise {
                            let gxs = &mut gx[ni * c * l..(ni + 1) * c * l];
                            matmul_atb_acc(&kd, dout, gxs, o, c, l);
                        } else {
                            let mut dcol = vec![0.0; ckk * l];
                            matmul_atb_acc(&kd, dout, &mut dcol, o, ckk, l);
                            let gxs = &mut gx[ni * c * h * w..(ni + 1) * c * h * w];
                            col2im_acc(&dcol, c, h, w, kh, kw, stride, pad, oh, ow, gxs);
                        }
                    }
                });
            }
        }));
    }
    Ok(out)
}

/// Group normalization over NCHW with per-channel affine parameters.
pub fn group_norm(
    tape: &mut Tape,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    groups: usize,
    eps: f64,
) -> Result<Tensor> {
    let [n, c, h, w] = shape4(x, "group_norm input")?;
    if groups == 0 || c % groups != 0 {
        return Err(CoreError::Shape(format!(
            "group_norm: {groups} groups do not divide {c} channels"
        )));
    }
    if gamma.shape() != vec![c] || beta.shape() != vec![c] {
        return Err(CoreError::Shape(format!(
            "group_norm: affine shapes {:?}/{:?} != [{c}]",
            gamma.shape(),
            beta.shape()
        )));
    }
    if !(eps.is_finite() && eps > 0.0) {
        return Err(CoreError::Config("group_norm: eps must be positive".into()));
    }
    check_finite(x, "group_norm input")?;
    check_finite(gamma, "group_norm gamma")?;
    check_finite(beta, "group_norm beta")?;

    let cpg = c / groups;
    let m = cpg * h * w;
    let hw = h * w;
    let mut out_data = vec![0.0; n * c * hw];
    let mut means = vec![0.0; n * groups];
    let mut invstds = vec![0.0; n * groups];
    {
        let xd = x.data_ref();
        let gd = gamma.data_ref();
        let bd = beta.data_ref();
        for ni in 0..n {
            for gi in 0..groups {
                let start = (ni * c + gi * cpg) * hw;
                let xs = &xd[start..start + m];
                let mean = xs.iter().sum::<f64>() / m as f64;
                let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                let invstd = 1.0 / (var + eps).sqrt();
                means[ni * groups + gi] = mean;
                invstds[ni * groups + gi] = invstd;
                for ci in 0..cpg {
                    let ch = gi * cpg + ci;
                    let (gm, bt) = (gd[ch], bd[ch]);
                    let xo = start + ci * hw;
                    for k in 0..hw {
                        out_data[xo + k] = gm * (xs[ci * hw + k] - mean) * invstd + bt;
                    }
                }
            }
        }
    }
    let rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    let out = Tensor::new(&[n, c, h, w], out_data, rg)?;
    if rg {
        let (xi, gi_t, bi, oi) = (x.clone(), gamma.clone(), beta.clone(), out.clone());
        tape.record(Box::new(move || {
            let Some(g) = oi.grad() else { return };
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut dx = vec![0.0; n * c * hw];
            {
                let xd = xi.data_ref();
                let gd = gi_t.data_ref();
                for ni in 0..n {
                    for gidx in 0..groups {
                        let start = (ni * c + gidx * cpg) * hw;
                        let mean = means[ni * groups + gidx];
                        let invstd = invstds[ni * groups + gidx];
                        // First pass: per-channel sums plus group sums of
                        // d_xhat and d_xhat * xhat.
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for ci in 0..cpg {
                            let ch = gidx * cpg + ci;
                            let off = start + ci * hw;
                            let gm = gd[ch];
                            for k in 0..hw {
                                let xhat = (xd[off + k] - mean) * invstd;
                                let dy = g[off + k];
                                dgamma[ch] += dy * xhat;
                                dbeta[ch] += dy;
                                let dxhat = dy * gm;
                                s1 += dxhat;
                                s2 += dxhat * xhat;
                            }
                        }
                        let mf = m as f64;
                        for ci in 0..cpg {
                            let ch = gidx * cpg + ci;
                            let off = start + ci * hw;
                            let gm = gd[ch];
                            for k in 0..hw {
                                let xhat = (xd[off + k] - mean) * invstd;
                                let dxhat = g[off + k] * gm;
                                dx[off + k] = invstd * (dxhat - (s1 + xhat * s2) / mf);
                            }
                        }
                    }
                }
            }
            if xi.requires_grad() {
                xi.accumulate_grad(&dx);
            }
            if gi_t.requires_grad() {
                gi_t.accumulate_grad(&dgamma);
            }
            if bi.requires_grad() {
                bi.accumulate_grad(&dbeta);
            }
        }));
    }
    Ok(out)
}

use crate::imagebuf::bilinear_taps;

/// Bilinear resize of an NCHW tensor to `oh x ow`.
pub fn bilinear_resize(tape: &mut Tape, x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let [n, c, h, w] = shape4(x, "bilinear_resize input")?;
    if oh == 0 || ow == 0 {
        return Err(CoreError::Shape("bilinear_resize: zero output size".into()));
    }
    check_finite(x, "bilinear_resize input")?;
    let ytaps = bilinear_taps(h, oh);
    let xtaps = bilinear_taps(w, ow);
    let mut out_data = vec![0.0; n * c * oh * ow];
    {
        let xd = x.data_ref();
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out_data[plane * oh * ow..(plane + 1) * oh * ow];
            for (oy, &(y0, y1, fy)) in ytaps.iter().enumerate() {
                let r0 = &src[y0 * w..y0 * w + w];
                let r1 = &src[y1 * w..y1 * w + w];
                let drow = &mut dst[oy * ow..(oy + 1) * ow];
                for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                    let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
                    let bot = r1[x0] * (1.0 - fx) + r1[x1] * fx;
                    drow[ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    let out = Tensor::new(&[n, c, oh, ow], out_data, x.requires_grad())?;
    if x.requires_grad() {
        let (xi, oi) = (x.clone(), out.clone());
        let (ytaps, xtaps) = (ytaps, xtaps);
        tape.record(Box::new(move || {
            let Some(g) = oi.grad() else { return };
            xi.with_grad_mut(|gx| {
                for plane in 0..n * c {
                    let gdst = &g[plane * oh * ow..(plane + 1) * oh * ow];
                    let gsrc = &mut gx[plane * h * w..(plane + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ytaps.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                            let gv = gdst[oy * ow + ox];
                            gsrc[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            gsrc[y0 * w + x1] += gv * (1.0 - fy) * fx;
                            gsrc[y1 * w + x0] += gv * fy * (1.0 - fx);
                            gsrc[y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
            });
        }));
    }
    Ok(out)
}

/// Pull per-cell feature vectors: out[m, :] = x[n_m, :, y_m, x_m].
pub fn gather_cells(tape: &mut Tape, x: &Tensor, picks: &[(usize, usize, usize)]) -> Result<Tensor> {
    let [n, c, h, w] = shape4(x, "gather_cells input")?;
    for &(ni, yi, xi) in picks {
        if ni >= n || yi >= h || xi >= w {
            return Err(CoreError::Shape(format!(
                "gather_cells: pick ({ni},{yi},{xi}) outside [{n},{h},{w}]"
            )));
        }
    }
    check_finite(x, "gather_cells input")?;
    let m = picks.len();
    let mut out_data = vec![0.0; m * c];
    {
        let xd = x.data_ref();
        for (mi, &(ni, yi, xxi)) in picks.iter().enumerate() {
            for ci in 0..c {
                out_data[mi * c + ci] = xd[((ni * c + ci) * h + yi) * w + xxi];
            }
        }
    }
    let out = Tensor::new(&[m, c], out_data, x.requires_grad())?;
    if x.requires_grad() {
        let (xi_t, oi) = (x.clone(), out.clone());
        let picks = picks.to_vec();
        tape.record(Box::new(move || {
            let Some(g) = oi.grad() else { return };
            xi_t.with_grad_mut(|gx| {
                for (mi, &(ni, yi, xxi)) in picks.iter().enumerate() {
                    for ci in 0..c {
                        gx[((ni * c + ci) * h + yi) * w + xxi] += g[mi * c + ci];
                    }
                }
            });
        }));
    }
    Ok(out)
}

/// Mean of a list of scalar tensors (deterministic left-to-right sum).
pub fn mean_stack(tape: &mut Tape, items: &[Tensor]) -> Result<Tensor> {
    if items.is_empty() {
        return Err(CoreError::Shape("mean_stack: empty input".into()));
    }
    let mut total = 0.0;
    let mut rg = false;
    for t in items {
        if t.numel() != 1 {
            return Err(CoreError::Shape("mean_stack: non-scalar input".into()));
        }
        check_finite(t, "mean_stack input")?;
        total += t.value();
        rg |= t.requires_grad();
    }
    let nf = items.len() as f64;
    let out = Tensor::new(&[1], vec![total / nf], rg)?;
    if rg {
        let items = items.to_vec();
        let oi = out.clone();
        tape.record(Box::new(move || {
            let Some(g) = oi.grad() else { return };
            let share = g[0] / nf;
            for t in &items {
                if t.requires_grad() {
                    t.accumulate_grad(&[share]);
                }
            }
        }));
    }
    Ok(out)
}

/// Weighted sum against a constant vector; scalarizer used by gradient checks.
pub fn dot_const(tape: &mut Tape, x: &Tensor, weights: &[f64]) -> Result<Tensor> {
    if weights.len() != x.numel() {
        return Err(CoreError::Shape(format!(
            "dot_const: {} weights vs {} elements",
            weights.len(),
            x.numel()
        )));
    }
    check_finite(x, "dot_const input")?;
    let total: f64 = x.data_ref().iter().zip(weights).map(|(a, b)| a * b).sum();
    let out = Tensor::new(&[1], vec![total], x.requires_grad())?;
    if x.requires_grad() {
        let (xi, oi) = (x.clone(), out.clone());
        let weights = weights.to_vec();
        tape.record(Box::new(move || {
            let Some(g) = oi.grad() else { return };
            let delta: Vec<f64> = weights.iter().map(|w| w * g[0]).collect();
            xi.accumulate_grad(&delta);
        }));
    }
    Ok(out)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable binary cross-entropy with logits for one element.
fn bce_with_logits(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

/// Sigmoid focal loss (mean over all elements). Targets take values in [0, 1]
/// and never receive gradients.
pub fn focal_loss(
    tape: &mut Tape,
    logits: &Tensor,
    targets: &Tensor,
    gamma: f64,
    alpha: f64,
) -> Result<Tensor> {
    if logits.shape() != targets.shape() {
        return Err(CoreError::Shape(format!(
            "focal_loss: shape mismatch {:?} vs {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    if targets.requires_grad() {
        return Err(CoreError::Shape("focal_loss: targets must not require grad".into()));
    }
    if !(gamma.is_finite() && gamma >= 0.0 && alpha.is_finite() && (0.0..=1.0).contains(&alpha)) {
        return Err(CoreError::Config("focal_loss: bad gamma/alpha".into()));
    }
    check_finite(logits, "focal_loss logits")?;
    check_finite(targets, "focal_loss targets")?;
    let n = logits.numel();
    let total: f64 = {
        let xd = logits.data_ref();
        let td = targets.data_ref();
        xd.iter()
            .zip(td.iter())
            .map(|(&x, &t)| {
                let p = sigmoid(x);
                let pt = t * p + (1.0 - t) * (1.0 - p);
                let at = t * alpha + (1.0 - t) * (1.0 - alpha);
                at * (1.0 - pt).powf(gamma) * bce_with_logits(x, t)
            })
            .sum()
    };
    let out = Tensor::new(&[1], vec![total / n as f64], logits.requires_grad())?;
    if logits.requires_grad() {
        let (xi, ti, oi) = (logits.clone(), targets.clone(), out.clone());
        tape.record(Box::new(move || {
            let Some(g) = oi.grad() else { return };
            let delta: Vec<f64> = {
                let xd = xi.data_ref();
                let td = ti.data_ref();
                xd.iter()
                    .zip(td.iter())
                    .map(|(&x, &t)| {
                        let p = sigmoid(x);
                        let pt = t * p + (1.0 - t) * (1.0 - p);
                        let q = 1.0 - pt;
                        let at = t * alpha + (1.0 - t) * (1.0 - alpha);
                        let bce = bce_with_logits(x, t);
                        let dbce = p - t;
                        let dq = (1.0 - 2.0 * t) * p * (1.0 - p);
                        let df = if gamma == 0.0 {
                            at * dbce
                        } else {
                            at * (gamma * q.powf(gamma - 1.0) * dq * bce + q.powf(gamma) * dbce)
                        };
                        g[0] * df / n as f64
                    })
                    .collect()
            };
            xi.accumulate_grad(&delta);
        }));
    }
    Ok(out)
}

/// Smooth-L1 (Huber) loss, mean over elements; gradients flow to predictions
/// and, when tracked, to targets.
pub fn smooth_l1(tape: &mut Tape, pred: &Tensor, target: &Tensor, beta: f64) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(CoreError::Shape(format!(
            "smooth_l1: shape mismatch {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if !(beta.is_finite() && beta > 0.0) {
        return Err(CoreError::Config("smooth_l1: beta must be positive".into()));
    }
    check_finite(pred, "smooth_l1 pred")?;
    check_finite(target, "smooth_l1 target")?;
    let n = pred.numel();
    let total: f64 = {
        let pd = pred.data_ref();
        let td = target.data_ref();
        pd.iter()
            .zip(td.iter())
            .map(|(&p, &t)| {
                let d = (p - t).abs();
                if d < beta {
                    0.5 * d * d / beta
                } else {
                    d - 0.5 * beta
                }
            })
            .sum()
    };
    let rg = pred.requires_grad() || target.requires_grad();
    let out = Tensor::new(&[1], vec![total / n as f64], rg)?;
    if rg {
        let (pi, ti, oi) = (pred.clone(), target.clone(), out.clone());
        tape.record(Box::new(move || {
            let Some(g) = oi.grad() else { return };
            let delta: Vec<f64> = {
                let pd = pi.data_ref();
                let td = ti.data_ref();
                pd.iter()
                    .zip(td.iter())
                    .map(|(&p, &t)| {
                        let d = p - t;
                        let dd = if d.abs() < beta { d / beta } else { d.signum() };
                        g[0] * dd / n as f64
                    })
                    .collect()
            };
            if pi.requires_grad() {
                pi.accumulate_grad(&delta);
            }
            if ti.requires_grad() {
                let neg: Vec<f64> = delta.iter().map(|v| -v).collect();
                ti.accumulate_grad(&neg);
            }
        }));
    }
    Ok(out)
}

/// Cross-entropy over a spatial softmax per keypoint channel.
///
/// `logits` is `[M, K, H, W]`; `targets[m * K + k]` is the flat pixel index of
/// the one-hot target for that (instance, keypoint) pair, or `None` when the
/// keypoint does not supervise this step. With no present targets the result
/// is an exact constant zero with no gradient.
pub fn spatial_softmax_ce(
    tape: &mut Tape,
    logits: &Tensor,
    targets: &[Option<usize>],
) -> Result<Tensor> {
    let [m, k, h, w] = shape4(logits, "spatial_softmax_ce logits")?;
    if targets.len() != m * k {
        return Err(CoreError::Shape(format!(
            "spatial_softmax_ce: {} targets vs {} rows",
            targets.len(),
            m * k
        )));
    }
    let hw = h * w;
    for t in targets.iter().flatten() {
        if *t >= hw {
            return Err(CoreError::Shape(format!(
                "spatial_softmax_ce: target index {t} outside {h}x{w}"
            )));
        }
    }
    check_finite(logits, "spatial_softmax_ce logits")?;
    let present: Vec<(usize, usize)> = targets
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.map(|pix| (i, pix)))
        .collect();
    if present.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    let np = present.len() as f64;
    let mut lses = vec![0.0; present.len()];
    let total: f64 = {
        let xd = logits.data_ref();
        let mut acc = 0.0;
        for (slot, &(row, pix)) in present.iter().enumerate() {
            let xs = &xd[row * hw..(row + 1) * hw];
            let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + xs.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            lses[slot] = lse;
            acc += lse - xs[pix];
        }
        acc
    };
    let out = Tensor::new(&[1], vec![total / np], logits.requires_grad())?;
    if logits.requires_grad() {
        let (xi, oi) = (logits.clone(), out.clone());
        tape.record(Box::new(move || {
            let Some(g) = oi.grad() else { return };
            let mut delta = vec![0.0; m * k * hw];
            {
                let xd = xi.data_ref();
                for (slot, &(row, pix)) in present.iter().enumerate() {
                    let xs = &xd[row * hw..(row + 1) * hw];
                    let lse = lses[slot];
                    let ds = &mut delta[row * hw..(row + 1) * hw];
                    for (d, &v) in ds.iter_mut().zip(xs) {
                        *d = g[0] * (v - lse).exp() / np;
                    }
                    ds[pix] -= g[0] / np;
                }
            }
            xi.accumulate_grad(&delta);
        }));
    }
    Ok(out)
}

/// Mean binary cross-entropy with logits over a mask grid; targets in [0, 1]
/// never receive gradients.
pub fn bce_mask(tape: &mut Tape, logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    if logits.shape() != targets.shape() {
        return Err(CoreError::Shape(format!(
            "bce_mask: shape mismatch {:?} vs {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    if targets.requires_grad() {
        return Err(CoreError::Shape("bce_mask: targets must not require grad".into()));
    }
    check_finite(logits, "bce_mask logits")?;
    check_finite(targets, "bce_mask targets")?;
    let n = logits.numel();
    let total: f64 = {
        let xd = logits.data_ref();
        let td = targets.data_ref();
        xd.iter().zip(td.iter()).map(|(&x, &t)| bce_with_logits(x, t)).sum()
    };
    let out = Tensor::new(&[1], vec![total / n as f64], logits.requires_grad())?;
    if logits.requires_grad() {
        let (xi, ti, oi) = (logits.clone(), targets.clone(), out.clone());
        tape.record(Box::new(move || {
            let Some(g) = oi.grad() else { return };
            let delta: Vec<f64> = {
                let xd = xi.data_ref();
                let td = ti.data_ref();
                xd.iter()
                    .zip(td.iter())
                    .map(|(&x, &t)| g[0] * (sigmoid(x) - t) / n as f64)
                    .collect()
            };
            xi.accumulate_grad(&delta);
        }));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_loss_matches_hand_computed_value() {
        // logit 0, target 1: p = 0.5, bce = ln 2, focal = 0.25 * 0.5^2 * ln 2.
        let mut tape = Tape::new();
        let x = Tensor::new(&[1], vec![0.0], true).unwrap();
        let t = Tensor::new(&[1], vec![1.0], false).unwrap();
        let l = focal_loss(&mut tape, &x, &t, 2.0, 0.25).unwrap();
        let expect = 0.25 * 0.25 * std::f64::consts::LN_2;
        assert!((l.value() - expect).abs() < 1e-12);
    }

    #[test]
    fn smooth_l1_matches_closed_form() {
        let mut tape = Tape::new();
        let p = Tensor::new(&[2], vec![0.5, 2.0], true).unwrap();
        let t = Tensor::new(&[2], vec![0.0, 0.0], false).unwrap();
        let l = smooth_l1(&mut tape, &p, &t, 1.0).unwrap();
        // (0.5 * 0.25 + (2 - 0.5)) / 2 = (0.125 + 1.5) / 2
        assert!((l.value() - 0.8125).abs() < 1e-12);
    }

    #[test]
    fn spatial_softmax_ce_empty_targets_is_exact_zero() {
        let mut tape = Tape::new();
        let x = Tensor::new(&[1, 2, 2, 2], vec![0.3; 8], true).unwrap();
        let l = spatial_softmax_ce(&mut tape, &x, &[None, None]).unwrap();
        assert_eq!(l.value(), 0.0);
        assert!(!l.requires_grad());
        assert_eq!(tape.len(), 0);
    }

    #[test]
    fn conv2d_hand_case() {
        // 3x3 all-ones input, 3x3 all-ones kernel, pad 1: each output counts
        // the in-bounds taps: corners 4, edges 6, center 9.
        let mut tape = Tape::new();
        let x = Tensor::new(&[1, 1, 3, 3], vec![1.0; 9], false).unwrap();
        let k = Tensor::new(&[1, 1, 3, 3], vec![1.0; 9], false).unwrap();
        let b = Tensor::new(&[1], vec![0.0], false).unwrap();
        let y = conv2d(&mut tape, &x, &k, &b, 1, 1).unwrap();
        assert_eq!(y.data(), vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv2d_stride_two_shape() {
        let mut tape = Tape::new();
        let x = Tensor::zeros(&[2, 3, 7, 9], false);
        let k = Tensor::zeros(&[4, 3, 3, 3], false);
        let b = Tensor::zeros(&[4], false);
        let y = conv2d(&mut tape, &x, &k, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), vec![2, 4, 4, 5]);
    }

    #[test]
    fn group_norm_normalizes_groups() {
        let mut tape = Tape::new();
        let x = Tensor::new(&[1, 2, 1, 2], vec![1.0, 3.0, -1.0, 5.0], false).unwrap();
        let gamma = Tensor::new(&[2], vec![1.0, 1.0], false).unwrap();
        let beta = Tensor::new(&[2], vec![0.0, 0.0], false).unwrap();
        let y = group_norm(&mut tape, &x, &gamma, &beta, 2, 1e-5).unwrap();
        let d = y.data();
        // Each group of two values normalizes to +-1 (up to eps).
        assert!((d[0] + d[1]).abs() < 1e-9);
        assert!((d[0] - -0.99999).abs() < 1e-3);
    }

    #[test]
    fn bilinear_resize_identity_when_same_size() {
        let mut tape = Tape::new();
        let x = Tensor::new(&[1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], false).unwrap();
        let y = bilinear_resize(&mut tape, &x, 2, 3).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let mut tape = Tape::new();
        let x = Tensor::new(&[2], vec![f64::NAN, 1.0], true).unwrap();
        assert!(relu(&mut tape, &x).is_err());
        let y = Tensor::new(&[2], vec![1.0, 1.0], true).unwrap();
        let z = Tensor::new(&[2], vec![1.0, f64::INFINITY], false).unwrap();
        assert!(add(&mut tape, &y, &z).is_err());
    }
}
