//! Raw f32 compute kernels behind the graph operations.
//!
//! All kernels take validated shapes (callers in [`crate::graph`] check
//! them) and index with `debug_assert`-level trust. Convolution kernels
//! parallelize over the batch dimension only: each sample's output is
//! written by exactly one worker and per-sample weight-gradient partials
//! are reduced in sample order, so results are bit-identical for any
//! worker count.

use rayon::prelude::*;

/// Cross-correlation with an odd square kernel and "same" zero padding,
/// stride 1. `x`: (n, ci, h, w), `w`: (co, ci, k, k), `b`: (co).
pub fn conv2d_fwd(
    x: &[f32],
    w: &[f32],
    b: &[f32],
    n: usize,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    k: usize,
) -> Vec<f32> {
    debug_assert!(k % 2 == 1);
    let pad = k / 2;
    let plane = h * wd;
    let in_sample = ci * plane;
    let out_sample = co * plane;
    let mut out = vec![0.0f32; n * out_sample];

    out.par_chunks_mut(out_sample)
        .enumerate()
        .for_each(|(s, out_s)| {
            let x_s = &x[s * in_sample..(s + 1) * in_sample];
            for oc in 0..co {
                let out_p = &mut out_s[oc * plane..(oc + 1) * plane];
                out_p.fill(b[oc]);
                for ic in 0..ci {
                    let x_p = &x_s[ic * plane..(ic + 1) * plane];
                    let w_base = (oc * ci + ic) * k * k;
                    for ky in 0..k {
                        let dy = ky as isize - pad as isize;
                        for kx in 0..k {
                            let dx = kx as isize - pad as isize;
                            let wv = w[w_base + ky * k + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            accumulate_shifted(out_p, x_p, h, wd, dy, dx, wv);
                        }
                    }
                }
            }
        });
    out
}

/// out[y][x] += wv * src[y + dy][x + dx] over in-bounds positions.
#[inline]
fn accumulate_shifted(out: &mut [f32], src: &[f32], h: usize, w: usize, dy: isize, dx: isize, wv: f32) {
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as isize - dy.max(0)) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx.max(0)) as usize;
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let orow = &mut out[y * w + x0..y * w + x1];
        let srow = &src[sy * w + (x0 as isize + dx) as usize..sy * w + (x1 as isize + dx) as usize];
        for (o, &s) in orow.iter_mut().zip(srow) {
            *o += wv * s;
        }
    }
}

/// Gradient w.r.t. the input of [`conv2d_fwd`]. `g` has shape (n, co, h, w).
pub fn conv2d_bwd_input(
    g: &[f32],
    w: &[f32],
    n: usize,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    k: usize,
) -> Vec<f32> {
    let pad = k / 2;
    let plane = h * wd;
    let in_sample = ci * plane;
    let out_sample = co * plane;
    let mut dx = vec![0.0f32; n * in_sample];

    dx.par_chunks_mut(in_sample)
        .enumerate()
        .for_each(|(s, dx_s)| {
            let g_s = &g[s * out_sample..(s + 1) * out_sample];
            for ic in 0..ci {
                let dx_p = &mut dx_s[ic * plane..(ic + 1) * plane];
                for oc in 0..co {
                    let g_p = &g_s[oc * plane..(oc + 1) * plane];
                    let w_base = (oc * ci + ic) * k * k;
                    for ky in 0..k {
                        // forward read offset dy implies scatter at -dy here
                        let dy = pad as isize - ky as isize;
                        for kx in 0..k {
                            let dxo = pad as isize - kx as isize;
                            let wv = w[w_base + ky * k + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            accumulate_shifted(dx_p, g_p, h, wd, dy, dxo, wv);
                        }
                    }
                }
            }
        });
    dx
}

/// Gradients w.r.t. weight and bias of [`conv2d_fwd`].
pub fn conv2d_bwd_params(
    x: &[f32],
    g: &[f32],
    n: usize,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    k: usize,
) -> (Vec<f32>, Vec<f32>) {
    let pad = k / 2;
    let plane = h * wd;
    let in_sample = ci * plane;
    let out_sample = co * plane;
    let wlen = co * ci * k * k;

    let partials: Vec<(Vec<f32>, Vec<f32>)> = (0..n)
        .into_par_iter()
        .map(|s| {
            let x_s = &x[s * in_sample..(s + 1) * in_sample];
            let g_s = &g[s * out_sample..(s + 1) * out_sample];
            let mut dw = vec![0.0f32; wlen];
            let mut db = vec![0.0f32; co];
            for oc in 0..co {
                let g_p = &g_s[oc * plane..(oc + 1) * plane];
                db[oc] += g_p.iter().sum::<f32>();
                for ic in 0..ci {
                    let x_p = &x_s[ic * plane..(ic + 1) * plane];
                    let w_base = (oc * ci + ic) * k * k;
                    for ky in 0..k {
                        let dy = ky as isize - pad as isize;
                        for kx in 0..k {
                            let dx = kx as isize - pad as isize;
                            dw[w_base + ky * k + kx] +=
                                dot_shifted(g_p, x_p, h, wd, dy, dx);
                        }
                    }
                }
            }
            (dw, db)
        })
        .collect();

    let mut dw = vec![0.0f32; wlen];
    let mut db = vec![0.0f32; co];
    for (pw, pb) in &partials {
        for (a, b) in dw.iter_mut().zip(pw) {
            *a += b;
        }
        for (a, b) in db.iter_mut().zip(pb) {
            *a += b;
        }
    }
    (dw, db)
}

/// sum over valid (y, x) of a[y][x] * b[y + dy][x + dx].
#[inline]
fn dot_shifted(a: &[f32], b: &[f32], h: usize, w: usize, dy: isize, dx: isize) -> f32 {
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as isize - dy.max(0)) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx.max(0)) as usize;
    let mut acc = 0.0f32;
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let arow = &a[y * w + x0..y * w + x1];
        let brow = &b[sy * w + (x0 as isize + dx) as usize..sy * w + (x1 as isize + dx) as usize];
        acc += arow.iter().zip(brow).map(|(p, q)| p * q).sum::<f32>();
    }
    acc
}

/// Transposed convolution, kernel 2, stride 2, no padding: doubles the
/// spatial dims. `x`: (n, ci, h, w), `w`: (ci, co, 2, 2), `b`: (co);
/// output (n, co, 2h, 2w). With stride == kernel there is no overlap.
pub fn conv_transpose2d_fwd(
    x: &[f32],
    w: &[f32],
    b: &[f32],
    n: usize,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * wd);
    let in_plane = h * wd;
    let out_plane = oh * ow;
    let in_sample = ci * in_plane;
    let out_sample = co * out_plane;
    let mut out = vec![0.0f32; n * out_sample];

    out.par_chunks_mut(out_sample)
        .enumerate()
        .for_each(|(s, out_s)| {
            let x_s = &x[s * in_sample..(s + 1) * in_sample];
            for oc in 0..co {
                let out_p = &mut out_s[oc * out_plane..(oc + 1) * out_plane];
                out_p.fill(b[oc]);
                for ic in 0..ci {
                    let x_p = &x_s[ic * in_plane..(ic + 1) * in_plane];
                    let wb = (ic * co + oc) * 4;
                    let (w00, w01, w10, w11) = (w[wb], w[wb + 1], w[wb + 2], w[wb + 3]);
                    for y in 0..h {
                        let top = &mut out_p[2 * y * ow..2 * y * ow + ow];
                        let xrow = &x_p[y * wd..(y + 1) * wd];
                        for (xv, pair) in xrow.iter().zip(top.chunks_exact_mut(2)) {
                            pair[0] += w00 * xv;
                            pair[1] += w01 * xv;
                        }
                        let bot = &mut out_p[(2 * y + 1) * ow..(2 * y + 2) * ow];
                        for (xv, pair) in xrow.iter().zip(bot.chunks_exact_mut(2)) {
                            pair[0] += w10 * xv;
                            pair[1] += w11 * xv;
                        }
                    }
                }
            }
        });
    out
}

/// Gradient w.r.t. the input of [`conv_transpose2d_fwd`].
pub fn conv_transpose2d_bwd_input(
    g: &[f32],
    w: &[f32],
    n: usize,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * wd);
    let in_plane = h * wd;
    let out_plane = oh * ow;
    let in_sample = ci * in_plane;
    let out_sample = co * out_plane;
    let mut dx = vec![0.0f32; n * in_sample];

    dx.par_chunks_mut(in_sample)
        .enumerate()
        .for_each(|(s, dx_s)| {
            let g_s = &g[s * out_sample..(s + 1) * out_sample];
            for ic in 0..ci {
                let dx_p = &mut dx_s[ic * in_plane..(ic + 1) * in_plane];
                for oc in 0..co {
                    let g_p = &g_s[oc * out_plane..(oc + 1) * out_plane];
                    let wb = (ic * co + oc) * 4;
                    let (w00, w01, w10, w11) = (w[wb], w[wb + 1], w[wb + 2], w[wb + 3]);
                    for y in 0..h {
                        let drow = &mut dx_p[y * wd..(y + 1) * wd];
                        let top = &g_p[2 * y * ow..2 * y * ow + ow];
                        let bot = &g_p[(2 * y + 1) * ow..(2 * y + 2) * ow];
                        for ((d, tp), bp) in drow
                            .iter_mut()
                            .zip(top.chunks_exact(2))
                            .zip(bot.chunks_exact(2))
                        {
                            *d += w00 * tp[0] + w01 * tp[1] + w10 * bp[0] + w11 * bp[1];
                        }
                    }
                }
            }
        });
    dx
}

/// Gradients w.r.t. weight and bias of [`conv_transpose2d_fwd`].
pub fn conv_transpose2d_bwd_params(
    x: &[f32],
    g: &[f32],
    n: usize,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
) -> (Vec<f32>, Vec<f32>) {
    let (oh, ow) = (2 * h, 2 * wd);
    let in_plane = h * wd;
    let out_plane = oh * ow;
    let in_sample = ci * in_plane;
    let out_sample = co * out_plane;
    let wlen = ci * co * 4;

    let partials: Vec<(Vec<f32>, Vec<f32>)> = (0..n)
        .into_par_iter()
        .map(|s| {
            let x_s = &x[s * in_sample..(s + 1) * in_sample];
            let g_s = &g[s * out_sample..(s + 1) * out_sample];
            let mut dw = vec![0.0f32; wlen];
            let mut db = vec![0.0f32; co];
            for oc in 0..co {
                let g_p = &g_s[oc * out_plane..(oc + 1) * out_plane];
                db[oc] += g_p.iter().sum::<f32>();
                for ic in 0..ci {
                    let x_p = &x_s[ic * in_plane..(ic + 1) * in_plane];
                    let wb = (ic * co + oc) * 4;
                    let mut acc = [0.0f32; 4];
                    for y in 0..h {
                        let xrow = &x_p[y * wd..(y + 1) * wd];
                        let top = &g_p[2 * y * ow..2 * y * ow + ow];
                        let bot = &g_p[(2 * y + 1) * ow..(2 * y + 2) * ow];
                        for ((xv, tp), bp) in
                            xrow.iter().zip(top.chunks_exact(2)).zip(bot.chunks_exact(2))
                        {
                            acc[0] += xv * tp[0];
                            acc[1] += xv * tp[1];
                            acc[2] += xv * bp[0];
                            acc[3] += xv * bp[1];
                        }
                    }
                    for i in 0..4 {
                        dw[wb + i] += acc[i];
                    }
                }
            }
            (dw, db)
        })
        .collect();

    let mut dw = vec![0.0f32; wlen];
    let mut db = vec![0.0f32; co];
    for (pw, pb) in &partials {
        for (a, b) in dw.iter_mut().zip(pw) {
            *a += b;
        }
        for (a, b) in db.iter_mut().zip(pb) {
            *a += b;
        }
    }
    (dw, db)
}

/// Non-overlapping 2x2 max pooling. Returns the pooled values and, for
/// each output element, the flat index of its argmax in the input
/// buffer (first hit in row-major block order on ties).
pub fn maxpool2x2_fwd(x: &[f32], n: usize, c: usize, h: usize, w: usize) -> (Vec<f32>, Vec<u32>) {
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; n * c * oh * ow];
    let mut arg = vec![0u32; n * c * oh * ow];
    let mut o = 0;
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let i00 = base + (2 * y) * w + 2 * xx;
                    let i01 = i00 + 1;
                    let i10 = i00 + w;
                    let i11 = i10 + 1;
                    let mut best = i00;
                    if x[i01] > x[best] {
                        best = i01;
                    }
                    if x[i10] > x[best] {
                        best = i10;
                    }
                    if x[i11] > x[best] {
                        best = i11;
                    }
                    out[o] = x[best];
                    arg[o] = best as u32;
                    o += 1;
                }
            }
        }
    }
    (out, arg)
}

/// Routes pooled gradients back to the recorded argmax positions.
pub fn maxpool2x2_bwd(g: &[f32], arg: &[u32], input_len: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; input_len];
    for (gv, &a) in g.iter().zip(arg) {
        dx[a as usize] += gv;
    }
    dx
}

/// Nearest-neighbour 2x upsampling of (n, c, h, w).
pub fn nearest_up2_fwd(x: &[f32], n: usize, c: usize, h: usize, w: usize) -> Vec<f32> {
    let ow = 2 * w;
    let mut out = vec![0.0f32; n * c * 4 * h * w];
    for p in 0..n * c {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..h {
            for xx in 0..w {
                let v = src[y * w + xx];
                let o = 2 * y * ow + 2 * xx;
                dst[o] = v;
                dst[o + 1] = v;
                dst[o + ow] = v;
                dst[o + ow + 1] = v;
            }
        }
    }
    out
}

/// Gradient of nearest upsampling: sums each 2x2 replication block.
pub fn nearest_up2_bwd(g: &[f32], n: usize, c: usize, h: usize, w: usize) -> Vec<f32> {
    let ow = 2 * w;
    let mut dx = vec![0.0f32; n * c * h * w];
    for p in 0..n * c {
        let gsrc = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let o = 2 * y * ow + 2 * xx;
                dst[y * w + xx] = gsrc[o] + gsrc[o + 1] + gsrc[o + ow] + gsrc[o + ow + 1];
            }
        }
    }
    dx
}

/// Depthwise valid-mode cross-correlation of every (sample, channel)
/// plane with one fixed `kh` x `kw` kernel. Used for windowed local
/// statistics; there is no padding, so output is (h-kh+1, w-kw+1).
pub fn depthwise_valid_corr(
    x: &[f32],
    kern: &[f32],
    planes: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) -> Vec<f32> {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut out = vec![0.0f32; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for ky in 0..kh {
                let krow = &kern[ky * kw..(ky + 1) * kw];
                let srow = &src[(y + ky) * w..(y + ky) * w + w];
                for (kx, &kv) in krow.iter().enumerate() {
                    let drow = &mut dst[y * ow..(y + 1) * ow];
                    for (d, &s) in drow.iter_mut().zip(&srow[kx..kx + ow]) {
                        *d += kv * s;
                    }
                }
            }
        }
    }
    out
}

/// Gradient w.r.t. the input of [`depthwise_valid_corr`] (kernel fixed).
pub fn depthwise_valid_corr_bwd(
    g: &[f32],
    kern: &[f32],
    planes: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) -> Vec<f32> {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut dx = vec![0.0f32; planes * h * w];
    for p in 0..planes {
        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
        let dp = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            let grow = &gp[y * ow..(y + 1) * ow];
            for ky in 0..kh {
                let krow = &kern[ky * kw..(ky + 1) * kw];
                for (kx, &kv) in krow.iter().enumerate() {
                    let drow = &mut dp[(y + ky) * w + kx..(y + ky) * w + kx + ow];
                    for (d, &gv) in drow.iter_mut().zip(grow) {
                        *d += kv * gv;
                    }
                }
            }
        }
    }
    dx
}

/// Per-channel batch statistics of (n, c, h, w): biased mean/variance
/// over the n*h*w elements of each channel. Partial sums per sample are
/// combined in sample order.
pub fn channel_stats(x: &[f32], n: usize, c: usize, h: usize, w: usize) -> (Vec<f32>, Vec<f32>) {
    let plane = h * w;
    let cnt = (n * plane) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut acc = 0.0f64;
        for s in 0..n {
            let p = &x[(s * c + ch) * plane..(s * c + ch + 1) * plane];
            acc += p.iter().map(|&v| v as f64).sum::<f64>();
        }
        let m = acc / cnt;
        let mut vacc = 0.0f64;
        for s in 0..n {
            let p = &x[(s * c + ch) * plane..(s * c + ch + 1) * plane];
            vacc += p.iter().map(|&v| (v as f64 - m) * (v as f64 - m)).sum::<f64>();
        }
        mean[ch] = m as f32;
        var[ch] = (vacc / cnt) as f32;
    }
    (mean, var)
}
