//! Slow, obviously-correct f64 loop implementations of every numeric
//! operation, kept independent of the optimized kernels and the graph.
//!
//! These back two verification layers: direct output comparison
//! (optimized kernel vs. brute-force loop) and the finite-difference
//! gradient suite. Everything here stays in f64 end to end; the only
//! f32 in the pipeline is the stored parameters and inputs themselves,
//! so central differences at delta = 1e-3 resolve the true gradient
//! instead of rounding noise.

use crate::features::FeatureExtractor;
use crate::graph::BN_EPS;
use crate::layers::UpsampleMode;
use crate::model::{ModelConfig, BLOCKS};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Widens an f32 buffer to f64.
pub fn f64s(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

/// Order-sensitive fingerprint of the piecewise structure a forward
/// pass ran through: ReLU sign patterns and pooling argmax choices.
/// Two evaluations with equal fingerprints stayed on the same smooth
/// piece of the network function, so central differences between them
/// measure a true derivative.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Fingerprint(pub u64);

#[derive(Default)]
pub struct Tracer {
    h: u64,
}

impl Tracer {
    pub fn new() -> Self {
        Tracer { h: 0xcbf29ce484222325 }
    }

    fn mark(&mut self, v: u64) {
        self.h = (self.h ^ v).wrapping_mul(0x100000001b3);
    }

    fn mark_signs(&mut self, x: &[f64]) {
        for &v in x {
            self.mark((v > 0.0) as u64);
        }
    }

    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint(self.h)
    }
}

fn maxpool2x2_traced(x: &[f64], n: usize, c: usize, h: usize, w: usize, tr: &mut Tracer) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f64; n * c * oh * ow];
    for p in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                let i = (p * h + 2 * y) * w + 2 * xx;
                let cand = [x[i], x[i + 1], x[i + w], x[i + w + 1]];
                let mut best = 0usize;
                for k in 1..4 {
                    if cand[k] > cand[best] {
                        best = k;
                    }
                }
                tr.mark(best as u64);
                out[(p * oh + y) * ow + xx] = cand[best];
            }
        }
    }
    out
}

/// Direct nested-loop convolution, odd kernel, same zero padding.
pub fn conv2d(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    n: usize,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    k: usize,
) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let mut out = vec![0.0f64; n * co * h * wd];
    for s in 0..n {
        for oc in 0..co {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b[oc];
                    for ic in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as isize + ky as isize - pad;
                                let ix = xx as isize + kx as isize - pad;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                    let xi = ((s * ci + ic) * h + iy as usize) * wd + ix as usize;
                                    let wi = ((oc * ci + ic) * k + ky) * k + kx;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                    }
                    out[((s * co + oc) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}

/// Direct scatter-accumulate transposed convolution, kernel 2 stride 2.
pub fn conv_transpose2d(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    n: usize,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * wd);
    let mut out = vec![0.0f64; n * co * oh * ow];
    for s in 0..n {
        for oc in 0..co {
            let base = (s * co + oc) * oh * ow;
            for v in &mut out[base..base + oh * ow] {
                *v = b[oc];
            }
        }
        for ic in 0..ci {
            for y in 0..h {
                for xx in 0..wd {
                    let xv = x[((s * ci + ic) * h + y) * wd + xx];
                    for oc in 0..co {
                        for ky in 0..2 {
                            for kx in 0..2 {
                                let wi = ((ic * co + oc) * 2 + ky) * 2 + kx;
                                let oi = ((s * co + oc) * oh + 2 * y + ky) * ow + 2 * xx + kx;
                                out[oi] += xv * w[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn maxpool2x2(x: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f64; n * c * oh * ow];
    for p in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                let i = (p * h + 2 * y) * w + 2 * xx;
                out[(p * oh + y) * ow + xx] = x[i].max(x[i + 1]).max(x[i + w]).max(x[i + w + 1]);
            }
        }
    }
    out
}

pub fn nearest_up2(x: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let ow = 2 * w;
    let mut out = vec![0.0f64; n * c * 4 * h * w];
    for p in 0..n * c {
        for y in 0..2 * h {
            for xx in 0..ow {
                out[(p * 2 * h + y) * ow + xx] = x[(p * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

/// Batch normalization; train mode computes batch statistics, eval mode
/// consumes the provided running statistics. Pure (no state update).
#[allow(clippy::too_many_arguments)]
pub fn batch_norm(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    train: bool,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let plane = h * w;
    let cnt = (n * plane) as f64;
    let mut out = vec![0.0f64; x.len()];
    for ch in 0..c {
        let (mean, var) = if train {
            let mut m = 0.0f64;
            for s in 0..n {
                let base = (s * c + ch) * plane;
                for i in base..base + plane {
                    m += x[i];
                }
            }
            m /= cnt;
            let mut v = 0.0f64;
            for s in 0..n {
                let base = (s * c + ch) * plane;
                for i in base..base + plane {
                    let d = x[i] - m;
                    v += d * d;
                }
            }
            (m, v / cnt)
        } else {
            (running_mean[ch], running_var[ch])
        };
        let inv = 1.0 / (var + BN_EPS as f64).sqrt();
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for i in base..base + plane {
                out[i] = (x[i] - mean) * inv * gamma[ch] + beta[ch];
            }
        }
    }
    out
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn tanh(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.tanh()).collect()
}

pub fn abs(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.abs()).collect()
}

pub fn reverse_channels(x: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; x.len()];
    for s in 0..n {
        for ch in 0..c {
            for i in 0..plane {
                out[(s * c + (c - 1 - ch)) * plane + i] = x[(s * c + ch) * plane + i];
            }
        }
    }
    out
}

pub fn window_corr(
    x: &[f64],
    kern: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) -> Vec<f64> {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut out = vec![0.0f64; planes * oh * ow];
    for p in 0..planes {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = 0.0f64;
                for ky in 0..kh {
                    for kx in 0..kw {
                        acc += x[(p * h + y + ky) * w + xx + kx] * kern[ky * kw + kx];
                    }
                }
                out[(p * oh + y) * ow + xx] = acc;
            }
        }
    }
    out
}

/// Raw pixel loss: 0.5 * sum |t - p|^power over every element.
pub fn pixel_loss(t: &[f64], p: &[f64], power: u32) -> f64 {
    0.5 * t
        .iter()
        .zip(p)
        .map(|(&a, &b)| (a - b).abs().powi(power as i32))
        .sum::<f64>()
}

/// Plain mean of squared differences over all elements.
pub fn mse(t: &[f64], p: &[f64]) -> f64 {
    let n = t.len() as f64;
    t.iter()
        .zip(p)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / n
}

/// Mean local structural similarity computed from the textbook
/// definition: per window, weighted means first, then weighted central
/// moments around them. This is a different algebraic route than the
/// engine's blurred-squares formulation.
#[allow(clippy::too_many_arguments)]
pub fn ssim_mean_direct(
    t: &[f64],
    p: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    window: &[f64],
    ks: usize,
    c1: f64,
    c2: f64,
) -> f64 {
    let (oh, ow) = (h - ks + 1, w - ks + 1);
    let mut total = 0.0f64;
    for pl in 0..planes {
        for y in 0..oh {
            for xx in 0..ow {
                let mut mu_t = 0.0f64;
                let mut mu_p = 0.0f64;
                for ky in 0..ks {
                    for kx in 0..ks {
                        let wgt = window[ky * ks + kx];
                        mu_t += wgt * t[(pl * h + y + ky) * w + xx + kx];
                        mu_p += wgt * p[(pl * h + y + ky) * w + xx + kx];
                    }
                }
                let mut var_t = 0.0f64;
                let mut var_p = 0.0f64;
                let mut cov = 0.0f64;
                for ky in 0..ks {
                    for kx in 0..ks {
                        let wgt = window[ky * ks + kx];
                        let dt = t[(pl * h + y + ky) * w + xx + kx] - mu_t;
                        let dp = p[(pl * h + y + ky) * w + xx + kx] - mu_p;
                        var_t += wgt * dt * dt;
                        var_p += wgt * dp * dp;
                        cov += wgt * dt * dp;
                    }
                }
                total += ((2.0 * mu_t * mu_p + c1) * (2.0 * cov + c2))
                    / ((mu_t * mu_t + mu_p * mu_p + c1) * (var_t + var_p + c2));
            }
        }
    }
    total / (planes * oh * ow) as f64
}

// --- reference network forward ---------------------------------------------

struct Feat {
    data: Vec<f64>,
    c: usize,
    h: usize,
    w: usize,
}

fn pval(store: &ParamStore, name: &str) -> Vec<f64> {
    f64s(store.value(store.id(name).unwrap_or_else(|| panic!("missing param {name}"))).data())
}

fn pshape(store: &ParamStore, name: &str) -> Vec<usize> {
    store
        .value(store.id(name).unwrap_or_else(|| panic!("missing param {name}")))
        .shape()
        .to_vec()
}

fn conv_block(store: &ParamStore, prefix: &str, x: &Feat, n: usize, train: bool, tr: &mut Tracer) -> Feat {
    let mut cur = Feat {
        data: x.data.clone(),
        c: x.c,
        h: x.h,
        w: x.w,
    };
    for stage in 1..=2 {
        let w = pval(store, &format!("{prefix}.conv{stage}.weight"));
        let ws = pshape(store, &format!("{prefix}.conv{stage}.weight"));
        let b = pval(store, &format!("{prefix}.conv{stage}.bias"));
        let co = ws[0];
        let conv = conv2d(&cur.data, &w, &b, n, cur.c, cur.h, cur.w, co, ws[2]);
        let gamma = pval(store, &format!("{prefix}.bn{stage}.gamma"));
        let beta = pval(store, &format!("{prefix}.bn{stage}.beta"));
        let rm = pval(store, &format!("{prefix}.bn{stage}.running_mean"));
        let rv = pval(store, &format!("{prefix}.bn{stage}.running_var"));
        let normed = batch_norm(&conv, &gamma, &beta, &rm, &rv, train, n, co, cur.h, cur.w);
        tr.mark_signs(&normed);
        cur = Feat {
            data: relu(&normed),
            c: co,
            h: cur.h,
            w: cur.w,
        };
    }
    cur
}

fn up_block(store: &ParamStore, prefix: &str, x: &Feat, n: usize, mode: UpsampleMode) -> Feat {
    let uw = pval(store, &format!("{prefix}.up.weight"));
    let uws = pshape(store, &format!("{prefix}.up.weight"));
    let ub = pval(store, &format!("{prefix}.up.bias"));
    let (up, c_up) = match mode {
        UpsampleMode::Transposed => {
            let co = uws[1];
            (
                conv_transpose2d(&x.data, &uw, &ub, n, x.c, x.h, x.w, co),
                co,
            )
        }
        UpsampleMode::Nearest => {
            let upsampled = nearest_up2(&x.data, n, x.c, x.h, x.w);
            let co = uws[0];
            (
                conv2d(&upsampled, &uw, &ub, n, x.c, 2 * x.h, 2 * x.w, co, uws[2]),
                co,
            )
        }
    };
    let (h, w) = (2 * x.h, 2 * x.w);
    let cw = pval(store, &format!("{prefix}.conv.weight"));
    let cws = pshape(store, &format!("{prefix}.conv.weight"));
    let cb = pval(store, &format!("{prefix}.conv.bias"));
    let co = cws[0];
    let conv = conv2d(&up, &cw, &cb, n, c_up, h, w, co, 3);
    Feat {
        data: tanh(&conv),
        c: co,
        h,
        w,
    }
}

fn concat(parts: &[&Feat], n: usize) -> Feat {
    let (h, w) = (parts[0].h, parts[0].w);
    let plane = h * w;
    let c: usize = parts.iter().map(|p| p.c).sum();
    let mut data = Vec::with_capacity(n * c * plane);
    for s in 0..n {
        for p in parts {
            data.extend_from_slice(&p.data[s * p.c * plane..(s + 1) * p.c * plane]);
        }
    }
    Feat { data, c, h, w }
}

fn reverse(x: &Feat, n: usize) -> Feat {
    let plane = x.h * x.w;
    Feat {
        data: reverse_channels(&x.data, n, x.c, plane),
        c: x.c,
        h: x.h,
        w: x.w,
    }
}

/// Reference forward pass of the whole network, mirroring the graph
/// construction in the model module but built purely from these loop
/// primitives. Returns the prediction in f64.
pub fn model_forward(
    config: &ModelConfig,
    store: &ParamStore,
    x_f: &Tensor,
    x_l: &Tensor,
    train: bool,
) -> Vec<f64> {
    model_forward_traced(config, store, x_f, x_l, train, &mut Tracer::new())
}

/// Like [`model_forward`], recording the piecewise structure into `tr`.
pub fn model_forward_traced(
    config: &ModelConfig,
    store: &ParamStore,
    x_f: &Tensor,
    x_l: &Tensor,
    train: bool,
    tr: &mut Tracer,
) -> Vec<f64> {
    let [n, _, h, w] = x_f.dims4().unwrap();
    let mut features = Vec::new(); // [encoder][block]
    for (which, input) in [(1usize, x_f), (2usize, x_l)] {
        let mut cur = Feat {
            data: f64s(input.data()),
            c: 1,
            h,
            w,
        };
        let mut lookups = Vec::with_capacity(BLOCKS);
        for b in 1..=BLOCKS {
            let conv = conv_block(store, &format!("enc{which}.b{b}"), &cur, n, train, tr);
            let pooled = maxpool2x2_traced(&conv.data, n, conv.c, conv.h, conv.w, tr);
            cur = Feat {
                data: pooled,
                c: conv.c,
                h: conv.h / 2,
                w: conv.w / 2,
            };
            lookups.push(Feat {
                data: cur.data.clone(),
                c: cur.c,
                h: cur.h,
                w: cur.w,
            });
        }
        features.push(lookups);
    }

    let (e1, e2) = (&features[0], &features[1]);
    let rev_last = reverse(&e2[BLOCKS - 1], n);
    let seed = concat(&[&e1[BLOCKS - 1], &rev_last], n);
    let mut state = up_block(store, "dec.b1", &seed, n, config.upsample);
    for b in 1..BLOCKS {
        let skip = BLOCKS - 1 - b;
        let rev = reverse(&e2[skip], n);
        let cat = concat(&[&e1[skip], &state, &rev], n);
        state = up_block(store, &format!("dec.b{}", b + 1), &cat, n, config.upsample);
    }

    let hw = pval(store, "head.weight");
    let hb = pval(store, "head.bias");
    let logits = conv2d(&state.data, &hw, &hb, n, state.c, state.h, state.w, config.frames, 3);
    tanh(&logits)
}

/// Reference forward of the perceptual feature extractor over an
/// (m, frames, h, w) batch given in f64.
pub fn extractor_features(
    fx: &FeatureExtractor,
    y: &[f64],
    m: usize,
    frames: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    extractor_features_traced(fx, y, m, frames, h, w, &mut Tracer::new())
}

/// Like [`extractor_features`], recording the piecewise structure.
#[allow(clippy::too_many_arguments)]
pub fn extractor_features_traced(
    fx: &FeatureExtractor,
    y: &[f64],
    m: usize,
    frames: usize,
    h: usize,
    w: usize,
    tr: &mut Tracer,
) -> Vec<f64> {
    let n = m * frames;
    let plane = h * w;
    // replicate the single channel to three
    let mut data = Vec::with_capacity(n * 3 * plane);
    for s in 0..n {
        for _ in 0..3 {
            data.extend_from_slice(&y[s * plane..(s + 1) * plane]);
        }
    }
    let mut cur = Feat { data, c: 3, h, w };
    let stages = fx.stages();
    for (s, stage) in stages.iter().enumerate() {
        for (wt, bt) in stage {
            let co = wt.shape()[0];
            let conv = conv2d(
                &cur.data,
                &f64s(wt.data()),
                &f64s(bt.data()),
                n,
                cur.c,
                cur.h,
                cur.w,
                co,
                3,
            );
            tr.mark_signs(&conv);
            cur = Feat {
                data: relu(&conv),
                c: co,
                h: cur.h,
                w: cur.w,
            };
        }
        if s + 1 != stages.len() {
            let pooled = maxpool2x2_traced(&cur.data, n, cur.c, cur.h, cur.w, tr);
            cur = Feat {
                data: pooled,
                c: cur.c,
                h: cur.h / 2,
                w: cur.w / 2,
            };
        }
    }
    cur.data
}

/// The training objective evaluated through the reference path:
/// J = pixel_l2 / m + lambda1 * perceptual / m + lambda2 * decay.
#[allow(clippy::too_many_arguments)]
pub fn combined_objective(
    config: &ModelConfig,
    store: &ParamStore,
    x_f: &Tensor,
    x_l: &Tensor,
    y_true: &Tensor,
    extractor: Option<&FeatureExtractor>,
    lambda1: f64,
    lambda2: f64,
) -> f64 {
    combined_objective_traced(config, store, x_f, x_l, y_true, extractor, lambda1, lambda2, None).0
}

/// Traced variant; `true_features` may cache the constant true-branch
/// extractor output across repeated evaluations.
#[allow(clippy::too_many_arguments)]
pub fn combined_objective_traced(
    config: &ModelConfig,
    store: &ParamStore,
    x_f: &Tensor,
    x_l: &Tensor,
    y_true: &Tensor,
    extractor: Option<&FeatureExtractor>,
    lambda1: f64,
    lambda2: f64,
    true_features: Option<&[f64]>,
) -> (f64, Fingerprint) {
    let [m, frames, h, w] = y_true.dims4().unwrap();
    let mut tr = Tracer::new();
    let pred = model_forward_traced(config, store, x_f, x_l, true, &mut tr);
    let truth = f64s(y_true.data());
    let recon = pixel_loss(&truth, &pred, 2);
    let mut j = recon / m as f64;
    if lambda1 > 0.0 {
        let fx = extractor.expect("extractor required when lambda1 > 0");
        let f_t = match true_features {
            Some(f) => f.to_vec(),
            None => extractor_features(fx, &truth, m, frames, h, w),
        };
        let f_p = extractor_features_traced(fx, &pred, m, frames, h, w, &mut tr);
        let lp: f64 = 0.5
            * f_t
                .iter()
                .zip(&f_p)
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>();
        j += lambda1 * lp / m as f64;
    }
    if lambda2 > 0.0 {
        let decay: f64 = store
            .iter()
            .filter(|(_, p)| p.trainable && p.name.ends_with(".weight"))
            .map(|(_, p)| {
                p.value
                    .data()
                    .iter()
                    .map(|&v| (v as f64) * (v as f64))
                    .sum::<f64>()
            })
            .sum::<f64>()
            * 0.5;
        j += lambda2 * decay;
    }
    (j, tr.fingerprint())
}
