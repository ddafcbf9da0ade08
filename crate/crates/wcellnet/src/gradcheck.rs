//! Central finite-difference verification of every backward rule.
//!
//! Analytic gradients come from the engine's f32 backward pass; the
//! differenced objective is evaluated through the f64 reference path so
//! the comparison is not drowned by f32 rounding. Delta is 1e-3 and a
//! gradient coordinate passes when
//! `|fd - analytic| <= max(1e-3 * |g|, 1e-4)`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::features::FeatureExtractor;
use crate::graph::{Graph, Mode, NodeId};
use crate::losses::{self, LossConfig, SsimConvention, SsimParams};
use crate::model::{ModelConfig, WCellNet};
use crate::params::ParamStore;
use crate::reference;
use crate::tensor::Tensor;

pub const DELTA: f64 = 1e-3;
pub const RTOL: f64 = 1e-3;
pub const ATOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub coords: usize,
    /// Coordinates whose perturbation crossed a ReLU/argmax boundary;
    /// excluded because no derivative exists across the interval.
    pub skipped: usize,
    pub worst_abs_err: f64,
    pub worst_ratio: f64, // err / tolerance; < 1 passes
    pub passed: bool,
}

#[derive(Debug, Default)]
pub struct Report {
    pub checks: Vec<CheckResult>,
}

impl Report {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl std::fmt::Display for Report {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {:<28} coords={:<5} skipped={:<3} max_err={:.3e} tol_ratio={:.3}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.coords,
                c.skipped,
                c.worst_abs_err,
                c.worst_ratio
            )?;
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Values with |v| in [min_abs, max_abs]; keeps kinked ops (relu, abs,
/// division) away from their non-smooth points during differencing.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], min_abs: f32, max_abs: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.gen_range(min_abs..max_abs);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// All-distinct values with pairwise gaps far above delta, so pooling
/// argmax positions cannot flip during differencing.
fn distinct_grid(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let data = order
        .iter()
        .map(|&i| (i as f32 - n as f32 / 2.0) * 0.1)
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

enum Coords {
    All,
    Sample(usize),
}

/// Compares analytic gradients of a scalar engine loss against central
/// differences of an f64 objective, over the given differentiable
/// inputs.
fn fd_check(
    name: &str,
    inputs: &[Tensor],
    build: impl Fn(&mut Graph, &[NodeId], &ParamStore) -> Result<NodeId>,
    objective: impl Fn(&[Tensor]) -> f64,
    coords: Coords,
    rng: &mut ChaCha8Rng,
) -> Result<CheckResult> {
    // engine pass
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.register(&format!("in{i}"), t.clone(), true).unwrap())
        .collect();
    let mut g = Graph::new();
    let nodes: Vec<NodeId> = ids.iter().map(|&id| g.param(&store, id)).collect();
    let loss = build(&mut g, &nodes, &store)?;
    g.backward(loss, &mut store)?;

    let mut worst_abs = 0.0f64;
    let mut worst_ratio = 0.0f64;
    let mut checked = 0usize;
    for (t, &id) in ids.iter().enumerate() {
        let n = inputs[t].numel();
        let picks: Vec<usize> = match coords {
            Coords::All => (0..n).collect(),
            Coords::Sample(k) => {
                let mut all: Vec<usize> = (0..n).collect();
                all.shuffle(rng);
                all.truncate(k.min(n));
                all
            }
        };
        for j in picks {
            let mut plus = inputs.to_vec();
            plus[t].data_mut()[j] += DELTA as f32;
            let mut minus = inputs.to_vec();
            minus[t].data_mut()[j] -= DELTA as f32;
            // the representable perturbation can differ from DELTA
            let actual =
                (plus[t].data()[j] as f64 - minus[t].data()[j] as f64) / 2.0;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * actual);
            let an = store.grad(id).data()[j] as f64;
            let err = (fd - an).abs();
            let tol = (RTOL * fd.abs().max(an.abs())).max(ATOL);
            worst_abs = worst_abs.max(err);
            worst_ratio = worst_ratio.max(err / tol);
            checked += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        coords: checked,
        skipped: 0,
        worst_abs_err: worst_abs,
        worst_ratio,
        passed: worst_ratio <= 1.0,
    })
}

/// Weighted sum of an op output (engine side): sum(out * r).
fn weighted(g: &mut Graph, out: NodeId, r: &Tensor) -> Result<NodeId> {
    let rn = g.constant(r.clone());
    let prod = g.mul(out, rn)?;
    Ok(g.sum_all(prod))
}

fn dot64(a: &[f64], r: &Tensor) -> f64 {
    a.iter().zip(r.data()).map(|(&x, &w)| x * w as f64).sum()
}

pub fn check_conv2d(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let x = uniform(rng, &[2, 3, 5, 6], -1.0, 1.0);
    let w = uniform(rng, &[4, 3, 3, 3], -0.6, 0.6);
    let b = uniform(rng, &[4], -0.3, 0.3);
    let r = uniform(rng, &[2, 4, 5, 6], -1.0, 1.0);
    fd_check(
        "conv2d",
        &[x, w, b],
        |g, n, _| {
            let out = g.conv2d(n[0], n[1], n[2])?;
            weighted(g, out, &r)
        },
        |inp| {
            let out = reference::conv2d(
                &reference::f64s(inp[0].data()),
                &reference::f64s(inp[1].data()),
                &reference::f64s(inp[2].data()),
                2,
                3,
                5,
                6,
                4,
                3,
            );
            dot64(&out, &r)
        },
        Coords::All,
        rng,
    )
}

pub fn check_conv_transpose2d(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let x = uniform(rng, &[1, 2, 3, 3], -1.0, 1.0);
    let w = uniform(rng, &[2, 3, 2, 2], -0.6, 0.6);
    let b = uniform(rng, &[3], -0.3, 0.3);
    let r = uniform(rng, &[1, 3, 6, 6], -1.0, 1.0);
    fd_check(
        "conv_transpose2d",
        &[x, w, b],
        |g, n, _| {
            let out = g.conv_transpose2d(n[0], n[1], n[2])?;
            weighted(g, out, &r)
        },
        |inp| {
            let out = reference::conv_transpose2d(
                &reference::f64s(inp[0].data()),
                &reference::f64s(inp[1].data()),
                &reference::f64s(inp[2].data()),
                1,
                2,
                3,
                3,
                3,
            );
            dot64(&out, &r)
        },
        Coords::All,
        rng,
    )
}

pub fn check_maxpool(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let x = distinct_grid(rng, &[1, 3, 6, 6]);
    let r = uniform(rng, &[1, 3, 3, 3], -1.0, 1.0);
    fd_check(
        "maxpool2x2",
        &[x],
        |g, n, _| {
            let out = g.maxpool2x2(n[0])?;
            weighted(g, out, &r)
        },
        |inp| dot64(&reference::maxpool2x2(&reference::f64s(inp[0].data()), 1, 3, 6, 6), &r),
        Coords::All,
        rng,
    )
}

pub fn check_batch_norm(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let x = uniform(rng, &[3, 2, 4, 4], -1.5, 1.5);
    let gamma = uniform(rng, &[2], 0.5, 1.5);
    let beta = uniform(rng, &[2], -0.5, 0.5);
    let r = uniform(rng, &[3, 2, 4, 4], -1.0, 1.0);
    fd_check(
        "batch_norm(train)",
        &[x, gamma, beta],
        |g, n, _| {
            let mut aux = ParamStore::new();
            let rm = aux.register("rm", Tensor::zeros(&[2]), false).unwrap();
            let rv = aux.register("rv", Tensor::full(&[2], 1.0), false).unwrap();
            let out = g.batch_norm(n[0], n[1], n[2], &mut aux, rm, rv, Mode::Train)?;
            weighted(g, out, &r)
        },
        |inp| {
            let out = reference::batch_norm(
                &reference::f64s(inp[0].data()),
                &reference::f64s(inp[1].data()),
                &reference::f64s(inp[2].data()),
                &[0.0; 2],
                &[1.0; 2],
                true,
                3,
                2,
                4,
                4,
            );
            dot64(&out, &r)
        },
        Coords::All,
        rng,
    )
}

pub fn check_elementwise(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let shape = [2usize, 3, 4];
    let mut out = Vec::new();

    let x = away_from_zero(rng, &shape, 0.05, 1.5);
    let r = uniform(rng, &shape, -1.0, 1.0);
    out.push(fd_check(
        "relu",
        &[x],
        |g, n, _| {
            let y = g.relu(n[0]);
            weighted(g, y, &r)
        },
        |inp| dot64(&reference::relu(&reference::f64s(inp[0].data())), &r),
        Coords::All,
        rng,
    )?);

    let x = uniform(rng, &shape, -2.0, 2.0);
    let r2 = uniform(rng, &shape, -1.0, 1.0);
    out.push(fd_check(
        "tanh",
        &[x],
        |g, n, _| {
            let y = g.tanh(n[0]);
            weighted(g, y, &r2)
        },
        |inp| dot64(&reference::tanh(&reference::f64s(inp[0].data())), &r2),
        Coords::All,
        rng,
    )?);

    let x = away_from_zero(rng, &shape, 0.05, 1.5);
    let r3 = uniform(rng, &shape, -1.0, 1.0);
    out.push(fd_check(
        "abs",
        &[x],
        |g, n, _| {
            let y = g.abs(n[0]);
            weighted(g, y, &r3)
        },
        |inp| dot64(&reference::abs(&reference::f64s(inp[0].data())), &r3),
        Coords::All,
        rng,
    )?);

    for op in ["add", "sub", "mul", "div"] {
        let a = uniform(rng, &shape, -1.5, 1.5);
        let b = if op == "div" {
            away_from_zero(rng, &shape, 0.3, 1.5)
        } else {
            uniform(rng, &shape, -1.5, 1.5)
        };
        let rw = uniform(rng, &shape, -1.0, 1.0);
        out.push(fd_check(
            op,
            &[a, b],
            |g, n, _| {
                let y = match op {
                    "add" => g.add(n[0], n[1])?,
                    "sub" => g.sub(n[0], n[1])?,
                    "mul" => g.mul(n[0], n[1])?,
                    _ => g.div(n[0], n[1])?,
                };
                weighted(g, y, &rw)
            },
            |inp| {
                let a = inp[0].data();
                let b = inp[1].data();
                let y: Vec<f64> = a
                    .iter()
                    .zip(b)
                    .map(|(&p, &q)| match op {
                        "add" => p as f64 + q as f64,
                        "sub" => p as f64 - q as f64,
                        "mul" => p as f64 * q as f64,
                        _ => p as f64 / q as f64,
                    })
                    .collect();
                dot64(&y, &rw)
            },
            Coords::All,
            rng,
        )?);
    }

    let x = uniform(rng, &[2, 2, 3, 3], -1.0, 1.0);
    let r4 = uniform(rng, &[2, 2, 3, 3], -1.0, 1.0);
    out.push(fd_check(
        "reverse_channels",
        &[x],
        |g, n, _| {
            let y = g.reverse_channels(n[0])?;
            weighted(g, y, &r4)
        },
        |inp| dot64(&reference::reverse_channels(&reference::f64s(inp[0].data()), 2, 2, 9), &r4),
        Coords::All,
        rng,
    )?);

    let a = uniform(rng, &[2, 2, 3, 3], -1.0, 1.0);
    let b = uniform(rng, &[2, 1, 3, 3], -1.0, 1.0);
    let c = uniform(rng, &[2, 3, 3, 3], -1.0, 1.0);
    let r5 = uniform(rng, &[2, 6, 3, 3], -1.0, 1.0);
    out.push(fd_check(
        "concat_channels",
        &[a, b, c],
        |g, n, _| {
            let y = g.concat_channels(&[n[0], n[1], n[2]])?;
            weighted(g, y, &r5)
        },
        |inp| {
            // concatenate per sample in f64
            let plane = 9;
            let mut y = Vec::new();
            for s in 0..2usize {
                for (t, ch) in inp.iter().zip([2usize, 1, 3]) {
                    y.extend(
                        t.data()[s * ch * plane..(s + 1) * ch * plane]
                            .iter()
                            .map(|&v| v as f64),
                    );
                }
            }
            dot64(&y, &r5)
        },
        Coords::All,
        rng,
    )?);

    let x = uniform(rng, &[1, 3, 4, 4], -1.0, 1.0);
    let r6 = uniform(rng, &[1, 3, 8, 8], -1.0, 1.0);
    out.push(fd_check(
        "nearest_up2",
        &[x],
        |g, n, _| {
            let y = g.nearest_up2(n[0])?;
            weighted(g, y, &r6)
        },
        |inp| dot64(&reference::nearest_up2(&reference::f64s(inp[0].data()), 1, 3, 4, 4), &r6),
        Coords::All,
        rng,
    )?);

    let x = uniform(rng, &[1, 2, 8, 8], -1.0, 1.0);
    let kern = losses::gaussian_window(3, 0.8);
    let r7 = uniform(rng, &[1, 2, 6, 6], -1.0, 1.0);
    out.push(fd_check(
        "window_corr",
        &[x],
        |g, n, _| {
            let y = g.window_corr(n[0], &kern)?;
            weighted(g, y, &r7)
        },
        |inp| {
            dot64(
                &reference::window_corr(
                    &reference::f64s(inp[0].data()),
                    &reference::f64s(kern.data()),
                    2,
                    8,
                    8,
                    3,
                    3,
                ),
                &r7,
            )
        },
        Coords::All,
        rng,
    )?);

    Ok(out)
}

pub fn check_pixel_losses(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for power in [1u32, 2] {
        let t = uniform(rng, &[2, 2, 4, 4], -1.0, 1.0);
        // keep |t - p| away from the L1 kink
        let p = Tensor::from_vec(
            t.shape(),
            t.data()
                .iter()
                .map(|&v| {
                    let shift = rng.gen_range(0.05f32..0.4);
                    if rng.gen_bool(0.5) {
                        v + shift
                    } else {
                        v - shift
                    }
                })
                .collect(),
        )
        .unwrap();
        let t2 = t.clone();
        out.push(fd_check(
            if power == 1 { "pixel_loss_l1" } else { "pixel_loss_l2" },
            &[p],
            move |g, n, _| {
                let tn = g.constant(t.clone());
                losses::pixel_loss(g, tn, n[0], power)
            },
            move |inp| reference::pixel_loss(&reference::f64s(t2.data()), &reference::f64s(inp[0].data()), power),
            Coords::All,
            rng,
        )?);
    }
    Ok(out)
}

pub fn check_dssim(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let t = uniform(rng, &[1, 2, 12, 12], -0.8, 0.8);
    let p = uniform(rng, &[1, 2, 12, 12], -0.8, 0.8);
    let params = SsimParams::default();
    let window = params.window.clone();
    let (c1, c2) = (params.c1 as f64, params.c2 as f64);
    let t2 = t.clone();
    fd_check(
        "dssim(standard)",
        &[p],
        move |g, n, _| {
            let tn = g.constant(t.clone());
            losses::dssim(g, tn, n[0], &params, SsimConvention::Standard)
        },
        move |inp| {
            1.0 - reference::ssim_mean_direct(
                &reference::f64s(t2.data()),
                &reference::f64s(inp[0].data()),
                2,
                12,
                12,
                &reference::f64s(window.data()),
                11,
                c1,
                c2,
            )
        },
        Coords::All,
        rng,
    )
}

pub fn check_weight_decay(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let w = uniform(rng, &[3, 2, 3, 3], -1.0, 1.0);
    fd_check(
        "weight_decay",
        &[w],
        |g, n, _| {
            // in-graph: 0.5 * sum(w^2)
            let sq = g.mul(n[0], n[0])?;
            let s = g.sum_all(sq);
            Ok(g.mul_scalar(s, 0.5))
        },
        |inp| {
            0.5 * inp[0]
                .data()
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
        },
        Coords::All,
        rng,
    )
}

pub fn check_perceptual(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let fx = FeatureExtractor::random(977);
    let t = uniform(rng, &[1, 1, 16, 16], -0.8, 0.8);
    let p = uniform(rng, &[1, 1, 16, 16], -0.8, 0.8);
    let t2 = t.clone();
    let fx2 = FeatureExtractor::random(977);
    fd_check(
        "perceptual_loss",
        &[p],
        move |g, n, _| {
            let tn = g.constant(t.clone());
            losses::perceptual_loss(g, tn, n[0], &fx)
        },
        move |inp| {
            let truth = reference::f64s(t2.data());
            let pred = reference::f64s(inp[0].data());
            let f_t = reference::extractor_features(&fx2, &truth, 1, 1, 16, 16);
            let f_p = reference::extractor_features(&fx2, &pred, 1, 1, 16, 16);
            0.5 * f_t
                .iter()
                .zip(&f_p)
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>()
        },
        Coords::Sample(10),
        rng,
    )
}

/// Finite differences through the whole network plus combined loss,
/// perturbing sampled coordinates of every trainable parameter tensor.
pub fn check_full_model(
    rng: &mut ChaCha8Rng,
    with_perceptual: bool,
    coords_per_tensor: usize,
) -> Result<CheckResult> {
    let config = ModelConfig::new(4, 3, 16, 16)?;
    let (net, mut store) = WCellNet::init(config, 4242)?;
    let x_f = uniform(rng, &[1, 1, 16, 16], -0.9, 0.9);
    let x_l = uniform(rng, &[1, 1, 16, 16], -0.9, 0.9);
    let y_true = uniform(rng, &[1, 3, 16, 16], -0.9, 0.9);

    let (lambda1, extractor) = if with_perceptual {
        (1e-2f32, Some(FeatureExtractor::random(31)))
    } else {
        (0.0f32, None)
    };
    let lambda2 = 1e-3f32;
    let loss_config = LossConfig {
        lambda1,
        lambda2,
        extractor: if with_perceptual {
            crate::features::ExtractorKind::RandomConv { seed: 31 }
        } else {
            crate::features::ExtractorKind::None
        },
        ..LossConfig::default()
    };

    // engine gradients
    let mut g = Graph::new();
    let xf = g.constant(x_f.clone());
    let xl = g.constant(x_l.clone());
    let yt = g.constant(y_true.clone());
    let pred = net.forward(&mut g, &mut store, xf, xl, Mode::Train)?;
    let combined = losses::combined_loss(&mut g, &store, yt, pred, extractor.as_ref(), &loss_config)?;
    store.zero_grads();
    g.backward(combined.total, &mut store)?;

    let ids = if with_perceptual {
        // each differenced evaluation walks the reference extractor, so
        // spot-check a depth-spanning subset instead of every tensor
        [
            "enc1.b1.conv1.weight",
            "enc1.b4.conv2.weight",
            "enc2.b2.bn1.gamma",
            "enc2.b3.bn2.beta",
            "dec.b1.up.weight",
            "dec.b3.conv.weight",
            "dec.b4.conv.bias",
            "head.weight",
        ]
        .iter()
        .map(|n| store.id(n).expect("known parameter"))
        .collect()
    } else {
        store.trainable_ids()
    };
    // the true-branch features never depend on the perturbed parameters
    let true_features = extractor.as_ref().map(|fx| {
        let [m, frames, h, w] = y_true.dims4().unwrap();
        reference::extractor_features(fx, &reference::f64s(y_true.data()), m, frames, h, w)
    });

    let mut worst_abs = 0.0f64;
    let mut worst_ratio = 0.0f64;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    for id in ids {
        let n = store.value(id).numel();
        let mut picks: Vec<usize> = (0..n).collect();
        picks.shuffle(rng);
        // candidates beyond the quota cover coordinates we must skip
        picks.truncate((3 * coords_per_tensor).min(n));
        let mut done = 0usize;
        for j in picks {
            if done == coords_per_tensor {
                break;
            }
            let mut eval = |sign: f64| -> (f64, f64, reference::Fingerprint) {
                let mut s2 = store.clone();
                let v = s2.value(id).data()[j];
                s2.value_mut(id).data_mut()[j] = (v as f64 + sign * DELTA) as f32;
                let moved = s2.value(id).data()[j] as f64;
                let (obj, fp) = reference::combined_objective_traced(
                    &config,
                    &s2,
                    &x_f,
                    &x_l,
                    &y_true,
                    extractor.as_ref(),
                    lambda1 as f64,
                    lambda2 as f64,
                    true_features.as_deref(),
                );
                (obj, moved, fp)
            };
            let (fp, vp, tp) = eval(1.0);
            let (fm, vm, tm) = eval(-1.0);
            if tp != tm {
                // the perturbation crossed a ReLU sign or pooling argmax
                // boundary; the difference quotient does not measure a
                // derivative there
                skipped += 1;
                continue;
            }
            let fd = (fp - fm) / (vp - vm);
            let an = store.grad(id).data()[j] as f64;
            let err = (fd - an).abs();
            let tol = (RTOL * fd.abs().max(an.abs())).max(ATOL);
            worst_abs = worst_abs.max(err);
            worst_ratio = worst_ratio.max(err / tol);
            checked += 1;
            done += 1;
        }
    }
    Ok(CheckResult {
        name: if with_perceptual {
            "full_model(l2+percep+decay)".to_string()
        } else {
            "full_model(l2+decay)".to_string()
        },
        coords: checked,
        skipped,
        worst_abs_err: worst_abs,
        worst_ratio,
        passed: worst_ratio <= 1.0,
    })
}

/// The complete suite: every differentiable operation, the losses, and
/// the full network graph.
pub fn run_all(seed: u64) -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Report::default();
    report.checks.push(check_conv2d(&mut rng)?);
    report.checks.push(check_conv_transpose2d(&mut rng)?);
    report.checks.push(check_maxpool(&mut rng)?);
    report.checks.push(check_batch_norm(&mut rng)?);
    report.checks.extend(check_elementwise(&mut rng)?);
    report.checks.extend(check_pixel_losses(&mut rng)?);
    report.checks.push(check_dssim(&mut rng)?);
    report.checks.push(check_weight_decay(&mut rng)?);
    report.checks.push(check_perceptual(&mut rng)?);
    report.checks.push(check_full_model(&mut rng, false, 6)?);
    report.checks.push(check_full_model(&mut rng, true, 2)?);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut checks = vec![
            check_conv2d(&mut rng).unwrap(),
            check_conv_transpose2d(&mut rng).unwrap(),
            check_maxpool(&mut rng).unwrap(),
            check_batch_norm(&mut rng).unwrap(),
        ];
        checks.extend(check_elementwise(&mut rng).unwrap());
        for c in checks {
            assert!(c.passed, "{} ratio {:.3}", c.name, c.worst_ratio);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut checks = check_pixel_losses(&mut rng).unwrap();
        checks.push(check_dssim(&mut rng).unwrap());
        checks.push(check_weight_decay(&mut rng).unwrap());
        for c in checks {
            assert!(c.passed, "{} ratio {:.3}", c.name, c.worst_ratio);
        }
    }
}
