//! Training losses: pixel-wise L1/L2, structural dissimilarity,
//! perceptual feature distance, weight decay, and their weighted
//! combination.
//!
//! Conventions: the pixel losses are unnormalized half-sums over all
//! elements. The combined training objective divides the reconstruction
//! and perceptual terms by the batch size and adds the decay term with
//! its lambda weight, so with both lambdas zero it reduces to
//! `pixel_loss / m`.

use crate::error::{Error, Result};
use crate::features::{ExtractorKind, FeatureExtractor};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Reconstruction loss selector.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub enum Reconstruction {
    L1,
    #[default]
    L2,
    Dssim,
}

/// How the structural-similarity batch average is scaled.
///
/// `Paper` keeps the extra 1/2 prefactor of the source formulation, so
/// identical images score DSSIM = 0.5; `Standard` drops it, so
/// identical images score 0.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub enum SsimConvention {
    #[default]
    Paper,
    Standard,
}

/// Window and stabilizer constants for local structural similarity.
#[derive(Clone, Debug)]
pub struct SsimParams {
    pub window: Tensor,
    pub c1: f32,
    pub c2: f32,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: gaussian_window(11, 1.5),
            c1: 4e-4,
            c2: 3.6e-3,
        }
    }
}

/// Normalized 2-D Gaussian window (weights sum to 1).
pub fn gaussian_window(size: usize, sigma: f32) -> Tensor {
    let c = (size as f64 - 1.0) / 2.0;
    let s2 = 2.0 * (sigma as f64) * (sigma as f64);
    let mut raw = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - c;
            let dx = x as f64 - c;
            raw.push((-(dx * dx + dy * dy) / s2).exp());
        }
    }
    let sum: f64 = raw.iter().sum();
    let mut data: Vec<f32> = raw.iter().map(|v| (v / sum) as f32).collect();
    // fold the f32 rounding residue into the center weight so the
    // normalization holds at f32 precision too
    let residue = 1.0 - data.iter().map(|&v| v as f64).sum::<f64>();
    let center = (size / 2) * size + size / 2;
    data[center] = (data[center] as f64 + residue) as f32;
    Tensor::from_vec(&[size, size], data).expect("size*size data")
}

/// Full loss configuration for a training run.
#[derive(Clone, Debug)]
pub struct LossConfig {
    pub reconstruction: Reconstruction,
    pub lambda1: f32,
    pub lambda2: f32,
    pub extractor: ExtractorKind,
    pub convention: SsimConvention,
    /// When set, weight decay covers every trainable parameter instead
    /// of only convolution weights.
    pub decay_all: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            reconstruction: Reconstruction::L2,
            lambda1: 0.0,
            lambda2: 0.0,
            extractor: ExtractorKind::None,
            convention: SsimConvention::Paper,
            decay_all: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if self.lambda1 > 0.0 && self.extractor == ExtractorKind::None {
            return Err(Error::config(
                "perceptual weight > 0 requires a feature extractor",
            ));
        }
        Ok(())
    }
}

/// Half-sum of elementwise |true - pred|^power over all elements,
/// power 1 or 2.
pub fn pixel_loss(g: &mut Graph, y_true: NodeId, y_pred: NodeId, power: u32) -> Result<NodeId> {
    if g.value(y_true).shape() != g.value(y_pred).shape() {
        return Err(Error::shape(format!(
            "pixel_loss shapes differ: {:?} vs {:?}",
            g.value(y_true).shape(),
            g.value(y_pred).shape()
        )));
    }
    let diff = g.sub(y_true, y_pred)?;
    let contrib = match power {
        1 => g.abs(diff),
        2 => g.mul(diff, diff)?,
        _ => return Err(Error::arg(format!("pixel_loss power must be 1 or 2, got {power}"))),
    };
    let s = g.sum_all(contrib);
    Ok(g.mul_scalar(s, 0.5))
}

/// Structural dissimilarity 1 - SSIM.
///
/// Local means, variances and covariance come from sliding the
/// normalized Gaussian window over valid positions only (no padding);
/// the local map is averaged over all windows and frames.
pub fn dssim(
    g: &mut Graph,
    y_true: NodeId,
    y_pred: NodeId,
    params: &SsimParams,
    convention: SsimConvention,
) -> Result<NodeId> {
    if g.value(y_true).shape() != g.value(y_pred).shape() {
        return Err(Error::shape(format!(
            "dssim shapes differ: {:?} vs {:?}",
            g.value(y_true).shape(),
            g.value(y_pred).shape()
        )));
    }
    let [_, _, h, w] = g.value(y_true).dims4()?;
    let ks = params.window.shape()[0];
    if h < ks || w < ks {
        return Err(Error::shape(format!(
            "dssim image {h}x{w} smaller than {ks}x{ks} window"
        )));
    }

    let mu_t = g.window_corr(y_true, &params.window)?;
    let mu_p = g.window_corr(y_pred, &params.window)?;
    let tt = g.mul(y_true, y_true)?;
    let pp = g.mul(y_pred, y_pred)?;
    let tp = g.mul(y_true, y_pred)?;
    let e_tt = g.window_corr(tt, &params.window)?;
    let e_pp = g.window_corr(pp, &params.window)?;
    let e_tp = g.window_corr(tp, &params.window)?;

    let mu_t2 = g.mul(mu_t, mu_t)?;
    let mu_p2 = g.mul(mu_p, mu_p)?;
    let mu_tp = g.mul(mu_t, mu_p)?;
    let var_t = g.sub(e_tt, mu_t2)?;
    let var_p = g.sub(e_pp, mu_p2)?;
    let cov = g.sub(e_tp, mu_tp)?;

    let l_num = {
        let m2 = g.mul_scalar(mu_tp, 2.0);
        g.add_scalar(m2, params.c1)
    };
    let c_num = {
        let c2 = g.mul_scalar(cov, 2.0);
        g.add_scalar(c2, params.c2)
    };
    let l_den = {
        let s = g.add(mu_t2, mu_p2)?;
        g.add_scalar(s, params.c1)
    };
    let c_den = {
        let s = g.add(var_t, var_p)?;
        g.add_scalar(s, params.c2)
    };
    let num = g.mul(l_num, c_num)?;
    let den = g.mul(l_den, c_den)?;
    let ssim_map = g.div(num, den)?;
    let mean = g.mean_all(ssim_map);
    let scaled = match convention {
        SsimConvention::Paper => g.mul_scalar(mean, -0.5),
        SsimConvention::Standard => g.mul_scalar(mean, -1.0),
    };
    Ok(g.add_scalar(scaled, 1.0))
}

/// Half-sum of squared feature differences. The true branch should be a
/// constant node so gradient flows through the prediction only.
pub fn perceptual_loss(
    g: &mut Graph,
    y_true: NodeId,
    y_pred: NodeId,
    extractor: &FeatureExtractor,
) -> Result<NodeId> {
    let f_t = extractor.forward(g, y_true)?;
    let f_p = extractor.forward(g, y_pred)?;
    let diff = g.sub(f_t, f_p)?;
    let sq = g.mul(diff, diff)?;
    let s = g.sum_all(sq);
    Ok(g.mul_scalar(s, 0.5))
}

/// Half-sum of squares over the decayed parameter set: convolution and
/// upconvolution weights by default, everything trainable with
/// `decay_all`.
pub fn weight_decay(g: &mut Graph, store: &ParamStore, decay_all: bool) -> Result<NodeId> {
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable && (decay_all || p.name.ends_with(".weight")))
        .map(|(id, _)| id)
        .collect();
    let mut acc: Option<NodeId> = None;
    for id in ids {
        let p = g.param(store, id);
        let sq = g.mul(p, p)?;
        let s = g.sum_all(sq);
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s)?,
        });
    }
    let total = acc.unwrap_or_else(|| g.constant(Tensor::scalar(0.0)));
    Ok(g.mul_scalar(total, 0.5))
}

/// The combined objective's component nodes; `total` is what backward
/// runs on, the rest are for logging.
pub struct CombinedLoss {
    pub total: NodeId,
    pub recon: NodeId,
    pub percep: NodeId,
    pub reg: NodeId,
}

/// J = recon/m + lambda1 * percep/m + lambda2 * weight_decay.
pub fn combined_loss(
    g: &mut Graph,
    store: &ParamStore,
    y_true: NodeId,
    y_pred: NodeId,
    extractor: Option<&FeatureExtractor>,
    config: &LossConfig,
) -> Result<CombinedLoss> {
    config.validate()?;
    let m = g.value(y_pred).dims4()?[0] as f32;

    let raw_recon = match config.reconstruction {
        Reconstruction::L1 => pixel_loss(g, y_true, y_pred, 1)?,
        Reconstruction::L2 => pixel_loss(g, y_true, y_pred, 2)?,
        Reconstruction::Dssim => dssim(g, y_true, y_pred, &SsimParams::default(), config.convention)?,
    };
    let recon = g.mul_scalar(raw_recon, 1.0 / m);

    let percep = if config.lambda1 > 0.0 {
        let extractor = extractor.ok_or_else(|| {
            Error::config("perceptual weight > 0 but no extractor was built")
        })?;
        let raw = perceptual_loss(g, y_true, y_pred, extractor)?;
        g.mul_scalar(raw, config.lambda1 / m)
    } else {
        g.constant(Tensor::scalar(0.0))
    };

    let reg = if config.lambda2 > 0.0 {
        let raw = weight_decay(g, store, config.decay_all)?;
        g.mul_scalar(raw, config.lambda2)
    } else {
        g.constant(Tensor::scalar(0.0))
    };

    let partial = g.add(recon, percep)?;
    let total = g.add(partial, reg)?;
    Ok(CombinedLoss {
        total,
        recon,
        percep,
        reg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    fn pseudo(shape: &[usize], salt: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|i| {
                let v = (i as u64 + 1).wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(salt);
                ((v >> 33) as f32 / (1u64 << 31) as f32) - 1.0
            })
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn gaussian_window_normalized_symmetric_positive() {
        let w = gaussian_window(11, 1.5);
        let sum: f64 = w.data().iter().map(|&v| v as f64).sum();
        assert!((sum - 1.0).abs() < 1e-7, "sum {sum}");
        assert!(w.data().iter().all(|&v| v > 0.0));
        for y in 0..11 {
            for x in 0..11 {
                let a = w.data()[y * 11 + x];
                let b = w.data()[x * 11 + y];
                let c = w.data()[(10 - y) * 11 + (10 - x)];
                assert_eq!(a, b);
                assert_eq!(a, c);
            }
        }
    }

    #[test]
    fn pixel_loss_basics() {
        let mut g = Graph::new();
        let t = g.constant(pseudo(&[1, 1, 2, 2], 1));
        let loss = pixel_loss(&mut g, t, t, 2).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);

        // single pixel, true 0, pred 1, squared: 1/2
        let a = g.constant(Tensor::from_vec(&[1, 1, 1, 1], vec![0.0]).unwrap());
        let b = g.constant(Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap());
        let l2 = pixel_loss(&mut g, a, b, 2).unwrap();
        assert_eq!(g.value(l2).item(), 0.5);
    }

    #[test]
    fn pixel_loss_matches_loop_oracle() {
        let t = pseudo(&[2, 3, 4, 4], 10);
        let p = pseudo(&[2, 3, 4, 4], 20);
        for power in [1u32, 2] {
            let mut g = Graph::new();
            let tn = g.constant(t.clone());
            let pn = g.constant(p.clone());
            let loss = pixel_loss(&mut g, tn, pn, power).unwrap();
            let mut expect = 0.0f64;
            for (a, b) in t.data().iter().zip(p.data()) {
                expect += ((a - b).abs() as f64).powi(power as i32);
            }
            expect *= 0.5;
            assert!(
                (g.value(loss).item() as f64 - expect).abs() < 1e-5,
                "power {power}"
            );
        }
    }

    #[test]
    fn dssim_identical_images_by_convention() {
        let img = pseudo(&[1, 2, 16, 16], 3);
        let mut g = Graph::new();
        let a = g.constant(img.clone());
        let b = g.constant(img);
        let p = SsimParams::default();
        let d_paper = dssim(&mut g, a, b, &p, SsimConvention::Paper).unwrap();
        assert!((g.value(d_paper).item() - 0.5).abs() < 1e-6);
        let d_std = dssim(&mut g, a, b, &p, SsimConvention::Standard).unwrap();
        assert!(g.value(d_std).item().abs() < 1e-6);
    }

    #[test]
    fn dssim_rejects_small_images() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 1, 8, 8]));
        assert!(dssim(&mut g, a, a, &SsimParams::default(), SsimConvention::Paper).is_err());
    }

    #[test]
    fn dssim_standard_in_range() {
        let t = pseudo(&[1, 1, 16, 16], 5);
        let p = pseudo(&[1, 1, 16, 16], 6);
        let mut g = Graph::new();
        let a = g.constant(t);
        let b = g.constant(p);
        let d = dssim(&mut g, a, b, &SsimParams::default(), SsimConvention::Standard).unwrap();
        let v = g.value(d).item();
        assert!((0.0..=2.0).contains(&v), "dssim {v}");
    }

    #[test]
    fn weight_decay_values() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let zero = weight_decay(&mut g, &store, false).unwrap();
        assert_eq!(g.value(zero).item(), 0.0);

        store
            .register("w.weight", Tensor::from_vec(&[1], vec![2.0]).unwrap(), true)
            .unwrap();
        store.register("w.bias", Tensor::from_vec(&[1], vec![7.0]).unwrap(), true).unwrap();
        let mut g2 = Graph::new();
        let d = weight_decay(&mut g2, &store, false).unwrap();
        // biases excluded: 0.5 * 2^2 = 2
        assert_eq!(g2.value(d).item(), 2.0);
        let d_all = weight_decay(&mut g2, &store, true).unwrap();
        assert_eq!(g2.value(d_all).item(), 0.5 * (4.0 + 49.0));
    }

    #[test]
    fn weight_decay_matches_loop_oracle() {
        let mut store = ParamStore::new();
        store.register("a.weight", pseudo(&[4, 2, 3, 3], 1), true).unwrap();
        store.register("b.weight", pseudo(&[8], 2), true).unwrap();
        store.register("b.bias", pseudo(&[8], 3), true).unwrap();
        let mut g = Graph::new();
        let d = weight_decay(&mut g, &store, false).unwrap();
        let mut expect = 0.0f64;
        for (_, p) in store.iter() {
            if p.name.ends_with(".weight") {
                expect += p.value.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
            }
        }
        expect *= 0.5;
        assert!((g.value(d).item() as f64 - expect).abs() < 1e-5);
    }

    #[test]
    fn perceptual_zero_for_identical_and_positive_for_shifted() {
        let fx = FeatureExtractor::random(17);
        let img = pseudo(&[1, 1, 32, 32], 9);
        let mut g = Graph::new();
        let a = g.constant(img.clone());
        let l0 = perceptual_loss(&mut g, a, a, &fx).unwrap();
        assert_eq!(g.value(l0).item(), 0.0);

        let shifted = img.map(|v| v + 0.5);
        let b = g.constant(shifted);
        let l1 = perceptual_loss(&mut g, a, b, &fx).unwrap();
        assert!(g.value(l1).item() > 0.0);
    }

    #[test]
    fn combined_degenerate_weights() {
        let store = ParamStore::new();
        let t = pseudo(&[2, 3, 16, 16], 1);
        let p = pseudo(&[2, 3, 16, 16], 2);
        let config = LossConfig::default();

        let mut g = Graph::new();
        let tn = g.constant(t.clone());
        let pn = g.constant(p.clone());
        let combined = combined_loss(&mut g, &store, tn, pn, None, &config).unwrap();
        let pl = pixel_loss(&mut g, tn, pn, 2).unwrap();
        let expect = g.value(pl).item() / 2.0;
        assert!((g.value(combined.total).item() - expect).abs() < 1e-6);

        // identical prediction, lambda2 = 0 -> exactly zero
        let mut g2 = Graph::new();
        let tn2 = g2.constant(t.clone());
        let tp2 = g2.constant(t);
        let c2 = combined_loss(&mut g2, &store, tn2, tp2, None, &config).unwrap();
        assert_eq!(g2.value(c2.total).item(), 0.0);
    }

    #[test]
    fn combined_recomposes_from_terms() {
        let mut store = ParamStore::new();
        store.register("w.weight", pseudo(&[2, 1, 3, 3], 4), true).unwrap();
        let fx = FeatureExtractor::random(3);
        let config = LossConfig {
            lambda1: 1e-4,
            lambda2: 1e-5,
            extractor: ExtractorKind::RandomConv { seed: 3 },
            ..LossConfig::default()
        };
        let t = pseudo(&[1, 2, 32, 32], 7);
        let p = pseudo(&[1, 2, 32, 32], 8);

        let mut g = Graph::new();
        let tn = g.constant(t.clone());
        let pn = g.constant(p.clone());
        let c = combined_loss(&mut g, &store, tn, pn, Some(&fx), &config).unwrap();

        // recompute the three terms separately
        let mut g2 = Graph::new();
        let tn2 = g2.constant(t);
        let pn2 = g2.constant(p);
        let pl = pixel_loss(&mut g2, tn2, pn2, 2).unwrap();
        let pe = perceptual_loss(&mut g2, tn2, pn2, &fx).unwrap();
        let wd = weight_decay(&mut g2, &store, false).unwrap();
        let m = 1.0;
        let manual = g2.value(pl).item() / m
            + config.lambda1 * g2.value(pe).item() / m
            + config.lambda2 * g2.value(wd).item();
        let total = g.value(c.total).item();
        assert!(
            (total - manual).abs() <= 1e-6 * manual.abs().max(1.0),
            "{total} vs {manual}"
        );
        // and the logged parts sum to the total
        let parts = g.value(c.recon).item() + g.value(c.percep).item() + g.value(c.reg).item();
        assert!((parts - total).abs() <= f32::EPSILON * total.abs().max(1.0));
    }

    #[test]
    fn config_validation() {
        let mut c = LossConfig {
            lambda1: 1e-4,
            ..LossConfig::default()
        };
        assert!(c.validate().is_err());
        c.extractor = ExtractorKind::RandomConv { seed: 0 };
        assert!(c.validate().is_ok());
    }
}
