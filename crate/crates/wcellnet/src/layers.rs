//! Composable network blocks: the encoder convolutional block and the
//! decoder upconvolutional block, plus parameter initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::graph::{Graph, Mode, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Fan-in scaled normal init for weights feeding ReLU activations.
pub fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f32).sqrt();
    let dist = Normal::new(0.0f32, std).expect("std > 0");
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(shape, data).expect("shape/data agree")
}

/// Uniform init over +-sqrt(6 / (fan_in + fan_out)) for weights feeding
/// Tanh activations.
pub fn xavier_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).expect("shape/data agree")
}

/// How an upconvolutional block doubles the spatial resolution.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub enum UpsampleMode {
    /// Learned 2x2 transposed convolution with stride 2.
    #[default]
    Transposed,
    /// Nearest-neighbour doubling followed by a 3x3 convolution.
    Nearest,
}

/// Two 3x3 same-padding convolutions, each followed by batch
/// normalization and ReLU. Preserves spatial dims.
pub struct ConvBlock {
    w1: ParamId,
    b1: ParamId,
    gamma1: ParamId,
    beta1: ParamId,
    rm1: ParamId,
    rv1: ParamId,
    w2: ParamId,
    b2: ParamId,
    gamma2: ParamId,
    beta2: ParamId,
    rm2: ParamId,
    rv2: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvBlock {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ConvBlock> {
        let reg_bn = |store: &mut ParamStore, p: &str| -> Result<(ParamId, ParamId, ParamId, ParamId)> {
            Ok((
                store.register(&format!("{p}.gamma"), Tensor::full(&[out_channels], 1.0), true)?,
                store.register(&format!("{p}.beta"), Tensor::zeros(&[out_channels]), true)?,
                store.register(
                    &format!("{p}.running_mean"),
                    Tensor::zeros(&[out_channels]),
                    false,
                )?,
                store.register(
                    &format!("{p}.running_var"),
                    Tensor::full(&[out_channels], 1.0),
                    false,
                )?,
            ))
        };

        let w1 = store.register(
            &format!("{prefix}.conv1.weight"),
            he_normal(rng, &[out_channels, in_channels, 3, 3], in_channels * 9),
            true,
        )?;
        let b1 = store.register(&format!("{prefix}.conv1.bias"), Tensor::zeros(&[out_channels]), true)?;
        let (gamma1, beta1, rm1, rv1) = reg_bn(store, &format!("{prefix}.bn1"))?;
        let w2 = store.register(
            &format!("{prefix}.conv2.weight"),
            he_normal(rng, &[out_channels, out_channels, 3, 3], out_channels * 9),
            true,
        )?;
        let b2 = store.register(&format!("{prefix}.conv2.bias"), Tensor::zeros(&[out_channels]), true)?;
        let (gamma2, beta2, rm2, rv2) = reg_bn(store, &format!("{prefix}.bn2"))?;

        Ok(ConvBlock {
            w1,
            b1,
            gamma1,
            beta1,
            rm1,
            rv1,
            w2,
            b2,
            gamma2,
            beta2,
            rm2,
            rv2,
            in_channels,
            out_channels,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        x: NodeId,
        mode: Mode,
    ) -> Result<NodeId> {
        let w1 = g.param(store, self.w1);
        let b1 = g.param(store, self.b1);
        let c1 = g.conv2d(x, w1, b1)?;
        let ga1 = g.param(store, self.gamma1);
        let be1 = g.param(store, self.beta1);
        let n1 = g.batch_norm(c1, ga1, be1, store, self.rm1, self.rv1, mode)?;
        let a1 = g.relu(n1);

        let w2 = g.param(store, self.w2);
        let b2 = g.param(store, self.b2);
        let c2 = g.conv2d(a1, w2, b2)?;
        let ga2 = g.param(store, self.gamma2);
        let be2 = g.param(store, self.beta2);
        let n2 = g.batch_norm(c2, ga2, be2, store, self.rm2, self.rv2, mode)?;
        Ok(g.relu(n2))
    }
}

/// One 2x upsampling step (transposed conv or nearest + conv) followed
/// by a 3x3 convolution and Tanh. Doubles spatial dims.
pub struct UpConvBlock {
    up_w: ParamId,
    up_b: ParamId,
    conv_w: ParamId,
    conv_b: ParamId,
    mode: UpsampleMode,
    pub in_channels: usize,
    pub up_channels: usize,
    pub out_channels: usize,
}

impl UpConvBlock {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        up_channels: usize,
        out_channels: usize,
        mode: UpsampleMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<UpConvBlock> {
        let up_w = match mode {
            UpsampleMode::Transposed => store.register(
                &format!("{prefix}.up.weight"),
                xavier_uniform(
                    rng,
                    &[in_channels, up_channels, 2, 2],
                    in_channels * 4,
                    up_channels * 4,
                ),
                true,
            )?,
            UpsampleMode::Nearest => store.register(
                &format!("{prefix}.up.weight"),
                xavier_uniform(
                    rng,
                    &[up_channels, in_channels, 3, 3],
                    in_channels * 9,
                    up_channels * 9,
                ),
                true,
            )?,
        };
        let up_b = store.register(&format!("{prefix}.up.bias"), Tensor::zeros(&[up_channels]), true)?;
        let conv_w = store.register(
            &format!("{prefix}.conv.weight"),
            xavier_uniform(
                rng,
                &[out_channels, up_channels, 3, 3],
                up_channels * 9,
                out_channels * 9,
            ),
            true,
        )?;
        let conv_b = store.register(&format!("{prefix}.conv.bias"), Tensor::zeros(&[out_channels]), true)?;
        Ok(UpConvBlock {
            up_w,
            up_b,
            conv_w,
            conv_b,
            mode,
            in_channels,
            up_channels,
            out_channels,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &mut ParamStore, x: NodeId) -> Result<NodeId> {
        let uw = g.param(store, self.up_w);
        let ub = g.param(store, self.up_b);
        let up = match self.mode {
            UpsampleMode::Transposed => g.conv_transpose2d(x, uw, ub)?,
            UpsampleMode::Nearest => {
                let n = g.nearest_up2(x)?;
                g.conv2d(n, uw, ub)?
            }
        };
        let cw = g.param(store, self.conv_w);
        let cb = g.param(store, self.conv_b);
        let c = g.conv2d(up, cw, cb)?;
        Ok(g.tanh(c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn init_is_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = he_normal(&mut r1, &[16, 1, 3, 3], 9);
        let b = he_normal(&mut r2, &[16, 1, 3, 3], 9);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn he_std_close_to_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let w = he_normal(&mut rng, &[16, 1, 3, 3], 9);
        let n = w.numel() as f32;
        let mean: f32 = w.data().iter().sum::<f32>() / n;
        let var: f32 = w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let target = (2.0f32 / 9.0).sqrt();
        let std = var.sqrt();
        assert!(
            (std - target).abs() < 0.3 * target,
            "std {std} vs target {target}"
        );
    }

    #[test]
    fn conv_block_shape_and_nonnegative() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = ConvBlock::init(&mut store, "blk", 1, 16, &mut rng).unwrap();

        // biases all zero at init
        for (_, p) in store.iter() {
            if p.name.ends_with(".bias") {
                assert!(p.value.data().iter().all(|&v| v == 0.0));
            }
        }

        let mut g = Graph::new();
        let data: Vec<f32> = (0..2 * 32 * 32).map(|i| ((i % 13) as f32 - 6.0) / 6.0).collect();
        let x = g.constant(Tensor::from_vec(&[2, 1, 32, 32], data).unwrap());
        let y = block.forward(&mut g, &mut store, x, Mode::Train).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 16, 32, 32]);
        assert!(g.value(y).data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn conv_block_param_count_formula() {
        // 9*cin*cout + cout + 9*cout^2 + cout + 4*cout
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (cin, cout) = (3, 10);
        ConvBlock::init(&mut store, "blk", cin, cout, &mut rng).unwrap();
        let expect = 9 * cin * cout + cout + 9 * cout * cout + cout + 4 * cout;
        assert_eq!(store.trainable_count(), expect);
    }

    #[test]
    fn eval_forward_is_pure() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = ConvBlock::init(&mut store, "blk", 2, 4, &mut rng).unwrap();
        let data: Vec<f32> = (0..2 * 8 * 8).map(|i| (i as f32).sin()).collect();
        let x_t = Tensor::from_vec(&[1, 2, 8, 8], data).unwrap();

        let mut g1 = Graph::new();
        let x1 = g1.constant(x_t.clone());
        let y1 = block.forward(&mut g1, &mut store, x1, Mode::Eval).unwrap();
        let out1 = g1.value(y1).clone();

        let mut g2 = Graph::new();
        let x2 = g2.constant(x_t);
        let y2 = block.forward(&mut g2, &mut store, x2, Mode::Eval).unwrap();
        assert_eq!(out1.data(), g2.value(y2).data());
    }

    #[test]
    fn upconv_block_doubles_dims_and_bounds_output() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let block =
            UpConvBlock::init(&mut store, "up", 64, 32, 32, UpsampleMode::Transposed, &mut rng)
                .unwrap();
        let mut g = Graph::new();
        let data: Vec<f32> = (0..64 * 8 * 8).map(|i| ((i % 7) as f32 - 3.0) / 3.0).collect();
        let x = g.constant(Tensor::from_vec(&[1, 64, 8, 8], data).unwrap());
        let y = block.forward(&mut g, &mut store, x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 32, 16, 16]);
        assert!(g.value(y).data().iter().all(|&v| v.abs() < 1.0));
    }

    #[test]
    fn upconv_gradients_reach_every_param() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let block =
            UpConvBlock::init(&mut store, "up", 3, 2, 2, UpsampleMode::Transposed, &mut rng)
                .unwrap();
        let mut g = Graph::new();
        let data: Vec<f32> = (0..3 * 4 * 4).map(|i| ((i * 31 % 17) as f32 - 8.0) / 8.0).collect();
        let x = g.constant(Tensor::from_vec(&[1, 3, 4, 4], data).unwrap());
        let y = block.forward(&mut g, &mut store, x).unwrap();
        let loss = g.sum_all(y);
        g.backward(loss, &mut store).unwrap();
        for (_, p) in store.iter() {
            if p.trainable {
                assert!(
                    p.grad.data().iter().any(|&v| v != 0.0),
                    "no gradient reached {}",
                    p.name
                );
            }
        }
    }
}
