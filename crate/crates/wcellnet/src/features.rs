//! Deep feature extractor for the perceptual loss.
//!
//! The extractor is a fixed (never trained) stack of 3x3 convolutions,
//! ReLU and 2x2 max pooling whose channel ladder matches a VGG16 trunk
//! through its conv5_3 layer: output stride 16, 512 channels. Weights
//! come either from a seed-deterministic random init (the default,
//! ships with no external assets) or from a weights file in the
//! checkpoint record format with names `conv1_1.weight` ...
//! `conv5_3.bias`.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::he_normal;
use crate::model;
use crate::tensor::Tensor;

/// Channel ladder and convs-per-stage of the VGG16 trunk. Pooling
/// follows every stage except the last, leaving conv5_3 at stride 16.
const STAGES: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];

/// Which feature extractor the perceptual loss uses.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum ExtractorKind {
    /// No extractor; only valid when the perceptual weight is zero.
    #[default]
    None,
    /// Seed-deterministic random weights.
    RandomConv { seed: u64 },
    /// Weights imported from a file.
    Vgg16 { weights: PathBuf },
}

/// Name of the i-th conv of a stage, VGG16 style: conv<stage>_<idx>.
fn conv_name(stage: usize, idx: usize) -> String {
    format!("conv{}_{}", stage + 1, idx + 1)
}

pub struct FeatureExtractor {
    /// Per stage: the (weight, bias) of each conv.
    stages: Vec<Vec<(Tensor, Tensor)>>,
}

impl FeatureExtractor {
    /// Fixed random weights, deterministic for the seed.
    pub fn random(seed: u64) -> FeatureExtractor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::with_capacity(STAGES.len());
        let mut c_in = 3;
        for &(width, convs) in &STAGES {
            let mut stage = Vec::with_capacity(convs);
            for _ in 0..convs {
                let w = he_normal(&mut rng, &[width, c_in, 3, 3], c_in * 9);
                stage.push((w, Tensor::zeros(&[width])));
                c_in = width;
            }
            stages.push(stage);
        }
        FeatureExtractor { stages }
    }

    /// Imports conv1_1 .. conv5_3 weights from a record file.
    pub fn from_file(path: &Path) -> Result<FeatureExtractor> {
        let ckpt = model::load_checkpoint(path)?;
        let mut records: std::collections::HashMap<String, Tensor> =
            ckpt.records.into_iter().collect();
        let mut stages = Vec::with_capacity(STAGES.len());
        let mut c_in = 3;
        for (s, &(width, convs)) in STAGES.iter().enumerate() {
            let mut stage = Vec::with_capacity(convs);
            for i in 0..convs {
                let name = conv_name(s, i);
                let w = records
                    .remove(&format!("{name}.weight"))
                    .ok_or_else(|| Error::format(path, format!("missing record {name}.weight")))?;
                let b = records
                    .remove(&format!("{name}.bias"))
                    .ok_or_else(|| Error::format(path, format!("missing record {name}.bias")))?;
                if w.shape() != [width, c_in, 3, 3] {
                    return Err(Error::format(
                        path,
                        format!(
                            "{name}.weight has shape {:?}, expected {:?}",
                            w.shape(),
                            [width, c_in, 3, 3]
                        ),
                    ));
                }
                if b.shape() != [width] {
                    return Err(Error::format(
                        path,
                        format!("{name}.bias has shape {:?}, expected ({width},)", b.shape()),
                    ));
                }
                stage.push((w, b));
                c_in = width;
            }
            stages.push(stage);
        }
        Ok(FeatureExtractor { stages })
    }

    /// Builds one from the configured kind, or `None` for
    /// [`ExtractorKind::None`].
    pub fn build(kind: &ExtractorKind) -> Result<Option<FeatureExtractor>> {
        Ok(match kind {
            ExtractorKind::None => None,
            ExtractorKind::RandomConv { seed } => Some(FeatureExtractor::random(*seed)),
            ExtractorKind::Vgg16 { weights } => Some(FeatureExtractor::from_file(weights)?),
        })
    }

    /// Smallest input side the five-stage trunk accepts.
    pub const MIN_SIDE: usize = 16;

    /// The fixed (weight, bias) pairs per stage.
    pub fn stages(&self) -> &[Vec<(Tensor, Tensor)>] {
        &self.stages
    }

    /// Maps (m, frames, h, w) grayscale batches to (m*frames, 512,
    /// h/16, w/16) features. Each frame is treated as one image; the
    /// single channel is replicated to the three the trunk expects.
    pub fn forward(&self, g: &mut Graph, y: NodeId) -> Result<NodeId> {
        let [m, frames, h, w] = g.value(y).dims4()?;
        if h % 16 != 0 || w % 16 != 0 || h < Self::MIN_SIDE || w < Self::MIN_SIDE {
            return Err(Error::shape(format!(
                "feature extractor needs dims divisible by 16 and >= {}, got {h}x{w}",
                Self::MIN_SIDE
            )));
        }
        let flat = g.reshape(y, &[m * frames, 1, h, w])?;
        let mut x = g.concat_channels(&[flat, flat, flat])?;
        let last = self.stages.len() - 1;
        for (s, stage) in self.stages.iter().enumerate() {
            for (wt, bt) in stage {
                let wn = g.constant(wt.clone());
                let bn = g.constant(bt.clone());
                let c = g.conv2d(x, wn, bn)?;
                x = g.relu(c);
            }
            if s != last {
                x = g.maxpool2x2(x)?;
            }
        }
        Ok(x)
    }
}

/// Writes extractor weights in the record-file layout `from_file`
/// reads. The container header carries a placeholder config.
pub fn save_feature_weights(path: &Path, records: &[(String, Tensor)]) -> Result<()> {
    let placeholder = model::ModelConfig::new(1, 1, 16, 16)?;
    model::save_checkpoint(path, &placeholder, &crate::params::ParamStore::new(), records)
}

/// The full list of (name, shape) records a weights file must provide.
pub fn expected_records() -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut c_in = 3;
    for (s, &(width, convs)) in STAGES.iter().enumerate() {
        for i in 0..convs {
            let name = conv_name(s, i);
            out.push((format!("{name}.weight"), vec![width, c_in, 3, 3]));
            out.push((format!("{name}.bias"), vec![width]));
            c_in = width;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn random_extractor_is_deterministic_and_shapes_match() {
        let a = FeatureExtractor::random(5);
        let b = FeatureExtractor::random(5);
        for (sa, sb) in a.stages.iter().zip(&b.stages) {
            for ((wa, _), (wb, _)) in sa.iter().zip(sb) {
                assert_eq!(wa.data(), wb.data());
            }
        }

        let mut g = Graph::new();
        let y = g.constant(Tensor::full(&[1, 2, 32, 32], 0.1));
        let f = a.forward(&mut g, y).unwrap();
        assert_eq!(g.value(f).shape(), &[2, 512, 2, 2]);
    }

    #[test]
    fn weight_file_round_trip() {
        let dir = std::env::temp_dir().join(format!("wcn_vgg_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("weights.wcnc");

        let records: Vec<(String, Tensor)> = expected_records()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<f32> = (0..n).map(|i| ((i % 11) as f32 - 5.0) * 1e-3).collect();
                (name, Tensor::from_vec(&shape, data).unwrap())
            })
            .collect();
        save_feature_weights(&path, &records).unwrap();

        let fx = FeatureExtractor::from_file(&path).unwrap();
        let mut g = Graph::new();
        let y = g.constant(Tensor::full(&[1, 1, 32, 32], 0.5));
        let f = fx.forward(&mut g, y).unwrap();
        assert_eq!(g.value(f).shape(), &[1, 512, 2, 2]);

        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn missing_record_is_a_format_error() {
        let dir = std::env::temp_dir().join(format!("wcn_vggbad_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("weights.wcnc");
        save_feature_weights(&path, &[]).unwrap();
        assert!(FeatureExtractor::from_file(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
