//! The interpolation network: two four-block encoders over the first
//! and last frames, one four-block decoder with channel-reversed skip
//! concatenations, and a convolutional head producing the intermediate
//! frames. Also owns the binary checkpoint format.
//!
//! Wiring per forward pass, for base width `k` and block outputs taken
//! after each encoder's 2x2 max pooling:
//!
//! ```text
//! enc blocks (both encoders): 1->k, k->2k, 2k->4k, 4k->8k   at h/2..h/16
//! decoder seed:  concat(e1[4], reverse(e2[4]))              16k @ h/16
//! dec block 1:   16k -> 8k                                  @ h/8
//! dec block b>1: concat(e1[4-b+1... ], state, reverse(e2))  heads toward h
//! head:          3x3 conv 2k -> IF, tanh
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, NodeId};
use crate::layers::{xavier_uniform, ConvBlock, UpConvBlock, UpsampleMode};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BLOCKS: usize = 4;

/// Structural description of a network; fully determines the parameter
/// set together with the upsampling mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Base channel count of the first encoder block; doubles per level.
    pub k: usize,
    /// Number of intermediate frames the head produces.
    pub frames: usize,
    /// Nominal input height/width; any multiple of 16 works at runtime.
    pub input_h: usize,
    pub input_w: usize,
    pub upsample: UpsampleMode,
}

impl ModelConfig {
    pub fn new(k: usize, frames: usize, input_h: usize, input_w: usize) -> Result<Self> {
        let c = ModelConfig {
            k,
            frames,
            input_h,
            input_w,
            upsample: UpsampleMode::Transposed,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k must be >= 1"));
        }
        if !(1..=7).contains(&self.frames) {
            return Err(Error::config(format!(
                "intermediate frame count must be in 1..=7, got {}",
                self.frames
            )));
        }
        if self.input_h % 16 != 0 || self.input_w % 16 != 0 {
            return Err(Error::config(format!(
                "input dims must be divisible by 16, got {}x{}",
                self.input_h, self.input_w
            )));
        }
        Ok(())
    }

    /// Encoder block output widths: k, 2k, 4k, 8k.
    pub fn encoder_widths(&self) -> [usize; BLOCKS] {
        [self.k, 2 * self.k, 4 * self.k, 8 * self.k]
    }

    /// Decoder block output widths: 8k, 8k, 4k, 2k. Chosen so the total
    /// parameter count tracks the reference table for this architecture
    /// family; the spatial mirror (8k, 4k, 2k, k) undershoots it badly.
    pub fn decoder_widths(&self) -> [usize; BLOCKS] {
        [8 * self.k, 8 * self.k, 4 * self.k, 2 * self.k]
    }
}

pub struct WCellNet {
    pub config: ModelConfig,
    enc1: Vec<ConvBlock>,
    enc2: Vec<ConvBlock>,
    dec: Vec<UpConvBlock>,
    head_w: ParamId,
    head_b: ParamId,
}

impl WCellNet {
    /// Builds the network and a freshly initialized parameter store.
    /// Deterministic for a given seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<(WCellNet, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc_w = config.encoder_widths();
        let dec_w = config.decoder_widths();

        let mut enc1 = Vec::with_capacity(BLOCKS);
        let mut enc2 = Vec::with_capacity(BLOCKS);
        for (which, enc) in [(1usize, &mut enc1), (2usize, &mut enc2)] {
            let mut c_in = 1;
            for (b, &c_out) in enc_w.iter().enumerate() {
                enc.push(ConvBlock::init(
                    &mut store,
                    &format!("enc{which}.b{}", b + 1),
                    c_in,
                    c_out,
                    &mut rng,
                )?);
                c_in = c_out;
            }
        }

        let mut dec = Vec::with_capacity(BLOCKS);
        let mut state = 2 * enc_w[BLOCKS - 1]; // both encoders' deepest maps
        for (b, &c_out) in dec_w.iter().enumerate() {
            let c_in = if b == 0 {
                state
            } else {
                // skip maps from both encoders at the matching level
                state + 2 * enc_w[BLOCKS - 1 - b]
            };
            dec.push(UpConvBlock::init(
                &mut store,
                &format!("dec.b{}", b + 1),
                c_in,
                c_out,
                c_out,
                config.upsample,
                &mut rng,
            )?);
            state = c_out;
        }

        let head_in = dec_w[BLOCKS - 1];
        let head_w = store.register(
            "head.weight",
            xavier_uniform(
                &mut rng,
                &[config.frames, head_in, 3, 3],
                head_in * 9,
                config.frames * 9,
            ),
            true,
        )?;
        let head_b = store.register("head.bias", Tensor::zeros(&[config.frames]), true)?;

        Ok((
            WCellNet {
                config,
                enc1,
                enc2,
                dec,
                head_w,
                head_b,
            },
            store,
        ))
    }

    /// Runs one encoder, returning each block's post-pool feature maps.
    pub fn encoder_features(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        which: usize,
        x: NodeId,
        mode: Mode,
    ) -> Result<Vec<NodeId>> {
        let blocks = match which {
            1 => &self.enc1,
            2 => &self.enc2,
            _ => return Err(Error::arg("encoder index must be 1 or 2")),
        };
        let mut features = Vec::with_capacity(BLOCKS);
        let mut cur = x;
        for block in blocks {
            let conv = block.forward(g, store, cur, mode)?;
            cur = g.maxpool2x2(conv)?;
            features.push(cur);
        }
        Ok(features)
    }

    /// The decoder's seed tensor: both encoders' deepest maps, with the
    /// second encoder's channels reversed before concatenation.
    pub fn decoder_seed(
        &self,
        g: &mut Graph,
        e1: &[NodeId],
        e2: &[NodeId],
    ) -> Result<NodeId> {
        let rev = g.reverse_channels(e2[BLOCKS - 1])?;
        g.concat_channels(&[e1[BLOCKS - 1], rev])
    }

    fn check_inputs(&self, g: &Graph, x_f: NodeId, x_l: NodeId) -> Result<()> {
        let a = g.value(x_f).shape();
        let b = g.value(x_l).shape();
        if a != b {
            return Err(Error::shape(format!(
                "first/last frame shapes differ: {a:?} vs {b:?}"
            )));
        }
        let [_, c, h, w] = g.value(x_f).dims4()?;
        if c != 1 {
            return Err(Error::shape(format!("expected single-channel input, got {c}")));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::shape(format!(
                "spatial dims must be divisible by 16, got {h}x{w}"
            )));
        }
        Ok(())
    }

    /// Full forward pass: (m, 1, h, w) first/last frames in [-1, 1] to
    /// (m, IF, h, w) predictions in (-1, 1).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        x_f: NodeId,
        x_l: NodeId,
        mode: Mode,
    ) -> Result<NodeId> {
        self.check_inputs(g, x_f, x_l)?;
        let e1 = self.encoder_features(g, store, 1, x_f, mode)?;
        let e2 = self.encoder_features(g, store, 2, x_l, mode)?;

        let seed = self.decoder_seed(g, &e1, &e2)?;
        let mut state = self.dec[0].forward(g, store, seed)?;
        for b in 1..BLOCKS {
            let skip = BLOCKS - 1 - b; // encoder blocks 3, 2, 1
            let rev = g.reverse_channels(e2[skip])?;
            let cat = g.concat_channels(&[e1[skip], state, rev])?;
            state = self.dec[b].forward(g, store, cat)?;
        }

        let hw = g.param(store, self.head_w);
        let hb = g.param(store, self.head_b);
        let logits = g.conv2d(state, hw, hb)?;
        Ok(g.tanh(logits))
    }

    /// Total trainable scalar count (weights, biases, gamma/beta).
    pub fn count_parameters(&self, store: &ParamStore) -> usize {
        store.trainable_count()
    }
}

// --- checkpoint format ----------------------------------------------------
//
// magic "WCNC", u16 version = 1, u16 flags, then the config as five
// u32 little-endian values (k, IF, B, h, w), then a u32 record count
// and records of {u16 name_len, name, u8 rank, u32 dims[rank], f32
// data}. Flag bit 0: trailing optimizer records present; bit 1: the
// nearest-neighbour upsampling variant.

const MAGIC: &[u8; 4] = b"WCNC";
const VERSION: u16 = 1;
const FLAG_EXTRA: u16 = 1;
const FLAG_NEAREST: u16 = 2;

/// Raw checkpoint contents: config plus named tensors in file order.
pub struct Checkpoint {
    pub config: ModelConfig,
    pub records: Vec<(String, Tensor)>,
}

/// Writes the store (in registration order) and any extra records
/// (optimizer state) after it.
pub fn save_checkpoint(
    path: &Path,
    config: &ModelConfig,
    store: &ParamStore,
    extra: &[(String, Tensor)],
) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    let mut flags = 0u16;
    if !extra.is_empty() {
        flags |= FLAG_EXTRA;
    }
    if config.upsample == UpsampleMode::Nearest {
        flags |= FLAG_NEAREST;
    }
    f.write_all(&flags.to_le_bytes())?;
    for v in [
        config.k as u32,
        config.frames as u32,
        BLOCKS as u32,
        config.input_h as u32,
        config.input_w as u32,
    ] {
        f.write_all(&v.to_le_bytes())?;
    }
    let count = store.len() + extra.len();
    f.write_all(&(count as u32).to_le_bytes())?;
    for (_, p) in store.iter() {
        write_record(&mut f, &p.name, &p.value)?;
    }
    for (name, t) in extra {
        write_record(&mut f, name, t)?;
    }
    f.flush()?;
    Ok(())
}

fn write_record(f: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    let bytes = name.as_bytes();
    f.write_all(&(bytes.len() as u16).to_le_bytes())?;
    f.write_all(bytes)?;
    f.write_all(&[t.rank() as u8])?;
    for &d in t.shape() {
        f.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in t.data() {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = BufReader::new(File::open(path)?);
    let bad = |reason: &str| Error::format(path, reason);

    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u16(&mut f).map_err(|_| bad("truncated header"))?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let flags = read_u16(&mut f).map_err(|_| bad("truncated header"))?;
    let mut cfg = [0u32; 5];
    for v in cfg.iter_mut() {
        *v = read_u32(&mut f).map_err(|_| bad("truncated config"))?;
    }
    if cfg[2] as usize != BLOCKS {
        return Err(bad(&format!("unsupported block count {}", cfg[2])));
    }
    let mut config = ModelConfig::new(cfg[0] as usize, cfg[1] as usize, cfg[3] as usize, cfg[4] as usize)
        .map_err(|e| bad(&format!("bad config: {e}")))?;
    if flags & FLAG_NEAREST != 0 {
        config.upsample = UpsampleMode::Nearest;
    }

    let count = read_u32(&mut f).map_err(|_| bad("truncated record count"))? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut f).map_err(|_| bad("truncated record"))? as usize;
        let mut name = vec![0u8; name_len];
        f.read_exact(&mut name).map_err(|_| bad("truncated record name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("record name is not UTF-8"))?;
        let mut rank = [0u8; 1];
        f.read_exact(&mut rank).map_err(|_| bad("truncated record rank"))?;
        let rank = rank[0] as usize;
        if rank > crate::tensor::MAX_RANK {
            return Err(bad(&format!("record {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut f).map_err(|_| bad("truncated record dims"))? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0f32; n];
        let mut buf = [0u8; 4];
        for v in data.iter_mut() {
            f.read_exact(&mut buf).map_err(|_| bad("truncated record data"))?;
            *v = f32::from_le_bytes(buf);
        }
        records.push((
            name,
            Tensor::from_vec(&shape, data).map_err(|e| bad(&format!("bad record shape: {e}")))?,
        ));
    }
    Ok(Checkpoint { config, records })
}

/// Rebuilds a network and store from a checkpoint. Records prefixed
/// `adam.` are returned separately (optimizer state); any other name
/// that is not a model parameter is an error, as is a missing one.
pub fn rebuild(ckpt: Checkpoint) -> Result<(WCellNet, ParamStore, Vec<(String, Tensor)>)> {
    let (net, mut store) = WCellNet::init(ckpt.config, 0)?;
    let mut filled = vec![false; store.len()];
    let mut extra = Vec::new();
    for (name, tensor) in ckpt.records {
        if name.starts_with("adam.") {
            extra.push((name, tensor));
            continue;
        }
        let id = store
            .id(&name)
            .ok_or_else(|| Error::arg(format!("unknown parameter name {name:?} in checkpoint")))?;
        if store.value(id).shape() != tensor.shape() {
            return Err(Error::shape(format!(
                "checkpoint record {name:?} has shape {:?}, model expects {:?}",
                tensor.shape(),
                store.value(id).shape()
            )));
        }
        *store.value_mut(id) = tensor;
        filled[id.0] = true;
    }
    if let Some((_, p)) = store.iter().find(|(id, _)| !filled[id.0]) {
        return Err(Error::arg(format!(
            "checkpoint is missing parameter {:?}",
            p.name
        )));
    }
    Ok((net, store, extra))
}

fn read_u16(f: &mut impl Read) -> std::io::Result<u16> {
    let mut b = [0u8; 2];
    f.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(f: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    f.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
