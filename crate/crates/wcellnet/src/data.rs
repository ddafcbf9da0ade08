//! Dataset ingestion and generation: video stacks, sliding-window
//! sample extraction, split bookkeeping, augmentation, and a synthetic
//! fluorescence-microscopy sequence generator for desk-scale runs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// A grayscale time-lapse video: n_frames planes of height x width
/// 8-bit intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoStack {
    pub id: String,
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    data: Vec<u8>,
}

impl VideoStack {
    pub fn new(id: impl Into<String>, n_frames: usize, height: usize, width: usize, data: Vec<u8>) -> Result<VideoStack> {
        if data.len() != n_frames * height * width {
            return Err(Error::shape(format!(
                "stack of {n_frames}x{height}x{width} needs {} bytes, got {}",
                n_frames * height * width,
                data.len()
            )));
        }
        Ok(VideoStack {
            id: id.into(),
            n_frames,
            height,
            width,
            data,
        })
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        let plane = self.height * self.width;
        &self.data[i * plane..(i + 1) * plane]
    }

    /// Frame as f32 on the raw [0, 255] scale.
    pub fn frame_f32(&self, i: usize) -> Vec<f32> {
        self.frame(i).iter().map(|&v| v as f32).collect()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }
}

/// One training sample: consecutive frames (first, intermediates, last)
/// on the raw [0, 255] scale.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSample {
    pub first: Vec<f32>,
    pub intermediate: Vec<Vec<f32>>,
    pub last: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub video: usize,
    pub start: usize,
}

/// Position of one window within a stack collection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowRef {
    pub video: usize,
    pub start: usize,
}

/// Window bookkeeping: IF intermediates means windows of IF + 2
/// consecutive frames, slid with stride 1.
pub fn window_count(n_frames: usize, frames: usize) -> Option<usize> {
    n_frames.checked_sub(frames + 1)
}

/// All windows of a stack, in order.
pub fn extract_windows(video_index: usize, stack: &VideoStack, frames: usize) -> Result<Vec<WindowRef>> {
    match window_count(stack.n_frames, frames) {
        Some(count) if count >= 1 => Ok((0..count)
            .map(|start| WindowRef {
                video: video_index,
                start,
            })
            .collect()),
        _ => Err(Error::arg(format!(
            "stack {:?} has {} frames, needs at least {} for {} intermediates",
            stack.id,
            stack.n_frames,
            frames + 2,
            frames
        ))),
    }
}

/// A windowed dataset over a set of stacks.
pub struct Dataset {
    pub stacks: Vec<VideoStack>,
    pub frames: usize,
    pub windows: Vec<WindowRef>,
}

impl Dataset {
    pub fn from_stacks(stacks: Vec<VideoStack>, frames: usize) -> Result<Dataset> {
        if stacks.is_empty() {
            return Err(Error::arg("dataset needs at least one stack"));
        }
        let (h, w) = (stacks[0].height, stacks[0].width);
        let mut windows = Vec::new();
        for (i, s) in stacks.iter().enumerate() {
            if (s.height, s.width) != (h, w) {
                return Err(Error::shape(format!(
                    "stack {:?} is {}x{}, expected {}x{}",
                    s.id, s.height, s.width, h, w
                )));
            }
            windows.extend(extract_windows(i, s, frames)?);
        }
        Ok(Dataset {
            stacks,
            frames,
            windows,
        })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn height(&self) -> usize {
        self.stacks[0].height
    }

    pub fn width(&self) -> usize {
        self.stacks[0].width
    }

    /// Copies one window out as a sample.
    pub fn materialize(&self, index: usize) -> FrameSample {
        let w = self.windows[index];
        let stack = &self.stacks[w.video];
        FrameSample {
            first: stack.frame_f32(w.start),
            intermediate: (1..=self.frames)
                .map(|k| stack.frame_f32(w.start + k))
                .collect(),
            last: stack.frame_f32(w.start + self.frames + 1),
            height: stack.height,
            width: stack.width,
            video: w.video,
            start: w.start,
        }
    }
}

/// Random 70-15-15 style split. Validation and test get
/// floor(ratio * n) elements each, training the remainder; partitions
/// are disjoint and exhaustive.
pub fn split_indices(
    n: usize,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let (r_train, r_val, r_test) = ratios;
    if !(0.999..=1.001).contains(&(r_train + r_val + r_test)) {
        return Err(Error::arg(format!(
            "split ratios must sum to 1, got {ratios:?}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let n_val = (r_val * n as f64).floor() as usize;
    let n_test = (r_test * n as f64).floor() as usize;
    let n_train = n - n_val - n_test;
    let train = order[..n_train].to_vec();
    let val = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..].to_vec();
    Ok((train, val, test))
}

/// Per-sample augmentation parameters; one draw applies identically to
/// every frame of the sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    /// Additive shift as a fraction of the [0, 255] dynamic range.
    pub brightness: f32,
    /// Multiplicative contrast factor about mid-gray.
    pub contrast: f32,
    pub lr_flip: bool,
    pub ud_flip: bool,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            brightness: 0.0,
            contrast: 1.0,
            lr_flip: false,
            ud_flip: false,
        }
    }

    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        AugmentParams {
            brightness: rng.gen_range(-0.1..=0.1),
            contrast: rng.gen_range(0.8..=1.2),
            lr_flip: rng.gen_bool(0.5),
            ud_flip: rng.gen_bool(0.5),
        }
    }
}

fn flip_lr(frame: &mut [f32], h: usize, w: usize) {
    for y in 0..h {
        frame[y * w..(y + 1) * w].reverse();
    }
}

fn flip_ud(frame: &mut [f32], h: usize, w: usize) {
    for y in 0..h / 2 {
        for x in 0..w {
            frame.swap(y * w + x, (h - 1 - y) * w + x);
        }
    }
}

fn augment_frame(frame: &mut [f32], h: usize, w: usize, p: &AugmentParams) {
    let shift = p.brightness * 255.0;
    for v in frame.iter_mut() {
        *v = ((*v - 127.5) * p.contrast + 127.5 + shift).clamp(0.0, 255.0);
    }
    if p.lr_flip {
        flip_lr(frame, h, w);
    }
    if p.ud_flip {
        flip_ud(frame, h, w);
    }
}

/// Applies contrast, then brightness, clamps to [0, 255], then flips;
/// the same parameters hit every frame so targets stay spatially
/// consistent with the inputs.
pub fn augment(sample: &FrameSample, params: &AugmentParams) -> FrameSample {
    let (h, w) = (sample.height, sample.width);
    let mut out = sample.clone();
    augment_frame(&mut out.first, h, w, params);
    for f in out.intermediate.iter_mut() {
        augment_frame(f, h, w, params);
    }
    augment_frame(&mut out.last, h, w, params);
    out
}

/// How synthetic cell centroids move between frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Motion {
    /// Independent Gaussian steps of the given std per frame and axis.
    Brownian { sigma: f32 },
    /// Constant per-cell velocity with speed drawn from the range;
    /// cells reflect at the frame margins.
    Linear { min_speed: f32, max_speed: f32 },
}

/// Generator settings for synthetic fluorescence sequences.
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub n_videos: usize,
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range for the number of cells per video.
    pub cell_count: (usize, usize),
    pub seed: u64,
    /// Exponential intensity decay per frame (photobleaching).
    pub bleach_rate: f32,
    pub motion: Motion,
    /// Per-cell per-frame probability of starting a transient burst
    /// (3-10x intensity for a few frames).
    pub burst_prob: f64,
    /// Shot-noise scale; 0 disables noise.
    pub noise: f32,
    pub background: f32,
}

impl SynthConfig {
    pub fn new(
        n_videos: usize,
        n_frames: usize,
        height: usize,
        width: usize,
        cell_count: (usize, usize),
        seed: u64,
    ) -> SynthConfig {
        SynthConfig {
            n_videos,
            n_frames,
            height,
            width,
            cell_count,
            seed,
            bleach_rate: 0.002,
            motion: Motion::Brownian { sigma: 0.5 },
            burst_prob: 0.003,
            noise: 1.0,
            background: 12.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height % 16 != 0 || self.width % 16 != 0 {
            return Err(Error::arg(format!(
                "synthetic frames must be multiples of 16, got {}x{}",
                self.height, self.width
            )));
        }
        if self.cell_count.0 > self.cell_count.1 {
            return Err(Error::arg("cell count range is inverted"));
        }
        Ok(())
    }
}

struct Cell {
    x: f32,
    y: f32,
    vx: f32,
    vy: f32,
    sigma: f32,
    peak: f32,
    burst_left: usize,
    burst_gain: f32,
}

pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Deterministic synthetic sequences: Gaussian-blob cells over a noisy
/// background, with centroid drift, global photobleaching decay, and
/// occasional intensity bursts.
pub fn synth_generate(config: &SynthConfig) -> Result<Vec<VideoStack>> {
    config.validate()?;
    let mut stacks = Vec::with_capacity(config.n_videos);
    for v in 0..config.n_videos {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, v as u64));
        let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
        let margin = 4.0f32;
        let n_cells = rng.gen_range(config.cell_count.0..=config.cell_count.1);
        let mut cells: Vec<Cell> = (0..n_cells)
            .map(|_| {
                let (vx, vy) = match config.motion {
                    Motion::Brownian { .. } => (0.0, 0.0),
                    Motion::Linear {
                        min_speed,
                        max_speed,
                    } => {
                        let speed = rng.gen_range(min_speed..=max_speed);
                        let angle = rng.gen_range(0.0f32..std::f32::consts::TAU);
                        (speed * angle.cos(), speed * angle.sin())
                    }
                };
                Cell {
                    x: rng.gen_range(margin..config.width as f32 - margin),
                    y: rng.gen_range(margin..config.height as f32 - margin),
                    vx,
                    vy,
                    sigma: rng.gen_range(1.5..3.0),
                    peak: rng.gen_range(60.0..160.0),
                    burst_left: 0,
                    burst_gain: 1.0,
                }
            })
            .collect();

        let mut data = Vec::with_capacity(config.n_frames * config.height * config.width);
        for t in 0..config.n_frames {
            let bleach = (-config.bleach_rate * t as f32).exp();
            let mut frame = vec![config.background; config.height * config.width];
            for c in &mut cells {
                if c.burst_left > 0 {
                    c.burst_left -= 1;
                } else {
                    c.burst_gain = 1.0;
                    if rng.gen_bool(config.burst_prob) {
                        c.burst_left = rng.gen_range(2..=5);
                        c.burst_gain = rng.gen_range(3.0..=10.0);
                    }
                }
                let amp = c.peak * bleach * c.burst_gain;
                // render within 4 sigma of the centroid
                let reach = (4.0 * c.sigma).ceil() as isize;
                let cx = c.x;
                let cy = c.y;
                let x0 = ((cx as isize) - reach).max(0) as usize;
                let x1 = ((cx as isize) + reach + 1).min(config.width as isize) as usize;
                let y0 = ((cy as isize) - reach).max(0) as usize;
                let y1 = ((cy as isize) + reach + 1).min(config.height as isize) as usize;
                let inv2s2 = 1.0 / (2.0 * c.sigma * c.sigma);
                for y in y0..y1 {
                    for x in x0..x1 {
                        let dx = x as f32 - cx;
                        let dy = y as f32 - cy;
                        frame[y * config.width + x] += amp * (-(dx * dx + dy * dy) * inv2s2).exp();
                    }
                }
                // advance the centroid for the next frame
                match config.motion {
                    Motion::Brownian { sigma } => {
                        c.x += sigma * normal.sample(&mut rng);
                        c.y += sigma * normal.sample(&mut rng);
                        c.x = c.x.clamp(margin, config.width as f32 - margin);
                        c.y = c.y.clamp(margin, config.height as f32 - margin);
                    }
                    Motion::Linear { .. } => {
                        c.x += c.vx;
                        c.y += c.vy;
                        if c.x < margin || c.x > config.width as f32 - margin {
                            c.vx = -c.vx;
                            c.x = c.x.clamp(margin, config.width as f32 - margin);
                        }
                        if c.y < margin || c.y > config.height as f32 - margin {
                            c.vy = -c.vy;
                            c.y = c.y.clamp(margin, config.height as f32 - margin);
                        }
                    }
                }
            }
            for v in frame {
                let noisy = if config.noise > 0.0 {
                    v + config.noise * v.max(0.0).sqrt() * normal.sample(&mut rng)
                } else {
                    v
                };
                data.push(noisy.clamp(0.0, 255.0).round() as u8);
            }
        }
        stacks.push(VideoStack::new(
            format!("synth{v:03}"),
            config.n_frames,
            config.height,
            config.width,
            data,
        )?);
    }
    Ok(stacks)
}

// --- stack file format ------------------------------------------------------
//
// magic "CVIP", u16 version = 1, u8 dtype = 0 (u8), u8 reserved = 0,
// u32 n_frames, u32 height, u32 width (little-endian), then the frames
// row-major.

const STACK_MAGIC: &[u8; 4] = b"CVIP";
const STACK_VERSION: u16 = 1;

pub fn save_stack(stack: &VideoStack, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(STACK_MAGIC)?;
    f.write_all(&STACK_VERSION.to_le_bytes())?;
    f.write_all(&[0u8, 0u8])?; // dtype u8, reserved
    for v in [
        stack.n_frames as u32,
        stack.height as u32,
        stack.width as u32,
    ] {
        f.write_all(&v.to_le_bytes())?;
    }
    f.write_all(&stack.data)?;
    f.flush()?;
    Ok(())
}

pub fn load_stack(path: &Path) -> Result<VideoStack> {
    let mut f = BufReader::new(File::open(path)?);
    let bad = |reason: &str| Error::format(path, reason);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != STACK_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut two = [0u8; 2];
    f.read_exact(&mut two).map_err(|_| bad("truncated header"))?;
    if u16::from_le_bytes(two) != STACK_VERSION {
        return Err(bad("unsupported version"));
    }
    f.read_exact(&mut two).map_err(|_| bad("truncated header"))?;
    if two[0] != 0 {
        return Err(bad("unsupported dtype"));
    }
    let mut four = [0u8; 4];
    let mut dims = [0u32; 3];
    for d in dims.iter_mut() {
        f.read_exact(&mut four).map_err(|_| bad("truncated dims"))?;
        *d = u32::from_le_bytes(four);
    }
    let (n, h, w) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    let mut data = vec![0u8; n * h * w];
    f.read_exact(&mut data).map_err(|_| bad("truncated payload"))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "stack".into());
    VideoStack::new(name, n, h, w, data)
}

// --- PGM (P5, 8-bit) --------------------------------------------------------

pub fn save_pgm(path: &Path, pixels: &[u8], width: usize, height: usize) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::shape(format!(
            "pgm {width}x{height} needs {} bytes, got {}",
            width * height,
            pixels.len()
        )));
    }
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    f.flush()?;
    Ok(())
}

pub fn load_pgm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    let bad = |reason: &str| Error::format(path, reason);

    let mut pos = 0usize;
    let mut token = |raw: &[u8], pos: &mut usize| -> Result<String> {
        // skip whitespace and '#' comments
        loop {
            while *pos < raw.len() && raw[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < raw.len() && raw[*pos] == b'#' {
                while *pos < raw.len() && raw[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < raw.len() && !raw[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&raw[start..*pos]).into_owned())
    };

    if token(&raw, &mut pos)? != "P5" {
        return Err(bad("not a P5 pgm"));
    }
    let width: usize = token(&raw, &mut pos)?.parse().map_err(|_| bad("bad width"))?;
    let height: usize = token(&raw, &mut pos)?.parse().map_err(|_| bad("bad height"))?;
    let maxval: usize = token(&raw, &mut pos)?.parse().map_err(|_| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad("only 8-bit (maxval 255) supported"));
    }
    pos += 1; // single whitespace after maxval
    if raw.len() < pos + width * height {
        return Err(bad("truncated payload"));
    }
    Ok((raw[pos..pos + width * height].to_vec(), width, height))
}

/// Reads every `.pgm` in a directory, lexicographically, as one stack.
pub fn load_pgm_dir(dir: &Path) -> Result<VideoStack> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "pgm").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::format(dir, "no .pgm files"));
    }
    let mut frames = Vec::new();
    let mut dims = None;
    for p in &paths {
        let (pix, w, h) = load_pgm(p)?;
        match dims {
            None => dims = Some((w, h)),
            Some(d) if d != (w, h) => {
                return Err(Error::format(
                    p,
                    format!("frame is {w}x{h}, earlier frames are {}x{}", d.0, d.1),
                ))
            }
            _ => {}
        }
        frames.extend(pix);
    }
    let (w, h) = dims.unwrap();
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "pgmdir".into());
    VideoStack::new(name, paths.len(), h, w, frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_stack(n: usize, h: usize, w: usize) -> VideoStack {
        let data: Vec<u8> = (0..n * h * w).map(|i| (i % 251) as u8).collect();
        VideoStack::new("toy", n, h, w, data).unwrap()
    }

    #[test]
    fn window_counts_match_formula() {
        assert_eq!(
            extract_windows(0, &toy_stack(600, 16, 16), 3).unwrap().len(),
            596
        );
        assert_eq!(
            extract_windows(0, &toy_stack(600, 16, 16), 7).unwrap().len(),
            592
        );
        assert_eq!(extract_windows(0, &toy_stack(5, 16, 16), 3).unwrap().len(), 1);
        assert!(extract_windows(0, &toy_stack(4, 16, 16), 3).is_err());
    }

    #[test]
    fn split_reproduces_published_counts() {
        let ratios = (0.70, 0.15, 0.15);
        let (tr, va, te) = split_indices(121_974, ratios, 0).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (85_382, 18_296, 18_296));
        let (tr, va, te) = split_indices(121_360, ratios, 0).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (84_952, 18_204, 18_204));
        let (tr, va, te) = split_indices(10, ratios, 0).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (8, 1, 1));
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let (tr, va, te) = split_indices(1000, (0.70, 0.15, 0.15), 7).unwrap();
        let mut all: Vec<usize> = tr.iter().chain(&va).chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
    }

    #[test]
    fn augment_identity_and_involution() {
        let ds = Dataset::from_stacks(vec![toy_stack(6, 8, 8)], 3).unwrap();
        let s = ds.materialize(0);
        assert_eq!(augment(&s, &AugmentParams::identity()), s);

        let lr = AugmentParams {
            lr_flip: true,
            ..AugmentParams::identity()
        };
        assert_eq!(augment(&augment(&s, &lr), &lr), s);
        let ud = AugmentParams {
            ud_flip: true,
            ..AugmentParams::identity()
        };
        assert_eq!(augment(&augment(&s, &ud), &ud), s);

        // flips commute
        let both = AugmentParams {
            lr_flip: true,
            ud_flip: true,
            ..AugmentParams::identity()
        };
        assert_eq!(augment(&augment(&s, &lr), &ud), augment(&s, &both));
    }

    #[test]
    fn augment_clamps_and_preserves_shape() {
        let ds = Dataset::from_stacks(vec![toy_stack(5, 8, 8)], 3).unwrap();
        let s = ds.materialize(0);
        let p = AugmentParams {
            brightness: 0.1,
            contrast: 1.2,
            lr_flip: true,
            ud_flip: false,
        };
        let a = augment(&s, &p);
        assert_eq!(a.first.len(), s.first.len());
        assert!(a
            .first
            .iter()
            .chain(a.last.iter())
            .all(|&v| (0.0..=255.0).contains(&v)));
    }

    #[test]
    fn augment_deterministic_for_seed() {
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(AugmentParams::sample(&mut r1), AugmentParams::sample(&mut r2));
    }

    #[test]
    fn synth_deterministic_and_background_only() {
        let cfg = SynthConfig::new(2, 4, 16, 16, (1, 3), 99);
        let a = synth_generate(&cfg).unwrap();
        let b = synth_generate(&cfg).unwrap();
        assert_eq!(a, b);

        let empty = SynthConfig {
            cell_count: (0, 0),
            noise: 0.5,
            ..SynthConfig::new(1, 8, 16, 16, (0, 0), 1)
        };
        let stacks = synth_generate(&empty).unwrap();
        let mean: f64 = stacks[0].bytes().iter().map(|&v| v as f64).sum::<f64>()
            / stacks[0].bytes().len() as f64;
        assert!((mean - 12.0).abs() < 1.0, "mean {mean}");
    }

    #[test]
    fn synth_photobleaching_decay() {
        // single bright static cell, no noise or bursts: the frame peak
        // should decay like exp(-rate * t)
        let rate = 0.02f32;
        let cfg = SynthConfig {
            bleach_rate: rate,
            motion: Motion::Brownian { sigma: 0.0 },
            burst_prob: 0.0,
            noise: 0.0,
            background: 5.0,
            ..SynthConfig::new(1, 40, 32, 32, (1, 1), 21)
        };
        let stack = &synth_generate(&cfg).unwrap()[0];
        let peak = |t: usize| {
            stack
                .frame(t)
                .iter()
                .map(|&v| v as f32 - 5.0)
                .fold(0.0f32, f32::max)
        };
        let p0 = peak(0);
        // log-linear fit of the peak trace
        let pts: Vec<(f32, f32)> = (0..40).map(|t| (t as f32, (peak(t) / p0).ln())).collect();
        let n = pts.len() as f32;
        let sx: f32 = pts.iter().map(|p| p.0).sum();
        let sy: f32 = pts.iter().map(|p| p.1).sum();
        let sxx: f32 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f32 = pts.iter().map(|p| p.0 * p.1).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        assert!(
            (slope + rate).abs() < 0.25 * rate,
            "fit slope {slope} vs -{rate}"
        );
    }

    #[test]
    fn stack_round_trip_and_bad_magic() {
        let dir = std::env::temp_dir().join(format!("wcn_stack_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("a.cvip");
        let stack = toy_stack(3, 16, 16);
        save_stack(&stack, &p).unwrap();
        let loaded = load_stack(&p).unwrap();
        assert_eq!(loaded.bytes(), stack.bytes());
        assert_eq!(
            std::fs::metadata(&p).unwrap().len(),
            (4 + 2 + 1 + 1 + 12 + 3 * 16 * 16) as u64
        );

        std::fs::write(&p, b"NOPE1234").unwrap();
        assert!(load_stack(&p).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn pgm_round_trip_and_dir_stack() {
        let dir = std::env::temp_dir().join(format!("wcn_pgm_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..5 {
            let pix: Vec<u8> = (0..64 * 64).map(|j| ((i * 37 + j) % 256) as u8).collect();
            save_pgm(&dir.join(format!("f_{i:02}.pgm")), &pix, 64, 64).unwrap();
        }
        let (pix, w, h) = load_pgm(&dir.join("f_00.pgm")).unwrap();
        assert_eq!((w, h), (64, 64));
        assert_eq!(pix[5], 5);

        let stack = load_pgm_dir(&dir).unwrap();
        assert_eq!(
            (stack.n_frames, stack.height, stack.width),
            (5, 64, 64)
        );
        assert_eq!(stack.frame(2)[0], 74);
        std::fs::remove_dir_all(&dir).ok();
    }
}
