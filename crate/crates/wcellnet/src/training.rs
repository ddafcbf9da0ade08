//! Minibatch training: Adam, the deterministic batch stream, the
//! training loop with CSV logging and checkpointing, and split
//! evaluation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, mix_seed, AugmentParams, Dataset};
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::graph::{Graph, Mode};
use crate::losses::{combined_loss, LossConfig};
use crate::metrics::{mse, MetricsRow};
use crate::model::{save_checkpoint, ModelConfig, WCellNet};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const TRAIN_LOG_HEADER: &str = "iter,loss_total,loss_recon,loss_percep,loss_reg";

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub seed: u64,
    /// Write intermediate checkpoints every this many iterations
    /// (0 = final checkpoint only).
    pub checkpoint_interval: usize,
    /// Evaluate the validation split every this many iterations
    /// (0 = off).
    pub eval_interval: usize,
    pub augment: bool,
    /// Draw minibatches with replacement instead of shuffling epochs.
    pub with_replacement: bool,
    /// Prefetch workers; > 1 overlaps batch assembly with compute but
    /// never changes batch order or contents.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 100_000,
            batch_size: 8,
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            checkpoint_interval: 0,
            eval_interval: 0,
            augment: true,
            with_replacement: false,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::config("learning rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must be in [0, 1)"));
        }
        if self.iterations == 0 {
            return Err(Error::config("iterations must be >= 1"));
        }
        Ok(())
    }
}

/// Per-parameter first/second moment estimates plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> AdamState {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Serializes as checkpoint records: adam.t plus per-parameter
    /// moments (trainable parameters only).
    pub fn to_records(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = vec![("adam.t".to_string(), Tensor::scalar(self.step as f32))];
        for (id, p) in store.iter() {
            if p.trainable {
                out.push((format!("adam.m.{}", p.name), self.m[id.0].clone()));
                out.push((format!("adam.v.{}", p.name), self.v[id.0].clone()));
            }
        }
        out
    }

    pub fn from_records(store: &ParamStore, records: &[(String, Tensor)]) -> Result<AdamState> {
        let mut state = AdamState::new(store);
        for (name, t) in records {
            if name == "adam.t" {
                state.step = t.item() as u64;
            } else if let Some(pname) = name.strip_prefix("adam.m.") {
                let id = store
                    .id(pname)
                    .ok_or_else(|| Error::arg(format!("optimizer record for unknown parameter {pname:?}")))?;
                state.m[id.0] = t.clone();
            } else if let Some(pname) = name.strip_prefix("adam.v.") {
                let id = store
                    .id(pname)
                    .ok_or_else(|| Error::arg(format!("optimizer record for unknown parameter {pname:?}")))?;
                state.v[id.0] = t.clone();
            } else {
                return Err(Error::arg(format!("unknown optimizer record {name:?}")));
            }
        }
        Ok(state)
    }
}

/// One bias-corrected Adam update over every trainable parameter;
/// gradients are zeroed afterwards.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, config: &TrainConfig) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for id in store.trainable_ids() {
        if store.grad(id).shape() != store.value(id).shape() {
            return Err(Error::shape(format!(
                "gradient shape {:?} does not match parameter {:?}",
                store.grad(id).shape(),
                store.value(id).shape()
            )));
        }
        let grads: Vec<f32> = store.grad(id).data().to_vec();
        let m = self_update(&mut state.m[id.0], &grads, config.beta1, |mv, g| {
            config.beta1 * mv + (1.0 - config.beta1) * g
        });
        let v = self_update(&mut state.v[id.0], &grads, config.beta2, |vv, g| {
            config.beta2 * vv + (1.0 - config.beta2) * g * g
        });
        let data = store.value_mut(id).data_mut();
        for i in 0..data.len() {
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    store.zero_grads();
    Ok(())
}

fn self_update<'a>(
    t: &'a mut Tensor,
    grads: &[f32],
    _beta: f32,
    f: impl Fn(f32, f32) -> f32,
) -> &'a [f32] {
    let d = t.data_mut();
    for (mv, &g) in d.iter_mut().zip(grads) {
        *mv = f(*mv, g);
    }
    d
}

/// Deterministic minibatch order: a pure function of (seed, epoch).
/// Without replacement, each epoch is a fresh shuffle consumed in
/// whole batches (a short remainder is dropped).
pub struct BatchStream {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
    with_replacement: bool,
    draw: ChaCha8Rng,
}

impl BatchStream {
    pub fn new(n: usize, batch: usize, seed: u64, with_replacement: bool) -> Result<BatchStream> {
        if batch > n {
            return Err(Error::arg(format!(
                "batch size {batch} exceeds split size {n}"
            )));
        }
        let mut s = BatchStream {
            n,
            batch,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
            with_replacement,
            draw: ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5245504c)),
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, self.epoch));
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.with_replacement {
            return (0..self.batch).map(|_| self.draw.gen_range(0..self.n)).collect();
        }
        if self.pos + self.batch > self.n {
            self.epoch += 1;
            self.reshuffle();
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

/// Assembled training batch on the model's [-1, 1] scale.
pub struct Batch {
    pub x_first: Tensor,
    pub x_intermediate: Tensor,
    pub x_last: Tensor,
}

fn normalize(px: &[f32], out: &mut Vec<f32>) {
    out.extend(px.iter().map(|&v| v / 127.5 - 1.0));
}

/// Materializes window indices into batch tensors, optionally applying
/// one augmentation draw per sample.
pub fn make_batch(
    dataset: &Dataset,
    split: &[usize],
    picks: &[usize],
    aug_rng: Option<&mut ChaCha8Rng>,
) -> Result<Batch> {
    let m = picks.len();
    let (h, w) = (dataset.height(), dataset.width());
    let frames = dataset.frames;
    let mut xf = Vec::with_capacity(m * h * w);
    let mut xi = Vec::with_capacity(m * frames * h * w);
    let mut xl = Vec::with_capacity(m * h * w);
    let mut rng = aug_rng;
    for &pick in picks {
        let sample = dataset.materialize(split[pick]);
        let sample = match rng.as_deref_mut() {
            Some(r) => augment(&sample, &AugmentParams::sample(r)),
            None => sample,
        };
        normalize(&sample.first, &mut xf);
        for f in &sample.intermediate {
            normalize(f, &mut xi);
        }
        normalize(&sample.last, &mut xl);
    }
    Ok(Batch {
        x_first: Tensor::from_vec(&[m, 1, h, w], xf)?,
        x_intermediate: Tensor::from_vec(&[m, frames, h, w], xi)?,
        x_last: Tensor::from_vec(&[m, 1, h, w], xl)?,
    })
}

/// Output of a training run.
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub initial_loss: f32,
    pub final_loss: f32,
}

/// Runs the full minibatch loop: sample, forward, combined loss,
/// backward, Adam step; logs per-iteration losses as CSV and writes
/// checkpoints (optimizer state included). Deterministic for a given
/// seed regardless of the worker count.
pub fn train(
    model_config: &ModelConfig,
    loss_config: &LossConfig,
    train_config: &TrainConfig,
    dataset: &Dataset,
    train_split: &[usize],
    val_split: Option<&[usize]>,
    out_dir: &Path,
) -> Result<TrainArtifacts> {
    model_config.validate()?;
    loss_config.validate()?;
    train_config.validate()?;
    if train_split.is_empty() {
        return Err(Error::arg("training split is empty"));
    }
    std::fs::create_dir_all(out_dir)?;

    let (net, mut store) = WCellNet::init(*model_config, train_config.seed)?;
    let extractor = FeatureExtractor::build(&loss_config.extractor)?;
    let mut adam = AdamState::new(&store);

    let log_path = out_dir.join("train_log.csv");
    let mut log = BufWriter::new(File::create(&log_path)?);
    writeln!(log, "{TRAIN_LOG_HEADER}")?;

    let mut val_log = match (val_split, train_config.eval_interval) {
        (Some(_), interval) if interval > 0 => {
            let p = out_dir.join("val_metrics.csv");
            let mut f = BufWriter::new(File::create(&p)?);
            writeln!(f, "iter,{}", crate::metrics::METRICS_CSV_HEADER)?;
            Some(f)
        }
        _ => None,
    };

    let mut stream = BatchStream::new(
        train_split.len(),
        train_config.batch_size,
        train_config.seed,
        train_config.with_replacement,
    )?;
    let mut aug_rng = ChaCha8Rng::seed_from_u64(mix_seed(train_config.seed, 0x415547));

    let mut initial_loss = f32::NAN;
    let mut final_loss = f32::NAN;

    let mut run_iteration = |iter: usize,
                             batch: Batch,
                             store: &mut ParamStore,
                             adam: &mut AdamState,
                             log: &mut BufWriter<File>|
     -> Result<f32> {
        let mut g = Graph::new();
        let xf = g.constant(batch.x_first);
        let xl = g.constant(batch.x_last);
        let yt = g.constant(batch.x_intermediate);
        let pred = net.forward(&mut g, store, xf, xl, Mode::Train)?;
        let loss = combined_loss(&mut g, store, yt, pred, extractor.as_ref(), loss_config)?;
        g.backward(loss.total, store)?;
        adam_step(store, adam, train_config)?;
        let total = g.value(loss.total).item();
        writeln!(
            log,
            "{},{},{},{},{}",
            iter,
            total,
            g.value(loss.recon).item(),
            g.value(loss.percep).item(),
            g.value(loss.reg).item()
        )?;
        Ok(total)
    };

    let mut post_iteration = |iter: usize,
                              net: &WCellNet,
                              store: &mut ParamStore,
                              adam: &AdamState,
                              val_log: &mut Option<BufWriter<File>>|
     -> Result<()> {
        let ckpt_due = train_config.checkpoint_interval > 0
            && iter % train_config.checkpoint_interval == 0
            && iter != train_config.iterations;
        if ckpt_due {
            let p = out_dir.join(format!("checkpoint_{iter:06}.wcnc"));
            save_checkpoint(&p, model_config, store, &adam.to_records(store))?;
        }
        if let (Some(f), Some(val)) = (val_log.as_mut(), val_split) {
            if train_config.eval_interval > 0 && iter % train_config.eval_interval == 0 {
                let row = evaluate(net, store, dataset, val, "val")?;
                writeln!(f, "{iter},{}", row.csv_line(Default::default()))?;
            }
        }
        Ok(())
    };

    if train_config.workers > 1 {
        // one producer assembles batches in the deterministic order
        // while the main thread trains; contents are identical to the
        // single-worker path
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = std::sync::mpsc::sync_channel::<Result<Batch>>(2);
            let augment_on = train_config.augment;
            let iterations = train_config.iterations;
            scope.spawn(move || {
                for _ in 0..iterations {
                    let picks = stream.next_batch();
                    let rng = augment_on.then_some(&mut aug_rng);
                    let batch = make_batch(dataset, train_split, &picks, rng);
                    if tx.send(batch).is_err() {
                        return;
                    }
                }
            });
            for iter in 1..=train_config.iterations {
                let batch = rx
                    .recv()
                    .map_err(|_| Error::arg("batch producer stopped early"))??;
                let total = run_iteration(iter, batch, &mut store, &mut adam, &mut log)?;
                if iter == 1 {
                    initial_loss = total;
                }
                final_loss = total;
                post_iteration(iter, &net, &mut store, &adam, &mut val_log)?;
            }
            Ok(())
        })?;
    } else {
        for iter in 1..=train_config.iterations {
            let picks = stream.next_batch();
            let rng = train_config.augment.then_some(&mut aug_rng);
            let batch = make_batch(dataset, train_split, &picks, rng)?;
            let total = run_iteration(iter, batch, &mut store, &mut adam, &mut log)?;
            if iter == 1 {
                initial_loss = total;
            }
            final_loss = total;
            post_iteration(iter, &net, &mut store, &adam, &mut val_log)?;
        }
    }
    log.flush()?;
    if let Some(mut f) = val_log {
        f.flush()?;
    }

    let checkpoint = out_dir.join("final.wcnc");
    save_checkpoint(&checkpoint, model_config, &store, &adam.to_records(&store))?;
    Ok(TrainArtifacts {
        checkpoint,
        log: log_path,
        initial_loss,
        final_loss,
    })
}

/// Eval-mode forward over a split; reports the mean of per-sample MSEs
/// on the [0, 255] scale and its PSNR. No augmentation.
pub fn evaluate(
    net: &WCellNet,
    store: &mut ParamStore,
    dataset: &Dataset,
    indices: &[usize],
    label: &str,
) -> Result<MetricsRow> {
    if dataset.frames != net.config.frames {
        return Err(Error::arg(format!(
            "dataset provides {} intermediate frames, model expects {}",
            dataset.frames, net.config.frames
        )));
    }
    if indices.is_empty() {
        return Err(Error::arg("cannot evaluate an empty split"));
    }
    let per_sample = per_sample_mses(net, store, dataset, indices)?;
    Ok(MetricsRow::from_sample_mses(label, &per_sample))
}

/// Per-sample MSEs on the [0, 255] scale, in split order.
pub fn per_sample_mses(
    net: &WCellNet,
    store: &mut ParamStore,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<Vec<f64>> {
    let chunk = 8usize;
    let mut out = Vec::with_capacity(indices.len());
    for group in indices.chunks(chunk) {
        let picks: Vec<usize> = (0..group.len()).collect();
        let batch = make_batch(dataset, group, &picks, None)?;
        let mut g = Graph::new();
        let xf = g.constant(batch.x_first);
        let xl = g.constant(batch.x_last);
        let pred = net.forward(&mut g, store, xf, xl, Mode::Eval)?;
        let p = g.value(pred);
        let frame_len = dataset.frames * dataset.height() * dataset.width();
        for (i, &idx) in group.iter().enumerate() {
            let sample = dataset.materialize(idx);
            let truth: Vec<f32> = sample.intermediate.concat();
            let pred255: Vec<f32> = p.data()[i * frame_len..(i + 1) * frame_len]
                .iter()
                .map(|&v| (v + 1.0) * 127.5)
                .collect();
            out.push(mse(&truth, &pred255)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    fn tiny_store() -> (ParamStore, crate::params::ParamId) {
        let mut s = ParamStore::new();
        let id = s
            .register("w.weight", Tensor::from_vec(&[1], vec![1.0]).unwrap(), true)
            .unwrap();
        (s, id)
    }

    #[test]
    fn adam_zero_grad_keeps_params() {
        let (mut store, id) = tiny_store();
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &mut state, &TrainConfig::default()).unwrap();
        assert_eq!(store.value(id).data(), &[1.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_hand_computed() {
        // g = 1: m_hat = 1, v_hat = 1, so the update is lr / (1 + eps)
        let (mut store, id) = tiny_store();
        let mut state = AdamState::new(&store);
        store.accumulate_grad(id, &[1.0]);
        let cfg = TrainConfig::default();
        adam_step(&mut store, &mut state, &cfg).unwrap();
        let expect = 1.0 - cfg.learning_rate / (1.0 + cfg.epsilon);
        assert!((store.value(id).data()[0] - expect).abs() < 1e-7);
        // grads were zeroed
        assert_eq!(store.grad(id).data(), &[0.0]);
    }

    #[test]
    fn adam_identical_histories_identical_updates() {
        let mut store = ParamStore::new();
        let a = store.register("a", Tensor::from_vec(&[1], vec![0.3]).unwrap(), true).unwrap();
        let b = store.register("b", Tensor::from_vec(&[1], vec![0.3]).unwrap(), true).unwrap();
        let mut state = AdamState::new(&store);
        let cfg = TrainConfig::default();
        for step in 0..5 {
            let g = 0.5 + step as f32 * 0.1;
            store.accumulate_grad(a, &[g]);
            store.accumulate_grad(b, &[g]);
            adam_step(&mut store, &mut state, &cfg).unwrap();
        }
        assert_eq!(store.value(a).data(), store.value(b).data());
    }

    #[test]
    fn batch_stream_deterministic_and_epoch_based() {
        let mut s1 = BatchStream::new(10, 3, 42, false).unwrap();
        let mut s2 = BatchStream::new(10, 3, 42, false).unwrap();
        let a: Vec<Vec<usize>> = (0..8).map(|_| s1.next_batch()).collect();
        let b: Vec<Vec<usize>> = (0..8).map(|_| s2.next_batch()).collect();
        assert_eq!(a, b);
        // first epoch consumes 3 batches (9 of 10 samples), then reshuffles
        let epoch1: Vec<usize> = a[..3].concat();
        let mut sorted = epoch1.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 9);

        assert!(BatchStream::new(4, 8, 0, false).is_err());
    }

    #[test]
    fn overfit_reduces_loss() {
        let cfg = SynthConfig {
            noise: 0.5,
            ..SynthConfig::new(1, 10, 16, 16, (1, 2), 3)
        };
        let ds = Dataset::from_stacks(synth_generate(&cfg).unwrap(), 3).unwrap();
        let split: Vec<usize> = (0..ds.len().min(8)).collect();
        let model_config = ModelConfig::new(4, 3, 16, 16).unwrap();
        let dir = std::env::temp_dir().join(format!("wcn_train_{}", std::process::id()));
        let train_config = TrainConfig {
            iterations: 60,
            batch_size: split.len(),
            augment: false,
            seed: 9,
            ..TrainConfig::default()
        };
        let art = train(
            &model_config,
            &LossConfig::default(),
            &train_config,
            &ds,
            &split,
            None,
            &dir,
        )
        .unwrap();
        assert!(
            art.final_loss < art.initial_loss,
            "loss {} -> {}",
            art.initial_loss,
            art.final_loss
        );
        // log has header + one line per iteration
        let log = std::fs::read_to_string(&art.log).unwrap();
        assert_eq!(log.lines().count(), 61);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn evaluate_matches_per_sample_mean_and_counts() {
        let cfg = SynthConfig::new(1, 8, 16, 16, (1, 2), 5);
        let ds = Dataset::from_stacks(synth_generate(&cfg).unwrap(), 3).unwrap();
        let model_config = ModelConfig::new(2, 3, 16, 16).unwrap();
        let (net, mut store) = WCellNet::init(model_config, 1).unwrap();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let row = evaluate(&net, &mut store, &ds, &idx, "test").unwrap();
        assert_eq!(row.samples, ds.len());
        let per = per_sample_mses(&net, &mut store, &ds, &idx).unwrap();
        let mean = per.iter().sum::<f64>() / per.len() as f64;
        assert!((row.mse - mean).abs() < 1e-9);
    }

    #[test]
    fn evaluate_rejects_frame_mismatch() {
        let cfg = SynthConfig::new(1, 8, 16, 16, (1, 1), 5);
        let ds = Dataset::from_stacks(synth_generate(&cfg).unwrap(), 4).unwrap();
        let model_config = ModelConfig::new(2, 3, 16, 16).unwrap();
        let (net, mut store) = WCellNet::init(model_config, 1).unwrap();
        assert!(evaluate(&net, &mut store, &ds, &[0], "x").is_err());
    }

    #[test]
    fn workers_do_not_change_results() {
        let cfg = SynthConfig::new(1, 9, 16, 16, (1, 2), 8);
        let ds = Dataset::from_stacks(synth_generate(&cfg).unwrap(), 3).unwrap();
        let split: Vec<usize> = (0..ds.len()).collect();
        let model_config = ModelConfig::new(2, 3, 16, 16).unwrap();
        let base = TrainConfig {
            iterations: 10,
            batch_size: 3,
            seed: 77,
            ..TrainConfig::default()
        };
        let run = |workers: usize, tag: &str| {
            let dir = std::env::temp_dir().join(format!(
                "wcn_workers_{}_{}",
                std::process::id(),
                tag
            ));
            let cfg = TrainConfig { workers, ..base.clone() };
            let art = train(
                &model_config,
                &LossConfig::default(),
                &cfg,
                &ds,
                &split,
                None,
                &dir,
            )
            .unwrap();
            let bytes = std::fs::read(&art.checkpoint).unwrap();
            let log = std::fs::read(&art.log).unwrap();
            std::fs::remove_dir_all(&dir).ok();
            (bytes, log)
        };
        let (c1, l1) = run(1, "a");
        let (c2, l2) = run(3, "b");
        assert_eq!(c1, c2);
        assert_eq!(l1, l2);
    }
}
