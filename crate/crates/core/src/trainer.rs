//! Episodic meta-training and checkpoint persistence.
//!
//! Every random draw is keyed by `(seed, stream, epoch, step, slot)`, so a
//! run is fully determined by its dataset and config, and a run resumed from
//! a checkpoint continues exactly as an uninterrupted one.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{BnBatchStats, Tape, Var};
use crate::embed::{build_embedding, BoundEmbedding, EmbedConfig, EmbeddingParams, Mode};
use crate::episodes::{derive_seed, sample_episode, Episode, SegDataset, Split};
use crate::error::{Error, Result};
use crate::eval;
use crate::optim::{AdamConfig, AdamState};
use crate::ridge::{head_logits, BoundRidgeHead, EpisodeTargets, HeadKind, HeadOptions, RidgeHead};
use crate::tensor::{DType, Real, Tensor};

const STREAM_INIT: u64 = 1;
const STREAM_EPISODE: u64 = 2;
const STREAM_AUGMENT: u64 = 3;
const STREAM_EVAL: u64 = 4;
const STREAM_CAP: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision `{other}` (expected f32 or f64)"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// Where the query loss is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossResolution {
    /// Stride-4 feature grid with nearest-sampled labels.
    Feature,
    /// Logits bilinearly upsampled to the image grid.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub k: usize,
    pub n: usize,
    pub q: usize,
    pub episodes_per_epoch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub precision: Precision,
    pub head: HeadKind,
    pub augment: bool,
    pub loss_resolution: LossResolution,
    /// Episodes averaged per optimizer step.
    pub meta_batch: usize,
    /// Rescale the global gradient norm down to this value when exceeded.
    pub clip_grad_norm: Option<f64>,
    /// Per-class cap on support pixels handed to the head.
    pub support_cap: Option<usize>,
    /// Novel-split evaluation every this many epochs; 0 disables it.
    pub eval_every: usize,
    pub eval_tasks: usize,
    pub embed: EmbedConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 2,
            n: 5,
            q: 2,
            episodes_per_epoch: 200,
            epochs: 20,
            lr: 1e-3,
            seed: 0,
            precision: Precision::F32,
            head: HeadKind::Ridge,
            augment: true,
            loss_resolution: LossResolution::Feature,
            meta_batch: 1,
            clip_grad_norm: None,
            support_cap: None,
            eval_every: 5,
            eval_tasks: 20,
            embed: EmbedConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.k == 0 || self.n == 0 || self.q == 0 {
            return err(format!("k, n, q must be positive (got {}, {}, {})", self.k, self.n, self.q));
        }
        if self.episodes_per_epoch == 0 {
            return err("episodes_per_epoch must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err(format!("lr must be positive, got {}", self.lr));
        }
        if self.meta_batch == 0 || self.episodes_per_epoch % self.meta_batch != 0 {
            return err(format!(
                "meta_batch {} must divide episodes_per_epoch {}",
                self.meta_batch, self.episodes_per_epoch
            ));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return err(format!("clip_grad_norm must be positive, got {c}"));
            }
        }
        if self.support_cap == Some(0) {
            return err("support_cap must be positive when set".into());
        }
        self.embed.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    /// Head settings for the episode drawn with `episode_seed`.
    pub fn head_options(&self, episode_seed: u64) -> HeadOptions {
        HeadOptions {
            support_cap: self.support_cap,
            cap_seed: derive_seed(episode_seed, &[STREAM_CAP]),
            convstep: AdamConfig::default(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn episode_seed(&self, epoch: usize, step: usize, slot: usize) -> u64 {
        derive_seed(self.seed, &[STREAM_EPISODE, epoch as u64, step as u64, slot as u64])
    }

    fn augment_seed(&self, epoch: usize, step: usize, slot: usize) -> u64 {
        derive_seed(self.seed, &[STREAM_AUGMENT, epoch as u64, step as u64, slot as u64])
    }

    pub fn eval_seed(&self, epoch: usize) -> u64 {
        derive_seed(self.seed, &[STREAM_EVAL, epoch as u64])
    }
}

/// Embedding plus head, the full set of meta-learned parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub embed: EmbeddingParams<T>,
    pub head: RidgeHead<T>,
    pub kind: HeadKind,
}

/// A [`Model`] placed on a tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub embed: BoundEmbedding,
    pub head: Option<BoundRidgeHead>,
}

impl BoundModel {
    /// Handles in optimizer order: embedding, then head scalars if any.
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.embed.vars().to_vec();
        if let Some(h) = &self.head {
            v.extend(h.vars());
        }
        v
    }
}

impl<T: Real> Model<T> {
    pub fn new(embed: &EmbedConfig, kind: HeadKind, seed: u64) -> Result<Self> {
        Ok(Self {
            embed: build_embedding(embed, derive_seed(seed, &[STREAM_INIT]))?,
            head: RidgeHead::default(),
            kind,
        })
    }

    /// Trainable tensors in optimizer order with their names.
    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .embed
            .named_params()
            .into_iter()
            .map(|(n, t)| (format!("embed.{n}"), t.clone()))
            .collect();
        if self.kind.has_scalars() {
            for (name, t) in RidgeHead::<T>::NAMES.iter().zip(self.head.to_tensors()) {
                out.push((name.to_string(), t));
            }
        }
        out
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.named_params().into_iter().map(|(_, t)| t.shape().to_vec()).collect()
    }

    pub fn count_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundModel {
        BoundModel {
            embed: self.embed.bind(tape),
            head: self.kind.has_scalars().then(|| self.head.bind(tape)),
        }
    }

    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> BoundModel {
        let head = self.kind.has_scalars().then(|| BoundRidgeHead {
            log_lambda: tape.constant(Tensor::scalar(self.head.log_lambda)),
            alpha: tape.constant(Tensor::scalar(self.head.alpha)),
            beta: tape.constant(Tensor::scalar(self.head.beta)),
        });
        BoundModel {
            embed: self.embed.bind_frozen(tape),
            head,
        }
    }

    /// Apply `update` to every trainable tensor in optimizer order.
    fn update_params(&mut self, update: impl FnOnce(&mut [&mut Tensor<T>]) -> Result<()>) -> Result<()> {
        let mut head = self.head.to_tensors();
        let has_scalars = self.kind.has_scalars();
        {
            let mut params = self.embed.params_mut();
            if has_scalars {
                params.extend(head.iter_mut());
            }
            update(&mut params)?;
        }
        if has_scalars {
            self.head = RidgeHead::from_tensors(&head)?;
        }
        Ok(())
    }

    /// SHA-256 over every parameter and running statistic.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_params().iter().chain(
            self.embed
                .named_buffers()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect::<Vec<_>>()
                .iter(),
        ) {
            h.update(name.as_bytes());
            h.update(T::to_le_bytes_vec(t.data()));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            embed: self.embed.cast(),
            head: RidgeHead {
                log_lambda: U::from_f64(self.head.log_lambda.as_f64()),
                alpha: U::from_f64(self.head.alpha.as_f64()),
                beta: U::from_f64(self.head.beta.as_f64()),
            },
            kind: self.kind,
        }
    }
}

/// Mean pixel cross-entropy of the query logits.
pub fn meta_loss<T: Real>(tape: &mut Tape<T>, logits: Var, query_labels: &[usize]) -> Result<Var> {
    let rows = tape.shape(logits).first().copied().unwrap_or(0);
    if rows != query_labels.len() {
        return Err(Error::Shape(format!(
            "{rows} logit rows for {} query labels",
            query_labels.len()
        )));
    }
    tape.softmax_cross_entropy(logits, query_labels)
}

/// Mean of per-episode losses, the objective of one meta-batch.
pub fn meta_batch_loss<T: Real>(tape: &mut Tape<T>, losses: &[Var]) -> Result<Var> {
    let (&first, rest) = losses
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("empty meta-batch".into()))?;
    let mut total = first;
    for &l in rest {
        total = tape.add(total, l)?;
    }
    Ok(tape.mul_const(total, T::from_f64(1.0 / losses.len() as f64)))
}

/// Loss, logits and batch statistics of one episode recorded on a tape.
#[derive(Debug)]
pub struct EpisodeForward<T> {
    pub loss: Var,
    pub logits: Var,
    /// Support statistics followed by query statistics (train mode only).
    pub bn_stats: Vec<BnBatchStats<T>>,
}

/// Support and query through the embedding, the head on the support pixels,
/// and the query loss.
pub fn episode_forward<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    bound: &BoundModel,
    episode: &Episode,
    mode: Mode,
    loss_resolution: LossResolution,
    opts: &HeadOptions,
) -> Result<EpisodeForward<T>> {
    let xs = tape.constant(episode.support_images());
    let xq = tape.constant(episode.query_images());
    let (fs, mut stats) = model.embed.forward(tape, &bound.embed, xs, mode)?;
    let (fq, q_stats) = model.embed.forward(tape, &bound.embed, xq, mode)?;
    stats.extend(q_stats);
    let targets = EpisodeTargets::from_labels(&episode.support_labels(), episode.classes())?;
    let logits = head_logits(tape, model.kind, bound.head.as_ref(), fs.matrix, &targets, fq.matrix, opts)?;
    let loss = match loss_resolution {
        LossResolution::Feature => meta_loss(tape, logits, &episode.query_labels())?,
        LossResolution::Full => {
            let maps = tape.rows_to_maps(logits, fq.images, fq.height, fq.width)?;
            let up = tape.bilinear_upsample(maps, episode.height, episode.width)?;
            let rows = tape.pixel_rows(up)?;
            meta_loss(tape, rows, &episode.query_labels_full())?
        }
    };
    Ok(EpisodeForward {
        loss,
        logits,
        bn_stats: stats,
    })
}

/// Loss and gradients of one training episode.
#[derive(Debug)]
pub struct EpisodeOutcome<T> {
    pub loss: f64,
    /// In optimizer order (see [`Model::named_params`]).
    pub grads: Vec<Tensor<T>>,
    pub bn_stats: Vec<BnBatchStats<T>>,
}

pub fn train_episode<T: Real>(
    model: &Model<T>,
    episode: &Episode,
    loss_resolution: LossResolution,
    opts: &HeadOptions,
) -> Result<EpisodeOutcome<T>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let fwd = episode_forward(&mut tape, model, &bound, episode, Mode::Train, loss_resolution, opts)?;
    let loss = tape.value(fwd.loss).item().as_f64();
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("episode loss is {loss}")));
    }
    let mut grads = tape.backward(fwd.loss)?;
    let grads: Vec<Tensor<T>> = bound
        .vars()
        .into_iter()
        .map(|v| grads.take(v).expect("every parameter is a tracked leaf"))
        .collect();
    if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
        let name = &model.named_params()[i].0;
        return Err(Error::Numerical(format!("non-finite gradient for {name}")));
    }
    Ok(EpisodeOutcome {
        loss,
        grads,
        bn_stats: fwd.bn_stats,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    /// 1-based epoch number.
    pub epoch: usize,
    pub mean_loss: f64,
    pub eval_miou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub adam: AdamState<T>,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
}

impl<T: Real> Checkpoint<T> {
    /// Fresh state before the first epoch.
    pub fn initial(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.embed, config.head, config.seed)?;
        let shapes = model.param_shapes();
        let refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        Ok(Self {
            config: config.clone(),
            adam: AdamState::new(config.adam(), &refs),
            model,
            epoch: 0,
            history: Vec::new(),
        })
    }
}

/// Runtime options that do not affect results.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Threads preparing episodes and evaluation tasks.
    pub workers: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { workers: 1 }
    }
}

/// Run `f` over `0..count`, spreading the calls over `workers` threads and
/// returning the results in index order.
pub(crate) fn parallel_map<R: Send>(count: usize, workers: usize, f: impl Fn(usize) -> R + Sync) -> Vec<R> {
    if workers <= 1 || count <= 1 {
        return (0..count).map(f).collect();
    }
    let chunk = count.div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..count)
            .step_by(chunk)
            .map(|start| {
                let f = &f;
                s.spawn(move || (start..(start + chunk).min(count)).map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

fn prepare_episode(ds: &SegDataset, cfg: &TrainConfig, epoch: usize, step: usize, slot: usize) -> Result<Episode> {
    let ep = sample_episode(ds, Split::Train, cfg.k, cfg.n, cfg.q, cfg.episode_seed(epoch, step, slot))?;
    if cfg.augment {
        ep.augmented(cfg.augment_seed(epoch, step, slot))
    } else {
        Ok(ep)
    }
}

fn check_resume(current: &TrainConfig, stored: &TrainConfig) -> Result<()> {
    let normalize = |c: &TrainConfig| TrainConfig {
        epochs: 0,
        ..c.clone()
    };
    if normalize(current) != normalize(stored) {
        return Err(Error::Config(format!(
            "checkpoint was written with a different configuration:\n{}",
            stored.to_toml()
        )));
    }
    Ok(())
}

/// Train until `config.epochs` epochs are complete, starting from `resume`
/// when given. `on_epoch` sees the state after every epoch.
pub fn meta_train<T: Real>(
    dataset: &SegDataset,
    config: &TrainConfig,
    resume: Option<Checkpoint<T>>,
    run: RunOptions,
    mut on_epoch: impl FnMut(&Checkpoint<T>) -> Result<()>,
) -> Result<Checkpoint<T>> {
    config.validate()?;
    dataset.validate()?;
    let mut state = match resume {
        Some(ck) => {
            check_resume(config, &ck.config)?;
            Checkpoint {
                config: config.clone(),
                ..ck
            }
        }
        None => Checkpoint::initial(config)?,
    };
    let steps = config.episodes_per_epoch / config.meta_batch;
    let prefetch = run.workers.max(1) * 4;

    while state.epoch < config.epochs {
        let epoch = state.epoch;
        let mut loss_sum = 0.0;
        let mut step = 0;
        while step < steps {
            let block = prefetch.min(steps - step);
            let episodes = parallel_map(block * config.meta_batch, run.workers, |i| {
                prepare_episode(dataset, config, epoch, step + i / config.meta_batch, i % config.meta_batch)
            });
            for (b, batch) in episodes.chunks(config.meta_batch).enumerate() {
                let mut total: Option<Vec<Tensor<T>>> = None;
                let mut stats = Vec::new();
                for (slot, ep) in batch.iter().enumerate() {
                    let ep = ep.as_ref().map_err(|e| Error::Sampling(e.to_string()))?;
                    let opts = config.head_options(config.episode_seed(epoch, step + b, slot));
                    let out = train_episode(&state.model, ep, config.loss_resolution, &opts)?;
                    loss_sum += out.loss;
                    match &mut total {
                        None => total = Some(out.grads),
                        Some(acc) => acc.iter_mut().zip(&out.grads).for_each(|(a, g)| a.add_assign(g)),
                    }
                    stats.push(out.bn_stats);
                }
                let mut grads = total.expect("meta-batch is non-empty");
                let scale = T::from_f64(1.0 / config.meta_batch as f64);
                if config.meta_batch > 1 {
                    grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v = *v * scale));
                }
                if let Some(max_norm) = config.clip_grad_norm {
                    clip_global_norm(&mut grads, max_norm);
                }
                let refs: Vec<&Tensor<T>> = grads.iter().collect();
                let adam = &mut state.adam;
                state.model.update_params(|params| adam.step(params, &refs))?;
                for s in &stats {
                    let units = s.len() / 2;
                    state.model.embed.update_running_stats(&s[..units])?;
                    state.model.embed.update_running_stats(&s[units..])?;
                }
                if state.model.kind.has_scalars() {
                    let lambda = state.model.head.lambda();
                    if !(lambda > T::zero()) || !lambda.is_finite() {
                        return Err(Error::Numerical(format!("ridge lambda left (0, inf): {lambda}")));
                    }
                }
            }
            step += block;
        }
        state.epoch += 1;
        let mean_loss = loss_sum / config.episodes_per_epoch as f64;
        let eval_miou = if config.eval_every > 0 && state.epoch % config.eval_every == 0 && config.eval_tasks > 0 {
            let report = eval::evaluate(
                &state.model,
                dataset,
                Split::Novel,
                config.k,
                config.n,
                config.q,
                config.eval_tasks,
                config.eval_seed(state.epoch),
                run,
            )?;
            Some(report.mean)
        } else {
            None
        };
        state.history.push(EpochMetrics {
            epoch: state.epoch,
            mean_loss,
            eval_miou,
        });
        on_epoch(&state)?;
    }
    Ok(state)
}

fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::from_f64(max_norm / norm);
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v = *v * s));
    }
}

/// Per-epoch metrics as `epoch,mean_loss,eval_miou` rows.
pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,mean_loss,eval_miou\n");
    for m in history {
        let miou = m.eval_miou.map(|v| format!("{v:.6}")).unwrap_or_default();
        out.push_str(&format!("{},{:.6},{}\n", m.epoch, m.mean_loss, miou));
    }
    out
}

// ---------------------------------------------------------------------------
// checkpoint container

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MSGN";
pub const CHECKPOINT_VERSION: u32 = 1;
const TAG_U64: u8 = 2;

struct RawTensor {
    name: String,
    dtype: u8,
    shape: Vec<usize>,
    payload: Vec<u8>,
}

impl RawTensor {
    fn real<T: Real>(name: String, t: &Tensor<T>) -> Self {
        Self {
            name,
            dtype: T::DTYPE.tag(),
            shape: t.shape().to_vec(),
            payload: T::to_le_bytes_vec(t.data()),
        }
    }

    fn f64s(name: &str, v: &[f64]) -> Self {
        Self {
            name: name.into(),
            dtype: DType::F64.tag(),
            shape: vec![v.len()],
            payload: f64::to_le_bytes_vec(v),
        }
    }

    fn u64s(name: &str, v: &[u64]) -> Self {
        Self {
            name: name.into(),
            dtype: TAG_U64,
            shape: vec![v.len()],
            payload: v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn elem_size(dtype: u8) -> Option<usize> {
        match dtype {
            0 => Some(4),
            1 | TAG_U64 => Some(8),
            _ => None,
        }
    }

    fn to_real<T: Real>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match self.dtype {
            0 => f32::from_le_bytes_slice(&self.payload).into_iter().map(|v| T::from_f64(v as f64)).collect(),
            1 => f64::from_le_bytes_slice(&self.payload).into_iter().map(T::from_f64).collect(),
            d => {
                return Err(Error::CheckpointFormat(format!(
                    "tensor {} has dtype tag {d}, expected a float",
                    self.name
                )))
            }
        };
        Tensor::new(&self.shape, data)
    }

    fn to_f64s(&self) -> Result<Vec<f64>> {
        Ok(self.to_real::<f64>()?.into_data())
    }

    fn to_u64s(&self) -> Result<Vec<u64>> {
        if self.dtype != TAG_U64 {
            return Err(Error::CheckpointFormat(format!("tensor {} is not u64", self.name)));
        }
        Ok(self
            .payload
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn encode(config_echo: &str, records: &[RawTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config_echo.len() as u64).to_le_bytes());
    out.extend_from_slice(config_echo.as_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(r.dtype);
        out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for &d in &r.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&r.payload);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::CheckpointFormat(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::CheckpointFormat(format!("length {v} too large")))
    }
}

fn decode(bytes: &[u8]) -> Result<(String, Vec<RawTensor>)> {
    if bytes.len() < 12 {
        return Err(Error::CheckpointFormat(format!("file is only {} bytes", bytes.len())));
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointFormat("missing MSGN magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::CheckpointChecksum { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let echo_len = r.len()?;
    let echo = std::str::from_utf8(r.take(echo_len)?)
        .map_err(|_| Error::CheckpointFormat("config echo is not UTF-8".into()))?
        .to_string();
    let count = r.len()?;
    let mut records = Vec::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::CheckpointFormat("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.take(1)?[0];
        let size = RawTensor::elem_size(dtype)
            .ok_or_else(|| Error::CheckpointFormat(format!("tensor {name}: unknown dtype tag {dtype}")))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let elems = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(size))
            .ok_or_else(|| Error::CheckpointFormat(format!("tensor {name}: extents overflow")))?;
        let payload = r.take(elems)?.to_vec();
        records.push(RawTensor {
            name,
            dtype,
            shape,
            payload,
        });
    }
    if r.pos != body.len() {
        return Err(Error::CheckpointFormat(format!(
            "{} trailing bytes after the tensor table",
            body.len() - r.pos
        )));
    }
    Ok((echo, records))
}

fn checkpoint_records<T: Real>(ck: &Checkpoint<T>) -> Vec<RawTensor> {
    let mut out = Vec::new();
    for (name, t) in ck.model.embed.named_params() {
        out.push(RawTensor::real(format!("embed.{name}"), t));
    }
    for (name, t) in ck.model.embed.named_buffers() {
        out.push(RawTensor::real(format!("embed.{name}"), t));
    }
    for (name, t) in RidgeHead::<T>::NAMES.iter().zip(ck.model.head.to_tensors()) {
        out.push(RawTensor::real(name.to_string(), &t));
    }
    let names: Vec<String> = ck.model.named_params().into_iter().map(|(n, _)| n).collect();
    for (i, name) in names.iter().enumerate() {
        out.push(RawTensor::real(format!("adam.m.{name}"), &ck.adam.m[i]));
        out.push(RawTensor::real(format!("adam.v.{name}"), &ck.adam.v[i]));
    }
    out.push(RawTensor::u64s("adam.step", &[ck.adam.step]));
    out.push(RawTensor::u64s("state.epoch", &[ck.epoch as u64]));
    out.push(RawTensor::u64s("state.seed", &[ck.config.seed]));
    let epochs: Vec<u64> = ck.history.iter().map(|m| m.epoch as u64).collect();
    let losses: Vec<f64> = ck.history.iter().map(|m| m.mean_loss).collect();
    let mious: Vec<f64> = ck.history.iter().map(|m| m.eval_miou.unwrap_or(f64::NAN)).collect();
    out.push(RawTensor::u64s("metrics.epoch", &epochs));
    out.push(RawTensor::f64s("metrics.mean_loss", &losses));
    out.push(RawTensor::f64s("metrics.eval_miou", &mious));
    out
}

pub fn encode_checkpoint<T: Real>(ck: &Checkpoint<T>) -> Vec<u8> {
    encode(&ck.config.to_toml(), &checkpoint_records(ck))
}

pub fn save_checkpoint<T: Real>(path: &Path, ck: &Checkpoint<T>) -> Result<()> {
    let bytes = encode_checkpoint(ck);
    // write-then-rename so a crash never leaves a half-written checkpoint
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (echo, records) = decode(bytes)?;
    let config: TrainConfig =
        toml::from_str(&echo).map_err(|e| Error::CheckpointFormat(format!("config echo: {e}")))?;
    config
        .validate()
        .map_err(|e| Error::CheckpointFormat(format!("config echo: {e}")))?;
    let mut table: std::collections::HashMap<String, RawTensor> =
        records.into_iter().map(|r| (r.name.clone(), r)).collect();
    let mut take = |name: &str| {
        table
            .remove(name)
            .ok_or_else(|| Error::CheckpointFormat(format!("missing tensor {name}")))
    };
    fn fill<T: Real>(dst: &mut Tensor<T>, raw: RawTensor) -> Result<()> {
        let t = raw.to_real::<T>()?;
        if t.shape() != dst.shape() {
            return Err(Error::CheckpointFormat(format!(
                "tensor {} has shape {:?}, config implies {:?}",
                raw.name,
                t.shape(),
                dst.shape()
            )));
        }
        *dst = t;
        Ok(())
    }

    let mut model = Model::<T>::new(&config.embed, config.head, 0)?;
    let param_names: Vec<String> = model.embed.named_params().into_iter().map(|(n, _)| n).collect();
    for (dst, name) in model.embed.params_mut().into_iter().zip(&param_names) {
        fill(dst, take(&format!("embed.{name}"))?)?;
    }
    let buffer_names: Vec<String> = model.embed.named_buffers().into_iter().map(|(n, _)| n).collect();
    for (dst, name) in model.embed.buffers_mut().into_iter().zip(&buffer_names) {
        fill(dst, take(&format!("embed.{name}"))?)?;
    }
    let mut head = model.head.to_tensors();
    for (dst, name) in head.iter_mut().zip(RidgeHead::<T>::NAMES) {
        fill(dst, take(name)?)?;
    }
    model.head = RidgeHead::from_tensors(&head)?;

    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let shapes = model.param_shapes();
    let refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut adam = AdamState::new(config.adam(), &refs);
    for (i, name) in names.iter().enumerate() {
        fill(&mut adam.m[i], take(&format!("adam.m.{name}"))?)?;
        fill(&mut adam.v[i], take(&format!("adam.v.{name}"))?)?;
    }
    let scalar_u64 = |r: RawTensor| -> Result<u64> {
        match r.to_u64s()?.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::CheckpointFormat(format!("{} must hold one value", r.name))),
        }
    };
    adam.step = scalar_u64(take("adam.step")?)?;
    let epoch = scalar_u64(take("state.epoch")?)? as usize;
    let seed = scalar_u64(take("state.seed")?)?;
    if seed != config.seed {
        return Err(Error::CheckpointFormat(format!(
            "stored seed {seed} disagrees with config seed {}",
            config.seed
        )));
    }
    let epochs = take("metrics.epoch")?.to_u64s()?;
    let losses = take("metrics.mean_loss")?.to_f64s()?;
    let mious = take("metrics.eval_miou")?.to_f64s()?;
    if epochs.len() != losses.len() || epochs.len() != mious.len() {
        return Err(Error::CheckpointFormat("metric columns differ in length".into()));
    }
    let history = epochs
        .iter()
        .zip(losses)
        .zip(mious)
        .map(|((&e, l), m)| EpochMetrics {
            epoch: e as usize,
            mean_loss: l,
            eval_miou: (!m.is_nan()).then_some(m),
        })
        .collect();
    if let Some(extra) = table.keys().next() {
        return Err(Error::CheckpointFormat(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint {
        config,
        model,
        adam,
        epoch,
        history,
    })
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Element type stored for the model parameters of a checkpoint file.
pub fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (echo, _) = decode(&bytes)?;
    let config: TrainConfig =
        toml::from_str(&echo).map_err(|e| Error::CheckpointFormat(format!("config echo: {e}")))?;
    Ok(config.precision)
}
