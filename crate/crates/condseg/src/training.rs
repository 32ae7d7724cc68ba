//! Deterministic training: Adam, triangular cyclic learning rate,
//! best-by-validation checkpointing.
//!
//! Determinism contract: a fixed `TrainConfig.seed` fully determines
//! shuffling, and therefore the metric history and checkpoint bytes,
//! given the same dataset and initial model. Everything runs
//! single-threaded over one model instance.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::f1_score;
use crate::metadata::MetadataSchema;
use crate::ops;
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::synth::{Dataset, Sample, Split};
use crate::tape::{Gradients, Tape};
use crate::tensor::Tensor;
use crate::unet::{binarize_logits, ConditionedUNet, UNetConfig};

// ---------------------------------------------------------------------------
// Cyclic learning rate
// ---------------------------------------------------------------------------

/// Piecewise-linear triangular schedule, advanced per batch: the rate
/// climbs from `lr_min` to `lr_max` over the first half of each cycle
/// and back down over the second half.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CyclicLrConfig {
    pub lr_min: f64,
    pub lr_max: f64,
    pub cycles: usize,
    pub total_batches: usize,
}

impl CyclicLrConfig {
    pub fn new(total_batches: usize) -> Self {
        CyclicLrConfig {
            lr_min: 2e-4,
            lr_max: 8e-4,
            cycles: 8,
            total_batches,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min < self.lr_max) {
            return Err(Error::InvalidConfig(format!(
                "cyclic lr requires lr_min < lr_max, got [{}, {}]",
                self.lr_min, self.lr_max
            )));
        }
        if self.cycles == 0 || self.total_batches == 0 {
            return Err(Error::InvalidConfig(
                "cyclic lr requires cycles >= 1 and total_batches >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Learning rate for a batch index in `[0, total_batches)`.
pub fn cyclic_lr(cfg: &CyclicLrConfig, batch_index: usize) -> Result<f64> {
    cfg.validate()?;
    if batch_index >= cfg.total_batches {
        return Err(Error::invalid(
            "cyclic_lr",
            format!(
                "batch index {batch_index} out of range 0..{}",
                cfg.total_batches
            ),
        ));
    }
    // Position within the cycle in [0, 1).
    let position = batch_index as f64 * cfg.cycles as f64 / cfg.total_batches as f64;
    let phase = position.fract();
    Ok(cfg.lr_min + (cfg.lr_max - cfg.lr_min) * (1.0 - (2.0 * phase - 1.0).abs()))
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    pub t: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ParamSet<S>) -> Self {
        AdamState {
            m: params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// Standard bias-corrected update. Consumes the gradients (they are
    /// not reusable afterwards); every parameter must have one.
    pub fn step(
        &mut self,
        params: &mut ParamSet<S>,
        grads: Gradients<S>,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let beta1 = S::from_f64(self.beta1);
        let beta2 = S::from_f64(self.beta2);
        let one = S::one();
        let correction1 = S::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let correction2 = S::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr_s = S::from_f64(lr);
        let eps = S::from_f64(self.epsilon);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let grad = grads.param(id).ok_or_else(|| {
                Error::invalid(
                    "adam_step",
                    format!("missing gradient for parameter {:?}", params.get(id).name),
                )
            })?;
            let g = grad.clone();
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let value = params.value_mut(id);
            for i in 0..g.numel() {
                let gi = g.data()[i];
                let mi = beta1 * m.data()[i] + (one - beta1) * gi;
                let vi = beta2 * v.data()[i] + (one - beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / correction1;
                let v_hat = vi / correction2;
                value.data_mut()[i] = value.data()[i] - lr_s * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Train configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Bce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetadataMode {
    Correct,
    Dummy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointPolicy {
    BestVal,
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub metadata_mode: MetadataMode,
    pub checkpoint_policy: CheckpointPolicy,
    pub lr_min: f64,
    pub lr_max: f64,
    pub cycles: usize,
    /// Binarization threshold for the validation F1 column.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            seed: 0,
            loss: LossKind::Bce,
            metadata_mode: MetadataMode::Correct,
            checkpoint_policy: CheckpointPolicy::BestVal,
            lr_min: 2e-4,
            lr_max: 8e-4,
            cycles: 8,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_f1: f64,
    pub lr_last: f64,
}

/// Metric history CSV: `epoch,train_loss,val_loss,val_f1,lr_last`.
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,val_f1,lr_last\n");
    for row in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.epoch, row.train_loss, row.val_loss, row.val_f1, row.lr_last
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

/// Stack a batch of samples into (images, masks, metadata) tensors,
/// honoring the metadata mode.
pub fn assemble_batch(
    samples: &[&Sample],
    schema: &MetadataSchema,
    uses_metadata: bool,
    mode: MetadataMode,
) -> Result<(Tensor<f32>, Tensor<f32>, Option<Tensor<f32>>)> {
    let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
    let masks: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.mask).collect();
    let image = Tensor::stack(&images)?;
    let mask = Tensor::stack(&masks)?;
    let meta = if uses_metadata {
        let rows: Vec<Tensor<f32>> = samples
            .iter()
            .map(|s| match mode {
                MetadataMode::Correct => schema.encode(&s.record),
                MetadataMode::Dummy => Ok(schema.dummy()),
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor<f32>> = rows.iter().collect();
        Some(Tensor::stack(&refs)?)
    } else {
        None
    };
    Ok((image, mask, meta))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"CCKP";
const CHECKPOINT_VERSION: u16 = 1;

/// Serializable training artifact: model configuration, config echo,
/// named parameters, best-epoch bookkeeping, and the shuffle RNG state
/// at capture time.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: UNetConfig,
    pub train: TrainConfig,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub rng_state: RngState,
    pub params: Vec<(String, Tensor<f32>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed_hex: String,
    pub stream: u64,
    /// Decimal u128; TOML has no native 128-bit integers.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed_hex: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        if self.seed_hex.len() != 64 {
            return Err(Error::Checkpoint("bad rng seed length".into()));
        }
        let mut seed = [0u8; 32];
        for (i, chunk) in self.seed_hex.as_bytes().chunks(2).enumerate() {
            let hex = std::str::from_utf8(chunk).map_err(|_| bad_hex())?;
            seed[i] = u8::from_str_radix(hex, 16).map_err(|_| bad_hex())?;
        }
        let word_pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint("bad rng word position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

fn bad_hex() -> Error {
    Error::Checkpoint("bad rng seed hex".into())
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model: UNetConfig,
    train: TrainConfig,
    best_epoch: usize,
    best_val_loss: f64,
    rng: RngState,
    params: Vec<ParamHeader>,
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            model: self.model,
            train: self.train,
            best_epoch: self.best_epoch,
            best_val_loss: self.best_val_loss,
            rng: self.rng_state.clone(),
            params: self
                .params
                .iter()
                .map(|(name, t)| ParamHeader {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header_text = toml::to_string(&header)
            .map_err(|e| Error::Checkpoint(format!("header serialization failed: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_text.len() as u32).to_le_bytes());
        out.extend_from_slice(header_text.as_bytes());
        for (_, tensor) in &self.params {
            for v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
        let corrupt = |detail: &str| Error::CorruptFile {
            path: origin.to_path_buf(),
            detail: detail.to_string(),
        };
        let mut cursor = std::io::Cursor::new(bytes);
        let mut magic = [0u8; 4];
        cursor
            .read_exact(&mut magic)
            .map_err(|_| corrupt("truncated magic"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mut version = [0u8; 2];
        cursor
            .read_exact(&mut version)
            .map_err(|_| corrupt("truncated version"))?;
        let version = u16::from_le_bytes(version);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let mut len = [0u8; 4];
        cursor
            .read_exact(&mut len)
            .map_err(|_| corrupt("truncated header length"))?;
        let mut header_bytes = vec![0u8; u32::from_le_bytes(len) as usize];
        cursor
            .read_exact(&mut header_bytes)
            .map_err(|_| corrupt("truncated header"))?;
        let header_text =
            std::str::from_utf8(&header_bytes).map_err(|_| corrupt("header not utf-8"))?;
        let header: CheckpointHeader =
            toml::from_str(header_text).map_err(|_| corrupt("unparseable header"))?;
        let mut params = Vec::with_capacity(header.params.len());
        for p in header.params {
            let numel: usize = p.shape.iter().product();
            let mut payload = vec![0u8; numel * 4];
            cursor
                .read_exact(&mut payload)
                .map_err(|_| corrupt(&format!("truncated payload for {}", p.name)))?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.push((p.name, Tensor::from_vec(p.shape, data)));
        }
        Ok(Checkpoint {
            model: header.model,
            train: header.train,
            best_epoch: header.best_epoch,
            best_val_loss: header.best_val_loss,
            rng_state: header.rng,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }

    /// Rebuild the model this checkpoint was saved from.
    pub fn restore_model(&self) -> Result<ConditionedUNet<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = ConditionedUNet::build(self.model, &mut rng)?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    /// Load parameters into an existing model, requiring exact name and
    /// shape agreement.
    pub fn load_into(&self, model: &mut ConditionedUNet<f32>) -> Result<()> {
        model.params_mut().load_named(&self.params)
    }
}

// ---------------------------------------------------------------------------
// The training loop
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
}

fn snapshot_params(params: &ParamSet<f32>) -> Vec<(String, Tensor<f32>)> {
    params
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.clone()))
        .collect()
}

/// Mean loss and mean per-sample F1 over a split, in batch order
/// (no shuffling).
fn evaluate_split(
    model: &ConditionedUNet<f32>,
    samples: &[&Sample],
    schema: &MetadataSchema,
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let uses_meta = model.config().conditioning.uses_metadata();
    let mut loss_sum = 0.0;
    let mut f1_sum = 0.0;
    let mut n = 0usize;
    for chunk in samples.chunks(cfg.batch_size) {
        let (image, mask, meta) = assemble_batch(chunk, schema, uses_meta, cfg.metadata_mode)?;
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, &image, meta.as_ref())?;
        let target = tape.leaf(mask.clone());
        let loss = ops::bce_with_logits(&mut tape, logits, target, None)?;
        let loss_v = tape.value(loss).item() as f64;
        if !loss_v.is_finite() {
            return Err(Error::Diverged("validation loss is not finite".into()));
        }
        loss_sum += loss_v * chunk.len() as f64;
        let pred = binarize_logits(tape.value(logits), cfg.threshold);
        for (i, sample) in chunk.iter().enumerate() {
            let pred_i = pred.index_axis0(i);
            f1_sum += f1_score(&pred_i, &sample.mask)?;
        }
        n += chunk.len();
    }
    Ok((loss_sum / n as f64, f1_sum / n as f64))
}

/// Train a model on the dataset's train split, validating after each
/// epoch and keeping the best-by-validation-loss parameters (or the
/// last, per policy). Aborts with a structured error if the loss leaves
/// the finite range.
pub fn train(
    model: &mut ConditionedUNet<f32>,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.config().out_channels != dataset.mask_channels {
        return Err(Error::InvalidConfig(format!(
            "model has {} output channels but dataset masks have {}",
            model.config().out_channels,
            dataset.mask_channels
        )));
    }
    if model.config().conditioning.uses_metadata()
        && model.config().meta_dim != dataset.schema.total_dim()
    {
        return Err(Error::InvalidConfig(format!(
            "model meta_dim {} != schema width {}",
            model.config().meta_dim,
            dataset.schema.total_dim()
        )));
    }
    let train_samples: Vec<&Sample> = dataset.split(Split::Train).collect();
    let val_samples: Vec<&Sample> = dataset.split(Split::Val).collect();
    if train_samples.is_empty() || val_samples.is_empty() {
        return Err(Error::Dataset(
            "training requires non-empty train and val splits".into(),
        ));
    }
    let uses_meta = model.config().conditioning.uses_metadata();
    let batches_per_epoch = train_samples.len().div_ceil(cfg.batch_size);
    let lr_cfg = CyclicLrConfig {
        lr_min: cfg.lr_min,
        lr_max: cfg.lr_max,
        cycles: cfg.cycles,
        total_batches: cfg.epochs * batches_per_epoch,
    };
    lr_cfg.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.params());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Vec<(String, Tensor<f32>)>)> = None;
    let mut global_batch = 0usize;
    let mut lr_last = cfg.lr_min;

    let mut indices: Vec<usize> = (0..train_samples.len()).collect();
    for epoch in 0..cfg.epochs {
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in indices.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| train_samples[i]).collect();
            let (image, mask, meta) =
                assemble_batch(&batch, &dataset.schema, uses_meta, cfg.metadata_mode)?;
            let lr = cyclic_lr(&lr_cfg, global_batch)?;
            lr_last = lr;
            global_batch += 1;

            let mut tape = Tape::new();
            let logits = model.forward(&mut tape, &image, meta.as_ref())?;
            let target = tape.leaf(mask);
            let loss = ops::bce_with_logits(&mut tape, logits, target, None)?;
            let loss_v = tape.value(loss).item() as f64;
            if !loss_v.is_finite() || loss_v > 1e6 {
                return Err(Error::Diverged(format!(
                    "training loss {loss_v} at epoch {epoch}, batch {global_batch}"
                )));
            }
            loss_sum += loss_v * batch.len() as f64;
            let grads = tape.backward(loss)?;
            adam.step(model.params_mut(), grads, lr)?;
        }
        let train_loss = loss_sum / train_samples.len() as f64;
        let (val_loss, val_f1) = evaluate_split(model, &val_samples, &dataset.schema, cfg)?;
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_f1,
            lr_last,
        });
        let improved = best
            .as_ref()
            .map(|(_, best_loss, _)| val_loss < *best_loss)
            .unwrap_or(true);
        if improved {
            best = Some((epoch, val_loss, snapshot_params(model.params())));
        }
    }

    let (best_epoch, best_val_loss, best_params) = best.expect("epochs >= 1");
    let (kept_epoch, kept_loss, kept_params) = match cfg.checkpoint_policy {
        CheckpointPolicy::BestVal => (best_epoch, best_val_loss, best_params),
        CheckpointPolicy::Last => {
            let last = history.last().expect("epochs >= 1");
            (last.epoch, last.val_loss, snapshot_params(model.params()))
        }
    };
    // Leave the model holding the checkpointed parameters.
    model.params_mut().load_named(&kept_params)?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model: *model.config(),
            train: *cfg,
            best_epoch: kept_epoch,
            best_val_loss: kept_loss,
            rng_state: RngState::capture(&rng),
            params: kept_params,
        },
        history,
    })
}
