//! Desk-scale softmax classifier trained with plain SGD and a
//! reduce-on-plateau learning rate.
//!
//! The model is an optional ReLU hidden layer (the feature extractor)
//! followed by a linear head. With `hidden_dim = 0` the features are the
//! flattened input crop and the model is multinomial logistic regression.
//! Training sees a single center crop of each train image.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{class_counts, Dataset, LabeledImage, Reader};
use crate::ensemble::mean_top1_error;
use crate::losses::{class_weights, loss_with_grad_slice, ClassWeights, LossConfig};
use crate::prob::{argmax, ClassIndex, LogitVector};
use crate::tta::{center_crop, Image};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"BSCECKPT1";
const MAGIC_FAMILY: &[u8] = b"BSCECKPT";

/// Dot product with eight independent partial sums (fixed summation order).
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]) + tail
}

/// Fully connected layer, weights stored `outputs × inputs` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    inputs: usize,
    outputs: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn uniform(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (inputs as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        Self {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    fn row(&self, o: usize) -> &[f64] {
        &self.weights[o * self.inputs..(o + 1) * self.inputs]
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| self.bias[o] + dot(self.row(o), x))
            .collect()
    }

    /// `dW += g ⊗ x`, `db += g`.
    fn accumulate(&mut self, g: &[f64], x: &[f64]) {
        for (o, go) in g.iter().enumerate() {
            if *go == 0.0 {
                continue;
            }
            let row = &mut self.weights[o * self.inputs..(o + 1) * self.inputs];
            row.iter_mut().zip(x).for_each(|(w, v)| *w += go * v);
            self.bias[o] += go;
        }
    }

    /// `Wᵀ g`
    fn backprop(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.inputs];
        for (o, go) in g.iter().enumerate() {
            self.row(o)
                .iter()
                .zip(out.iter_mut())
                .for_each(|(w, d)| *d += go * w);
        }
        out
    }

    fn step(&mut self, grad: &Dense, scale: f64) {
        self.weights
            .iter_mut()
            .zip(&grad.weights)
            .for_each(|(w, g)| *w -= scale * g);
        self.bias
            .iter_mut()
            .zip(&grad.bias)
            .for_each(|(b, g)| *b -= scale * g);
    }

    fn all_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    input_side: usize,
    hidden: Option<Dense>,
    head: Dense,
}

/// Seeded model initialisation: weights `U(-1/√fan_in, 1/√fan_in)`, zero biases.
pub fn init_model(
    input_side: usize,
    hidden_dim: usize,
    classes: usize,
    seed: u64,
) -> Result<ModelParams> {
    if input_side == 0 {
        return Err(Error::InvalidInput("input_side must be >= 1".into()));
    }
    if classes < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_in = input_side * input_side;
    let hidden = (hidden_dim > 0).then(|| Dense::uniform(d_in, hidden_dim, &mut rng));
    let d_feat = if hidden_dim > 0 { hidden_dim } else { d_in };
    let head = Dense::uniform(d_feat, classes, &mut rng);
    Ok(ModelParams {
        input_side,
        hidden,
        head,
    })
}

impl ModelParams {
    pub fn from_layers(input_side: usize, hidden: Option<Dense>, head: Dense) -> Result<Self> {
        let d_in = input_side * input_side;
        let d_feat = hidden.as_ref().map_or(d_in, |h| h.outputs);
        if let Some(h) = &hidden {
            if h.inputs != d_in {
                return Err(Error::Shape {
                    expected: d_in,
                    got: h.inputs,
                });
            }
        }
        if head.inputs != d_feat {
            return Err(Error::Shape {
                expected: d_feat,
                got: head.inputs,
            });
        }
        Ok(Self {
            input_side,
            hidden,
            head,
        })
    }

    pub fn input_side(&self) -> usize {
        self.input_side
    }

    pub fn classes(&self) -> usize {
        self.head.outputs
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.as_ref().map_or(0, |h| h.outputs)
    }

    pub fn feature_dim(&self) -> usize {
        self.head.inputs
    }

    pub fn hidden(&self) -> Option<&Dense> {
        self.hidden.as_ref()
    }

    pub fn head(&self) -> &Dense {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Dense {
        &mut self.head
    }

    pub fn hidden_mut(&mut self) -> Option<&mut Dense> {
        self.hidden.as_mut()
    }

    /// All parameters in checkpoint order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(h) = &self.hidden {
            out.extend_from_slice(&h.weights);
            out.extend_from_slice(&h.bias);
        }
        out.extend_from_slice(&self.head.weights);
        out.extend_from_slice(&self.head.bias);
        out
    }

    fn zeros_like(&self) -> Self {
        Self {
            input_side: self.input_side,
            hidden: self
                .hidden
                .as_ref()
                .map(|h| Dense::zeros(h.inputs, h.outputs)),
            head: Dense::zeros(self.head.inputs, self.head.outputs),
        }
    }

    fn all_finite(&self) -> bool {
        self.head.all_finite() && self.hidden.as_ref().is_none_or(Dense::all_finite)
    }

    fn features_of(&self, x: &[f64]) -> Vec<f64> {
        match &self.hidden {
            Some(h) => h.apply(x).into_iter().map(|v| v.max(0.0)).collect(),
            None => x.to_vec(),
        }
    }

    /// Classifier head applied to a feature vector.
    pub fn head_logits(&self, features: &[f64]) -> Vec<f64> {
        self.head.apply(features)
    }

    /// Features and logits of one `input_side × input_side` crop.
    pub fn forward(&self, crop: &Image) -> Result<(Vec<f64>, LogitVector)> {
        if crop.height() != self.input_side || crop.width() != self.input_side {
            return Err(Error::Shape {
                expected: self.input_side * self.input_side,
                got: crop.height() * crop.width(),
            });
        }
        let features = self.features_of(crop.pixels());
        let logits = LogitVector::new(self.head_logits(&features))?;
        Ok((features, logits))
    }

    /// Plain inference: center crop to the input side, forward, argmax.
    pub fn predict_plain(&self, image: &Image) -> Result<ClassIndex> {
        let (_, logits) = self.forward(&center_crop(image, self.input_side)?)?;
        Ok(argmax(logits.as_slice()))
    }
}

pub fn forward(params: &ModelParams, crop: &Image) -> Result<(Vec<f64>, LogitVector)> {
    params.forward(crop)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_side: usize,
    /// 0 selects the linear model.
    pub hidden_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_side: 24,
            hidden_dim: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub initial_lr: f64,
    pub lr_factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            initial_lr: 0.01,
            lr_factor: 0.1,
            patience: 3,
            min_delta: 1e-4,
            epochs: 30,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !self.initial_lr.is_finite() || self.initial_lr < 0.0 {
            return bad(format!("initial_lr must be >= 0, got {}", self.initial_lr));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad(format!(
                "lr_factor must be in (0, 1), got {}",
                self.lr_factor
            ));
        }
        if self.patience == 0 {
            return bad("patience must be >= 1".into());
        }
        if !self.min_delta.is_finite() || self.min_delta < 0.0 {
            return bad(format!("min_delta must be >= 0, got {}", self.min_delta));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.model.input_side == 0 {
            return bad("model.input_side must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_error: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    /// Whether the plateau rule cut the rate after this epoch.
    pub lr_reduced: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub config: TrainConfig,
    pub current_lr: f64,
    pub best_val_error: f64,
    pub epochs_since_improvement: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(params: ModelParams, config: TrainConfig) -> Self {
        Self {
            params,
            current_lr: config.initial_lr,
            config,
            best_val_error: f64::INFINITY,
            epochs_since_improvement: 0,
            history: Vec::new(),
        }
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    pub fn lr_reductions(&self) -> usize {
        self.history.iter().filter(|r| r.lr_reduced).count()
    }

    /// Reduce-on-plateau update; returns whether the rate was cut.
    pub fn plateau_step(&mut self, val_error: f64, cfg: &TrainConfig) -> bool {
        if val_error < self.best_val_error - cfg.min_delta {
            self.best_val_error = val_error;
            self.epochs_since_improvement = 0;
            return false;
        }
        self.epochs_since_improvement += 1;
        if self.epochs_since_improvement >= cfg.patience {
            self.current_lr *= cfg.lr_factor;
            self.epochs_since_improvement = 0;
            return true;
        }
        false
    }
}

pub fn plateau_step(state: &mut TrainState, val_error: f64, cfg: &TrainConfig) -> bool {
    state.plateau_step(val_error, cfg)
}

pub(crate) fn crop_input(sample: &LabeledImage, side: usize) -> Result<Vec<f64>> {
    Ok(center_crop(&sample.to_image(), side)?.pixels().to_vec())
}

fn weights_for(dataset: &Dataset, loss: &LossConfig) -> Result<ClassWeights> {
    if loss.kind.uses_class_weights() {
        class_weights(&class_counts(dataset)?)
    } else {
        ClassWeights::balanced(dataset.classes)
    }
}

/// Mean loss over `batch` and the summed-then-averaged parameter gradient.
pub(crate) fn batch_gradient(
    params: &ModelParams,
    inputs: &[&[f64]],
    labels: &[ClassIndex],
    loss: &LossConfig,
    weights: &ClassWeights,
) -> Result<(f64, ModelParams)> {
    let classes = params.classes();
    let mut grad = params.zeros_like();
    let mut total = 0.0;
    let mut target = vec![0.0; classes];
    for (x, &y) in inputs.iter().zip(labels) {
        let (pre, features) = match &params.hidden {
            Some(h) => {
                let pre = h.apply(x);
                let f = pre.iter().map(|v| v.max(0.0)).collect();
                (Some(pre), f)
            }
            None => (None, x.to_vec()),
        };
        let logits = params.head.apply(&features);
        target.fill(0.0);
        target[y] = 1.0;
        let (value, g) = loss_with_grad_slice(loss, &logits, &target, weights.weights())?;
        total += value;
        if let (Some(h), Some(pre)) = (grad.hidden.as_mut(), pre) {
            let mut back = params.head.backprop(&g);
            back.iter_mut().zip(&pre).for_each(|(d, p)| {
                if *p <= 0.0 {
                    *d = 0.0
                }
            });
            h.accumulate(&back, x);
        }
        grad.head.accumulate(&g, &features);
    }
    let n = inputs.len() as f64;
    let scale = |d: &mut Dense| {
        d.weights
            .iter_mut()
            .chain(d.bias.iter_mut())
            .for_each(|v| *v /= n);
    };
    scale(&mut grad.head);
    if let Some(h) = grad.hidden.as_mut() {
        scale(h);
    }
    Ok((total / n, grad))
}

fn sgd_step(params: &mut ModelParams, grad: &ModelParams, lr: f64) {
    params.head.step(&grad.head, lr);
    if let (Some(p), Some(g)) = (params.hidden.as_mut(), grad.hidden.as_ref()) {
        p.step(g, lr);
    }
}

/// Mean top-1 error of plain (center-crop) inference.
pub fn evaluate_plain(params: &ModelParams, samples: &[LabeledImage]) -> Result<f64> {
    let preds = samples
        .iter()
        .map(|s| params.predict_plain(&s.to_image()))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<_> = samples.iter().map(|s| s.true_label).collect();
    mean_top1_error(&preds, &labels)
}

fn check_compat(dataset: &Dataset, params: &ModelParams) -> Result<()> {
    if dataset.classes != params.classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes, model has {}",
            dataset.classes,
            params.classes()
        )));
    }
    if params.input_side() > dataset.image_side {
        return Err(Error::Config(format!(
            "model input side {} exceeds image side {}",
            params.input_side(),
            dataset.image_side
        )));
    }
    Ok(())
}

/// Trains `model` for `cfg.epochs` epochs.
pub fn train(dataset: &Dataset, model: ModelParams, cfg: &TrainConfig) -> Result<TrainState> {
    resume(dataset, TrainState::new(model, cfg.clone()), cfg)
}

/// Continues training until `cfg.epochs` epochs are recorded in `state`.
///
/// The shuffle of epoch `e` depends only on `(cfg.seed, e)`, so resuming a
/// checkpoint reproduces the uninterrupted run exactly.
pub fn resume(dataset: &Dataset, mut state: TrainState, cfg: &TrainConfig) -> Result<TrainState> {
    cfg.validate()?;
    check_compat(dataset, &state.params)?;
    if dataset.train.is_empty() {
        return Err(Error::InvalidInput("train split is empty".into()));
    }
    state.config = cfg.clone();
    if state.epochs_done() >= cfg.epochs {
        return Ok(state);
    }
    let side = state.params.input_side();
    let weights = weights_for(dataset, &cfg.loss)?;
    let inputs = dataset
        .train
        .iter()
        .map(|s| crop_input(s, side))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<_> = dataset.train.iter().map(|s| s.observed_label).collect();
    info!(
        "training {} epochs: loss {} (alpha {:?}, beta {:?}, A {:?}), lr {:?}, factor {:?}, patience {}, batch {}",
        cfg.epochs,
        cfg.loss.kind,
        cfg.loss.alpha,
        cfg.loss.beta,
        cfg.loss.clamp_floor,
        cfg.initial_lr,
        cfg.lr_factor,
        cfg.patience,
        cfg.batch_size
    );

    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for epoch in state.epochs_done() + 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let lr = state.current_lr;
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| inputs[i].as_slice()).collect();
            let ys: Vec<_> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, grad) = batch_gradient(&state.params, &xs, &ys, &cfg.loss, &weights)
                .map_err(|e| match e {
                    Error::InvalidInput(_) => Error::Diverged { epoch },
                    other => other,
                })?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            loss_sum += loss * batch.len() as f64;
            if lr != 0.0 {
                sgd_step(&mut state.params, &grad, lr);
            }
        }
        if !state.params.all_finite() {
            return Err(Error::Diverged { epoch });
        }
        let train_loss = loss_sum / inputs.len() as f64;
        let val_error = if dataset.val.is_empty() {
            1.0
        } else {
            evaluate_plain(&state.params, &dataset.val)?
        };
        let lr_reduced = state.plateau_step(val_error, cfg);
        debug!("epoch {epoch}: loss {train_loss:.6}, val error {val_error:.4}, lr {lr}");
        state.history.push(EpochRecord {
            epoch,
            train_loss,
            val_error,
            lr,
            lr_reduced,
        });
    }
    Ok(state)
}

fn write_dense(w: &mut impl Write, d: &Dense) -> std::io::Result<()> {
    for v in d.weights.iter().chain(&d.bias) {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_dense(r: &mut Reader<'_>, inputs: usize, outputs: usize) -> Result<Dense> {
    let weights = (0..inputs * outputs)
        .map(|_| r.f64())
        .collect::<Result<_>>()?;
    let bias = (0..outputs).map(|_| r.f64()).collect::<Result<_>>()?;
    Ok(Dense {
        inputs,
        outputs,
        weights,
        bias,
    })
}

/// Writes `state` as: magic, config JSON (u64 length prefix), shapes (u32),
/// f64 weight blocks, scheduler state, history records. All little-endian.
pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    let config = serde_json::to_vec(&state.config)
        .map_err(|e| Error::Config(format!("cannot encode config: {e}")))?;
    w.write_all(&(config.len() as u64).to_le_bytes())?;
    w.write_all(&config)?;
    let p = &state.params;
    for v in [p.input_side, p.classes(), p.hidden_dim()] {
        let v = u32::try_from(v)
            .map_err(|_| Error::InvalidInput(format!("shape {v} does not fit in u32")))?;
        w.write_all(&v.to_le_bytes())?;
    }
    if let Some(h) = &p.hidden {
        write_dense(&mut w, h)?;
    }
    write_dense(&mut w, &p.head)?;
    w.write_all(&state.current_lr.to_le_bytes())?;
    w.write_all(&state.best_val_error.to_le_bytes())?;
    w.write_all(&(state.epochs_since_improvement as u64).to_le_bytes())?;
    w.write_all(&(state.history.len() as u64).to_le_bytes())?;
    for r in &state.history {
        w.write_all(&(r.epoch as u64).to_le_bytes())?;
        w.write_all(&r.train_loss.to_le_bytes())?;
        w.write_all(&r.val_error.to_le_bytes())?;
        w.write_all(&r.lr.to_le_bytes())?;
        w.write_all(&[u8::from(r.lr_reduced)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    parse_checkpoint(&fs::read(path)?)
}

fn parse_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader::new(bytes);
    let magic = r
        .take(CHECKPOINT_MAGIC.len())
        .map_err(|_| Error::Corrupt("file shorter than header".into()))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Version(if magic.starts_with(MAGIC_FAMILY) {
            format!(
                "checkpoint format version {:?} is not supported",
                String::from_utf8_lossy(&magic[MAGIC_FAMILY.len()..])
            )
        } else {
            "not a checkpoint file (bad magic)".into()
        }));
    }
    let config_len =
        usize::try_from(r.u64()?).map_err(|_| Error::Corrupt("config length overflow".into()))?;
    let config: TrainConfig = serde_json::from_slice(r.take(config_len)?)
        .map_err(|e| Error::Corrupt(format!("config block: {e}")))?;
    let input_side = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let hidden_dim = r.u32()? as usize;
    if input_side == 0 || classes < 2 {
        return Err(Error::Corrupt(format!(
            "bad shapes: input side {input_side}, {classes} classes"
        )));
    }
    let d_in = input_side
        .checked_mul(input_side)
        .ok_or_else(|| Error::Corrupt("input size overflow".into()))?;
    // Reject sizes that cannot fit in the remaining bytes before allocating.
    let d_feat = if hidden_dim > 0 { hidden_dim } else { d_in };
    let needed = [(d_in, hidden_dim), (d_feat, classes)]
        .iter()
        .try_fold(0usize, |acc, (i, o)| {
            i.checked_add(1)?.checked_mul(*o)?.checked_add(acc)
        })
        .and_then(|n| n.checked_mul(8));
    if needed.is_none_or(|n| n > bytes.len()) {
        return Err(Error::Corrupt("weight blocks exceed file size".into()));
    }
    let hidden = if hidden_dim > 0 {
        Some(read_dense(&mut r, d_in, hidden_dim)?)
    } else {
        None
    };
    let head = read_dense(&mut r, d_feat, classes)?;
    let params = ModelParams::from_layers(input_side, hidden, head)?;
    let current_lr = r.f64()?;
    let best_val_error = r.f64()?;
    let epochs_since_improvement = r.u64()? as usize;
    let n = r.u64()? as usize;
    if n > bytes.len() {
        return Err(Error::Corrupt("history length exceeds file size".into()));
    }
    let mut history = Vec::with_capacity(n);
    for _ in 0..n {
        let epoch = r.u64()? as usize;
        let train_loss = r.f64()?;
        let val_error = r.f64()?;
        let lr = r.f64()?;
        let lr_reduced = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::Corrupt(format!("bad flag byte {b}"))),
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_error,
            lr,
            lr_reduced,
        });
    }
    r.finish()?;
    Ok(TrainState {
        params,
        config,
        current_lr,
        best_val_error,
        epochs_since_improvement,
        history,
    })
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, DatasetSpec};
    use crate::losses::LossKind;
    use crate::prob::softmax_slice;

    fn tiny_spec() -> DatasetSpec {
        DatasetSpec {
            classes: 3,
            head_count: 30,
            imbalance_ratio: 3.0,
            noise_rate: 0.2,
            image_side: 6,
            val_per_class: 4,
            test_per_class: 4,
            seed: 1,
            ..DatasetSpec::default()
        }
    }

    fn tiny_cfg(kind: LossKind) -> TrainConfig {
        TrainConfig {
            loss: LossConfig::new(kind),
            model: ModelConfig {
                input_side: 4,
                hidden_dim: 0,
            },
            epochs: 4,
            batch_size: 8,
            seed: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn init_is_seeded_with_zero_biases() {
        let a = init_model(5, 7, 3, 42).unwrap();
        assert_eq!(a, init_model(5, 7, 3, 42).unwrap());
        assert_ne!(a, init_model(5, 7, 3, 43).unwrap());
        assert!(a.hidden().unwrap().bias().iter().all(|b| *b == 0.0));
        assert!(a.head().bias().iter().all(|b| *b == 0.0));
        let bound = 1.0 / 5.0;
        assert!(a
            .hidden()
            .unwrap()
            .weights()
            .iter()
            .all(|w| w.abs() <= bound));

        let linear = init_model(5, 0, 3, 1).unwrap();
        assert!(linear.hidden().is_none());
        assert_eq!(linear.feature_dim(), 25);
        assert!(init_model(0, 0, 3, 1).is_err());
        assert!(init_model(3, 0, 1, 1).is_err());
    }

    #[test]
    fn zero_image_gives_zero_logits() {
        let params = init_model(4, 0, 3, 5).unwrap();
        let (_, z) = params.forward(&Image::filled(4, 4, 0.0)).unwrap();
        assert!(z.as_slice().iter().all(|v| *v == 0.0));
        assert!(matches!(
            params.forward(&Image::filled(5, 5, 0.0)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn head_bias_shift_keeps_prediction() {
        let mut params = init_model(4, 3, 4, 6).unwrap();
        let img = Image::new(4, 4, (0..16).map(|i| i as f64 / 16.0).collect()).unwrap();
        let (_, z) = params.forward(&img).unwrap();
        params
            .head_mut()
            .bias_mut()
            .iter_mut()
            .for_each(|b| *b += 3.5);
        let (_, shifted) = params.forward(&img).unwrap();
        let p = softmax_slice(z.as_slice()).unwrap();
        let ps = softmax_slice(shifted.as_slice()).unwrap();
        assert_eq!(argmax(z.as_slice()), argmax(shifted.as_slice()));
        for k in 0..4 {
            assert!((p[k] - ps[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_matches_naive_matmul() {
        let params = init_model(3, 4, 2, 8).unwrap();
        let img = Image::new(
            3,
            3,
            (0..9).map(|i| (i as f64 * 0.37).sin().abs()).collect(),
        )
        .unwrap();
        let (f, z) = params.forward(&img).unwrap();
        let h = params.hidden().unwrap();
        let x = img.pixels();
        let mut feats = [0.0; 4];
        for o in 0..4 {
            let mut s = h.bias()[o];
            for i in 0..9 {
                s += h.weights()[o * 9 + i] * x[i];
            }
            feats[o] = if s > 0.0 { s } else { 0.0 };
        }
        for o in 0..4 {
            assert!((f[o] - feats[o]).abs() < 1e-14);
        }
        let head = params.head();
        for k in 0..2 {
            let mut s = head.bias()[k];
            for o in 0..4 {
                s += head.weights()[k * 4 + o] * feats[o];
            }
            assert!((z.as_slice()[k] - s).abs() < 1e-14);
        }
    }

    #[test]
    fn plateau_cuts_after_patience() {
        let cfg = TrainConfig::default();
        let mut state = TrainState::new(init_model(2, 0, 2, 0).unwrap(), cfg.clone());
        let cuts: Vec<bool> = [0.5, 0.5, 0.5, 0.5]
            .iter()
            .map(|v| state.plateau_step(*v, &cfg))
            .collect();
        assert_eq!(cuts, [false, false, false, true]);
        assert_eq!(state.current_lr, 0.001);
    }

    #[test]
    fn improving_sequence_never_cuts() {
        let cfg = TrainConfig::default();
        let mut state = TrainState::new(init_model(2, 0, 2, 0).unwrap(), cfg.clone());
        for i in 0..50 {
            assert!(!state.plateau_step(0.9 - i as f64 * 0.01, &cfg));
        }
        assert_eq!(state.current_lr, 0.01);
    }

    #[test]
    fn sub_threshold_improvement_counts_as_plateau() {
        let cfg = TrainConfig::default();
        let mut state = TrainState::new(init_model(2, 0, 2, 0).unwrap(), cfg.clone());
        state.plateau_step(0.5, &cfg);
        state.plateau_step(0.49995, &cfg);
        assert_eq!(state.epochs_since_improvement, 1);
        assert_eq!(state.best_val_error, 0.5);
    }

    #[test]
    fn zero_epochs_and_zero_lr_leave_params() {
        let d = synth_dataset(&tiny_spec()).unwrap();
        let model = init_model(4, 3, 3, 9).unwrap();
        let mut cfg = tiny_cfg(LossKind::Bsce);
        cfg.epochs = 0;
        let s = train(&d, model.clone(), &cfg).unwrap();
        assert_eq!(s.params, model);
        assert!(s.history.is_empty());

        cfg.epochs = 3;
        cfg.initial_lr = 0.0;
        let s = train(&d, model.clone(), &cfg).unwrap();
        assert_eq!(s.params, model);
        assert_eq!(s.history.len(), 3);
    }

    #[test]
    fn training_checks_compatibility() {
        let d = synth_dataset(&tiny_spec()).unwrap();
        let cfg = tiny_cfg(LossKind::Ce);
        assert!(matches!(
            train(&d, init_model(4, 0, 5, 0).unwrap(), &cfg),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            train(&d, init_model(7, 0, 3, 0).unwrap(), &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn divergence_names_the_epoch() {
        let d = synth_dataset(&tiny_spec()).unwrap();
        let mut cfg = tiny_cfg(LossKind::Ce);
        cfg.initial_lr = 1e308;
        let err = train(&d, init_model(4, 0, 3, 0).unwrap(), &cfg).unwrap_err();
        assert!(
            matches!(err, Error::Diverged { epoch } if epoch <= 2),
            "{err:?}"
        );
    }

    #[test]
    fn history_and_lr_bookkeeping() {
        let d = synth_dataset(&tiny_spec()).unwrap();
        let mut cfg = tiny_cfg(LossKind::Sce);
        cfg.epochs = 12;
        cfg.patience = 1;
        let s = train(&d, init_model(4, 0, 3, 3).unwrap(), &cfg).unwrap();
        let epochs: Vec<_> = s.history.iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, (1..=12).collect::<Vec<_>>());
        let expected = (0..s.lr_reductions()).fold(cfg.initial_lr, |lr, _| lr * cfg.lr_factor);
        assert_eq!(s.current_lr, expected);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let d = synth_dataset(&tiny_spec()).unwrap();
        let s = train(
            &d,
            init_model(4, 2, 3, 1).unwrap(),
            &tiny_cfg(LossKind::Bce),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&s, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(parse_checkpoint(&bytes).unwrap(), s);
        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(parse_checkpoint(&bytes[..cut]), Err(Error::Corrupt(_))),
                "cut {cut}"
            );
        }
        let mut v2 = bytes.clone();
        v2[8] = b'2';
        assert!(matches!(parse_checkpoint(&v2), Err(Error::Version(_))));
        let mut other = bytes.clone();
        other[0] = b'X';
        assert!(matches!(parse_checkpoint(&other), Err(Error::Version(_))));
        let mut huge = bytes.clone();
        let shapes_at = 9 + 8 + u64::from_le_bytes(bytes[9..17].try_into().unwrap()) as usize;
        huge[shapes_at..shapes_at + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(parse_checkpoint(&huge), Err(Error::Corrupt(_))));
    }
}
