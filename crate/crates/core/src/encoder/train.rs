use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::model::{class_logits, loss_and_grad, validate_sequence, Gradients, Targets};
use super::ops;
use super::params::EncoderModel;
use super::EncoderError;
use crate::corpus::Dataset;
use crate::tokenizer::{apply_mlm_mask_with, encode_dataset, EncodeOptions, MaskOptions, TokenSequence, Vocab};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-dev-accuracy checkpoint (last epoch when no dev set is given).
    pub model: EncoderModel,
    pub history: Vec<EpochRecord>,
    /// Seconds per epoch; kept apart from `history` so that stays reproducible.
    pub wall_times: Vec<f64>,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub train: TrainConfig,
    pub mask_rate: f64,
    pub mixed_replacement: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                epochs: 5,
                ..TrainConfig::default()
            },
            mask_rate: crate::tokenizer::DEFAULT_MASK_RATE,
            mixed_replacement: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: EncoderModel,
    /// MLM loss of every optimizer step, before the update.
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

/// Linear warmup to the peak rate, then linear decay towards zero.
struct Schedule {
    peak: f64,
    warmup: usize,
    total: usize,
}

impl Schedule {
    fn new(peak: f64, warmup_fraction: f64, total: usize) -> Self {
        let warmup = ((warmup_fraction * total as f64).round() as usize).min(total);
        Self { peak, warmup, total }
    }

    fn rate(&self, step: usize) -> f64 {
        if step < self.warmup {
            self.peak * (step + 1) as f64 / self.warmup as f64
        } else {
            self.peak * (self.total - step) as f64 / (self.total - self.warmup) as f64
        }
    }
}

/// Adaptive moments with decoupled weight decay.
struct AdamW {
    first: Vec<f64>,
    second: Vec<f64>,
    decays: Vec<bool>,
    steps: i32,
}

impl AdamW {
    fn new(model: &EncoderModel) -> Self {
        let n = model.parameter_count();
        let mut decays = vec![false; n];
        for spec in model.layout().specs() {
            decays[spec.range()].fill(spec.kind.decays());
        }
        Self {
            first: vec![0.0; n],
            second: vec![0.0; n],
            decays,
            steps: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &Gradients, lr: f64, weight_decay: f64) {
        self.steps += 1;
        let c1 = 1.0 - BETA1.powi(self.steps);
        let c2 = 1.0 - BETA2.powi(self.steps);
        let moments = self.first.iter_mut().zip(self.second.iter_mut());
        for (((p, &g), (m, v)), &decays) in params.iter_mut().zip(&grads.data).zip(moments).zip(&self.decays) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            let decay = if decays { weight_decay * *p } else { 0.0 };
            *p -= lr * (update + decay);
        }
    }
}

fn clip(grads: &mut Gradients, max_norm: f64) {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        grads.data.iter_mut().for_each(|g| *g *= k);
    }
}

fn check_batch_inputs(model: &EncoderModel, seqs: &[TokenSequence], classes: &[usize]) -> Result<(), EncoderError> {
    if seqs.is_empty() {
        return Err(EncoderError::EmptyBatch);
    }
    if seqs.len() != classes.len() {
        return Err(EncoderError::Mismatch(format!(
            "{} sequences but {} class targets",
            seqs.len(),
            classes.len()
        )));
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= model.config.num_classes) {
        return Err(EncoderError::Mismatch(format!(
            "class index {c} with only {} classes",
            model.config.num_classes
        )));
    }
    seqs.iter().try_for_each(|s| validate_sequence(model, s))
}

/// Most probable class per sequence; ties go to the lowest index.
pub fn predict_classes(model: &EncoderModel, seqs: &[TokenSequence]) -> Result<Vec<usize>, EncoderError> {
    if seqs.is_empty() {
        return Ok(Vec::new());
    }
    let logits = class_logits(model, seqs)?;
    Ok(logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &z) in row.iter().enumerate() {
                if z > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

pub fn accuracy(model: &EncoderModel, seqs: &[TokenSequence], classes: &[usize]) -> Result<f64, EncoderError> {
    check_batch_inputs(model, seqs, classes)?;
    let pred = predict_classes(model, seqs)?;
    let hits = pred.iter().zip(classes).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / seqs.len() as f64)
}

/// Mean classification cross-entropy in inference mode.
pub fn evaluate_loss(model: &EncoderModel, seqs: &[TokenSequence], classes: &[usize]) -> Result<f64, EncoderError> {
    check_batch_inputs(model, seqs, classes)?;
    let logits = class_logits(model, seqs)?;
    let total: f64 = logits
        .rows()
        .into_iter()
        .zip(classes)
        .map(|(row, &c)| ops::cross_entropy(row, c).0)
        .sum();
    Ok(total / seqs.len() as f64)
}

/// Mini-batch fine-tuning on pre-encoded sequences. Sequences are trimmed to
/// their real length, which leaves every loss and gradient unchanged.
pub fn train_on_sequences(
    mut model: EncoderModel,
    train: (&[TokenSequence], &[usize]),
    dev: Option<(&[TokenSequence], &[usize])>,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome, EncoderError> {
    tcfg.validate()?;
    check_batch_inputs(&model, train.0, train.1)?;
    if let Some((seqs, classes)) = dev {
        check_batch_inputs(&model, seqs, classes)?;
    }
    let seqs: Vec<TokenSequence> = train.0.iter().map(|s| s.truncated(s.effective_len())).collect();
    let classes = train.1;
    let n = seqs.len();
    let steps_per_epoch = n.div_ceil(tcfg.batch_size);
    let schedule = Schedule::new(tcfg.learning_rate, tcfg.warmup_fraction, steps_per_epoch * tcfg.epochs);
    let mut opt = AdamW::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::new();
    let mut wall_times = Vec::new();
    let mut best: Option<(f64, usize, EncoderModel)> = None;
    let mut step = 0;

    for epoch in 1..=tcfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(tcfg.batch_size) {
            let batch: Vec<TokenSequence> = chunk.iter().map(|&i| seqs[i].clone()).collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| classes[i]).collect();
            let dropout_seed = rng.random::<u64>();
            let (loss, mut grads) = loss_and_grad(
                &model,
                &batch,
                &Targets {
                    classes: Some(&targets),
                    mlm: None,
                },
                Some(dropout_seed),
            )?;
            if !loss.total.is_finite() {
                return Err(EncoderError::Diverged {
                    epoch,
                    step,
                    loss: loss.total,
                });
            }
            loss_sum += loss.total * chunk.len() as f64;
            clip(&mut grads, tcfg.max_grad_norm);
            opt.step(model.params_mut(), &grads, schedule.rate(step), tcfg.weight_decay);
            step += 1;
        }
        if !model.is_finite() {
            return Err(EncoderError::Diverged {
                epoch,
                step,
                loss: f64::NAN,
            });
        }
        let dev_accuracy = match dev {
            Some((s, c)) => Some(accuracy(&model, s, c)?),
            None => None,
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            dev_accuracy,
        };
        log::info!(
            "epoch {epoch}: train loss {:.6}, dev accuracy {}",
            record.train_loss,
            dev_accuracy.map_or("n/a".to_string(), |a| format!("{a:.4}"))
        );
        history.push(record);
        wall_times.push(started.elapsed().as_secs_f64());
        if let Some(acc) = dev_accuracy {
            if best.as_ref().map_or(true, |(b, _, _)| acc > *b) {
                best = Some((acc, epoch, model.clone()));
            }
            if tcfg.target_dev_accuracy.is_some_and(|t| acc >= t) {
                break;
            }
        }
    }
    let (model, best_epoch) = match best {
        Some((_, epoch, m)) => (m, epoch),
        None => (model, history.len()),
    };
    Ok(TrainOutcome {
        model,
        history,
        wall_times,
        best_epoch,
    })
}

/// Encodes both datasets with `vocab` and fine-tunes the classifier.
pub fn train_classifier(
    model: EncoderModel,
    train: &Dataset,
    dev: &Dataset,
    tcfg: &TrainConfig,
    vocab: &Vocab,
    opts: &EncodeOptions,
) -> Result<TrainOutcome, EncoderError> {
    if train.scale != dev.scale {
        return Err(EncoderError::Config(format!(
            "train scale {:?} differs from dev scale {:?}",
            train.scale.kind, dev.scale.kind
        )));
    }
    if model.config.num_classes != train.scale.len() {
        return Err(EncoderError::Config(format!(
            "model has {} classes but the scale has {}",
            model.config.num_classes,
            train.scale.len()
        )));
    }
    if vocab.len() > model.config.vocab_size {
        return Err(EncoderError::Config(format!(
            "vocabulary of {} exceeds the model's {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    if train.is_empty() || dev.is_empty() {
        return Err(EncoderError::Config("train and dev sets must be nonempty".into()));
    }
    let train_seqs = encode_dataset(vocab, train, opts)?;
    let dev_seqs = encode_dataset(vocab, dev, opts)?;
    train_on_sequences(
        model,
        (&train_seqs, &train.label_indices()),
        Some((&dev_seqs, &dev.label_indices())),
        tcfg,
    )
}

/// Masked-language-model pretraining; a fresh mask is drawn for every batch.
pub fn pretrain_mlm(
    mut model: EncoderModel,
    seqs: &[TokenSequence],
    pcfg: &PretrainConfig,
) -> Result<PretrainOutcome, EncoderError> {
    let tcfg = &pcfg.train;
    tcfg.validate()?;
    if model.layout().slots.mlm.is_none() {
        return Err(EncoderError::NoMlmHead);
    }
    if seqs.is_empty() {
        return Err(EncoderError::EmptyBatch);
    }
    if !(0.0..=1.0).contains(&pcfg.mask_rate) {
        return Err(EncoderError::Config(format!(
            "mask_rate {} not in [0, 1]",
            pcfg.mask_rate
        )));
    }
    seqs.iter().try_for_each(|s| validate_sequence(&model, s))?;
    let seqs: Vec<TokenSequence> = seqs.iter().map(|s| s.truncated(s.effective_len())).collect();
    let mask_opts = MaskOptions {
        rate: pcfg.mask_rate,
        mixed_replacement: pcfg.mixed_replacement,
        vocab_size: model.config.vocab_size,
    };
    let steps_per_epoch = seqs.len().div_ceil(tcfg.batch_size);
    let schedule = Schedule::new(tcfg.learning_rate, tcfg.warmup_fraction, steps_per_epoch * tcfg.epochs);
    let mut opt = AdamW::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut step_losses = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut step = 0;
    for epoch in 1..=tcfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0);
        for chunk in order.chunks(tcfg.batch_size) {
            let batch: Vec<TokenSequence> = chunk.iter().map(|&i| seqs[i].clone()).collect();
            let masked = apply_mlm_mask_with(&batch, &mask_opts, rng.random());
            let dropout_seed = rng.random::<u64>();
            let lr = schedule.rate(step);
            step += 1;
            if masked.num_masked() == 0 {
                continue;
            }
            let (loss, mut grads) = loss_and_grad(
                &model,
                &masked.inputs,
                &Targets {
                    classes: None,
                    mlm: Some(&masked.labels),
                },
                Some(dropout_seed),
            )?;
            if !loss.total.is_finite() {
                return Err(EncoderError::Diverged {
                    epoch,
                    step,
                    loss: loss.total,
                });
            }
            step_losses.push(loss.total);
            sum += loss.total;
            count += 1;
            clip(&mut grads, tcfg.max_grad_norm);
            opt.step(model.params_mut(), &grads, lr, tcfg.weight_decay);
        }
        let mean = if count > 0 { sum / count as f64 } else { f64::NAN };
        log::info!("pretrain epoch {epoch}: MLM loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok(PretrainOutcome {
        model,
        step_losses,
        epoch_losses,
    })
}
