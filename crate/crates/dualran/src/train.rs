//! Loss, optimizer, and the training loop.
//!
//! The data loss is the mean negative log-likelihood over every valid
//! utterance in the batch — the utterance count across all dialogs sits in
//! the denominator. L2 regularization is realized as decoupled weight decay
//! inside the optimizer step, so the reported data loss excludes it; an
//! optional literal mode adds the squared-norm penalty to the loss tensor
//! instead, for comparison.

use crate::data::{make_batches, pack_batch, Batch, DialogCorpus, PAD_LABEL};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, ConfusionMatrix, MetricReport};
use crate::model::{forward, predict, probabilities, DialogInput, ModelConfig, ModelParams};
use crate::nn::{ParamSet, Phase};
use crate::rng::SeedRng;
use crate::tensor::{Element, Tape, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMetric {
    Accuracy,
    WeightedF1,
    MicroF1,
    MacroF1,
    MicroF1ExclNeutral,
}

impl SelectionMetric {
    pub fn score(&self, report: &MetricReport) -> f64 {
        match self {
            SelectionMetric::Accuracy => report.accuracy,
            SelectionMetric::WeightedF1 => report.weighted_f1,
            SelectionMetric::MicroF1 => report.micro_f1,
            SelectionMetric::MacroF1 => report.macro_f1,
            SelectionMetric::MicroF1ExclNeutral => report.micro_f1_excl_neutral.unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum L2Mode {
    /// Decay folded into the optimizer step (the default).
    DecoupledDecay,
    /// Literal squared-L2 penalty added to the loss tensor.
    LiteralPenalty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// L2 regularization factor (eta).
    pub weight_decay: f64,
    pub seed: u64,
    pub select: SelectionMetric,
    pub precision: Precision,
    pub clip_norm: Option<f64>,
    pub l2_mode: L2Mode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            max_epochs: 100,
            weight_decay: 3e-4,
            seed: 0,
            select: SelectionMetric::WeightedF1,
            precision: Precision::F32,
            clip_norm: None,
            l2_mode: L2Mode::DecoupledDecay,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

// ── loss ─────────────────────────────────────────────────────────────

/// Per-dialog log-likelihood pick: log-softmax the logits, gather the label
/// column of every valid row. Padded rows (sentinel label) contribute zero.
/// Returns the pick-sum tensor and the number of valid utterances.
pub fn dialog_log_likelihood<E: Element>(
    logits: &Tensor<E>,
    labels: &[i64],
    num_classes: usize,
    where_: &str,
) -> Result<(Tensor<E>, usize)> {
    let logp = logits.log_softmax()?;
    let mut picks = Vec::with_capacity(labels.len());
    let mut count = 0;
    for (t, &label) in labels.iter().enumerate() {
        if label == PAD_LABEL {
            picks.push(None);
        } else if label < 0 || label as usize >= num_classes {
            return Err(Error::Label(format!(
                "{where_} turn {t}: label {label} outside 0..{num_classes}"
            )));
        } else {
            picks.push(Some(label as usize));
            count += 1;
        }
    }
    Ok((logp.pick_per_row(&picks)?.sum_all(), count))
}

/// Log-likelihood pick-sum over a whole batch, plus per-dialog breakdown
/// `(dialog_index, pick_sum_value, turn_count)`.
pub fn batch_log_likelihood<E: Element>(
    params: &ModelParams<E>,
    cfg: &ModelConfig,
    batch: &Batch<E>,
    phase: &mut Phase,
) -> Result<(Tensor<E>, usize, Vec<(usize, f64, usize)>)> {
    let mut total: Option<Tensor<E>> = None;
    let mut count = 0;
    let mut per_dialog = Vec::with_capacity(batch.batch);
    for row in 0..batch.batch {
        let feats = batch.features_of(row);
        let logits = forward(
            params,
            cfg,
            DialogInput {
                features: &feats,
                speakers: batch.speakers_of(row),
                mask: batch.mask_of(row),
            },
            phase,
        )?;
        let (sum, n) = dialog_log_likelihood(
            &logits,
            batch.labels_of(row),
            cfg.num_classes,
            &format!("dialog {}", batch.dialog_indices[row]),
        )?;
        per_dialog.push((batch.dialog_indices[row], sum.item()?.as_f64(), n));
        count += n;
        total = Some(match total {
            None => sum,
            Some(acc) => acc.add(&sum)?,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("empty batch".into()))?;
    Ok((total, count, per_dialog))
}

/// Mean data loss of a corpus under fixed parameters (inference mode).
/// Per-dialog terms are accumulated in corpus order, so the value does not
/// depend on how dialogs were batched or visited.
pub fn dataset_loss<E: Element>(
    params: &ModelParams<E>,
    cfg: &ModelConfig,
    corpus: &DialogCorpus,
) -> Result<f64> {
    let mut by_dialog = vec![0.0f64; corpus.dialogs.len()];
    let mut turns = 0usize;
    for (i, _) in corpus.dialogs.iter().enumerate() {
        let batch = pack_batch::<E>(corpus, &[i])?;
        let (_, count, per_dialog) =
            batch_log_likelihood(params, cfg, &batch, &mut Phase::Infer)?;
        by_dialog[i] = per_dialog[0].1;
        turns += count;
    }
    let total: f64 = by_dialog.iter().sum();
    Ok(-total / turns as f64)
}

// ── optimizer ────────────────────────────────────────────────────────

/// Adam with decoupled weight decay. Moments mirror parameter shapes and
/// live in the parameter precision.
pub struct AdamW<E: Element> {
    step: u64,
    moments: Vec<(Vec<E>, Vec<E>)>,
}

impl<E: Element> Default for AdamW<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> AdamW<E> {
    pub fn new() -> Self {
        AdamW {
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over `(name, param, grad)` triples in registry order.
    /// Decay is applied to the incoming parameter value, separately from the
    /// gradient-based term. A non-finite gradient aborts the step.
    pub fn step(
        &mut self,
        triples: &[(String, Tensor<E>, Tensor<E>)],
        lr: f64,
        decay: f64,
    ) -> Result<Vec<Tensor<E>>> {
        for (name, _, grad) in triples {
            if grad.data().iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter {name}; step aborted"
                )));
            }
        }
        if self.moments.is_empty() {
            self.moments = triples
                .iter()
                .map(|(_, p, _)| {
                    (
                        vec![E::zero(); p.numel()],
                        vec![E::zero(); p.numel()],
                    )
                })
                .collect();
        }
        if self.moments.len() != triples.len() {
            return Err(Error::Contract(format!(
                "optimizer state holds {} parameters, step got {}",
                self.moments.len(),
                triples.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = E::from_f64(BETA1);
        let b2 = E::from_f64(BETA2);
        let one_m_b1 = E::from_f64(1.0 - BETA1);
        let one_m_b2 = E::from_f64(1.0 - BETA2);
        let corr1 = E::from_f64(1.0 - BETA1.powi(t));
        let corr2 = E::from_f64(1.0 - BETA2.powi(t));
        let eps = E::from_f64(ADAM_EPS);
        let lr_e = E::from_f64(lr);
        let decay_mul = E::from_f64(1.0 - lr * decay);

        let mut out = Vec::with_capacity(triples.len());
        for ((name, param, grad), (m, v)) in triples.iter().zip(self.moments.iter_mut()) {
            if param.numel() != m.len() {
                return Err(Error::Contract(format!(
                    "optimizer state shape mismatch for {name}"
                )));
            }
            let mut new_data = Vec::with_capacity(param.numel());
            for ((p, g), (mi, vi)) in param
                .data()
                .iter()
                .zip(grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + one_m_b1 * *g;
                *vi = b2 * *vi + one_m_b2 * *g * *g;
                let m_hat = *mi / corr1;
                let v_hat = *vi / corr2;
                let decayed = *p * decay_mul;
                new_data.push(decayed - lr_e * m_hat / (v_hat.sqrt() + eps));
            }
            out.push(Tensor::new(param.shape().to_vec(), new_data)?);
        }
        Ok(out)
    }
}

// ── training loop ────────────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: MetricReport,
}

pub struct TrainOutcome<E: Element> {
    /// Parameters of the epoch with the best validation selection score
    /// (initial parameters when no epoch ran).
    pub params: ModelParams<E>,
    pub best_epoch: Option<usize>,
    pub best_score: f64,
    pub history: Vec<EpochRecord>,
}

/// Run the full training loop. Deterministic given the seed: two runs with
/// equal seeds produce bit-identical histories.
pub fn train<E: Element>(
    train_corpus: &DialogCorpus,
    val_corpus: &DialogCorpus,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    mut on_epoch: Option<&mut dyn FnMut(&EpochRecord)>,
) -> Result<TrainOutcome<E>> {
    mcfg.validate()?;
    tcfg.validate()?;
    if train_corpus.dialogs.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if mcfg.d != train_corpus.feature_dim {
        return Err(Error::Config(format!(
            "model width {} does not match corpus feature dim {}",
            mcfg.d, train_corpus.feature_dim
        )));
    }
    if mcfg.num_classes != train_corpus.labels.len() {
        return Err(Error::Config(format!(
            "model has {} classes but the corpus manifest lists {}",
            mcfg.num_classes,
            train_corpus.labels.len()
        )));
    }
    if tcfg.max_epochs > 0 && val_corpus.dialogs.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }

    let mut rng = SeedRng::new(tcfg.seed);
    let mut params = ModelParams::<E>::init(mcfg, &mut rng)?;
    let mut optimizer = AdamW::<E>::new();
    let decay = match tcfg.l2_mode {
        L2Mode::DecoupledDecay => tcfg.weight_decay,
        L2Mode::LiteralPenalty => 0.0,
    };

    let mut best: Option<(usize, f64, ModelParams<E>)> = None;
    let mut history = Vec::with_capacity(tcfg.max_epochs);

    for epoch in 1..=tcfg.max_epochs {
        let batches = make_batches::<E>(train_corpus, tcfg.batch_size, &mut rng)?;
        let mut dialog_nll = vec![0.0f64; train_corpus.dialogs.len()];
        let mut total_turns = 0usize;
        for batch in &batches {
            let tape = Tape::new();
            let bound = params.watch_all(&tape);
            let mut phase = Phase::Train { rng: &mut rng };
            let (pick_sum, count, per_dialog) =
                batch_log_likelihood(&bound, mcfg, &batch, &mut phase)?;
            drop(phase);
            for (di, v, _) in &per_dialog {
                dialog_nll[*di] = -v;
            }
            total_turns += count;

            let mut loss = pick_sum.scale(E::from_f64(-1.0 / count as f64));
            if tcfg.l2_mode == L2Mode::LiteralPenalty && tcfg.weight_decay > 0.0 {
                let mut penalty: Option<Tensor<E>> = None;
                let flat = bound.flatten();
                for (_, w) in &flat {
                    let sq = w.mul(w)?.sum_all();
                    penalty = Some(match penalty {
                        None => sq,
                        Some(acc) => acc.add(&sq)?,
                    });
                }
                if let Some(p) = penalty {
                    loss = loss.add(&p.scale(E::from_f64(tcfg.weight_decay)))?;
                }
            }
            let grads = tape.backward(&loss)?;

            let flat = bound.flatten();
            let mut triples: Vec<(String, Tensor<E>, Tensor<E>)> = flat
                .into_iter()
                .map(|(name, tensor)| {
                    let grad = grads.of_or_zero(&tensor);
                    (name, tensor, grad)
                })
                .collect();
            if let Some(max_norm) = tcfg.clip_norm {
                clip_global_norm(&mut triples, max_norm)?;
            }
            let updated = optimizer.step(&triples, tcfg.learning_rate, decay)?;
            params = params.from_flat(&updated);
        }

        let train_loss = dialog_nll.iter().sum::<f64>() / total_turns as f64;
        let (val_report, _) = evaluate(&params, mcfg, val_corpus)?;
        let score = tcfg.select.score(&val_report);
        let improved = best.as_ref().map(|(_, s, _)| score > *s).unwrap_or(true);
        if improved {
            best = Some((epoch, score, params.map(&mut |t| t.clone())));
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val: val_report,
        };
        if let Some(cb) = on_epoch.as_mut() {
            cb(&record);
        }
        history.push(record);
    }

    let (best_epoch, best_score, final_params) = match best {
        Some((e, s, p)) => (Some(e), s, p),
        None => (None, 0.0, params),
    };
    Ok(TrainOutcome {
        params: final_params,
        best_epoch,
        best_score,
        history,
    })
}

fn clip_global_norm<E: Element>(
    triples: &mut [(String, Tensor<E>, Tensor<E>)],
    max_norm: f64,
) -> Result<()> {
    let mut sq = 0.0f64;
    for (_, _, g) in triples.iter() {
        for v in g.data() {
            sq += v.as_f64() * v.as_f64();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = E::from_f64(max_norm / norm);
        for (_, _, g) in triples.iter_mut() {
            *g = g.scale(scale);
        }
    }
    Ok(())
}

/// Inference over a corpus: prediction per valid utterance, confusion matrix
/// and metric report. Deterministic.
pub fn evaluate<E: Element>(
    params: &ModelParams<E>,
    cfg: &ModelConfig,
    corpus: &DialogCorpus,
) -> Result<(MetricReport, ConfusionMatrix)> {
    let mut preds = Vec::with_capacity(corpus.total_turns());
    let mut labels = Vec::with_capacity(corpus.total_turns());
    for i in 0..corpus.dialogs.len() {
        let batch = pack_batch::<E>(corpus, &[i])?;
        let feats = batch.features_of(0);
        let logits = forward(
            params,
            cfg,
            DialogInput {
                features: &feats,
                speakers: batch.speakers_of(0),
                mask: batch.mask_of(0),
            },
            &mut Phase::Infer,
        )?;
        let probs = probabilities(&logits)?;
        let pred = predict(&probs)?;
        for (t, &label) in batch.labels_of(0).iter().enumerate() {
            if label != PAD_LABEL {
                preds.push(pred[t]);
                labels.push(label as usize);
            }
        }
    }
    let cm = ConfusionMatrix::from_pairs(&preds, &labels, cfg.num_classes)?;
    let report = compute_metrics(&cm, corpus.labels.neutral_index());
    Ok((report, cm))
}
