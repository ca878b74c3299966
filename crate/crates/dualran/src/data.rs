//! Corpus ingestion, batching, sentiment merging, and the synthetic
//! context-dependent benchmark generator.
//!
//! Wire format: newline-delimited JSON, one dialog per line:
//!
//! ```text
//! {"id":"d0","turns":[{"features":[...],"speaker":"A","label":"happy","text":"..."}]}
//! ```
//!
//! Labels map to indices through a manifest listing class names in fixed
//! order (`labels.txt`, one name per line). Speaker strings are normalized
//! per dialog to order-of-appearance indices, capped at the model's speaker
//! vocabulary.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tensor::{Element, Tensor};

/// Class names in fixed index order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelManifest {
    names: Vec<String>,
}

impl LabelManifest {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Label("label manifest is empty".into()));
        }
        Ok(LabelManifest { names })
    }

    pub fn from_strs(names: &[&str]) -> Self {
        LabelManifest {
            names: names.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Index of the class literally named "neutral", when present.
    pub fn neutral_index(&self) -> Option<usize> {
        self.index_of("neutral")
    }

    /// One class name per line; blank lines ignored.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let names: Vec<String> = text
            .lines()
            .map(|l| l.trim())
            .filter(|l| !l.is_empty())
            .map(|l| l.to_string())
            .collect();
        LabelManifest::new(names)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for name in &self.names {
            writeln!(f, "{name}")?;
        }
        Ok(())
    }
}

// ── datasets and sentiment merging ───────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Iemocap,
    Meld,
    EmoryNlp,
    DailyDialog,
}

impl Dataset {
    /// Emotion class names in manifest order.
    pub fn labels(self) -> LabelManifest {
        match self {
            Dataset::Iemocap => LabelManifest::from_strs(&[
                "happy",
                "sad",
                "neutral",
                "angry",
                "excited",
                "frustrated",
            ]),
            Dataset::Meld => LabelManifest::from_strs(&[
                "neutral",
                "surprise",
                "fear",
                "sadness",
                "joy",
                "disgust",
                "anger",
            ]),
            Dataset::EmoryNlp => LabelManifest::from_strs(&[
                "sad",
                "mad",
                "scared",
                "powerful",
                "peaceful",
                "joyful",
                "neutral",
            ]),
            Dataset::DailyDialog => LabelManifest::from_strs(&[
                "neutral",
                "happiness",
                "surprise",
                "sadness",
                "anger",
                "disgust",
                "fear",
            ]),
        }
    }
}

impl std::str::FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "iemocap" => Ok(Dataset::Iemocap),
            "meld" => Ok(Dataset::Meld),
            "emorynlp" => Ok(Dataset::EmoryNlp),
            "dailydialog" => Ok(Dataset::DailyDialog),
            other => Err(Error::Config(format!("unknown dataset {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sentiment {
    Negative,
    Neutral,
    Positive,
}

impl Sentiment {
    pub fn index(self) -> usize {
        match self {
            Sentiment::Negative => 0,
            Sentiment::Neutral => 1,
            Sentiment::Positive => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Sentiment::Negative => "negative",
            Sentiment::Neutral => "neutral",
            Sentiment::Positive => "positive",
        }
    }
}

/// Sentiment class names in index order.
pub fn sentiment_labels() -> LabelManifest {
    LabelManifest::from_strs(&["negative", "neutral", "positive"])
}

/// Merge an emotion label into its sentiment. MELD keeps its native
/// sentiment labels; the other corpora merge their emotion classes.
pub fn merge_sentiment(dataset: Dataset, label: &str) -> Result<Sentiment> {
    use Sentiment::*;
    let merged = match dataset {
        Dataset::Iemocap => match label {
            "sad" | "angry" | "frustrated" => Some(Negative),
            "neutral" => Some(Neutral),
            "happy" | "excited" => Some(Positive),
            _ => None,
        },
        Dataset::Meld => match label {
            "negative" => Some(Negative),
            "neutral" => Some(Neutral),
            "positive" => Some(Positive),
            _ => None,
        },
        Dataset::EmoryNlp => match label {
            "mad" | "sad" | "scared" => Some(Negative),
            "neutral" => Some(Neutral),
            "joyful" | "peaceful" | "powerful" => Some(Positive),
            _ => None,
        },
        Dataset::DailyDialog => match label {
            "anger" | "sadness" | "sad" | "fear" | "disgust" => Some(Negative),
            "neutral" => Some(Neutral),
            "happiness" | "happy" | "surprise" => Some(Positive),
            _ => None,
        },
    };
    merged.ok_or_else(|| {
        Error::Label(format!(
            "label {label:?} has no sentiment mapping for {dataset:?}"
        ))
    })
}

// ── corpus ───────────────────────────────────────────────────────────

/// One utterance: pre-extracted features, normalized speaker id, class index.
#[derive(Debug, Clone)]
pub struct Turn {
    pub features: Vec<f64>,
    pub speaker: usize,
    pub label: usize,
    pub text: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Dialog {
    pub id: String,
    pub turns: Vec<Turn>,
}

impl Dialog {
    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct DialogCorpus {
    pub dialogs: Vec<Dialog>,
    pub feature_dim: usize,
    pub labels: LabelManifest,
}

impl DialogCorpus {
    pub fn total_turns(&self) -> usize {
        self.dialogs.iter().map(|d| d.len()).sum()
    }

    pub fn max_len(&self) -> usize {
        self.dialogs.iter().map(|d| d.len()).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Val => "val.jsonl",
            Split::Test => "test.jsonl",
        }
    }
}

pub struct SplitCorpus {
    pub train: DialogCorpus,
    pub val: DialogCorpus,
    pub test: DialogCorpus,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TurnRecord {
    features: Vec<f64>,
    speaker: String,
    label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct DialogRecord {
    id: String,
    turns: Vec<TurnRecord>,
}

/// Order-of-appearance speaker normalization: the first distinct id maps to
/// 0, the second to 1, and so on, capped at `cap - 1`. Idempotent.
pub fn normalize_speakers(ids: &[usize], cap: usize) -> Vec<usize> {
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let next = seen.len();
        let normalized = *seen.entry(id).or_insert(next);
        out.push(normalized.min(cap.saturating_sub(1)));
    }
    out
}

/// Parse one corpus file against a label manifest.
pub fn load_corpus(path: &Path, labels: &LabelManifest, speaker_cap: usize) -> Result<DialogCorpus> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut dialogs = Vec::new();
    let mut feature_dim: Option<usize> = None;
    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DialogRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Schema(format!(
                "{}:{}: malformed dialog record: {e}",
                path.display(),
                line_no + 1
            ))
        })?;
        if record.turns.is_empty() {
            return Err(Error::Schema(format!(
                "dialog {} has no turns",
                record.id
            )));
        }
        // speaker strings -> order-of-appearance ids
        let mut speaker_ids: BTreeMap<String, usize> = BTreeMap::new();
        let mut turns = Vec::with_capacity(record.turns.len());
        for (turn_no, tr) in record.turns.into_iter().enumerate() {
            let dim = *feature_dim.get_or_insert(tr.features.len());
            if tr.features.len() != dim {
                return Err(Error::Schema(format!(
                    "dialog {} turn {}: feature dim {} does not match corpus dim {}",
                    record.id,
                    turn_no,
                    tr.features.len(),
                    dim
                )));
            }
            let label = labels.index_of(&tr.label).ok_or_else(|| {
                Error::Label(format!(
                    "dialog {} turn {}: unknown label {:?}",
                    record.id, turn_no, tr.label
                ))
            })?;
            let next = speaker_ids.len();
            let speaker = *speaker_ids.entry(tr.speaker).or_insert(next);
            turns.push(Turn {
                features: tr.features,
                speaker: speaker.min(speaker_cap.saturating_sub(1)),
                label,
                text: tr.text,
            });
        }
        dialogs.push(Dialog {
            id: record.id,
            turns,
        });
    }
    if dialogs.is_empty() {
        return Err(Error::Schema(format!(
            "{}: corpus file holds no dialogs",
            path.display()
        )));
    }
    Ok(DialogCorpus {
        dialogs,
        feature_dim: feature_dim.unwrap_or(0),
        labels: labels.clone(),
    })
}

/// Write a corpus in the wire format.
pub fn save_corpus(path: &Path, corpus: &DialogCorpus) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for dialog in &corpus.dialogs {
        let record = DialogRecord {
            id: dialog.id.clone(),
            turns: dialog
                .turns
                .iter()
                .map(|t| TurnRecord {
                    features: t.features.clone(),
                    speaker: t.speaker.to_string(),
                    label: corpus.labels.name(t.label).to_string(),
                    text: t.text.clone(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut f, &record)
            .map_err(|e| Error::Schema(format!("serialize dialog {}: {e}", dialog.id)))?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// Load train/val/test files plus `labels.txt` from one directory.
pub fn load_split_dir(
    dir: &Path,
    labels: Option<LabelManifest>,
    speaker_cap: usize,
) -> Result<SplitCorpus> {
    let labels = match labels {
        Some(l) => l,
        None => LabelManifest::load(&dir.join("labels.txt"))?,
    };
    Ok(SplitCorpus {
        train: load_corpus(&dir.join(Split::Train.file_name()), &labels, speaker_cap)?,
        val: load_corpus(&dir.join(Split::Val.file_name()), &labels, speaker_cap)?,
        test: load_corpus(&dir.join(Split::Test.file_name()), &labels, speaker_cap)?,
    })
}

// ── batching ─────────────────────────────────────────────────────────

/// Label value stored at padded positions; never read by loss or metrics.
pub const PAD_LABEL: i64 = -1;

/// Padded stack of dialogs. Padding sits at the tail of each row; the mask
/// is true exactly on real turns.
pub struct Batch<E: Element> {
    pub batch: usize,
    pub t_max: usize,
    pub d: usize,
    pub features: Vec<E>,
    pub speakers: Vec<usize>,
    pub labels: Vec<i64>,
    pub mask: Vec<bool>,
    /// Source dialog index in the corpus, per batch row.
    pub dialog_indices: Vec<usize>,
}

impl<E: Element> Batch<E> {
    pub fn features_of(&self, row: usize) -> Tensor<E> {
        let n = self.t_max * self.d;
        Tensor::new(
            vec![self.t_max, self.d],
            self.features[row * n..(row + 1) * n].to_vec(),
        )
        .expect("consistent by construction")
    }

    pub fn speakers_of(&self, row: usize) -> &[usize] {
        &self.speakers[row * self.t_max..(row + 1) * self.t_max]
    }

    pub fn labels_of(&self, row: usize) -> &[i64] {
        &self.labels[row * self.t_max..(row + 1) * self.t_max]
    }

    pub fn mask_of(&self, row: usize) -> &[bool] {
        &self.mask[row * self.t_max..(row + 1) * self.t_max]
    }

    pub fn valid_turns(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Deterministically shuffle dialogs and pack them into padded batches.
/// Every dialog appears exactly once; padding is per-batch max length.
pub fn make_batches<E: Element>(
    corpus: &DialogCorpus,
    batch_size: usize,
    rng: &mut SeedRng,
) -> Result<Vec<Batch<E>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..corpus.dialogs.len()).collect();
    rng.shuffle(&mut order);
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        batches.push(pack_batch(corpus, chunk)?);
    }
    Ok(batches)
}

/// Pack the given dialogs (by index) into one padded batch.
pub fn pack_batch<E: Element>(corpus: &DialogCorpus, indices: &[usize]) -> Result<Batch<E>> {
    let d = corpus.feature_dim;
    let t_max = indices
        .iter()
        .map(|&i| corpus.dialogs[i].len())
        .max()
        .ok_or_else(|| Error::Contract("pack_batch: empty index set".into()))?;
    let b = indices.len();
    let mut features = vec![E::zero(); b * t_max * d];
    let mut speakers = vec![0usize; b * t_max];
    let mut labels = vec![PAD_LABEL; b * t_max];
    let mut mask = vec![false; b * t_max];
    for (row, &di) in indices.iter().enumerate() {
        let dialog = &corpus.dialogs[di];
        for (t, turn) in dialog.turns.iter().enumerate() {
            let base = (row * t_max + t) * d;
            for (j, v) in turn.features.iter().enumerate() {
                features[base + j] = E::from_f64(*v);
            }
            speakers[row * t_max + t] = turn.speaker;
            labels[row * t_max + t] = turn.label as i64;
            mask[row * t_max + t] = true;
        }
    }
    Ok(Batch {
        batch: b,
        t_max,
        d,
        features,
        speakers,
        labels,
        mask,
        dialog_indices: indices.to_vec(),
    })
}

// ── synthetic benchmark ──────────────────────────────────────────────

/// Generator spec for the context-dependent synthetic corpus.
///
/// Every turn carries a latent class token; its features are a noisy class
/// prototype. The label is the majority token over the turn and its
/// `context_window` predecessors (ties resolve toward the oldest token in
/// the window), shifted by the speaker's parity. A classifier that sees one
/// turn at a time — even one that decodes the token and the speaker
/// perfectly — cannot beat the published ceiling, because the predecessors'
/// tokens are independent of everything it observes.
///
/// `dialog_offset` adds a random vector drawn once per dialog to every turn
/// of that dialog. With a large offset, single-turn token decoding degrades
/// (the offset swamps the prototype geometry) while cross-turn comparison
/// within the dialog cancels it exactly, so whole-dialog context carries
/// real information beyond the label rule itself. The published ceiling is
/// unaffected: it already assumes a perfect token decoder.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub num_dialogs: usize,
    /// Inclusive dialog length range.
    pub len_range: (usize, usize),
    pub d: usize,
    pub num_speakers: usize,
    pub num_classes: usize,
    /// Number of preceding turns mixed into each label (k).
    pub context_window: usize,
    /// Standard deviation of the per-turn additive feature noise.
    pub noise: f64,
    /// Standard deviation of the per-dialog shared feature offset.
    pub dialog_offset: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_dialogs: 500,
            len_range: (6, 12),
            d: 16,
            num_speakers: 2,
            num_classes: 2,
            context_window: 2,
            noise: 0.5,
            dialog_offset: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_dialogs == 0
            || self.d == 0
            || self.num_speakers == 0
            || self.num_classes < 2
            || self.len_range.0 == 0
            || self.len_range.0 > self.len_range.1
        {
            return Err(Error::Config(format!("invalid synthetic spec: {self:?}")));
        }
        if self.noise < 0.0 || self.dialog_offset < 0.0 {
            return Err(Error::Config("synthetic noise scales must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn label_manifest(&self) -> LabelManifest {
        LabelManifest {
            names: (0..self.num_classes).map(|c| format!("c{c}")).collect(),
        }
    }
}

/// Majority token of a window; ties resolve toward the value whose first
/// occurrence in the window is oldest.
fn window_majority(window: &[usize], num_classes: usize) -> usize {
    let mut counts = vec![0usize; num_classes];
    for &z in window {
        counts[z] += 1;
    }
    let best = *counts.iter().max().expect("nonempty window");
    for &z in window {
        if counts[z] == best {
            return z;
        }
    }
    unreachable!("some value attains the max count")
}

/// Exact accuracy ceiling of the best single-turn classifier for dialogs of
/// the given lengths: the Bayes-optimal predictor that observes the turn's
/// own latent token and speaker but none of the preceding tokens, computed
/// by exhaustive enumeration over predecessor-token tuples.
pub fn context_free_ceiling(lengths: &[usize], context_window: usize, num_classes: usize) -> f64 {
    let m = num_classes;
    // P_w = best achievable probability with a window of size w
    let per_window = |w: usize| -> f64 {
        if w <= 1 {
            return 1.0;
        }
        let prefixes = m.pow((w - 1) as u32);
        let mut total_best = 0.0;
        for z in 0..m {
            let mut outcome_counts = vec![0usize; m];
            for code in 0..prefixes {
                let mut c = code;
                let mut window = Vec::with_capacity(w);
                for _ in 0..w - 1 {
                    window.push(c % m);
                    c /= m;
                }
                window.push(z);
                outcome_counts[window_majority(&window, m)] += 1;
            }
            total_best += *outcome_counts.iter().max().unwrap() as f64 / prefixes as f64;
        }
        total_best / m as f64
    };
    let table: Vec<f64> = (1..=context_window + 1).map(per_window).collect();
    let mut sum = 0.0;
    let mut count = 0usize;
    for &len in lengths {
        for t in 0..len {
            let w = t.min(context_window) + 1;
            sum += table[w - 1];
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

pub struct SyntheticCorpus {
    pub corpus: DialogCorpus,
    /// Published Bayes-style accuracy cap of any context-free classifier.
    pub context_free_ceiling: f64,
}

/// Generate one corpus. The same seed yields a bit-identical corpus.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = SeedRng::new(spec.seed);
    let protos = draw_prototypes(spec, &mut rng);
    generate_with_prototypes(spec, &protos, &mut rng, "d")
}

/// Generate train/val/test splits that share class prototypes, so the task
/// is identical across splits.
pub fn generate_synthetic_splits(
    spec: &SyntheticSpec,
    num_val: usize,
    num_test: usize,
) -> Result<(SplitCorpus, [f64; 3])> {
    spec.validate()?;
    let mut rng = SeedRng::new(spec.seed);
    let protos = draw_prototypes(spec, &mut rng);
    let train_spec = spec.clone();
    let mut val_spec = spec.clone();
    val_spec.num_dialogs = num_val;
    let mut test_spec = spec.clone();
    test_spec.num_dialogs = num_test;
    let train = generate_with_prototypes(&train_spec, &protos, &mut rng, "train")?;
    let val = generate_with_prototypes(&val_spec, &protos, &mut rng, "val")?;
    let test = generate_with_prototypes(&test_spec, &protos, &mut rng, "test")?;
    Ok((
        SplitCorpus {
            train: train.corpus,
            val: val.corpus,
            test: test.corpus,
        },
        [
            train.context_free_ceiling,
            val.context_free_ceiling,
            test.context_free_ceiling,
        ],
    ))
}

fn draw_prototypes(spec: &SyntheticSpec, rng: &mut SeedRng) -> Vec<Vec<f64>> {
    (0..spec.num_classes)
        .map(|_| (0..spec.d).map(|_| rng.normal()).collect())
        .collect()
}

fn generate_with_prototypes(
    spec: &SyntheticSpec,
    protos: &[Vec<f64>],
    rng: &mut SeedRng,
    id_prefix: &str,
) -> Result<SyntheticCorpus> {
    let m = spec.num_classes;
    let k = spec.context_window;
    let mut dialogs = Vec::with_capacity(spec.num_dialogs);
    let mut lengths = Vec::with_capacity(spec.num_dialogs);
    for di in 0..spec.num_dialogs {
        let len = spec.len_range.0 + rng.below(spec.len_range.1 - spec.len_range.0 + 1);
        lengths.push(len);
        let raw_speakers: Vec<usize> = (0..len).map(|_| rng.below(spec.num_speakers)).collect();
        let speakers = normalize_speakers(&raw_speakers, spec.num_speakers);
        let tokens: Vec<usize> = (0..len).map(|_| rng.below(m)).collect();
        let offset: Vec<f64> = (0..spec.d)
            .map(|_| spec.dialog_offset * rng.normal())
            .collect();
        let mut turns = Vec::with_capacity(len);
        for t in 0..len {
            let from = t.saturating_sub(k);
            let maj = window_majority(&tokens[from..=t], m);
            let label = (maj + speakers[t] % 2) % m;
            let features: Vec<f64> = protos[tokens[t]]
                .iter()
                .zip(&offset)
                .map(|(p, o)| p + o + spec.noise * rng.normal())
                .collect();
            turns.push(Turn {
                features,
                speaker: speakers[t],
                label,
                text: None,
            });
        }
        dialogs.push(Dialog {
            id: format!("{id_prefix}{di}"),
            turns,
        });
    }
    let ceiling = context_free_ceiling(&lengths, k, m);
    Ok(SyntheticCorpus {
        corpus: DialogCorpus {
            dialogs,
            feature_dim: spec.d,
            labels: spec.label_manifest(),
        },
        context_free_ceiling: ceiling,
    })
}
