//! Full architecture assembly: speaker-aware encoding, the two context
//! streams, fusion, and the prediction head.
//!
//! Variants:
//! - `Dual`: both streams run on the same speaker-encoded input; their
//!   outputs are concatenated `[T, 2d]` and projected back to `[T, d]` by the
//!   bias-free fusion matrix before the head.
//! - `SingleV1`: local stack first, its output feeds the global stack.
//! - `SingleV2`: global stack first, its output feeds the local stack.
//!
//! Ablation switches remove the speaker embedding, either stream (dual
//! variant only), or the residual additions inside a stream's blocks.

use std::collections::BTreeSet;

use crate::attention::{global_stack, GlobalBlock};
use crate::error::{Error, Result};
use crate::nn::{Activation, EmbeddingTable, Linear, ParamSet, Phase};
use crate::rng::SeedRng;
use crate::rnn::{local_stack, LocalBlock, RnnKind};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Dual,
    SingleV1,
    SingleV2,
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    NoLocal,
    NoGlobal,
    NoSpeaker,
    NoSkipLocal,
    NoSkipGlobal,
}

/// Architecture hyperparameters. `hidden` and `d_ff` fall back to `d/2` and
/// `2d` when unset.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Utterance feature width.
    pub d: usize,
    /// Local-aware layers (N_L).
    pub n_local: usize,
    /// Global-aware layers (N_G).
    pub n_global: usize,
    /// Attention heads (N_H).
    pub n_heads: usize,
    pub rnn_kind: RnnKind,
    pub dropout: f64,
    pub variant: Variant,
    pub ablations: BTreeSet<Ablation>,
    pub num_classes: usize,
    /// Speaker vocabulary size (per-dialog order-of-appearance ids).
    pub speaker_vocab: usize,
    /// RNN hidden size per direction; default d/2 so both directions
    /// concatenate back to d.
    pub hidden: Option<usize>,
    /// Feed-forward inner width; default 2d.
    pub d_ff: Option<usize>,
    pub activation: Activation,
}

impl ModelConfig {
    /// Plain dual-stream config with defaults left symbolic.
    pub fn new(d: usize, num_classes: usize) -> Self {
        ModelConfig {
            d,
            n_local: 1,
            n_global: 1,
            n_heads: 1,
            rnn_kind: RnnKind::Lstm,
            dropout: 0.0,
            variant: Variant::Dual,
            ablations: BTreeSet::new(),
            num_classes,
            speaker_vocab: 12,
            hidden: None,
            d_ff: None,
            activation: Activation::Relu,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.unwrap_or(self.d / 2)
    }

    pub fn ff_dim(&self) -> usize {
        self.d_ff.unwrap_or(2 * self.d)
    }

    pub fn has_speaker(&self) -> bool {
        !self.ablations.contains(&Ablation::NoSpeaker)
    }

    pub fn has_local(&self) -> bool {
        !self.ablations.contains(&Ablation::NoLocal)
    }

    pub fn has_global(&self) -> bool {
        !self.ablations.contains(&Ablation::NoGlobal)
    }

    pub fn skip_local(&self) -> bool {
        !self.ablations.contains(&Ablation::NoSkipLocal)
    }

    pub fn skip_global(&self) -> bool {
        !self.ablations.contains(&Ablation::NoSkipGlobal)
    }

    /// Fusion applies only when the dual variant actually runs both streams.
    pub fn has_fusion(&self) -> bool {
        self.variant == Variant::Dual && self.has_local() && self.has_global()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.num_classes == 0 || self.speaker_vocab == 0 {
            return Err(Error::Config(
                "d, num_classes, and speaker_vocab must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.ablations.contains(&Ablation::NoLocal)
            && self.ablations.contains(&Ablation::NoGlobal)
        {
            return Err(Error::Config(
                "no-local and no-global cannot both be set".into(),
            ));
        }
        if (self.ablations.contains(&Ablation::NoLocal)
            || self.ablations.contains(&Ablation::NoGlobal))
            && self.variant != Variant::Dual
        {
            return Err(Error::Config(
                "stream-removal ablations require the dual variant".into(),
            ));
        }
        if self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "feature width {} is not divisible by {} attention heads",
                self.d, self.n_heads
            )));
        }
        if self.has_local() && self.n_local == 0 {
            return Err(Error::Config(
                "n_local must be at least 1 (use the no-local ablation to drop the stream)"
                    .into(),
            ));
        }
        if self.has_global() && self.n_global == 0 {
            return Err(Error::Config(
                "n_global must be at least 1 (use the no-global ablation to drop the stream)"
                    .into(),
            ));
        }
        if self.hidden.is_none() && self.d % 2 != 0 {
            return Err(Error::Config(format!(
                "default hidden size is d/2 but d = {} is odd; set hidden explicitly",
                self.d
            )));
        }
        if let Some(h) = self.hidden {
            if h == 0 {
                return Err(Error::Config("hidden size must be positive".into()));
            }
        }
        Ok(())
    }

    /// Closed-form count of trainable scalars, matching the introspective
    /// enumeration of the parameter registry exactly.
    pub fn param_count(&self) -> usize {
        let d = self.d;
        let h = self.hidden_dim();
        let d_ff = self.ff_dim();
        let gates = match self.rnn_kind {
            RnnKind::Lstm => 4,
            RnnKind::Gru => 3,
        };
        let norm = 2 * d;
        let ffn = d * d_ff + d_ff + d_ff * d + d;
        let cell = gates * h * d + gates * h * h + 2 * (gates * h);
        let local_block = norm + 2 * cell + (d * 2 * h + d) + norm + ffn;
        let global_block = norm + 4 * d * d + norm + ffn;

        let mut total = 0;
        if self.has_speaker() {
            total += self.speaker_vocab * d;
        }
        if self.has_local() {
            total += self.n_local * local_block;
        }
        if self.has_global() {
            total += self.n_global * global_block;
        }
        if self.has_fusion() {
            total += d * 2 * d;
        }
        total += self.num_classes * d;
        total
    }
}

/// Trainable arrays of one model, in registry order: speaker table, local
/// blocks, global blocks, fusion, head.
pub struct ModelParams<E: Element> {
    pub speaker: Option<EmbeddingTable<E>>,
    pub local: Vec<LocalBlock<E>>,
    pub global: Vec<GlobalBlock<E>>,
    /// `W_gl: [d, 2d]`, bias-free.
    pub fusion: Option<Linear<E>>,
    /// `W_smax: [num_classes, d]`, bias-free.
    pub head: Linear<E>,
}

impl<E: Element> ModelParams<E> {
    pub fn init(cfg: &ModelConfig, rng: &mut SeedRng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let speaker = cfg.has_speaker().then(|| {
            EmbeddingTable::init_normal(cfg.speaker_vocab, d, 0.02, rng)
        });
        let local = if cfg.has_local() {
            (0..cfg.n_local)
                .map(|_| {
                    LocalBlock::init(
                        cfg.rnn_kind,
                        d,
                        cfg.hidden_dim(),
                        cfg.ff_dim(),
                        cfg.activation,
                        cfg.dropout,
                        cfg.skip_local(),
                        rng,
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        let global = if cfg.has_global() {
            (0..cfg.n_global)
                .map(|_| {
                    GlobalBlock::init(
                        d,
                        cfg.n_heads,
                        cfg.ff_dim(),
                        cfg.activation,
                        cfg.dropout,
                        cfg.skip_global(),
                        rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let fusion = if cfg.has_fusion() {
            Some(Linear::init(d, 2 * d, false, rng))
        } else {
            None
        };
        let head = Linear::init(cfg.num_classes, d, false, rng);
        Ok(ModelParams {
            speaker,
            local,
            global,
            fusion,
            head,
        })
    }
}

impl<E: Element> ParamSet<E> for ModelParams<E> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<E>)) {
        if let Some(s) = &self.speaker {
            s.visit(&format!("{prefix}speaker."), f);
        }
        self.local.visit(&format!("{prefix}local."), f);
        self.global.visit(&format!("{prefix}global."), f);
        if let Some(w) = &self.fusion {
            w.visit(&format!("{prefix}fusion."), f);
        }
        self.head.visit(&format!("{prefix}head."), f);
    }

    fn map(&self, f: &mut dyn FnMut(&Tensor<E>) -> Tensor<E>) -> Self {
        ModelParams {
            speaker: self.speaker.as_ref().map(|s| s.map(f)),
            local: self.local.map(f),
            global: self.global.map(f),
            fusion: self.fusion.as_ref().map(|w| w.map(f)),
            head: self.head.map(f),
        }
    }
}

/// One dialog as the model consumes it. Padded rows sit at the tail; the
/// mask is a contiguous prefix of `true`.
pub struct DialogInput<'a, E: Element> {
    pub features: &'a Tensor<E>,
    pub speakers: &'a [usize],
    pub mask: &'a [bool],
}

impl<E: Element> DialogInput<'_, E> {
    fn valid_len(&self) -> Result<usize> {
        let t = self.features.shape()[0];
        if self.speakers.len() != t || self.mask.len() != t {
            return Err(Error::Contract(format!(
                "dialog input: features rows {}, speakers {}, mask {}",
                t,
                self.speakers.len(),
                self.mask.len()
            )));
        }
        let valid = self.mask.iter().take_while(|m| **m).count();
        if valid == 0 {
            return Err(Error::Contract("dialog input: no valid utterances".into()));
        }
        if self.mask[valid..].iter().any(|m| *m) {
            return Err(Error::Contract(
                "dialog input: mask must be a contiguous prefix".into(),
            ));
        }
        Ok(valid)
    }
}

/// Speaker-aware encoding: add the speaker embedding row to each utterance
/// feature. Under the no-speaker ablation the features pass through.
pub fn speaker_encode<E: Element>(
    features: &Tensor<E>,
    speakers: &[usize],
    params: &ModelParams<E>,
) -> Result<Tensor<E>> {
    match &params.speaker {
        Some(table) => features.add(&table.lookup(speakers)?),
        None => Ok(features.clone()),
    }
}

/// Forward pass over one dialog: `[T, d] -> [T, num_classes]` logits.
pub fn forward<E: Element>(
    params: &ModelParams<E>,
    cfg: &ModelConfig,
    input: DialogInput<E>,
    phase: &mut Phase,
) -> Result<Tensor<E>> {
    cfg.validate()?;
    if input.features.rank() != 2 || input.features.shape()[1] != cfg.d {
        return Err(Error::ShapeMismatch {
            op: "forward",
            lhs: input.features.shape().to_vec(),
            rhs: vec![0, cfg.d],
        });
    }
    let valid = input.valid_len()?;
    let x = speaker_encode(input.features, input.speakers, params)?;

    let fused = match cfg.variant {
        Variant::Dual => {
            let l = if cfg.has_local() {
                Some(local_stack(&x, valid, &params.local, phase)?)
            } else {
                None
            };
            let g = if cfg.has_global() {
                Some(global_stack(&x, input.mask, &params.global, phase)?)
            } else {
                None
            };
            match (l, g) {
                (Some(l), Some(g)) => {
                    let cat = Tensor::concat(1, &[&l, &g])?;
                    let w_gl = params.fusion.as_ref().ok_or_else(|| {
                        Error::Config("dual variant is missing the fusion matrix".into())
                    })?;
                    w_gl.apply(&cat)?
                }
                (Some(l), None) => l,
                (None, Some(g)) => g,
                (None, None) => unreachable!("validated: streams cannot both be removed"),
            }
        }
        Variant::SingleV1 => {
            let l = local_stack(&x, valid, &params.local, phase)?;
            global_stack(&l, input.mask, &params.global, phase)?
        }
        Variant::SingleV2 => {
            let g = global_stack(&x, input.mask, &params.global, phase)?;
            local_stack(&g, valid, &params.local, phase)?
        }
    };
    params.head.apply(&fused)
}

/// Class probabilities from logits; rows sum to 1.
pub fn probabilities<E: Element>(logits: &Tensor<E>) -> Result<Tensor<E>> {
    logits.softmax()
}

/// Per-row argmax; ties break toward the lowest class index.
pub fn predict<E: Element>(probs: &Tensor<E>) -> Result<Vec<usize>> {
    if probs.rank() != 2 {
        return Err(Error::Contract("predict: want rank 2".into()));
    }
    let (rows, cols) = (probs.shape()[0], probs.shape()[1]);
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut best = 0;
        for c in 1..cols {
            if probs.at2(r, c) > probs.at2(r, best) {
                best = c;
            }
        }
        out.push(best);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::new(4, 3);
        cfg.n_local = 1;
        cfg.n_global = 1;
        cfg.n_heads = 2;
        cfg.speaker_vocab = 4;
        cfg
    }

    fn rand_features(t: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = SeedRng::new(seed);
        Tensor::new(
            vec![t, d],
            (0..t * d).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn config_rejects_contradictory_ablations() {
        let mut cfg = small_cfg();
        cfg.ablations.insert(Ablation::NoLocal);
        cfg.ablations.insert(Ablation::NoGlobal);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = small_cfg();
        cfg.variant = Variant::SingleV1;
        cfg.ablations.insert(Ablation::NoLocal);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = small_cfg();
        cfg.n_heads = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn speaker_encode_zero_table_is_identity() {
        let cfg = small_cfg();
        let mut rng = SeedRng::new(1);
        let mut params = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
        params.speaker = Some(EmbeddingTable::new(Tensor::zeros(vec![4, 4])).unwrap());
        let c = rand_features(3, 4, 2);
        let x = speaker_encode(&c, &[0, 1, 0], &params).unwrap();
        assert_eq!(x.data(), c.data());
    }

    #[test]
    fn speaker_encode_shifts_rows_by_table_rows() {
        let cfg = small_cfg();
        let mut rng = SeedRng::new(3);
        let params = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
        let table = &params.speaker.as_ref().unwrap().table;
        let c = rand_features(4, 4, 4);

        // identical speaker: every row shifted by the same vector
        let x = speaker_encode(&c, &[2, 2, 2, 2], &params).unwrap();
        for t in 0..4 {
            for j in 0..4 {
                let want = c.at2(t, j) + table.at2(2, j);
                assert!((x.at2(t, j) - want).abs() < 1e-12);
            }
        }

        // alternating speakers: row differences equal table-row differences
        let x = speaker_encode(&c, &[0, 1, 0, 1], &params).unwrap();
        for t in 0..4 {
            let s = t % 2;
            for j in 0..4 {
                let diff = x.at2(t, j) - c.at2(t, j);
                assert!((diff - table.at2(s, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_probability_rows_sum_to_one() {
        let cfg = small_cfg();
        let mut rng = SeedRng::new(5);
        let params = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
        let feats = rand_features(3, 4, 6);
        let logits = forward(
            &params,
            &cfg,
            DialogInput {
                features: &feats,
                speakers: &[0, 1, 0],
                mask: &[true; 3],
            },
            &mut Phase::Infer,
        )
        .unwrap();
        assert_eq!(logits.shape(), &[3, 3]);
        let probs = probabilities(&logits).unwrap();
        for r in 0..3 {
            let s: f64 = (0..3).map(|c| probs.at2(r, c)).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn iemocap_shaped_config_yields_six_logit_columns() {
        // Table-3-style layer counts at a desk-scale width
        let mut cfg = ModelConfig::new(16, 6);
        cfg.n_local = 4;
        cfg.n_heads = 4;
        cfg.n_global = 5;
        cfg.dropout = 0.1;
        let mut rng = SeedRng::new(7);
        let params = ModelParams::<f32>::init(&cfg, &mut rng).unwrap();
        let feats = rand_features(5, 16, 8).cast::<f32>();
        let logits = forward(
            &params,
            &cfg,
            DialogInput {
                features: &feats,
                speakers: &[0, 1, 0, 1, 0],
                mask: &[true; 5],
            },
            &mut Phase::Infer,
        )
        .unwrap();
        assert_eq!(logits.shape(), &[5, 6]);
    }

    #[test]
    fn dual_forward_equals_manual_composition() {
        let cfg = small_cfg();
        let mut rng = SeedRng::new(9);
        let params = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
        let feats = rand_features(3, 4, 10);
        let speakers = [0usize, 1, 1];
        let mask = [true; 3];
        let logits = forward(
            &params,
            &cfg,
            DialogInput {
                features: &feats,
                speakers: &speakers,
                mask: &mask,
            },
            &mut Phase::Infer,
        )
        .unwrap();

        let x = speaker_encode(&feats, &speakers, &params).unwrap();
        let l = local_stack(&x, 3, &params.local, &mut Phase::Infer).unwrap();
        let g = global_stack(&x, &mask, &params.global, &mut Phase::Infer).unwrap();
        let cat = Tensor::concat(1, &[&l, &g]).unwrap();
        let fused = params.fusion.as_ref().unwrap().apply(&cat).unwrap();
        let want = params.head.apply(&fused).unwrap();
        for (a, b) in logits.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn predict_argmax_and_tie_break() {
        let probs = Tensor::from_rows(&[
            vec![0.0, 1.0, 0.0],
            vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            vec![0.1, 0.5, 0.4],
        ])
        .unwrap();
        assert_eq!(predict(&probs).unwrap(), vec![1, 0, 1]);
        // uniform row over 6 classes picks class 0
        let six = Tensor::from_rows(&[vec![1.0 / 6.0; 6]]).unwrap();
        assert_eq!(predict(&six).unwrap(), vec![0]);
    }

    #[test]
    fn param_count_matches_introspection() {
        let mut rng = SeedRng::new(11);
        for variant in [Variant::Dual, Variant::SingleV1, Variant::SingleV2] {
            for abl in [
                vec![],
                vec![Ablation::NoSpeaker],
                vec![Ablation::NoSkipLocal],
            ] {
                let mut cfg = small_cfg();
                cfg.variant = variant;
                cfg.n_local = 2;
                cfg.n_global = 2;
                cfg.ablations = abl.into_iter().collect();
                let params = ModelParams::<f32>::init(&cfg, &mut rng).unwrap();
                assert_eq!(
                    cfg.param_count(),
                    params.param_count(),
                    "mismatch for {cfg:?}"
                );
            }
        }
        // gru variant
        let mut cfg = small_cfg();
        cfg.rnn_kind = RnnKind::Gru;
        let params = ModelParams::<f32>::init(&cfg, &mut rng).unwrap();
        assert_eq!(cfg.param_count(), params.param_count());
    }

    #[test]
    fn no_speaker_removes_exactly_v_by_d() {
        let base = small_cfg();
        let mut no_spk = small_cfg();
        no_spk.ablations.insert(Ablation::NoSpeaker);
        assert_eq!(
            base.param_count() - no_spk.param_count(),
            base.speaker_vocab * base.d
        );
    }

    #[test]
    fn no_global_removes_global_stack_and_fusion() {
        let base = small_cfg();
        let mut no_glob = small_cfg();
        no_glob.ablations.insert(Ablation::NoGlobal);
        let d = base.d;
        let d_ff = base.ff_dim();
        let global_block = 2 * d + 4 * d * d + 2 * d + (d * d_ff + d_ff + d_ff * d + d);
        assert_eq!(
            base.param_count() - no_glob.param_count(),
            base.n_global * global_block + d * 2 * d
        );
    }

    #[test]
    fn single_variants_have_no_fusion_matrix() {
        let mut v1 = small_cfg();
        v1.variant = Variant::SingleV1;
        let dual = small_cfg();
        assert_eq!(dual.param_count() - v1.param_count(), dual.d * 2 * dual.d);
        let mut rng = SeedRng::new(13);
        let params = ModelParams::<f32>::init(&v1, &mut rng).unwrap();
        assert!(params.fusion.is_none());
    }

    #[test]
    fn zeroing_fusion_half_decouples_the_other_stream() {
        let cfg = small_cfg();
        let mut rng = SeedRng::new(15);
        let params = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
        let d = cfg.d;

        // zero the right half (global columns) of the fusion matrix
        let w = &params.fusion.as_ref().unwrap().weight;
        let mut data = w.data().to_vec();
        for r in 0..d {
            for c in d..2 * d {
                data[r * 2 * d + c] = 0.0;
            }
        }
        let mut local_only = params.map(&mut |t| t.clone());
        local_only.fusion = Some(Linear::new(Tensor::new(vec![d, 2 * d], data).unwrap(), None).unwrap());

        // perturb all global-stream parameters
        let mut perturbed = local_only.map(&mut |t| t.clone());
        perturbed.global = perturbed.global.map(&mut |t| t.scale(3.0).add(&Tensor::full(t.shape().to_vec(), 0.1)).unwrap());

        let feats = rand_features(3, 4, 16);
        let run = |p: &ModelParams<f64>| {
            forward(
                p,
                &cfg,
                DialogInput {
                    features: &feats,
                    speakers: &[0, 1, 0],
                    mask: &[true; 3],
                },
                &mut Phase::Infer,
            )
            .unwrap()
        };
        let a = run(&local_only);
        let b = run(&perturbed);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9, "global stream still leaks through");
        }
    }

    #[test]
    fn speaker_ablation_controls_speaker_sensitivity() {
        let mut cfg = small_cfg();
        let mut rng = SeedRng::new(17);
        let params = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
        let feats = rand_features(3, 4, 18);
        let run = |p: &ModelParams<f64>, cfg: &ModelConfig, speakers: &[usize]| {
            forward(
                p,
                cfg,
                DialogInput {
                    features: &feats,
                    speakers,
                    mask: &[true; 3],
                },
                &mut Phase::Infer,
            )
            .unwrap()
        };
        // with speaker embeddings, changing one speaker id changes outputs
        let a = run(&params, &cfg, &[0, 1, 0]);
        let b = run(&params, &cfg, &[0, 1, 1]);
        let diff: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-9);

        // under the ablation the speaker sequence is irrelevant
        cfg.ablations.insert(Ablation::NoSpeaker);
        let params = ModelParams::<f64>::init(&cfg, &mut SeedRng::new(17)).unwrap();
        let a = run(&params, &cfg, &[0, 1, 0]);
        let b = run(&params, &cfg, &[1, 0, 1]);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn variants_produce_distinct_outputs() {
        let feats = rand_features(4, 4, 19);
        let outputs: Vec<Vec<f64>> = [Variant::Dual, Variant::SingleV1, Variant::SingleV2]
            .into_iter()
            .map(|variant| {
                let mut cfg = small_cfg();
                cfg.variant = variant;
                let params = ModelParams::<f64>::init(&cfg, &mut SeedRng::new(21)).unwrap();
                forward(
                    &params,
                    &cfg,
                    DialogInput {
                        features: &feats,
                        speakers: &[0, 1, 0, 1],
                        mask: &[true; 4],
                    },
                    &mut Phase::Infer,
                )
                .unwrap()
                .data()
                .to_vec()
            })
            .collect();
        for i in 0..3 {
            for j in i + 1..3 {
                let diff: f64 = outputs[i]
                    .iter()
                    .zip(&outputs[j])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(diff > 1e-3, "variants {i} and {j} coincide");
            }
        }
    }

    #[test]
    fn masked_tail_does_not_change_valid_outputs() {
        let cfg = small_cfg();
        let mut rng = SeedRng::new(23);
        let params = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
        let feats = rand_features(3, 4, 24);
        let logits = forward(
            &params,
            &cfg,
            DialogInput {
                features: &feats,
                speakers: &[0, 1, 0],
                mask: &[true; 3],
            },
            &mut Phase::Infer,
        )
        .unwrap();

        // same dialog padded with junk rows
        let mut rows: Vec<Vec<f64>> = (0..3)
            .map(|r| (0..4).map(|c| feats.at2(r, c)).collect())
            .collect();
        rows.push(vec![5.0; 4]);
        let feats_pad = Tensor::from_rows(&rows).unwrap();
        let logits_pad = forward(
            &params,
            &cfg,
            DialogInput {
                features: &feats_pad,
                speakers: &[0, 1, 0, 0],
                mask: &[true, true, true, false],
            },
            &mut Phase::Infer,
        )
        .unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert!((logits.at2(r, c) - logits_pad.at2(r, c)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn non_prefix_mask_is_rejected() {
        let cfg = small_cfg();
        let mut rng = SeedRng::new(25);
        let params = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
        let feats = rand_features(3, 4, 26);
        let err = forward(
            &params,
            &cfg,
            DialogInput {
                features: &feats,
                speakers: &[0, 1, 0],
                mask: &[true, false, true],
            },
            &mut Phase::Infer,
        );
        assert!(matches!(err, Err(Error::Contract(_))));
    }
}
