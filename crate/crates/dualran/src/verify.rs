//! Finite-difference gradient verification of every block, in 64-bit.
//!
//! Each named block builds a small parameterization (d = 8, T = 3), runs its
//! forward pass scalarized by a sum, and compares every analytic gradient —
//! input and all parameters — against central finite differences. The CLI
//! surfaces this as a command; the acceptance suite runs it as a criterion.

use crate::attention::Mha;
use crate::error::{Error, Result};
use crate::model::{forward, DialogInput, ModelConfig, ModelParams, Variant};
use crate::nn::{FeedForward, LayerNorm, Linear, ParamSet, Phase};
use crate::rng::SeedRng;
use crate::rnn::{rnn_bidir, RnnCell, RnnKind};
use crate::tensor::{grad_check_multi, Tensor};

/// Finite-difference step used by the verification suite.
pub const EPSILON: f64 = 1e-4;

/// Maximum tolerated relative deviation.
pub const TOLERANCE: f64 = 1e-4;

pub const ALL_BLOCKS: &[&str] = &[
    "linear",
    "layer-norm",
    "feed-forward",
    "lstm",
    "gru",
    "attention",
    "model-dual",
    "model-singlev1",
    "model-singlev2",
];

#[derive(Debug, Clone)]
pub struct BlockReport {
    pub block: String,
    pub worst_deviation: f64,
    pub coordinates: usize,
}

impl BlockReport {
    pub fn passed(&self) -> bool {
        self.worst_deviation < TOLERANCE
    }
}

fn rand_matrix(t: usize, d: usize, rng: &mut SeedRng) -> Tensor<f64> {
    Tensor::new(
        vec![t, d],
        (0..t * d).map(|_| rng.uniform(-1.0, 1.0)).collect(),
    )
    .expect("consistent")
}

/// Gradient-check one parameterized map: inputs are the data tensor followed
/// by the flattened parameters; `apply` rebuilds the parameters and runs the
/// forward pass scalarized by sum.
fn check_with_params<P, F>(x: Tensor<f64>, template: &P, apply: F) -> Result<(f64, usize)>
where
    P: ParamSet<f64>,
    F: Fn(&Tensor<f64>, &P) -> Result<Tensor<f64>>,
{
    let flat: Vec<Tensor<f64>> = template.flatten().into_iter().map(|(_, t)| t).collect();
    let mut inputs = vec![x];
    inputs.extend(flat);
    let coordinates = inputs.iter().map(|t| t.numel()).sum();
    let dev = grad_check_multi(
        |args| {
            let params = template.from_flat(&args[1..]);
            apply(&args[0], &params)
        },
        &inputs,
        EPSILON,
    )?;
    Ok((dev, coordinates))
}

fn check_linear(rng: &mut SeedRng) -> Result<(f64, usize)> {
    let lin = Linear::<f64>::init(8, 8, true, rng);
    let x = rand_matrix(3, 8, rng);
    check_with_params(x, &lin, |x, p| Ok(p.apply(x)?.sum_all()))
}

fn check_layer_norm(rng: &mut SeedRng) -> Result<(f64, usize)> {
    let mut ln = LayerNorm::<f64>::init(8);
    // non-trivial affine so its gradients are exercised
    ln.gain = rand_matrix(1, 8, rng).slice(0, 0, 1)?.reshape(vec![8])?;
    ln.shift = rand_matrix(1, 8, rng).slice(0, 0, 1)?.reshape(vec![8])?;
    let x = rand_matrix(3, 8, rng);
    // weight the rows so the sum does not cancel the normalization gradient
    let weights = rand_matrix(3, 8, rng);
    check_with_params(x, &ln, move |x, p| {
        Ok(p.apply(x)?.mul(&weights)?.sum_all())
    })
}

fn check_feed_forward(rng: &mut SeedRng) -> Result<(f64, usize)> {
    let ffn = FeedForward::<f64>::init(8, 16, crate::nn::Activation::Gelu, 0.0, rng);
    let x = rand_matrix(3, 8, rng);
    let weights = rand_matrix(3, 8, rng);
    check_with_params(x, &ffn, move |x, p| {
        Ok(p.apply(x, &mut Phase::Infer)?.mul(&weights)?.sum_all())
    })
}

struct BidirPair<E: crate::tensor::Element> {
    fwd: RnnCell<E>,
    bwd: RnnCell<E>,
}

impl ParamSet<f64> for BidirPair<f64> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<f64>)) {
        self.fwd.visit(&format!("{prefix}fwd."), f);
        self.bwd.visit(&format!("{prefix}bwd."), f);
    }

    fn map(&self, f: &mut dyn FnMut(&Tensor<f64>) -> Tensor<f64>) -> Self {
        BidirPair {
            fwd: self.fwd.map(f),
            bwd: self.bwd.map(f),
        }
    }
}

fn check_rnn(kind: RnnKind, rng: &mut SeedRng) -> Result<(f64, usize)> {
    let pair = BidirPair {
        fwd: RnnCell::<f64>::init(kind, 8, 4, rng),
        bwd: RnnCell::<f64>::init(kind, 8, 4, rng),
    };
    let x = rand_matrix(3, 8, rng);
    let weights = rand_matrix(3, 8, rng);
    check_with_params(x, &pair, move |x, p| {
        Ok(rnn_bidir(x, 3, &p.fwd, &p.bwd)?.mul(&weights)?.sum_all())
    })
}

fn check_attention(rng: &mut SeedRng) -> Result<(f64, usize)> {
    let mha = Mha::<f64>::init(8, 2, 0.0, rng)?;
    let x = rand_matrix(3, 8, rng);
    let weights = rand_matrix(3, 8, rng);
    check_with_params(x, &mha, move |x, p| {
        Ok(p.apply(x, &[true; 3], &mut Phase::Infer)?
            .mul(&weights)?
            .sum_all())
    })
}

fn check_model(variant: Variant, rng: &mut SeedRng) -> Result<(f64, usize)> {
    let mut cfg = ModelConfig::new(8, 3);
    cfg.variant = variant;
    cfg.n_heads = 2;
    cfg.speaker_vocab = 4;
    let params = ModelParams::<f64>::init(&cfg, rng)?;
    let x = rand_matrix(3, 8, rng);
    let weights = rand_matrix(3, 3, rng);
    let speakers = [0usize, 1, 0];
    check_with_params(x, &params, move |x, p| {
        let logits = forward(
            p,
            &cfg,
            DialogInput {
                features: x,
                speakers: &speakers,
                mask: &[true; 3],
            },
            &mut Phase::Infer,
        )?;
        Ok(logits.mul(&weights)?.sum_all())
    })
}

/// Run the suite over the selected blocks (all when `filter` is `None`).
/// `corrupt_first` deliberately falsifies the first block's reported
/// deviation — a negative control for exit-code plumbing.
pub fn gradcheck_blocks(filter: Option<&str>, corrupt_first: bool) -> Result<Vec<BlockReport>> {
    let selected: Vec<&str> = match filter {
        None => ALL_BLOCKS.to_vec(),
        Some(name) => {
            if !ALL_BLOCKS.contains(&name) {
                return Err(Error::Config(format!(
                    "unknown block {name}; expected one of {}",
                    ALL_BLOCKS.join(", ")
                )));
            }
            vec![name]
        }
    };
    let mut reports = Vec::with_capacity(selected.len());
    for (i, name) in selected.iter().enumerate() {
        let mut rng = SeedRng::new(0xB10C + i as u64);
        let (mut dev, coordinates) = match *name {
            "linear" => check_linear(&mut rng)?,
            "layer-norm" => check_layer_norm(&mut rng)?,
            "feed-forward" => check_feed_forward(&mut rng)?,
            "lstm" => check_rnn(RnnKind::Lstm, &mut rng)?,
            "gru" => check_rnn(RnnKind::Gru, &mut rng)?,
            "attention" => check_attention(&mut rng)?,
            "model-dual" => check_model(Variant::Dual, &mut rng)?,
            "model-singlev1" => check_model(Variant::SingleV1, &mut rng)?,
            "model-singlev2" => check_model(Variant::SingleV2, &mut rng)?,
            other => unreachable!("filtered: {other}"),
        };
        if corrupt_first && i == 0 {
            dev += 1.0;
        }
        reports.push(BlockReport {
            block: name.to_string(),
            worst_deviation: dev,
            coordinates,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_and_norm_blocks_pass() {
        for block in ["linear", "layer-norm", "feed-forward"] {
            let reports = gradcheck_blocks(Some(block), false).unwrap();
            assert!(
                reports[0].passed(),
                "{block}: deviation {}",
                reports[0].worst_deviation
            );
        }
    }

    #[test]
    fn recurrent_blocks_pass() {
        for block in ["lstm", "gru"] {
            let reports = gradcheck_blocks(Some(block), false).unwrap();
            assert!(
                reports[0].passed(),
                "{block}: deviation {}",
                reports[0].worst_deviation
            );
        }
    }

    #[test]
    fn attention_block_passes() {
        let reports = gradcheck_blocks(Some("attention"), false).unwrap();
        assert!(reports[0].passed(), "{}", reports[0].worst_deviation);
    }

    #[test]
    fn unknown_block_is_rejected() {
        assert!(matches!(
            gradcheck_blocks(Some("mystery"), false),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn corruption_hook_fails_the_first_block() {
        let reports = gradcheck_blocks(Some("linear"), true).unwrap();
        assert!(!reports[0].passed());
    }
}
