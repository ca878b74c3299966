//! Scaled dot-product multi-head self-attention and the global-aware block.
//!
//! The global stream looks at the whole dialog at once. No position encoding
//! is added — order information is the local stream's job — so with a full
//! mask the stack is permutation-equivariant, which tests rely on. Padded
//! utterances are masked out of the key axis before the softmax.

use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, ParamSet, Phase};
use crate::rng::SeedRng;
use crate::tensor::{Element, Tensor};

/// Fill value for masked attention scores. Large enough that the masked
/// exponentials underflow to exactly zero after max subtraction.
const MASK_FILL: f64 = -1e30;

/// Multi-head self-attention parameters. All four projections are `[d, d]`
/// and bias-free; `d` must be divisible by the head count.
pub struct Mha<E: Element> {
    pub heads: usize,
    pub w_q: Tensor<E>,
    pub w_k: Tensor<E>,
    pub w_v: Tensor<E>,
    pub w_o: Tensor<E>,
    /// Dropout on the attention weights.
    pub dropout: f64,
}

impl<E: Element> Mha<E> {
    pub fn init(d: usize, heads: usize, dropout: f64, rng: &mut SeedRng) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "attention: width {d} is not divisible by {heads} heads"
            )));
        }
        let bound = 1.0 / (d as f64).sqrt();
        Ok(Mha {
            heads,
            w_q: crate::nn::init_uniform(vec![d, d], bound, rng),
            w_k: crate::nn::init_uniform(vec![d, d], bound, rng),
            w_v: crate::nn::init_uniform(vec![d, d], bound, rng),
            w_o: crate::nn::init_uniform(vec![d, d], bound, rng),
            dropout,
        })
    }

    pub fn width(&self) -> usize {
        self.w_q.shape()[0]
    }

    /// Self-attention over `x: [T, d]` with `mask[t]` marking valid
    /// utterances. Returns the output and, for inspection, the per-head
    /// attention weight matrices `[T, T]`.
    pub fn apply_with_weights(
        &self,
        x: &Tensor<E>,
        mask: &[bool],
        phase: &mut Phase,
    ) -> Result<(Tensor<E>, Vec<Tensor<E>>)> {
        let d = self.width();
        if x.rank() != 2 || x.shape()[1] != d {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: x.shape().to_vec(),
                rhs: vec![d, d],
            });
        }
        let t_total = x.shape()[0];
        if mask.len() != t_total {
            return Err(Error::Contract(format!(
                "attention: mask length {} does not match sequence length {}",
                mask.len(),
                t_total
            )));
        }
        if !mask.iter().any(|m| *m) {
            return Err(Error::Contract(
                "attention: every key is masked out".into(),
            ));
        }
        if d % self.heads != 0 {
            return Err(Error::Config(format!(
                "attention: width {d} is not divisible by {} heads",
                self.heads
            )));
        }
        let dk = d / self.heads;
        let scale = E::from_f64(1.0 / (dk as f64).sqrt());
        let q = x.matmul(&self.w_q.transpose()?)?;
        let k = x.matmul(&self.w_k.transpose()?)?;
        let v = x.matmul(&self.w_v.transpose()?)?;

        let mut head_outs = Vec::with_capacity(self.heads);
        let mut head_weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice(1, h * dk, dk)?;
            let kh = k.slice(1, h * dk, dk)?;
            let vh = v.slice(1, h * dk, dk)?;
            let scores = qh
                .matmul(&kh.transpose()?)?
                .scale(scale)
                .mask_last_axis(mask, E::from_f64(MASK_FILL))?;
            let weights = scores.softmax()?;
            head_weights.push(weights.detach());
            let weights = phase.dropout(&weights, self.dropout)?;
            head_outs.push(weights.matmul(&vh)?);
        }
        let refs: Vec<&Tensor<E>> = head_outs.iter().collect();
        let cat = Tensor::concat(1, &refs)?;
        Ok((cat.matmul(&self.w_o.transpose()?)?, head_weights))
    }

    pub fn apply(&self, x: &Tensor<E>, mask: &[bool], phase: &mut Phase) -> Result<Tensor<E>> {
        Ok(self.apply_with_weights(x, mask, phase)?.0)
    }
}

impl<E: Element> ParamSet<E> for Mha<E> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<E>)) {
        f(format!("{prefix}w_q"), &self.w_q);
        f(format!("{prefix}w_k"), &self.w_k);
        f(format!("{prefix}w_v"), &self.w_v);
        f(format!("{prefix}w_o"), &self.w_o);
    }

    fn map(&self, f: &mut dyn FnMut(&Tensor<E>) -> Tensor<E>) -> Self {
        Mha {
            heads: self.heads,
            w_q: f(&self.w_q),
            w_k: f(&self.w_k),
            w_v: f(&self.w_v),
            w_o: f(&self.w_o),
            dropout: self.dropout,
        }
    }
}

/// One layer of the global-aware stream: pre-norm residual attention, then a
/// pre-norm residual feed-forward sub-layer. `skip = false` replaces the
/// residual sums by the sub-layer outputs.
pub struct GlobalBlock<E: Element> {
    pub norm1: LayerNorm<E>,
    pub mha: Mha<E>,
    pub norm2: LayerNorm<E>,
    pub ffn: FeedForward<E>,
    pub skip: bool,
}

impl<E: Element> GlobalBlock<E> {
    pub fn init(
        d: usize,
        heads: usize,
        d_ff: usize,
        activation: crate::nn::Activation,
        dropout: f64,
        skip: bool,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        Ok(GlobalBlock {
            norm1: LayerNorm::init(d),
            mha: Mha::init(d, heads, dropout, rng)?,
            norm2: LayerNorm::init(d),
            ffn: FeedForward::init(d, d_ff, activation, dropout, rng),
            skip,
        })
    }

    /// `x: [T, d] -> [T, d]`.
    pub fn apply(&self, x: &Tensor<E>, mask: &[bool], phase: &mut Phase) -> Result<Tensor<E>> {
        let att = self.mha.apply(&self.norm1.apply(x)?, mask, phase)?;
        let a = if self.skip { x.add(&att)? } else { att };
        let f = self.ffn.apply(&self.norm2.apply(&a)?, phase)?;
        if self.skip {
            a.add(&f)
        } else {
            Ok(f)
        }
    }
}

impl<E: Element> ParamSet<E> for GlobalBlock<E> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<E>)) {
        self.norm1.visit(&format!("{prefix}norm1."), f);
        self.mha.visit(&format!("{prefix}mha."), f);
        self.norm2.visit(&format!("{prefix}norm2."), f);
        self.ffn.visit(&format!("{prefix}ffn."), f);
    }

    fn map(&self, f: &mut dyn FnMut(&Tensor<E>) -> Tensor<E>) -> Self {
        GlobalBlock {
            norm1: self.norm1.map(f),
            mha: self.mha.map(f),
            norm2: self.norm2.map(f),
            ffn: self.ffn.map(f),
            skip: self.skip,
        }
    }
}

/// Sequential application of the global blocks.
pub fn global_stack<E: Element>(
    x: &Tensor<E>,
    mask: &[bool],
    blocks: &[GlobalBlock<E>],
    phase: &mut Phase,
) -> Result<Tensor<E>> {
    if blocks.is_empty() {
        return Err(Error::Config(
            "global stack needs at least one layer; remove the stream via an ablation instead"
                .into(),
        ));
    }
    let mut cur = x.clone();
    for block in blocks {
        cur = block.apply(&cur, mask, phase)?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Linear};

    fn rand_x(t: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = SeedRng::new(seed);
        Tensor::new(
            vec![t, d],
            (0..t * d).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap()
    }

    fn eye(d: usize) -> Tensor<f64> {
        let mut data = vec![0.0; d * d];
        for i in 0..d {
            data[i * d + i] = 1.0;
        }
        Tensor::new(vec![d, d], data).unwrap()
    }

    #[test]
    fn single_key_attends_fully() {
        let mha = Mha::<f64> {
            heads: 1,
            w_q: eye(2),
            w_k: eye(2),
            w_v: eye(2),
            w_o: eye(2),
            dropout: 0.0,
        };
        let x = rand_x(1, 2, 1);
        let (out, weights) = mha
            .apply_with_weights(&x, &[true], &mut Phase::Infer)
            .unwrap();
        assert!((weights[0].data()[0] - 1.0).abs() < 1e-12);
        // identity projections: output = W_O W_V x = x
        for (a, b) in out.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_keys_give_uniform_weights() {
        let mut rng = SeedRng::new(2);
        let mha = Mha::<f64>::init(4, 2, 0.0, &mut rng).unwrap();
        let row: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let x = Tensor::from_rows(&[row.clone(), row.clone(), row]).unwrap();
        let (_, weights) = mha
            .apply_with_weights(&x, &[true; 3], &mut Phase::Infer)
            .unwrap();
        for w in &weights {
            for v in w.data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-9, "{v}");
            }
        }
    }

    #[test]
    fn single_head_matches_qkv_oracle() {
        // T=2, d=2, one head, hand-set projections; oracle computes
        // softmax(QK^T / sqrt(d)) V with plain loops in f64.
        let w_q = Tensor::from_rows(&[vec![0.6, -0.3], vec![0.2, 0.9]]).unwrap();
        let w_k = Tensor::from_rows(&[vec![-0.5, 0.4], vec![0.7, 0.1]]).unwrap();
        let w_v = Tensor::from_rows(&[vec![1.1, 0.0], vec![-0.2, 0.8]]).unwrap();
        let w_o = Tensor::from_rows(&[vec![0.9, 0.2], vec![-0.4, 0.5]]).unwrap();
        let mha = Mha::<f64> {
            heads: 1,
            w_q: w_q.clone(),
            w_k: w_k.clone(),
            w_v: w_v.clone(),
            w_o: w_o.clone(),
            dropout: 0.0,
        };
        let xs = [[0.3, -0.7], [0.8, 0.5]];
        let x = Tensor::from_rows(&[xs[0].to_vec(), xs[1].to_vec()]).unwrap();
        let got = mha.apply(&x, &[true, true], &mut Phase::Infer).unwrap();

        let proj = |w: &Tensor<f64>, v: &[f64; 2]| -> [f64; 2] {
            [
                w.at2(0, 0) * v[0] + w.at2(0, 1) * v[1],
                w.at2(1, 0) * v[0] + w.at2(1, 1) * v[1],
            ]
        };
        let q: Vec<[f64; 2]> = xs.iter().map(|v| proj(&w_q, v)).collect();
        let k: Vec<[f64; 2]> = xs.iter().map(|v| proj(&w_k, v)).collect();
        let v: Vec<[f64; 2]> = xs.iter().map(|v| proj(&w_v, v)).collect();
        let scale = 1.0 / 2.0f64.sqrt();
        for i in 0..2 {
            let s: Vec<f64> = (0..2)
                .map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) * scale)
                .collect();
            let m = s[0].max(s[1]);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let att = [
                (e[0] / z) * v[0][0] + (e[1] / z) * v[1][0],
                (e[0] / z) * v[0][1] + (e[1] / z) * v[1][1],
            ];
            let out = proj(&w_o, &att);
            for c in 0..2 {
                assert!((got.at2(i, c) - out[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn masked_keys_get_no_weight_and_rows_sum_to_one() {
        let mut rng = SeedRng::new(3);
        let mha = Mha::<f64>::init(4, 2, 0.0, &mut rng).unwrap();
        let x = rand_x(5, 4, 4);
        let mask = [true, true, true, false, false];
        let (_, weights) = mha
            .apply_with_weights(&x, &mask, &mut Phase::Infer)
            .unwrap();
        for w in &weights {
            for r in 0..5 {
                let sum: f64 = (0..5).map(|c| w.at2(r, c)).sum();
                assert!((sum - 1.0).abs() < 1e-6);
                for c in 3..5 {
                    assert!(w.at2(r, c) < 1e-12, "masked key has weight {}", w.at2(r, c));
                }
            }
        }
    }

    #[test]
    fn indivisible_width_and_all_masked_are_rejected() {
        let mut rng = SeedRng::new(5);
        assert!(matches!(
            Mha::<f64>::init(5, 2, 0.0, &mut rng),
            Err(Error::Config(_))
        ));
        let mha = Mha::<f64>::init(4, 2, 0.0, &mut rng).unwrap();
        let x = rand_x(2, 4, 6);
        assert!(matches!(
            mha.apply(&x, &[false, false], &mut Phase::Infer),
            Err(Error::Contract(_))
        ));
    }

    fn zeroed_branch_block(seed: u64) -> GlobalBlock<f64> {
        let mut rng = SeedRng::new(seed);
        let mut block =
            GlobalBlock::<f64>::init(4, 2, 8, Activation::Relu, 0.0, true, &mut rng).unwrap();
        block.mha.w_o = Tensor::zeros(vec![4, 4]);
        block.ffn.fc2 =
            Linear::new(Tensor::zeros(vec![4, 8]), Some(Tensor::zeros(vec![4]))).unwrap();
        block
    }

    #[test]
    fn global_block_with_zeroed_branches_is_identity() {
        let block = zeroed_branch_block(7);
        let x = rand_x(3, 4, 8);
        let y = block.apply(&x, &[true; 3], &mut Phase::Infer).unwrap();
        assert_eq!(
            x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            y.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn global_block_preserves_shape() {
        for t in [1, 2, 7] {
            let mut rng = SeedRng::new(9);
            let block =
                GlobalBlock::<f64>::init(4, 2, 8, Activation::Relu, 0.0, true, &mut rng).unwrap();
            let y = block
                .apply(&rand_x(t, 4, 10), &vec![true; t], &mut Phase::Infer)
                .unwrap();
            assert_eq!(y.shape(), &[t, 4]);
        }
    }

    #[test]
    fn global_block_matches_sublayer_composition() {
        let mut rng = SeedRng::new(11);
        let block =
            GlobalBlock::<f64>::init(4, 2, 8, Activation::Relu, 0.0, true, &mut rng).unwrap();
        let x = rand_x(3, 4, 12);
        let mask = [true; 3];
        let got = block.apply(&x, &mask, &mut Phase::Infer).unwrap();
        let a = x
            .add(
                &block
                    .mha
                    .apply(&block.norm1.apply(&x).unwrap(), &mask, &mut Phase::Infer)
                    .unwrap(),
            )
            .unwrap();
        let want = a
            .add(
                &block
                    .ffn
                    .apply(&block.norm2.apply(&a).unwrap(), &mut Phase::Infer)
                    .unwrap(),
            )
            .unwrap();
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-6);
        }
    }

    #[test]
    fn global_stack_depth_one_equals_block_and_rejects_zero() {
        let mut rng = SeedRng::new(13);
        let block =
            GlobalBlock::<f64>::init(4, 2, 8, Activation::Relu, 0.0, true, &mut rng).unwrap();
        let x = rand_x(3, 4, 14);
        let mask = [true; 3];
        let stacked =
            global_stack(&x, &mask, std::slice::from_ref(&block), &mut Phase::Infer).unwrap();
        let single = block.apply(&x, &mask, &mut Phase::Infer).unwrap();
        assert_eq!(stacked.data(), single.data());
        assert!(matches!(
            global_stack::<f64>(&x, &mask, &[], &mut Phase::Infer),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn global_stack_depth_five_preserves_shape() {
        let mut rng = SeedRng::new(15);
        let blocks: Vec<GlobalBlock<f64>> = (0..5)
            .map(|_| GlobalBlock::init(4, 2, 8, Activation::Relu, 0.0, true, &mut rng).unwrap())
            .collect();
        let y = global_stack(&rand_x(6, 4, 16), &[true; 6], &blocks, &mut Phase::Infer).unwrap();
        assert_eq!(y.shape(), &[6, 4]);
    }

    #[test]
    fn stacked_zeroed_blocks_are_identity() {
        let blocks = vec![zeroed_branch_block(17), zeroed_branch_block(18)];
        let x = rand_x(4, 4, 19);
        let y = global_stack(&x, &[true; 4], &blocks, &mut Phase::Infer).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn permutation_equivariance_with_full_mask() {
        let mut rng = SeedRng::new(20);
        let block =
            GlobalBlock::<f64>::init(4, 2, 8, Activation::Relu, 0.0, true, &mut rng).unwrap();
        let x = rand_x(5, 4, 21);
        let perm = [3usize, 0, 4, 1, 2];
        let permuted_rows: Vec<Vec<f64>> = perm
            .iter()
            .map(|&r| (0..4).map(|c| x.at2(r, c)).collect())
            .collect();
        let xp = Tensor::from_rows(&permuted_rows).unwrap();
        let y = block.apply(&x, &[true; 5], &mut Phase::Infer).unwrap();
        let yp = block.apply(&xp, &[true; 5], &mut Phase::Infer).unwrap();
        for (i, &r) in perm.iter().enumerate() {
            for c in 0..4 {
                assert!(
                    (yp.at2(i, c) - y.at2(r, c)).abs() < 1e-5,
                    "not equivariant at ({i}, {c})"
                );
            }
        }
    }

    #[test]
    fn long_range_reach_in_one_block() {
        let mut rng = SeedRng::new(22);
        let block =
            GlobalBlock::<f64>::init(4, 2, 8, Activation::Relu, 0.0, true, &mut rng).unwrap();
        let x = rand_x(8, 4, 23);
        let mut rows: Vec<Vec<f64>> = (0..8)
            .map(|r| (0..4).map(|c| x.at2(r, c)).collect())
            .collect();
        rows[0][0] += 1.0;
        let x2 = Tensor::from_rows(&rows).unwrap();
        let y = block.apply(&x, &[true; 8], &mut Phase::Infer).unwrap();
        let y2 = block.apply(&x2, &[true; 8], &mut Phase::Infer).unwrap();
        let diff: f64 = (0..4)
            .map(|c| (y.at2(7, c) - y2.at2(7, c)).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-9, "perturbing utterance 0 did not reach the last one");
    }

    #[test]
    fn gradients_flow_through_the_block() {
        let mut rng = SeedRng::new(24);
        let block =
            GlobalBlock::<f64>::init(4, 2, 4, Activation::Relu, 0.0, true, &mut rng).unwrap();
        let x = rand_x(3, 4, 25);
        let dev = crate::tensor::grad_check(
            |x| Ok(block.apply(x, &[true; 3], &mut Phase::Infer)?.sum_all()),
            &x,
            1e-4,
        )
        .unwrap();
        assert!(dev < 1e-4, "dev = {dev}");
    }
}
