//! Recurrent cells and the local-aware residual block.
//!
//! The local stream treats the dialog as an ordered sequence: a bidirectional
//! gated RNN (LSTM or GRU) reads the valid prefix in both directions, a
//! fully connected layer projects the concatenated states back to the model
//! width, and the result sits inside a pre-norm residual pair together with a
//! feed-forward sub-layer:
//!
//! ```text
//! a = x + DP(FC(RNN(norm1(x))))
//! y = a + FEED(norm2(a))
//! ```
//!
//! Padded positions output zero from the RNN and never feed back into valid
//! positions.

use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear, ParamSet, Phase};
use crate::rng::SeedRng;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RnnKind {
    Lstm,
    Gru,
}

impl RnnKind {
    fn gates(self) -> usize {
        match self {
            RnnKind::Lstm => 4, // i, f, g, o
            RnnKind::Gru => 3,  // r, z, n
        }
    }
}

/// One direction of a gated recurrent cell.
///
/// Gate blocks are stacked along the first axis of `w_ih`/`w_hh` in the
/// order `i, f, g, o` (LSTM) or `r, z, n` (GRU).
pub struct RnnCell<E: Element> {
    pub kind: RnnKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_ih: Tensor<E>,
    pub w_hh: Tensor<E>,
    pub b_ih: Tensor<E>,
    pub b_hh: Tensor<E>,
}

impl<E: Element> RnnCell<E> {
    /// Uniform init in ±1/sqrt(h); LSTM forget-gate bias starts at +1.
    pub fn init(kind: RnnKind, input_dim: usize, hidden_dim: usize, rng: &mut SeedRng) -> Self {
        let g = kind.gates();
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let w_ih = crate::nn::init_uniform(vec![g * hidden_dim, input_dim], bound, rng);
        let w_hh = crate::nn::init_uniform(vec![g * hidden_dim, hidden_dim], bound, rng);
        let mut b_ih = vec![E::zero(); g * hidden_dim];
        if kind == RnnKind::Lstm {
            for v in b_ih[hidden_dim..2 * hidden_dim].iter_mut() {
                *v = E::one();
            }
        }
        RnnCell {
            kind,
            input_dim,
            hidden_dim,
            w_ih,
            w_hh,
            b_ih: Tensor::new(vec![g * hidden_dim], b_ih).expect("consistent"),
            b_hh: Tensor::zeros(vec![g * hidden_dim]),
        }
    }

    /// Run this cell over the first `valid` rows of `x[T, d]`, in input order
    /// or reversed. Output is `[T, h]`; rows at and past `valid` are zero.
    fn run(&self, x: &Tensor<E>, valid: usize, reverse: bool) -> Result<Tensor<E>> {
        let t_total = x.shape()[0];
        let h = self.hidden_dim;
        // all input projections in one product: [T, gates*h]
        let xp = x.matmul(&self.w_ih.transpose()?)?.add_row(&self.b_ih)?;
        let w_hh_t = self.w_hh.transpose()?;
        let mut states: Vec<Option<Tensor<E>>> = vec![None; t_total];
        let mut hidden = Tensor::zeros(vec![1, h]);
        let mut cell = Tensor::zeros(vec![1, h]); // LSTM only
        let ones = Tensor::full(vec![1, h], E::one()); // GRU only
        let order: Vec<usize> = if reverse {
            (0..valid).rev().collect()
        } else {
            (0..valid).collect()
        };
        for t in order {
            let gx = xp.slice(0, t, 1)?;
            let gh = hidden.matmul(&w_hh_t)?.add_row(&self.b_hh)?;
            match self.kind {
                RnnKind::Lstm => {
                    let gates = gx.add(&gh)?;
                    let i = gates.slice(1, 0, h)?.sigmoid();
                    let f = gates.slice(1, h, h)?.sigmoid();
                    let g = gates.slice(1, 2 * h, h)?.tanh_act();
                    let o = gates.slice(1, 3 * h, h)?.sigmoid();
                    cell = f.mul(&cell)?.add(&i.mul(&g)?)?;
                    hidden = o.mul(&cell.tanh_act())?;
                }
                RnnKind::Gru => {
                    let r = gx.slice(1, 0, h)?.add(&gh.slice(1, 0, h)?)?.sigmoid();
                    let z = gx.slice(1, h, h)?.add(&gh.slice(1, h, h)?)?.sigmoid();
                    let n = gx
                        .slice(1, 2 * h, h)?
                        .add(&r.mul(&gh.slice(1, 2 * h, h)?)?)?
                        .tanh_act();
                    let zc = ones.sub(&z)?;
                    hidden = zc.mul(&n)?.add(&z.mul(&hidden)?)?;
                }
            }
            states[t] = Some(hidden.clone());
        }
        let zero_row = Tensor::zeros(vec![1, h]);
        let rows: Vec<Tensor<E>> = states
            .into_iter()
            .map(|s| s.unwrap_or_else(|| zero_row.clone()))
            .collect();
        let refs: Vec<&Tensor<E>> = rows.iter().collect();
        Tensor::concat(0, &refs)
    }
}

impl<E: Element> ParamSet<E> for RnnCell<E> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<E>)) {
        f(format!("{prefix}w_ih"), &self.w_ih);
        f(format!("{prefix}w_hh"), &self.w_hh);
        f(format!("{prefix}b_ih"), &self.b_ih);
        f(format!("{prefix}b_hh"), &self.b_hh);
    }

    fn map(&self, f: &mut dyn FnMut(&Tensor<E>) -> Tensor<E>) -> Self {
        RnnCell {
            kind: self.kind,
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            w_ih: f(&self.w_ih),
            w_hh: f(&self.w_hh),
            b_ih: f(&self.b_ih),
            b_hh: f(&self.b_hh),
        }
    }
}

/// Bidirectional pass: forward cell over the valid prefix left to right,
/// backward cell right to left, outputs concatenated along features.
/// `x: [T, d] -> [T, 2h]`; padded rows are zero.
pub fn rnn_bidir<E: Element>(
    x: &Tensor<E>,
    valid: usize,
    fwd: &RnnCell<E>,
    bwd: &RnnCell<E>,
) -> Result<Tensor<E>> {
    let t_total = x.shape()[0];
    if t_total == 0 {
        return Err(Error::Contract("rnn_bidir: empty sequence".into()));
    }
    if valid > t_total {
        return Err(Error::Contract(format!(
            "rnn_bidir: valid length {valid} exceeds sequence length {t_total}"
        )));
    }
    let f = fwd.run(x, valid, false)?;
    let b = bwd.run(x, valid, true)?;
    Tensor::concat(1, &[&f, &b])
}

/// The improved recurrent layer: bidirectional RNN, then a fully connected
/// projection back to the model width, then dropout.
pub struct RnnPrime<E: Element> {
    pub fwd: RnnCell<E>,
    pub bwd: RnnCell<E>,
    pub proj: Linear<E>,
    pub dropout: f64,
}

impl<E: Element> RnnPrime<E> {
    pub fn init(kind: RnnKind, d: usize, h: usize, dropout: f64, rng: &mut SeedRng) -> Self {
        RnnPrime {
            fwd: RnnCell::init(kind, d, h, rng),
            bwd: RnnCell::init(kind, d, h, rng),
            proj: Linear::init(d, 2 * h, true, rng),
            dropout,
        }
    }

    /// `x: [T, d] -> [T, d]`.
    pub fn apply(&self, x: &Tensor<E>, valid: usize, phase: &mut Phase) -> Result<Tensor<E>> {
        let r = rnn_bidir(x, valid, &self.fwd, &self.bwd)?;
        let p = self.proj.apply(&r)?;
        phase.dropout(&p, self.dropout)
    }
}

impl<E: Element> ParamSet<E> for RnnPrime<E> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<E>)) {
        self.fwd.visit(&format!("{prefix}fwd."), f);
        self.bwd.visit(&format!("{prefix}bwd."), f);
        self.proj.visit(&format!("{prefix}proj."), f);
    }

    fn map(&self, f: &mut dyn FnMut(&Tensor<E>) -> Tensor<E>) -> Self {
        RnnPrime {
            fwd: self.fwd.map(f),
            bwd: self.bwd.map(f),
            proj: self.proj.map(f),
            dropout: self.dropout,
        }
    }
}

/// One layer of the local-aware stream: two pre-norm residual sub-layers.
/// With `skip` disabled the sub-layer output replaces its input instead of
/// adding to it.
pub struct LocalBlock<E: Element> {
    pub norm1: LayerNorm<E>,
    pub rnn: RnnPrime<E>,
    pub norm2: LayerNorm<E>,
    pub ffn: FeedForward<E>,
    pub skip: bool,
}

impl<E: Element> LocalBlock<E> {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        kind: RnnKind,
        d: usize,
        h: usize,
        d_ff: usize,
        activation: crate::nn::Activation,
        dropout: f64,
        skip: bool,
        rng: &mut SeedRng,
    ) -> Self {
        LocalBlock {
            norm1: LayerNorm::init(d),
            rnn: RnnPrime::init(kind, d, h, dropout, rng),
            norm2: LayerNorm::init(d),
            ffn: FeedForward::init(d, d_ff, activation, dropout, rng),
            skip,
        }
    }

    /// `x: [T, d] -> [T, d]`.
    pub fn apply(&self, x: &Tensor<E>, valid: usize, phase: &mut Phase) -> Result<Tensor<E>> {
        let r = self.rnn.apply(&self.norm1.apply(x)?, valid, phase)?;
        let a = if self.skip { x.add(&r)? } else { r };
        let f = self.ffn.apply(&self.norm2.apply(&a)?, phase)?;
        if self.skip {
            a.add(&f)
        } else {
            Ok(f)
        }
    }
}

impl<E: Element> ParamSet<E> for LocalBlock<E> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<E>)) {
        self.norm1.visit(&format!("{prefix}norm1."), f);
        self.rnn.visit(&format!("{prefix}rnn."), f);
        self.norm2.visit(&format!("{prefix}norm2."), f);
        self.ffn.visit(&format!("{prefix}ffn."), f);
    }

    fn map(&self, f: &mut dyn FnMut(&Tensor<E>) -> Tensor<E>) -> Self {
        LocalBlock {
            norm1: self.norm1.map(f),
            rnn: self.rnn.map(f),
            norm2: self.norm2.map(f),
            ffn: self.ffn.map(f),
            skip: self.skip,
        }
    }
}

impl<E: Element, T: ParamSet<E>> ParamSet<E> for Vec<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<E>)) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&format!("{prefix}{i}."), f);
        }
    }

    fn map(&self, f: &mut dyn FnMut(&Tensor<E>) -> Tensor<E>) -> Self {
        self.iter().map(|item| item.map(f)).collect()
    }
}

/// Sequential application of the local blocks.
pub fn local_stack<E: Element>(
    x: &Tensor<E>,
    valid: usize,
    blocks: &[LocalBlock<E>],
    phase: &mut Phase,
) -> Result<Tensor<E>> {
    if blocks.is_empty() {
        return Err(Error::Config(
            "local stack needs at least one layer; remove the stream via an ablation instead"
                .into(),
        ));
    }
    let mut cur = x.clone();
    for block in blocks {
        cur = block.apply(&cur, valid, phase)?;
    }
    Ok(cur)
}
