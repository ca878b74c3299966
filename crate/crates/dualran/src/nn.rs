//! Shared neural building blocks: linear layers, layer normalization,
//! dropout, embedding tables, and the two-layer feed-forward sub-layer.

use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tensor::{Element, Tape, Tensor};

/// Execution phase threaded through every forward pass. Training carries the
/// random source that draws dropout masks; inference is deterministic.
pub enum Phase<'r> {
    Train { rng: &'r mut SeedRng },
    Infer,
}

impl Phase<'_> {
    pub fn dropout<E: Element>(&mut self, x: &Tensor<E>, rate: f64) -> Result<Tensor<E>> {
        match self {
            Phase::Infer => dropout(
                x,
                DropoutSpec {
                    rate,
                    mode: DropoutMode::Inference,
                },
                None,
            ),
            Phase::Train { rng } => dropout(
                x,
                DropoutSpec {
                    rate,
                    mode: DropoutMode::Training,
                },
                Some(rng),
            ),
        }
    }
}

/// Structure whose trainable tensors can be enumerated and rebuilt.
///
/// `visit` and `map` traverse tensors in the same fixed order; that order
/// defines the flat parameter registry used by the optimizer, the checkpoint
/// container, and parameter counting.
pub trait ParamSet<E: Element>: Sized {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<E>));
    fn map(&self, f: &mut dyn FnMut(&Tensor<E>) -> Tensor<E>) -> Self;

    /// Named tensors in registry order.
    fn flatten(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t.clone())));
        out
    }

    /// Same structure with every tensor registered as a trainable tape leaf.
    fn watch_all(&self, tape: &Tape<E>) -> Self {
        self.map(&mut |t| t.watch(tape))
    }

    /// Total number of scalar parameters.
    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    /// Rebuild the structure from tensors in registry order.
    fn from_flat(&self, flat: &[Tensor<E>]) -> Self {
        let mut i = 0;
        let out = self.map(&mut |_| {
            let t = flat[i].clone();
            i += 1;
            t
        });
        assert_eq!(i, flat.len(), "from_flat: tensor count mismatch");
        out
    }
}

/// Activation inside the feed-forward sub-layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply<E: Element>(&self, x: &Tensor<E>) -> Tensor<E> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Gelu => x.gelu(),
        }
    }
}

// ── linear ───────────────────────────────────────────────────────────

/// Fully connected layer `y = x W^T + b` with `weight: [out, in]`.
pub struct Linear<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Option<Tensor<E>>,
}

impl<E: Element> Linear<E> {
    pub fn new(weight: Tensor<E>, bias: Option<Tensor<E>>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::Config("linear: weight must be rank 2".into()));
        }
        if weight.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("linear: non-finite weight".into()));
        }
        if let Some(b) = &bias {
            if b.shape() != [weight.shape()[0]] {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    lhs: weight.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        Ok(Linear { weight, bias })
    }

    /// Uniform init in ±1/sqrt(in_dim); bias zero when present.
    pub fn init(out_dim: usize, in_dim: usize, with_bias: bool, rng: &mut SeedRng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = init_uniform(vec![out_dim, in_dim], bound, rng);
        let bias = with_bias.then(|| Tensor::zeros(vec![out_dim]));
        Linear { weight, bias }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// `x: [T, in] -> [T, out]`.
    pub fn apply(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let y = x.matmul(&self.weight.transpose()?)?;
        match &self.bias {
            Some(b) => y.add_row(b),
            None => Ok(y),
        }
    }
}

impl<E: Element> ParamSet<E> for Linear<E> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<E>)) {
        f(format!("{prefix}weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(format!("{prefix}bias"), b);
        }
    }

    fn map(&self, f: &mut dyn FnMut(&Tensor<E>) -> Tensor<E>) -> Self {
        Linear {
            weight: f(&self.weight),
            bias: self.bias.as_ref().map(|b| f(b)),
        }
    }
}

/// Tensor filled with uniform draws in ±bound (drawn in f64, then cast).
pub fn init_uniform<E: Element>(shape: Vec<usize>, bound: f64, rng: &mut SeedRng) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let data: Vec<E> = (0..n)
        .map(|_| E::from_f64(rng.uniform(-bound, bound)))
        .collect();
    Tensor::new(shape, data).expect("shape/data consistent by construction")
}

// ── layer norm ───────────────────────────────────────────────────────

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row standardization followed by a learned affine map.
pub struct LayerNorm<E: Element> {
    pub gain: Tensor<E>,
    pub shift: Tensor<E>,
    pub eps: E,
}

impl<E: Element> LayerNorm<E> {
    pub fn new(gain: Tensor<E>, shift: Tensor<E>, eps: E) -> Result<Self> {
        if eps <= E::zero() {
            return Err(Error::Config("layer norm: epsilon must be positive".into()));
        }
        if gain.shape() != shift.shape() || gain.rank() != 1 {
            return Err(Error::ShapeMismatch {
                op: "layer_norm params",
                lhs: gain.shape().to_vec(),
                rhs: shift.shape().to_vec(),
            });
        }
        Ok(LayerNorm { gain, shift, eps })
    }

    pub fn init(d: usize) -> Self {
        LayerNorm {
            gain: Tensor::full(vec![d], E::one()),
            shift: Tensor::zeros(vec![d]),
            eps: E::from_f64(LAYER_NORM_EPS),
        }
    }

    /// `x: [T, d] -> [T, d]`, each row standardized then `gain * x + shift`.
    pub fn apply(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        if x.rank() != 2 || x.shape()[1] != self.gain.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: self.gain.shape().to_vec(),
            });
        }
        x.layer_norm_rows(self.eps)?
            .mul_row(&self.gain)?
            .add_row(&self.shift)
    }
}

impl<E: Element> ParamSet<E> for LayerNorm<E> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<E>)) {
        f(format!("{prefix}gain"), &self.gain);
        f(format!("{prefix}shift"), &self.shift);
    }

    fn map(&self, f: &mut dyn FnMut(&Tensor<E>) -> Tensor<E>) -> Self {
        LayerNorm {
            gain: f(&self.gain),
            shift: f(&self.shift),
            eps: self.eps,
        }
    }
}

// ── dropout ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Training,
    Inference,
}

#[derive(Debug, Clone, Copy)]
pub struct DropoutSpec {
    pub rate: f64,
    pub mode: DropoutMode,
}

/// Inverted dropout: in training, each element is zeroed with probability
/// `rate` and survivors are scaled by `1/(1-rate)` so expectation is
/// preserved. Inference mode is the identity map.
pub fn dropout<E: Element>(
    x: &Tensor<E>,
    spec: DropoutSpec,
    rng: Option<&mut SeedRng>,
) -> Result<Tensor<E>> {
    if !(0.0..1.0).contains(&spec.rate) {
        return Err(Error::Config(format!(
            "dropout rate must be in [0, 1), got {}",
            spec.rate
        )));
    }
    match spec.mode {
        DropoutMode::Inference => Ok(x.clone()),
        DropoutMode::Training => {
            if spec.rate == 0.0 {
                return Ok(x.clone());
            }
            let rng = rng.ok_or_else(|| {
                Error::Contract("dropout: training mode needs a random source".into())
            })?;
            let scale = E::from_f64(1.0 / (1.0 - spec.rate));
            let mask: Vec<E> = (0..x.numel())
                .map(|_| {
                    if rng.unit() < spec.rate {
                        E::zero()
                    } else {
                        scale
                    }
                })
                .collect();
            x.mul(&Tensor::new(x.shape().to_vec(), mask)?)
        }
    }
}

// ── embedding ────────────────────────────────────────────────────────

/// Lookup table `[V, d]`; row `i` is the embedding of id `i`.
pub struct EmbeddingTable<E: Element> {
    pub table: Tensor<E>,
}

impl<E: Element> EmbeddingTable<E> {
    pub fn new(table: Tensor<E>) -> Result<Self> {
        if table.rank() != 2 {
            return Err(Error::Config("embedding: table must be rank 2".into()));
        }
        Ok(EmbeddingTable { table })
    }

    /// Normal init with the given standard deviation.
    pub fn init_normal(vocab: usize, dim: usize, sigma: f64, rng: &mut SeedRng) -> Self {
        let data: Vec<E> = (0..vocab * dim)
            .map(|_| E::from_f64(rng.normal() * sigma))
            .collect();
        EmbeddingTable {
            table: Tensor::new(vec![vocab, dim], data).expect("consistent"),
        }
    }

    pub fn vocab(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    /// `ids: [T] -> [T, d]`; errors name the offending position.
    pub fn lookup(&self, ids: &[usize]) -> Result<Tensor<E>> {
        Tensor::embed(&self.table, ids)
    }
}

impl<E: Element> ParamSet<E> for EmbeddingTable<E> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<E>)) {
        f(format!("{prefix}table"), &self.table);
    }

    fn map(&self, f: &mut dyn FnMut(&Tensor<E>) -> Tensor<E>) -> Self {
        EmbeddingTable {
            table: f(&self.table),
        }
    }
}

// ── feed-forward ─────────────────────────────────────────────────────

/// Two fully connected layers with activation and dropout between:
/// `DP(FC(DP(act(FC(x)))))`. Input and output widths are equal.
pub struct FeedForward<E: Element> {
    pub fc1: Linear<E>,
    pub fc2: Linear<E>,
    pub activation: Activation,
    pub dropout: f64,
}

impl<E: Element> FeedForward<E> {
    pub fn init(
        d: usize,
        d_ff: usize,
        activation: Activation,
        dropout: f64,
        rng: &mut SeedRng,
    ) -> Self {
        FeedForward {
            fc1: Linear::init(d_ff, d, true, rng),
            fc2: Linear::init(d, d_ff, true, rng),
            activation,
            dropout,
        }
    }

    /// `x: [T, d] -> [T, d]`.
    pub fn apply(&self, x: &Tensor<E>, phase: &mut Phase) -> Result<Tensor<E>> {
        let h = self.fc1.apply(x)?;
        let h = self.activation.apply(&h);
        let h = phase.dropout(&h, self.dropout)?;
        let y = self.fc2.apply(&h)?;
        phase.dropout(&y, self.dropout)
    }
}

impl<E: Element> ParamSet<E> for FeedForward<E> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<E>)) {
        self.fc1.visit(&format!("{prefix}fc1."), f);
        self.fc2.visit(&format!("{prefix}fc2."), f);
    }

    fn map(&self, f: &mut dyn FnMut(&Tensor<E>) -> Tensor<E>) -> Self {
        FeedForward {
            fc1: self.fc1.map(f),
            fc2: self.fc2.map(f),
            activation: self.activation,
            dropout: self.dropout,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_constant_row_collapses_to_shift() {
        let ln = LayerNorm::<f64>::init(4);
        let x = Tensor::from_rows(&[vec![5.0, 5.0, 5.0, 5.0]]).unwrap();
        let y = ln.apply(&x).unwrap();
        for v in y.data() {
            assert!(v.abs() < 1e-2, "constant row should normalize near 0: {v}");
        }
        // with a nonzero shift the output equals the shift
        let ln2 = LayerNorm::new(
            Tensor::full(vec![4], 1.0),
            Tensor::full(vec![4], 3.5),
            1e-5,
        )
        .unwrap();
        let y2 = ln2.apply(&x).unwrap();
        for v in y2.data() {
            assert!((v - 3.5).abs() < 1e-2);
        }
    }

    #[test]
    fn layer_norm_keeps_standardized_row() {
        // row with exact mean 0 and variance 1
        let x = Tensor::from_rows(&[vec![-1.0, 1.0, -1.0, 1.0]]).unwrap();
        let y = LayerNorm::<f64>::init(4).apply(&x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}"); // eps shifts variance slightly
        }
    }

    #[test]
    fn layer_norm_matches_formula_oracle() {
        let mut rng = SeedRng::new(8);
        let row: Vec<f64> = (0..6).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let x = Tensor::from_rows(&[row.clone()]).unwrap();
        let ln = LayerNorm::<f64>::new(
            Tensor::full(vec![6], 1.0),
            Tensor::zeros(vec![6]),
            1e-12,
        )
        .unwrap();
        let y = ln.apply(&x).unwrap();
        let mean = row.iter().sum::<f64>() / 6.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        for (a, v) in y.data().iter().zip(&row) {
            let want = (v - mean) / (var + 1e-12).sqrt();
            assert!((a - want).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_dim_mismatch() {
        let ln = LayerNorm::<f64>::init(4);
        let x = Tensor::<f64>::zeros(vec![2, 3]);
        assert!(matches!(
            ln.apply(&x),
            Err(crate::Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn layer_norm_shift_invariance() {
        let mut rng = SeedRng::new(21);
        let row: Vec<f64> = (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let shifted: Vec<f64> = row.iter().map(|v| v + 7.3).collect();
        let ln = LayerNorm::<f64>::init(5);
        let a = ln.apply(&Tensor::from_rows(&[row]).unwrap()).unwrap();
        let b = ln.apply(&Tensor::from_rows(&[shifted]).unwrap()).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn feed_forward_zero_weights_gives_zero() {
        let ffn = FeedForward::<f64> {
            fc1: Linear::new(Tensor::zeros(vec![4, 2]), Some(Tensor::zeros(vec![4]))).unwrap(),
            fc2: Linear::new(Tensor::zeros(vec![2, 4]), Some(Tensor::zeros(vec![2]))).unwrap(),
            activation: Activation::Relu,
            dropout: 0.0,
        };
        let x = Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let y = ffn.apply(&x, &mut Phase::Infer).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn feed_forward_inference_ignores_dropout_rate() {
        let mut rng = SeedRng::new(31);
        let mk = |rate| FeedForward::<f64> {
            fc1: Linear::init(4, 2, true, &mut SeedRng::new(1)),
            fc2: Linear::init(2, 4, true, &mut SeedRng::new(2)),
            activation: Activation::Relu,
            dropout: rate,
        };
        let x = Tensor::from_rows(&[vec![rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)]]).unwrap();
        let y0 = mk(0.0).apply(&x, &mut Phase::Infer).unwrap();
        let y2 = mk(0.2).apply(&x, &mut Phase::Infer).unwrap();
        assert_eq!(y0.data(), y2.data());
    }

    #[test]
    fn feed_forward_matches_hand_composition() {
        // 1x2 input, hand-set 2x2 weights, identity-free composition oracle
        let w1 = Tensor::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0]]).unwrap();
        let b1 = Tensor::new(vec![2], vec![0.1, -0.2]).unwrap();
        let w2 = Tensor::from_rows(&[vec![2.0, 0.0], vec![-1.0, 1.0]]).unwrap();
        let b2 = Tensor::new(vec![2], vec![0.0, 0.3]).unwrap();
        let ffn = FeedForward::<f64> {
            fc1: Linear::new(w1, Some(b1)).unwrap(),
            fc2: Linear::new(w2, Some(b2)).unwrap(),
            activation: Activation::Relu,
            dropout: 0.0,
        };
        let x = [0.4, -0.7];
        let y = ffn
            .apply(&Tensor::from_rows(&[x.to_vec()]).unwrap(), &mut Phase::Infer)
            .unwrap();
        // oracle: h = relu(W1 x + b1); y = W2 h + b2
        let h = [
            (1.0 * x[0] - 1.0 * x[1] + 0.1).max(0.0),
            (0.5 * x[0] + 2.0 * x[1] - 0.2).max(0.0),
        ];
        let want = [2.0 * h[0] + 0.0 * h[1], -1.0 * h[0] + 1.0 * h[1] + 0.3];
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn feed_forward_param_count_formula() {
        let mut rng = SeedRng::new(9);
        let (d, d_ff) = (6, 12);
        let ffn = FeedForward::<f32>::init(d, d_ff, Activation::Relu, 0.1, &mut rng);
        assert_eq!(ffn.param_count(), d * d_ff + d_ff + d_ff * d + d);
    }

    #[test]
    fn dropout_rate_zero_and_inference_are_identity() {
        let x = Tensor::<f64>::full(vec![10], 2.0);
        let mut rng = SeedRng::new(4);
        let y = dropout(
            &x,
            DropoutSpec {
                rate: 0.0,
                mode: DropoutMode::Training,
            },
            Some(&mut rng),
        )
        .unwrap();
        assert_eq!(y.data(), x.data());
        let z = dropout(
            &x,
            DropoutSpec {
                rate: 0.9,
                mode: DropoutMode::Inference,
            },
            None,
        )
        .unwrap();
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn dropout_rejects_rate_one() {
        let x = Tensor::<f64>::zeros(vec![2]);
        let mut rng = SeedRng::new(4);
        assert!(matches!(
            dropout(
                &x,
                DropoutSpec {
                    rate: 1.0,
                    mode: DropoutMode::Training
                },
                Some(&mut rng)
            ),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dropout_keep_fraction_and_mean() {
        let n = 100_000;
        let x = Tensor::<f64>::full(vec![n], 1.0);
        let mut rng = SeedRng::new(17);
        let y = dropout(
            &x,
            DropoutSpec {
                rate: 0.5,
                mode: DropoutMode::Training,
            },
            Some(&mut rng),
        )
        .unwrap();
        let kept = y.data().iter().filter(|v| **v != 0.0).count();
        let frac = kept as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01, "keep fraction {frac}");
        let mean = y.data().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn embedding_repeated_ids_and_zero_table() {
        let mut rng = SeedRng::new(2);
        let emb = EmbeddingTable::<f64>::init_normal(5, 3, 0.02, &mut rng);
        let out = emb.lookup(&[0, 0]).unwrap();
        assert_eq!(&out.data()[..3], &out.data()[3..]);

        let zero = EmbeddingTable::new(Tensor::<f64>::zeros(vec![5, 3])).unwrap();
        let z = zero.lookup(&[1, 2, 4]).unwrap();
        assert_eq!(z.shape(), &[3, 3]);
        assert!(z.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn embedding_gradient_counts_ids() {
        let tape = Tape::new();
        let emb = EmbeddingTable::<f64> {
            table: Tensor::zeros(vec![4, 2]).watch(&tape),
        };
        let out = emb.lookup(&[1, 1, 3, 1]).unwrap();
        let grads = tape.backward(&out.sum_all()).unwrap();
        let g = grads.of(&emb.table).unwrap();
        assert_eq!(g.data(), &[0., 0., 3., 3., 0., 0., 1., 1.]);
    }
}
