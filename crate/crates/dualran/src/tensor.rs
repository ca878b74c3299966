//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable value: a shape plus a contiguous row-major
//! buffer. Operations between tensors compute eagerly; when an operand is
//! attached to a [`Tape`], the operation is also recorded so that
//! [`Tape::backward`] can replay the graph in reverse and accumulate
//! gradients for every trainable leaf. Tensors not attached to any tape run
//! through exactly the same kernels with no recording overhead, which is how
//! inference works.
//!
//! The element type is generic: `f32` is the training default, `f64` backs
//! gradient checking and the brute-force oracles. A tape is single-threaded;
//! distinct tapes are independent and may live on different threads.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Scalar element of a tensor. Implemented for `f32` and `f64`.
pub trait Element:
    num_traits::Float + fmt::Debug + fmt::Display + Default + std::iter::Sum + 'static
{
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Element type tag, used by the checkpoint container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Dtype> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

// ── Tape ─────────────────────────────────────────────────────────────

/// Operation recorded on the tape. Fields are node indices of the inputs.
enum Op<E: Element> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, E),
    /// Broadcast a rank-1 row over the rows of a rank-2 tensor, adding.
    AddRow(usize, usize),
    /// Broadcast a rank-1 row over the rows of a rank-2 tensor, multiplying.
    MulRow(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Relu(usize),
    Gelu(usize),
    Tanh(usize),
    Sigmoid(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    /// Row-wise standardization (mean 0, variance 1); affine is separate.
    LayerNormRows { x: usize, eps: E },
    /// Replace entries in last-axis positions where `keep` is false by `fill`.
    MaskLast { x: usize, keep: Rc<[bool]> },
    Concat { axis: usize, parts: Vec<usize> },
    Slice { x: usize, axis: usize, start: usize, len: usize },
    /// Row gather from an embedding table; gradient scatter-adds per id.
    Embed { table: usize, ids: Rc<[usize]> },
    SumAll(usize),
    /// Per-row single-column gather; `None` rows contribute zero.
    PickPerRow { x: usize, picks: Rc<[Option<usize>]> },
}

struct Node<E: Element> {
    op: Op<E>,
    shape: Vec<usize>,
    value: Rc<[E]>,
    needs: bool,
    trainable: bool,
}

/// Reverse-mode gradient tape. Cheap to clone (shared handle).
pub struct Tape<E: Element> {
    nodes: Rc<RefCell<Vec<Node<E>>>>,
}

impl<E: Element> Clone for Tape<E> {
    fn clone(&self) -> Self {
        Tape {
            nodes: Rc::clone(&self.nodes),
        }
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Rc::new(RefCell::new(Vec::new())),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same(a: &Tape<E>, b: &Tape<E>) -> bool {
        Rc::ptr_eq(&a.nodes, &b.nodes)
    }

    fn push(
        &self,
        op: Op<E>,
        shape: Vec<usize>,
        value: Rc<[E]>,
        needs: bool,
        trainable: bool,
    ) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            shape,
            value,
            needs,
            trainable,
        });
        nodes.len() - 1
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs
    }

    /// Run reverse accumulation from a scalar loss. Returns the gradient of
    /// every trainable leaf the loss depends on; non-trainable leaves are
    /// untouched.
    pub fn backward(&self, loss: &Tensor<E>) -> Result<Gradients<E>> {
        let node = loss.node.as_ref().ok_or_else(|| {
            Error::Contract("backward: loss tensor is not attached to a tape".into())
        })?;
        if !Tape::same(&node.tape, self) {
            return Err(Error::Contract(
                "backward: loss tensor belongs to a different tape".into(),
            ));
        }
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss.shape()
            )));
        }
        let loss_id = node.id;
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<E>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss_id] = Some(vec![E::one()]);

        let mut out = Gradients {
            tape: self.clone(),
            by_node: std::collections::HashMap::new(),
        };

        for id in (0..=loss_id).rev() {
            if !nodes[id].needs {
                continue;
            }
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let value = |i: usize| -> &[E] { &nodes[i].value };
            let shape_of = |i: usize| -> &[usize] { &nodes[i].shape };
            // Accumulates `contrib` into the pending gradient of input `dst`.
            let add_to = |grads: &mut Vec<Option<Vec<E>>>, dst: usize, contrib: Vec<E>| {
                if !nodes[dst].needs {
                    return;
                }
                match &mut grads[dst] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contrib) {
                            *a = *a + c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            };

            match &nodes[id].op {
                Op::Leaf => {
                    if nodes[id].trainable {
                        out.by_node.insert(id, grad);
                    }
                }
                Op::Add(a, b) => {
                    add_to(&mut grads, *a, grad.clone());
                    add_to(&mut grads, *b, grad);
                }
                Op::Sub(a, b) => {
                    add_to(&mut grads, *a, grad.clone());
                    add_to(&mut grads, *b, grad.iter().map(|g| -*g).collect());
                }
                Op::Mul(a, b) => {
                    let va = value(*a);
                    let vb = value(*b);
                    add_to(
                        &mut grads,
                        *a,
                        grad.iter().zip(vb).map(|(g, v)| *g * *v).collect(),
                    );
                    add_to(
                        &mut grads,
                        *b,
                        grad.iter().zip(va).map(|(g, v)| *g * *v).collect(),
                    );
                }
                Op::Scale(a, c) => {
                    add_to(&mut grads, *a, grad.iter().map(|g| *g * *c).collect());
                }
                Op::AddRow(a, row) => {
                    let cols = *shape_of(*row).last().unwrap();
                    let mut grow = vec![E::zero(); cols];
                    for (i, g) in grad.iter().enumerate() {
                        grow[i % cols] = grow[i % cols] + *g;
                    }
                    add_to(&mut grads, *a, grad);
                    add_to(&mut grads, *row, grow);
                }
                Op::MulRow(a, row) => {
                    let va = value(*a);
                    let vrow = value(*row);
                    let cols = vrow.len();
                    let mut ga = vec![E::zero(); va.len()];
                    let mut grow = vec![E::zero(); cols];
                    for (i, g) in grad.iter().enumerate() {
                        let c = i % cols;
                        ga[i] = *g * vrow[c];
                        grow[c] = grow[c] + *g * va[i];
                    }
                    add_to(&mut grads, *a, ga);
                    add_to(&mut grads, *row, grow);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = dims2(shape_of(*a));
                    let n = shape_of(*b)[1];
                    let va = value(*a);
                    let vb = value(*b);
                    let mut ga = vec![E::zero(); m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = E::zero();
                            for j in 0..n {
                                s = s + grad[i * n + j] * vb[p * n + j];
                            }
                            ga[i * k + p] = s;
                        }
                    }
                    let mut gb = vec![E::zero(); k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = va[i * k + p];
                            if av != E::zero() {
                                for j in 0..n {
                                    gb[p * n + j] = gb[p * n + j] + av * grad[i * n + j];
                                }
                            }
                        }
                    }
                    add_to(&mut grads, *a, ga);
                    add_to(&mut grads, *b, gb);
                }
                Op::Transpose(a) => {
                    // input was [p, q], output (and grad) is [q, p]
                    let (q, p) = dims2(shape_of(id));
                    let mut ga = vec![E::zero(); grad.len()];
                    for i in 0..q {
                        for j in 0..p {
                            ga[j * q + i] = grad[i * p + j];
                        }
                    }
                    add_to(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    add_to(&mut grads, *a, grad);
                }
                Op::Relu(a) => {
                    let va = value(*a);
                    add_to(
                        &mut grads,
                        *a,
                        grad.iter()
                            .zip(va)
                            .map(|(g, x)| if *x > E::zero() { *g } else { E::zero() })
                            .collect(),
                    );
                }
                Op::Gelu(a) => {
                    let va = value(*a);
                    add_to(
                        &mut grads,
                        *a,
                        grad.iter()
                            .zip(va)
                            .map(|(g, x)| *g * gelu_deriv(*x))
                            .collect(),
                    );
                }
                Op::Tanh(a) => {
                    let y = &nodes[id].value;
                    add_to(
                        &mut grads,
                        *a,
                        grad.iter()
                            .zip(y.iter())
                            .map(|(g, y)| *g * (E::one() - *y * *y))
                            .collect(),
                    );
                }
                Op::Sigmoid(a) => {
                    let y = &nodes[id].value;
                    add_to(
                        &mut grads,
                        *a,
                        grad.iter()
                            .zip(y.iter())
                            .map(|(g, y)| *g * *y * (E::one() - *y))
                            .collect(),
                    );
                }
                Op::SoftmaxRows(a) => {
                    let y = &nodes[id].value;
                    let cols = *shape_of(id).last().unwrap();
                    let mut ga = vec![E::zero(); y.len()];
                    for r in 0..y.len() / cols {
                        let o = r * cols;
                        let dot: E = (0..cols).map(|j| grad[o + j] * y[o + j]).sum();
                        for j in 0..cols {
                            ga[o + j] = y[o + j] * (grad[o + j] - dot);
                        }
                    }
                    add_to(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &nodes[id].value; // log-probabilities
                    let cols = *shape_of(id).last().unwrap();
                    let mut ga = vec![E::zero(); y.len()];
                    for r in 0..y.len() / cols {
                        let o = r * cols;
                        let gsum: E = (0..cols).map(|j| grad[o + j]).sum();
                        for j in 0..cols {
                            ga[o + j] = grad[o + j] - y[o + j].exp() * gsum;
                        }
                    }
                    add_to(&mut grads, *a, ga);
                }
                Op::LayerNormRows { x, eps } => {
                    let xv = value(*x);
                    let xhat = &nodes[id].value;
                    let cols = *shape_of(id).last().unwrap();
                    let inv_n = E::one() / E::from_f64(cols as f64);
                    let mut ga = vec![E::zero(); xv.len()];
                    for r in 0..xv.len() / cols {
                        let o = r * cols;
                        let mean: E = (0..cols).map(|j| xv[o + j]).sum::<E>() * inv_n;
                        let var: E = (0..cols)
                            .map(|j| (xv[o + j] - mean) * (xv[o + j] - mean))
                            .sum::<E>()
                            * inv_n;
                        let rstd = E::one() / (var + *eps).sqrt();
                        let gmean: E = (0..cols).map(|j| grad[o + j]).sum::<E>() * inv_n;
                        let gxhat: E = (0..cols)
                            .map(|j| grad[o + j] * xhat[o + j])
                            .sum::<E>()
                            * inv_n;
                        for j in 0..cols {
                            ga[o + j] = rstd * (grad[o + j] - gmean - xhat[o + j] * gxhat);
                        }
                    }
                    add_to(&mut grads, *x, ga);
                }
                Op::MaskLast { x, keep } => {
                    let cols = keep.len();
                    add_to(
                        &mut grads,
                        *x,
                        grad.iter()
                            .enumerate()
                            .map(|(i, g)| if keep[i % cols] { *g } else { E::zero() })
                            .collect(),
                    );
                }
                Op::Concat { axis, parts } => {
                    if *axis == 0 {
                        let mut offset = 0;
                        for p in parts.clone() {
                            let len = nodes[p].value.len();
                            add_to(&mut grads, p, grad[offset..offset + len].to_vec());
                            offset += len;
                        }
                    } else {
                        let rows = shape_of(id)[0];
                        let total_cols = shape_of(id)[1];
                        let mut col0 = 0;
                        for p in parts.clone() {
                            let pc = nodes[p].shape[1];
                            let mut gp = vec![E::zero(); rows * pc];
                            for r in 0..rows {
                                for c in 0..pc {
                                    gp[r * pc + c] = grad[r * total_cols + col0 + c];
                                }
                            }
                            add_to(&mut grads, p, gp);
                            col0 += pc;
                        }
                    }
                }
                Op::Slice { x, axis, start, len } => {
                    let in_shape = shape_of(*x).to_vec();
                    let mut gx = vec![E::zero(); nodes[*x].value.len()];
                    if *axis == 0 {
                        let cols = in_shape[1];
                        let from = start * cols;
                        gx[from..from + len * cols].copy_from_slice(&grad);
                    } else {
                        let cols = in_shape[1];
                        let rows = in_shape[0];
                        for r in 0..rows {
                            for c in 0..*len {
                                gx[r * cols + start + c] = grad[r * len + c];
                            }
                        }
                    }
                    add_to(&mut grads, *x, gx);
                }
                Op::Embed { table, ids } => {
                    let d = shape_of(*table)[1];
                    let mut gt = vec![E::zero(); nodes[*table].value.len()];
                    for (t, &row) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[row * d + j] = gt[row * d + j] + grad[t * d + j];
                        }
                    }
                    add_to(&mut grads, *table, gt);
                }
                Op::SumAll(a) => {
                    let n = nodes[*a].value.len();
                    add_to(&mut grads, *a, vec![grad[0]; n]);
                }
                Op::PickPerRow { x, picks } => {
                    let cols = *shape_of(*x).last().unwrap();
                    let mut gx = vec![E::zero(); nodes[*x].value.len()];
                    for (r, pick) in picks.iter().enumerate() {
                        if let Some(c) = pick {
                            gx[r * cols + c] = grad[r];
                        }
                    }
                    add_to(&mut grads, *x, gx);
                }
            }
        }
        Ok(out)
    }
}

/// Gradients of trainable leaves, keyed by tape node.
pub struct Gradients<E: Element> {
    tape: Tape<E>,
    by_node: std::collections::HashMap<usize, Vec<E>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient of a watched tensor, shaped like the tensor. `None` when the
    /// tensor is not a trainable leaf of this tape or the loss did not depend
    /// on it.
    pub fn of(&self, t: &Tensor<E>) -> Option<Tensor<E>> {
        let node = t.node.as_ref()?;
        if !Tape::same(&node.tape, &self.tape) {
            return None;
        }
        self.by_node.get(&node.id).map(|g| Tensor {
            shape: t.shape.clone(),
            data: Rc::from(g.as_slice()),
            node: None,
        })
    }

    /// Like [`Gradients::of`], but yields a zero tensor for a watched leaf the
    /// loss does not depend on.
    pub fn of_or_zero(&self, t: &Tensor<E>) -> Tensor<E> {
        self.of(t)
            .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
    }
}

// ── Tensor ───────────────────────────────────────────────────────────

#[derive(Clone)]
struct NodeRef<E: Element> {
    tape: Tape<E>,
    id: usize,
}

/// Immutable dense n-dimensional array, optionally attached to a tape.
#[derive(Clone)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Rc<[E]>,
    node: Option<NodeRef<E>>,
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor{:?}{:?}",
            self.shape,
            &self.data[..self.numel().min(8)]
        )
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[1])
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn gelu_val<E: Element>(x: E) -> E {
    // tanh approximation
    let c = E::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (E::one() + u.tanh())
}

fn gelu_deriv<E: Element>(x: E) -> E {
    let c = E::from_f64(0.797_884_560_802_865_4);
    let a = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (E::one() + three * a * x * x);
    half * (E::one() + t) + half * x * (E::one() - t * t) * du
}

fn sigmoid_val<E: Element>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return Err(Error::Contract(format!(
                "tensor: shape {:?} wants {} elements, got {}",
                shape,
                numel_of(&shape),
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Rc::from(data),
            node: None,
        })
    }

    pub fn scalar(v: E) -> Self {
        Tensor {
            shape: vec![],
            data: Rc::from(vec![v]),
            node: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel_of(&shape);
        Tensor {
            shape,
            data: Rc::from(vec![E::zero(); n]),
            node: None,
        }
    }

    pub fn full(shape: Vec<usize>, v: E) -> Self {
        let n = numel_of(&shape);
        Tensor {
            shape,
            data: Rc::from(vec![v; n]),
            node: None,
        }
    }

    pub fn from_rows(rows: &[Vec<E>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("from_rows: ragged rows".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Value of a scalar (or single-element) tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item: tensor has shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn at2(&self, r: usize, c: usize) -> E {
        self.data[r * self.shape[1] + c]
    }

    /// Detached copy: same value, no tape link.
    pub fn detach(&self) -> Tensor<E> {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            node: None,
        }
    }

    /// Register this value as a trainable leaf on `tape`.
    pub fn watch(&self, tape: &Tape<E>) -> Tensor<E> {
        let id = tape.push(
            Op::Leaf,
            self.shape.clone(),
            Rc::clone(&self.data),
            true,
            true,
        );
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            node: Some(NodeRef {
                tape: tape.clone(),
                id,
            }),
        }
    }

    /// Cast between element precisions. Detaches from any tape.
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::from(
                self.data
                    .iter()
                    .map(|v| F::from_f64(v.as_f64()))
                    .collect::<Vec<F>>(),
            ),
            node: None,
        }
    }

    fn last_dim(&self) -> Result<usize> {
        self.shape
            .last()
            .copied()
            .ok_or_else(|| Error::Contract("operation needs rank >= 1".into()))
    }

    // ── recording machinery ──────────────────────────────────────────

    fn joint_tape(operands: &[&Tensor<E>]) -> Result<Option<Tape<E>>> {
        let mut found: Option<Tape<E>> = None;
        for t in operands {
            if let Some(node) = &t.node {
                match &found {
                    None => found = Some(node.tape.clone()),
                    Some(tp) => {
                        if !Tape::same(tp, &node.tape) {
                            return Err(Error::Contract(
                                "operands belong to different tapes".into(),
                            ));
                        }
                    }
                }
            }
        }
        Ok(found)
    }

    /// Node id of `t` on `tape`, lifting tape-less operands as constants.
    fn lift(tape: &Tape<E>, t: &Tensor<E>) -> usize {
        match &t.node {
            Some(n) => n.id,
            None => tape.push(Op::Leaf, t.shape.clone(), Rc::clone(&t.data), false, false),
        }
    }

    fn record(
        tape: &Tape<E>,
        op: Op<E>,
        input_ids: &[usize],
        shape: Vec<usize>,
        data: Vec<E>,
    ) -> Tensor<E> {
        let needs = input_ids.iter().any(|&i| tape.needs(i));
        let data: Rc<[E]> = Rc::from(data);
        let id = tape.push(op, shape.clone(), Rc::clone(&data), needs, false);
        Tensor {
            shape,
            data,
            node: Some(NodeRef {
                tape: tape.clone(),
                id,
            }),
        }
    }

    fn unary(
        &self,
        data: Vec<E>,
        shape: Vec<usize>,
        build: impl FnOnce(usize) -> Op<E>,
    ) -> Tensor<E> {
        match &self.node {
            None => Tensor {
                shape,
                data: Rc::from(data),
                node: None,
            },
            Some(n) => {
                let tape = n.tape.clone();
                let a = n.id;
                Tensor::record(&tape, build(a), &[a], shape, data)
            }
        }
    }

    fn binary(
        &self,
        other: &Tensor<E>,
        data: Vec<E>,
        shape: Vec<usize>,
        build: impl FnOnce(usize, usize) -> Op<E>,
    ) -> Result<Tensor<E>> {
        Ok(match Tensor::joint_tape(&[self, other])? {
            None => Tensor {
                shape,
                data: Rc::from(data),
                node: None,
            },
            Some(tape) => {
                let a = Tensor::lift(&tape, self);
                let b = Tensor::lift(&tape, other);
                Tensor::record(&tape, build(a, b), &[a, b], shape, data)
            }
        })
    }

    // ── arithmetic ──────────────────────────────────────────────────

    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.same_shape("add", other)?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| *a + *b)
            .collect();
        self.binary(other, data, self.shape.clone(), Op::Add)
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.same_shape("sub", other)?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| *a - *b)
            .collect();
        self.binary(other, data, self.shape.clone(), Op::Sub)
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.same_shape("mul", other)?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| *a * *b)
            .collect();
        self.binary(other, data, self.shape.clone(), Op::Mul)
    }

    pub fn scale(&self, c: E) -> Tensor<E> {
        let data = self.data.iter().map(|a| *a * c).collect();
        self.unary(data, self.shape.clone(), |a| Op::Scale(a, c))
    }

    fn same_shape(&self, op: &'static str, other: &Tensor<E>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// `self` is `[r, c]`, `row` is `[c]`; adds `row` to every row.
    pub fn add_row(&self, row: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_row("add_row", row)?;
        let c = row.numel();
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, a)| *a + row.data[i % c])
            .collect();
        self.binary(row, data, self.shape.clone(), Op::AddRow)
    }

    /// `self` is `[r, c]`, `row` is `[c]`; multiplies every row by `row`.
    pub fn mul_row(&self, row: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_row("mul_row", row)?;
        let c = row.numel();
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, a)| *a * row.data[i % c])
            .collect();
        self.binary(row, data, self.shape.clone(), Op::MulRow)
    }

    fn check_row(&self, op: &'static str, row: &Tensor<E>) -> Result<()> {
        if self.rank() != 2 || row.rank() != 1 || self.shape[1] != row.shape[0] {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: row.shape.clone(),
            });
        }
        Ok(())
    }

    /// Matrix product `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k) = dims2(&self.shape);
        let n = other.shape[1];
        let mut out = vec![E::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a != E::zero() {
                    let brow = &other.data[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, b) in orow.iter_mut().zip(brow) {
                        *o = *o + a * *b;
                    }
                }
            }
        }
        self.binary(other, out, vec![m, n], Op::MatMul)
    }

    pub fn transpose(&self) -> Result<Tensor<E>> {
        if self.rank() != 2 {
            return Err(Error::Contract(format!(
                "transpose: want rank 2, got shape {:?}",
                self.shape
            )));
        }
        let (m, n) = dims2(&self.shape);
        let mut out = vec![E::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(self.unary(out, vec![n, m], Op::Transpose))
    }

    /// Same data, new extents; `product(shape)` must equal `numel`.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<E>> {
        if numel_of(&shape) != self.numel() {
            return Err(Error::Contract(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.shape, shape
            )));
        }
        Ok(self.unary(self.data.to_vec(), shape, Op::Reshape))
    }

    pub fn relu(&self) -> Tensor<E> {
        let data = self
            .data
            .iter()
            .map(|x| if *x > E::zero() { *x } else { E::zero() })
            .collect();
        self.unary(data, self.shape.clone(), Op::Relu)
    }

    pub fn gelu(&self) -> Tensor<E> {
        let data = self.data.iter().map(|x| gelu_val(*x)).collect();
        self.unary(data, self.shape.clone(), Op::Gelu)
    }

    pub fn tanh_act(&self) -> Tensor<E> {
        let data = self.data.iter().map(|x| x.tanh()).collect();
        self.unary(data, self.shape.clone(), Op::Tanh)
    }

    pub fn sigmoid(&self) -> Tensor<E> {
        let data = self.data.iter().map(|x| sigmoid_val(*x)).collect();
        self.unary(data, self.shape.clone(), Op::Sigmoid)
    }

    /// Row-wise softmax over the last axis, max-subtracted for stability.
    pub fn softmax(&self) -> Result<Tensor<E>> {
        let cols = self.last_dim()?;
        if self.data.iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("softmax: NaN in input".into()));
        }
        let mut out = vec![E::zero(); self.numel()];
        for r in 0..self.numel() / cols {
            let row = &self.data[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(row[0], E::max);
            let mut sum = E::zero();
            for (o, x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (*x - max).exp();
                sum = sum + *o;
            }
            for o in out[r * cols..(r + 1) * cols].iter_mut() {
                *o = *o / sum;
            }
        }
        Ok(self.unary(out, self.shape.clone(), Op::SoftmaxRows))
    }

    /// Row-wise log-softmax over the last axis (log-sum-exp, max-subtracted).
    pub fn log_softmax(&self) -> Result<Tensor<E>> {
        let cols = self.last_dim()?;
        if self.data.iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("log_softmax: NaN in input".into()));
        }
        let mut out = vec![E::zero(); self.numel()];
        for r in 0..self.numel() / cols {
            let row = &self.data[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(row[0], E::max);
            let lse = row.iter().map(|x| (*x - max).exp()).sum::<E>().ln() + max;
            for (o, x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = *x - lse;
            }
        }
        Ok(self.unary(out, self.shape.clone(), Op::LogSoftmaxRows))
    }

    /// Standardize each row of the last axis to mean 0, variance 1.
    pub fn layer_norm_rows(&self, eps: E) -> Result<Tensor<E>> {
        let cols = self.last_dim()?;
        let inv_n = E::one() / E::from_f64(cols as f64);
        let mut out = vec![E::zero(); self.numel()];
        for r in 0..self.numel() / cols {
            let row = &self.data[r * cols..(r + 1) * cols];
            let mean = row.iter().cloned().sum::<E>() * inv_n;
            let var = row.iter().map(|x| (*x - mean) * (*x - mean)).sum::<E>() * inv_n;
            let rstd = E::one() / (var + eps).sqrt();
            for (o, x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (*x - mean) * rstd;
            }
        }
        Ok(self.unary(out, self.shape.clone(), |x| Op::LayerNormRows { x, eps }))
    }

    /// Keep last-axis positions where `keep` is true, replace the rest by
    /// `fill`. Gradient flows only through kept positions.
    pub fn mask_last_axis(&self, keep: &[bool], fill: E) -> Result<Tensor<E>> {
        let cols = self.last_dim()?;
        if keep.len() != cols {
            return Err(Error::Contract(format!(
                "mask_last_axis: mask length {} does not match last extent {}",
                keep.len(),
                cols
            )));
        }
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| if keep[i % cols] { *x } else { fill })
            .collect();
        let keep: Rc<[bool]> = Rc::from(keep);
        Ok(self.unary(data, self.shape.clone(), move |x| Op::MaskLast { x, keep }))
    }

    /// Concatenate rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(axis: usize, parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(Error::Contract("concat: no parts".into()));
        }
        if axis > 1 || parts.iter().any(|p| p.rank() != 2) {
            return Err(Error::Contract(
                "concat: rank-2 tensors, axis 0 or 1".into(),
            ));
        }
        let fixed = 1 - axis;
        let base = parts[0].shape[fixed];
        for p in parts {
            if p.shape[fixed] != base {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: parts[0].shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let (rows, cols) = if axis == 0 { (total, base) } else { (base, total) };
        let mut data = vec![E::zero(); rows * cols];
        if axis == 0 {
            let mut off = 0;
            for p in parts {
                data[off..off + p.numel()].copy_from_slice(&p.data);
                off += p.numel();
            }
        } else {
            let mut col0 = 0;
            for p in parts {
                let pc = p.shape[1];
                for r in 0..rows {
                    data[r * cols + col0..r * cols + col0 + pc]
                        .copy_from_slice(&p.data[r * pc..(r + 1) * pc]);
                }
                col0 += pc;
            }
        }
        Ok(match Tensor::joint_tape(parts)? {
            None => Tensor {
                shape: vec![rows, cols],
                data: Rc::from(data),
                node: None,
            },
            Some(tape) => {
                let ids: Vec<usize> = parts.iter().map(|p| Tensor::lift(&tape, p)).collect();
                let op = Op::Concat {
                    axis,
                    parts: ids.clone(),
                };
                Tensor::record(&tape, op, &ids, vec![rows, cols], data)
            }
        })
    }

    /// Contiguous sub-block along `axis` of a rank-2 tensor.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
        if self.rank() != 2 || axis > 1 {
            return Err(Error::Contract(format!(
                "slice: want rank 2 and axis 0|1, got shape {:?} axis {}",
                self.shape, axis
            )));
        }
        if start + len > self.shape[axis] {
            return Err(Error::Contract(format!(
                "slice: {}..{} out of extent {}",
                start,
                start + len,
                self.shape[axis]
            )));
        }
        let (rows, cols) = dims2(&self.shape);
        let (out_shape, data) = if axis == 0 {
            (
                vec![len, cols],
                self.data[start * cols..(start + len) * cols].to_vec(),
            )
        } else {
            let mut d = Vec::with_capacity(rows * len);
            for r in 0..rows {
                d.extend_from_slice(&self.data[r * cols + start..r * cols + start + len]);
            }
            (vec![rows, len], d)
        };
        Ok(self.unary(data, out_shape, |x| Op::Slice {
            x,
            axis,
            start,
            len,
        }))
    }

    /// Row lookup: output row `t` is `table` row `ids[t]`. Gradient
    /// accumulates into looked-up table rows only.
    pub fn embed(table: &Tensor<E>, ids: &[usize]) -> Result<Tensor<E>> {
        if table.rank() != 2 {
            return Err(Error::Contract("embed: table must be rank 2".into()));
        }
        let (v, d) = dims2(&table.shape);
        for (pos, id) in ids.iter().enumerate() {
            if *id >= v {
                return Err(Error::Index {
                    what: "embedding id",
                    index: *id,
                    bound: v,
                    position: pos,
                });
            }
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for id in ids {
            data.extend_from_slice(&table.data[id * d..(id + 1) * d]);
        }
        let n = ids.len();
        let ids: Rc<[usize]> = Rc::from(ids);
        Ok(table.unary(data, vec![n, d], move |t| Op::Embed { table: t, ids }))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum_all(&self) -> Tensor<E> {
        let s = self.data.iter().cloned().sum();
        self.unary(vec![s], vec![], Op::SumAll)
    }

    /// Per-row gather: output `[rows]` with entry `x[r, picks[r]]`, or zero
    /// where the pick is `None`.
    pub fn pick_per_row(&self, picks: &[Option<usize>]) -> Result<Tensor<E>> {
        if self.rank() != 2 || picks.len() != self.shape[0] {
            return Err(Error::Contract(format!(
                "pick_per_row: shape {:?} with {} picks",
                self.shape,
                picks.len()
            )));
        }
        let cols = self.shape[1];
        let mut data = Vec::with_capacity(picks.len());
        for (r, p) in picks.iter().enumerate() {
            match p {
                Some(c) if *c < cols => data.push(self.data[r * cols + c]),
                Some(c) => {
                    return Err(Error::Index {
                        what: "pick column",
                        index: *c,
                        bound: cols,
                        position: r,
                    })
                }
                None => data.push(E::zero()),
            }
        }
        let n = picks.len();
        let picks: Rc<[Option<usize>]> = Rc::from(picks);
        Ok(self.unary(data, vec![n], move |x| Op::PickPerRow { x, picks }))
    }
}

// ── gradient checking ────────────────────────────────────────────────

/// Max relative deviation between the analytic gradient of scalar-valued `f`
/// at `x` and central finite differences with step `epsilon`:
/// `max_i |analytic_i - fd_i| / max(1, |fd_i|)`.
pub fn grad_check<E, F>(f: F, x: &Tensor<E>, epsilon: E) -> Result<E>
where
    E: Element,
    F: Fn(&Tensor<E>) -> Result<Tensor<E>>,
{
    grad_check_multi(|xs| f(&xs[0]), &[x.clone()], epsilon)
}

/// [`grad_check`] over several inputs at once; returns the worst deviation.
pub fn grad_check_multi<E, F>(f: F, inputs: &[Tensor<E>], epsilon: E) -> Result<E>
where
    E: Element,
    F: Fn(&[Tensor<E>]) -> Result<Tensor<E>>,
{
    if epsilon <= E::zero() {
        return Err(Error::Contract(
            "grad_check: epsilon must be positive".into(),
        ));
    }
    let tape = Tape::new();
    let watched: Vec<Tensor<E>> = inputs.iter().map(|t| t.watch(&tape)).collect();
    let y = f(&watched)?;
    if y.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check: f must be scalar-valued, got shape {:?}",
            y.shape()
        )));
    }
    let grads = tape.backward(&y)?;

    let mut worst = E::zero();
    let two_eps = epsilon + epsilon;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.of_or_zero(&watched[k]);
        for i in 0..input.numel() {
            let eval = |v: E| -> Result<E> {
                let mut data = input.data().to_vec();
                data[i] = v;
                let probe = Tensor::new(input.shape().to_vec(), data)?;
                let mut args: Vec<Tensor<E>> = inputs.to_vec();
                args[k] = probe;
                f(&args)?.item()
            };
            let x0 = input.data()[i];
            let fd = (eval(x0 + epsilon)? - eval(x0 - epsilon)?) / two_eps;
            let dev = (analytic.data()[i] - fd).abs() / E::one().max(fd.abs());
            if dev > worst {
                worst = dev;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let eye = t64(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let b = t64(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]);
        let out = eye.matmul(&b).unwrap();
        assert_eq!(out.shape(), &[3, 2]);
        assert_eq!(out.data(), b.data());
    }

    #[test]
    fn matmul_zero() {
        let z = Tensor::<f64>::zeros(vec![2, 3]);
        let b = t64(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]);
        let out = z.matmul(&b).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = crate::rng::SeedRng::new(5);
        let a: Vec<f64> = (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let ta = t64(vec![3, 4], a.clone());
        let tb = t64(vec![4, 2], b.clone());
        let out = ta.matmul(&tb).unwrap();
        // independent naive triple loop
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a[i * 4 + p] * b[p * 2 + j];
                }
                assert!((out.at2(i, j) - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::<f64>::zeros(vec![3, 4]);
        let b = Tensor::<f64>::zeros(vec![5, 2]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3, 4]") && msg.contains("[5, 2]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_and_singleton() {
        let x = t64(vec![2], vec![0.0, 0.0]);
        let y = x.softmax().unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-12);
        assert!((y.data()[1] - 0.5).abs() < 1e-12);

        let one = t64(vec![1], vec![7.3]);
        assert!((one.softmax().unwrap().data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_exp_normalize_oracle() {
        let x = t64(vec![3], vec![1.0, 2.0, 3.0]);
        let y = x.softmax().unwrap();
        let exps: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let z: f64 = exps.iter().sum();
        for (a, e) in y.data().iter().zip(&exps) {
            assert!((a - e / z).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = t64(vec![2], vec![f64::NAN, 0.0]);
        assert!(matches!(x.softmax(), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t64(vec![2, 3], vec![10.0, -4.0, 0.3, 2.0, 2.0, 2.0]);
        let y = x.softmax().unwrap();
        for r in 0..2 {
            let s: f64 = (0..3).map(|c| y.at2(r, c)).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::new();
        let x = t64(vec![2, 3], vec![1., -2., 3., 0.5, 0., 9.]).watch(&tape);
        let loss = x.sum_all();
        let grads = tape.backward(&loss).unwrap();
        let g = grads.of(&x).unwrap();
        assert!(g.data().iter().all(|v| *v == 1.0));
        assert_eq!(g.shape(), x.shape());
    }

    #[test]
    fn backward_of_half_square_norm_is_x() {
        let tape = Tape::new();
        let x = t64(vec![4], vec![0.3, -1.2, 2.0, 0.0]).watch(&tape);
        let loss = x.mul(&x).unwrap().sum_all().scale(0.5);
        let grads = tape.backward(&loss).unwrap();
        let g = grads.of(&x).unwrap();
        for (gi, xi) in g.data().iter().zip(x.data()) {
            assert!((gi - xi).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let x = t64(vec![2], vec![1.0, 2.0]).watch(&tape);
        let y = x.scale(2.0);
        assert!(matches!(tape.backward(&y), Err(Error::Contract(_))));
    }

    #[test]
    fn non_trainable_leaves_get_no_gradient() {
        let tape = Tape::new();
        let x = t64(vec![2], vec![1.0, 2.0]).watch(&tape);
        let c = t64(vec![2], vec![5.0, 5.0]); // lifted as constant
        let loss = x.mul(&c).unwrap().sum_all();
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.of(&c).is_none());
        assert_eq!(grads.of(&x).unwrap().data(), &[5.0, 5.0]);
    }

    #[test]
    fn grad_check_sum_is_exact() {
        let x = t64(vec![3], vec![0.4, -0.6, 2.0]);
        let dev = grad_check(|x| Ok(x.sum_all()), &x, 1e-5).unwrap();
        assert!(dev < 1e-10, "dev = {dev}");
    }

    #[test]
    fn grad_check_softmax_first_component() {
        let x = t64(vec![3], vec![0.1, -0.2, 0.3]);
        let dev = grad_check(
            |x| {
                x.softmax()?
                    .reshape(vec![1, 3])?
                    .pick_per_row(&[Some(0)])?
                    .sum_all()
                    .pipe_ok()
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(dev < 1e-6, "dev = {dev}");
    }

    #[test]
    fn grad_check_rejects_nonscalar_and_bad_eps() {
        let x = t64(vec![2], vec![1.0, 2.0]);
        assert!(matches!(
            grad_check(|x| Ok(x.scale(1.0)), &x, 1e-5),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            grad_check(|x| Ok(x.sum_all()), &x, 0.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn embed_and_scatter_gradient() {
        let tape = Tape::new();
        let table = t64(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).watch(&tape);
        let out = Tensor::embed(&table, &[0, 0, 2]).unwrap();
        assert_eq!(out.data(), &[1., 2., 1., 2., 5., 6.]);
        let loss = out.sum_all();
        let grads = tape.backward(&loss).unwrap();
        let g = grads.of(&table).unwrap();
        // row 0 hit twice, row 1 never, row 2 once
        assert_eq!(g.data(), &[2., 2., 0., 0., 1., 1.]);
    }

    #[test]
    fn embed_out_of_range_names_position() {
        let table = Tensor::<f64>::zeros(vec![3, 2]);
        let err = Tensor::embed(&table, &[0, 7]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('7') && msg.contains("position 1"), "{msg}");
    }

    #[test]
    fn concat_slice_roundtrip_axis1() {
        let a = t64(vec![2, 2], vec![1., 2., 3., 4.]);
        let b = t64(vec![2, 1], vec![9., 8.]);
        let cat = Tensor::concat(1, &[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[2, 3]);
        assert_eq!(cat.data(), &[1., 2., 9., 3., 4., 8.]);
        let back = cat.slice(1, 0, 2).unwrap();
        assert_eq!(back.data(), a.data());
    }

    #[test]
    fn mask_last_axis_fills_and_blocks_gradient() {
        let tape = Tape::new();
        let x = t64(vec![2, 2], vec![1., 2., 3., 4.]).watch(&tape);
        let m = x.mask_last_axis(&[true, false], -5.0).unwrap();
        assert_eq!(m.data(), &[1., -5., 3., -5.]);
        let loss = m.sum_all();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.of(&x).unwrap().data(), &[1., 0., 1., 0.]);
    }

    #[test]
    fn layer_norm_rows_standardizes() {
        let x = t64(vec![1, 4], vec![2.0, 4.0, 6.0, 8.0]);
        let y = x.layer_norm_rows(0.0).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-10);
    }

    #[test]
    fn replay_same_computation_is_bit_identical() {
        let run = || {
            let mut rng = crate::rng::SeedRng::new(99);
            let x = t64(vec![3, 3], (0..9).map(|_| rng.uniform(-1.0, 1.0)).collect());
            let w = t64(vec![3, 3], (0..9).map(|_| rng.uniform(-1.0, 1.0)).collect());
            let tape = Tape::new();
            let xw = x.watch(&tape);
            let ww = w.watch(&tape);
            let y = xw.matmul(&ww).unwrap().tanh_act().softmax().unwrap();
            let loss = y.sum_all();
            let grads = tape.backward(&loss).unwrap();
            (loss.data().to_vec(), grads.of(&ww).unwrap().data().to_vec())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(
            l1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            l2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(
            g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn mixed_tapes_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t64(vec![2], vec![1., 2.]).watch(&t1);
        let b = t64(vec![2], vec![3., 4.]).watch(&t2);
        assert!(matches!(a.add(&b), Err(Error::Contract(_))));
    }
}

#[cfg(test)]
trait PipeOk: Sized {
    fn pipe_ok(self) -> Result<Self> {
        Ok(self)
    }
}

#[cfg(test)]
impl<E: Element> PipeOk for Tensor<E> {}
