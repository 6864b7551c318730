//! Dense tensors with a reverse-mode differentiation tape.
//!
//! Every operation appends one node to a [`Tape`]; node ids are handed out
//! as [`Var`] handles. `backward` walks the tape in exact reverse order and
//! accumulates gradients additively. Values are stored in the tape's scalar
//! type `T` (f32 for training, f64 for gradient checking) while every
//! reduction is carried out in f64.

mod ops;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Storage scalar for tensor values.
pub trait Real: Copy + Default + PartialOrd + fmt::Debug + fmt::Display + Send + Sync + 'static {
    const NAME: &'static str;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    const NAME: &'static str = "f32";
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Extents of a tensor. Rank 0 is a scalar.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Self {
        Shape(dims.into())
    }

    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn matrix(rows: usize, cols: usize) -> Self {
        Shape(vec![rows, cols])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// `(rows, cols)` for rank-2 shapes.
    pub fn as_matrix(&self) -> Option<(usize, usize)> {
        match self.0.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    /// Length of a row-vector-like shape: `[c]` or `[1, c]`.
    pub fn as_row(&self) -> Option<usize> {
        match self.0.as_slice() {
            [c] => Some(*c),
            [1, c] => Some(*c),
            _ => None,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// A node's value on the tape together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
    grad: Option<Vec<f64>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(Error::shape("tensor", shape.dims(), &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
///
/// `inputs` are the parent values, `output` the forward result, and
/// `grad_out` the gradient reaching the output. Returns one gradient per
/// input, each the length of that input.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[Vec<f64>], output: &[f64], grad_out: &[f64]) -> Vec<Vec<f64>>;
}

pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    Dropout(Var, Vec<f64>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanRows(..) => "mean_rows",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Relu(..) => "relu",
            Op::Dropout(..) => "dropout",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::Reshape(..) => "reshape",
            Op::Custom(_, op) => op.name(),
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a)
            | Op::SoftmaxRows(a)
            | Op::Gelu(a)
            | Op::Relu(a)
            | Op::Dropout(a, _)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::Reshape(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatRows(vs) | Op::ConcatCols(vs) | Op::Custom(vs, _) => vs.clone(),
        }
    }
}

struct Node<T> {
    tensor: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of operations. Single-threaded; independent tapes may
/// live on different threads.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    seed: u64,
    rng: ChaCha8Rng,
    validate: bool,
    backward_done: bool,
}

impl<T: Real> Tape<T> {
    pub fn new(seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            validate: false,
            backward_done: false,
        }
    }

    /// Turn on finiteness checks: any op producing NaN or infinity errors.
    pub fn with_validation(mut self, on: bool) -> Self {
        self.validate = on;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: receives a gradient on backward.
    pub fn param(&mut self, shape: Shape, data: Vec<T>) -> Result<Var> {
        self.leaf(shape, data, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, shape: Shape, data: Vec<T>) -> Result<Var> {
        self.leaf(shape, data, false)
    }

    pub fn constant_f64(&mut self, shape: Shape, data: &[f64]) -> Result<Var> {
        self.constant(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn param_f64(&mut self, shape: Shape, data: &[f64]) -> Result<Var> {
        self.param(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    fn leaf(&mut self, shape: Shape, data: Vec<T>, needs_grad: bool) -> Result<Var> {
        let tensor = Tensor::new(shape, data)?;
        if self.validate && tensor.data.iter().any(|v| !v.to_f64().is_finite()) {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Ok(Var(id))
    }

    fn push(&mut self, op: Op, shape: Shape, data: Vec<f64>) -> Result<Var> {
        debug_assert_eq!(shape.numel(), data.len());
        if self.validate && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        let id = self.nodes.len();
        self.nodes.push(Node {
            tensor: Tensor {
                shape,
                data: data.into_iter().map(T::from_f64).collect(),
                grad: None,
            },
            op,
            needs_grad,
        });
        Ok(Var(id))
    }

    pub fn tensor(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].tensor
    }

    pub fn shape(&self, v: Var) -> &Shape {
        &self.nodes[v.0].tensor.shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].tensor.data
    }

    pub fn value_f64(&self, v: Var) -> Vec<f64> {
        self.nodes[v.0].tensor.to_f64_vec()
    }

    /// First element as f64; handy for scalars.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].tensor.data[0].to_f64()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Parent ids of a node, in argument order.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub(crate) fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Clear every gradient so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
        self.backward_done = false;
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).clone();
        if shape.numel() != 1 {
            return Err(Error::Backward(format!("loss must be scalar, got shape {shape}")));
        }
        self.backward_with_seed(loss, &[1.0])
    }

    /// Reverse pass starting from an explicit output gradient. This is how
    /// a per-sample tape receives its share of a batch-level loss.
    pub fn backward_with_seed(&mut self, output: Var, seed: &[f64]) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        if output.0 >= self.nodes.len() {
            return Err(Error::Backward(format!("node {} is not on this tape", output.0)));
        }
        let numel = self.shape(output).numel();
        if seed.len() != numel {
            return Err(Error::shape("backward seed", &[numel], &[seed.len()]));
        }
        self.backward_done = true;
        self.nodes[output.0].tensor.grad = Some(seed.to_vec());

        for id in (0..=output.0).rev() {
            if !self.nodes[id].needs_grad || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(grad) = self.nodes[id].tensor.grad.take() else {
                continue;
            };
            if self.validate && grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    op: self.nodes[id].op.name(),
                });
            }
            let contributions = self.local_gradients(id, &grad);
            self.nodes[id].tensor.grad = Some(grad);
            for (parent, g) in contributions {
                let node = &mut self.nodes[parent.0];
                match &mut node.tensor.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.shape(v)
            .as_matrix()
            .ok_or_else(|| Error::shape(op, self.shape(v).dims(), &[0, 0]))
    }
}
