//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a shared handle to an immutable row-major buffer plus an
//! optional lineage record of the operation that produced it. Calling
//! [`Tensor::backward`] on a scalar walks the lineage in reverse topological
//! order and accumulates `d loss / d tensor` into every reachable tensor that
//! was created with `requires_grad = true`.
//!
//! The op set is exactly what the model needs: matmul (2-D, and 3-D with a
//! shared leading batch dimension), broadcasting add/mul, scalar scaling,
//! GELU, exp, dropout, last-axis concat, embedding gather, permute, reshape,
//! masked softmax, log-softmax, layer norm, cross-entropy, and reductions.
//! There is no operator fusion and no attempt at parallelism: a training step
//! is a single-threaded pass over the recorded graph.
//!
//! Buffers are mutable only through [`Tensor::data_mut`], which exists for the
//! optimizer's in-place parameter updates and for finite-difference probing.

use std::cell::{Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use num_traits::Float;
use rand::Rng;
use thiserror::Error;

pub mod gradcheck;

pub use gradcheck::{
    finite_difference_gradient, randomize_parameters, GradCheckEntry, GradReport, REL_ERR_FLOOR,
};

/// Element type of a tensor. f32 is the training default; gradient checking
/// requires f64 because central differences drown in f32 rounding noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<DType> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Option<DType> {
        match s {
            "f32" => Some(DType::F32),
            "f64" => Some(DType::F64),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Scalar element trait implemented by `f32` and `f64`.
pub trait Scalar: Float + fmt::Debug + fmt::Display + std::iter::Sum + 'static {
    const DTYPE: DType;
    const BYTE_WIDTH: usize;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Little-endian raw encoding; bit-exact round trip.
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
    const BYTE_WIDTH: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
    const BYTE_WIDTH: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("softmax row {row} has every entry masked")]
    DegenerateRow { row: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarBackward { shape: Vec<usize> },
    #[error("cross-entropy: every position carries the ignore index")]
    EmptyBatch,
    #[error("cross-entropy target {target} at position {position} outside [0, {classes})")]
    TargetOutOfRange {
        target: i64,
        position: usize,
        classes: usize,
    },
    #[error("gather id {id} out of range for table with {rows} rows")]
    IndexOutOfRange { id: usize, rows: usize },
    #[error("invalid permutation {axes:?} for rank {rank}")]
    BadPermutation { axes: Vec<usize>, rank: usize },
    #[error("function is not deterministic: baseline evaluations gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("parameter {0} received no gradient")]
    MissingGradient(String),
    #[error("{0}")]
    Invalid(String),
}

/// Boolean mask with right-aligned broadcast semantics; `true` marks an entry
/// as excluded (it receives attention probability exactly zero).
#[derive(Clone, Debug)]
pub struct BoolMask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl BoolMask {
    pub fn new(shape: Vec<usize>, data: Vec<bool>) -> Result<BoolMask, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(BoolMask { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Checks that every mask dimension equals the corresponding trailing
    /// dimension of `target` or is 1.
    fn check_broadcast(&self, target: &[usize]) -> Result<(), TensorError> {
        if self.shape.len() > target.len() {
            return Err(TensorError::DimensionMismatch {
                op: "mask broadcast",
                lhs: self.shape.clone(),
                rhs: target.to_vec(),
            });
        }
        let offset = target.len() - self.shape.len();
        for (i, &d) in self.shape.iter().enumerate() {
            if d != 1 && d != target[offset + i] {
                return Err(TensorError::DimensionMismatch {
                    op: "mask broadcast",
                    lhs: self.shape.clone(),
                    rhs: target.to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Value at the position of `target`'s flat index `flat`.
    fn at(&self, target: &[usize], flat: usize) -> bool {
        let offset = target.len() - self.shape.len();
        let mut rem = flat;
        let mut idx = 0usize;
        let mut stride = 1usize;
        // Walk target dims right to left, folding the ones the mask covers.
        let mut coords = vec![0usize; target.len()];
        for d in (0..target.len()).rev() {
            coords[d] = rem % target[d];
            rem /= target[d];
        }
        for d in (0..self.shape.len()).rev() {
            let c = if self.shape[d] == 1 { 0 } else { coords[offset + d] };
            idx += c * stride;
            stride *= self.shape[d];
        }
        self.data[idx]
    }
}

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

fn next_id() -> usize {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

enum Op<T: Scalar> {
    MatMul { a: Tensor<T>, b: Tensor<T> },
    Add { a: Tensor<T>, b: Tensor<T> },
    Mul { a: Tensor<T>, b: Tensor<T> },
    Scale { a: Tensor<T>, c: T },
    Gelu { a: Tensor<T> },
    Exp { a: Tensor<T> },
    Dropout { a: Tensor<T>, mask: Vec<T> },
    Concat { a: Tensor<T>, b: Tensor<T> },
    Gather { table: Tensor<T>, ids: Vec<usize> },
    Permute { a: Tensor<T>, axes: Vec<usize> },
    Reshape { a: Tensor<T> },
    Softmax { a: Tensor<T> },
    LogSoftmax { a: Tensor<T> },
    LayerNorm {
        x: Tensor<T>,
        gamma: Tensor<T>,
        beta: Tensor<T>,
        eps: f64,
    },
    CrossEntropy {
        logits: Tensor<T>,
        targets: Vec<i64>,
        ignore_index: i64,
    },
    SumAll { a: Tensor<T> },
    MeanAll { a: Tensor<T> },
    SumLast { a: Tensor<T> },
}

impl<T: Scalar> Op<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        match self {
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Mul { a, b } | Op::Concat { a, b } => {
                vec![a.clone(), b.clone()]
            }
            Op::Scale { a, .. }
            | Op::Gelu { a }
            | Op::Exp { a }
            | Op::Dropout { a, .. }
            | Op::Permute { a, .. }
            | Op::Reshape { a }
            | Op::Softmax { a }
            | Op::LogSoftmax { a }
            | Op::SumAll { a }
            | Op::MeanAll { a }
            | Op::SumLast { a } => vec![a.clone()],
            Op::Gather { table, .. } => vec![table.clone()],
            Op::LayerNorm { x, gamma, beta, .. } => {
                vec![x.clone(), gamma.clone(), beta.clone()]
            }
            Op::CrossEntropy { logits, .. } => vec![logits.clone()],
        }
    }
}

struct Inner<T: Scalar> {
    id: usize,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    requires_grad: bool,
    /// True when a gradient must flow into this node (itself or an ancestor
    /// requires grad); lets backward skip dead subgraphs.
    needs_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    op: Option<Op<T>>,
}

/// Shared handle to a tensor node. Cloning is cheap and aliases the buffer.
pub struct Tensor<T: Scalar> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("data", &self.inner.data.borrow())
            .finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn from_parts(
        data: Vec<T>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Option<Op<T>>,
    ) -> Result<Tensor<T>, TensorError> {
        let expected = numel_of(&shape);
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        let needs_grad = requires_grad
            || op
                .as_ref()
                .map(|op| op.inputs().iter().any(|t| t.inner.needs_grad))
                .unwrap_or(false);
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                requires_grad,
                needs_grad,
                grad: RefCell::new(None),
                op,
            }),
        })
    }

    fn from_op(data: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Tensor<T> {
        // Shape/data agreement is guaranteed by each op's own construction.
        Tensor::from_parts(data, shape, false, Some(op)).expect("op produced inconsistent shape")
    }

    /// New constant leaf (no gradient ever accumulates).
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Tensor<T>, TensorError> {
        Tensor::from_parts(data, shape.to_vec(), false, None)
    }

    /// New trainable leaf.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Tensor<T>, TensorError> {
        Tensor::from_parts(data, shape.to_vec(), true, None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor<T> {
        Tensor::from_parts(vec![T::zero(); numel_of(shape)], shape.to_vec(), false, None).unwrap()
    }

    pub fn scalar(v: T) -> Tensor<T> {
        Tensor::from_parts(vec![v], vec![], false, None).unwrap()
    }

    pub fn id(&self) -> usize {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.shape)
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    /// Mutable access to the buffer. Reserved for optimizer updates and
    /// finite-difference perturbation; graph nodes must not be mutated while
    /// a graph referencing them is still alive.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Copy of the data as a fresh constant leaf, cut off from the graph.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::from_parts(self.to_vec(), self.inner.shape.to_vec(), false, None).unwrap()
    }

    fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e = *e + *v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    // ── ops ──────────────────────────────────────────────────────────

    /// Matrix product. Accepts (m,k)·(k,p) or (b,m,k)·(b,k,p) with the batch
    /// dimension shared by both operands.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (ls, rs) = (self.shape(), other.shape());
        let mismatch = || TensorError::DimensionMismatch {
            op: "matmul",
            lhs: ls.to_vec(),
            rhs: rs.to_vec(),
        };
        let (batch, m, k, p) = match (ls.len(), rs.len()) {
            (2, 2) => {
                if ls[1] != rs[0] {
                    return Err(mismatch());
                }
                (1, ls[0], ls[1], rs[1])
            }
            (3, 3) => {
                if ls[0] != rs[0] || ls[2] != rs[1] {
                    return Err(mismatch());
                }
                (ls[0], ls[1], ls[2], rs[2])
            }
            _ => return Err(mismatch()),
        };
        let a = self.data();
        let b = other.data();
        let mut out = vec![T::zero(); batch * m * p];
        for bi in 0..batch {
            matmul_slice(
                &a[bi * m * k..(bi + 1) * m * k],
                &b[bi * k * p..(bi + 1) * k * p],
                m,
                k,
                p,
                &mut out[bi * m * p..(bi + 1) * m * p],
            );
        }
        drop(a);
        drop(b);
        let shape = if ls.len() == 2 {
            vec![m, p]
        } else {
            vec![batch, m, p]
        };
        Ok(Tensor::from_op(
            out,
            shape,
            Op::MatMul {
                a: self.clone(),
                b: other.clone(),
            },
        ))
    }

    /// Elementwise sum with right-aligned broadcasting.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let shape = broadcast_shape(self.shape(), other.shape(), "add")?;
        let out = zip_broadcast(self, other, &shape, |x, y| x + y);
        Ok(Tensor::from_op(
            out,
            shape,
            Op::Add {
                a: self.clone(),
                b: other.clone(),
            },
        ))
    }

    /// Elementwise product with right-aligned broadcasting.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let shape = broadcast_shape(self.shape(), other.shape(), "mul")?;
        let out = zip_broadcast(self, other, &shape, |x, y| x * y);
        Ok(Tensor::from_op(
            out,
            shape,
            Op::Mul {
                a: self.clone(),
                b: other.clone(),
            },
        ))
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&x| x * c).collect();
        Tensor::from_op(out, self.shape().to_vec(), Op::Scale { a: self.clone(), c })
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.add(&other.scale(-T::one()))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&self) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&x| gelu_fwd(x)).collect();
        Tensor::from_op(out, self.shape().to_vec(), Op::Gelu { a: self.clone() })
    }

    pub fn exp(&self) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&x| x.exp()).collect();
        Tensor::from_op(out, self.shape().to_vec(), Op::Exp { a: self.clone() })
    }

    /// Inverted dropout: kept entries are scaled by 1/(1-rate). Identity when
    /// rate <= 0. Eval-mode identity is the caller's responsibility (skip the
    /// call); this always samples from `rng`.
    pub fn dropout<R: Rng>(&self, rate: f64, rng: &mut R) -> Tensor<T> {
        if rate <= 0.0 {
            return self.clone();
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.numel())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out: Vec<T> = self
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Dropout {
                a: self.clone(),
                mask,
            },
        )
    }

    /// Concatenation along the last axis; all leading dimensions must match.
    pub fn concat_last_axis(&self, other: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (ls, rs) = (self.shape(), other.shape());
        if ls.len() != rs.len()
            || ls.is_empty()
            || ls[..ls.len() - 1] != rs[..rs.len() - 1]
        {
            return Err(TensorError::DimensionMismatch {
                op: "concat_last_axis",
                lhs: ls.to_vec(),
                rhs: rs.to_vec(),
            });
        }
        let da = ls[ls.len() - 1];
        let db = rs[rs.len() - 1];
        let rows = self.numel() / da;
        let a = self.data();
        let b = other.data();
        let mut out = Vec::with_capacity(rows * (da + db));
        for r in 0..rows {
            out.extend_from_slice(&a[r * da..(r + 1) * da]);
            out.extend_from_slice(&b[r * db..(r + 1) * db]);
        }
        drop(a);
        drop(b);
        let mut shape = ls.to_vec();
        *shape.last_mut().unwrap() = da + db;
        Ok(Tensor::from_op(
            out,
            shape,
            Op::Concat {
                a: self.clone(),
                b: other.clone(),
            },
        ))
    }

    /// Row lookup: `self` is a (rows, d) table, output is (ids.len(), d).
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor<T>, TensorError> {
        if self.ndim() != 2 {
            return Err(TensorError::Invalid(format!(
                "gather_rows expects a 2-D table, got shape {:?}",
                self.shape()
            )));
        }
        let rows = self.shape()[0];
        let d = self.shape()[1];
        let data = self.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange { id, rows });
            }
            out.extend_from_slice(&data[id * d..(id + 1) * d]);
        }
        drop(data);
        Ok(Tensor::from_op(
            out,
            vec![ids.len(), d],
            Op::Gather {
                table: self.clone(),
                ids: ids.to_vec(),
            },
        ))
    }

    /// Axis permutation (materialized).
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>, TensorError> {
        let rank = self.ndim();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::BadPermutation {
                axes: axes.to_vec(),
                rank,
            });
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let in_strides = strides_of(&in_shape);
        let data = self.data();
        let mut out = vec![T::zero(); self.numel()];
        let mut coords = vec![0usize; rank];
        for (flat, slot) in out.iter_mut().enumerate() {
            unravel(flat, &out_shape, &mut coords);
            let mut src = 0usize;
            for (d, &ax) in axes.iter().enumerate() {
                src += coords[d] * in_strides[ax];
            }
            *slot = data[src];
        }
        drop(data);
        Ok(Tensor::from_op(
            out,
            out_shape,
            Op::Permute {
                a: self.clone(),
                axes: axes.to_vec(),
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>, TensorError> {
        let expected = numel_of(shape);
        if expected != self.numel() {
            return Err(TensorError::ShapeDataMismatch {
                shape: shape.to_vec(),
                expected,
                actual: self.numel(),
            });
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            Op::Reshape { a: self.clone() },
        ))
    }

    /// Softmax over the last axis, numerically stabilized by max subtraction.
    /// Masked entries (mask value `true`) get probability exactly zero; a row
    /// with every entry masked is an error.
    pub fn softmax_last_axis(&self, mask: Option<&BoolMask>) -> Result<Tensor<T>, TensorError> {
        let shape = self.shape().to_vec();
        if shape.is_empty() {
            return Err(TensorError::Invalid(
                "softmax_last_axis needs at least one axis".into(),
            ));
        }
        if let Some(m) = mask {
            m.check_broadcast(&shape)?;
        }
        let d = *shape.last().unwrap();
        let rows = self.numel() / d;
        let data = self.data();
        let mut out = vec![T::zero(); self.numel()];
        for r in 0..rows {
            let base = r * d;
            let mut max = T::neg_infinity();
            let mut any = false;
            for j in 0..d {
                if mask.map_or(false, |m| m.at(&shape, base + j)) {
                    continue;
                }
                any = true;
                if data[base + j] > max {
                    max = data[base + j];
                }
            }
            if !any {
                return Err(TensorError::DegenerateRow { row: r });
            }
            let mut sum = T::zero();
            for j in 0..d {
                if mask.map_or(false, |m| m.at(&shape, base + j)) {
                    out[base + j] = T::zero();
                } else {
                    let e = (data[base + j] - max).exp();
                    out[base + j] = e;
                    sum = sum + e;
                }
            }
            for j in 0..d {
                out[base + j] = out[base + j] / sum;
            }
        }
        drop(data);
        Ok(Tensor::from_op(out, shape, Op::Softmax { a: self.clone() }))
    }

    /// Log-softmax over the last axis (no masking; used on class logits).
    pub fn log_softmax_last_axis(&self) -> Result<Tensor<T>, TensorError> {
        let shape = self.shape().to_vec();
        if shape.is_empty() {
            return Err(TensorError::Invalid(
                "log_softmax_last_axis needs at least one axis".into(),
            ));
        }
        let d = *shape.last().unwrap();
        let rows = self.numel() / d;
        let data = self.data();
        let mut out = vec![T::zero(); self.numel()];
        for r in 0..rows {
            let base = r * d;
            let mut max = T::neg_infinity();
            for j in 0..d {
                if data[base + j] > max {
                    max = data[base + j];
                }
            }
            let mut sum = T::zero();
            for j in 0..d {
                sum = sum + (data[base + j] - max).exp();
            }
            let lse = max + sum.ln();
            for j in 0..d {
                out[base + j] = data[base + j] - lse;
            }
        }
        drop(data);
        Ok(Tensor::from_op(out, shape, Op::LogSoftmax { a: self.clone() }))
    }

    /// Normalizes each last-axis slice to zero mean and unit population
    /// variance, then applies `gamma` and `beta`.
    pub fn layer_norm(
        &self,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        eps: f64,
    ) -> Result<Tensor<T>, TensorError> {
        let shape = self.shape().to_vec();
        let d = *shape.last().ok_or_else(|| {
            TensorError::Invalid("layer_norm needs at least one axis".into())
        })?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(TensorError::DimensionMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: gamma.shape().to_vec(),
            });
        }
        let rows = self.numel() / d;
        let x = self.data();
        let g = gamma.data();
        let b = beta.data();
        let mut out = vec![T::zero(); self.numel()];
        let dn = T::from_f64(d as f64);
        let eps_t = T::from_f64(eps);
        for r in 0..rows {
            let s = &x[r * d..(r + 1) * d];
            let mean = s.iter().copied().sum::<T>() / dn;
            let var = s
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>()
                / dn;
            let inv_std = T::one() / (var + eps_t).sqrt();
            for j in 0..d {
                out[r * d + j] = (s[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        drop(x);
        drop(g);
        drop(b);
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                eps,
            },
        ))
    }

    /// Mean over non-ignored positions of `-log softmax(logits)[target]`.
    /// `self` must be (n, classes); `targets` has length n.
    pub fn cross_entropy(
        &self,
        targets: &[i64],
        ignore_index: i64,
    ) -> Result<Tensor<T>, TensorError> {
        if self.ndim() != 2 {
            return Err(TensorError::Invalid(format!(
                "cross_entropy expects (n, classes) logits, got {:?}",
                self.shape()
            )));
        }
        let n = self.shape()[0];
        let k = self.shape()[1];
        if targets.len() != n {
            return Err(TensorError::DimensionMismatch {
                op: "cross_entropy",
                lhs: self.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let data = self.data();
        let mut total = T::zero();
        let mut kept = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            if t == ignore_index {
                continue;
            }
            if t < 0 || t as usize >= k {
                return Err(TensorError::TargetOutOfRange {
                    target: t,
                    position: i,
                    classes: k,
                });
            }
            let row = &data[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total = total + (lse - row[t as usize]);
            kept += 1;
        }
        drop(data);
        if kept == 0 {
            return Err(TensorError::EmptyBatch);
        }
        let loss = total / T::from_f64(kept as f64);
        Ok(Tensor::from_op(
            vec![loss],
            vec![],
            Op::CrossEntropy {
                logits: self.clone(),
                targets: targets.to_vec(),
                ignore_index,
            },
        ))
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        Tensor::from_op(vec![s], vec![], Op::SumAll { a: self.clone() })
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        let n = T::from_f64(self.numel() as f64);
        Tensor::from_op(vec![s / n], vec![], Op::MeanAll { a: self.clone() })
    }

    /// Sum over the last axis: (..., d) -> (...).
    pub fn sum_last_axis(&self) -> Result<Tensor<T>, TensorError> {
        let shape = self.shape().to_vec();
        let d = *shape.last().ok_or_else(|| {
            TensorError::Invalid("sum_last_axis needs at least one axis".into())
        })?;
        let rows = self.numel() / d;
        let data = self.data();
        let mut out = vec![T::zero(); rows];
        for r in 0..rows {
            out[r] = data[r * d..(r + 1) * d].iter().copied().sum();
        }
        drop(data);
        Ok(Tensor::from_op(
            out,
            shape[..shape.len() - 1].to_vec(),
            Op::SumLast { a: self.clone() },
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
    /// reachable tensor with `requires_grad = true`; repeated calls without
    /// `zero_grad` keep accumulating.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarBackward {
                shape: self.shape().to_vec(),
            });
        }
        let order = topo_order(self);
        let mut flow: HashMap<usize, Vec<T>> = HashMap::new();
        flow.insert(self.id(), vec![T::one()]);
        for node in order.iter().rev() {
            let Some(g) = flow.remove(&node.id()) else {
                continue;
            };
            if node.inner.requires_grad {
                node.accumulate_grad(&g);
            }
            if let Some(op) = &node.inner.op {
                backprop(op, node, &g, &mut flow);
            }
        }
        Ok(())
    }
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

fn unravel(flat: usize, shape: &[usize], coords: &mut [usize]) {
    let mut rem = flat;
    for d in (0..shape.len()).rev() {
        coords[d] = rem % shape[d];
        rem /= shape[d];
    }
}

fn matmul_slice<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, p: usize, out: &mut [T]) {
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == T::zero() {
                continue;
            }
            let brow = &b[l * p..(l + 1) * p];
            let orow = &mut out[i * p..(i + 1) * p];
            for j in 0..p {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_bwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    let d_inner = c * (T::one() + three * k * x * x);
    half * (T::one() + t) + half * x * sech2 * d_inner
}

pub(crate) fn broadcast_shape(
    a: &[usize],
    b: &[usize],
    op: &'static str,
) -> Result<Vec<usize>, TensorError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(TensorError::DimensionMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Source flat index of `a` (shape `src`) for output flat index `flat` in
/// `out_shape`, under right-aligned broadcasting.
fn broadcast_src_index(src: &[usize], out_shape: &[usize], coords: &[usize]) -> usize {
    let offset = out_shape.len() - src.len();
    let mut idx = 0usize;
    let mut stride = 1usize;
    for d in (0..src.len()).rev() {
        let c = if src[d] == 1 { 0 } else { coords[offset + d] };
        idx += c * stride;
        stride *= src[d];
    }
    idx
}

fn zip_broadcast<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let n = numel_of(out_shape);
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![T::zero(); n];
    let mut coords = vec![0usize; out_shape.len()];
    for (flat, slot) in out.iter_mut().enumerate() {
        unravel(flat, out_shape, &mut coords);
        let ai = broadcast_src_index(a.shape(), out_shape, &coords);
        let bi = broadcast_src_index(b.shape(), out_shape, &coords);
        *slot = f(ad[ai], bd[bi]);
    }
    out
}

/// Folds `grad` (laid out as `out_shape`) back down to `target` by summing
/// over broadcast dimensions.
fn reduce_to_shape<T: Scalar>(grad: &[T], out_shape: &[usize], target: &[usize]) -> Vec<T> {
    if out_shape == target {
        return grad.to_vec();
    }
    let mut out = vec![T::zero(); numel_of(target)];
    let mut coords = vec![0usize; out_shape.len()];
    for (flat, &g) in grad.iter().enumerate() {
        unravel(flat, out_shape, &mut coords);
        let ti = broadcast_src_index(target, out_shape, &coords);
        out[ti] = out[ti] + g;
    }
    out
}

fn topo_order<T: Scalar>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack: Vec<(Tensor<T>, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        let inputs = node
            .inner
            .op
            .as_ref()
            .map(|op| op.inputs())
            .unwrap_or_default();
        stack.push((node, true));
        for input in inputs {
            if input.inner.needs_grad {
                stack.push((input, false));
            }
        }
    }
    order
}

fn flow_into<T: Scalar>(flow: &mut HashMap<usize, Vec<T>>, t: &Tensor<T>, g: Vec<T>) {
    if !t.inner.needs_grad {
        return;
    }
    match flow.entry(t.id()) {
        std::collections::hash_map::Entry::Occupied(mut e) => {
            for (a, b) in e.get_mut().iter_mut().zip(&g) {
                *a = *a + *b;
            }
        }
        std::collections::hash_map::Entry::Vacant(e) => {
            e.insert(g);
        }
    }
}

fn backprop<T: Scalar>(op: &Op<T>, node: &Tensor<T>, g: &[T], flow: &mut HashMap<usize, Vec<T>>) {
    match op {
        Op::MatMul { a, b } => {
            let (ls, rs) = (a.shape(), b.shape());
            let (batch, m, k, p) = if ls.len() == 2 {
                (1, ls[0], ls[1], rs[1])
            } else {
                (ls[0], ls[1], ls[2], rs[2])
            };
            let ad = a.data();
            let bd = b.data();
            let mut da = vec![T::zero(); ad.len()];
            let mut db = vec![T::zero(); bd.len()];
            for bi in 0..batch {
                let gs = &g[bi * m * p..(bi + 1) * m * p];
                let asl = &ad[bi * m * k..(bi + 1) * m * k];
                let bsl = &bd[bi * k * p..(bi + 1) * k * p];
                // dA = dC · Bᵀ
                let dasl = &mut da[bi * m * k..(bi + 1) * m * k];
                for i in 0..m {
                    for j in 0..p {
                        let gv = gs[i * p + j];
                        if gv == T::zero() {
                            continue;
                        }
                        for l in 0..k {
                            dasl[i * k + l] = dasl[i * k + l] + gv * bsl[l * p + j];
                        }
                    }
                }
                // dB = Aᵀ · dC
                let dbsl = &mut db[bi * k * p..(bi + 1) * k * p];
                for i in 0..m {
                    for l in 0..k {
                        let av = asl[i * k + l];
                        if av == T::zero() {
                            continue;
                        }
                        for j in 0..p {
                            dbsl[l * p + j] = dbsl[l * p + j] + av * gs[i * p + j];
                        }
                    }
                }
            }
            drop(ad);
            drop(bd);
            flow_into(flow, a, da);
            flow_into(flow, b, db);
        }
        Op::Add { a, b } => {
            let out_shape = node.shape();
            flow_into(flow, a, reduce_to_shape(g, out_shape, a.shape()));
            flow_into(flow, b, reduce_to_shape(g, out_shape, b.shape()));
        }
        Op::Mul { a, b } => {
            let out_shape = node.shape().to_vec();
            let da_full = {
                let bd = b.data();
                let mut coords = vec![0usize; out_shape.len()];
                let mut v = vec![T::zero(); g.len()];
                for (flat, slot) in v.iter_mut().enumerate() {
                    unravel(flat, &out_shape, &mut coords);
                    let bi = broadcast_src_index(b.shape(), &out_shape, &coords);
                    *slot = g[flat] * bd[bi];
                }
                v
            };
            let db_full = {
                let ad = a.data();
                let mut coords = vec![0usize; out_shape.len()];
                let mut v = vec![T::zero(); g.len()];
                for (flat, slot) in v.iter_mut().enumerate() {
                    unravel(flat, &out_shape, &mut coords);
                    let ai = broadcast_src_index(a.shape(), &out_shape, &coords);
                    *slot = g[flat] * ad[ai];
                }
                v
            };
            flow_into(flow, a, reduce_to_shape(&da_full, &out_shape, a.shape()));
            flow_into(flow, b, reduce_to_shape(&db_full, &out_shape, b.shape()));
        }
        Op::Scale { a, c } => {
            flow_into(flow, a, g.iter().map(|&gv| gv * *c).collect());
        }
        Op::Gelu { a } => {
            let ad = a.data();
            let da: Vec<T> = g
                .iter()
                .zip(ad.iter())
                .map(|(&gv, &x)| gv * gelu_bwd(x))
                .collect();
            drop(ad);
            flow_into(flow, a, da);
        }
        Op::Exp { a } => {
            let out = node.data();
            let da: Vec<T> = g.iter().zip(out.iter()).map(|(&gv, &e)| gv * e).collect();
            drop(out);
            flow_into(flow, a, da);
        }
        Op::Dropout { a, mask } => {
            flow_into(
                flow,
                a,
                g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect(),
            );
        }
        Op::Concat { a, b } => {
            let da_w = *a.shape().last().unwrap();
            let db_w = *b.shape().last().unwrap();
            let rows = a.numel() / da_w;
            let mut da = vec![T::zero(); a.numel()];
            let mut db = vec![T::zero(); b.numel()];
            let w = da_w + db_w;
            for r in 0..rows {
                da[r * da_w..(r + 1) * da_w].copy_from_slice(&g[r * w..r * w + da_w]);
                db[r * db_w..(r + 1) * db_w].copy_from_slice(&g[r * w + da_w..(r + 1) * w]);
            }
            flow_into(flow, a, da);
            flow_into(flow, b, db);
        }
        Op::Gather { table, ids } => {
            let d = table.shape()[1];
            let mut dt = vec![T::zero(); table.numel()];
            for (r, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    dt[id * d + j] = dt[id * d + j] + g[r * d + j];
                }
            }
            flow_into(flow, table, dt);
        }
        Op::Permute { a, axes } => {
            // Scatter grad back through the inverse permutation.
            let out_shape = node.shape().to_vec();
            let in_strides = strides_of(a.shape());
            let mut da = vec![T::zero(); a.numel()];
            let mut coords = vec![0usize; out_shape.len()];
            for (flat, &gv) in g.iter().enumerate() {
                unravel(flat, &out_shape, &mut coords);
                let mut src = 0usize;
                for (d, &ax) in axes.iter().enumerate() {
                    src += coords[d] * in_strides[ax];
                }
                da[src] = da[src] + gv;
            }
            flow_into(flow, a, da);
        }
        Op::Reshape { a } => {
            flow_into(flow, a, g.to_vec());
        }
        Op::Softmax { a } => {
            // ds_i = s_i (g_i - Σ_j g_j s_j); masked outputs are 0 so they
            // contribute nothing and receive nothing.
            let out = node.data();
            let d = *node.shape().last().unwrap();
            let rows = node.numel() / d;
            let mut da = vec![T::zero(); node.numel()];
            for r in 0..rows {
                let base = r * d;
                let mut dot = T::zero();
                for j in 0..d {
                    dot = dot + g[base + j] * out[base + j];
                }
                for j in 0..d {
                    da[base + j] = out[base + j] * (g[base + j] - dot);
                }
            }
            drop(out);
            flow_into(flow, a, da);
        }
        Op::LogSoftmax { a } => {
            // d/dx_i = g_i - softmax_i Σ_j g_j
            let out = node.data();
            let d = *node.shape().last().unwrap();
            let rows = node.numel() / d;
            let mut da = vec![T::zero(); node.numel()];
            for r in 0..rows {
                let base = r * d;
                let mut gsum = T::zero();
                for j in 0..d {
                    gsum = gsum + g[base + j];
                }
                for j in 0..d {
                    da[base + j] = g[base + j] - out[base + j].exp() * gsum;
                }
            }
            drop(out);
            flow_into(flow, a, da);
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let d = *x.shape().last().unwrap();
            let rows = x.numel() / d;
            let xd = x.data();
            let gd = gamma.data();
            let dn = T::from_f64(d as f64);
            let eps_t = T::from_f64(*eps);
            let mut dx = vec![T::zero(); x.numel()];
            let mut dgamma = vec![T::zero(); d];
            let mut dbeta = vec![T::zero(); d];
            for r in 0..rows {
                let xs = &xd[r * d..(r + 1) * d];
                let gs = &g[r * d..(r + 1) * d];
                let mean = xs.iter().copied().sum::<T>() / dn;
                let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                let inv_std = T::one() / (var + eps_t).sqrt();
                let xhat: Vec<T> = xs.iter().map(|&v| (v - mean) * inv_std).collect();
                let mut dxhat = vec![T::zero(); d];
                for j in 0..d {
                    dgamma[j] = dgamma[j] + gs[j] * xhat[j];
                    dbeta[j] = dbeta[j] + gs[j];
                    dxhat[j] = gs[j] * gd[j];
                }
                let dxhat_sum: T = dxhat.iter().copied().sum();
                let dxhat_dot: T = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum();
                for j in 0..d {
                    dx[r * d + j] =
                        inv_std / dn * (dn * dxhat[j] - dxhat_sum - xhat[j] * dxhat_dot);
                }
            }
            drop(xd);
            drop(gd);
            flow_into(flow, x, dx);
            flow_into(flow, gamma, dgamma);
            flow_into(flow, beta, dbeta);
        }
        Op::CrossEntropy {
            logits,
            targets,
            ignore_index,
        } => {
            let k = logits.shape()[1];
            let kept = targets.iter().filter(|&&t| t != *ignore_index).count();
            let ld = logits.data();
            let mut dl = vec![T::zero(); logits.numel()];
            let scale = g[0] / T::from_f64(kept as f64);
            for (i, &t) in targets.iter().enumerate() {
                if t == *ignore_index {
                    continue;
                }
                let row = &ld[i * k..(i + 1) * k];
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
                for j in 0..k {
                    let p = (row[j] - max).exp() / sum;
                    let y = if j == t as usize { T::one() } else { T::zero() };
                    dl[i * k + j] = scale * (p - y);
                }
            }
            drop(ld);
            flow_into(flow, logits, dl);
        }
        Op::SumAll { a } => {
            flow_into(flow, a, vec![g[0]; a.numel()]);
        }
        Op::MeanAll { a } => {
            let s = g[0] / T::from_f64(a.numel() as f64);
            flow_into(flow, a, vec![s; a.numel()]);
        }
        Op::SumLast { a } => {
            let d = *a.shape().last().unwrap();
            let rows = a.numel() / d;
            let mut da = vec![T::zero(); a.numel()];
            for r in 0..rows {
                for j in 0..d {
                    da[r * d + j] = g[r];
                }
            }
            flow_into(flow, a, da);
        }
    }
}
