//! Dense f64 arrays with reverse-mode differentiation.
//!
//! Every learned computation in the crate runs through a [`Tape`]: forward
//! calls append nodes (op, inputs, saved activations) and [`Tape::backward`]
//! replays them in reverse to populate gradients. Tensors are row-major,
//! 64-bit, and immutable once on the tape; determinism follows from the
//! fixed replay order.

mod check;
mod layers;
mod ops;

pub use check::{finite_diff_check, max_rel_error, numeric_grad};
pub use layers::{glorot_init, BatchNorm, MlpLayer, Phase};
pub use ops::Op;

use crate::error::{Error, Result};

/// Handle of a tensor recorded on a [`Tape`].
pub type TensorId = usize;

/// A dense multi-dimensional array of 64-bit floats, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        if numel != values.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; numel],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![1.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            values,
        }
    }

    /// 2-D tensor from a slice of equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|row| row.len()).unwrap_or(0);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// Scalar contents of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar {:?}", self.shape);
        self.values[0]
    }
}

/// One tensor recorded on the tape together with its differentiation state.
#[derive(Debug, Clone)]
pub struct Entry {
    pub tensor: Tensor,
    pub op: Op,
    /// True when this tensor is a parameter or depends on one.
    pub requires_grad: bool,
    /// Populated by [`Tape::backward`], same shape as `tensor`.
    pub grad: Option<Vec<f64>>,
}

/// Computation record: an append-only list of primitive applications in
/// topological order (inputs always precede consumers).
#[derive(Debug, Default)]
pub struct Tape {
    entries: Vec<Entry>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            entries: Vec::new(),
        }
    }

    /// Records an input tensor that does not require gradients.
    pub fn constant(&mut self, t: Tensor) -> TensorId {
        self.push(t, Op::Leaf, false)
    }

    /// Records a learnable leaf; `backward` will produce its gradient.
    pub fn param(&mut self, t: Tensor) -> TensorId {
        self.push(t, Op::Leaf, true)
    }

    pub(crate) fn push(&mut self, tensor: Tensor, op: Op, requires_grad: bool) -> TensorId {
        self.entries.push(Entry {
            tensor,
            op,
            requires_grad,
            grad: None,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.entries[id].tensor
    }

    pub fn entry(&self, id: TensorId) -> &Entry {
        &self.entries[id]
    }

    /// Gradient of `id` after a `backward` pass, if one was produced.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.entries[id].grad.as_deref()
    }

    /// Ids of all learnable leaves in creation order.
    pub fn param_ids(&self) -> Vec<TensorId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| matches!(e.op, Op::Leaf) && e.requires_grad)
            .map(|(i, _)| i)
            .collect()
    }

    pub(crate) fn requires_grad(&self, id: TensorId) -> bool {
        self.entries[id].requires_grad
    }

    pub(crate) fn any_requires_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|&i| self.requires_grad(i))
    }

    /// Reverse-mode sweep from a scalar loss. Populates `grad` for every
    /// entry that requires gradients and is reachable from `loss`.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.entries[loss].tensor.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.entries[loss].tensor.shape()
            )));
        }
        for e in &mut self.entries {
            e.grad = None;
        }
        if !self.entries[loss].requires_grad {
            // Loss does not depend on any parameter; nothing to do.
            return Ok(());
        }
        self.entries[loss].grad = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            if self.entries[id].grad.is_none() || matches!(self.entries[id].op, Op::Leaf) {
                continue;
            }
            self.backprop_node(id);
        }
        Ok(())
    }

    fn grad_buf(&mut self, id: TensorId) -> &mut Vec<f64> {
        let n = self.entries[id].tensor.numel();
        self.entries[id].grad.get_or_insert_with(|| vec![0.0; n])
    }
}
