//! Primitive tensor operations and their backward rules.

use super::{Tape, Tensor, TensorId};
use crate::error::{Error, Result};

/// Primitive applications recorded on the tape. Variants carry the input
/// ids plus whatever activations the backward rule needs.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    MatMul {
        a: TensorId,
        b: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    ScaleConst {
        x: TensorId,
        c: f64,
    },
    /// x: P×C plus a length-C bias broadcast over rows.
    AddBias {
        x: TensorId,
        bias: TensorId,
    },
    /// Row i of x scaled by a[i].
    ScaleRows {
        x: TensorId,
        a: TensorId,
    },
    /// Column c of x scaled by s[c].
    ScaleCols {
        x: TensorId,
        s: TensorId,
    },
    Relu {
        x: TensorId,
    },
    Sigmoid {
        x: TensorId,
    },
    Softmax {
        x: TensorId,
        axis: usize,
    },
    Concat {
        xs: Vec<TensorId>,
        axis: usize,
    },
    /// Max over `axis` (the axis is removed). `argmax` holds, per output
    /// element, the linear input index the maximum came from.
    ReduceMax {
        x: TensorId,
        axis: usize,
        argmax: Vec<usize>,
    },
    ReduceSum {
        x: TensorId,
        axis: usize,
    },
    SumAll {
        x: TensorId,
    },
    Reshape {
        x: TensorId,
    },
    Transpose {
        x: TensorId,
    },
    Slice {
        x: TensorId,
        axis: usize,
        start: usize,
    },
    /// Row gather from a 2-D tensor; repeated indices accumulate on backward.
    GatherRows {
        x: TensorId,
        idx: Vec<usize>,
    },
    /// Batch normalization over rows using batch statistics.
    BatchNormTrain {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Mean weighted negative log softmax probability of the true class.
    CrossEntropy {
        scores: TensorId,
        labels: Vec<usize>,
        point_weights: Vec<f64>,
        probs: Vec<f64>,
    },
}

/// Extents around `axis`: product before, the axis itself, product after.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, mid, inner)
}

fn check_finite(values: &[f64], op: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite input to {op}")));
    }
    Ok(())
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Dimension(format!("{what} must be 2-D, got {s:?}"))),
    }
}

impl Tape {
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = dims2(self.value(a), "matmul lhs")?;
        let (k2, n) = dims2(self.value(b), "matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner extents differ: lhs {:?} vs rhs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, m, k, n },
            rg,
        ))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "mul shape mismatch: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a, b }, rg))
    }

    pub fn scale_const(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let out: Vec<f64> = self.value(x).values().iter().map(|v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::ScaleConst { x, c }, rg))
    }

    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (p, c) = dims2(self.value(x), "add_bias input")?;
        if self.value(bias).shape() != [c] {
            return Err(Error::Dimension(format!(
                "bias shape {:?} does not match input {:?}",
                self.value(bias).shape(),
                self.value(x).shape()
            )));
        }
        let xv = self.value(x).values();
        let bv = self.value(bias).values();
        let mut out = vec![0.0; p * c];
        for i in 0..p {
            for j in 0..c {
                out[i * c + j] = xv[i * c + j] + bv[j];
            }
        }
        let rg = self.any_requires_grad(&[x, bias]);
        Ok(self.push(Tensor::new(vec![p, c], out)?, Op::AddBias { x, bias }, rg))
    }

    /// Multiplies row i of `x` (N×C) by `a[i]` (length N).
    pub fn scale_rows(&mut self, x: TensorId, a: TensorId) -> Result<TensorId> {
        let (n, c) = dims2(self.value(x), "scale_rows input")?;
        if self.value(a).shape() != [n] {
            return Err(Error::Dimension(format!(
                "scale_rows lengths differ: x {:?} vs a {:?}",
                self.value(x).shape(),
                self.value(a).shape()
            )));
        }
        let xv = self.value(x).values();
        let av = self.value(a).values();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                out[i * c + j] = xv[i * c + j] * av[i];
            }
        }
        let rg = self.any_requires_grad(&[x, a]);
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::ScaleRows { x, a }, rg))
    }

    /// Multiplies column j of `x` (P×C) by `s[j]` (length C).
    pub fn scale_cols(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        let (p, c) = dims2(self.value(x), "scale_cols input")?;
        if self.value(s).shape() != [c] {
            return Err(Error::Dimension(format!(
                "scale_cols lengths differ: x {:?} vs s {:?}",
                self.value(x).shape(),
                self.value(s).shape()
            )));
        }
        let xv = self.value(x).values();
        let sv = self.value(s).values();
        let mut out = vec![0.0; p * c];
        for i in 0..p {
            for j in 0..c {
                out[i * c + j] = xv[i * c + j] * sv[j];
            }
        }
        let rg = self.any_requires_grad(&[x, s]);
        Ok(self.push(Tensor::new(vec![p, c], out)?, Op::ScaleCols { x, s }, rg))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        check_finite(self.value(x).values(), "relu")?;
        let out: Vec<f64> = self.value(x).values().iter().map(|&v| v.max(0.0)).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Relu { x }, rg))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        check_finite(self.value(x).values(), "sigmoid")?;
        let out: Vec<f64> = self
            .value(x)
            .values()
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sigmoid { x }, rg))
    }

    /// Numerically stable softmax; slices along `axis` sum to 1.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        check_finite(self.value(x).values(), "softmax")?;
        let (outer, mid, inner) = axis_split(&shape, axis);
        let xv = self.value(x).values();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |m: usize| (o * mid + m) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for m in 0..mid {
                    mx = mx.max(xv[at(m)]);
                }
                let mut sum = 0.0;
                for m in 0..mid {
                    let e = (xv[at(m)] - mx).exp();
                    out[at(m)] = e;
                    sum += e;
                }
                for m in 0..mid {
                    out[at(m)] /= sum;
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg))
    }

    pub fn concat(&mut self, xs: &[TensorId], axis: usize) -> Result<TensorId> {
        let first = self.value(xs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Contract(format!(
                "concat axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut axis_total = 0;
        for &x in xs {
            let s = self.value(x).shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::Dimension(format!(
                    "concat inputs disagree off-axis: {first:?} vs {s:?}"
                )));
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; shape.iter().product()];
        let out_stride = axis_total * inner;
        for o in 0..outer {
            let mut offset = 0;
            for &x in xs {
                let mid = self.value(x).shape()[axis];
                let slab = mid * inner;
                let src = &self.value(x).values()[o * slab..(o + 1) * slab];
                out[o * out_stride + offset..o * out_stride + offset + slab].copy_from_slice(src);
                offset += slab;
            }
        }
        let rg = self.any_requires_grad(xs);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Max over `axis`; the axis is removed. Gradient routes to the argmax
    /// position, ties broken toward the lowest index.
    pub fn reduce_max(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "reduce_max axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, mid, inner) = axis_split(&shape, axis);
        let xv = self.value(x).values();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = 0;
                for m in 0..mid {
                    let lin = (o * mid + m) * inner + i;
                    if xv[lin] > best {
                        best = xv[lin];
                        best_at = lin;
                    }
                }
                out[o * inner + i] = best;
                argmax[o * inner + i] = best_at;
            }
        }
        let mut new_shape: Vec<usize> = shape[..axis].to_vec();
        new_shape.extend_from_slice(&shape[axis + 1..]);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::new(new_shape, out)?,
            Op::ReduceMax { x, axis, argmax },
            rg,
        ))
    }

    /// Sum over `axis`; the axis is removed.
    pub fn reduce_sum(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "reduce_sum axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, mid, inner) = axis_split(&shape, axis);
        let xv = self.value(x).values();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                for i in 0..inner {
                    out[o * inner + i] += xv[(o * mid + m) * inner + i];
                }
            }
        }
        let mut new_shape: Vec<usize> = shape[..axis].to_vec();
        new_shape.extend_from_slice(&shape[axis + 1..]);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(new_shape, out)?, Op::ReduceSum { x, axis }, rg))
    }

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let s: f64 = self.value(x).values().iter().sum();
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::scalar(s), Op::SumAll { x }, rg))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.value(x).shape()
            )));
        }
        let values = self.value(x).values().to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(shape, values)?, Op::Reshape { x }, rg))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = dims2(self.value(x), "transpose input")?;
        let xv = self.value(x).values();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose { x }, rg))
    }

    /// Contiguous slice of length `len` along `axis`, starting at `start`.
    pub fn slice(
        &mut self,
        x: TensorId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<TensorId> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::Contract(format!(
                "slice [{start}, {start}+{len}) on axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, mid, inner) = axis_split(&shape, axis);
        let xv = self.value(x).values();
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = (o * mid + start) * inner;
            let dst = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&xv[src..src + len * inner]);
        }
        let mut new_shape = shape.clone();
        new_shape[axis] = len;
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::new(new_shape, out)?,
            Op::Slice { x, axis, start },
            rg,
        ))
    }

    /// Selects rows of a 2-D tensor. Indices may repeat.
    pub fn gather_rows(&mut self, x: TensorId, idx: &[usize]) -> Result<TensorId> {
        let (rows, c) = dims2(self.value(x), "gather_rows input")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!(
                "gather_rows index {bad} out of range for {rows} rows"
            )));
        }
        let xv = self.value(x).values();
        let mut out = vec![0.0; idx.len() * c];
        for (r, &i) in idx.iter().enumerate() {
            out[r * c..(r + 1) * c].copy_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::new(vec![idx.len(), c], out)?,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Batch normalization of a P×C tensor over its P rows using batch
    /// statistics. Returns the output id plus the per-channel batch mean
    /// and (biased) variance so the caller can maintain running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<(TensorId, Vec<f64>, Vec<f64>)> {
        let (p, c) = dims2(self.value(x), "batch_norm input")?;
        if p < 2 {
            return Err(Error::Contract(
                "batch normalization over a single position has degenerate variance; \
                 disable normalization or provide more positions"
                    .into(),
            ));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Dimension(format!(
                "batch_norm scale/shift must be length {c}, got {:?} and {:?}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let xv = self.value(x).values();
        let mut mean = vec![0.0; c];
        for i in 0..p {
            for j in 0..c {
                mean[j] += xv[i * c + j];
            }
        }
        for j in 0..c {
            mean[j] /= p as f64;
        }
        let mut var = vec![0.0; c];
        for i in 0..p {
            for j in 0..c {
                let d = xv[i * c + j] - mean[j];
                var[j] += d * d;
            }
        }
        for j in 0..c {
            var[j] /= p as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut x_hat = vec![0.0; p * c];
        for i in 0..p {
            for j in 0..c {
                x_hat[i * c + j] = (xv[i * c + j] - mean[j]) * inv_std[j];
            }
        }
        let gv = self.value(gamma).values();
        let bv = self.value(beta).values();
        let mut out = vec![0.0; p * c];
        for i in 0..p {
            for j in 0..c {
                out[i * c + j] = gv[j] * x_hat[i * c + j] + bv[j];
            }
        }
        let rg = self.any_requires_grad(&[x, gamma, beta]);
        let id = self.push(
            Tensor::new(vec![p, c], out)?,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            },
            rg,
        );
        Ok((id, mean, var))
    }

    /// Mean over points of the weighted negative log softmax probability
    /// of the true class. `class_weights`, when given, must have one entry
    /// per class.
    pub fn cross_entropy(
        &mut self,
        scores: TensorId,
        labels: &[usize],
        class_weights: Option<&[f64]>,
    ) -> Result<TensorId> {
        let (n, c) = dims2(self.value(scores), "cross_entropy scores")?;
        if labels.len() != n {
            return Err(Error::Contract(format!(
                "cross_entropy got {} labels for {n} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        if let Some(w) = class_weights {
            if w.len() != c {
                return Err(Error::Contract(format!(
                    "{} class weights for {c} classes",
                    w.len()
                )));
            }
        }
        check_finite(self.value(scores).values(), "cross_entropy")?;
        let xv = self.value(scores).values();
        let mut probs = vec![0.0; n * c];
        let mut point_weights = vec![0.0; n];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &xv[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                probs[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                probs[i * c + j] /= sum;
            }
            let w = class_weights.map(|w| w[labels[i]]).unwrap_or(1.0);
            point_weights[i] = w;
            // log(p) computed from the stable shifted form
            loss -= w * ((row[labels[i]] - mx) - sum.ln());
        }
        loss /= n as f64;
        let rg = self.requires_grad(scores);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                scores,
                labels: labels.to_vec(),
                point_weights,
                probs,
            },
            rg,
        ))
    }

    pub(super) fn backprop_node(&mut self, id: TensorId) {
        let op = self.entries[id].op.clone();
        let gout = self.entries[id].grad.clone().expect("grad present");
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                if self.requires_grad(a) {
                    let bv = self.value(b).values().to_vec();
                    let ga = self.grad_buf(a);
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += gout[i * n + j] * bv[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                }
                if self.requires_grad(b) {
                    let av = self.value(a).values().to_vec();
                    let gb = self.grad_buf(b);
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += av[i * k + p] * gout[i * n + j];
                            }
                            gb[p * n + j] += s;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for t in [a, b] {
                    if self.requires_grad(t) {
                        let g = self.grad_buf(t);
                        for (gi, &go) in g.iter_mut().zip(&gout) {
                            *gi += go;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.requires_grad(a) {
                    let bv = self.value(b).values().to_vec();
                    let ga = self.grad_buf(a);
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * bv[i];
                    }
                }
                if self.requires_grad(b) {
                    let av = self.value(a).values().to_vec();
                    let gb = self.grad_buf(b);
                    for i in 0..gout.len() {
                        gb[i] += gout[i] * av[i];
                    }
                }
            }
            Op::ScaleConst { x, c } => {
                if self.requires_grad(x) {
                    let g = self.grad_buf(x);
                    for i in 0..gout.len() {
                        g[i] += c * gout[i];
                    }
                }
            }
            Op::AddBias { x, bias } => {
                let c = self.value(bias).numel();
                if self.requires_grad(x) {
                    let g = self.grad_buf(x);
                    for (gi, &go) in g.iter_mut().zip(&gout) {
                        *gi += go;
                    }
                }
                if self.requires_grad(bias) {
                    let g = self.grad_buf(bias);
                    for (i, &go) in gout.iter().enumerate() {
                        g[i % c] += go;
                    }
                }
            }
            Op::ScaleRows { x, a } => {
                let c = self.value(x).shape()[1];
                if self.requires_grad(x) {
                    let av = self.value(a).values().to_vec();
                    let g = self.grad_buf(x);
                    for (i, &go) in gout.iter().enumerate() {
                        g[i] += go * av[i / c];
                    }
                }
                if self.requires_grad(a) {
                    let xv = self.value(x).values().to_vec();
                    let g = self.grad_buf(a);
                    for (i, &go) in gout.iter().enumerate() {
                        g[i / c] += go * xv[i];
                    }
                }
            }
            Op::ScaleCols { x, s } => {
                let c = self.value(s).numel();
                if self.requires_grad(x) {
                    let sv = self.value(s).values().to_vec();
                    let g = self.grad_buf(x);
                    for (i, &go) in gout.iter().enumerate() {
                        g[i] += go * sv[i % c];
                    }
                }
                if self.requires_grad(s) {
                    let xv = self.value(x).values().to_vec();
                    let g = self.grad_buf(s);
                    for (i, &go) in gout.iter().enumerate() {
                        g[i % c] += go * xv[i];
                    }
                }
            }
            Op::Relu { x } => {
                if self.requires_grad(x) {
                    let xv = self.value(x).values().to_vec();
                    let g = self.grad_buf(x);
                    for i in 0..gout.len() {
                        if xv[i] > 0.0 {
                            g[i] += gout[i];
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                if self.requires_grad(x) {
                    let yv = self.value(id).values().to_vec();
                    let g = self.grad_buf(x);
                    for i in 0..gout.len() {
                        g[i] += gout[i] * yv[i] * (1.0 - yv[i]);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if self.requires_grad(x) {
                    let yv = self.value(id).values().to_vec();
                    let shape = self.value(id).shape().to_vec();
                    let (outer, mid, inner) = axis_split(&shape, axis);
                    let g = self.grad_buf(x);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |m: usize| (o * mid + m) * inner + i;
                            let mut dot = 0.0;
                            for m in 0..mid {
                                dot += gout[at(m)] * yv[at(m)];
                            }
                            for m in 0..mid {
                                g[at(m)] += yv[at(m)] * (gout[at(m)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let shape = self.value(id).shape().to_vec();
                let (outer, mid_total, inner) = axis_split(&shape, axis);
                let out_stride = mid_total * inner;
                let mut offset = 0;
                for &x in &xs {
                    let mid = self.value(x).shape()[axis];
                    let slab = mid * inner;
                    if self.requires_grad(x) {
                        let g = self.grad_buf(x);
                        for o in 0..outer {
                            let src = o * out_stride + offset;
                            let dst = o * slab;
                            for t in 0..slab {
                                g[dst + t] += gout[src + t];
                            }
                        }
                    }
                    offset += slab;
                }
            }
            Op::ReduceMax { x, argmax, .. } => {
                if self.requires_grad(x) {
                    let g = self.grad_buf(x);
                    for (o, &lin) in argmax.iter().enumerate() {
                        g[lin] += gout[o];
                    }
                }
            }
            Op::ReduceSum { x, axis } => {
                if self.requires_grad(x) {
                    let shape = self.value(x).shape().to_vec();
                    let (outer, mid, inner) = axis_split(&shape, axis);
                    let g = self.grad_buf(x);
                    for o in 0..outer {
                        for m in 0..mid {
                            for i in 0..inner {
                                g[(o * mid + m) * inner + i] += gout[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                if self.requires_grad(x) {
                    let g = self.grad_buf(x);
                    for gi in g.iter_mut() {
                        *gi += gout[0];
                    }
                }
            }
            Op::Reshape { x } => {
                if self.requires_grad(x) {
                    let g = self.grad_buf(x);
                    for i in 0..gout.len() {
                        g[i] += gout[i];
                    }
                }
            }
            Op::Transpose { x } => {
                if self.requires_grad(x) {
                    let (c, r) = {
                        let s = self.value(id).shape();
                        (s[0], s[1])
                    };
                    let g = self.grad_buf(x);
                    for j in 0..c {
                        for i in 0..r {
                            g[i * c + j] += gout[j * r + i];
                        }
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                if self.requires_grad(x) {
                    let in_shape = self.value(x).shape().to_vec();
                    let len = self.value(id).shape()[axis];
                    let (outer, mid, inner) = axis_split(&in_shape, axis);
                    let g = self.grad_buf(x);
                    for o in 0..outer {
                        let dst = (o * mid + start) * inner;
                        let src = o * len * inner;
                        for t in 0..len * inner {
                            g[dst + t] += gout[src + t];
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if self.requires_grad(x) {
                    let c = self.value(x).shape()[1];
                    let g = self.grad_buf(x);
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            g[i * c + j] += gout[r * c + j];
                        }
                    }
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            } => {
                let (p, c) = {
                    let s = self.value(x).shape();
                    (s[0], s[1])
                };
                // Per-channel sums of g and g*x_hat, needed by every input.
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for i in 0..p {
                    for j in 0..c {
                        sum_g[j] += gout[i * c + j];
                        sum_gx[j] += gout[i * c + j] * x_hat[i * c + j];
                    }
                }
                if self.requires_grad(gamma) {
                    let g = self.grad_buf(gamma);
                    for j in 0..c {
                        g[j] += sum_gx[j];
                    }
                }
                if self.requires_grad(beta) {
                    let g = self.grad_buf(beta);
                    for j in 0..c {
                        g[j] += sum_g[j];
                    }
                }
                if self.requires_grad(x) {
                    let gv = self.value(gamma).values().to_vec();
                    let g = self.grad_buf(x);
                    let pf = p as f64;
                    for i in 0..p {
                        for j in 0..c {
                            let lin = i * c + j;
                            g[lin] += gv[j]
                                * inv_std[j]
                                * (gout[lin] - sum_g[j] / pf - x_hat[lin] * sum_gx[j] / pf);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                scores,
                labels,
                point_weights,
                probs,
            } => {
                if self.requires_grad(scores) {
                    let c = self.value(scores).shape()[1];
                    let n = labels.len();
                    let g = self.grad_buf(scores);
                    let scale = gout[0] / n as f64;
                    for i in 0..n {
                        for j in 0..c {
                            let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                            g[i * c + j] += scale * point_weights[i] * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Tape, Tensor};

    fn tape_with(values: Tensor) -> (Tape, usize) {
        let mut t = Tape::new();
        let id = t.param(values);
        (t, id)
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let y = t.matmul(i2, i2).unwrap();
        assert_eq!(t.value(y).values(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_hand_example() {
        // [[1,2],[3,4]] x [[1],[1]] = [[3],[7]]
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = t.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let y = t.matmul(a, b).unwrap();
        assert_eq!(t.value(y).shape(), &[2, 1]);
        assert_eq!(t.value(y).values(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_grad_of_sum_is_transpose_broadcast() {
        // d/dA sum(A*B) = ones * B^T
        let mut t = Tape::new();
        let a = t.param(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = t.constant(Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap());
        let y = t.matmul(a, b).unwrap();
        let loss = t.sum_all(y).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[5.0, 6.0, 5.0, 6.0]);
    }

    #[test]
    fn activation_definitions() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![-3.2, 0.0, 3.2]));
        let r = t.relu(x).unwrap();
        assert_eq!(t.value(r).values(), &[0.0, 0.0, 3.2]);
        let s = t.sigmoid(r).unwrap();
        assert_eq!(t.value(s).values()[0], 0.5); // sigmoid(relu(0)) = 0.5
    }

    #[test]
    fn softmax_symmetry_and_sum() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = t.softmax(x, 0).unwrap();
        assert_eq!(t.value(y).values(), &[0.5, 0.5]);

        let z =
            t.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 5.0]]).unwrap());
        let sm = t.softmax(z, 1).unwrap();
        for row in t.value(sm).values().chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![f64::NAN, 1.0]));
        assert!(t.softmax(x, 0).is_err());
    }

    #[test]
    fn concat_preserves_order() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap());
        let b = t.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        let y = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.value(y).shape(), &[2, 2]);
        assert_eq!(t.value(y).values(), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn max_pool_value_and_tie_breaking_grad() {
        let (mut t, x) = tape_with(Tensor::vector(vec![1.0, 5.0, 2.0]));
        let y = t.reduce_max(x, 0).unwrap();
        assert_eq!(t.value(y).values(), &[5.0]);
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 1.0, 0.0]);

        // tie: gradient goes to the lowest index
        let (mut t, x) = tape_with(Tensor::vector(vec![7.0, 7.0]));
        let y = t.reduce_max(x, 0).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn scale_rows_example() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::ones(&[2, 3]));
        let a = t.constant(Tensor::vector(vec![2.0, 0.0]));
        let y = t.scale_rows(x, a).unwrap();
        assert_eq!(t.value(y).values(), &[2.0, 2.0, 2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_uniform_scores() {
        let mut t = Tape::new();
        let scores = t.constant(Tensor::zeros(&[4, 9]));
        let loss = t.cross_entropy(scores, &[0, 3, 5, 8], None).unwrap();
        assert!((t.value(loss).item() - (9.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_limit() {
        let mut t = Tape::new();
        let mut rows = Tensor::zeros(&[2, 3]);
        rows.values_mut()[0] = 1e4; // class 0 for row 0
        rows.values_mut()[3 + 1] = 1e4; // class 1 for row 1
        let scores = t.constant(rows);
        let loss = t.cross_entropy(scores, &[0, 1], None).unwrap();
        assert!(t.value(loss).item() < 1e-12);
    }

    #[test]
    fn cross_entropy_hand_example() {
        // 2 points, 2 classes, hand arithmetic
        let mut t = Tape::new();
        let scores = t.constant(Tensor::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0]]).unwrap());
        let loss = t.cross_entropy(scores, &[0, 1], None).unwrap();
        let p0 = (1.0f64).exp() / ((1.0f64).exp() + (-1.0f64).exp());
        let p1 = (2.0f64).exp() / ((0.5f64).exp() + (2.0f64).exp());
        let expect = -(p0.ln() + p1.ln()) / 2.0;
        assert!((t.value(loss).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut t = Tape::new();
        let scores = t.constant(Tensor::zeros(&[1, 3]));
        assert!(t.cross_entropy(scores, &[3], None).is_err());
    }

    #[test]
    fn gather_rows_accumulates_repeats() {
        let (mut t, x) = tape_with(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let y = t.gather_rows(x, &[0, 0, 1]).unwrap();
        assert_eq!(t.value(y).shape(), &[3, 2]);
        let s = t.sum_all(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn batch_norm_single_row_errors() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[1, 4]));
        let g = t.constant(Tensor::ones(&[4]));
        let b = t.constant(Tensor::zeros(&[4]));
        assert!(t.batch_norm_train(x, g, b, 1e-5).is_err());
    }
}
