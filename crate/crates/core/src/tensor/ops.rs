//! Forward implementations of the differentiable primitives.
//!
//! Broadcasting is deliberately narrow: element-wise binary ops accept equal
//! shapes, or a right operand whose shape is a trailing suffix of the left's
//! (the right operand is then cycled over the leading axes). Anything else is
//! a shape error.

use std::sync::Arc;

use super::kernels;
use super::{contiguous_strides, fmt_shape, Op, Tensor};
use crate::dtype::Scalar;
use crate::error::{Error, Result};

pub(crate) const GELU_COEF: f64 = 0.044_715;

fn gelu_forward<E: Scalar>(x: E) -> E {
    // tanh approximation of the Gaussian error linear unit
    let c = E::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = E::from_f64(GELU_COEF);
    let half = E::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (E::one() + u.tanh())
}

pub(crate) fn gelu_derivative<E: Scalar>(x: E) -> E {
    let c = E::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = E::from_f64(GELU_COEF);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = E::one() - t * t;
    half * (E::one() + t) + half * x * sech2 * c * (E::one() + three * k * x * x)
}

/// How the right operand of an element-wise binary op maps onto the left.
pub(crate) enum BinaryLayout {
    Same,
    /// Right operand cycled `lhs.numel / rhs.numel` times over leading axes.
    SuffixCycle,
}

fn binary_layout<E: Scalar>(op: &'static str, a: &Tensor<E>, b: &Tensor<E>) -> Result<BinaryLayout> {
    if a.shape() == b.shape() {
        return Ok(BinaryLayout::Same);
    }
    if b.rank() < a.rank() && a.shape().ends_with(b.shape()) {
        return Ok(BinaryLayout::SuffixCycle);
    }
    Err(Error::shape(
        op,
        format!("{} vs {} (equal or trailing-suffix broadcast only)", fmt_shape(a.shape()), fmt_shape(b.shape())),
    ))
}

impl<E: Scalar> Tensor<E> {
    /// Matrix product. 2-D operands multiply directly; 3-D operands are
    /// treated as equal-length batches of 2-D products.
    pub fn matmul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        match (self.shape(), rhs.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => {
                let data = kernels::matmul_nn(self.data(), rhs.data(), m, k, n);
                Ok(Tensor::from_op(data, vec![m, n], Op::Matmul { a: self.clone(), b: rhs.clone() }))
            }
            (&[ba, m, k], &[bb, k2, n]) if ba == bb && k == k2 => {
                let data = kernels::bmm_nn(self.data(), rhs.data(), ba, m, k, n);
                Ok(Tensor::from_op(data, vec![ba, m, n], Op::Matmul { a: self.clone(), b: rhs.clone() }))
            }
            _ => Err(Error::shape(
                "matmul",
                format!("{} vs {}", fmt_shape(self.shape()), fmt_shape(rhs.shape())),
            )),
        }
    }

    pub fn add(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        let layout = binary_layout("add", self, rhs)?;
        let a = self.data();
        let b = rhs.data();
        let data = match layout {
            BinaryLayout::Same => a.iter().zip(b).map(|(&x, &y)| x + y).collect(),
            BinaryLayout::SuffixCycle => {
                let mut out = Vec::with_capacity(a.len());
                for chunk in a.chunks_exact(b.len()) {
                    out.extend(chunk.iter().zip(b).map(|(&x, &y)| x + y));
                }
                out
            }
        };
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Add { a: self.clone(), b: rhs.clone() }))
    }

    pub fn mul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        let layout = binary_layout("mul", self, rhs)?;
        let a = self.data();
        let b = rhs.data();
        let data = match layout {
            BinaryLayout::Same => a.iter().zip(b).map(|(&x, &y)| x * y).collect(),
            BinaryLayout::SuffixCycle => {
                let mut out = Vec::with_capacity(a.len());
                for chunk in a.chunks_exact(b.len()) {
                    out.extend(chunk.iter().zip(b).map(|(&x, &y)| x * y));
                }
                out
            }
        };
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Mul { a: self.clone(), b: rhs.clone() }))
    }

    pub fn sub(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        self.add(&rhs.scale(-1.0))
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, c: f64) -> Tensor<E> {
        let c = E::from_f64(c);
        let data = self.data().iter().map(|&x| x * c).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Scale { x: self.clone(), c })
    }

    pub fn gelu(&self) -> Tensor<E> {
        let data = self.data().iter().map(|&x| gelu_forward(x)).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Gelu { x: self.clone() })
    }

    pub fn relu(&self) -> Tensor<E> {
        let data = self.data().iter().map(|&x| if x > E::zero() { x } else { E::zero() }).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Relu { x: self.clone() })
    }

    /// Zero-copy shape change.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{} -> {} changes element count", fmt_shape(self.shape()), fmt_shape(shape)),
            ));
        }
        let op = Op::Reshape { x: self.clone() };
        let requires_grad = self.requires_grad();
        Ok(Tensor::alloc(shape.to_vec(), self.data_arc(), requires_grad, requires_grad.then_some(op)))
    }

    /// Reorder axes; `dims[d]` is the source axis of output axis `d`.
    pub fn permute(&self, dims: &[usize]) -> Result<Tensor<E>> {
        let rank = self.rank();
        if dims.len() != rank || {
            let mut seen = vec![false; rank];
            dims.iter().any(|&d| d >= rank || std::mem::replace(&mut seen[d], true))
        } {
            return Err(Error::shape("permute", format!("invalid permutation {dims:?} for rank {rank}")));
        }
        let (data, shape) = permute_data(self.data(), self.shape(), dims);
        Ok(Tensor::from_op(data, shape, Op::Permute { x: self.clone(), dims: dims.to_vec() }))
    }

    /// Contiguous sub-range `[start, start+len)` along one axis.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
        if axis >= self.rank() || start + len > self.shape()[axis] {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis} range {start}..{} out of {}", start + len, fmt_shape(self.shape())),
            ));
        }
        let dim = self.shape()[axis];
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let outer: usize = self.shape()[..axis].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        let src = self.data();
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(out, shape, Op::Narrow { x: self.clone(), axis, start }))
    }

    pub fn concat(tensors: &[Tensor<E>], axis: usize) -> Result<Tensor<E>> {
        let first = tensors.first().ok_or_else(|| Error::shape("concat", "empty input list".to_string()))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::shape("concat", format!("axis {axis} out of rank {rank}")));
        }
        let mut cat_dim = 0;
        for t in tensors {
            if t.rank() != rank
                || t.shape()[..axis] != first.shape()[..axis]
                || t.shape()[axis + 1..] != first.shape()[axis + 1..]
            {
                return Err(Error::shape(
                    "concat",
                    format!("{} vs {} along axis {axis}", fmt_shape(first.shape()), fmt_shape(t.shape())),
                ));
            }
            cat_dim += t.shape()[axis];
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * cat_dim * inner);
        for o in 0..outer {
            for t in tensors {
                let d = t.shape()[axis];
                let src = t.data();
                out.extend_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = cat_dim;
        Ok(Tensor::from_op(out, shape, Op::Concat { xs: tensors.to_vec(), axis }))
    }

    /// Embedding-style row lookup: `self` is a `[rows, cols]` table.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor<E>> {
        let [rows, cols] = match self.shape() {
            &[r, c] => [r, c],
            _ => return Err(Error::shape("gather_rows", format!("table must be 2-D, got {}", fmt_shape(self.shape())))),
        };
        let data = self.data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Index { op: "gather_rows", detail: format!("index {bad} out of {rows} rows") });
        }
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&data[i * cols..(i + 1) * cols]);
        }
        Ok(Tensor::from_op(
            out,
            vec![idx.len(), cols],
            Op::GatherRows { table: self.clone(), idx: Arc::new(idx.to_vec()) },
        ))
    }

    /// Numerically stable softmax along `axis`. Fails fast on non-finite input.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<E>> {
        if axis >= self.rank() {
            return Err(Error::shape("softmax", format!("axis {axis} out of rank {}", self.rank())));
        }
        if !self.all_finite() {
            return Err(Error::numerical("softmax", "non-finite input"));
        }
        let n = self.shape()[axis];
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let outer: usize = self.shape()[..axis].iter().product();
        let src = self.data();
        let mut out = vec![E::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut max = src[base];
                for j in 1..n {
                    max = max.max_val(src[base + j * inner]);
                }
                let mut sum = E::zero();
                for j in 0..n {
                    let e = (src[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[base + j * inner] = out[base + j * inner] / sum;
                }
            }
        }
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::Softmax { x: self.clone(), axis }))
    }

    /// Per-sample normalization over the last axis.
    pub fn layer_norm(&self, gamma: &Tensor<E>, beta: &Tensor<E>, eps: f64) -> Result<Tensor<E>> {
        if eps <= 0.0 {
            return Err(Error::config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let c = *self.shape().last().ok_or_else(|| Error::shape("layer_norm", "rank-0 input".to_string()))?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape(
                "layer_norm",
                format!("gamma {} / beta {} vs channel {c}", fmt_shape(gamma.shape()), fmt_shape(beta.shape())),
            ));
        }
        let rows = self.numel() / c;
        let src = self.data();
        let g = gamma.data();
        let b = beta.data();
        let eps = E::from_f64(eps);
        let inv_c = E::from_f64(1.0 / c as f64);
        let mut out = vec![E::zero(); src.len()];
        let mut means = vec![E::zero(); rows];
        let mut rstds = vec![E::zero(); rows];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mut mean = E::zero();
            for &v in row {
                mean += v;
            }
            mean = mean * inv_c;
            let mut var = E::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var = var * inv_c;
            let rstd = E::one() / (var + eps).sqrt();
            means[r] = mean;
            rstds[r] = rstd;
            for (j, &v) in row.iter().enumerate() {
                out[r * c + j] = (v - mean) * rstd * g[j] + b[j];
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                mean: Arc::new(means),
                rstd: Arc::new(rstds),
            },
        ))
    }

    /// Training-mode batch normalization of a `[n, c]` tensor over the batch
    /// axis. Returns `(output, batch_mean, batch_var)`; the caller owns the
    /// running-statistics update. Inference mode composes affine primitives
    /// instead (see `nn::BatchNorm`).
    pub fn batch_norm_train(
        &self,
        gamma: &Tensor<E>,
        beta: &Tensor<E>,
        eps: f64,
    ) -> Result<(Tensor<E>, Vec<E>, Vec<E>)> {
        if eps <= 0.0 {
            return Err(Error::config(format!("batch_norm eps must be > 0, got {eps}")));
        }
        let [n, c] = match self.shape() {
            &[n, c] => [n, c],
            _ => return Err(Error::shape("batch_norm", format!("expected [n, c], got {}", fmt_shape(self.shape())))),
        };
        let src = self.data();
        if n < 2 {
            return Err(Error::shape("batch_norm", format!("training-mode batch axis must have extent > 1, got {n}")));
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape("batch_norm", format!("gamma/beta must be [{c}]")));
        }
        let g = gamma.data();
        let b = beta.data();
        let inv_n = E::from_f64(1.0 / n as f64);
        let eps = E::from_f64(eps);
        let mut means = vec![E::zero(); c];
        let mut vars = vec![E::zero(); c];
        for row in src.chunks_exact(c) {
            for (m, &v) in means.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in means.iter_mut() {
            *m = *m * inv_n;
        }
        for row in src.chunks_exact(c) {
            for ((va, &v), &m) in vars.iter_mut().zip(row).zip(&means) {
                let d = v - m;
                *va += d * d;
            }
        }
        for va in vars.iter_mut() {
            *va = *va * inv_n;
        }
        let rstds: Vec<E> = vars.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
        let mut out = vec![E::zero(); src.len()];
        for (r, row) in src.chunks_exact(c).enumerate() {
            for (j, &v) in row.iter().enumerate() {
                out[r * c + j] = (v - means[j]) * rstds[j] * g[j] + b[j];
            }
        }
        let mean_arc = Arc::new(means);
        let t = Tensor::from_op(
            out,
            vec![n, c],
            Op::BatchNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                mean: mean_arc.clone(),
                rstd: Arc::new(rstds),
            },
        );
        Ok((t, mean_arc.to_vec(), vars))
    }

    /// Sum along one axis (the axis is removed from the shape).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<E>> {
        self.reduce_axis(axis, false)
    }

    /// Mean along one axis (the axis is removed from the shape).
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<E>> {
        self.reduce_axis(axis, true)
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Tensor<E>> {
        if axis >= self.rank() {
            return Err(Error::shape("reduce_axis", format!("axis {axis} out of rank {}", self.rank())));
        }
        let n = self.shape()[axis];
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let outer: usize = self.shape()[..axis].iter().product();
        let src = self.data();
        let mut out = vec![E::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = o * n * inner + j * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(&src[base..base + inner]) {
                    *d += s;
                }
            }
        }
        if mean {
            let inv = E::from_f64(1.0 / n as f64);
            for v in out.iter_mut() {
                *v = *v * inv;
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        let op = if mean { Op::MeanAxis { x: self.clone(), axis } } else { Op::SumAxis { x: self.clone(), axis } };
        Ok(Tensor::from_op(out, shape, op))
    }

    pub fn sum_all(&self) -> Tensor<E> {
        let mut s = E::zero();
        for &v in self.data() {
            s += v;
        }
        Tensor::from_op(vec![s], vec![], Op::SumAll { x: self.clone() })
    }

    pub fn mean_all(&self) -> Tensor<E> {
        let mut s = E::zero();
        for &v in self.data() {
            s += v;
        }
        let m = s * E::from_f64(1.0 / self.numel() as f64);
        Tensor::from_op(vec![m], vec![], Op::MeanAll { x: self.clone() })
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, fused through a
    /// log-sum-exp for stability.
    pub fn cross_entropy_from_logits(&self, labels: &[usize]) -> Result<Tensor<E>> {
        let [b, c] = match self.shape() {
            &[b, c] => [b, c],
            _ => return Err(Error::shape("cross_entropy", format!("expected [batch, classes], got {}", fmt_shape(self.shape())))),
        };
        let src = self.data();
        if labels.len() != b {
            return Err(Error::shape("cross_entropy", format!("{} labels for batch {b}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index { op: "cross_entropy", detail: format!("label {bad} out of {c} classes") });
        }
        let mut total = E::zero();
        for (r, row) in src.chunks_exact(c).enumerate() {
            let mut max = row[0];
            for &v in &row[1..] {
                max = max.max_val(v);
            }
            let mut sum = E::zero();
            for &v in row {
                sum += (v - max).exp();
            }
            let lse = max + sum.ln();
            total += lse - row[labels[r]];
        }
        let loss = total * E::from_f64(1.0 / b as f64);
        Ok(Tensor::from_op(
            vec![loss],
            vec![],
            Op::CrossEntropy { logits: self.clone(), labels: Arc::new(labels.to_vec()) },
        ))
    }

    /// Scale each row (last axis) to unit Euclidean norm, guarding zero rows
    /// with a small epsilon floor.
    pub fn l2_normalize(&self) -> Result<Tensor<E>> {
        let d = *self.shape().last().ok_or_else(|| Error::shape("l2_normalize", "rank-0 input".to_string()))?;
        let rows = self.numel() / d;
        let src = self.data();
        let floor = E::from_f64(1e-12);
        let mut out = vec![E::zero(); src.len()];
        let mut norms = vec![E::zero(); rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mut sq = E::zero();
            for &v in row {
                sq += v * v;
            }
            let norm = sq.sqrt().max_val(floor);
            norms[r] = norm;
            for (j, &v) in row.iter().enumerate() {
                out[r * d + j] = v / norm;
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::L2Normalize { x: self.clone(), norms: Arc::new(norms) },
        ))
    }

}

pub(crate) fn permute_data<E: Scalar>(src: &[E], shape: &[usize], dims: &[usize]) -> (Vec<E>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = dims.iter().map(|&d| shape[d]).collect();
    let in_strides = contiguous_strides(shape);
    // Stride in the source for a unit step of each output axis.
    let map_strides: Vec<usize> = dims.iter().map(|&d| in_strides[d]).collect();
    let numel = src.len();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut src_off = 0usize;
    for _ in 0..numel {
        out.push(src[src_off]);
        // odometer increment over the output index
        for d in (0..rank).rev() {
            idx[d] += 1;
            src_off += map_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src_off -= map_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}
