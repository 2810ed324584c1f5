//! Reverse-mode gradient computation.
//!
//! `backward` topologically sorts the recorded graph reachable from a scalar
//! loss, seeds the loss gradient with 1, and walks the order in reverse,
//! accumulating each operation's vector-Jacobian product into its inputs.
//! Fan-out accumulates by summation; tensors with `requires_grad == false`
//! never receive an entry.

use std::collections::{HashMap, HashSet};

use super::kernels;
use super::ops::{gelu_derivative, permute_data};
use super::{Op, Tensor};
use crate::dtype::Scalar;
use crate::error::{Error, Result};

/// Gradient store keyed by tensor identity.
pub struct Gradients<E: Scalar> {
    map: HashMap<u64, Vec<E>>,
}

impl<E: Scalar> Gradients<E> {
    fn new() -> Self {
        Gradients { map: HashMap::new() }
    }

    pub fn get(&self, t: &Tensor<E>) -> Option<&[E]> {
        self.map.get(&t.id()).map(|v| v.as_slice())
    }

    pub fn contains(&self, t: &Tensor<E>) -> bool {
        self.map.contains_key(&t.id())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn accumulate(&mut self, t: &Tensor<E>, grad: &[E]) {
        if !t.requires_grad() {
            return;
        }
        let slot = self.map.entry(t.id()).or_insert_with(|| vec![E::zero(); t.numel()]);
        for (s, &g) in slot.iter_mut().zip(grad) {
            *s += g;
        }
    }
}

/// Reverse topological order (loss first) of grad-requiring nodes.
fn sorted_nodes<E: Scalar>(root: &Tensor<E>) -> Vec<Tensor<E>> {
    let mut order: Vec<Tensor<E>> = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    // Iterative post-order DFS; `expanded` marks nodes whose children are done.
    let mut stack: Vec<(Tensor<E>, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !seen.insert(node.id()) {
            continue;
        }
        let children: Vec<Tensor<E>> = node
            .op()
            .map(|op| op.inputs().into_iter().filter(|t| t.requires_grad()).cloned().collect())
            .unwrap_or_default();
        stack.push((node, true));
        for child in children {
            stack.push((child, false));
        }
    }
    order.reverse();
    order
}

impl<E: Scalar> Tensor<E> {
    /// Populate gradients for every grad-requiring tensor reachable from this
    /// scalar loss.
    pub fn backward(&self) -> Result<Gradients<E>> {
        if !self.is_scalar() {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {}", super::fmt_shape(self.shape())),
            ));
        }
        let mut grads = Gradients::new();
        if !self.requires_grad() {
            // Loss built entirely from detached inputs: nothing to do.
            return Ok(grads);
        }
        grads.map.insert(self.id(), vec![E::one()]);
        for node in sorted_nodes(self) {
            let Some(op) = node.op() else { continue };
            let Some(grad_out) = grads.map.get(&node.id()).cloned() else { continue };
            apply_vjp(&node, op, &grad_out, &mut grads);
        }
        Ok(grads)
    }
}

fn apply_vjp<E: Scalar>(node: &Tensor<E>, op: &Op<E>, g: &[E], grads: &mut Gradients<E>) {
    match op {
        Op::Matmul { a, b } => {
            match (a.shape(), b.shape()) {
                (&[m, k], &[_, n]) => {
                    if a.requires_grad() {
                        let da = kernels::matmul_nt(g, b.data(), m, n, k);
                        grads.accumulate(a, &da);
                    }
                    if b.requires_grad() {
                        let db = kernels::matmul_tn(a.data(), g, m, k, n);
                        grads.accumulate(b, &db);
                    }
                }
                (&[batch, m, k], &[_, _, n]) => {
                    if a.requires_grad() {
                        let da = kernels::bmm_nt(g, b.data(), batch, m, n, k);
                        grads.accumulate(a, &da);
                    }
                    if b.requires_grad() {
                        let db = kernels::bmm_tn(a.data(), g, batch, m, k, n);
                        grads.accumulate(b, &db);
                    }
                }
                _ => unreachable!("matmul output recorded with invalid input ranks"),
            }
        }
        Op::Add { a, b } => {
            grads.accumulate(a, g);
            if b.requires_grad() {
                if b.numel() == a.numel() {
                    grads.accumulate(b, g);
                } else {
                    let mut db = vec![E::zero(); b.numel()];
                    for chunk in g.chunks_exact(b.numel()) {
                        for (d, &gv) in db.iter_mut().zip(chunk) {
                            *d += gv;
                        }
                    }
                    grads.accumulate(b, &db);
                }
            }
        }
        Op::Mul { a, b } => {
            if a.requires_grad() {
                let bd = b.data();
                let da: Vec<E> = if b.numel() == a.numel() {
                    g.iter().zip(bd).map(|(&gv, &bv)| gv * bv).collect()
                } else {
                    g.chunks_exact(b.numel()).flat_map(|chunk| chunk.iter().zip(bd).map(|(&gv, &bv)| gv * bv)).collect()
                };
                grads.accumulate(a, &da);
            }
            if b.requires_grad() {
                let ad = a.data();
                if b.numel() == a.numel() {
                    let db: Vec<E> = g.iter().zip(ad).map(|(&gv, &av)| gv * av).collect();
                    grads.accumulate(b, &db);
                } else {
                    let mut db = vec![E::zero(); b.numel()];
                    for (chunk_g, chunk_a) in g.chunks_exact(b.numel()).zip(ad.chunks_exact(b.numel())) {
                        for ((d, &gv), &av) in db.iter_mut().zip(chunk_g).zip(chunk_a) {
                            *d += gv * av;
                        }
                    }
                    grads.accumulate(b, &db);
                }
            }
        }
        Op::Scale { x, c } => {
            let dx: Vec<E> = g.iter().map(|&gv| gv * *c).collect();
            grads.accumulate(x, &dx);
        }
        Op::Gelu { x } => {
            let dx: Vec<E> = g.iter().zip(x.data()).map(|(&gv, &xv)| gv * gelu_derivative(xv)).collect();
            grads.accumulate(x, &dx);
        }
        Op::Relu { x } => {
            let dx: Vec<E> =
                g.iter().zip(x.data()).map(|(&gv, &xv)| if xv > E::zero() { gv } else { E::zero() }).collect();
            grads.accumulate(x, &dx);
        }
        Op::Reshape { x } => {
            grads.accumulate(x, g);
        }
        Op::Permute { x, dims } => {
            let mut inverse = vec![0usize; dims.len()];
            for (d, &src) in dims.iter().enumerate() {
                inverse[src] = d;
            }
            let (dx, _) = permute_data(g, node.shape(), &inverse);
            grads.accumulate(x, &dx);
        }
        Op::Narrow { x, axis, start } => {
            let dim = x.shape()[*axis];
            let len = node.shape()[*axis];
            let inner: usize = x.shape()[axis + 1..].iter().product();
            let outer: usize = x.shape()[..*axis].iter().product();
            let mut dx = vec![E::zero(); x.numel()];
            for o in 0..outer {
                let dst = o * dim * inner + start * inner;
                let src = o * len * inner;
                dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            grads.accumulate(x, &dx);
        }
        Op::Concat { xs, axis } => {
            let inner: usize = xs[0].shape()[axis + 1..].iter().product();
            let outer: usize = xs[0].shape()[..*axis].iter().product();
            let cat_dim = node.shape()[*axis];
            let mut offset = 0usize;
            for t in xs {
                let d = t.shape()[*axis];
                if t.requires_grad() {
                    let mut dt = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let base = o * cat_dim * inner + offset * inner;
                        dt.extend_from_slice(&g[base..base + d * inner]);
                    }
                    grads.accumulate(t, &dt);
                }
                offset += d;
            }
        }
        Op::GatherRows { table, idx } => {
            let cols = table.shape()[1];
            let mut dt = vec![E::zero(); table.numel()];
            for (m, &row) in idx.iter().enumerate() {
                let dst = &mut dt[row * cols..(row + 1) * cols];
                for (d, &gv) in dst.iter_mut().zip(&g[m * cols..(m + 1) * cols]) {
                    *d += gv;
                }
            }
            grads.accumulate(table, &dt);
        }
        Op::Softmax { x, axis } => {
            let s = node.data();
            let n = node.shape()[*axis];
            let inner: usize = node.shape()[axis + 1..].iter().product();
            let outer: usize = node.shape()[..*axis].iter().product();
            let mut dx = vec![E::zero(); s.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let mut dot = E::zero();
                    for j in 0..n {
                        let k = base + j * inner;
                        dot += g[k] * s[k];
                    }
                    for j in 0..n {
                        let k = base + j * inner;
                        dx[k] = s[k] * (g[k] - dot);
                    }
                }
            }
            grads.accumulate(x, &dx);
        }
        Op::LayerNorm { x, gamma, beta, mean, rstd } => {
            let c = *x.shape().last().unwrap();
            let rows = x.numel() / c;
            let xd = x.data();
            let gd = gamma.data();
            let inv_c = E::from_f64(1.0 / c as f64);
            let mut dx = vec![E::zero(); xd.len()];
            let mut dgamma = vec![E::zero(); c];
            let mut dbeta = vec![E::zero(); c];
            for r in 0..rows {
                let row = &xd[r * c..(r + 1) * c];
                let grow = &g[r * c..(r + 1) * c];
                let (mu, rs) = (mean[r], rstd[r]);
                let mut sum1 = E::zero();
                let mut sum2 = E::zero();
                for j in 0..c {
                    let xh = (row[j] - mu) * rs;
                    let gg = grow[j] * gd[j];
                    sum1 += gg;
                    sum2 += gg * xh;
                    dgamma[j] += grow[j] * xh;
                    dbeta[j] += grow[j];
                }
                for j in 0..c {
                    let xh = (row[j] - mu) * rs;
                    let gg = grow[j] * gd[j];
                    dx[r * c + j] = rs * (gg - sum1 * inv_c - xh * sum2 * inv_c);
                }
            }
            grads.accumulate(x, &dx);
            grads.accumulate(gamma, &dgamma);
            grads.accumulate(beta, &dbeta);
        }
        Op::BatchNorm { x, gamma, beta, mean, rstd } => {
            let c = x.shape()[1];
            let n = x.shape()[0];
            let xd = x.data();
            let gd = gamma.data();
            let inv_n = E::from_f64(1.0 / n as f64);
            let mut sum1 = vec![E::zero(); c];
            let mut sum2 = vec![E::zero(); c];
            let mut dgamma = vec![E::zero(); c];
            let mut dbeta = vec![E::zero(); c];
            for r in 0..n {
                for j in 0..c {
                    let k = r * c + j;
                    let xh = (xd[k] - mean[j]) * rstd[j];
                    let gg = g[k] * gd[j];
                    sum1[j] += gg;
                    sum2[j] += gg * xh;
                    dgamma[j] += g[k] * xh;
                    dbeta[j] += g[k];
                }
            }
            let mut dx = vec![E::zero(); xd.len()];
            for r in 0..n {
                for j in 0..c {
                    let k = r * c + j;
                    let xh = (xd[k] - mean[j]) * rstd[j];
                    let gg = g[k] * gd[j];
                    dx[k] = rstd[j] * (gg - sum1[j] * inv_n - xh * sum2[j] * inv_n);
                }
            }
            grads.accumulate(x, &dx);
            grads.accumulate(gamma, &dgamma);
            grads.accumulate(beta, &dbeta);
        }
        Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
            let n = x.shape()[*axis];
            let inner: usize = x.shape()[axis + 1..].iter().product();
            let outer: usize = x.shape()[..*axis].iter().product();
            let scale = match op {
                Op::MeanAxis { .. } => E::from_f64(1.0 / n as f64),
                _ => E::one(),
            };
            let mut dx = vec![E::zero(); x.numel()];
            for o in 0..outer {
                for j in 0..n {
                    let base = o * n * inner + j * inner;
                    for i in 0..inner {
                        dx[base + i] = g[o * inner + i] * scale;
                    }
                }
            }
            grads.accumulate(x, &dx);
        }
        Op::SumAll { x } => {
            let dx = vec![g[0]; x.numel()];
            grads.accumulate(x, &dx);
        }
        Op::MeanAll { x } => {
            let gv = g[0] * E::from_f64(1.0 / x.numel() as f64);
            let dx = vec![gv; x.numel()];
            grads.accumulate(x, &dx);
        }
        Op::CrossEntropy { logits, labels } => {
            let b = logits.shape()[0];
            let c = logits.shape()[1];
            let src = logits.data();
            let gs = g[0] * E::from_f64(1.0 / b as f64);
            let mut dx = vec![E::zero(); src.len()];
            for (r, row) in src.chunks_exact(c).enumerate() {
                let mut max = row[0];
                for &v in &row[1..] {
                    max = max.max_val(v);
                }
                let mut sum = E::zero();
                for &v in row {
                    sum += (v - max).exp();
                }
                for j in 0..c {
                    let p = (row[j] - max).exp() / sum;
                    let y = if labels[r] == j { E::one() } else { E::zero() };
                    dx[r * c + j] = (p - y) * gs;
                }
            }
            grads.accumulate(logits, &dx);
        }
        Op::L2Normalize { x, norms } => {
            let d = *x.shape().last().unwrap();
            let rows = x.numel() / d;
            let y = node.data();
            let mut dx = vec![E::zero(); x.numel()];
            for r in 0..rows {
                let yr = &y[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let mut dot = E::zero();
                for (&gv, &yv) in gr.iter().zip(yr) {
                    dot += gv * yv;
                }
                let inv_n = E::one() / norms[r];
                for j in 0..d {
                    dx[r * d + j] = (gr[j] - yr[j] * dot) * inv_n;
                }
            }
            grads.accumulate(x, &dx);
        }
    }
}
