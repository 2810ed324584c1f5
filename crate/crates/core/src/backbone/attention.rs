//! Multi-head self-attention over non-overlapping windows, with optional
//! cyclic shift, learned relative-position bias, and the additive mask that
//! keeps shifted windows from mixing tokens across pre-shift region
//! boundaries.

use crate::dtype::Scalar;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Builder, Param};
use crate::tensor::Tensor;

/// Additive logit for masked (cross-region) pairs. Finite so the backward
/// pass stays NaN-free; exp(-1e9) underflows to exactly zero probability.
pub const MASK_LOGIT: f64 = -1e9;

pub struct WindowAttention<E: Scalar> {
    qkv: Linear<E>,
    proj: Linear<E>,
    bias_table: Param<E>,
    rel_index: Vec<usize>,
    dim: usize,
    heads: usize,
    window: usize,
}

/// Lookup indices into the `(2w-1)^2` relative-offset table for every token
/// pair of a `w x w` window, row-major over (query, key).
fn relative_index(window: usize) -> Vec<usize> {
    let span = 2 * window - 1;
    let t = window * window;
    let mut idx = Vec::with_capacity(t * t);
    for qi in 0..t {
        let (qy, qx) = (qi / window, qi % window);
        for ki in 0..t {
            let (ky, kx) = (ki / window, ki % window);
            let dy = qy as isize - ky as isize + (window as isize - 1);
            let dx = qx as isize - kx as isize + (window as isize - 1);
            idx.push(dy as usize * span + dx as usize);
        }
    }
    idx
}

impl<E: Scalar> WindowAttention<E> {
    pub fn new(b: &mut Builder<'_, E>, dim: usize, heads: usize, window: usize) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::config(format!("attention dim {dim} not divisible by {heads} heads")));
        }
        let span = 2 * window - 1;
        let qkv = Linear::new(&mut b.scope("qkv"), dim, 3 * dim, true);
        let proj = Linear::new(&mut b.scope("proj"), dim, dim, true);
        let bias_table = b.trunc_normal("rel_bias", &[span * span, heads], 0.02);
        Ok(WindowAttention { qkv, proj, bias_table, rel_index: relative_index(window), dim, heads, window })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn forward(&self, grid: &Tensor<E>, shift: usize) -> Result<Tensor<E>> {
        Ok(self.run(grid, shift)?.0)
    }

    /// Forward pass that also returns the post-softmax attention weights,
    /// shaped `[b * n_windows, heads, T, T]`. Used by leak diagnostics.
    pub fn forward_with_probs(&self, grid: &Tensor<E>, shift: usize) -> Result<(Tensor<E>, Tensor<E>)> {
        self.run(grid, shift)
    }

    fn run(&self, grid: &Tensor<E>, shift: usize) -> Result<(Tensor<E>, Tensor<E>)> {
        let [b, h, w, c] = match grid.shape() {
            &[b, h, w, c] => [b, h, w, c],
            other => {
                return Err(Error::shape("window_attention", format!("expected [b, h, w, c], got {other:?}")))
            }
        };
        let win = self.window;
        if c != self.dim {
            return Err(Error::shape("window_attention", format!("channel {c} != {}", self.dim)));
        }
        if h % win != 0 || w % win != 0 {
            return Err(Error::config(format!("grid {h}x{w} not divisible by window {win}")));
        }
        if shift >= win {
            return Err(Error::config(format!("shift {shift} must be < window {win}")));
        }

        let shifted = if shift > 0 { roll2d_neg(grid, shift)? } else { grid.clone() };

        let (wy, wx) = (h / win, w / win);
        let n_windows = wy * wx;
        let t = win * win;
        let heads = self.heads;
        let hd = c / heads;

        // [b, h, w, c] -> [b*nW, T, c]
        let parts = shifted
            .reshape(&[b, wy, win, wx, win, c])?
            .permute(&[0, 1, 3, 2, 4, 5])?
            .reshape(&[b * n_windows, t, c])?;

        let qkv = self.qkv.forward(&parts)?; // [B', T, 3c]
        let split = |start: usize| -> Result<Tensor<E>> {
            qkv.narrow(2, start * c, c)?
                .reshape(&[b * n_windows, t, heads, hd])?
                .permute(&[0, 2, 1, 3])? // [B', heads, T, hd]
                .reshape(&[b * n_windows * heads, t, hd])
        };
        let q = split(0)?.scale(1.0 / (hd as f64).sqrt());
        let k = split(1)?;
        let v = split(2)?;

        let kt = k.reshape(&[b * n_windows, heads, t, hd])?.permute(&[0, 1, 3, 2])?.reshape(&[
            b * n_windows * heads,
            hd,
            t,
        ])?;
        let mut attn = q.matmul(&kt)?.reshape(&[b * n_windows, heads, t, t])?;

        // learned relative-position bias, shared across windows and batch
        let bias = self
            .bias_table
            .get()
            .gather_rows(&self.rel_index)?
            .reshape(&[t, t, heads])?
            .permute(&[2, 0, 1])?;
        attn = attn.add(&bias)?;

        if shift > 0 {
            let mask = shift_mask::<E>(h, w, win, shift, heads);
            attn = attn
                .reshape(&[b, n_windows, heads, t, t])?
                .add(&mask)?
                .reshape(&[b * n_windows, heads, t, t])?;
        }

        let probs = attn.softmax(3)?;

        let out = probs
            .reshape(&[b * n_windows * heads, t, t])?
            .matmul(&v)?
            .reshape(&[b * n_windows, heads, t, hd])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * n_windows, t, c])?;
        let out = self.proj.forward(&out)?;

        // [b*nW, T, c] -> [b, h, w, c]
        let merged = out
            .reshape(&[b, wy, wx, win, win, c])?
            .permute(&[0, 1, 3, 2, 4, 5])?
            .reshape(&[b, h, w, c])?;

        let result = if shift > 0 { roll2d_pos(&merged, shift)? } else { merged };
        Ok((result, probs))
    }
}

/// Cyclic shift of the two spatial axes of `[b, h, w, c]` by `-s`.
fn roll2d_neg<E: Scalar>(x: &Tensor<E>, s: usize) -> Result<Tensor<E>> {
    let h = x.shape()[1];
    let w = x.shape()[2];
    let rows = Tensor::concat(&[x.narrow(1, s, h - s)?, x.narrow(1, 0, s)?], 1)?;
    Tensor::concat(&[rows.narrow(2, s, w - s)?, rows.narrow(2, 0, s)?], 2)
}

/// Inverse of [`roll2d_neg`].
fn roll2d_pos<E: Scalar>(x: &Tensor<E>, s: usize) -> Result<Tensor<E>> {
    let h = x.shape()[1];
    let w = x.shape()[2];
    let rows = Tensor::concat(&[x.narrow(1, h - s, s)?, x.narrow(1, 0, h - s)?], 1)?;
    Tensor::concat(&[rows.narrow(2, w - s, s)?, rows.narrow(2, 0, w - s)?], 2)
}

/// Additive attention mask `[nW, heads, T, T]` for a cyclically shifted grid:
/// zero for token pairs from the same pre-shift region, `MASK_LOGIT` for
/// pairs the shift brought together across region boundaries.
fn shift_mask<E: Scalar>(h: usize, w: usize, win: usize, shift: usize, heads: usize) -> Tensor<E> {
    // Region bands in shifted coordinates, per the 3-band partition
    // {[0, L-win), [L-win, L-shift), [L-shift, L)} of each axis.
    let band = |pos: usize, len: usize| -> usize {
        if pos < len - win {
            0
        } else if pos < len - shift {
            1
        } else {
            2
        }
    };
    let (wy, wx) = (h / win, w / win);
    let t = win * win;
    let mut data = Vec::with_capacity(wy * wx * heads * t * t);
    let zero = E::zero();
    let masked = E::from_f64(MASK_LOGIT);
    for gy in 0..wy {
        for gx in 0..wx {
            let mut window_mask = Vec::with_capacity(t * t);
            for qi in 0..t {
                let (qy, qx) = (gy * win + qi / win, gx * win + qi % win);
                let q_region = (band(qy, h), band(qx, w));
                for ki in 0..t {
                    let (ky, kx) = (gy * win + ki / win, gx * win + ki % win);
                    let same = q_region == (band(ky, h), band(kx, w));
                    window_mask.push(if same { zero } else { masked });
                }
            }
            for _ in 0..heads {
                data.extend_from_slice(&window_mask);
            }
        }
    }
    Tensor::from_vec(data, &[wy * wx, heads, t, t]).unwrap()
}
