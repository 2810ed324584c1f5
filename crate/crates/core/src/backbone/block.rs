//! Transformer block, patch embedding, and the 2x2 merging downsampler.

use crate::dtype::Scalar;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, LayerNorm, Linear, NormKind};
use crate::params::Builder;
use crate::tensor::Tensor;

use super::attention::WindowAttention;
use super::drop_path::drop_path;
use super::ForwardCtx;

/// Normalization before the MLP: LayerNorm by default, BatchNorm as the
/// architecture variant.
enum MlpNorm<E: Scalar> {
    Layer(LayerNorm<E>),
    Batch(BatchNorm<E>),
}

impl<E: Scalar> MlpNorm<E> {
    fn forward(&self, x: &Tensor<E>, training: bool) -> Result<Tensor<E>> {
        match self {
            MlpNorm::Layer(ln) => ln.forward(x),
            MlpNorm::Batch(bn) => bn.forward(x, training),
        }
    }
}

pub struct Block<E: Scalar> {
    norm1: LayerNorm<E>,
    attn: WindowAttention<E>,
    mlp_norm: MlpNorm<E>,
    fc1: Linear<E>,
    fc2: Linear<E>,
    shift: usize,
    /// Index into the global stochastic-depth ramp.
    global_index: usize,
}

impl<E: Scalar> Block<E> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder<'_, E>,
        dim: usize,
        heads: usize,
        window: usize,
        shift: usize,
        mlp_ratio: f64,
        norm_before_mlp: NormKind,
        global_index: usize,
    ) -> Result<Self> {
        let hidden = (dim as f64 * mlp_ratio).round() as usize;
        let norm1 = LayerNorm::new(&mut b.scope("norm1"), dim);
        let attn = WindowAttention::new(&mut b.scope("attn"), dim, heads, window)?;
        let mlp_norm = match norm_before_mlp {
            NormKind::LayerNorm => MlpNorm::Layer(LayerNorm::new(&mut b.scope("norm2"), dim)),
            NormKind::BatchNorm => MlpNorm::Batch(BatchNorm::new(&mut b.scope("norm2"), dim)),
        };
        let fc1 = Linear::new(&mut b.scope("mlp.fc1"), dim, hidden, true);
        let fc2 = Linear::new(&mut b.scope("mlp.fc2"), hidden, dim, true);
        Ok(Block { norm1, attn, mlp_norm, fc1, fc2, shift, global_index })
    }

    /// Pre-norm residual block: attention then MLP, each branch behind its
    /// own stochastic-depth gate (norm -> branch -> drop_path -> residual add).
    pub fn forward(&self, grid: &Tensor<E>, rate: f64, ctx: &ForwardCtx) -> Result<Tensor<E>> {
        let attn_out = self.attn.forward(&self.norm1.forward(grid)?, self.shift)?;
        let x = grid.add(&self.gate(attn_out, rate, ctx, 0)?)?;

        let mlp_out = self.fc2.forward(&self.fc1.forward(&self.mlp_norm.forward(&x, ctx.training)?)?.gelu())?;
        x.add(&self.gate(mlp_out, rate, ctx, 1)?)
    }

    fn gate(&self, branch: Tensor<E>, rate: f64, ctx: &ForwardCtx, sub: usize) -> Result<Tensor<E>> {
        if !ctx.training || rate == 0.0 {
            return Ok(branch);
        }
        let seed = ctx.drop_rng.ok_or_else(|| {
            Error::contract("drop_path", "training forward with rate > 0 requires a drop-path seed")
        })?;
        let mut rng = seed.block_rng(2 * self.global_index + sub);
        drop_path(&branch, rate, true, &mut rng)
    }
}

/// Downsample `[b, h, w, c] -> [b, h/2, w/2, 2c]` by concatenating each 2x2
/// token neighborhood, normalizing, and linearly projecting 4c -> 2c.
pub struct PatchMerging<E: Scalar> {
    norm: LayerNorm<E>,
    reduction: Linear<E>,
}

impl<E: Scalar> PatchMerging<E> {
    pub fn new(b: &mut Builder<'_, E>, dim: usize) -> Self {
        PatchMerging {
            norm: LayerNorm::new(&mut b.scope("norm"), 4 * dim),
            reduction: Linear::new(&mut b.scope("reduction"), 4 * dim, 2 * dim, false),
        }
    }

    pub fn forward(&self, grid: &Tensor<E>) -> Result<Tensor<E>> {
        let [b, h, w, c] = match grid.shape() {
            &[b, h, w, c] => [b, h, w, c],
            other => return Err(Error::shape("patch_merging", format!("expected [b, h, w, c], got {other:?}"))),
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::config(format!("patch_merging needs even extents, got {h}x{w}")));
        }
        let merged = grid
            .reshape(&[b, h / 2, 2, w / 2, 2, c])?
            .permute(&[0, 1, 3, 2, 4, 5])?
            .reshape(&[b, h / 2, w / 2, 4 * c])?;
        self.reduction.forward(&self.norm.forward(&merged)?)
    }
}

/// Project non-overlapping `p x p` image patches to the embedding dim.
pub struct PatchEmbed<E: Scalar> {
    proj: Linear<E>,
    norm: LayerNorm<E>,
    patch: usize,
}

impl<E: Scalar> PatchEmbed<E> {
    pub fn new(b: &mut Builder<'_, E>, patch: usize, embed_dim: usize) -> Self {
        PatchEmbed {
            proj: Linear::new(&mut b.scope("proj"), 3 * patch * patch, embed_dim, true),
            norm: LayerNorm::new(&mut b.scope("norm"), embed_dim),
            patch,
        }
    }

    /// `[b, 3, s, s] -> [b, s/p, s/p, embed_dim]`
    pub fn forward(&self, images: &Tensor<E>) -> Result<Tensor<E>> {
        let [b, ch, hs, ws] = match images.shape() {
            &[b, ch, hs, ws] => [b, ch, hs, ws],
            other => return Err(Error::shape("patch_embed", format!("expected [b, 3, s, s], got {other:?}"))),
        };
        if ch != 3 {
            return Err(Error::shape("patch_embed", format!("expected 3 channels, got {ch}")));
        }
        let p = self.patch;
        if hs % p != 0 || ws % p != 0 {
            return Err(Error::config(format!("image {hs}x{ws} not divisible by patch {p}")));
        }
        let (gh, gw) = (hs / p, ws / p);
        let patches = images
            .reshape(&[b, ch, gh, p, gw, p])?
            .permute(&[0, 2, 4, 1, 3, 5])?
            .reshape(&[b, gh, gw, ch * p * p])?;
        self.norm.forward(&self.proj.forward(&patches)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::GradCheck;
    use crate::params::ParamSet;
    use crate::rng::{stream, tag};

    #[test]
    fn patch_embed_shapes() {
        let mut set: ParamSet<f64> = ParamSet::new();
        let mut rng = stream(5, tag::INIT, 0, 0);
        let mut b = Builder::new(&mut set, &mut rng, "pe", true);
        let pe = PatchEmbed::new(&mut b, 4, 48);
        let images = Tensor::<f64>::zeros(&[2, 3, 32, 32]);
        let grid = pe.forward(&images).unwrap();
        assert_eq!(grid.shape(), &[2, 8, 8, 48]);
        assert!(pe.forward(&Tensor::<f64>::zeros(&[2, 3, 30, 30])).is_err());
    }

    #[test]
    fn patch_embed_zero_image_zero_bias_gives_zero_tokens() {
        let mut set: ParamSet<f64> = ParamSet::new();
        let mut rng = stream(5, tag::INIT, 0, 0);
        let mut b = Builder::new(&mut set, &mut rng, "pe", true);
        let pe = PatchEmbed::new(&mut b, 4, 8);
        // Bias starts at zero; LayerNorm of the all-zero projection stays zero
        // (beta is zero), so tokens are exactly zero.
        let grid = pe.forward(&Tensor::<f64>::zeros(&[1, 3, 8, 8])).unwrap();
        assert!(grid.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_embed_projection_gradient() {
        let mut set: ParamSet<f64> = ParamSet::new();
        let mut rng = stream(6, tag::INIT, 0, 0);
        let mut b = Builder::new(&mut set, &mut rng, "pe", true);
        let pe = PatchEmbed::new(&mut b, 2, 4);
        let mut img_rng = stream(7, 0xF00, 0, 0);
        let images = Tensor::from_vec(
            (0..1 * 3 * 4 * 4).map(|_| rand::Rng::gen_range(&mut img_rng, 0.0..1.0)).collect(),
            &[1, 3, 4, 4],
        )
        .unwrap();
        let weight = set.get("pe.proj.weight").unwrap().get();
        GradCheck::with_tol(1e-5)
            .check(&[weight], |ins| {
                // Rebind the slot so the probe value is what the module reads.
                set.get("pe.proj.weight").unwrap().set(ins[0].clone());
                Ok(pe.forward(&images)?.sum_all())
            })
            .unwrap();
    }

    #[test]
    fn patch_merging_shape_and_constant_input() {
        let mut set: ParamSet<f64> = ParamSet::new();
        let mut rng = stream(8, tag::INIT, 0, 0);
        let mut b = Builder::new(&mut set, &mut rng, "pm", true);
        let pm = PatchMerging::new(&mut b, 48);
        let grid = Tensor::<f64>::zeros(&[2, 8, 8, 48]);
        let out = pm.forward(&grid).unwrap();
        assert_eq!(out.shape(), &[2, 4, 4, 96]);

        // Constant input: every 2x2 neighborhood is identical, so the output
        // is constant across positions regardless of the projection.
        let grid = Tensor::<f64>::full(0.37, &[1, 4, 4, 8]);
        let mut set2: ParamSet<f64> = ParamSet::new();
        let mut rng2 = stream(9, tag::INIT, 0, 0);
        let mut b2 = Builder::new(&mut set2, &mut rng2, "pm", true);
        let pm2 = PatchMerging::new(&mut b2, 8);
        let out = pm2.forward(&grid).unwrap();
        let first: Vec<f64> = out.data()[..16].to_vec();
        for pos in out.data().chunks(16) {
            assert_eq!(pos, first.as_slice());
        }

        assert!(pm2.forward(&Tensor::<f64>::zeros(&[1, 3, 4, 8])).is_err());
    }

    #[test]
    fn patch_merging_projection_gradient() {
        let mut set: ParamSet<f64> = ParamSet::new();
        let mut rng = stream(10, tag::INIT, 0, 0);
        let mut b = Builder::new(&mut set, &mut rng, "pm", true);
        let pm = PatchMerging::new(&mut b, 3);
        let mut grid_rng = stream(11, 0xF00, 0, 0);
        let grid = Tensor::from_vec(
            (0..1 * 4 * 4 * 3).map(|_| rand::Rng::gen_range(&mut grid_rng, -1.0..1.0)).collect(),
            &[1, 4, 4, 3],
        )
        .unwrap();
        let weight = set.get("pm.reduction.weight").unwrap().get();
        GradCheck::with_tol(1e-5)
            .check(&[weight], |ins| {
                set.get("pm.reduction.weight").unwrap().set(ins[0].clone());
                Ok(pm.forward(&grid)?.sum_all())
            })
            .unwrap();
    }
}
