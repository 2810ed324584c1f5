//! Miniature hierarchical shifted-window transformer backbone, plus a plain
//! single-stage ViT-style variant with the same forward signature. Both emit
//! a mean-pooled feature vector.

mod attention;
mod block;
mod drop_path;

pub use attention::{WindowAttention, MASK_LOGIT};
pub use block::{Block, PatchEmbed, PatchMerging};
pub use drop_path::{drop_path, DropPathSeed};

use crate::dtype::Scalar;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, NormKind};
use crate::params::{Builder, Param};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    SwinLite,
    VitLite,
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "swin_lite" => Ok(Variant::SwinLite),
            "vit_lite" => Ok(Variant::VitLite),
            other => Err(format!("unknown variant `{other}` (expected swin_lite or vit_lite)")),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::SwinLite => write!(f, "swin_lite"),
            Variant::VitLite => write!(f, "vit_lite"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub variant: Variant,
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub num_heads: Vec<usize>,
    pub window_size: usize,
    pub mlp_ratio: f64,
    pub norm_before_mlp: NormKind,
    pub drop_path_rate: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            variant: Variant::SwinLite,
            image_size: 32,
            patch_size: 4,
            embed_dim: 48,
            depths: vec![2, 2],
            num_heads: vec![3, 6],
            window_size: 4,
            mlp_ratio: 4.0,
            norm_before_mlp: NormKind::LayerNorm,
            drop_path_rate: 0.1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.depths.is_empty() || self.depths.len() != self.num_heads.len() {
            return Err(Error::config(format!(
                "depths ({:?}) and num_heads ({:?}) must be equal-length and non-empty",
                self.depths, self.num_heads
            )));
        }
        if self.depths.iter().any(|&d| d == 0) {
            return Err(Error::config("every stage must have at least one block".to_string()));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::config(format!("drop_path_rate {} must be in [0, 1)", self.drop_path_rate)));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::config(format!("mlp_ratio {} must be positive", self.mlp_ratio)));
        }
        let grid = self.image_size / self.patch_size;
        match self.variant {
            Variant::SwinLite => {
                if self.window_size == 0 {
                    return Err(Error::config("window_size must be positive".to_string()));
                }
                for (stage, &heads) in self.num_heads.iter().enumerate() {
                    let g = grid >> stage;
                    if g == 0 || (g % 2 != 0 && stage + 1 < self.depths.len()) {
                        return Err(Error::config(format!(
                            "token grid {g} at stage {stage} cannot be merged further"
                        )));
                    }
                    if g % self.window_size != 0 && self.window_size % g != 0 {
                        return Err(Error::config(format!(
                            "stage {stage} grid {g} not compatible with window {}",
                            self.window_size
                        )));
                    }
                    let dim = self.embed_dim << stage;
                    if dim % heads != 0 {
                        return Err(Error::config(format!("stage {stage} dim {dim} not divisible by {heads} heads")));
                    }
                }
            }
            Variant::VitLite => {
                if self.embed_dim % self.num_heads[0] != 0 {
                    return Err(Error::config(format!(
                        "embed_dim {} not divisible by {} heads",
                        self.embed_dim, self.num_heads[0]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Dimension of the pooled output feature.
    pub fn feature_dim(&self) -> usize {
        match self.variant {
            Variant::SwinLite => self.embed_dim << (self.depths.len() - 1),
            Variant::VitLite => self.embed_dim,
        }
    }

    fn total_depth(&self) -> usize {
        self.depths.iter().sum()
    }
}

/// Per-forward context: evaluation is deterministic; training applies the
/// given stochastic-depth rate using masks drawn from `drop_rng`.
#[derive(Clone, Copy)]
pub struct ForwardCtx<'a> {
    pub training: bool,
    pub drop_path_rate: f64,
    pub drop_rng: Option<&'a DropPathSeed>,
}

impl ForwardCtx<'static> {
    pub fn eval() -> Self {
        ForwardCtx { training: false, drop_path_rate: 0.0, drop_rng: None }
    }
}

impl<'a> ForwardCtx<'a> {
    pub fn train(drop_path_rate: f64, drop_rng: &'a DropPathSeed) -> Self {
        ForwardCtx { training: true, drop_path_rate, drop_rng: Some(drop_rng) }
    }
}

struct Stage<E: Scalar> {
    blocks: Vec<Block<E>>,
    merge: Option<PatchMerging<E>>,
}

pub struct Backbone<E: Scalar> {
    cfg: BackboneConfig,
    patch_embed: PatchEmbed<E>,
    /// Learned positional embedding (ViT variant only).
    pos_embed: Option<Param<E>>,
    stages: Vec<Stage<E>>,
    final_norm: LayerNorm<E>,
    /// Per-block stochastic-depth ramp weights in [0, 1]; the forward rate
    /// scales them.
    ramp: Vec<f64>,
}

impl<E: Scalar> Backbone<E> {
    pub fn new(b: &mut Builder<'_, E>, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.image_size / cfg.patch_size;
        let total = cfg.total_depth();
        let ramp: Vec<f64> =
            (0..total).map(|i| if total > 1 { i as f64 / (total - 1) as f64 } else { 0.0 }).collect();

        let patch_embed = PatchEmbed::new(&mut b.scope("patch_embed"), cfg.patch_size, cfg.embed_dim);
        let mut pos_embed = None;
        let mut stages = Vec::new();
        let mut global_index = 0usize;

        match cfg.variant {
            Variant::SwinLite => {
                for (stage_idx, (&depth, &heads)) in cfg.depths.iter().zip(&cfg.num_heads).enumerate() {
                    let dim = cfg.embed_dim << stage_idx;
                    let stage_grid = grid >> stage_idx;
                    // Windows never exceed the grid; a full-grid window cannot shift.
                    let window = cfg.window_size.min(stage_grid);
                    let mut sb = b.scope(&format!("stages.{stage_idx}"));
                    let mut blocks = Vec::new();
                    for j in 0..depth {
                        let shift = if j % 2 == 1 && window < stage_grid { window / 2 } else { 0 };
                        blocks.push(Block::new(
                            &mut sb.scope(&format!("blocks.{j}")),
                            dim,
                            heads,
                            window,
                            shift,
                            cfg.mlp_ratio,
                            cfg.norm_before_mlp,
                            global_index,
                        )?);
                        global_index += 1;
                    }
                    let merge = (stage_idx + 1 < cfg.depths.len())
                        .then(|| PatchMerging::new(&mut sb.scope("merge"), dim));
                    stages.push(Stage { blocks, merge });
                }
            }
            Variant::VitLite => {
                let tokens = grid * grid;
                pos_embed =
                    Some(b.scope("pos_embed").trunc_normal("table", &[tokens, cfg.embed_dim], 0.02));
                let mut sb = b.scope("stages.0");
                let mut blocks = Vec::new();
                for j in 0..total {
                    // Global attention: the window spans the whole grid.
                    blocks.push(Block::new(
                        &mut sb.scope(&format!("blocks.{j}")),
                        cfg.embed_dim,
                        cfg.num_heads[0],
                        grid,
                        0,
                        cfg.mlp_ratio,
                        cfg.norm_before_mlp,
                        global_index,
                    )?);
                    global_index += 1;
                }
                stages.push(Stage { blocks, merge: None });
            }
        }

        let final_norm = LayerNorm::new(&mut b.scope("final_norm"), cfg.feature_dim());
        Ok(Backbone { cfg: cfg.clone(), patch_embed, pos_embed, stages, final_norm, ramp })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// `[b, 3, s, s]` normalized images -> `[b, feature_dim]` pooled features.
    pub fn forward(&self, images: &Tensor<E>, ctx: &ForwardCtx) -> Result<Tensor<E>> {
        let mut grid = self.patch_embed.forward(images)?;
        if let Some(pos) = &self.pos_embed {
            let [b, h, w, c] = [grid.shape()[0], grid.shape()[1], grid.shape()[2], grid.shape()[3]];
            grid = grid.reshape(&[b, h * w, c])?.add(&pos.get())?.reshape(&[b, h, w, c])?;
        }
        let mut global_index = 0usize;
        for stage in &self.stages {
            for block in &stage.blocks {
                let rate = ctx.drop_path_rate * self.ramp[global_index];
                grid = block.forward(&grid, rate, ctx)?;
                global_index += 1;
            }
            if let Some(merge) = &stage.merge {
                grid = merge.forward(&grid)?;
            }
        }
        let [b, h, w, c] = [grid.shape()[0], grid.shape()[1], grid.shape()[2], grid.shape()[3]];
        let tokens = grid.reshape(&[b, h * w, c])?;
        self.final_norm.forward(&tokens)?.mean_axis(1)
    }
}
