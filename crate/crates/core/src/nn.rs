//! Small trainable building blocks shared by the backbone and heads.

use crate::dtype::Scalar;
use crate::error::{Error, Result};
use crate::params::{Buffer, Builder, Param};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
/// Running-statistics update rate for batch norm.
pub const BN_MOMENTUM: f64 = 0.1;

/// Which normalization a transformer block applies before its MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    LayerNorm,
    BatchNorm,
}

impl std::str::FromStr for NormKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "layer_norm" => Ok(NormKind::LayerNorm),
            "batch_norm" => Ok(NormKind::BatchNorm),
            other => Err(format!("unknown norm `{other}` (expected layer_norm or batch_norm)")),
        }
    }
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NormKind::LayerNorm => write!(f, "layer_norm"),
            NormKind::BatchNorm => write!(f, "batch_norm"),
        }
    }
}

/// Affine map `x @ w + b` with `w: [in, out]`.
pub struct Linear<E: Scalar> {
    weight: Param<E>,
    bias: Option<Param<E>>,
    in_features: usize,
    out_features: usize,
}

impl<E: Scalar> Linear<E> {
    pub fn new(b: &mut Builder<'_, E>, in_features: usize, out_features: usize, bias: bool) -> Self {
        let weight = b.trunc_normal("weight", &[in_features, out_features], 0.02);
        let bias = bias.then(|| b.zeros("bias", &[out_features]));
        Linear { weight, bias, in_features, out_features }
    }

    pub fn weight(&self) -> &Param<E> {
        &self.weight
    }

    /// Accepts `[.., in]`; flattens leading axes for the product.
    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let in_dim = *x.shape().last().ok_or_else(|| Error::shape("linear", "rank-0 input".to_string()))?;
        if in_dim != self.in_features {
            return Err(Error::shape(
                "linear",
                format!("input feature dim {in_dim} != {}", self.in_features),
            ));
        }
        let rows = x.numel() / in_dim;
        let flat = x.reshape(&[rows, in_dim])?;
        let mut y = flat.matmul(&self.weight.get())?;
        if let Some(bias) = &self.bias {
            y = y.add(&bias.get())?;
        }
        let mut out_shape = x.shape().to_vec();
        *out_shape.last_mut().unwrap() = self.out_features;
        y.reshape(&out_shape)
    }
}

pub struct LayerNorm<E: Scalar> {
    gamma: Param<E>,
    beta: Param<E>,
    eps: f64,
}

impl<E: Scalar> LayerNorm<E> {
    pub fn new(b: &mut Builder<'_, E>, dim: usize) -> Self {
        LayerNorm { gamma: b.ones("gamma", &[dim]), beta: b.zeros("beta", &[dim]), eps: NORM_EPS }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        x.layer_norm(&self.gamma.get(), &self.beta.get(), self.eps)
    }
}

/// Batch normalization over the leading axis of a `[n, c]` view. Training
/// mode normalizes with batch statistics and updates the running buffers;
/// inference mode applies the stored statistics as a constant affine map.
pub struct BatchNorm<E: Scalar> {
    gamma: Param<E>,
    beta: Param<E>,
    running_mean: Buffer<E>,
    running_var: Buffer<E>,
    dim: usize,
    eps: f64,
}

impl<E: Scalar> BatchNorm<E> {
    pub fn new(b: &mut Builder<'_, E>, dim: usize) -> Self {
        BatchNorm {
            gamma: b.ones("gamma", &[dim]),
            beta: b.zeros("beta", &[dim]),
            running_mean: b.buffer("running_mean", vec![E::zero(); dim]),
            running_var: b.buffer("running_var", vec![E::one(); dim]),
            dim,
            eps: NORM_EPS,
        }
    }

    /// Input of any rank `[.., c]`; internally flattened to `[n, c]`.
    pub fn forward(&self, x: &Tensor<E>, training: bool) -> Result<Tensor<E>> {
        let c = self.dim;
        let rows = x.numel() / c;
        let flat = x.reshape(&[rows, c])?;
        let y = if training {
            let (y, mean, var) = flat.batch_norm_train(&self.gamma.get(), &self.beta.get(), self.eps)?;
            let mom = E::from_f64(BN_MOMENTUM);
            let keep = E::from_f64(1.0 - BN_MOMENTUM);
            // Unbiased variance for the running estimate.
            let unbias = E::from_f64(rows as f64 / (rows as f64 - 1.0));
            let mut rm = self.running_mean.get();
            let mut rv = self.running_var.get();
            for j in 0..c {
                rm[j] = keep * rm[j] + mom * mean[j];
                rv[j] = keep * rv[j] + mom * var[j] * unbias;
            }
            self.running_mean.set(rm);
            self.running_var.set(rv);
            y
        } else {
            let rm = self.running_mean.get();
            let rv = self.running_var.get();
            let eps = E::from_f64(self.eps);
            let scale: Vec<E> = rv.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
            let neg_mean_scaled: Vec<E> =
                rm.iter().zip(&scale).map(|(&m, &s)| -(m * s)).collect();
            // y = (x - mean) * rstd * gamma + beta, with mean/rstd constant
            let scale_t = Tensor::from_vec(scale, &[c])?;
            let shift_t = Tensor::from_vec(neg_mean_scaled, &[c])?;
            flat.mul(&scale_t)?
                .add(&shift_t)?
                .mul(&self.gamma.get())?
                .add(&self.beta.get())?
        };
        y.reshape(x.shape())
    }
}
