//! Stochastic depth: per-sample dropping of residual branches.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dtype::Scalar;
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

/// Keyed source of per-(step, view, block) mask generators, so masks are a
/// pure function of the run seed and the logical position in training.
#[derive(Debug, Clone, Copy)]
pub struct DropPathSeed {
    pub seed: u64,
    pub purpose: u64,
    pub step: u64,
    pub view: u64,
}

impl DropPathSeed {
    pub fn block_rng(&self, block: usize) -> ChaCha8Rng {
        stream(self.seed, self.purpose, self.step, (self.view << 32) | block as u64)
    }
}

/// Randomly zero whole samples of the residual branch `x` with probability
/// `rate`, scaling kept samples by `1/(1-rate)`. Identity when not training
/// or when `rate == 0`.
pub fn drop_path<E: Scalar>(
    x: &Tensor<E>,
    rate: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<E>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("drop_path rate must be in [0, 1), got {rate}")));
    }
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let batch = *x
        .shape()
        .first()
        .ok_or_else(|| Error::shape("drop_path", "rank-0 input".to_string()))?;
    let keep = 1.0 - rate;
    let inv_keep = E::from_f64(1.0 / keep);
    let per_sample: usize = x.numel() / batch;
    let mut mask = Vec::with_capacity(x.numel());
    for _ in 0..batch {
        let kept: f64 = rng.gen::<f64>();
        let v = if kept < keep { inv_keep } else { E::zero() };
        mask.extend(std::iter::repeat(v).take(per_sample));
    }
    let mask = Tensor::from_vec(mask, x.shape())?;
    x.mul(&mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::tag;

    fn sample_input() -> Tensor<f64> {
        let data: Vec<f64> = (0..4 * 6).map(|i| (i as f64) * 0.1 - 1.0).collect();
        Tensor::var_from_vec(data, &[4, 6]).unwrap()
    }

    #[test]
    fn rate_zero_is_identity_bit_exact() {
        let x = sample_input();
        let mut rng = stream(1, tag::DROP_PATH_ONLINE, 0, 0);
        let y = drop_path(&x, 0.0, true, &mut rng).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn eval_mode_is_identity() {
        let x = sample_input();
        let mut rng = stream(1, tag::DROP_PATH_ONLINE, 0, 0);
        let y = drop_path(&x, 0.7, false, &mut rng).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn rate_out_of_range_is_config_error() {
        let x = sample_input();
        let mut rng = stream(1, tag::DROP_PATH_ONLINE, 0, 0);
        assert!(drop_path(&x, 1.0, true, &mut rng).is_err());
        assert!(drop_path(&x, -0.1, true, &mut rng).is_err());
    }

    #[test]
    fn monte_carlo_mean_preserved() {
        // E[drop_path(x)] == x: 10k draws, 5% relative tolerance.
        let x = sample_input();
        let draws = 10_000u64;
        let mut acc = vec![0.0; x.numel()];
        for d in 0..draws {
            let mut rng = stream(7, tag::DROP_PATH_ONLINE, d, 0);
            let y = drop_path(&x, 0.2, true, &mut rng).unwrap();
            for (a, v) in acc.iter_mut().zip(y.data()) {
                *a += v;
            }
        }
        for (a, v) in acc.iter().zip(x.data()) {
            let mean = a / draws as f64;
            assert!(
                (mean - v).abs() <= 0.05 * v.abs().max(0.05),
                "MC mean {mean} vs {v}"
            );
        }
    }

    #[test]
    fn whole_samples_dropped() {
        let x = Tensor::<f64>::ones(&[64, 5]);
        let mut rng = stream(3, tag::DROP_PATH_ONLINE, 0, 0);
        let y = drop_path(&x, 0.5, true, &mut rng).unwrap();
        let mut dropped = 0;
        for row in y.data().chunks(5) {
            let first = row[0];
            assert!(row.iter().all(|&v| v == first), "mask must act per sample");
            assert!(first == 0.0 || (first - 2.0).abs() < 1e-15);
            if first == 0.0 {
                dropped += 1;
            }
        }
        assert!(dropped > 10 && dropped < 54, "both outcomes observed");
    }
}
