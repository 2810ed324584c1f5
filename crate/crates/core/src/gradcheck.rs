//! Central finite-difference gradient verification.
//!
//! This is the independent oracle the tensor tests are built on: it only ever
//! evaluates the forward path at perturbed inputs, so it cannot share a bug
//! with the backward rules it checks.

use crate::error::Result;
use crate::tensor::Tensor;

/// Settings for a finite-difference check (64-bit only).
pub struct GradCheck {
    /// Central-difference step.
    pub eps: f64,
    /// Relative tolerance; comparisons also pass on matching absolute error.
    pub tol: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { eps: 1e-5, tol: 1e-5 }
    }
}

impl GradCheck {
    pub fn with_tol(tol: f64) -> Self {
        GradCheck { tol, ..Default::default() }
    }

    /// Compare analytic gradients of `f` against central differences for
    /// every coordinate of every input. `f` must be a pure function producing
    /// a scalar loss from leaf variables.
    pub fn check<F>(&self, inputs: &[Tensor<f64>], f: F) -> std::result::Result<(), String>
    where
        F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    {
        let loss = f(inputs).map_err(|e| format!("forward failed: {e}"))?;
        assert!(loss.is_scalar(), "gradcheck loss must be scalar");
        let grads = loss.backward().map_err(|e| format!("backward failed: {e}"))?;

        for (i, input) in inputs.iter().enumerate() {
            if !input.requires_grad() {
                continue;
            }
            let analytic: Vec<f64> = match grads.get(input) {
                Some(g) => g.to_vec(),
                None => vec![0.0; input.numel()],
            };
            let base = input.data().to_vec();
            for j in 0..base.len() {
                let eval = |delta: f64| -> std::result::Result<f64, String> {
                    let mut perturbed = base.clone();
                    perturbed[j] += delta;
                    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
                    probe[i] = Tensor::var_from_vec(perturbed, input.shape()).unwrap();
                    Ok(f(&probe).map_err(|e| format!("forward failed: {e}"))?.item())
                };
                let fd = (eval(self.eps)? - eval(-self.eps)?) / (2.0 * self.eps);
                let an = analytic[j];
                let err = (fd - an).abs();
                let denom = fd.abs().max(an.abs());
                if err > self.tol && err > self.tol * denom {
                    return Err(format!(
                        "input {i} coord {j}: analytic {an:.12e} vs finite-diff {fd:.12e} (err {err:.3e}, tol {:.1e})",
                        self.tol
                    ));
                }
            }
        }
        Ok(())
    }
}
