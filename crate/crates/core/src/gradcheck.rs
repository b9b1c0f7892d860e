//! Finite-difference verification of tape gradients.

use rand::seq::index::sample;

use crate::error::Result;
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;
use crate::vit::VisionTransformer;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Smallest magnitude used as the denominator of a relative error. Below it
/// the comparison is effectively absolute.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub len: usize,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance && self.tensors.iter().all(|t| t.checked > 0)
    }

    /// Tensors where fewer than `min` coordinates were compared although
    /// more were available.
    pub fn under_covered(&self, min: usize) -> Vec<&str> {
        self.tensors
            .iter()
            .filter(|t| t.checked < min.min(t.len))
            .map(|t| t.name.as_str())
            .collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of the loss of `model` on `(input, label)`
/// against central differences at `per_tensor` random coordinates of every
/// tensor (all coordinates when the tensor is smaller).
pub fn grad_check(
    model: &VisionTransformer,
    input: &Tensor,
    label: usize,
    tolerance: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let analytic = model.loss_and_grad(input, label)?.grads;
    let mut probe = model.clone();
    let mut rng = rng_from_seed(seed);
    let mut tensors = Vec::new();
    let mut max_rel_error: f64 = 0.0;

    let names = model.params.names();
    for (t, (name, grad)) in names.into_iter().zip(analytic.iter()).enumerate() {
        let len = grad.len();
        let coords: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            sample(&mut rng, len, per_tensor).into_vec()
        };
        let mut check = TensorCheck {
            name,
            checked: 0,
            len,
            max_rel_error: 0.0,
            max_abs_grad: 0.0,
        };
        for &i in &coords {
            let original = model.params.iter().nth(t).expect("tensor index").data()[i];
            let mut eval_at = |v: f64| -> Result<f64> {
                probe.params.iter_mut().nth(t).expect("tensor index").data_mut()[i] = v;
                probe.loss(input, label)
            };
            let plus = eval_at(original + FD_STEP)?;
            let minus = eval_at(original - FD_STEP)?;
            eval_at(original)?;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = grad.data()[i];
            check.max_rel_error = check.max_rel_error.max(relative_error(a, numeric));
            check.max_abs_grad = check.max_abs_grad.max(a.abs());
            check.checked += 1;
        }
        max_rel_error = max_rel_error.max(check.max_rel_error);
        tensors.push(check);
    }
    Ok(GradCheckReport {
        tensors,
        max_rel_error,
        tolerance,
    })
}
