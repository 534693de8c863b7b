//! Central finite-difference verification of analytic gradients.
//!
//! The differencing here never touches the tape's backward pass: it reruns a
//! caller-supplied pure forward closure under coordinate perturbations, so it
//! stays an independent oracle for whatever that closure computes.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::params::ParameterStore;

#[derive(Debug, Clone)]
pub struct FdFailure {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct FdReport {
    pub coords_checked: usize,
    pub max_abs_diff: f64,
    pub failures: Vec<FdFailure>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compare the gradients currently stored in `store` against central finite
/// differences of `forward`, on up to `coords_per_tensor` random coordinates
/// of every parameter. A coordinate passes when
/// `|analytic - numeric| <= rtol * max(|analytic|, |numeric|) + atol`.
pub fn finite_difference_check(
    store: &ParameterStore,
    forward: &dyn Fn(&ParameterStore) -> Result<f64>,
    coords_per_tensor: usize,
    step: f64,
    rtol: f64,
    atol: f64,
    seed: u64,
) -> Result<FdReport> {
    let mut report = FdReport::default();
    let mut probe = store.clone();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for (tensor_idx, name) in names.iter().enumerate() {
        let len = store.value(name)?.len();
        if len == 0 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (tensor_idx as u64).wrapping_mul(0x9e37));
        let picks = sample(&mut rng, len, coords_per_tensor.min(len));
        for index in picks {
            let original = store.value(name)?.data()[index];

            probe.value_mut(name)?.data_mut()[index] = original + step;
            let up = forward(&probe)?;
            probe.value_mut(name)?.data_mut()[index] = original - step;
            let down = forward(&probe)?;
            probe.value_mut(name)?.data_mut()[index] = original;

            let numeric = (up - down) / (2.0 * step);
            let analytic = store.grad(name)?.data()[index];
            let diff = (analytic - numeric).abs();
            report.coords_checked += 1;
            report.max_abs_diff = report.max_abs_diff.max(diff);
            if diff > rtol * analytic.abs().max(numeric.abs()) + atol {
                report.failures.push(FdFailure {
                    param: name.clone(),
                    index,
                    analytic,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
