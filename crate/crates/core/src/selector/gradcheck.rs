use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{batch_loss, batch_loss_and_grad, LossItem};
use super::params::SelectorParams;
use super::SelectorError;

/// Floor on the denominator of the relative error.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
    pub tensors: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

fn set_entry(params: &mut SelectorParams, tensor: usize, index: usize, value: f64) {
    let mut tensors = params.tensors_mut();
    tensors[tensor].1[index] = value;
}

/// Compares the analytic gradient with central finite differences.
///
/// Every parameter tensor is visited. With `max_entries_per_tensor` set,
/// larger tensors are probed at that many entries drawn with `seed`;
/// otherwise every scalar is checked.
pub fn gradient_check(
    params: &SelectorParams,
    items: &[LossItem<'_>],
    epsilon: f64,
    max_entries_per_tensor: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport, SelectorError> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(SelectorError::InvalidConfig(format!(
            "epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    let (_, grad) = batch_loss_and_grad(params, items)?;
    let grad_tensors: Vec<(String, Vec<f64>)> = grad
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.to_vec()))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        tensors: grad_tensors.len(),
    };

    for (t, (name, analytic)) in grad_tensors.iter().enumerate() {
        let indices: Vec<usize> = match max_entries_per_tensor {
            Some(m) if analytic.len() > m => {
                let mut idx = rand::seq::index::sample(&mut rng, analytic.len(), m).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..analytic.len()).collect(),
        };
        for i in indices {
            let original = params.tensors()[t].1[i];
            set_entry(&mut probe, t, i, original + epsilon);
            let plus = batch_loss(&probe, items)?;
            set_entry(&mut probe, t, i, original - epsilon);
            let minus = batch_loss(&probe, items)?;
            set_entry(&mut probe, t, i, original);

            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = relative_error(analytic[i], numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.worst_tensor.is_empty() {
                report.max_relative_error = err;
                report.worst_tensor = name.clone();
                report.worst_index = i;
                report.analytic = analytic[i];
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
