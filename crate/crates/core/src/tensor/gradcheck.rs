use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{mul, no_grad, sum, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_relative_error: f64,
    /// Per-input maximum; `None` for inputs that do not require a gradient.
    pub per_input: Vec<Option<f64>>,
    /// Number of coordinates compared.
    pub checked: usize,
}

/// Compares reverse-mode gradients of `f` against central finite differences.
///
/// Non-scalar outputs are reduced with a fixed pseudo-random weighting so every
/// output element contributes. Inputs whose `requires_grad` flag is off are
/// skipped.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> =
        inputs.iter().map(|t| t.detach().requires_grad_(t.requires_grad())).collect();

    let probe = no_grad(|| f(&leaves))?;
    let again = no_grad(|| f(&leaves))?;
    let same = probe.shape() == again.shape()
        && probe.data().iter().zip(again.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    if !same {
        return Err(Error::NonDeterministic);
    }
    let weights = Tensor::<f64>::uniform(
        probe.shape(),
        0.5,
        1.5,
        &mut ChaCha8Rng::seed_from_u64(0x6772_6164),
    );
    let objective = |xs: &[Tensor<f64>]| -> Result<f64> {
        let out = no_grad(|| f(xs))?;
        Ok(out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    };

    let loss = sum(&mul(&f(&leaves)?, &weights)?);
    loss.backward()?;

    let mut per_input = Vec::with_capacity(leaves.len());
    let mut max_err = 0.0f64;
    let mut checked = 0;
    for (idx, leaf) in leaves.iter().enumerate() {
        if !leaf.requires_grad() {
            per_input.push(None);
            continue;
        }
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let mut worst = 0.0f64;
        for i in 0..leaf.numel() {
            let shifted = |delta: f64| -> Result<f64> {
                let mut data = leaf.to_vec();
                data[i] += delta;
                let mut xs = leaves.clone();
                xs[idx] = Tensor::new(data, leaf.shape())?;
                objective(&xs)
            };
            let numeric = (shifted(eps)? - shifted(-eps)?) / (2.0 * eps);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
            checked += 1;
        }
        max_err = max_err.max(worst);
        per_input.push(Some(worst));
    }
    Ok(GradCheckReport { max_relative_error: max_err, per_input, checked })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{relu, sigmoid};
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn sigmoid_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(&[4, 3], 2.0, &mut rng).requires_grad_(true);
        let r = grad_check(|xs| Ok(sigmoid(&xs[0])), &[x], 1e-4).unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
        assert_eq!(r.checked, 12);
    }

    #[test]
    fn relu_away_from_kink_passes() {
        let eps = 1e-4;
        let x = Tensor::<f64>::from_fn(&[10], |i| {
            let v = 10.0 * eps + i as f64 * 0.3;
            if i % 2 == 0 { v } else { -v }
        })
        .requires_grad_(true);
        let r = grad_check(|xs| Ok(relu(&xs[0])), &[x], eps).unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
    }

    #[test]
    fn frozen_input_is_skipped() {
        let a = Tensor::<f64>::from_fn(&[3], |i| i as f64 + 1.0).requires_grad_(true);
        let b = Tensor::<f64>::from_fn(&[3], |i| 2.0 - i as f64);
        let r = grad_check(|xs| mul(&xs[0], &xs[1]), &[a, b], 1e-4).unwrap();
        assert!(r.per_input[0].is_some());
        assert!(r.per_input[1].is_none());
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        let calls = AtomicUsize::new(0);
        let x = Tensor::<f64>::ones(&[2]).requires_grad_(true);
        let err = grad_check(
            |xs| {
                let k = calls.fetch_add(1, Ordering::SeqCst) as f64;
                Ok(crate::tensor::scale(&xs[0], k))
            },
            &[x],
            1e-4,
        );
        assert!(matches!(err, Err(Error::NonDeterministic)));
    }
}
