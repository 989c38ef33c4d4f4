//! Gamma and Dirichlet sampling.
//!
//! Gamma draws use Marsaglia and Tsang's squeeze method; shapes below one are
//! boosted to `shape + 1` and corrected with `U^(1/shape)`. Everything is kept
//! in log space so tiny shapes (which underflow to zero in linear space) still
//! normalize cleanly.

use rand::Rng;
use rand_distr::StandardNormal;

use super::PartitionError;

/// `ln X` for `X ~ Gamma(shape, 1)`.
pub fn sample_log_gamma<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> Result<f64, PartitionError> {
    if !(shape > 0.0 && shape.is_finite()) {
        return Err(PartitionError::NonPositiveAlpha(shape));
    }
    if shape < 1.0 {
        let boosted = sample_log_gamma(shape + 1.0, rng)?;
        let u: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
        return Ok(boosted + u.ln() / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let t = 1.0 + c * x;
        if t <= 0.0 {
            continue;
        }
        let v = t * t * t;
        let u: f64 = rng.random();
        if u < 1.0 - 0.0331 * x.powi(4) || u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
            return Ok(d.ln() + v.ln());
        }
    }
}

pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> Result<f64, PartitionError> {
    Ok(sample_log_gamma(shape, rng)?.exp())
}

/// One draw from `Dirichlet(alphas)`: normalized independent Gamma draws.
pub fn sample_dirichlet<R: Rng + ?Sized>(alphas: &[f64], rng: &mut R) -> Result<Vec<f64>, PartitionError> {
    if alphas.is_empty() {
        return Err(PartitionError::EmptyAlphas);
    }
    let logs = alphas
        .iter()
        .map(|&a| sample_log_gamma(a, rng))
        .collect::<Result<Vec<_>, _>>()?;
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}
