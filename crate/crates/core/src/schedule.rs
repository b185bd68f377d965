//! Variance-preserving discretization of the forward noising SDE.

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.02;

/// Per-step noise tables for `T` discrete steps. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Linear beta schedule from `beta_min` to `beta_max` over `steps` steps.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Parameter(format!("schedule needs T >= 2, got {steps}")));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Parameter(format!(
            "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|t| beta_min + (beta_max - beta_min) * t as f64 / (steps - 1) as f64)
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0f64, |acc, &a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_STEPS, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX).expect("default schedule parameters are valid")
    }
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t < self.steps() {
            Ok(())
        } else {
            Err(Error::Index {
                index: t,
                len: self.steps(),
            })
        }
    }

    /// Noise level `sqrt(1 - alpha_bar[t])` of the step-`t` marginal.
    pub fn sigma_at(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok((1.0 - self.alpha_bar[t]).sqrt())
    }

    /// Sample the forward marginal: `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
    pub fn q_sample(&self, x0: &ImageTensor, t: usize, eps: &ImageTensor) -> Result<ImageTensor> {
        self.check_step(t)?;
        x0.check_same_shape(eps, "q_sample")?;
        let ab = self.alpha_bar[t];
        x0.axpby(ab.sqrt() as f32, eps, (1.0 - ab).sqrt() as f32)
    }
}

pub fn q_sample(x0: &ImageTensor, t: usize, eps: &ImageTensor, sched: &NoiseSchedule) -> Result<ImageTensor> {
    sched.q_sample(x0, t, eps)
}

pub fn sigma_at(t: usize, sched: &NoiseSchedule) -> Result<f64> {
    sched.sigma_at(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent product oracle for the cumulative alpha table.
    fn alpha_bar_oracle(steps: usize, lo: f64, hi: f64, t: usize) -> f64 {
        let mut prod = 1.0;
        for s in 0..=t {
            let beta = lo + (hi - lo) * (s as f64) / ((steps - 1) as f64);
            prod *= 1.0 - beta;
        }
        prod
    }

    #[test]
    fn default_tail_alpha_bar() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 1000);
        let oracle = alpha_bar_oracle(1000, 1e-4, 0.02, 999);
        assert!((s.alpha_bar()[999] - oracle).abs() < 1e-12);
        assert!((oracle - 4.04e-5).abs() < 0.01e-5, "oracle {oracle}");
        assert!(s.alpha_bar()[999] < 0.01);
    }

    #[test]
    fn two_step_product() {
        let s = make_schedule(2, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(), &[0.5, 0.25]);
    }

    #[test]
    fn invariants() {
        let s = NoiseSchedule::default();
        assert!(s.beta().windows(2).all(|w| w[0] <= w[1]));
        assert!(s.beta().iter().all(|&b| b > 0.0));
        assert!(s.alpha_bar().windows(2).all(|w| w[1] < w[0]));
        let sig: Vec<f64> = (0..s.steps()).map(|t| s.sigma_at(t).unwrap()).collect();
        assert!(sig.windows(2).all(|w| w[1] > w[0]));
        assert!((sig[0] - 0.01).abs() < 1e-12);
        let expected = (1.0 - alpha_bar_oracle(1000, 1e-4, 0.02, 999)).sqrt();
        assert!((sig[999] - expected).abs() < 1e-12);
        assert!((sig[999] - 0.99998).abs() < 1e-5);
    }

    #[test]
    fn bad_parameters() {
        assert!(matches!(make_schedule(1, 0.1, 0.2), Err(Error::Parameter(_))));
        assert!(matches!(make_schedule(10, 0.0, 0.2), Err(Error::Parameter(_))));
        assert!(matches!(make_schedule(10, 0.3, 0.2), Err(Error::Parameter(_))));
        assert!(matches!(make_schedule(10, 0.1, 1.0), Err(Error::Parameter(_))));
        let s = make_schedule(10, 0.1, 0.2).unwrap();
        assert!(matches!(s.sigma_at(10), Err(Error::Index { index: 10, len: 10 })));
    }

    #[test]
    fn q_sample_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = ImageTensor::uniform(4, 4, 2, &mut rng);
        let eps = ImageTensor::randn(4, 4, 2, &mut rng);
        // near-zero noise at the first step of a tiny-beta schedule
        let s = make_schedule(10, 1e-12, 1e-3).unwrap();
        assert!(s.q_sample(&x0, 0, &eps).unwrap().max_abs_diff(&x0) < 1e-5);
        // zero signal
        let zero = ImageTensor::zeros(4, 4, 2);
        let d = NoiseSchedule::default();
        let out = d.q_sample(&zero, 500, &eps).unwrap();
        let scaled = eps.map(|e| e * d.sigma_at(500).unwrap() as f32);
        assert!(out.max_abs_diff(&scaled) < 1e-7);
        assert!(matches!(
            d.q_sample(&x0, 0, &ImageTensor::zeros(4, 4, 1)),
            Err(Error::Shape { .. })
        ));
        // bit-exact determinism
        assert_eq!(d.q_sample(&x0, 321, &eps).unwrap(), d.q_sample(&x0, 321, &eps).unwrap());
    }

    #[test]
    fn variance_preservation_monte_carlo() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 20_000;
        for t in [0usize, 100, 400, 999] {
            let x0 = ImageTensor::randn(1, n, 1, &mut rng);
            let eps = ImageTensor::randn(1, n, 1, &mut rng);
            let xt = s.q_sample(&x0, t, &eps).unwrap();
            let mean = xt.mean();
            let var = xt.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            let ab = s.alpha_bar()[t];
            let expected = ab * 1.0 + (1.0 - ab);
            assert!((var - expected).abs() / expected < 0.03, "t={t} var={var}");
        }
    }
}
