//! Ancestral sampling of the LF band with convex-mix projection onto the
//! (optionally noised) condition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::networks::{denoiser_forward, Condition, Models};
use crate::schedule::NoiseSchedule;

pub const DEFAULT_LAMBDA_MIX: f64 = 0.5;

/// Anything that predicts the noise in `x_t`.
pub trait EpsModel {
    fn predict(&self, x_t: &ImageTensor, t: usize, cond: &Condition) -> Result<ImageTensor>;
}

/// The trained denoiser.
pub struct NetworkEps<'a> {
    pub models: &'a Models,
}

impl EpsModel for NetworkEps<'_> {
    fn predict(&self, x_t: &ImageTensor, t: usize, cond: &Condition) -> Result<ImageTensor> {
        denoiser_forward(x_t, t, cond, self.models)
    }
}

/// Exact noise predictor when every pixel of `x_0` is i.i.d. `N(mean, var)`.
pub struct GaussianOracle {
    pub mean: f64,
    pub var: f64,
    alpha_bar: Vec<f64>,
}

impl GaussianOracle {
    pub fn new(mean: f64, var: f64, sched: &NoiseSchedule) -> Result<Self> {
        if !(var >= 0.0) || !mean.is_finite() {
            return Err(Error::Parameter(format!("invalid gaussian mean {mean} / var {var}")));
        }
        Ok(GaussianOracle {
            mean,
            var,
            alpha_bar: sched.alpha_bar().to_vec(),
        })
    }
}

/// `E[eps | x_t]` for a Gaussian `x_0 ~ N(mean, var)`.
pub fn analytic_gaussian_eps(x_t: f64, alpha_bar: f64, mean: f64, var: f64) -> f64 {
    (1.0 - alpha_bar).sqrt() * (x_t - alpha_bar.sqrt() * mean) / (alpha_bar * var + 1.0 - alpha_bar)
}

impl EpsModel for GaussianOracle {
    fn predict(&self, x_t: &ImageTensor, t: usize, _cond: &Condition) -> Result<ImageTensor> {
        let ab = *self.alpha_bar.get(t).ok_or(Error::Index {
            index: t,
            len: self.alpha_bar.len(),
        })?;
        Ok(x_t.map(|v| analytic_gaussian_eps(v as f64, ab, self.mean, self.var) as f32))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionParams {
    /// Weight of the condition in the convex mix; 0 disables projection.
    pub lambda_mix: f64,
    /// Noise the condition to the current level before mixing.
    pub match_noise: bool,
}

impl Default for ProjectionParams {
    fn default() -> Self {
        ProjectionParams {
            lambda_mix: DEFAULT_LAMBDA_MIX,
            match_noise: true,
        }
    }
}

impl ProjectionParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_mix) {
            return Err(Error::Parameter(format!(
                "mixing weight must lie in [0, 1], got {}",
                self.lambda_mix
            )));
        }
        Ok(())
    }
}

/// One unconditional ancestral step from `x_t` to `x_{t-1}`. `z` is ignored
/// at `t = 0`.
pub fn reverse_step_uncond(
    x_t: &ImageTensor,
    t: usize,
    eps_hat: &ImageTensor,
    z: Option<&ImageTensor>,
    sched: &NoiseSchedule,
) -> Result<ImageTensor> {
    sched.check_step(t)?;
    x_t.check_same_shape(eps_hat, "reverse step noise estimate")?;
    let alpha = sched.alpha()[t];
    let beta = sched.beta()[t];
    let ab = sched.alpha_bar()[t];
    let a = 1.0 / alpha.sqrt();
    let b = a * beta / (1.0 - ab).sqrt();
    let mut out: Vec<f32> = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&x, &e)| (a * x as f64 - b * e as f64) as f32)
        .collect();
    if t > 0 {
        if let Some(z) = z {
            x_t.check_same_shape(z, "reverse step noise")?;
            let s = beta.sqrt();
            for (o, &n) in out.iter_mut().zip(z.data()) {
                *o = (*o as f64 + s * n as f64) as f32;
            }
        }
    }
    ImageTensor::new(x_t.height(), x_t.width(), x_t.channels(), out)
}

/// Convex mix of the step output `x_prev` (at level `t - 1`) with the
/// condition. With `match_noise` the condition is pushed to level `t - 1`
/// using `noise`; at `t = 0` the raw condition is used.
pub fn apply_projection(
    x_prev: &ImageTensor,
    cond_lf: &ImageTensor,
    t: usize,
    params: &ProjectionParams,
    sched: &NoiseSchedule,
    noise: Option<&ImageTensor>,
) -> Result<ImageTensor> {
    params.validate()?;
    sched.check_step(t)?;
    let lambda = params.lambda_mix as f32;
    if lambda == 0.0 {
        return Ok(x_prev.clone());
    }
    let target = if params.match_noise && t > 0 {
        let noise = noise.ok_or_else(|| Error::Precondition("noise-matched projection needs a noise draw".into()))?;
        sched.q_sample(cond_lf, t - 1, noise)?
    } else {
        cond_lf.clone()
    };
    x_prev.axpby(1.0 - lambda, &target, lambda)
}

/// Draw an LF band by running the reverse chain from `x_{T-1}` down to `x_0`.
pub fn sample_conditional(
    cond: &Condition,
    model: &dyn EpsModel,
    sched: &NoiseSchedule,
    params: &ProjectionParams,
    seed: u64,
) -> Result<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_conditional_with_rng(cond, model, sched, params, &mut rng)
}

pub fn sample_conditional_with_rng<R: Rng + ?Sized>(
    cond: &Condition,
    model: &dyn EpsModel,
    sched: &NoiseSchedule,
    params: &ProjectionParams,
    rng: &mut R,
) -> Result<ImageTensor> {
    params.validate()?;
    let [h, w, c] = cond.lf.shape();
    let mut x = ImageTensor::randn(h, w, c, rng);
    for t in (0..sched.steps()).rev() {
        let eps = model.predict(&x, t, cond)?;
        let z = (t > 0).then(|| ImageTensor::randn(h, w, c, rng));
        let stepped = reverse_step_uncond(&x, t, &eps, z.as_ref(), sched)?;
        let noise = (params.lambda_mix > 0.0 && params.match_noise && t > 0).then(|| ImageTensor::randn(h, w, c, rng));
        x = apply_projection(&stepped, &cond.lf, t, params, sched, noise.as_ref())?;
        if !x.is_finite() {
            return Err(Error::Divergence {
                stage: "sampler",
                step: t,
                detail: "non-finite value in the reverse chain".into(),
            });
        }
    }
    Ok(x)
}
