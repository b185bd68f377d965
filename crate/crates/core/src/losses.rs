//! Training objectives. Each loss has an image-domain form returning `f64`
//! and a graph form used by the trainer; the two agree.

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::metrics;
use crate::networks::graph::tv_chw;
use crate::networks::layers::to_chw;
use crate::networks::{Graph, Scalar, Tensor, Var};
use crate::wavelet::DetailBands;

pub const DEFAULT_LAMBDA1: f64 = 0.1;
pub const DEFAULT_LAMBDA2: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Weight of the per-band MSE in the realness term.
    pub lambda1: f64,
    /// Weight of the per-band total variation in the realness term.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: DEFAULT_LAMBDA1,
            lambda2: DEFAULT_LAMBDA2,
        }
    }
}

fn mse(a: &ImageTensor, b: &ImageTensor, context: &'static str) -> Result<f64> {
    a.check_same_shape(b, context)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(s / a.len() as f64)
}

/// Noise-prediction MSE.
pub fn l_diff(eps: &ImageTensor, eps_hat: &ImageTensor) -> Result<f64> {
    mse(eps_hat, eps, "l_diff")
}

/// Anisotropic total variation (mean absolute row difference plus mean
/// absolute column difference, over all channels).
pub fn tv(x: &ImageTensor) -> f64 {
    let t: Tensor<f64> = to_chw(x);
    tv_chw(&t.data, t.shape[0], t.shape[1], t.shape[2])
}

pub fn l_realness(sr: &DetailBands, hr: &DetailBands, weights: LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for (s, h) in sr.iter().zip(hr.iter()) {
        total += weights.lambda1 * mse(s, h, "l_realness")? + weights.lambda2 * tv(s);
    }
    Ok(total)
}

/// MAE plus `1 - SSIM` between a reconstruction and the HR image.
pub fn l_consistent(pred: &ImageTensor, hr: &ImageTensor) -> Result<f64> {
    pred.check_same_shape(hr, "l_consistent")?;
    let mae: f64 = pred
        .data()
        .iter()
        .zip(hr.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum::<f64>()
        / pred.len() as f64;
    Ok(mae + 1.0 - metrics::ssim(pred, hr)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub l_diff: f64,
    pub l_realness: f64,
    pub l_consistent: f64,
}

impl LossTerms {
    pub fn total(&self) -> Result<f64> {
        l_total(self.l_diff, self.l_realness, self.l_consistent)
    }
}

pub fn l_total(l_diff: f64, l_realness: f64, l_consistent: f64) -> Result<f64> {
    let total = l_diff + l_realness + l_consistent;
    if !total.is_finite() {
        return Err(Error::Divergence {
            stage: "loss",
            step: 0,
            detail: format!("l_diff={l_diff} l_realness={l_realness} l_consistent={l_consistent}"),
        });
    }
    Ok(total)
}

pub fn graph_mse<T: Scalar>(g: &mut Graph<T>, x: Var, target: Var) -> Var {
    let d = g.sub(x, target);
    let sq = g.square(d);
    g.mean(sq)
}

/// Realness term over the three detail bands in `[C, H, W]` layout.
pub fn graph_realness<T: Scalar>(g: &mut Graph<T>, sr: [Var; 3], hr: [Var; 3], weights: LossWeights) -> Var {
    let mut terms = Vec::with_capacity(6);
    for (s, h) in sr.into_iter().zip(hr) {
        let m = graph_mse(g, s, h);
        terms.push(g.scale(m, T::of(weights.lambda1)));
        let t = g.tv(s);
        terms.push(g.scale(t, T::of(weights.lambda2)));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    acc
}

pub fn graph_consistent<T: Scalar>(g: &mut Graph<T>, pred: Var, hr: &Tensor<T>) -> Result<Var> {
    let target = g.input(hr.clone());
    let d = g.sub(pred, target);
    let a = g.abs(d);
    let mae = g.mean(a);
    let s = g.ssim(pred, hr, 1.0)?;
    let neg = g.scale(s, -T::one());
    let one_minus = g.add_const(neg, T::one());
    Ok(g.add(mae, one_minus))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bands(seed: u64) -> DetailBands {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DetailBands {
            v: ImageTensor::randn(8, 8, 3, &mut rng),
            h: ImageTensor::randn(8, 8, 3, &mut rng),
            d: ImageTensor::randn(8, 8, 3, &mut rng),
        }
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.lambda1, w.lambda2), (0.1, 2.0));
    }

    #[test]
    fn realness_of_identical_bands_is_tv_only() {
        let b = bands(1);
        let w = LossWeights::default();
        let expect: f64 = b.iter().map(|x| 2.0 * tv(x)).sum();
        assert!((l_realness(&b, &b, w).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn consistent_of_identical_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = ImageTensor::uniform(16, 16, 3, &mut rng);
        assert!(l_consistent(&x, &x).unwrap().abs() < 1e-12);
    }

    #[test]
    fn tv_of_ramp_and_constant() {
        assert_eq!(tv(&ImageTensor::filled(5, 5, 2, 0.3)), 0.0);
        let ramp = ImageTensor::from_fn(4, 6, 1, |_, c, _| 0.25 * c as f32);
        assert!((tv(&ramp) - 0.25).abs() < 1e-9);
    }

    #[test]
    fn l_diff_closed_form() {
        let a = ImageTensor::filled(2, 2, 1, 1.0);
        let b = ImageTensor::filled(2, 2, 1, 0.5);
        assert_eq!(l_diff(&a, &b).unwrap(), 0.25);
        let c = ImageTensor::zeros(2, 3, 1);
        assert!(matches!(l_diff(&a, &c), Err(Error::Shape { .. })));
    }

    #[test]
    fn total_rejects_non_finite() {
        assert_eq!(l_total(1.0, 2.0, 0.5).unwrap(), 3.5);
        assert!(matches!(l_total(1.0, f64::NAN, 0.0), Err(Error::Divergence { .. })));
        assert!(matches!(
            l_total(f64::INFINITY, 0.0, 0.0),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn graph_forms_match_image_forms() {
        let sr = bands(3);
        let hr = bands(4);
        let w = LossWeights::default();
        let mut g = Graph::<f64>::new();
        let s = [&sr.v, &sr.h, &sr.d].map(|b| g.input(to_chw(b)));
        let h = [&hr.v, &hr.h, &hr.d].map(|b| g.input(to_chw(b)));
        let r = graph_realness(&mut g, s, h, w);
        assert!((g.value(r).data[0] - l_realness(&sr, &hr, w).unwrap()).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ImageTensor::uniform(12, 12, 3, &mut rng);
        let q = ImageTensor::uniform(12, 12, 3, &mut rng);
        let pv = g.input(to_chw(&p));
        let c = graph_consistent(&mut g, pv, &to_chw(&q)).unwrap();
        assert!((g.value(c).data[0] - l_consistent(&p, &q).unwrap()).abs() < 1e-9);
    }
}
