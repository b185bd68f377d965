//! Trainable networks (denoiser, CSP encoder, CSHR), the non-learned HF
//! upscaler, and the differentiable graph they are built on.

pub mod attention;
pub mod cshr;
pub mod csp;
pub mod denoiser;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use attention::{cross_attention, CrossAttention};
pub use cshr::Cshr;
pub use csp::CspEncoder;
pub use denoiser::Denoiser;
pub use graph::{Graph, Var};
pub use params::ParamStore;
pub use tensor::{Scalar, Tensor};

use crate::data::resize::{bicubic_resize, bicubic_resize_unclamped};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::wavelet::{dwt2, DetailBands};
use layers::{from_chw, to_chw};

pub const DEFAULT_HEADS: usize = 12;

/// Network sizes. Everything is desk-scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub channels: usize,
    pub base_width: usize,
    pub temb_dim: usize,
    pub feat_width: usize,
    pub heads: usize,
    pub attn_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            channels: 3,
            base_width: 32,
            temb_dim: 32,
            feat_width: 24,
            heads: DEFAULT_HEADS,
            attn_dim: 48,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.base_width == 0 || self.feat_width == 0 {
            return Err(Error::Parameter("network widths must be positive".into()));
        }
        if self.temb_dim < 2 || self.temb_dim % 2 != 0 {
            return Err(Error::Parameter(format!(
                "step embedding dim must be even, got {}",
                self.temb_dim
            )));
        }
        if self.heads == 0 || self.attn_dim % self.heads != 0 {
            return Err(Error::Parameter(format!(
                "attention dim {} not divisible into {} heads",
                self.attn_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Conditioning tensors for one ×2 level: the LF band condition and the
/// optional `{V, H, D}` HF condition, all at target band shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub lf: ImageTensor,
    pub hf: Option<DetailBands>,
}

impl Condition {
    pub fn lf_only(lf: ImageTensor) -> Self {
        Condition { lf, hf: None }
    }
}

/// Architecture plus parameters of all three trainable networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub arch: ArchConfig,
    pub params: ParamStore<f32>,
}

impl Models {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        Denoiser::new(&arch).init(&mut params, &mut rng)?;
        CspEncoder::new(&arch).init(&mut params, &mut rng)?;
        Cshr::new(&arch).init(&mut params, &mut rng)?;
        Ok(Models { arch, params })
    }

    pub fn denoiser(&self) -> Denoiser {
        Denoiser::new(&self.arch)
    }

    pub fn csp(&self) -> CspEncoder {
        CspEncoder::new(&self.arch)
    }

    pub fn cshr(&self) -> Cshr {
        Cshr::new(&self.arch)
    }
}

/// Noise estimate for `x_t` at step `t` under `cond.lf`.
pub fn denoiser_forward(x_t: &ImageTensor, t: usize, cond: &Condition, models: &Models) -> Result<ImageTensor> {
    x_t.check_same_shape(&cond.lf, "denoiser condition")?;
    let mut g = Graph::<f32>::new();
    let x = g.input(to_chw(x_t));
    let c = g.input(to_chw(&cond.lf));
    let out = models.denoiser().forward(&mut g, &models.params, x, c, t)?;
    Ok(from_chw(g.value(out)))
}

/// Fixed (non-learned) inputs of the CSP encoder for an `h x w` input.
pub struct CspInputs<T> {
    pub lr: Tensor<T>,
    pub ref_bands: Tensor<T>,
    pub base_lf: Tensor<T>,
    pub base_hf: Tensor<T>,
}

fn stack<T: Scalar>(parts: &[&ImageTensor]) -> Tensor<T> {
    let mut shape = vec![0, parts[0].height(), parts[0].width()];
    let mut data = Vec::new();
    for p in parts {
        let t: Tensor<T> = to_chw(p);
        shape[0] += t.shape[0];
        data.extend(t.data);
    }
    Tensor::new(shape, data)
}

/// Upsample `lr` x2 with the plug-in SR (bicubic) and align `ref_img` to the
/// same grid; both are split into Haar bands at `lr`'s resolution.
pub fn csp_inputs<T: Scalar>(lr: &ImageTensor, ref_img: &ImageTensor) -> Result<CspInputs<T>> {
    let (h, w) = (lr.height(), lr.width());
    if ref_img.height() < h || ref_img.width() < w {
        return Err(Error::Precondition(format!(
            "reference {}x{} smaller than input {h}x{w}",
            ref_img.height(),
            ref_img.width()
        )));
    }
    if ref_img.channels() != lr.channels() {
        return Err(Error::shape(
            "csp reference channels",
            &[lr.channels()],
            &[ref_img.channels()],
        ));
    }
    let up = dwt2(&bicubic_resize(lr, 2 * h, 2 * w))?;
    let aligned = dwt2(&bicubic_resize(ref_img, 2 * h, 2 * w))?;
    Ok(CspInputs {
        lr: to_chw(lr),
        ref_bands: stack(&[&aligned.a, &aligned.v, &aligned.h, &aligned.d]),
        base_lf: to_chw(&up.a),
        base_hf: stack(&[&up.v, &up.h, &up.d]),
    })
}

fn split3(t: &Tensor<f32>) -> DetailBands {
    let c = t.shape[0] / 3;
    let n = t.numel() / 3;
    let part = |i: usize| Tensor::new(vec![c, t.shape[1], t.shape[2]], t.data[i * n..(i + 1) * n].to_vec());
    DetailBands {
        v: from_chw(&part(0)),
        h: from_chw(&part(1)),
        d: from_chw(&part(2)),
    }
}

/// Condition for the next ×2 level from the current input and a reference.
pub fn csp_encode(lr: &ImageTensor, ref_img: &ImageTensor, models: &Models) -> Result<Condition> {
    let inputs = csp_inputs::<f32>(lr, ref_img)?;
    let mut g = Graph::<f32>::new();
    let l = g.input(inputs.lr);
    let r = g.input(inputs.ref_bands);
    let bl = g.input(inputs.base_lf);
    let bh = g.input(inputs.base_hf);
    let out = models.csp().forward(&mut g, &models.params, l, r, bl, bh)?;
    Ok(Condition {
        lf: from_chw(g.value(out.lf)),
        hf: Some(split3(g.value(out.hf))),
    })
}

/// Mean of the restored ×2 detail bands.
pub fn cshr_restore(vhd_lr: &DetailBands, cond_hf: &DetailBands, models: &Models) -> Result<DetailBands> {
    vhd_lr.check_consistent("cshr detail bands")?;
    cond_hf.check_consistent("cshr condition bands")?;
    let mut g = Graph::<f32>::new();
    let lr = [&vhd_lr.v, &vhd_lr.h, &vhd_lr.d].map(|b| g.input(to_chw(b)));
    let cd = [&cond_hf.v, &cond_hf.h, &cond_hf.d].map(|b| g.input(to_chw(b)));
    let [v, h, d] = models.cshr().forward(&mut g, &models.params, lr, cd)?;
    Ok(DetailBands {
        v: from_chw(g.value(v)),
        h: from_chw(g.value(h)),
        d: from_chw(g.value(d)),
    })
}

/// Non-learned ×2 HF upscaler: bicubic per band, plus optional isotropic
/// Gaussian perturbation of std `sigma`.
pub fn upscale_hf<R: Rng + ?Sized>(vhd_lr: &DetailBands, sigma: f32, rng: &mut R) -> Result<DetailBands> {
    vhd_lr.check_consistent("upscale_hf")?;
    if !(sigma >= 0.0) {
        return Err(Error::Parameter(format!("hf noise std must be >= 0, got {sigma}")));
    }
    let [h, w, _] = vhd_lr.shape();
    let mut up = vhd_lr.map(|b| bicubic_resize_unclamped(b, 2 * h, 2 * w));
    if sigma > 0.0 {
        for band in [&mut up.v, &mut up.h, &mut up.d] {
            for v in band.data_mut() {
                *v += sigma * rng.sample::<f32, _>(StandardNormal);
            }
        }
    }
    Ok(up)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> ArchConfig {
        ArchConfig {
            channels: 3,
            base_width: 8,
            temb_dim: 8,
            feat_width: 8,
            heads: 2,
            attn_dim: 8,
        }
    }

    #[test]
    fn zero_head_denoiser_predicts_zero() {
        let m = Models::new(ArchConfig::default(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = ImageTensor::randn(16, 16, 3, &mut rng);
        let cond = Condition::lf_only(ImageTensor::uniform(16, 16, 3, &mut rng));
        let eps = denoiser_forward(&x, 500, &cond, &m).unwrap();
        assert!(eps.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn denoiser_shape_contract() {
        let mut m = Models::new(small_arch(), 2).unwrap();
        // non-zero head so the output is informative
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in &mut m.params.get_mut("den.out.w").unwrap().data {
            *v = rng.random_range(-0.1..0.1);
        }
        for n in [8, 16, 32, 64] {
            let x = ImageTensor::randn(n, n, 3, &mut rng);
            let cond = Condition::lf_only(ImageTensor::zeros(n, n, 3));
            let out = denoiser_forward(&x, 10, &cond, &m).unwrap();
            assert_eq!(out.shape(), [n, n, 3]);
            assert!(out.is_finite());
        }
        let x = ImageTensor::zeros(8, 8, 3);
        let bad = Condition::lf_only(ImageTensor::zeros(8, 4, 3));
        assert!(matches!(denoiser_forward(&x, 0, &bad, &m), Err(Error::Shape { .. })));
        let odd = ImageTensor::zeros(6, 8, 3);
        let c6 = Condition::lf_only(ImageTensor::zeros(6, 8, 3));
        assert!(matches!(
            denoiser_forward(&odd, 0, &c6, &m),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn csp_shapes_and_purity() {
        let m = Models::new(small_arch(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lr = ImageTensor::uniform(16, 16, 3, &mut rng);
        let rf = ImageTensor::uniform(24, 24, 3, &mut rng);
        let c1 = csp_encode(&lr, &rf, &m).unwrap();
        assert_eq!(c1.lf.shape(), [16, 16, 3]);
        assert_eq!(c1.hf.as_ref().unwrap().shape(), [16, 16, 3]);
        let c2 = csp_encode(&lr, &rf, &m).unwrap();
        assert_eq!(c1, c2);
        let small_ref = ImageTensor::uniform(12, 12, 3, &mut rng);
        assert!(matches!(csp_encode(&lr, &small_ref, &m), Err(Error::Precondition(_))));
    }

    #[test]
    fn csp_zero_heads_reproduce_plugin_bands() {
        let m = Models::new(small_arch(), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let lr = ImageTensor::uniform(8, 8, 3, &mut rng);
        let rf = ImageTensor::uniform(12, 12, 3, &mut rng);
        let cond = csp_encode(&lr, &rf, &m).unwrap();
        let up = dwt2(&bicubic_resize(&lr, 16, 16)).unwrap();
        assert!(cond.lf.max_abs_diff(&up.a) < 1e-6);
        assert!(cond.hf.unwrap().d.max_abs_diff(&up.d) < 1e-6);
    }

    #[test]
    fn cshr_doubles_resolution() {
        let m = Models::new(small_arch(), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lr = DetailBands {
            v: ImageTensor::randn(4, 6, 3, &mut rng),
            h: ImageTensor::randn(4, 6, 3, &mut rng),
            d: ImageTensor::randn(4, 6, 3, &mut rng),
        };
        // zero head and zero condition: zero detail bands
        let zero = DetailBands::zeros(8, 12, 3);
        let out = cshr_restore(&lr, &zero, &m).unwrap();
        assert_eq!(out.shape(), [8, 12, 3]);
        assert!(out.iter().all(|b| b.data().iter().all(|&v| v == 0.0)));
        let bad = DetailBands::zeros(8, 8, 3);
        assert!(matches!(cshr_restore(&lr, &bad, &m), Err(Error::Shape { .. })));
    }

    #[test]
    fn upscale_hf_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = DetailBands {
            v: ImageTensor::filled(4, 4, 2, 0.3),
            h: ImageTensor::filled(4, 4, 2, -0.2),
            d: ImageTensor::filled(4, 4, 2, 0.0),
        };
        let up = upscale_hf(&c, 0.0, &mut rng).unwrap();
        assert_eq!(up.shape(), [8, 8, 2]);
        assert!(up.v.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
        assert!(up.h.data().iter().all(|&v| (v + 0.2).abs() < 1e-6));
        assert_eq!(up, upscale_hf(&c, 0.0, &mut rng).unwrap());
        let noisy = upscale_hf(&c, 0.1, &mut rng).unwrap();
        assert!(noisy.d.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn upscale_hf_preserves_ramp() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ramp = ImageTensor::from_fn(8, 8, 1, |r, _, _| 0.05 * r as f32 - 0.2);
        let b = DetailBands {
            v: ramp.clone(),
            h: ramp.clone(),
            d: ramp,
        };
        let up = upscale_hf(&b, 0.0, &mut rng).unwrap();
        for r in 4..12 {
            let src = (r as f32 + 0.5) / 2.0 - 0.5;
            for c in 0..16 {
                assert!((up.v.get(r, c, 0) - (0.05 * src - 0.2)).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn arch_validation() {
        let mut a = ArchConfig::default();
        assert!(a.validate().is_ok());
        a.attn_dim = 50;
        assert!(matches!(a.validate(), Err(Error::Parameter(_))));
        assert!(Models::new(a, 0).is_err());
    }
}
