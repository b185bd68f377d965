//! Procedural remote-sensing-like scenes: oriented sinusoids over a Voronoi
//! patchwork, plus a little noise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::resize::bicubic_resize;
use super::SamplePair;
use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const CHANNELS: usize = 3;
const NOISE_STD: f64 = 0.01;

/// One HR scene in `[0, 1]`.
pub fn synthetic_scene<R: Rng + ?Sized>(size: usize, rng: &mut R) -> ImageTensor {
    let waves: Vec<_> = (0..rng.random_range(3..=6))
        .map(|_| {
            let theta = rng.random_range(0.0..PI);
            let cycles = rng.random_range(1.0..(size as f64 / 4.0).max(1.5));
            let freq = 2.0 * PI * cycles / size as f64;
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp: [f64; CHANNELS] = std::array::from_fn(|_| rng.random_range(0.2..1.0));
            (freq * theta.cos(), freq * theta.sin(), phase, amp)
        })
        .collect();
    let sites: Vec<_> = (0..rng.random_range(4..=10))
        .map(|_| {
            let y = rng.random_range(0.0..size as f64);
            let x = rng.random_range(0.0..size as f64);
            let colour: [f64; CHANNELS] = std::array::from_fn(|_| rng.random_range(-1.5..1.5));
            (y, x, colour)
        })
        .collect();
    let mut raw = vec![0.0f64; size * size * CHANNELS];
    for r in 0..size {
        for c in 0..size {
            let (y, x) = (r as f64, c as f64);
            let nearest = sites
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - y).powi(2) + (a.1 - x).powi(2);
                    let db = (b.0 - y).powi(2) + (b.1 - x).powi(2);
                    da.total_cmp(&db)
                })
                .expect("at least one site");
            for ch in 0..CHANNELS {
                let mut v = nearest.2[ch];
                for (fy, fx, phase, amp) in &waves {
                    v += amp[ch] * (fy * y + fx * x + phase).sin();
                }
                raw[(r * size + c) * CHANNELS + ch] = v;
            }
        }
    }
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let data = raw
        .iter()
        .map(|&v| {
            let n: f64 = rng.sample(StandardNormal);
            ((v - lo) / span + NOISE_STD * n).clamp(0.0, 1.0) as f32
        })
        .collect();
    ImageTensor::new(size, size, CHANNELS, data).expect("consistent scene size")
}

/// LR by `d` repeated x2 bicubic downscales.
pub fn degrade(hr: &ImageTensor, d: u32) -> ImageTensor {
    let mut img = hr.clone();
    for _ in 0..d {
        img = bicubic_resize(&img, img.height() / 2, img.width() / 2);
    }
    img
}

/// Reference view at 1.5x the LR size, taken straight from the HR scene.
pub fn reference_view(hr: &ImageTensor, lr_h: usize, lr_w: usize) -> ImageTensor {
    bicubic_resize(hr, lr_h * 3 / 2, lr_w * 3 / 2)
}

pub fn make_synthetic_dataset(seed: u64, n: usize, hr_size: usize, d: u32) -> Result<Vec<SamplePair>> {
    if n == 0 {
        return Err(Error::Parameter("dataset size must be >= 1".into()));
    }
    let factor = 1usize
        .checked_shl(d)
        .filter(|&f| f <= hr_size)
        .ok_or_else(|| Error::Parameter(format!("hr size {hr_size} too small for {d} x2 levels")))?;
    let lr_size = hr_size / factor;
    if hr_size % factor != 0 || lr_size < 2 || lr_size % 2 != 0 {
        return Err(Error::Parameter(format!(
            "hr size {hr_size} must be an even LR size times 2^{d}"
        )));
    }
    let width = n.to_string().len().max(4);
    Ok((0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let hr = synthetic_scene(hr_size, &mut rng);
            let lr = degrade(&hr, d);
            let reference = reference_view(&hr, lr_size, lr_size);
            SamplePair {
                id: format!("{i:0width$}"),
                lr,
                reference,
                hr,
            }
        })
        .collect())
}
