//! Separable Catmull-Rom (`a = -0.5`) resampling with clamped edges.
//! Downscaling widens the kernel by the scale factor (antialiasing).

use crate::image::ImageTensor;

pub const CUBIC_A: f64 = -0.5;

pub fn cubic_kernel(x: f64) -> f64 {
    let x = x.abs();
    let a = CUBIC_A;
    if x < 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Source taps and normalized weights for each output index.
fn contributions(n_in: usize, n_out: usize) -> Vec<(Vec<usize>, Vec<f64>)> {
    let scale = n_in as f64 / n_out as f64;
    let stretch = scale.max(1.0);
    let support = 2.0 * stretch;
    (0..n_out)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut idx = Vec::new();
            let mut wts = Vec::new();
            for j in lo..=hi {
                let w = cubic_kernel((j as f64 - center) / stretch);
                if w != 0.0 {
                    idx.push(j.clamp(0, n_in as isize - 1) as usize);
                    wts.push(w);
                }
            }
            let s: f64 = wts.iter().sum();
            wts.iter_mut().for_each(|w| *w /= s);
            (idx, wts)
        })
        .collect()
}

fn resample(img: &ImageTensor, out_h: usize, out_w: usize) -> ImageTensor {
    assert!(out_h >= 1 && out_w >= 1, "output dims must be positive");
    let [h, w, c] = img.shape();
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let cols = contributions(w, out_w);
    let rows = contributions(h, out_h);
    // horizontal pass in f64
    let mut tmp = vec![0.0f64; h * out_w * c];
    for r in 0..h {
        for (oc, (idx, wts)) in cols.iter().enumerate() {
            for ch in 0..c {
                let mut acc = 0.0;
                for (&j, &wt) in idx.iter().zip(wts) {
                    acc += wt * img.get(r, j, ch) as f64;
                }
                tmp[(r * out_w + oc) * c + ch] = acc;
            }
        }
    }
    let mut out = ImageTensor::zeros(out_h, out_w, c);
    for (or, (idx, wts)) in rows.iter().enumerate() {
        for oc in 0..out_w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (&j, &wt) in idx.iter().zip(wts) {
                    acc += wt * tmp[(j * out_w + oc) * c + ch];
                }
                out.set(or, oc, ch, acc as f32);
            }
        }
    }
    out
}

/// Bicubic resize of a pixel-domain image; output clamped to `[0, 1]`.
pub fn bicubic_resize(img: &ImageTensor, out_h: usize, out_w: usize) -> ImageTensor {
    let out = resample(img, out_h, out_w);
    if (img.height(), img.width()) == (out_h, out_w) {
        out
    } else {
        out.clamp01()
    }
}

/// Bicubic resize without clamping, for wavelet bands and latents.
pub fn bicubic_resize_unclamped(img: &ImageTensor, out_h: usize, out_w: usize) -> ImageTensor {
    resample(img, out_h, out_w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_values() {
        assert_eq!(cubic_kernel(0.0), 1.0);
        assert_eq!(cubic_kernel(1.0), 0.0);
        assert_eq!(cubic_kernel(2.0), 0.0);
        assert!((cubic_kernel(0.5) - 0.5625).abs() < 1e-12);
        assert!((cubic_kernel(1.5) + 0.0625).abs() < 1e-12);
    }

    #[test]
    fn identity_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = ImageTensor::uniform(9, 7, 3, &mut rng);
        assert_eq!(bicubic_resize(&img, 9, 7), img);
    }

    #[test]
    fn constant_any_size() {
        let img = ImageTensor::filled(8, 8, 2, 0.37);
        for (h, w) in [(16, 16), (4, 4), (12, 5), (1, 1), (33, 17)] {
            let out = bicubic_resize(&img, h, w);
            assert!(out.data().iter().all(|&v| (v - 0.37).abs() < 1e-6), "{h}x{w}");
        }
    }

    #[test]
    fn bilinear_ramp_down_up() {
        // f(r, c) = 0.2 + 0.01 r + 0.005 c on a 32x32 grid
        let f = |r: f64, c: f64| 0.2 + 0.01 * r + 0.005 * c;
        let img = ImageTensor::from_fn(32, 32, 1, |r, c, _| f(r as f64, c as f64) as f32);
        let back = bicubic_resize(&bicubic_resize(&img, 16, 16), 32, 32);
        let mut worst = 0.0f32;
        for r in 6..26 {
            for c in 6..26 {
                worst = worst.max((back.get(r, c, 0) - img.get(r, c, 0)).abs());
            }
        }
        assert!(worst < 1e-3, "max interior error {worst}");
    }

    #[test]
    fn upsampled_ramp_is_ramp() {
        let s = 0.1f32;
        let img = ImageTensor::from_fn(8, 8, 1, |_, c, _| s * c as f32);
        let up = bicubic_resize_unclamped(&img, 16, 16);
        for r in 0..16 {
            for c in 4..12 {
                let src = (c as f32 + 0.5) / 2.0 - 0.5;
                assert!((up.get(r, c, 0) - s * src).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn clamps_pixel_domain() {
        let img = ImageTensor::from_fn(8, 8, 1, |r, c, _| if (r + c) % 2 == 0 { 1.0 } else { 0.0 });
        let up = bicubic_resize(&img, 16, 16);
        assert!(up.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
