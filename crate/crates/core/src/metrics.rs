//! Full-reference quality metrics: PSNR, SSIM, SAM, SRE and the
//! no-reference average gradient (AG).
//!
//! Conventions:
//! * PSNR is capped at [`PSNR_CAP`] dB when the MSE is zero.
//! * SSIM uses uniform 8x8 windows at stride 1 with population statistics,
//!   `C1 = (0.01 peak)^2`, `C2 = (0.03 peak)^2`, averaged over windows and
//!   channels.
//! * SAM is the mean per-pixel spectral angle in degrees; pixels where either
//!   spectrum has zero norm are skipped.
//! * SRE is `100 * mean_px ||g - p|| / (||g|| + 1e-8)` (percent, lower is better).
//! * AG is the mean of `sqrt((gx^2 + gy^2) / 2)` over pixels with both forward
//!   neighbours.

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::networks::Scalar;

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 8;
pub const SRE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    /// NaN when the angle is undefined (single channel or all-zero spectra).
    pub sam: f64,
    pub sre: f64,
    pub ag: f64,
}

/// All metrics of `pred` against `gt` in the `[0, 1]` pixel domain.
pub fn evaluate(pred: &ImageTensor, gt: &ImageTensor) -> Result<MetricReport> {
    pred.check_same_shape(gt, "metrics")?;
    Ok(MetricReport {
        psnr: psnr(pred, gt, 1.0)?,
        ssim: ssim(pred, gt)?,
        sam: sam(pred, gt).unwrap_or(f64::NAN),
        sre: sre(pred, gt)?,
        ag: ag(pred),
    })
}

pub fn mse(pred: &ImageTensor, gt: &ImageTensor) -> Result<f64> {
    pred.check_same_shape(gt, "mse")?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| (p as f64 - g as f64).powi(2))
        .sum();
    Ok(s / pred.len() as f64)
}

pub fn psnr(pred: &ImageTensor, gt: &ImageTensor, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::Parameter(format!("psnr peak must be positive, got {peak}")));
    }
    let m = mse(pred, gt)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP))
}

fn planes_f64(img: &ImageTensor) -> Vec<f64> {
    let [h, w, c] = img.shape();
    let mut out = vec![0.0; h * w * c];
    for (i, &v) in img.data().iter().enumerate() {
        out[(i % c) * h * w + i / c] = v as f64;
    }
    out
}

/// Mean SSIM with peak 1.
pub fn ssim(pred: &ImageTensor, gt: &ImageTensor) -> Result<f64> {
    ssim_with_peak(pred, gt, 1.0)
}

pub fn ssim_with_peak(pred: &ImageTensor, gt: &ImageTensor, peak: f64) -> Result<f64> {
    pred.check_same_shape(gt, "ssim")?;
    let [h, w, c] = pred.shape();
    let (v, _) = ssim_planes::<f64>(&planes_f64(pred), &planes_f64(gt), c, h, w, peak, false)?;
    Ok(v)
}

/// Summed-area table with a zero border: `(h+1) x (w+1)`.
fn integral(f: impl Fn(usize) -> f64, h: usize, w: usize) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += f(y * w + x);
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

fn box_sum(s: &[f64], w: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> f64 {
    // inclusive-exclusive rectangle [y0, y1) x [x0, x1)
    let ww = w + 1;
    s[y1 * ww + x1] - s[y0 * ww + x1] - s[y1 * ww + x0] + s[y0 * ww + x0]
}

/// SSIM over `planes` channel planes of `h x w`, stored plane-major. Returns
/// the mean SSIM and, when requested, its gradient with respect to `x`.
/// Shared by the metric and the differentiable consistency loss.
pub(crate) fn ssim_planes<T: Scalar>(
    x: &[T],
    y: &[T],
    planes: usize,
    h: usize,
    w: usize,
    peak: f64,
    want_grad: bool,
) -> Result<(T, Option<Vec<T>>)> {
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::Parameter(format!(
            "image {h}x{w} smaller than the {k}x{k} SSIM window"
        )));
    }
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let n = (k * k) as f64;
    let (wh, ww) = (h - k + 1, w - k + 1);
    let total_windows = (wh * ww * planes) as f64;
    let hw = h * w;
    let mut sum = 0.0;
    let mut grad = if want_grad {
        Some(vec![T::zero(); x.len()])
    } else {
        None
    };
    for p in 0..planes {
        let xs = &x[p * hw..(p + 1) * hw];
        let ys = &y[p * hw..(p + 1) * hw];
        let xf = |i: usize| xs[i].to_f64().unwrap();
        let yf = |i: usize| ys[i].to_f64().unwrap();
        let sx = integral(xf, h, w);
        let sy = integral(yf, h, w);
        let sxx = integral(|i| xf(i) * xf(i), h, w);
        let syy = integral(|i| yf(i) * yf(i), h, w);
        let sxy = integral(|i| xf(i) * yf(i), h, w);
        let mut coef_a = vec![0.0; wh * ww];
        let mut coef_b = vec![0.0; wh * ww];
        let mut coef_c = vec![0.0; wh * ww];
        for wy in 0..wh {
            for wx in 0..ww {
                let bs = |s: &[f64]| box_sum(s, w, wy, wx, wy + k, wx + k) / n;
                let mx = bs(&sx);
                let my = bs(&sy);
                let vx = bs(&sxx) - mx * mx;
                let vy = bs(&syy) - my * my;
                let cxy = bs(&sxy) - mx * my;
                let a1 = 2.0 * mx * my + c1;
                let a2 = 2.0 * cxy + c2;
                let b1 = mx * mx + my * my + c1;
                let b2 = vx + vy + c2;
                let s = a1 * a2 / (b1 * b2);
                sum += s;
                if want_grad {
                    let d_mx = s * (2.0 * my / a1 - 2.0 * mx / b1);
                    let d_vx = -s / b2;
                    let d_cxy = 2.0 * s / a2;
                    let i = wy * ww + wx;
                    coef_a[i] = d_mx - 2.0 * mx * d_vx - my * d_cxy;
                    coef_b[i] = 2.0 * d_vx;
                    coef_c[i] = d_cxy;
                }
            }
        }
        if let Some(g) = grad.as_mut() {
            let ia = integral(|i| coef_a[i], wh, ww);
            let ib = integral(|i| coef_b[i], wh, ww);
            let ic = integral(|i| coef_c[i], wh, ww);
            let scale = 1.0 / (n * total_windows);
            for py in 0..h {
                let y0 = py.saturating_sub(k - 1);
                let y1 = (py + 1).min(wh);
                for px in 0..w {
                    let x0 = px.saturating_sub(k - 1);
                    let x1 = (px + 1).min(ww);
                    if y0 >= y1 || x0 >= x1 {
                        continue;
                    }
                    let i = py * w + px;
                    let v = box_sum(&ia, ww, y0, x0, y1, x1)
                        + xf(i) * box_sum(&ib, ww, y0, x0, y1, x1)
                        + yf(i) * box_sum(&ic, ww, y0, x0, y1, x1);
                    g[p * hw + i] = T::of(v * scale);
                }
            }
        }
    }
    Ok((T::of(sum / total_windows), grad))
}

/// SAM result with the number of skipped zero-norm pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamDetail {
    pub degrees: f64,
    pub skipped: usize,
}

pub fn sam(pred: &ImageTensor, gt: &ImageTensor) -> Result<f64> {
    sam_detail(pred, gt).map(|d| d.degrees)
}

pub fn sam_detail(pred: &ImageTensor, gt: &ImageTensor) -> Result<SamDetail> {
    pred.check_same_shape(gt, "sam")?;
    let c = pred.channels();
    if c < 2 {
        return Err(Error::UndefinedMetric(format!(
            "spectral angle needs >= 2 channels, got {c}"
        )));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for (p, g) in pred.data().chunks(c).zip(gt.data().chunks(c)) {
        let (mut np, mut ng) = (0.0f64, 0.0f64);
        for (&a, &b) in p.iter().zip(g) {
            let (a, b) = (a as f64, b as f64);
            np += a * a;
            ng += b * b;
        }
        if np == 0.0 || ng == 0.0 {
            skipped += 1;
            continue;
        }
        // 2 atan2(|p^ - g^|, |p^ + g^|): well conditioned near zero and
        // exactly zero for identical spectra
        let (np, ng) = (np.sqrt(), ng.sqrt());
        let (mut diff, mut sum) = (0.0f64, 0.0f64);
        for (&a, &b) in p.iter().zip(g) {
            let (a, b) = (a as f64 / np, b as f64 / ng);
            diff += (a - b) * (a - b);
            sum += (a + b) * (a + b);
        }
        total += 2.0 * diff.sqrt().atan2(sum.sqrt());
        used += 1;
    }
    if used == 0 {
        return Err(Error::UndefinedMetric("every pixel has a zero-norm spectrum".into()));
    }
    Ok(SamDetail {
        degrees: (total / used as f64).to_degrees(),
        skipped,
    })
}

pub fn sre(pred: &ImageTensor, gt: &ImageTensor) -> Result<f64> {
    pred.check_same_shape(gt, "sre")?;
    let c = pred.channels();
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, g) in pred.data().chunks(c).zip(gt.data().chunks(c)) {
        let mut diff = 0.0f64;
        let mut norm = 0.0f64;
        for (&a, &b) in p.iter().zip(g) {
            diff += (b as f64 - a as f64).powi(2);
            norm += (b as f64).powi(2);
        }
        total += diff.sqrt() / (norm.sqrt() + SRE_EPS);
        count += 1;
    }
    Ok(100.0 * total / count as f64)
}

pub fn ag(img: &ImageTensor) -> f64 {
    let [h, w, c] = img.shape();
    if h < 2 || w < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for r in 0..h - 1 {
        for col in 0..w - 1 {
            for ch in 0..c {
                let v = img.get(r, col, ch) as f64;
                let gx = img.get(r, col + 1, ch) as f64 - v;
                let gy = img.get(r + 1, col, ch) as f64 - v;
                total += ((gx * gx + gy * gy) / 2.0).sqrt();
            }
        }
    }
    total / ((h - 1) * (w - 1) * c) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct window-by-window SSIM, no integral images.
    fn ssim_oracle(x: &ImageTensor, y: &ImageTensor) -> f64 {
        let [h, w, c] = x.shape();
        let k = SSIM_WINDOW;
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        let mut count = 0.0;
        for ch in 0..c {
            for wy in 0..=h - k {
                for wx in 0..=w - k {
                    let mut px = Vec::new();
                    let mut py = Vec::new();
                    for dy in 0..k {
                        for dx in 0..k {
                            px.push(x.get(wy + dy, wx + dx, ch) as f64);
                            py.push(y.get(wy + dy, wx + dx, ch) as f64);
                        }
                    }
                    let n = px.len() as f64;
                    let mx = px.iter().sum::<f64>() / n;
                    let my = py.iter().sum::<f64>() / n;
                    let vx = px.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
                    let vy = py.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
                    let cxy = px.iter().zip(&py).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
                    total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1.0;
                }
            }
        }
        total / count
    }

    fn pair(seed: u64, h: usize, w: usize, c: usize) -> (ImageTensor, ImageTensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = ImageTensor::uniform(h, w, c, &mut rng);
        let noise = ImageTensor::uniform(h, w, c, &mut rng);
        let b = a.axpby(0.7, &noise, 0.3).unwrap();
        (a, b)
    }

    #[test]
    fn psnr_cases() {
        let (a, b) = pair(1, 8, 8, 3);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        let gt = ImageTensor::filled(4, 4, 1, 0.25);
        let pred = ImageTensor::filled(4, 4, 1, 0.35);
        assert!((psnr(&pred, &gt, 1.0).unwrap() - 20.0).abs() < 1e-5);
        let mut naive = 0.0;
        for r in 0..8 {
            for c in 0..8 {
                for ch in 0..3 {
                    naive += (a.get(r, c, ch) as f64 - b.get(r, c, ch) as f64).powi(2);
                }
            }
        }
        let expect = 10.0 * (1.0 / (naive / 192.0)).log10();
        assert!((psnr(&a, &b, 1.0).unwrap() - expect).abs() < 1e-6);
        assert!(matches!(psnr(&a, &b, 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn ssim_matches_window_oracle() {
        for seed in 0..5 {
            let (a, b) = pair(seed, 12, 10, 2);
            let fast = ssim(&a, &b).unwrap();
            assert!((fast - ssim_oracle(&a, &b)).abs() < 1e-9);
            assert!((fast - ssim(&b, &a).unwrap()).abs() < 1e-9);
        }
        let (a, _) = pair(9, 9, 9, 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_checkerboard_inverted_is_negative() {
        let board = ImageTensor::from_fn(8, 8, 1, |r, c, _| ((r + c) % 2) as f32);
        let inv = board.map(|v| 1.0 - v);
        assert!(ssim(&inv, &board).unwrap() < 0.0);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let (p, g) = (0.2f64, 0.6f64);
        let pred = ImageTensor::filled(8, 8, 1, p as f32);
        let gt = ImageTensor::filled(8, 8, 1, g as f32);
        let c1 = 1e-4;
        let p = p as f32 as f64;
        let g = g as f32 as f64;
        let expect = (2.0 * p * g + c1) / (p * p + g * g + c1);
        assert!((ssim(&pred, &gt).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn ssim_small_image_rejected() {
        let a = ImageTensor::zeros(7, 10, 1);
        assert!(matches!(ssim(&a, &a), Err(Error::Parameter(_))));
    }

    #[test]
    fn ssim_gradient_matches_differences() {
        let (a, b) = pair(3, 10, 9, 2);
        let xa = planes_f64(&a);
        let xb = planes_f64(&b);
        let (_, g) = ssim_planes::<f64>(&xa, &xb, 2, 10, 9, 1.0, true).unwrap();
        let g = g.unwrap();
        let h = 1e-5;
        for i in (0..xa.len()).step_by(7) {
            let mut p = xa.clone();
            p[i] += h;
            let lp = ssim_planes::<f64>(&p, &xb, 2, 10, 9, 1.0, false).unwrap().0;
            p[i] -= 2.0 * h;
            let lm = ssim_planes::<f64>(&p, &xb, 2, 10, 9, 1.0, false).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - g[i]).abs() <= 1e-6 * fd.abs().max(1e-3),
                "i={i} fd={fd} an={}",
                g[i]
            );
        }
    }

    #[test]
    fn sam_cases() {
        let (a, _) = pair(2, 5, 5, 3);
        let scaled = a.map(|v| 2.5 * v);
        assert!(sam(&scaled, &a).unwrap().abs() < 1e-6);
        assert_eq!(sam(&a, &a).unwrap(), 0.0);
        let x = ImageTensor::from_fn(2, 2, 3, |_, _, ch| (ch == 0) as u8 as f32);
        let y = ImageTensor::from_fn(2, 2, 3, |_, _, ch| (ch == 1) as u8 as f32);
        assert!((sam(&x, &y).unwrap() - 90.0).abs() < 1e-9);
        let z = ImageTensor::zeros(2, 2, 3);
        assert!(matches!(sam(&z, &y), Err(Error::UndefinedMetric(_))));
        let gray = ImageTensor::zeros(2, 2, 1);
        assert!(matches!(sam(&gray, &gray), Err(Error::UndefinedMetric(_))));
        let mut partial = x.clone();
        for ch in 0..3 {
            partial.set(0, 0, ch, 0.0);
        }
        let d = sam_detail(&partial, &y).unwrap();
        assert_eq!(d.skipped, 1);
        assert!((d.degrees - 90.0).abs() < 1e-9);
    }

    #[test]
    fn sre_cases() {
        let (a, _) = pair(4, 6, 6, 3);
        assert_eq!(sre(&a, &a).unwrap(), 0.0);
        let gt = ImageTensor::filled(3, 3, 3, 0.5);
        let zero = ImageTensor::zeros(3, 3, 3);
        assert!((sre(&zero, &gt).unwrap() - 100.0).abs() < 1e-5);
    }

    #[test]
    fn ag_cases() {
        assert_eq!(ag(&ImageTensor::filled(5, 5, 2, 0.4)), 0.0);
        let s = 0.03;
        let ramp = ImageTensor::from_fn(6, 7, 1, |_, c, _| s * c as f32);
        assert!((ag(&ramp) - (s as f64) / 2f64.sqrt()).abs() < 1e-7);
    }
}
