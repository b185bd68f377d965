//! Built-in invariant suite behind `wavediffur selftest`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::image::ImageTensor;
use crate::losses::{l_consistent, l_realness, tv, LossWeights};
use crate::metrics::{ag, psnr, sam, sre, ssim, PSNR_CAP};
use crate::networks::gradcheck;
use crate::networks::{ArchConfig, Condition};
use crate::sampler::{sample_conditional, GaussianOracle, ProjectionParams};
use crate::schedule::NoiseSchedule;
use crate::wavelet::{dwt2, idwt2};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn result(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name, passed, detail }
}

fn wavelet_round_trip() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst, mut worst_energy) = (0.0f32, 0.0f64);
    for _ in 0..200 {
        let img = ImageTensor::uniform(32, 32, 3, &mut rng);
        let bands = match dwt2(&img) {
            Ok(b) => b,
            Err(e) => return result("wavelet round trip", false, e.to_string()),
        };
        let back = idwt2(&bands).expect("consistent bands");
        worst = worst.max(back.max_abs_diff(&img));
        worst_energy = worst_energy.max((bands.energy() - img.sum_sq()).abs() / img.sum_sq());
    }
    result(
        "wavelet round trip",
        worst < 1e-5 && worst_energy < 1e-4,
        format!("max err {worst:.2e}, energy rel {worst_energy:.2e}"),
    )
}

fn schedule_marginal() -> CheckResult {
    let sched = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x0 = ImageTensor::filled(100, 100, 1, 0.8);
    let eps = ImageTensor::randn(100, 100, 1, &mut rng);
    let xt = sched.q_sample(&x0, sched.steps() - 1, &eps).expect("valid step");
    let mean = xt.mean();
    let std = (xt.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / xt.len() as f64).sqrt();
    result(
        "schedule terminal marginal",
        mean.abs() < 0.02 && (std - 1.0).abs() < 0.02,
        format!("mean {mean:.4}, std {std:.4}"),
    )
}

fn gaussian_sampling() -> CheckResult {
    let sched = NoiseSchedule::default();
    let oracle = GaussianOracle::new(3.0, 0.25, &sched).expect("valid oracle");
    let cond = Condition::lf_only(ImageTensor::zeros(100, 100, 1));
    let pp = ProjectionParams {
        lambda_mix: 0.0,
        match_noise: false,
    };
    match sample_conditional(&cond, &oracle, &sched, &pp, 3) {
        Ok(x) => {
            let mean = x.mean();
            let var = x.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / x.len() as f64;
            result(
                "analytic-score sampling",
                (mean - 3.0).abs() < 0.05 && (var - 0.25).abs() < 0.025,
                format!("mean {mean:.4}, var {var:.4}"),
            )
        }
        Err(e) => result("analytic-score sampling", false, e.to_string()),
    }
}

fn gradients() -> Vec<CheckResult> {
    let arch = ArchConfig::default();
    let checks: [(
        &'static str,
        fn(&ArchConfig, usize, u64) -> crate::Result<gradcheck::GradCheckReport>,
    ); 4] = [
        ("gradients: denoiser", gradcheck::check_denoiser),
        ("gradients: cross attention", gradcheck::check_cross_attention),
        ("gradients: csp encoder", gradcheck::check_csp),
        ("gradients: cshr", gradcheck::check_cshr),
    ];
    checks
        .into_iter()
        .enumerate()
        .map(|(i, (name, f))| match f(&arch, 100, 10 + i as u64) {
            Ok(r) => result(
                name,
                r.passed() && r.checked >= 100,
                format!("{} params, max rel {:.2e}", r.checked, r.max_rel_err),
            ),
            Err(e) => result(name, false, e.to_string()),
        })
        .collect()
}

/// Straight per-pixel loops, independent of the metric implementations.
fn metric_oracles() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let gt = ImageTensor::uniform(12, 12, 3, &mut rng);
        let noise = ImageTensor::uniform(12, 12, 3, &mut rng);
        let pred = gt.axpby(0.8, &noise, 0.2).expect("same shape");
        let n = gt.len() as f64;
        let pairs: Vec<(f64, f64)> = pred
            .data()
            .iter()
            .zip(gt.data())
            .map(|(&p, &g)| (p as f64, g as f64))
            .collect();
        let mse = pairs.iter().map(|(p, g)| (p - g).powi(2)).sum::<f64>() / n;
        let psnr_ref = 10.0 * (1.0 / mse).log10();
        let (mut angle, mut rel) = (0.0, 0.0);
        for (p, g) in pred.data().chunks(3).zip(gt.data().chunks(3)) {
            let dot: f64 = p.iter().zip(g).map(|(&a, &b)| a as f64 * b as f64).sum();
            let np: f64 = p.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
            let ng: f64 = g.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
            let diff: f64 = p
                .iter()
                .zip(g)
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            angle += (dot / (np * ng)).clamp(-1.0, 1.0).acos().to_degrees();
            rel += diff / (ng + 1e-8);
        }
        let px = (12 * 12) as f64;
        let mut ag_ref = 0.0;
        for r in 0..11 {
            for c in 0..11 {
                for ch in 0..3 {
                    let v = pred.get(r, c, ch) as f64;
                    let gx = pred.get(r, c + 1, ch) as f64 - v;
                    let gy = pred.get(r + 1, c, ch) as f64 - v;
                    ag_ref += ((gx * gx + gy * gy) / 2.0).sqrt();
                }
            }
        }
        ag_ref /= (11 * 11 * 3) as f64;
        let got = [
            psnr(&pred, &gt, 1.0).unwrap_or(f64::NAN) - psnr_ref,
            sam(&pred, &gt).unwrap_or(f64::NAN) - angle / px,
            sre(&pred, &gt).unwrap_or(f64::NAN) - 100.0 * rel / px,
            ag(&pred) - ag_ref,
        ];
        for d in got {
            worst = worst.max(if d.is_nan() { f64::INFINITY } else { d.abs() });
        }
    }
    let x = ImageTensor::uniform(16, 16, 3, &mut rng);
    let identity = psnr(&x, &x, 1.0).ok() == Some(PSNR_CAP)
        && ssim(&x, &x).map(|s| (s - 1.0).abs() < 1e-12).unwrap_or(false)
        && sam(&x, &x).ok() == Some(0.0)
        && sre(&x, &x).ok() == Some(0.0);
    result(
        "metric oracles",
        worst < 1e-6 && identity,
        format!(
            "max deviation {worst:.2e}, identity cases {}",
            if identity { "ok" } else { "wrong" }
        ),
    )
}

fn loss_identities() -> CheckResult {
    let w = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = ImageTensor::uniform(16, 16, 3, &mut rng);
    let bands = dwt2(&x).expect("even image").details();
    let expect: f64 = bands.iter().map(|b| w.lambda2 * tv(b)).sum();
    let real = l_realness(&bands, &bands, w).unwrap_or(f64::NAN);
    let cons = l_consistent(&x, &x).unwrap_or(f64::NAN);
    result(
        "loss identities",
        w.lambda1 == 0.1 && w.lambda2 == 2.0 && (real - expect).abs() < 1e-12 && cons.abs() < 1e-12,
        format!("realness {real:.4} vs {expect:.4}, consistent {cons:.1e}"),
    )
}

pub fn run_all() -> Vec<CheckResult> {
    let mut out = vec![wavelet_round_trip(), schedule_marginal(), gaussian_sampling()];
    out.extend(gradients());
    out.push(metric_oracles());
    out.push(loss_identities());
    out
}

pub fn format_table(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut s = String::new();
    for r in results {
        s.push_str(&format!(
            "{}  {:width$}  {}\n",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        ));
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    s.push_str(&format!("{} checks, {} failed\n", results.len(), failed));
    s
}
