use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wavediffur::cascade::plan_cascade;
use wavediffur::data::bicubic_resize;
use wavediffur::data::io::{decode_tensor, encode_tensor};
use wavediffur::losses::{l_consistent, l_realness, tv, LossWeights};
use wavediffur::metrics::{ag, psnr, sam, sre, ssim};
use wavediffur::sampler::{apply_projection, ProjectionParams};
use wavediffur::schedule::make_schedule;
use wavediffur::wavelet::dwt2;
use wavediffur::ImageTensor;

fn pair(seed: u64, h: usize, w: usize) -> (ImageTensor, ImageTensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (
        ImageTensor::uniform(h, w, 3, &mut rng),
        ImageTensor::uniform(h, w, 3, &mut rng),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn metric_ranges_and_symmetry(seed in any::<u64>(), h in 8usize..20, w in 8usize..20) {
        let (x, y) = pair(seed, h, w);
        prop_assert_eq!(psnr(&x, &y, 1.0).unwrap(), psnr(&y, &x, 1.0).unwrap());
        let s = ssim(&x, &y).unwrap();
        prop_assert!((s - ssim(&y, &x).unwrap()).abs() < 1e-12);
        prop_assert!(s <= 1.0 && s >= -1.0);
        let a = sam(&x, &y).unwrap();
        prop_assert!((0.0..=180.0).contains(&a));
        prop_assert!(sre(&x, &y).unwrap() >= 0.0);
        prop_assert!(ag(&x) >= 0.0);
    }

    #[test]
    fn losses_non_negative(seed in any::<u64>()) {
        let (x, y) = pair(seed, 12, 12);
        prop_assert!(l_consistent(&x, &y).unwrap() >= 0.0);
        let (bx, by) = (dwt2(&x).unwrap().details(), dwt2(&y).unwrap().details());
        prop_assert!(l_realness(&bx, &by, LossWeights::default()).unwrap() >= 0.0);
        prop_assert!(tv(&x) >= 0.0);
    }

    #[test]
    fn alpha_bar_strictly_decreasing(steps in 2usize..400, lo in 1e-5f64..1e-2, span in 1e-4f64..0.3) {
        let s = make_schedule(steps, lo, lo + span).unwrap();
        let ab = s.alpha_bar();
        prop_assert!(ab[0] < 1.0 && ab[0] > 0.0);
        prop_assert!(ab.windows(2).all(|p| p[1] < p[0] && p[1] > 0.0));
    }

    #[test]
    fn tensor_bytes_round_trip(bits in prop::collection::vec(any::<u32>(), 1..64), c in 1usize..4) {
        let n = bits.len() / c;
        prop_assume!(n > 0);
        let data: Vec<f32> = bits[..n * c].iter().map(|b| f32::from_bits(*b)).collect();
        let img = ImageTensor::new(n, 1, c, data).unwrap();
        let back = decode_tensor(&encode_tensor(&img)).unwrap();
        let same = back.data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same && back.shape() == img.shape());
    }

    #[test]
    fn resize_keeps_constants(v in 0.0f32..1.0, h in 2usize..12, w in 2usize..12, oh in 2usize..30, ow in 2usize..30) {
        let out = bicubic_resize(&ImageTensor::filled(h, w, 2, v), oh, ow);
        prop_assert_eq!(out.shape(), [oh, ow, 2]);
        prop_assert!(out.data().iter().all(|&x| (x - v).abs() < 1e-5));
    }

    #[test]
    fn plan_reaches_target(r in 1usize..64, d in 0u32..8) {
        let cfg = plan_cascade(r, r << d, 2).unwrap();
        prop_assert_eq!(cfg.d, d);
        prop_assert_eq!(cfg.r << cfg.d, cfg.big_r);
    }

    #[test]
    fn full_projection_returns_condition(seed in any::<u64>(), t in 0usize..50) {
        let (x, c) = pair(seed, 4, 4);
        let sched = make_schedule(50, 1e-3, 0.2).unwrap();
        let pp = ProjectionParams { lambda_mix: 1.0, match_noise: false };
        prop_assert_eq!(apply_projection(&x, &c, t, &pp, &sched, None).unwrap(), c);
    }
}
