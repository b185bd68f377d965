//! Central finite-difference checks of the analytic gradients, run in `f64`.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::layers::to_chw;
use super::params::ParamStore;
use super::tensor::Tensor;
use super::{csp_inputs, ArchConfig, CrossAttention, Models};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor for the relative error of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub block: String,
    pub checked: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare analytic gradients of `loss` against central differences on
/// `samples` randomly chosen scalars among parameters starting with `prefix`.
pub fn check<F>(
    block: &str,
    store: &ParamStore<f64>,
    prefix: &str,
    samples: usize,
    seed: u64,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = loss(&mut g, store)?;
    let grads = g.backward(out);
    let mut with_grads = store.fresh_grads();
    g.accumulate_param_grads(&grads, &mut with_grads)?;

    let candidates: Vec<(String, usize)> = store
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .flat_map(|(n, t)| (0..t.numel()).map(move |i| (n.to_string(), i)))
        .collect();
    if candidates.is_empty() {
        return Err(Error::Parameter(format!("no parameters under prefix {prefix}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<&(String, usize)> = if candidates.len() <= samples {
        candidates.iter().collect()
    } else {
        candidates.choose_multiple(&mut rng, samples).collect()
    };

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = loss(&mut g, s)?;
        Ok(g.value(out).data[0])
    };
    let mut report = GradCheckReport {
        block: block.to_string(),
        checked: 0,
        failures: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    let mut work = store.clone();
    for (name, i) in picks {
        let orig = work.get(name)?.data[*i];
        work.get_mut(name)?.data[*i] = orig + FD_STEP;
        let lp = eval(&work)?;
        work.get_mut(name)?.data[*i] = orig - FD_STEP;
        let lm = eval(&work)?;
        work.get_mut(name)?.data[*i] = orig;
        let numeric = (lp - lm) / (2.0 * FD_STEP);
        let analytic = with_grads.grad(name)?.data[*i];
        let e = rel_err(analytic, numeric);
        report.checked += 1;
        if e >= REL_TOL {
            report.failures += 1;
        }
        if report.checked == 1 || e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst = format!("{name}[{i}] analytic={analytic:.6e} numeric={numeric:.6e}");
        }
    }
    Ok(report)
}

/// `sum(r * y)` over all outputs with fixed random weights `r`.
pub fn random_projection<R: Rng>(g: &mut Graph<f64>, outputs: &[Var], rng: &mut R) -> Var {
    let mut terms = Vec::new();
    for &o in outputs {
        let shape = g.shape(o).to_vec();
        let n = shape.iter().product();
        let r = g.input(Tensor::new(
            shape,
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        ));
        let p = g.mul(o, r);
        terms.push(g.sum(p));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    total
}

/// Models with every parameter (including zero-initialized heads and biases)
/// filled with random values, converted to `f64`.
pub fn randomized_store(arch: &ArchConfig, seed: u64) -> Result<ParamStore<f64>> {
    let models = Models::new(arch.clone(), seed)?;
    let mut store = models.params.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let names: Vec<String> = store.names().to_vec();
    for n in names {
        let t = store.get_mut(&n)?;
        if t.data.iter().all(|&v| v == 0.0) {
            t.data.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
    }
    Ok(store)
}

fn rand_img(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> ImageTensor {
    ImageTensor::uniform(h, w, c, rng)
}

pub fn check_denoiser(arch: &ArchConfig, samples: usize, seed: u64) -> Result<GradCheckReport> {
    let store = randomized_store(arch, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let c = arch.channels;
    let x: Tensor<f64> = to_chw(&ImageTensor::randn(8, 8, c, &mut rng));
    let cond: Tensor<f64> = to_chw(&rand_img(8, 8, c, &mut rng));
    let den = super::Denoiser::new(arch);
    check("denoiser", &store, "den.", samples, seed, |g, s| {
        let xv = g.input(x.clone());
        let cv = g.input(cond.clone());
        let out = den.forward(g, s, xv, cv, 417)?;
        let mut r = ChaCha8Rng::seed_from_u64(seed + 2);
        Ok(random_projection(g, &[out], &mut r))
    })
}

pub fn check_cross_attention(arch: &ArchConfig, samples: usize, seed: u64) -> Result<GradCheckReport> {
    let f = arch.feat_width;
    let att = CrossAttention::new("xattn", f, f + 3, arch.attn_dim, arch.heads, f)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    att.init(&mut store, &mut rng)?;
    for n in store.names().to_vec() {
        let t = store.get_mut(&n)?;
        if t.data.iter().all(|&v| v == 0.0) {
            t.data.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
    }
    let q: Vec<f64> = (0..10 * f).map(|_| rng.random_range(-1.0..1.0)).collect();
    let kv: Vec<f64> = (0..7 * (f + 3)).map(|_| rng.random_range(-1.0..1.0)).collect();
    check("cross_attention", &store, "xattn.", samples, seed, |g, s| {
        let qv = g.input(Tensor::new(vec![10, f], q.clone()));
        let kvv = g.input(Tensor::new(vec![7, f + 3], kv.clone()));
        let out = att.forward(g, s, qv, kvv)?.out;
        let mut r = ChaCha8Rng::seed_from_u64(seed + 2);
        Ok(random_projection(g, &[out], &mut r))
    })
}

pub fn check_csp(arch: &ArchConfig, samples: usize, seed: u64) -> Result<GradCheckReport> {
    let store = randomized_store(arch, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let c = arch.channels;
    let inputs = csp_inputs::<f64>(&rand_img(8, 8, c, &mut rng), &rand_img(12, 12, c, &mut rng))?;
    let csp = super::CspEncoder::new(arch);
    check("csp_encode", &store, "csp.", samples, seed, |g, s| {
        let l = g.input(inputs.lr.clone());
        let r = g.input(inputs.ref_bands.clone());
        let bl = g.input(inputs.base_lf.clone());
        let bh = g.input(inputs.base_hf.clone());
        let out = csp.forward(g, s, l, r, bl, bh)?;
        let mut rr = ChaCha8Rng::seed_from_u64(seed + 2);
        Ok(random_projection(g, &[out.lf, out.hf], &mut rr))
    })
}

pub fn check_cshr(arch: &ArchConfig, samples: usize, seed: u64) -> Result<GradCheckReport> {
    let store = randomized_store(arch, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let c = arch.channels;
    let lr: Vec<Tensor<f64>> = (0..3).map(|_| to_chw(&ImageTensor::randn(4, 4, c, &mut rng))).collect();
    let cond: Vec<Tensor<f64>> = (0..3).map(|_| to_chw(&ImageTensor::randn(8, 8, c, &mut rng))).collect();
    let cshr = super::Cshr::new(arch);
    check("cshr_restore", &store, "cshr.", samples, seed, |g, s| {
        let l = [0, 1, 2].map(|i| g.input(lr[i].clone()));
        let cd = [0, 1, 2].map(|i| g.input(cond[i].clone()));
        let out = cshr.forward(g, s, l, cd)?;
        let mut rr = ChaCha8Rng::seed_from_u64(seed + 2);
        Ok(random_projection(g, &out, &mut rr))
    })
}
