//! Joint training of the denoiser, CSP encoder and CSHR on (LR, ref, HR)
//! triplets, plus checkpoint bundles that carry the sampling setup.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::io::{assign_params, load_checkpoint, save_checkpoint};
use crate::data::resize::bicubic_resize;
use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::losses::{graph_consistent, graph_mse, graph_realness, LossWeights};
use crate::networks::layers::to_chw;
use crate::networks::{csp_inputs, ArchConfig, Graph, Models, ParamStore, Tensor, Var};
use crate::sampler::ProjectionParams;
use crate::schedule::{make_schedule, NoiseSchedule, DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, DEFAULT_STEPS};
use crate::wavelet::dwt2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Optimizer::Adam),
            "sgd" => Ok(Optimizer::Sgd),
            _ => Err(Error::Parameter(format!("unknown optimizer {s:?} (adam|sgd)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub optimizer: Optimizer,
    pub weights: LossWeights,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            batch_size: 8,
            lr0: 1e-4,
            lr_decay: 0.8,
            decay_every: 5000,
            optimizer: Optimizer::Sgd,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::Parameter("batch size and decay interval must be >= 1".into()));
        }
        if !(self.lr0 > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::Parameter("learning rate and decay must be positive".into()));
        }
        Ok(())
    }

    /// Step-decayed learning rate.
    pub fn learning_rate(&self, step: usize) -> f64 {
        self.lr0 * self.lr_decay.powi((step / self.decay_every) as i32)
    }
}

/// Schedule and projection settings used at sampling time.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub projection: ProjectionParams,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            steps: DEFAULT_STEPS,
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
            projection: ProjectionParams::default(),
        }
    }
}

impl SamplingConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_min, self.beta_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub l_diff: f64,
    pub l_realness: f64,
    pub l_consistent: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Adam {
    m: ParamStore<f32>,
    v: ParamStore<f32>,
    t: i32,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Fixed per-sample training inputs.
struct Prepared {
    csp_lr: Tensor<f32>,
    ref_bands: Tensor<f32>,
    base_lf: Tensor<f32>,
    base_hf: Tensor<f32>,
    a_hr: ImageTensor,
    vhd_hr: [Tensor<f32>; 3],
    vhd_lr: [Tensor<f32>; 3],
    hr: Tensor<f32>,
}

fn prepare(pair: &SamplePair) -> Result<Prepared> {
    let (h, w) = (pair.lr.height(), pair.lr.width());
    if pair.hr.shape() != [2 * h, 2 * w, pair.lr.channels()] {
        return Err(Error::shape(
            "training pair hr",
            &[2 * h, 2 * w, pair.lr.channels()],
            &pair.hr.shape(),
        ));
    }
    let aligned = bicubic_resize(&pair.reference, 2 * h, 2 * w);
    let inputs = csp_inputs::<f32>(&pair.lr, &aligned)?;
    let hr_bands = dwt2(&pair.hr)?;
    let lr_bands = dwt2(&pair.lr)?;
    Ok(Prepared {
        csp_lr: inputs.lr,
        ref_bands: inputs.ref_bands,
        base_lf: inputs.base_lf,
        base_hf: inputs.base_hf,
        a_hr: hr_bands.a.clone(),
        vhd_hr: [&hr_bands.v, &hr_bands.h, &hr_bands.d].map(to_chw),
        vhd_lr: [&lr_bands.v, &lr_bands.h, &lr_bands.d].map(to_chw),
        hr: to_chw(&pair.hr),
    })
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub sampling: SamplingConfig,
    pub models: Models,
    sched: NoiseSchedule,
    adam: Option<Adam>,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, sampling: SamplingConfig, models: Models) -> Result<Self> {
        cfg.validate()?;
        let sched = sampling.schedule()?;
        let adam = (cfg.optimizer == Optimizer::Adam).then(|| Adam {
            m: models.params.zeros_like(),
            v: models.params.zeros_like(),
            t: 0,
        });
        Ok(Trainer {
            cfg,
            sampling,
            models,
            sched,
            adam,
            step: 0,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Loss terms for one sample and their gradients added into `grads`.
    fn sample_loss<R: Rng>(&self, p: &Prepared, rng: &mut R, grads: &mut ParamStore<f32>) -> Result<[f64; 4]> {
        let t = rng.random_range(0..self.sched.steps());
        let [h, w, c] = p.a_hr.shape();
        let eps_img = ImageTensor::randn(h, w, c, rng);
        let x_t = self.sched.q_sample(&p.a_hr, t, &eps_img)?;
        let store = &self.models.params;

        let mut g = Graph::<f32>::new();
        let l = g.input(p.csp_lr.clone());
        let r = g.input(p.ref_bands.clone());
        let bl = g.input(p.base_lf.clone());
        let bh = g.input(p.base_hf.clone());
        let cond = self.models.csp().forward(&mut g, store, l, r, bl, bh)?;
        let xt = g.input(to_chw(&x_t));
        // the encoder is trained through the consistency and realness terms;
        // the denoiser only reads its LF condition
        let den_cond = g.detach(cond.lf);
        let eps_hat = self.models.denoiser().forward(&mut g, store, xt, den_cond, t)?;
        let eps = g.input(to_chw(&eps_img));
        let l_diff = graph_mse(&mut g, eps_hat, eps);

        let cond_hf: [Var; 3] = std::array::from_fn(|i| g.slice_axis0(cond.hf, i * c, c));
        let lr_bands = p.vhd_lr.clone().map(|t| g.input(t));
        let vhd_sr = self.models.cshr().forward(&mut g, store, lr_bands, cond_hf)?;
        let vhd_hr = p.vhd_hr.clone().map(|t| g.input(t));
        let l_real = graph_realness(&mut g, vhd_sr, vhd_hr, self.cfg.weights);

        // consistency is scored on the image the condition implies on its
        // own (the fully projected reconstruction), which gives the encoder a
        // target that does not depend on the sampled step
        let [v, hh, d] = vhd_sr;
        let sr = g.idwt2([cond.lf, v, hh, d]);
        let l_cons = graph_consistent(&mut g, sr, &p.hr)?;

        let s1 = g.add(l_diff, l_real);
        let total = g.add(s1, l_cons);
        let vals = [l_diff, l_real, l_cons, total].map(|v| g.value(v).data[0] as f64);
        if !vals[3].is_finite() {
            return Err(Error::Divergence {
                stage: "training",
                step: self.step,
                detail: format!(
                    "t={t} lr={:e} l_diff={} l_realness={} l_consistent={}",
                    self.cfg.learning_rate(self.step),
                    vals[0],
                    vals[1],
                    vals[2]
                ),
            });
        }
        let gr = g.backward(total);
        g.accumulate_param_grads(&gr, grads)?;
        Ok(vals)
    }

    /// One optimizer update on a mini-batch.
    pub fn train_step(&mut self, batch: &[&SamplePair]) -> Result<StepLog> {
        if batch.is_empty() {
            return Err(Error::Parameter("empty batch".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(1 + self.step as u64);
        let mut grads = self.models.params.fresh_grads();
        let mut sums = [0.0f64; 4];
        for pair in batch {
            let p = prepare(pair)?;
            let vals = self.sample_loss(&p, &mut rng, &mut grads)?;
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v;
            }
        }
        let n = batch.len() as f64;
        grads.scale_grads(1.0 / n as f32);
        let lr = self.cfg.learning_rate(self.step);
        self.apply(&grads, lr)?;
        let log = StepLog {
            step: self.step,
            lr,
            l_diff: sums[0] / n,
            l_realness: sums[1] / n,
            l_consistent: sums[2] / n,
            l_total: sums[3] / n,
        };
        self.step += 1;
        Ok(log)
    }

    fn apply(&mut self, grads: &ParamStore<f32>, lr: f64) -> Result<()> {
        let names: Vec<String> = self.models.params.names().to_vec();
        match self.adam.as_mut() {
            None => {
                for name in &names {
                    let g = &grads.grad(name)?.data;
                    let p = self.models.params.get_mut(name)?;
                    for (x, &gi) in p.data.iter_mut().zip(g) {
                        *x -= (lr * gi as f64) as f32;
                    }
                }
            }
            Some(adam) => {
                adam.t += 1;
                let c1 = 1.0 - ADAM_B1.powi(adam.t);
                let c2 = 1.0 - ADAM_B2.powi(adam.t);
                for name in &names {
                    let g = &grads.grad(name)?.data;
                    let m = &mut adam.m.get_mut(name)?.data;
                    let v = &mut adam.v.get_mut(name)?.data;
                    let p = &mut self.models.params.get_mut(name)?.data;
                    for i in 0..p.len() {
                        let gi = g[i] as f64;
                        let mi = ADAM_B1 * m[i] as f64 + (1.0 - ADAM_B1) * gi;
                        let vi = ADAM_B2 * v[i] as f64 + (1.0 - ADAM_B2) * gi * gi;
                        m[i] = mi as f32;
                        v[i] = vi as f32;
                        let upd = lr * (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS);
                        p[i] = (p[i] as f64 - upd) as f32;
                    }
                }
            }
        }
        Ok(())
    }

    /// Train for `cfg.steps` steps over seeded shuffles of `data`. With
    /// `out_dir`, writes `loss.csv`, periodic `ckpt_<step>.wdur` and a final
    /// `model.wdur`.
    pub fn fit(&mut self, data: &[SamplePair], out_dir: Option<&Path>) -> Result<Vec<StepLog>> {
        if data.is_empty() {
            return Err(Error::Precondition("no training samples".into()));
        }
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut order_rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut cursor = data.len();
        let mut logs = Vec::with_capacity(self.cfg.steps);
        while self.step < self.cfg.steps {
            let mut batch = Vec::with_capacity(self.cfg.batch_size);
            while batch.len() < self.cfg.batch_size.min(data.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut order_rng);
                    cursor = 0;
                }
                batch.push(&data[order[cursor]]);
                cursor += 1;
            }
            logs.push(self.train_step(&batch)?);
            if let Some(dir) = out_dir {
                if self.cfg.checkpoint_every > 0 && self.step % self.cfg.checkpoint_every == 0 {
                    save_bundle(
                        dir.join(format!("ckpt_{:06}.wdur", self.step)),
                        &self.models,
                        &self.sampling,
                    )?;
                }
            }
        }
        if let Some(dir) = out_dir {
            write_loss_csv(dir.join("loss.csv"), &logs)?;
            save_bundle(dir.join("model.wdur"), &self.models, &self.sampling)?;
        }
        Ok(logs)
    }
}

pub fn write_loss_csv(path: impl AsRef<Path>, logs: &[StepLog]) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["step", "lr", "l_diff", "l_realness", "l_consistent", "l_total"])
        .map_err(csv_err)?;
    for l in logs {
        w.write_record([
            l.step.to_string(),
            l.lr.to_string(),
            l.l_diff.to_string(),
            l.l_realness.to_string(),
            l.l_consistent.to_string(),
            l.l_total.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const META_ARCH: &str = "meta.arch";
const META_SAMPLING: &str = "meta.sampling";

const SAMPLING_FIELDS: usize = 5;

// Sampling settings are f64; each is stored as its high and low 32-bit
// words carried in f32 bit patterns so bundles restore them exactly.
fn split_f64(v: f64) -> [f32; 2] {
    let bits = v.to_bits();
    [f32::from_bits((bits >> 32) as u32), f32::from_bits(bits as u32)]
}

fn join_f64(w: &[f32]) -> f64 {
    f64::from_bits(((w[0].to_bits() as u64) << 32) | w[1].to_bits() as u64)
}

/// Parameters plus `meta.*` entries describing architecture and sampling.
pub fn bundle_store(models: &Models, sampling: &SamplingConfig) -> ParamStore<f32> {
    let a = &models.arch;
    let mut store = ParamStore::new();
    let arch = [a.channels, a.base_width, a.temb_dim, a.feat_width, a.heads, a.attn_dim];
    store
        .insert(META_ARCH, Tensor::new(vec![6], arch.map(|v| v as f32).to_vec()))
        .expect("fresh store");
    let s: Vec<f32> = [
        sampling.steps as f64,
        sampling.beta_min,
        sampling.beta_max,
        sampling.projection.lambda_mix,
        if sampling.projection.match_noise { 1.0 } else { 0.0 },
    ]
    .iter()
    .flat_map(|v| split_f64(*v))
    .collect();
    store
        .insert(META_SAMPLING, Tensor::new(vec![SAMPLING_FIELDS, 2], s))
        .expect("fresh store");
    for (name, t) in models.params.iter() {
        store.insert(name, t.clone()).expect("unique parameter names");
    }
    store
}

pub fn save_bundle(path: impl AsRef<Path>, models: &Models, sampling: &SamplingConfig) -> Result<()> {
    save_checkpoint(path, &bundle_store(models, sampling))
}

fn meta<'a>(store: &'a ParamStore<f32>, name: &str, shape: &[usize]) -> Result<&'a [f32]> {
    let t = store
        .get(name)
        .map_err(|_| Error::Checkpoint(format!("missing {name} entry")))?;
    if t.shape != shape {
        return Err(Error::Checkpoint(format!(
            "{name}: expected shape {shape:?}, got {:?}",
            t.shape
        )));
    }
    Ok(&t.data)
}

fn sampling_from_meta(s: &[f32]) -> SamplingConfig {
    let v: Vec<f64> = s.chunks(2).map(join_f64).collect();
    SamplingConfig {
        steps: v[0] as usize,
        beta_min: v[1],
        beta_max: v[2],
        projection: ProjectionParams {
            lambda_mix: v[3],
            match_noise: v[4] != 0.0,
        },
    }
}

pub fn models_from_store(store: &ParamStore<f32>) -> Result<(Models, SamplingConfig)> {
    let a = meta(store, META_ARCH, &[6])?;
    let arch = ArchConfig {
        channels: a[0] as usize,
        base_width: a[1] as usize,
        temb_dim: a[2] as usize,
        feat_width: a[3] as usize,
        heads: a[4] as usize,
        attn_dim: a[5] as usize,
    };
    let s = meta(store, META_SAMPLING, &[SAMPLING_FIELDS, 2])?;
    let sampling = sampling_from_meta(s);
    let mut models = Models::new(arch, 0)?;
    let mut params = ParamStore::new();
    for (name, t) in store.iter().filter(|(n, _)| !n.starts_with("meta.")) {
        params.insert(name, t.clone())?;
    }
    assign_params(&mut models.params, &params)?;
    Ok((models, sampling))
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<(Models, SamplingConfig)> {
    models_from_store(&load_checkpoint(path)?)
}

/// Load a bundle into a fixed architecture, reporting any shape differences.
pub fn load_bundle_into(path: impl AsRef<Path>, models: &mut Models) -> Result<SamplingConfig> {
    let store = load_checkpoint(path)?;
    let s = meta(&store, META_SAMPLING, &[SAMPLING_FIELDS, 2])?;
    let sampling = sampling_from_meta(s);
    let mut params = ParamStore::new();
    for (name, t) in store.iter().filter(|(n, _)| !n.starts_with("meta.")) {
        params.insert(name, t.clone())?;
    }
    assign_params(&mut models.params, &params)?;
    Ok(sampling)
}

/// Path of the final model written by [`Trainer::fit`].
pub fn final_model_path(out_dir: &Path) -> PathBuf {
    out_dir.join("model.wdur")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_dataset;

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            channels: 3,
            base_width: 8,
            temb_dim: 8,
            feat_width: 8,
            heads: 2,
            attn_dim: 8,
        }
    }

    fn tiny_sampling() -> SamplingConfig {
        SamplingConfig {
            steps: 20,
            beta_min: 1e-3,
            beta_max: 0.2,
            projection: ProjectionParams::default(),
        }
    }

    #[test]
    fn lr_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate(0), 1e-4);
        assert_eq!(c.learning_rate(4999), 1e-4);
        assert!((c.learning_rate(5000) - 0.8e-4).abs() < 1e-18);
        assert!((c.learning_rate(10000) - 0.64e-4).abs() < 1e-18);
        assert_eq!(c.batch_size, 8);
    }

    #[test]
    fn loss_decreases_on_one_batch() {
        let data = make_synthetic_dataset(1, 2, 16, 1).unwrap();
        let cfg = TrainConfig {
            steps: 30,
            batch_size: 2,
            lr0: 3e-3,
            optimizer: Optimizer::Adam,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(cfg, tiny_sampling(), Models::new(tiny_arch(), 2).unwrap()).unwrap();
        let logs = tr.fit(&data, None).unwrap();
        let first: f64 = logs[..5].iter().map(|l| l.l_realness + l.l_consistent).sum();
        let last: f64 = logs[25..].iter().map(|l| l.l_realness + l.l_consistent).sum();
        assert!(last < first, "{first} -> {last}");
        for l in &logs {
            assert!((l.l_diff + l.l_realness + l.l_consistent - l.l_total).abs() < 1e-5);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = make_synthetic_dataset(2, 3, 16, 1).unwrap();
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let run = || {
            let mut tr = Trainer::new(cfg.clone(), tiny_sampling(), Models::new(tiny_arch(), 5).unwrap()).unwrap();
            let logs = tr.fit(&data, None).unwrap();
            (logs, tr.models)
        };
        let (la, ma) = run();
        let (lb, mb) = run();
        assert_eq!(la, lb);
        assert_eq!(ma, mb);
    }

    #[test]
    fn sgd_updates_parameters() {
        let data = make_synthetic_dataset(3, 1, 16, 1).unwrap();
        let cfg = TrainConfig {
            steps: 1,
            batch_size: 1,
            lr0: 1e-2,
            ..TrainConfig::default()
        };
        let init = Models::new(tiny_arch(), 1).unwrap();
        let mut tr = Trainer::new(cfg, tiny_sampling(), init.clone()).unwrap();
        tr.fit(&data, None).unwrap();
        assert_ne!(tr.models.params, init.params);
    }

    #[test]
    fn bundle_round_trip_and_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let data = make_synthetic_dataset(4, 2, 16, 1).unwrap();
        let cfg = TrainConfig {
            steps: 2,
            batch_size: 1,
            checkpoint_every: 1,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(cfg, tiny_sampling(), Models::new(tiny_arch(), 1).unwrap()).unwrap();
        tr.fit(&data, Some(dir.path())).unwrap();
        let (m, s) = load_bundle(final_model_path(dir.path())).unwrap();
        assert_eq!(m, tr.models);
        assert_eq!(s, tiny_sampling());
        assert!(dir.path().join("ckpt_000001.wdur").exists());
        let csv = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert!(csv.starts_with("step,lr,l_diff,l_realness,l_consistent,l_total\n"));
        assert_eq!(csv.lines().count(), 3);

        let mut other = Models::new(
            ArchConfig {
                base_width: 12,
                ..tiny_arch()
            },
            0,
        )
        .unwrap();
        let err = load_bundle_into(final_model_path(dir.path()), &mut other).unwrap_err();
        assert!(err.to_string().contains("expected shape"), "{err}");
    }

    #[test]
    fn divergence_is_reported() {
        let mut data = make_synthetic_dataset(4, 1, 16, 1).unwrap();
        data[0].hr.data_mut()[0] = f32::NAN;
        let cfg = TrainConfig {
            steps: 1,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(cfg, tiny_sampling(), Models::new(tiny_arch(), 1).unwrap()).unwrap();
        let err = tr.fit(&data, None).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 0, .. }), "{err}");
        assert!(err.to_string().contains("t="), "{err}");
    }
}
