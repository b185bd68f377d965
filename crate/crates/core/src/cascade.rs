//! Self-cascaded ×2 wavelet super-resolution: plan, single step, full runs
//! in baseline (fixed condition) and CSP (per-level condition) modes.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::resize::{bicubic_resize, bicubic_resize_unclamped};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::networks::{cshr_restore, csp_encode, upscale_hf, Condition, Models};
use crate::sampler::{sample_conditional_with_rng, NetworkEps, ProjectionParams};
use crate::schedule::NoiseSchedule;
use crate::wavelet::{dwt2, idwt2, WaveletBands};

/// Number of ×k levels listed as valid targets in plan errors.
const LISTED_TARGETS: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Baseline,
    Csp,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "csp" => Ok(Mode::Csp),
            _ => Err(Error::Parameter(format!("unknown mode {s:?} (baseline|csp)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Csp => "csp",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeConfig {
    /// Current resolution.
    pub r: usize,
    /// Target resolution.
    pub big_r: usize,
    /// Per-step rate.
    pub k: usize,
    /// Overall rate `big_r / r`.
    pub big_k: usize,
    /// Number of steps, `log_k(big_k)`.
    pub d: u32,
    pub mode: Mode,
    pub seed: u64,
    /// Std of the optional isotropic perturbation in the baseline HF upscaler.
    pub hf_sigma: f32,
}

impl CascadeConfig {
    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

pub fn plan_cascade(r: usize, big_r: usize, k: usize) -> Result<CascadeConfig> {
    if r == 0 {
        return Err(Error::Parameter("resolution must be positive".into()));
    }
    if k != 2 {
        return Err(Error::Parameter(format!("only x2 steps are supported, got k={k}")));
    }
    let valid: Vec<usize> = (0..=LISTED_TARGETS)
        .filter_map(|i| k.checked_pow(i).and_then(|p| p.checked_mul(r)))
        .collect();
    let plan_err = |reason: String| Error::Plan {
        reason,
        valid: valid.clone(),
    };
    if big_r < r || big_r % r != 0 {
        return Err(plan_err(format!("{big_r} is not a multiple of {r}")));
    }
    let big_k = big_r / r;
    let mut d = 0u32;
    let mut p = 1usize;
    while p < big_k {
        p *= k;
        d += 1;
    }
    if p != big_k {
        return Err(plan_err(format!("rate {big_k} is not a power of {k}")));
    }
    Ok(CascadeConfig {
        r,
        big_r,
        k,
        big_k,
        d,
        mode: Mode::Baseline,
        seed: 0,
        hf_sigma: 0.0,
    })
}

/// Image-to-image ×2 upsampler used to build the baseline condition.
pub type SrPlugin<'a> = &'a dyn Fn(&ImageTensor) -> ImageTensor;

pub fn bicubic_x2(img: &ImageTensor) -> ImageTensor {
    bicubic_resize(img, 2 * img.height(), 2 * img.width())
}

/// Where the restored detail bands come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HfSource {
    /// Non-learned band upscaling with optional noise.
    Upscale { sigma: f32 },
    /// Learned restoration guided by `cond.hf`.
    Cshr,
}

/// Everything a step needs besides its input.
pub struct StepContext<'a> {
    pub models: &'a Models,
    pub sched: &'a NoiseSchedule,
    pub projection: &'a ProjectionParams,
}

/// One ×2 step: DWT, conditional LF sampling, HF restoration, IDWT.
pub fn wavediffur_step<R: Rng + ?Sized>(
    lr: &ImageTensor,
    cond: &Condition,
    hf: HfSource,
    ctx: &StepContext,
    rng: &mut R,
) -> Result<ImageTensor> {
    let bands = dwt2(lr)?;
    let target = [lr.height(), lr.width(), lr.channels()];
    if cond.lf.shape() != target {
        return Err(Error::shape("condition lf band", &target, &cond.lf.shape()));
    }
    let eps = NetworkEps { models: ctx.models };
    let a_sr = sample_conditional_with_rng(cond, &eps, ctx.sched, ctx.projection, rng)?;
    let details = bands.details();
    let vhd = match hf {
        HfSource::Upscale { sigma } => upscale_hf(&details, sigma, rng)?,
        HfSource::Cshr => {
            let cond_hf = cond
                .hf
                .as_ref()
                .ok_or_else(|| Error::Precondition("learned HF restoration needs an HF condition".into()))?;
            cshr_restore(&details, cond_hf, ctx.models)?
        }
    };
    idwt2(&WaveletBands::from_parts(a_sr, vhd))
}

/// Baseline condition: LF band of the plug-in ×2 upsampling of `lr`.
pub fn baseline_condition(lr: &ImageTensor, sr: SrPlugin) -> Result<ImageTensor> {
    let up = sr(lr);
    let want = [2 * lr.height(), 2 * lr.width(), lr.channels()];
    if up.shape() != want {
        return Err(Error::shape("sr plug-in output", &want, &up.shape()));
    }
    Ok(dwt2(&up)?.a)
}

/// Run the cascade and return every level, input first.
pub fn run_cascade(
    lr: &ImageTensor,
    reference: Option<&ImageTensor>,
    cfg: &CascadeConfig,
    ctx: &StepContext,
    sr: SrPlugin,
) -> Result<Vec<ImageTensor>> {
    if cfg.mode == Mode::Csp {
        let r = reference.ok_or_else(|| Error::Precondition("csp mode needs a reference image".into()))?;
        if r.height() < lr.height() || r.width() < lr.width() {
            return Err(Error::Precondition(format!(
                "reference {}x{} smaller than input {}x{}",
                r.height(),
                r.width(),
                lr.height(),
                lr.width()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut levels = vec![lr.clone()];
    if cfg.d == 0 {
        return Ok(levels);
    }
    let tau_lf = match cfg.mode {
        Mode::Baseline => Some(baseline_condition(lr, sr)?),
        Mode::Csp => None,
    };
    for step in 0..cfg.d as usize {
        let cur = &levels[step];
        let (h, w) = (cur.height(), cur.width());
        let (cond, hf) = match (cfg.mode, &tau_lf, reference) {
            (Mode::Baseline, Some(tau), _) => (
                Condition::lf_only(bicubic_resize_unclamped(tau, h, w)),
                HfSource::Upscale { sigma: cfg.hf_sigma },
            ),
            (_, _, Some(r)) => {
                let aligned = bicubic_resize(r, 2 * h, 2 * w);
                (csp_encode(cur, &aligned, ctx.models)?, HfSource::Cshr)
            }
            _ => unreachable!("mode preconditions checked above"),
        };
        let out = wavediffur_step(cur, &cond, hf, ctx, &mut rng).map_err(|e| match e {
            Error::Divergence { detail, step: t, .. } => Error::Divergence {
                stage: "cascade",
                step,
                detail: format!("sampler step {t}: {detail}"),
            },
            e => e,
        })?;
        if !out.is_finite() {
            return Err(Error::Divergence {
                stage: "cascade",
                step,
                detail: "non-finite output image".into(),
            });
        }
        levels.push(out);
    }
    Ok(levels)
}

pub fn run_wavediffur(lr: &ImageTensor, cfg: &CascadeConfig, ctx: &StepContext) -> Result<ImageTensor> {
    let cfg = CascadeConfig {
        mode: Mode::Baseline,
        ..cfg.clone()
    };
    Ok(run_cascade(lr, None, &cfg, ctx, &bicubic_x2)?
        .pop()
        .expect("input level"))
}

pub fn run_csp_wavediffur(
    lr: &ImageTensor,
    reference: &ImageTensor,
    cfg: &CascadeConfig,
    ctx: &StepContext,
) -> Result<ImageTensor> {
    let cfg = CascadeConfig {
        mode: Mode::Csp,
        ..cfg.clone()
    };
    Ok(run_cascade(lr, Some(reference), &cfg, ctx, &bicubic_x2)?
        .pop()
        .expect("input level"))
}
