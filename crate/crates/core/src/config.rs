//! `key = value` run configuration. Blank lines and `#` comments are
//! ignored; unknown keys and malformed values are rejected with the line
//! number.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `T` | 1000 | diffusion steps |
//! | `beta_min`, `beta_max` | 1e-4, 0.02 | linear beta range |
//! | `lambda_mix` | 0.5 | condition weight in the projection |
//! | `match_noise` | true | noise the condition to the current level |
//! | `heads` | 12 | attention heads |
//! | `base_width` | 32 | denoiser base channels |
//! | `feat_width` | 24 | CSP / CSHR feature channels |
//! | `attn_dim` | 48 | attention width (divisible by `heads`) |
//! | `temb_dim` | 32 | step embedding size |
//! | `r`, `R`, `k` | 16, 32, 2 | cascade input size, target size, per-step rate |
//! | `mode` | csp | `baseline` or `csp` |
//! | `steps` | 5000 | training steps |
//! | `batch` | 8 | mini-batch size |
//! | `lr0`, `decay`, `decay_every` | 1e-4, 0.8, 5000 | step-decayed learning rate |
//! | `optimizer` | sgd | `sgd` or `adam` |
//! | `lambda1`, `lambda2` | 0.1, 2 | realness weights |
//! | `seed` | 0 | training seed (shuffling, noise draws) |
//! | `init_seed` | 0 | parameter initialisation seed |
//! | `checkpoint_every` | 1000 | checkpoint interval, 0 disables |
//! | `data` | (empty) | dataset root (`<root>/<id>/{lr,ref,hr}.wdtn`) |
//! | `out` | out | output directory |
//! | `synth_n` | 0 | if > 0 and `data` is empty, train on this many generated pairs |
//! | `synth_hr` | 32 | HR size of generated pairs |
//! | `synth_seed` | 0 | generator seed |

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cascade::Mode;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::networks::ArchConfig;
use crate::sampler::ProjectionParams;
use crate::trainer::{SamplingConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub sampling: SamplingConfig,
    pub arch: ArchConfig,
    pub r: usize,
    pub big_r: usize,
    pub k: usize,
    pub mode: Mode,
    pub train: TrainConfig,
    pub init_seed: u64,
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub synth_n: usize,
    pub synth_hr: usize,
    pub synth_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            sampling: SamplingConfig::default(),
            arch: ArchConfig::default(),
            r: 16,
            big_r: 32,
            k: 2,
            mode: Mode::Csp,
            train: TrainConfig {
                checkpoint_every: 1000,
                ..TrainConfig::default()
            },
            init_seed: 0,
            data: None,
            out: PathBuf::from("out"),
            synth_n: 0,
            synth_hr: 32,
            synth_seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("line {line}: bad value {value:?} for {key}: {e}")))
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("line {line}: bad boolean {value:?} for {key}"))),
    }
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected key = value, got {content:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            c.set(key, value, line)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        match key {
            "T" => self.sampling.steps = parse(key, value, line)?,
            "beta_min" => self.sampling.beta_min = parse(key, value, line)?,
            "beta_max" => self.sampling.beta_max = parse(key, value, line)?,
            "lambda_mix" => self.sampling.projection.lambda_mix = parse(key, value, line)?,
            "match_noise" => self.sampling.projection.match_noise = parse_bool(key, value, line)?,
            "heads" => self.arch.heads = parse(key, value, line)?,
            "base_width" => self.arch.base_width = parse(key, value, line)?,
            "feat_width" => self.arch.feat_width = parse(key, value, line)?,
            "attn_dim" => self.arch.attn_dim = parse(key, value, line)?,
            "temb_dim" => self.arch.temb_dim = parse(key, value, line)?,
            "r" => self.r = parse(key, value, line)?,
            "R" => self.big_r = parse(key, value, line)?,
            "k" => self.k = parse(key, value, line)?,
            "mode" => self.mode = parse(key, value, line)?,
            "steps" => self.train.steps = parse(key, value, line)?,
            "batch" => self.train.batch_size = parse(key, value, line)?,
            "lr0" => self.train.lr0 = parse(key, value, line)?,
            "decay" => self.train.lr_decay = parse(key, value, line)?,
            "decay_every" => self.train.decay_every = parse(key, value, line)?,
            "optimizer" => self.train.optimizer = parse(key, value, line)?,
            "lambda1" => self.train.weights.lambda1 = parse(key, value, line)?,
            "lambda2" => self.train.weights.lambda2 = parse(key, value, line)?,
            "seed" => self.train.seed = parse(key, value, line)?,
            "init_seed" => self.init_seed = parse(key, value, line)?,
            "checkpoint_every" => self.train.checkpoint_every = parse(key, value, line)?,
            "data" => self.data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "synth_n" => self.synth_n = parse(key, value, line)?,
            "synth_hr" => self.synth_hr = parse(key, value, line)?,
            "synth_seed" => self.synth_seed = parse(key, value, line)?,
            _ => return Err(Error::Config(format!("line {line}: unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        self.sampling.schedule().map_err(wrap)?;
        self.sampling.projection.validate().map_err(wrap)?;
        self.arch.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        if self.train.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if !(self.train.lr_decay <= 1.0) {
            return Err(Error::Config("decay must lie in (0, 1]".into()));
        }
        crate::cascade::plan_cascade(self.r, self.big_r, self.k).map_err(wrap)?;
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        self.train.weights
    }

    pub fn projection(&self) -> ProjectionParams {
        self.sampling.projection
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse_str(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Optimizer;

    #[test]
    fn defaults() {
        let c = RunConfig::parse_str("").unwrap();
        assert_eq!(c.sampling.steps, 1000);
        assert_eq!(c.sampling.beta_min, 1e-4);
        assert_eq!(c.sampling.beta_max, 0.02);
        assert_eq!(c.sampling.projection.lambda_mix, 0.5);
        assert!(c.sampling.projection.match_noise);
        assert_eq!(c.arch.heads, 12);
        assert_eq!((c.r, c.big_r, c.k), (16, 32, 2));
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.train.lr0, 1e-4);
        assert_eq!(c.train.optimizer, Optimizer::Sgd);
        assert_eq!((c.weights().lambda1, c.weights().lambda2), (0.1, 2.0));
    }

    #[test]
    fn parses_values_and_comments() {
        let text = "# toy\nT = 100\nbeta_max=0.2 # end\n\nmode = baseline\nmatch_noise = false\noptimizer = adam\ndata = /tmp/x\n";
        let c: RunConfig = text.parse().unwrap();
        assert_eq!(c.sampling.steps, 100);
        assert_eq!(c.sampling.beta_max, 0.2);
        assert_eq!(c.mode, Mode::Baseline);
        assert!(!c.sampling.projection.match_noise);
        assert_eq!(c.train.optimizer, Optimizer::Adam);
        assert_eq!(c.data.as_deref(), Some(Path::new("/tmp/x")));
    }

    #[test]
    fn rejects_bad_input() {
        for (text, needle) in [
            ("colour = red", "unknown key \"colour\""),
            ("T 100", "line 1: expected key = value"),
            ("\nT = many", "line 2: bad value"),
            ("match_noise = maybe", "bad boolean"),
            ("heads = 7", "not divisible"),
            ("R = 48", "power"),
            ("lambda_mix = 2", "mixing weight"),
            ("decay = 1.5", "decay"),
        ] {
            let err = RunConfig::parse_str(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
            assert!(err.to_string().contains(needle), "{text}: {err}");
        }
    }
}
