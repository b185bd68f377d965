//! Command-line front end: `train`, `ur`, `eval`, `dwt`, `synth`, `selftest`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use crate::cascade::{bicubic_x2, plan_cascade, run_cascade, Mode, StepContext};
use crate::config::RunConfig;
use crate::data::{load_dataset, load_png, load_tensor, make_synthetic_dataset, save_dataset, save_png, save_tensor};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::metrics::{evaluate, MetricReport};
use crate::networks::Models;
use crate::selftest;
use crate::trainer::{final_model_path, load_bundle, Trainer};
use crate::wavelet::dwt2;

pub const THREADS_ENV: &str = "WDUR_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "wavediffur",
    version,
    about = "Wavelet-domain cascaded diffusion super-resolution"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the x2 model; writes model.wdur, periodic checkpoints and loss.csv.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset root (overrides `data` in the config).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory (overrides `out` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Upscale an image by a power of two with the self-cascade.
    Ur {
        /// Input image (.png or .wdtn).
        #[arg(long)]
        input: PathBuf,
        /// Reference image, required in csp mode.
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long)]
        scale: usize,
        #[arg(long, default_value = "csp")]
        mode: String,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output image (.png or .wdtn).
        #[arg(long)]
        out: PathBuf,
        /// Also write every intermediate level next to the output.
        #[arg(long)]
        dump_levels: bool,
    },
    /// Metrics for every ground-truth image with a same-named prediction.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        #[arg(long)]
        csv: PathBuf,
        /// Value written to the `scale` column.
        #[arg(long, default_value_t = 1)]
        scale: usize,
    },
    /// Write the four Haar bands of an image as tensors.
    Dwt {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_prefix: PathBuf,
    },
    /// Generate a procedural (LR, ref, HR) dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        hr_size: usize,
        /// Number of x2 levels between LR and HR.
        #[arg(long, default_value_t = 1)]
        levels: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the built-in invariant suite.
    Selftest,
}

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

pub fn read_image(path: &Path) -> Result<ImageTensor> {
    if is_png(path) {
        load_png(path)
    } else {
        load_tensor(path)
    }
}

pub fn write_image(path: &Path, img: &ImageTensor) -> Result<()> {
    if is_png(path) {
        save_png(path, img)
    } else {
        save_tensor(path, img)
    }
}

/// Exit status and the text to print on stdout.
pub struct Outcome {
    pub code: i32,
    pub stdout: String,
}

/// Parse `args` (program name first) and run the command.
pub fn run<I, T>(args: I) -> Result<Outcome>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            return Ok(Outcome {
                code: 0,
                stdout: e.to_string(),
            })
        }
        Err(e) => return Err(Error::Usage(e.to_string())),
    };
    match cli.command {
        Command::Train { config, data, out } => cmd_train(config.as_deref(), data, out),
        Command::Ur {
            input,
            reference,
            scale,
            mode,
            ckpt,
            seed,
            out,
            dump_levels,
        } => {
            let mode: Mode = mode.parse().map_err(|e: Error| Error::Usage(e.to_string()))?;
            cmd_ur(&UrArgs {
                input,
                reference,
                scale,
                mode,
                ckpt,
                seed,
                out,
                dump_levels,
            })
        }
        Command::Eval {
            pred_dir,
            gt_dir,
            csv,
            scale,
        } => cmd_eval(&pred_dir, &gt_dir, &csv, scale),
        Command::Dwt { input, out_prefix } => cmd_dwt(&input, &out_prefix),
        Command::Synth {
            out,
            n,
            hr_size,
            levels,
            seed,
        } => {
            let set = make_synthetic_dataset(seed, n, hr_size, levels)?;
            save_dataset(&out, &set)?;
            Ok(Outcome {
                code: 0,
                stdout: format!("wrote {n} samples to {}\n", out.display()),
            })
        }
        Command::Selftest => cmd_selftest(),
    }
}

pub fn cmd_train(config: Option<&Path>, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<Outcome> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if data.is_some() {
        cfg.data = data;
    }
    if let Some(o) = out {
        cfg.out = o;
    }
    let pairs = match (&cfg.data, cfg.synth_n) {
        (Some(root), _) => load_dataset(root)?,
        (None, n) if n > 0 => make_synthetic_dataset(cfg.synth_seed, n, cfg.synth_hr, 1)?,
        _ => return Err(Error::Usage("no training data: pass --data or set synth_n".into())),
    };
    let models = Models::new(cfg.arch.clone(), cfg.init_seed)?;
    let mut trainer = Trainer::new(cfg.train.clone(), cfg.sampling.clone(), models)?;
    let logs = trainer.fit(&pairs, Some(&cfg.out))?;
    let last = logs.last().expect("at least one step");
    Ok(Outcome {
        code: 0,
        stdout: format!(
            "trained {} steps on {} pairs; final l_total {:.6}; model {}\n",
            logs.len(),
            pairs.len(),
            last.l_total,
            final_model_path(&cfg.out).display()
        ),
    })
}

pub struct UrArgs {
    pub input: PathBuf,
    pub reference: Option<PathBuf>,
    pub scale: usize,
    pub mode: Mode,
    pub ckpt: PathBuf,
    pub seed: u64,
    pub out: PathBuf,
    pub dump_levels: bool,
}

fn level_path(out: &Path, level: usize) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let name = match out.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}_level{level}.{ext}"),
        None => format!("{stem}_level{level}"),
    };
    out.with_file_name(name)
}

pub fn cmd_ur(args: &UrArgs) -> Result<Outcome> {
    if args.scale == 0 || !args.scale.is_power_of_two() {
        return Err(Error::Usage(format!(
            "--scale must be a power of 2, got {}",
            args.scale
        )));
    }
    if args.mode == Mode::Csp && args.reference.is_none() {
        return Err(Error::Usage("--mode csp needs --ref".into()));
    }
    let lr = read_image(&args.input)?;
    let reference = args.reference.as_deref().map(read_image).transpose()?;
    let (models, sampling) = load_bundle(&args.ckpt)?;
    let sched = sampling.schedule()?;
    let ctx = StepContext {
        models: &models,
        sched: &sched,
        projection: &sampling.projection,
    };
    let r = lr.height();
    let cfg = plan_cascade(r, r * args.scale, 2)?
        .with_mode(args.mode)
        .with_seed(args.seed);
    let levels = run_cascade(&lr, reference.as_ref(), &cfg, &ctx, &bicubic_x2)?;
    let result = levels.last().expect("input level");
    write_image(&args.out, result)?;
    if args.dump_levels {
        for (i, img) in levels.iter().enumerate() {
            write_image(&level_path(&args.out, i), img)?;
        }
    }
    Ok(Outcome {
        code: 0,
        stdout: format!(
            "{}x{} -> {}x{} in {} x2 steps ({} mode); wrote {}\n",
            lr.height(),
            lr.width(),
            result.height(),
            result.width(),
            cfg.d,
            cfg.mode,
            args.out.display()
        ),
    })
}

fn image_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "wdtn")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Thread count for evaluation from `WDUR_THREADS` (0 or unset: rayon default).
pub fn eval_threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Usage(format!("{THREADS_ENV} must be a non-negative integer, got {v:?}"))),
        Err(_) => Ok(0),
    }
}

pub fn cmd_eval(pred_dir: &Path, gt_dir: &Path, csv_path: &Path, scale: usize) -> Result<Outcome> {
    let gts = image_files(gt_dir)?;
    let preds = image_files(pred_dir)?;
    if gts.is_empty() {
        return Err(Error::Precondition(format!("no images in {}", gt_dir.display())));
    }
    let missing: Vec<_> = gts.keys().filter(|k| !preds.contains_key(*k)).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::Precondition(format!(
            "no prediction for: {}",
            missing.join(", ")
        )));
    }
    let jobs: Vec<(&String, &PathBuf, &PathBuf)> = gts.iter().map(|(id, g)| (id, &preds[id], g)).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(eval_threads()?)
        .build()
        .map_err(|e| Error::Parameter(e.to_string()))?;
    let rows: Vec<Result<(String, MetricReport)>> = pool.install(|| {
        jobs.par_iter()
            .map(|(id, p, g)| Ok(((*id).clone(), evaluate(&read_image(p)?, &read_image(g)?)?)))
            .collect()
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let csv_err = |e: csv::Error| Error::io(csv_path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(csv_path).map_err(csv_err)?;
    w.write_record(["image_id", "scale", "psnr", "ssim", "sam", "sre", "ag"])
        .map_err(csv_err)?;
    for (id, m) in &rows {
        w.write_record([
            id.clone(),
            scale.to_string(),
            m.psnr.to_string(),
            m.ssim.to_string(),
            m.sam.to_string(),
            m.sre.to_string(),
            m.ag.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(csv_path, e))?;
    let n = rows.len() as f64;
    let mean_psnr = rows.iter().map(|(_, m)| m.psnr).sum::<f64>() / n;
    Ok(Outcome {
        code: 0,
        stdout: format!(
            "{} images, mean psnr {mean_psnr:.4}; wrote {}\n",
            rows.len(),
            csv_path.display()
        ),
    })
}

pub fn cmd_dwt(input: &Path, prefix: &Path) -> Result<Outcome> {
    let bands = dwt2(&read_image(input)?)?;
    let base = prefix.to_string_lossy();
    let mut written = Vec::new();
    for (name, band) in [("A", &bands.a), ("V", &bands.v), ("H", &bands.h), ("D", &bands.d)] {
        let path = PathBuf::from(format!("{base}_{name}.wdtn"));
        save_tensor(&path, band)?;
        written.push(path.display().to_string());
    }
    Ok(Outcome {
        code: 0,
        stdout: format!("{}\n", written.join("\n")),
    })
}

pub fn cmd_selftest() -> Result<Outcome> {
    let results = selftest::run_all();
    let ok = results.iter().all(|r| r.passed);
    Ok(Outcome {
        code: if ok { 0 } else { 1 },
        stdout: selftest::format_table(&results),
    })
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Usage(_) | Error::Config(_) => 2,
        _ => 1,
    }
}
