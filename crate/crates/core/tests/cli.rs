use std::path::Path;
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wavediffur::data::{load_tensor, save_png, save_tensor};
use wavediffur::metrics::evaluate;
use wavediffur::networks::{ArchConfig, Models};
use wavediffur::trainer::{save_bundle, SamplingConfig};
use wavediffur::wavelet::dwt2;
use wavediffur::ImageTensor;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wavediffur"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wavediffur"))
        .args(args)
        .env(key, value)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Untrained model with a short schedule so sampling is quick.
fn small_bundle(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("small.wdur");
    let arch = ArchConfig {
        base_width: 8,
        temb_dim: 8,
        feat_width: 8,
        heads: 2,
        attn_dim: 8,
        ..ArchConfig::default()
    };
    let sampling = SamplingConfig {
        steps: 8,
        beta_max: 0.2,
        ..SamplingConfig::default()
    };
    save_bundle(&path, &Models::new(arch, 3).unwrap(), &sampling).unwrap();
    path
}

#[test]
fn usage_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let bad_scale = run(&[
        "ur", "--input", "x.png", "--scale", "3", "--ckpt", "m.wdur", "--out", "y.png",
    ]);
    assert_eq!(bad_scale.status.code(), Some(2));
    assert!(stderr(&bad_scale).contains("power of 2"), "{}", stderr(&bad_scale));

    let unknown = run(&["dwt", "--input", "a.png", "--out-prefix", "b", "--colour"]);
    assert_eq!(unknown.status.code(), Some(2));

    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "T = 100\nbeta_max 0.2\n").unwrap();
    let malformed = run(&["train", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(malformed.status.code(), Some(2));
    assert!(stderr(&malformed).contains("line 2"), "{}", stderr(&malformed));

    let missing = run(&["frobnicate"]);
    assert_ne!(missing.status.code(), Some(0));
}

#[test]
fn selftest_reports_every_check() {
    let out = run(&["selftest"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 9, "{text}");
    assert!(text.contains("0 failed"));
}

#[test]
fn dwt_writes_four_bands() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = ImageTensor::uniform(12, 8, 3, &mut rng);
    let input = dir.path().join("img.wdtn");
    save_tensor(&input, &img).unwrap();
    let prefix = dir.path().join("bands");
    let out = run(&["dwt", "--input", p(&input), "--out-prefix", p(&prefix)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let bands = dwt2(&img).unwrap();
    for (name, band) in [("A", &bands.a), ("V", &bands.v), ("H", &bands.h), ("D", &bands.d)] {
        let got = load_tensor(dir.path().join(format!("bands_{name}.wdtn"))).unwrap();
        assert_eq!(&got, band, "{name}");
    }
}

#[test]
fn ur_scale_four_quadruples_size() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = small_bundle(dir.path());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input = dir.path().join("in.png");
    save_png(&input, &ImageTensor::uniform(16, 16, 3, &mut rng)).unwrap();
    let reference = dir.path().join("ref.png");
    save_png(&reference, &ImageTensor::uniform(24, 24, 3, &mut rng)).unwrap();
    for mode in ["baseline", "csp"] {
        let out = dir.path().join(format!("{mode}.wdtn"));
        let res = run(&[
            "ur",
            "--input",
            p(&input),
            "--ref",
            p(&reference),
            "--scale",
            "4",
            "--mode",
            mode,
            "--ckpt",
            p(&ckpt),
            "--seed",
            "5",
            "--out",
            p(&out),
            "--dump-levels",
        ]);
        assert!(res.status.success(), "{}", stderr(&res));
        assert_eq!(load_tensor(&out).unwrap().shape(), [64, 64, 3]);
        for (i, size) in [16, 32, 64].into_iter().enumerate() {
            let level = load_tensor(dir.path().join(format!("{mode}_level{i}.wdtn"))).unwrap();
            assert_eq!(level.shape(), [size, size, 3]);
        }
    }
    let png_out = dir.path().join("out.png");
    let res = run(&[
        "ur",
        "--input",
        p(&input),
        "--scale",
        "2",
        "--mode",
        "baseline",
        "--ckpt",
        p(&ckpt),
        "--out",
        p(&png_out),
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
    assert_eq!(wavediffur::data::load_png(&png_out).unwrap().shape(), [32, 32, 3]);

    let no_ref = run(&[
        "ur",
        "--input",
        p(&input),
        "--scale",
        "2",
        "--ckpt",
        p(&ckpt),
        "--out",
        p(&png_out),
    ]);
    assert_eq!(no_ref.status.code(), Some(2), "csp is the default mode and needs --ref");
}

#[test]
fn eval_csv_sorted_with_all_columns() {
    let dir = tempfile::tempdir().unwrap();
    let (pred_dir, gt_dir) = (dir.path().join("pred"), dir.path().join("gt"));
    std::fs::create_dir_all(&pred_dir).unwrap();
    std::fs::create_dir_all(&gt_dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut expected = Vec::new();
    for id in ["c", "a", "b"] {
        let gt = ImageTensor::uniform(16, 16, 3, &mut rng);
        let noise = ImageTensor::uniform(16, 16, 3, &mut rng);
        let pred = gt.axpby(0.9, &noise, 0.1).unwrap();
        save_tensor(gt_dir.join(format!("{id}.wdtn")), &gt).unwrap();
        save_tensor(pred_dir.join(format!("{id}.wdtn")), &pred).unwrap();
        expected.push((id.to_string(), evaluate(&pred, &gt).unwrap()));
    }
    expected.sort_by(|a, b| a.0.cmp(&b.0));
    let csv_path = dir.path().join("m.csv");
    let out = run_env(
        &[
            "eval",
            "--pred-dir",
            p(&pred_dir),
            "--gt-dir",
            p(&gt_dir),
            "--csv",
            p(&csv_path),
            "--scale",
            "4",
        ],
        "WDUR_THREADS",
        "2",
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let mut reader = csv::Reader::from_path(&csv_path).unwrap();
    assert_eq!(
        reader.headers().unwrap().iter().collect::<Vec<_>>(),
        ["image_id", "scale", "psnr", "ssim", "sam", "sre", "ag"]
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 3);
    for (row, (id, m)) in rows.iter().zip(&expected) {
        assert_eq!(&row[0], id);
        assert_eq!(&row[1], "4");
        let vals: Vec<f64> = (2..7).map(|i| row[i].parse().unwrap()).collect();
        assert_eq!(vals, [m.psnr, m.ssim, m.sam, m.sre, m.ag]);
    }

    let bad = run_env(
        &[
            "eval",
            "--pred-dir",
            p(&pred_dir),
            "--gt-dir",
            p(&gt_dir),
            "--csv",
            p(&csv_path),
        ],
        "WDUR_THREADS",
        "many",
    );
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn train_then_upscale() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let synth = run(&["synth", "--out", p(&data), "--n", "4", "--hr-size", "16", "--seed", "9"]);
    assert!(synth.status.success(), "{}", stderr(&synth));
    let cfg = dir.path().join("toy.cfg");
    std::fs::write(
        &cfg,
        "# tiny run\nT = 8\nbeta_max = 0.2\nbase_width = 8\ntemb_dim = 8\nfeat_width = 8\nheads = 2\nattn_dim = 8\n\
         steps = 4\nbatch = 2\noptimizer = adam\nlr0 = 1e-3\ncheckpoint_every = 2\n",
    )
    .unwrap();
    let out_dir = dir.path().join("run");
    let res = run(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out_dir)]);
    assert!(res.status.success(), "{}", stderr(&res));
    for f in ["model.wdur", "loss.csv", "ckpt_000002.wdur", "ckpt_000004.wdur"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let loss = std::fs::read_to_string(out_dir.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 5);

    let lr = data.join("0000").join("lr.wdtn");
    let reference = data.join("0000").join("ref.wdtn");
    let model = out_dir.join("model.wdur");
    let outs: Vec<Vec<u8>> = ["x.wdtn", "y.wdtn"]
        .iter()
        .map(|name| {
            let o = dir.path().join(name);
            let res = run(&[
                "ur",
                "--input",
                p(&lr),
                "--ref",
                p(&reference),
                "--scale",
                "2",
                "--ckpt",
                p(&model),
                "--seed",
                "1",
                "--out",
                p(&o),
            ]);
            assert!(res.status.success(), "{}", stderr(&res));
            std::fs::read(o).unwrap()
        })
        .collect();
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn shipped_toy_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.cfg");
    let cfg = wavediffur::config::RunConfig::load(path).unwrap();
    assert_eq!(cfg.synth_n, 200);
    assert_eq!(cfg.sampling.steps, 100);
    assert_eq!(cfg.train.steps, 1500);
}
