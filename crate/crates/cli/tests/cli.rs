use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serpent_cli::commands::{self, BenchOptions};
use serpent_cli::RunConfig;
use serpent_core::harness::{load_image, synthesize_dataset};
use serpent_core::tensor::Tensor;

fn serpent(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_serpent"))
        .args(args)
        .env("SERPENT_LOG", "error")
        .output()
        .expect("run serpent")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> String {
    path.display().to_string()
}

const TINY: [&str; 8] = [
    "model.patch_size=2",
    "model.embed_dim=8",
    "model.depth=1",
    "model.num_scales=2",
    "train.epochs=2",
    "train.crop_size=16",
    "train.iters_per_epoch=2",
    "train.learning_rate=0.002",
];

fn train_args<'a>(data: &'a str, out: &'a str, extra: &[&'a str]) -> Vec<String> {
    let mut v: Vec<String> = vec![
        "train".into(),
        format!("paths.data_dir={data}"),
        format!("paths.out_dir={out}"),
    ];
    v.extend(TINY.iter().map(|s| s.to_string()));
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn run(args: &[String]) -> Output {
    serpent(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

fn dataset(count: usize, size: usize) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synthesize_dataset(&data, count, size, 1).unwrap();
    (dir, data)
}

#[test]
fn missing_data_dir_is_a_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&train_args(
        &p(&dir.path().join("nope")),
        &p(&dir.path().join("o")),
        &[],
    ));
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("nope"));
}

#[test]
fn unknown_key_is_a_bad_input() {
    let out = serpent(&["train", "model.width=3"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("model.width"));
}

#[test]
fn single_image_train_completes_and_seed_changes_log() {
    let (dir, data) = dataset(1, 32);
    let out_a = dir.path().join("a");
    let r = run(&train_args(&p(&data), &p(&out_a), &[]));
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    for f in ["metrics.jsonl", "best.ckpt", "last.ckpt", "config.toml"] {
        assert!(out_a.join(f).exists(), "{f}");
    }
    let log_a = std::fs::read_to_string(out_a.join("metrics.jsonl")).unwrap();
    assert_eq!(log_a.lines().count(), 2);

    let out_b = dir.path().join("b");
    let mut args = vec!["--seed".to_string(), "9".to_string()];
    args.extend(train_args(&p(&data), &p(&out_b), &[]));
    assert_eq!(code(&run(&args)), 0);
    let log_b = std::fs::read_to_string(out_b.join("metrics.jsonl")).unwrap();
    let loss = |log: &str| {
        log.lines()
            .next()
            .unwrap()
            .split("\"loss\":")
            .nth(1)
            .unwrap()
            .split(',')
            .next()
            .unwrap()
            .to_string()
    };
    assert_ne!(loss(&log_a), loss(&log_b));
}

#[test]
fn eval_checks_architecture_and_is_reproducible() {
    let (dir, data) = dataset(2, 32);
    let out = dir.path().join("run");
    // One epoch at zero learning rate keeps the identity-at-init weights.
    let r = run(&train_args(
        &p(&data),
        &p(&out),
        &["train.epochs=1", "train.learning_rate=0"],
    ));
    assert_eq!(code(&r), 0, "{}", stderr(&r));

    let mut mismatch = vec![
        "eval".to_string(),
        format!("paths.data_dir={}", p(&data)),
        format!("paths.out_dir={}", p(&out)),
    ];
    mismatch.extend(TINY.iter().map(|s| s.to_string()));
    mismatch[3] = "model.patch_size=4".into();
    let r = run(&mismatch);
    assert_eq!(code(&r), 3, "{}", stderr(&r));
    assert!(stderr(&r).contains("patch_size"));

    let mut eval = mismatch.clone();
    eval[3] = "model.patch_size=2".into();
    assert_eq!(code(&run(&eval)), 0);
    let first = std::fs::read(out.join("eval_report.json")).unwrap();
    assert_eq!(code(&run(&eval)), 0);
    assert_eq!(std::fs::read(out.join("eval_report.json")).unwrap(), first);

    let report: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(report["mean_psnr"], report["mean_input_psnr"]);
}

#[test]
fn degrade_without_blur_or_noise_is_identity() {
    let (dir, data) = dataset(2, 16);
    let out = dir.path().join("o");
    let r = serpent(&[
        "degrade",
        &format!("paths.data_dir={}", p(&data)),
        &format!("paths.out_dir={}", p(&out)),
        "degradation.kernel_size=1",
        "degradation.noise_sigma=0",
    ]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    for name in ["img_0000.png", "img_0001.png"] {
        let a: Tensor<f32> = load_image(data.join(name), 3).unwrap();
        let b: Tensor<f32> = load_image(out.join("degraded").join(name), 3).unwrap();
        assert_eq!(a, b);
    }
    let r = serpent(&[
        "degrade",
        &format!("paths.data_dir={}", p(&data)),
        "degradation.kernel_size=4",
    ]);
    assert_eq!(code(&r), 2);
}

#[test]
fn profile_ratio_grows_and_backbone_is_constant() {
    let rows = commands::profile(&Default::default(), &[64, 128, 256]).unwrap();
    assert!(rows.iter().all(|r| r.backbone_params == rows[0].backbone_params));
    for v in rows.chunks(3) {
        assert!(v.windows(2).all(|w| w[1].ratio > w[0].ratio));
    }
    let out = serpent(&["profile", "--resolutions", "64,128"]);
    assert_eq!(code(&out), 0);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("Serpent-B") && table.contains("Serpent-H"), "{table}");
}

#[test]
fn bench_counts_are_linear() {
    let rows = commands::bench(&BenchOptions {
        lengths: vec![1, 64, 128, 256],
        channels: 4,
        state_dim: 2,
        chunk: 16,
        repeats: 1,
        seed: 0,
    })
    .unwrap();
    assert_eq!(rows[0].length, 1);
    for r in &rows[2..] {
        let ratio = r.ops_ratio.unwrap();
        assert!((1.9..=2.1).contains(&ratio), "{ratio}");
    }
    assert!(rows.iter().all(|r| r.selective_equal && r.lti_rel_diff <= 1e-5));
    let out = serpent(&["bench", "--lengths", "1,8", "--repeats", "1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn help_lists_every_key() {
    let out = serpent(&["--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for (key, _, _) in serpent_cli::config::KEYS {
        assert!(text.contains(key), "{key}");
    }
}

#[test]
fn shipped_desk_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let cfg = RunConfig::load(Some(&path), &[]).unwrap();
    assert_eq!(cfg.model.patch_size, 4);
    assert_eq!(cfg.model.num_scales, 2);
    assert_eq!(cfg.degradation.sigma(), 1.5);
}
