//! `train`, `eval`, `profile`, `degrade` and `bench`.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serpent_core::arch::{count_flops, count_params, Checkpoint, SerpentConfig, SerpentModel, Variant};
use serpent_core::harness::{
    self, degrade_with_seed, evaluate, image_seed, list_images, load_image, save_png, Dataset, EvalReport,
    BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_LOG,
};
use serpent_core::ssm::{
    lti_scan_convolutional, lti_scan_recurrent, selective_scan, selective_scan_chunked, selective_scan_counted,
    LtiSystem, OpCounter, SelectiveParams,
};
use serpent_core::tensor::Tensor;

use crate::config::RunConfig;
use crate::CliError;

pub const EVAL_REPORT: &str = "eval_report.json";
pub const RESOLVED_CONFIG: &str = "config.toml";

/// What `train` produced.
#[derive(Debug)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_psnr: Option<f64>,
    pub log: PathBuf,
    pub best: PathBuf,
}

pub fn train(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    let data = Dataset::<f32>::load(&cfg.paths.data_dir, cfg.model.in_channels)?;
    let out = &cfg.paths.out_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join(RESOLVED_CONFIG), cfg.to_toml())?;
    let outcome = match &cfg.paths.checkpoint {
        Some(path) => {
            let ck = Checkpoint::<f32>::load(path)?;
            cfg.model.ensure_matches(&ck.config)?;
            harness::resume(&ck, &data, &cfg.train, &cfg.degradation, Some(out))?
        }
        None => {
            let model = SerpentModel::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
            harness::train(model, &data, &cfg.train, &cfg.degradation, Some(out))?
        }
    };
    let best_psnr = outcome
        .history
        .iter()
        .map(|r| r.psnr)
        .fold(None, |acc: Option<f64>, p| Some(acc.map_or(p, |a| a.max(p))));
    Ok(TrainSummary {
        epochs_run: outcome.history.len(),
        best_psnr,
        log: out.join(METRICS_LOG),
        best: out.join(BEST_CHECKPOINT),
    })
}

/// Which images `eval` scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalSplit {
    All,
    Val,
}

pub fn eval(cfg: &RunConfig, split: EvalSplit, dump: bool) -> Result<(EvalReport, PathBuf), CliError> {
    let path = cfg
        .paths
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.paths.out_dir.join(BEST_CHECKPOINT));
    let model = Checkpoint::<f32>::load(&path)?.to_model(Some(&cfg.model))?;
    let data = Dataset::<f32>::load(&cfg.paths.data_dir, cfg.model.in_channels)?;
    let images = match split {
        EvalSplit::All => &data.items[..],
        EvalSplit::Val => data.split().1,
    };
    let out = &cfg.paths.out_dir;
    fs::create_dir_all(out)?;
    let dump_dir = dump.then(|| out.join("eval_images"));
    let report = evaluate(&model, images, &cfg.degradation, dump_dir.as_deref())?;
    let report_path = out.join(EVAL_REPORT);
    fs::write(&report_path, report.to_json()?)?;
    Ok((report, report_path))
}

/// Writes degraded copies of every image into `out_dir/degraded`, seeding image
/// `i` (in sorted order) from `(degradation.seed, i)`.
pub fn degrade(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    cfg.degradation.validate()?;
    let files = list_images(&cfg.paths.data_dir)?;
    if files.is_empty() {
        return Err(CliError::data(format!(
            "no PNG images in {}",
            cfg.paths.data_dir.display()
        )));
    }
    let dir = cfg.paths.out_dir.join("degraded");
    fs::create_dir_all(&dir)?;
    let mut written = Vec::with_capacity(files.len());
    for (i, path) in files.iter().enumerate() {
        let img: Tensor<f32> = load_image(path, cfg.model.in_channels)?;
        let out = degrade_with_seed(&img, &cfg.degradation, image_seed(cfg.degradation.seed, i as u64))?;
        let target = dir.join(path.file_name().expect("listed file"));
        save_png(&target, &out)?;
        written.push(target);
    }
    Ok(written)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileRow {
    pub variant: Variant,
    pub resolution: usize,
    pub params: usize,
    pub backbone_params: usize,
    pub flops: u64,
    pub attention_flops: u64,
    pub ratio: f64,
}

/// Parameter and FLOPs accounting for every variant built from `model`
/// (patch size replaced) at each square resolution.
pub fn profile(model: &SerpentConfig, resolutions: &[usize]) -> Result<Vec<ProfileRow>, CliError> {
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let cfg = SerpentConfig {
            patch_size: v.patch_size(),
            ..model.clone()
        };
        let params = count_params(&SerpentModel::<f32>::new(cfg.clone(), 0)?);
        for &res in resolutions {
            let f = count_flops(&cfg, res, res)?;
            rows.push(ProfileRow {
                variant: v,
                resolution: res,
                params: params.total,
                backbone_params: params.backbone,
                flops: f.total,
                attention_flops: f.attention_reference,
                ratio: f.attention_ratio(),
            });
        }
    }
    Ok(rows)
}

pub fn profile_table(rows: &[ProfileRow]) -> String {
    let mut s = format!(
        "{:<10} {:>6} {:>10} {:>10} {:>16} {:>18} {:>9}\n",
        "variant", "res", "params", "backbone", "flops", "attention_flops", "ratio"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<10} {:>6} {:>10} {:>10} {:>16} {:>18} {:>9.2}",
            r.variant.name(),
            r.resolution,
            r.params,
            r.backbone_params,
            r.flops,
            r.attention_flops,
            r.ratio
        );
    }
    s
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub lengths: Vec<usize>,
    pub channels: usize,
    pub state_dim: usize,
    pub chunk: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            lengths: vec![1, 64, 128, 256, 512, 1024, 2048],
            channels: 8,
            state_dim: 4,
            chunk: 64,
            repeats: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub length: usize,
    /// Executed operations of the selective scan.
    pub ops: u64,
    /// `ops` divided by the count at half the length, when that length was run.
    pub ops_ratio: Option<f64>,
    pub sequential_us: f64,
    pub chunked_us: f64,
    /// Sequential and chunked selective outputs are identical.
    pub selective_equal: bool,
    pub lti_recurrent_us: f64,
    pub lti_convolutional_us: f64,
    /// Largest relative difference between the two LTI modes.
    pub lti_rel_diff: f64,
}

fn best_time<F: FnMut()>(repeats: usize, mut f: F) -> f64 {
    (0..repeats.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64() * 1e6
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn bench(opts: &BenchOptions) -> Result<Vec<BenchRow>, CliError> {
    if opts.channels == 0 || opts.state_dim == 0 || opts.chunk == 0 {
        return Err(CliError::config("bench channels, state and chunk must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let params = SelectiveParams::<f64>::init(opts.channels, opts.state_dim, &mut rng);
    let a: Vec<f64> = (0..opts.state_dim).map(|i| -0.5 * (i + 1) as f64).collect();
    let lti = LtiSystem::new(a, vec![1.0; opts.state_dim], vec![1.0; opts.state_dim], 0.1)
        .map_err(|e| CliError::runtime(e.to_string()))?
        .discretize();
    let mut rows: Vec<BenchRow> = Vec::new();
    for &len in &opts.lengths {
        if len == 0 {
            return Err(CliError::config("bench lengths must be positive"));
        }
        let u = Tensor::<f64>::randn(&[len, opts.channels], 1.0, &mut rng).into_data();
        let err = |e: serpent_core::ssm::SsmError| CliError::runtime(e.to_string());
        let mut ops = OpCounter::default();
        selective_scan_counted(&params, &u, opts.chunk, &mut ops).map_err(err)?;
        let seq = selective_scan(&params, &u).map_err(err)?;
        let chunked = selective_scan_chunked(&params, &u, opts.chunk).map_err(err)?;
        let u1: Vec<f64> = u.iter().step_by(opts.channels).copied().collect();
        let rec = lti_scan_recurrent(&lti, &u1).map_err(err)?;
        let conv = lti_scan_convolutional(&lti, &u1).map_err(err)?;
        let scale = rec.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let lti_rel_diff = rec.iter().zip(&conv).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale;
        let ops_ratio = rows
            .iter()
            .find(|r| 2 * r.length == len)
            .map(|r| ops.total() as f64 / r.ops as f64);
        rows.push(BenchRow {
            length: len,
            ops: ops.total(),
            ops_ratio,
            sequential_us: best_time(opts.repeats, || {
                let _ = selective_scan(&params, &u);
            }),
            chunked_us: best_time(opts.repeats, || {
                let _ = selective_scan_chunked(&params, &u, opts.chunk);
            }),
            selective_equal: seq == chunked,
            lti_recurrent_us: best_time(opts.repeats, || {
                let _ = lti_scan_recurrent(&lti, &u1);
            }),
            lti_convolutional_us: best_time(opts.repeats, || {
                let _ = lti_scan_convolutional(&lti, &u1);
            }),
            lti_rel_diff,
        });
    }
    Ok(rows)
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut s = format!(
        "{:>7} {:>12} {:>9} {:>12} {:>12} {:>6} {:>12} {:>12} {:>10}\n",
        "L", "ops", "ops_x2", "seq_us", "chunk_us", "equal", "lti_rec_us", "lti_conv_us", "lti_diff"
    );
    for r in rows {
        let ratio = r.ops_ratio.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
        let _ = writeln!(
            s,
            "{:>7} {:>12} {:>9} {:>12.1} {:>12.1} {:>6} {:>12.1} {:>12.1} {:>10.2e}",
            r.length,
            r.ops,
            ratio,
            r.sequential_us,
            r.chunked_us,
            if r.selective_equal { "yes" } else { "NO" },
            r.lti_recurrent_us,
            r.lti_convolutional_us,
            r.lti_rel_diff
        );
    }
    s
}

/// Paths of the resumable and best checkpoints inside an output directory.
pub fn checkpoint_paths(cfg: &RunConfig) -> (PathBuf, PathBuf) {
    (
        cfg.paths.out_dir.join(LAST_CHECKPOINT),
        cfg.paths.out_dir.join(BEST_CHECKPOINT),
    )
}
