use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::data::{hflip, random_crop, Dataset};
use super::degrade::{degrade_with_seed, mix_seed, DegradationSpec};
use super::eval::evaluate;
use super::metrics::psnr;
use crate::arch::{Checkpoint, SerpentModel};
use crate::error::{Error, Result};
use crate::nn::{store_grads, Module};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

pub const METRICS_LOG: &str = "metrics.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Images per optimizer step; the step uses the mean loss.
    pub batch_size: usize,
    pub seed: u64,
    /// Square random-crop extent in pixels; `None` trains on whole images.
    pub crop_size: Option<usize>,
    /// Random horizontal flips.
    pub flip: bool,
    /// Images drawn per epoch; `None` is one pass over the training split.
    pub iters_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 5e-4,
            batch_size: 1,
            seed: 0,
            crop_size: Some(64),
            flip: true,
            iters_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "train.learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.crop_size == Some(0) || self.iters_per_epoch == Some(0) {
            return Err(Error::Config(
                "train.crop_size and train.iters_per_epoch must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Adam with bias correction, β = (0.9, 0.999), ε = 1e-8.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update from the gradients stored on the module's parameters.
    pub fn update<M: Module<T> + ?Sized>(&mut self, module: &mut M) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (T::of(self.beta1), T::of(self.beta2), T::of(self.lr), T::of(self.eps));
        let (c1, c2) = (T::of(c1), T::of(c2));
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        let mut i = 0;
        module.visit_mut("", &mut |_, p| {
            if m_all.len() <= i {
                m_all.push(Tensor::zeros(p.shape()));
                v_all.push(Tensor::zeros(p.shape()));
            }
            let Some(grad) = p.take_grad() else {
                i += 1;
                return;
            };
            let (m, v) = (m_all[i].data_mut(), v_all[i].data_mut());
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                let g = grad[k];
                m[k] = b1 * m[k] + (T::one() - b1) * g;
                v[k] = b2 * v[k] + (T::one() - b2) * g * g;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
            i += 1;
        });
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training L1 loss over the epoch.
    pub loss: f64,
    /// Mean training-crop PSNR before each step, dB.
    pub train_psnr: f64,
    /// Validation PSNR, dB.
    pub psnr: f64,
    pub ssim: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Weights after the last epoch.
    pub model: SerpentModel<T>,
    /// Best validation PSNR weights.
    pub best: Checkpoint<T>,
    /// Records of the epochs run by this call.
    pub history: Vec<EpochRecord>,
}

struct State<T> {
    model: SerpentModel<T>,
    adam: Adam<T>,
    done: usize,
    best: Option<(usize, f64)>,
}

/// Trains from scratch. With `out_dir`, writes the metrics log, the best-validation
/// checkpoint and a resumable checkpoint of the latest epoch.
pub fn train<T: Scalar>(
    model: SerpentModel<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    spec: &DegradationSpec,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(METRICS_LOG), "")?;
    }
    let state = State {
        model,
        adam: Adam::new(cfg.learning_rate),
        done: 0,
        best: None,
    };
    run(state, data, cfg, spec, out_dir)
}

/// Continues from a checkpoint written as `last.ckpt`, up to `cfg.epochs` in total.
/// The per-epoch random streams depend only on the seed and epoch number, so the
/// continued run matches an uninterrupted one.
pub fn resume<T: Scalar>(
    checkpoint: &Checkpoint<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    spec: &DegradationSpec,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    let model = checkpoint.to_model(None)?;
    let meta = |key: &str| {
        checkpoint
            .meta
            .get(key)
            .ok_or_else(|| Error::Format(format!("checkpoint is not resumable: missing `{key}`")))
    };
    let done = meta("epoch")?
        .as_u64()
        .ok_or_else(|| Error::Format("`epoch` is not an integer".into()))? as usize;
    let mut adam = Adam::new(cfg.learning_rate);
    adam.step = meta("adam_step")?
        .as_u64()
        .ok_or_else(|| Error::Format("`adam_step` is not an integer".into()))?;
    let best = serde_json::from_value::<Option<(usize, f64)>>(meta("best")?.clone())?;
    for name in model.param_names() {
        let get = |key: String| {
            checkpoint
                .tensor(&key)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint is not resumable: missing `{key}`")))
        };
        adam.m.push(get(format!("adam.m.{name}"))?);
        adam.v.push(get(format!("adam.v.{name}"))?);
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    run(
        State {
            model,
            adam,
            done,
            best,
        },
        data,
        cfg,
        spec,
        out_dir,
    )
}

fn run<T: Scalar>(
    mut st: State<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    spec: &DegradationSpec,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let (train_set, val_set) = data.split();
    let mut best_ckpt = Checkpoint::from_model(&st.model);
    if let Some(dir) = out_dir.filter(|_| st.done > 0) {
        if let Ok(ck) = Checkpoint::load(dir.join(BEST_CHECKPOINT)) {
            best_ckpt = ck;
        }
    }
    let mut history = Vec::new();
    for epoch in st.done + 1..=cfg.epochs {
        let start = Instant::now();
        let (loss, train_psnr) = run_epoch(&mut st, train_set, cfg, spec, epoch)?;
        let report = evaluate(&st.model, val_set, spec, None)?;
        let record = EpochRecord {
            epoch,
            loss,
            train_psnr,
            psnr: report.mean_psnr,
            ssim: report.mean_ssim,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        log::info!(
            "epoch {epoch}: loss {loss:.5} train {train_psnr:.3} dB, val {:.3} dB / {:.4}",
            record.psnr,
            record.ssim
        );
        st.done = epoch;
        if st.best.is_none_or(|(_, b)| record.psnr > b) {
            st.best = Some((epoch, record.psnr));
            best_ckpt = Checkpoint::from_model(&st.model);
            best_ckpt.meta.insert("epoch".into(), json!(epoch));
            best_ckpt.meta.insert("psnr".into(), json!(record.psnr));
            best_ckpt.meta.insert("ssim".into(), json!(record.ssim));
            if let Some(dir) = out_dir {
                best_ckpt.save(dir.join(BEST_CHECKPOINT))?;
            }
        }
        if let Some(dir) = out_dir {
            let mut log = OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join(METRICS_LOG))?;
            writeln!(log, "{}", serde_json::to_string(&record)?)?;
            last_checkpoint(&st, cfg, spec)?.save(dir.join(LAST_CHECKPOINT))?;
        }
        history.push(record);
    }
    Ok(TrainOutcome {
        model: st.model,
        best: best_ckpt,
        history,
    })
}

fn last_checkpoint<T: Scalar>(st: &State<T>, cfg: &TrainConfig, spec: &DegradationSpec) -> Result<Checkpoint<T>> {
    let mut ck = Checkpoint::from_model(&st.model);
    let names = st.model.param_names();
    for (i, name) in names.iter().enumerate() {
        if let (Some(m), Some(v)) = (st.adam.m.get(i), st.adam.v.get(i)) {
            ck.tensors.push((format!("adam.m.{name}"), m.clone()));
            ck.tensors.push((format!("adam.v.{name}"), v.clone()));
        }
    }
    ck.meta.insert("epoch".into(), json!(st.done));
    ck.meta.insert("adam_step".into(), json!(st.adam.step));
    ck.meta.insert("best".into(), serde_json::to_value(st.best)?);
    ck.meta.insert("train".into(), serde_json::to_value(cfg)?);
    ck.meta.insert("degradation".into(), serde_json::to_value(spec)?);
    Ok(ck)
}

/// Image indices for one epoch: shuffled passes over the set, cut to `count`.
fn epoch_order<R: Rng>(n: usize, count: usize, rng: &mut R) -> Vec<usize> {
    let mut order = Vec::with_capacity(count);
    while order.len() < count {
        let mut pass: Vec<usize> = (0..n).collect();
        pass.shuffle(rng);
        order.extend(pass);
    }
    order.truncate(count);
    order
}

fn run_epoch<T: Scalar>(
    st: &mut State<T>,
    set: &[(String, Tensor<T>)],
    cfg: &TrainConfig,
    spec: &DegradationSpec,
    epoch: usize,
) -> Result<(f64, f64)> {
    st.adam.lr = cfg.learning_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, epoch as u64]));
    let count = cfg.iters_per_epoch.unwrap_or(set.len());
    let order = epoch_order(set.len(), count, &mut rng);
    let (mut loss_sum, mut psnr_sum) = (0.0, 0.0);
    for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
        let mut g = Graph::new();
        let mut total = None;
        for &idx in batch {
            let (name, img) = &set[idx];
            let mut clean = match cfg.crop_size {
                Some(s) => random_crop(img, s, &mut rng).map_err(|e| Error::data(name, e.to_string()))?,
                None => img.clone(),
            };
            if cfg.flip && rng.random_bool(0.5) {
                clean = hflip(&clean);
            }
            let noisy = degrade_with_seed(&clean, spec, rng.random())?;
            let x = g.input(noisy);
            let y = st.model.forward(&mut g, x)?;
            psnr_sum += psnr(g.value(y)?, &clean)?;
            let t = g.input(clean);
            let d = g.sub(y, t)?;
            let a = g.abs(d)?;
            let l = g.mean(a)?;
            total = Some(match total {
                Some(acc) => g.add(acc, l)?,
                None => l,
            });
        }
        let total = total.expect("non-empty batch");
        let loss = g.scale(total, T::of(1.0 / batch.len() as f64))?;
        let value = g.value(loss)?.item().expect("scalar loss").as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                loss: value,
                epoch,
                step,
            });
        }
        loss_sum += value * batch.len() as f64;
        g.backward(loss)?;
        store_grads(&g, &mut st.model);
        st.adam.update(&mut st.model);
    }
    Ok((loss_sum / count as f64, psnr_sum / count as f64))
}
