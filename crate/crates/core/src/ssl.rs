//! Momentum-contrast pretraining.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentationConfig};
use crate::dataio::{mix_seed, IqFrame, UnlabeledView};
use crate::error::{Error, Result};
use crate::model::checkpoint::{self, Provenance, Stage};
use crate::model::EncoderPair;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub alpha: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 100,
            batch_size: 512,
            tau: 1.0,
            alpha: 0.99,
            lr: 0.01,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn desk() -> Self {
        PretrainConfig {
            epochs: 20,
            batch_size: 64,
            ..Default::default()
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.epochs == 0 {
            v.push("ssl.epochs must be at least 1".to_owned());
        }
        if self.batch_size < 2 {
            v.push(format!("ssl.batch_size {} must be at least 2", self.batch_size));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            v.push(format!("ssl.tau {} must be positive", self.tau));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            v.push(format!("ssl.alpha {} must lie in [0, 1]", self.alpha));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            v.push(format!("ssl.lr {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            v.push(format!("ssl.weight_decay {} must be >= 0", self.weight_decay));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unit-norm copy of `v`; a zero vector has no direction and is rejected.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::Contract(format!("cannot normalize a vector of norm {n}")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn check_info_nce_inputs(q: &[f64], k_pos: &[f64], k_negs: &[Vec<f64>], tau: f64) -> Result<()> {
    if k_negs.is_empty() {
        return Err(Error::Contract("info_nce needs at least one negative".into()));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Contract(format!("temperature {tau} must be positive")));
    }
    let d = q.len();
    for v in std::iter::once(k_pos).chain(k_negs.iter().map(Vec::as_slice)) {
        if v.len() != d {
            return Err(Error::Contract(format!("dimension mismatch: {} vs {d}", v.len())));
        }
    }
    for v in std::iter::once(q).chain(std::iter::once(k_pos)).chain(k_negs.iter().map(Vec::as_slice)) {
        if norm(v) == 0.0 {
            return Err(Error::Contract("zero-norm embedding".into()));
        }
    }
    Ok(())
}

/// Logits `[q.k+, q.k-_1, ...] / tau` and their log-sum-exp.
fn logits(q: &[f64], k_pos: &[f64], k_negs: &[Vec<f64>], tau: f64) -> (Vec<f64>, f64) {
    let z: Vec<f64> = std::iter::once(k_pos)
        .chain(k_negs.iter().map(Vec::as_slice))
        .map(|k| dot(q, k) / tau)
        .collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    (z, lse)
}

/// `-log(exp(q.k+/tau) / (exp(q.k+/tau) + sum exp(q.k-/tau)))` on the given
/// vectors as they are; callers normalize first.
pub fn info_nce(q: &[f64], k_pos: &[f64], k_negs: &[Vec<f64>], tau: f64) -> Result<f64> {
    check_info_nce_inputs(q, k_pos, k_negs, tau)?;
    let (z, lse) = logits(q, k_pos, k_negs, tau);
    Ok(lse - z[0])
}

/// Gradient of `info_nce` with respect to `q`.
pub fn info_nce_grad_q(q: &[f64], k_pos: &[f64], k_negs: &[Vec<f64>], tau: f64) -> Result<Vec<f64>> {
    check_info_nce_inputs(q, k_pos, k_negs, tau)?;
    let (z, lse) = logits(q, k_pos, k_negs, tau);
    let mut g = vec![0.0; q.len()];
    for (j, k) in std::iter::once(k_pos).chain(k_negs.iter().map(Vec::as_slice)).enumerate() {
        let w = (z[j] - lse).exp() - if j == 0 { 1.0 } else { 0.0 };
        for (gi, ki) in g.iter_mut().zip(k) {
            *gi += w * ki / tau;
        }
    }
    Ok(g)
}

/// Four embedding sets for one batch of waveforms, rows L2-normalized.
/// Row `i` of every set comes from waveform `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub q1: Vec<Vec<f64>>,
    pub q2: Vec<Vec<f64>>,
    pub k1: Vec<Vec<f64>>,
    pub k2: Vec<Vec<f64>>,
}

impl ContrastiveBatch {
    pub fn new(q1: Vec<Vec<f64>>, q2: Vec<Vec<f64>>, k1: Vec<Vec<f64>>, k2: Vec<Vec<f64>>) -> Result<Self> {
        let b = q1.len();
        if b < 2 {
            return Err(Error::Contract(format!("batch size {b} leaves no negatives")));
        }
        if [q2.len(), k1.len(), k2.len()].iter().any(|&n| n != b) {
            return Err(Error::Contract("embedding sets differ in batch size".into()));
        }
        let norm_all = |m: Vec<Vec<f64>>| -> Result<Vec<Vec<f64>>> { m.iter().map(|r| l2_normalize(r)).collect() };
        Ok(ContrastiveBatch {
            q1: norm_all(q1)?,
            q2: norm_all(q2)?,
            k1: norm_all(k1)?,
            k2: norm_all(k2)?,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.q1.len()
    }

    /// Symmetrized loss: `q1_i` against `k2` and `q2_i` against `k1`, the
    /// other rows serving as negatives, averaged over all `2B` terms.
    pub fn loss(&self, tau: f64) -> Result<f64> {
        let b = self.batch_size();
        let mut total = 0.0;
        for (q, k) in [(&self.q1, &self.k2), (&self.q2, &self.k1)] {
            for i in 0..b {
                let negs: Vec<Vec<f64>> = (0..b).filter(|&j| j != i).map(|j| k[j].clone()).collect();
                total += info_nce(&q[i], &k[i], &negs, tau)?;
            }
        }
        Ok(total / (2 * b) as f64)
    }
}

/// Mean InfoNCE of query rows against key rows, other key rows serving as
/// negatives. Inputs are `[B, d]` and are normalized here.
fn one_sided_loss(q: &Tensor, k: &Tensor, tau: f64) -> Result<Tensor> {
    let q = q.broadcast_div(&q.sqr()?.sum_keepdim(1)?.sqrt()?)?;
    let k = k.broadcast_div(&k.sqr()?.sum_keepdim(1)?.sqrt()?)?;
    let logits = (q.matmul(&k.t()?)? / tau)?;
    let b = logits.dim(0)?;
    let lse = {
        let m = logits.max_keepdim(D::Minus1)?.detach();
        (logits.broadcast_sub(&m)?.exp()?.sum_keepdim(D::Minus1)?.log()? + m)?.squeeze(1)?
    };
    let eye = Tensor::eye(b, logits.dtype(), logits.device())?;
    let pos = (logits * eye)?.sum(1)?;
    Ok((lse - pos)?.mean_all()?)
}

/// Tensor form of `ContrastiveBatch::loss` that keeps the autograd graph.
/// Works in whatever float dtype the inputs carry.
pub fn batch_contrastive_loss(q1: &Tensor, q2: &Tensor, k1: &Tensor, k2: &Tensor, tau: f64) -> Result<Tensor> {
    let (b, _) = q1.dims2()?;
    if b < 2 {
        return Err(Error::Contract(format!("batch size {b} leaves no negatives")));
    }
    for t in [q2, k1, k2] {
        if t.dims() != q1.dims() {
            return Err(Error::Contract(format!("embedding shape {:?} vs {:?}", t.dims(), q1.dims())));
        }
    }
    let a = one_sided_loss(q1, k2, tau)?;
    let c = one_sided_loss(q2, k1, tau)?;
    Ok(((a + c)? * 0.5)?)
}

/// Stacks frames into a `[n, 1, 2, 128]` f32 tensor.
pub fn frames_to_tensor(frames: &[IqFrame], device: &Device) -> Result<Tensor> {
    let mut data = Vec::with_capacity(frames.len() * 256);
    for f in frames {
        data.extend(f.values().map(|v| v as f32));
    }
    Ok(Tensor::from_vec(data, (frames.len(), 1, 2, 128), device)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub history: Vec<PretrainEpoch>,
    pub final_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
    pub best_epoch: usize,
    pub final_provenance: Option<Provenance>,
}

fn write_jsonl<T: Serialize>(file: &mut Option<File>, path: &Path, record: &T) -> Result<()> {
    if let Some(f) = file.as_mut() {
        let line = serde_json::to_string(record)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn save_pair(dir: &Path, pair: &EncoderPair, seed: u64, epoch: usize) -> Result<Provenance> {
    checkpoint::save(
        dir,
        &pair.query.store,
        &pair.arch,
        &Provenance {
            stage: Stage::Pretrain,
            parent_hash: None,
            seed,
            epoch,
            weights_hash: String::new(),
        },
    )
}

/// Trains `pair` on `data`; labels never reach this function. With `out_dir`
/// set, writes `pretrain_metrics.jsonl` and the `final/` and `best/`
/// checkpoints (and `diverged/` on a non-finite loss).
pub fn pretrain(
    data: &UnlabeledView,
    pair: &mut EncoderPair,
    aug: &AugmentationConfig,
    cfg: &PretrainConfig,
    out_dir: Option<&Path>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    aug.validate()?;
    if data.len() < 2 {
        return Err(Error::Dataset(format!(
            "pretraining needs at least 2 waveforms, got {}",
            data.len()
        )));
    }
    pair.tau = cfg.tau;
    pair.alpha = cfg.alpha;
    let device = Device::Cpu;

    let metrics_path = out_dir.map(|d| d.join("pretrain_metrics.jsonl"));
    let mut metrics = match (&metrics_path, out_dir) {
        (Some(p), Some(d)) => {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            Some(File::create(p).map_err(|e| Error::io(p, e))?)
        }
        _ => None,
    };

    let mut opt = AdamW::new(
        pair.query.store.trainable(""),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[10]));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[11]));
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, 0usize);
    let mut step = 0usize;
    let start = Instant::now();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            // A trailing batch of one has no negatives.
            if chunk.len() < 2 {
                continue;
            }
            let mut v1 = Vec::with_capacity(chunk.len());
            let mut v2 = Vec::with_capacity(chunk.len());
            for &i in chunk {
                v1.push(augment(data.frame(i), aug, &mut aug_rng)?);
                v2.push(augment(data.frame(i), aug, &mut aug_rng)?);
            }
            let x1 = frames_to_tensor(&v1, &device)?;
            let x2 = frames_to_tensor(&v2, &device)?;
            let q1 = pair.query.forward(&x1, true)?;
            let q2 = pair.query.forward(&x2, true)?;
            let k1 = pair.momentum.forward(&x1, true)?;
            let k2 = pair.momentum.forward(&x2, true)?;
            let loss = batch_contrastive_loss(&q1, &q2, &k1, &k2, pair.tau)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            step += 1;
            if !value.is_finite() {
                if let Some(d) = out_dir {
                    save_pair(&d.join("diverged"), pair, cfg.seed, epoch)?;
                }
                return Err(Error::Divergence { epoch, step, loss: value });
            }
            opt.backward_step(&loss)?;
            pair.momentum_step()?;
            sum += value;
            steps += 1;
        }
        let record = PretrainEpoch {
            epoch,
            mean_loss: if steps > 0 { sum / steps as f64 } else { f64::NAN },
            steps,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!("pretrain epoch {epoch}: loss {:.4} ({steps} steps)", record.mean_loss);
        if let Some(p) = &metrics_path {
            write_jsonl(&mut metrics, p, &record)?;
        }
        if record.mean_loss < best.0 {
            best = (record.mean_loss, epoch);
            if let Some(d) = out_dir {
                save_pair(&d.join("best"), pair, cfg.seed, epoch)?;
            }
        }
        history.push(record);
    }

    let final_provenance = match out_dir {
        Some(d) => Some(save_pair(&d.join("final"), pair, cfg.seed, cfg.epochs)?),
        None => None,
    };
    Ok(PretrainOutcome {
        history,
        final_checkpoint: out_dir.map(|d| d.join("final")),
        best_checkpoint: out_dir.map(|d| d.join("best")),
        best_epoch: best.1,
        final_provenance,
    })
}
