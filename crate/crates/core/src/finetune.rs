//! Supervised training of a classifier on labeled examples.

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{mix_seed, Dataset, IqFrame};
use crate::error::{Error, Result};
use crate::model::checkpoint::{self, Provenance, Stage};
use crate::model::{Classifier, TensorMap};
use crate::ssl::frames_to_tensor;

/// Probabilities below this are treated as this when taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Validation loss must drop by at least this much to count as improved.
pub const MIN_IMPROVEMENT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[serde(alias = "e2e")]
    EndToEnd,
    #[serde(alias = "probe")]
    LinearProbe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSource {
    #[serde(alias = "ssl")]
    SslCheckpoint,
    Xavier,
}

impl InitSource {
    pub fn name(self) -> &'static str {
        match self {
            InitSource::SslCheckpoint => "ssl",
            InitSource::Xavier => "xavier",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub max_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_halving_patience: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub mode: TrainMode,
    pub init: InitSource,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            max_epochs: 500,
            lr: 0.01,
            weight_decay: 0.01,
            lr_halving_patience: 5,
            early_stop_patience: 20,
            batch_size: 400,
            mode: TrainMode::EndToEnd,
            init: InitSource::SslCheckpoint,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn desk() -> Self {
        FinetuneConfig {
            batch_size: 64,
            ..Default::default()
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.max_epochs == 0 {
            v.push("finetune.max_epochs must be at least 1".to_owned());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            v.push(format!("finetune.lr {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            v.push(format!("finetune.weight_decay {} must be >= 0", self.weight_decay));
        }
        if self.lr_halving_patience == 0 {
            v.push("finetune.lr_halving_patience must be at least 1".to_owned());
        }
        if self.early_stop_patience <= self.lr_halving_patience {
            v.push(format!(
                "finetune.early_stop_patience {} must exceed lr_halving_patience {}",
                self.early_stop_patience, self.lr_halving_patience
            ));
        }
        if self.batch_size == 0 {
            v.push("finetune.batch_size must be at least 1".to_owned());
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

/// Predicted distribution `p` and one-hot target `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbabilities {
    p: Vec<f64>,
    target: usize,
}

impl ClassProbabilities {
    pub fn new(p: Vec<f64>, target: usize) -> Result<Self> {
        if target >= p.len() {
            return Err(Error::Contract(format!("target {target} outside {} classes", p.len())));
        }
        if p.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::Contract("probabilities must be finite and non-negative".into()));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("probabilities sum to {s}")));
        }
        Ok(ClassProbabilities { p, target })
    }

    /// Softmax of `logits`, taken in log space.
    pub fn from_logits(logits: &[f64], target: usize) -> Result<Self> {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
        let s: f64 = e.iter().sum();
        Self::new(e.into_iter().map(|v| v / s).collect(), target)
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn beta(&self) -> Vec<f64> {
        (0..self.p.len()).map(|i| if i == self.target { 1.0 } else { 0.0 }).collect()
    }
}

/// Counts how often a true-class probability fell below `PROB_FLOOR`.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ClampCounter(pub usize);

/// `-sum_i beta_i log p_i`; the only non-zero term is the target's.
pub fn cross_entropy(p: &ClassProbabilities, clamps: &mut ClampCounter) -> f64 {
    let pt = p.p[p.target];
    if pt < PROB_FLOOR {
        clamps.0 += 1;
        log::warn!("true-class probability {pt:e} clamped to {PROB_FLOOR:e}");
        return -PROB_FLOOR.ln();
    }
    -pt.ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PlateauDecision {
    pub improved: bool,
    pub halve_lr: bool,
    pub stop: bool,
}

/// Learning-rate halving and early stopping as a function of the
/// validation-loss history alone.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    pub halving_patience: usize,
    pub stop_patience: usize,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub stale: usize,
    pub stale_since_halving: usize,
    pub epochs_seen: usize,
    pub lr: f64,
}

impl PlateauSchedule {
    pub fn new(lr: f64, halving_patience: usize, stop_patience: usize) -> Self {
        PlateauSchedule {
            halving_patience,
            stop_patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
            stale_since_halving: 0,
            epochs_seen: 0,
            lr,
        }
    }

    /// Records the validation loss of the next epoch (epochs count from 1).
    pub fn observe(&mut self, val_loss: f64) -> PlateauDecision {
        self.epochs_seen += 1;
        let mut d = PlateauDecision::default();
        if val_loss < self.best_loss - MIN_IMPROVEMENT {
            self.best_loss = val_loss;
            self.best_epoch = self.epochs_seen;
            self.stale = 0;
            self.stale_since_halving = 0;
            d.improved = true;
            return d;
        }
        self.stale += 1;
        self.stale_since_halving += 1;
        if self.stale >= self.stop_patience {
            d.stop = true;
        } else if self.stale_since_halving >= self.halving_patience {
            self.lr *= 0.5;
            self.stale_since_halving = 0;
            d.halve_lr = true;
        }
        d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub history: Vec<FinetuneEpoch>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub clamps: usize,
    pub wall_time_s: f64,
}

/// Builds the classifier a fine-tuning run starts from.
pub fn initial_classifier(
    arch: &crate::model::Architecture,
    num_classes: usize,
    init: InitSource,
    pretrained: Option<&TensorMap>,
    seed: u64,
) -> Result<Classifier> {
    let source = match init {
        InitSource::SslCheckpoint => Some(pretrained.ok_or_else(|| {
            Error::Config("init = ssl_checkpoint requires pretrained weights".into())
        })?),
        InitSource::Xavier => None,
    };
    Classifier::new(arch.backbone, arch.heads, num_classes, seed, source)
}

fn gather(ds: &Dataset, ids: &[usize]) -> (Vec<IqFrame>, Vec<u32>) {
    ids.iter()
        .map(|&i| (ds.examples[i].iq.clone(), ds.target(i) as u32))
        .unzip()
}

/// Mean log-space cross-entropy and accuracy (fraction) of `model` in
/// evaluation mode.
pub fn loss_and_accuracy(
    model: &Classifier,
    frames: &[IqFrame],
    targets: &[u32],
    clamps: &mut ClampCounter,
) -> Result<(f64, f64)> {
    let device = Device::Cpu;
    let floor = PROB_FLOOR.ln();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (fc, tc) in frames.chunks(256).zip(targets.chunks(256)) {
        let x = frames_to_tensor(fc, &device)?;
        let logits = model.forward(&x, false)?.to_dtype(DType::F64)?;
        let logp: Vec<Vec<f64>> = candle_nn::ops::log_softmax(&logits, D::Minus1)?.to_vec2()?;
        for (row, &t) in logp.iter().zip(tc) {
            let lp = row[t as usize];
            if lp < floor {
                clamps.0 += 1;
                loss -= floor;
            } else {
                loss -= lp;
            }
            if crate::eval::argmax(row) == t as usize {
                correct += 1;
            }
        }
    }
    Ok((loss / frames.len() as f64, correct as f64 / frames.len() as f64))
}

fn write_record(file: &mut Option<File>, path: &Path, rec: &FinetuneEpoch) -> Result<()> {
    if let Some(f) = file.as_mut() {
        writeln!(f, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Trains `model` on `train_ids`, monitoring `val_ids`, and leaves it holding
/// the parameters of the epoch with the lowest validation loss. In probe
/// mode only `classifier.` parameters are updated and the backbone stays in
/// evaluation mode.
pub fn train_classifier(
    ds: &Dataset,
    model: &Classifier,
    train_ids: &[usize],
    val_ids: &[usize],
    cfg: &FinetuneConfig,
    out_dir: Option<&Path>,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if train_ids.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if val_ids.is_empty() {
        return Err(Error::Dataset("validation set is empty".into()));
    }
    if model.num_classes() != ds.num_classes() {
        return Err(Error::Contract(format!(
            "classifier has {} outputs, dataset has {} classes",
            model.num_classes(),
            ds.num_classes()
        )));
    }
    let device = Device::Cpu;
    let probe = cfg.mode == TrainMode::LinearProbe;
    let vars = model.store.trainable(if probe { "classifier." } else { "" });
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;

    let metrics_path = out_dir.map(|d| d.join("finetune_metrics.jsonl"));
    let mut metrics = match (&metrics_path, out_dir) {
        (Some(p), Some(d)) => {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            Some(File::create(p).map_err(|e| Error::io(p, e))?)
        }
        _ => None,
    };

    let (train_frames, train_targets) = gather(ds, train_ids);
    let (val_frames, val_targets) = gather(ds, val_ids);
    let mut order: Vec<usize> = (0..train_ids.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[20]));
    let mut schedule = PlateauSchedule::new(cfg.lr, cfg.lr_halving_patience, cfg.early_stop_patience);
    let mut clamps = ClampCounter::default();
    let mut best: Option<TensorMap> = None;
    let mut history = Vec::new();
    let mut step = 0usize;
    let start = Instant::now();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let lr = schedule.lr;
        opt.set_learning_rate(lr);
        let mut sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            // Batch statistics need more than one example.
            if chunk.len() < 2 && !probe && seen > 0 {
                continue;
            }
            let frames: Vec<IqFrame> = chunk.iter().map(|&i| train_frames[i].clone()).collect();
            let targets: Vec<u32> = chunk.iter().map(|&i| train_targets[i]).collect();
            let x = frames_to_tensor(&frames, &device)?;
            let y = Tensor::new(targets, &device)?;
            let logits = model.forward(&x, !probe)?;
            let loss = candle_nn::loss::cross_entropy(&logits, &y)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            step += 1;
            if !value.is_finite() {
                if let Some(d) = out_dir {
                    save_classifier(&d.join("diverged"), model, cfg.seed, epoch, None)?;
                }
                return Err(Error::Divergence { epoch, step, loss: value });
            }
            opt.backward_step(&loss)?;
            sum += value * chunk.len() as f64;
            seen += chunk.len();
        }
        let (val_loss, val_acc) = loss_and_accuracy(model, &val_frames, &val_targets, &mut clamps)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch, step, loss: val_loss });
        }
        let rec = FinetuneEpoch {
            epoch,
            train_loss: sum / seen.max(1) as f64,
            val_loss,
            val_accuracy: val_acc * 100.0,
            lr,
        };
        log::debug!(
            "finetune epoch {epoch}: train {:.4} val {:.4} acc {:.1} lr {lr}",
            rec.train_loss,
            rec.val_loss,
            rec.val_accuracy
        );
        if let Some(p) = &metrics_path {
            write_record(&mut metrics, p, &rec)?;
        }
        history.push(rec);
        let decision = schedule.observe(val_loss);
        if decision.improved {
            best = Some(model.store.snapshot()?);
        }
        if decision.stop {
            break;
        }
    }
    if let Some(b) = &best {
        model.store.restore(b)?;
    }
    let stopped_epoch = history.len();
    if let Some(d) = out_dir {
        save_classifier(&d.join("best"), model, cfg.seed, schedule.best_epoch, None)?;
    }
    Ok(FinetuneOutcome {
        history,
        best_epoch: schedule.best_epoch,
        stopped_epoch,
        clamps: clamps.0,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

pub fn save_classifier(
    dir: &Path,
    model: &Classifier,
    seed: u64,
    epoch: usize,
    parent_hash: Option<String>,
) -> Result<Provenance> {
    checkpoint::save(
        dir,
        &model.store,
        &model.arch,
        &Provenance {
            stage: Stage::Finetune,
            parent_hash,
            seed,
            epoch,
            weights_hash: String::new(),
        },
    )
}

/// End-to-end fine-tuning from `cfg.init`.
pub fn finetune(
    ds: &Dataset,
    arch: &crate::model::Architecture,
    pretrained: Option<&TensorMap>,
    train_ids: &[usize],
    val_ids: &[usize],
    cfg: &FinetuneConfig,
    out_dir: Option<&Path>,
) -> Result<(Classifier, FinetuneOutcome)> {
    let model = initial_classifier(arch, ds.num_classes(), cfg.init, pretrained, cfg.seed)?;
    let cfg = FinetuneConfig {
        mode: TrainMode::EndToEnd,
        ..*cfg
    };
    let outcome = train_classifier(ds, &model, train_ids, val_ids, &cfg, out_dir)?;
    Ok((model, outcome))
}

/// Trains only the classification head on top of a frozen pretrained
/// backbone.
pub fn linear_probe(
    ds: &Dataset,
    arch: &crate::model::Architecture,
    pretrained: &TensorMap,
    train_ids: &[usize],
    val_ids: &[usize],
    cfg: &FinetuneConfig,
    out_dir: Option<&Path>,
) -> Result<(Classifier, FinetuneOutcome)> {
    let model = initial_classifier(arch, ds.num_classes(), InitSource::SslCheckpoint, Some(pretrained), cfg.seed)?;
    let cfg = FinetuneConfig {
        mode: TrainMode::LinearProbe,
        init: InitSource::SslCheckpoint,
        ..*cfg
    };
    let before = model.store.digest("backbone.")?;
    let outcome = train_classifier(ds, &model, train_ids, val_ids, &cfg, out_dir)?;
    let after = model.store.digest("backbone.")?;
    if before != after {
        return Err(Error::Contract("backbone changed during linear probing".into()));
    }
    Ok((model, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cross_entropy_anchors() {
        let mut c = ClampCounter::default();
        let onehot = ClassProbabilities::new(vec![0.0, 1.0, 0.0], 1).unwrap();
        assert_eq!(cross_entropy(&onehot, &mut c), 0.0);
        let uniform = ClassProbabilities::new(vec![1.0 / 11.0; 11], 4).unwrap();
        assert_abs_diff_eq!(cross_entropy(&uniform, &mut c), 11f64.ln(), epsilon = 1e-12);
        let p = ClassProbabilities::new(vec![0.1, 0.2, 0.7], 2).unwrap();
        assert_abs_diff_eq!(cross_entropy(&p, &mut c), 0.35667, epsilon = 1e-5);
        assert_eq!(c.0, 0);
        let zero = ClassProbabilities::new(vec![1.0, 0.0], 1).unwrap();
        assert_abs_diff_eq!(cross_entropy(&zero, &mut c), -PROB_FLOOR.ln(), epsilon = 1e-12);
        assert_eq!(c.0, 1);
    }

    #[test]
    fn probability_invariants() {
        assert!(ClassProbabilities::new(vec![0.5, 0.6], 0).is_err());
        assert!(ClassProbabilities::new(vec![1.5, -0.5], 0).is_err());
        assert!(ClassProbabilities::new(vec![0.5, 0.5], 2).is_err());
        let p = ClassProbabilities::from_logits(&[1000.0, 0.0], 0).unwrap();
        assert_eq!(p.beta(), vec![1.0, 0.0]);
    }

    #[test]
    fn six_flat_epochs_halve_once() {
        let mut s = PlateauSchedule::new(0.01, 5, 20);
        let halved: Vec<usize> = (1..=6).filter(|_| s.observe(1.0).halve_lr).collect();
        assert_eq!(halved, vec![6]);
        assert_eq!(s.lr, 0.005);
    }

    #[test]
    fn twenty_one_flat_epochs_stop() {
        let mut s = PlateauSchedule::new(0.01, 5, 20);
        let mut stopped = None;
        for e in 1..=30 {
            if s.observe(1.0).stop {
                stopped = Some(e);
                break;
            }
        }
        assert_eq!(stopped, Some(21));
        assert_eq!(s.best_epoch, 1);
        assert_eq!(s.lr, 0.01 / 8.0);
    }

    #[test]
    fn best_epoch_is_earliest_minimum() {
        let mut s = PlateauSchedule::new(0.01, 5, 20);
        for v in [3.0, 2.0, 1.0, 1.0, 1.0 - 1e-7, 2.0] {
            s.observe(v);
        }
        assert_eq!(s.best_epoch, 3);
    }

    #[test]
    fn patience_ordering_is_enforced() {
        let cfg = FinetuneConfig {
            early_stop_patience: 5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
