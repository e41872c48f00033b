//! Accuracy metrics, reports and the label-fraction sweep.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::dataio::{split_dataset, Dataset, IqFrame, ModulationClass, SplitIds, SplitSpec};
use crate::error::{Error, Result};
use crate::finetune::{finetune, FinetuneConfig, InitSource};
use crate::model::{Architecture, Classifier, ModelStats, TensorMap};
use crate::ssl::frames_to_tensor;

/// Anything that maps frames to one score per class.
pub trait Predictor {
    fn num_classes(&self) -> usize;
    fn logits(&self, frames: &[&IqFrame]) -> Result<Vec<Vec<f64>>>;
    fn stats(&self) -> Option<ModelStats> {
        None
    }
}

impl Predictor for Classifier {
    fn num_classes(&self) -> usize {
        Classifier::num_classes(self)
    }

    fn logits(&self, frames: &[&IqFrame]) -> Result<Vec<Vec<f64>>> {
        let device = Device::Cpu;
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(256) {
            let owned: Vec<IqFrame> = chunk.iter().map(|f| (*f).clone()).collect();
            let x = frames_to_tensor(&owned, &device)?;
            let y: Vec<Vec<f64>> = self.forward(&x, false)?.to_dtype(DType::F64)?.to_vec2()?;
            out.extend(y);
        }
        Ok(out)
    }

    fn stats(&self) -> Option<ModelStats> {
        Some(Classifier::stats(self))
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict<P: Predictor + ?Sized>(model: &P, frames: &[&IqFrame]) -> Result<Vec<usize>> {
    let logits = model.logits(frames)?;
    let c = model.num_classes();
    if logits.len() != frames.len() {
        return Err(Error::Contract(format!(
            "{} outputs for {} inputs",
            logits.len(),
            frames.len()
        )));
    }
    logits
        .iter()
        .map(|row| {
            if row.len() != c {
                Err(Error::Contract(format!("expected {c} scores per example, got {}", row.len())))
            } else {
                Ok(argmax(row))
            }
        })
        .collect()
}

pub fn model_stats(model: &Classifier) -> ModelStats {
    model.stats()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ModulationClass>,
    pub overall_accuracy: f64,
    pub class_averaged_accuracy: f64,
    pub per_snr_accuracy: BTreeMap<i32, f64>,
    pub per_snr_count: BTreeMap<i32, usize>,
    pub confusion: Vec<Vec<usize>>,
    pub n_test: usize,
    pub model_params: usize,
    pub model_flops: u64,
}

/// Fails if any test id also appears among the train or validation ids.
pub fn leakage_guard(test_ids: &[usize], split: &SplitIds) -> Result<()> {
    let seen: BTreeSet<usize> = split.train.iter().chain(&split.val).copied().collect();
    let leaked: Vec<usize> = test_ids.iter().copied().filter(|id| seen.contains(id)).collect();
    match leaked.first() {
        Some(&first) => Err(Error::Leakage {
            count: leaked.len(),
            first,
        }),
        None => Ok(()),
    }
}

/// Scores `model` on `test_ids`, after checking them against `split`.
pub fn evaluate<P: Predictor + ?Sized>(
    model: &P,
    ds: &Dataset,
    test_ids: &[usize],
    split: &SplitIds,
) -> Result<EvalReport> {
    leakage_guard(test_ids, split)?;
    if test_ids.is_empty() {
        return Err(Error::Dataset("test set is empty".into()));
    }
    let c = ds.num_classes();
    if model.num_classes() != c {
        return Err(Error::Contract(format!(
            "model has {} outputs, dataset has {c} classes",
            model.num_classes()
        )));
    }
    if let Some(&bad) = test_ids.iter().find(|&&id| id >= ds.len()) {
        return Err(Error::Contract(format!("test id {bad} outside dataset of {}", ds.len())));
    }
    let frames: Vec<&IqFrame> = test_ids.iter().map(|&i| &ds.examples[i].iq).collect();
    let preds = predict(model, &frames)?;

    let mut confusion = vec![vec![0usize; c]; c];
    let mut snr_hits: BTreeMap<i32, (usize, usize)> = ds.manifest.snr_grid.iter().map(|&s| (s, (0, 0))).collect();
    for (&id, &pred) in test_ids.iter().zip(&preds) {
        let truth = ds.target(id);
        confusion[truth][pred] += 1;
        let e = snr_hits.entry(ds.examples[id].snr_db).or_default();
        e.1 += 1;
        if truth == pred {
            e.0 += 1;
        }
    }
    snr_hits.retain(|_, (_, n)| *n > 0);
    let n = test_ids.len();
    let trace: usize = (0..c).map(|i| confusion[i][i]).sum();
    let present: Vec<usize> = (0..c).filter(|&i| confusion[i].iter().sum::<usize>() > 0).collect();
    let class_avg = present
        .iter()
        .map(|&i| confusion[i][i] as f64 / confusion[i].iter().sum::<usize>() as f64)
        .sum::<f64>()
        / present.len() as f64;
    let stats = model.stats().unwrap_or(ModelStats { params: 0, flops: 0 });
    Ok(EvalReport {
        classes: ds.manifest.classes.clone(),
        overall_accuracy: 100.0 * trace as f64 / n as f64,
        class_averaged_accuracy: 100.0 * class_avg,
        per_snr_accuracy: snr_hits
            .iter()
            .map(|(&s, &(h, m))| (s, 100.0 * h as f64 / m as f64))
            .collect(),
        per_snr_count: snr_hits.iter().map(|(&s, &(_, m))| (s, m)).collect(),
        confusion,
        n_test: n,
        model_params: stats.params,
        model_flops: stats.flops,
    })
}

impl EvalReport {
    /// Per-SNR accuracies weighted by their test counts.
    pub fn weighted_snr_mean(&self) -> f64 {
        let total: usize = self.per_snr_count.values().sum();
        self.per_snr_accuracy
            .iter()
            .map(|(s, a)| a * self.per_snr_count[s] as f64)
            .sum::<f64>()
            / total as f64
    }

    pub fn accuracy_by_snr_csv(&self) -> String {
        let mut s = String::from("snr_db,accuracy\n");
        for (snr, acc) in &self.per_snr_accuracy {
            let _ = writeln!(s, "{snr},{acc:.1}");
        }
        s
    }

    pub fn confusion_csv(&self) -> String {
        let names: Vec<&str> = self.classes.iter().map(|c| c.name()).collect();
        let mut s = format!("true\\predicted,{}\n", names.join(","));
        for (name, row) in names.iter().zip(&self.confusion) {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            let _ = writeln!(s, "{name},{}", cells.join(","));
        }
        s
    }

    /// Writes `eval_report.json`, `accuracy_by_snr.csv` and `confusion.csv`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("eval_report.json", serde_json::to_string_pretty(&self.rounded())? + "\n"),
            ("accuracy_by_snr.csv", self.accuracy_by_snr_csv()),
            ("confusion.csv", self.confusion_csv()),
        ];
        for (name, body) in files {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    /// Copy with accuracies rounded to one decimal.
    pub fn rounded(&self) -> EvalReport {
        let r = |v: f64| (v * 10.0).round() / 10.0;
        EvalReport {
            overall_accuracy: r(self.overall_accuracy),
            class_averaged_accuracy: r(self.class_averaged_accuracy),
            per_snr_accuracy: self.per_snr_accuracy.iter().map(|(&k, &v)| (k, r(v))).collect(),
            ..self.clone()
        }
    }

    pub fn load(path: &Path) -> Result<EvalReport> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub init: InitSource,
    pub seed: u64,
    pub n_train: usize,
    pub accuracy: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("fraction,init,seed,n_train,accuracy\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{:.1}", r.fraction, r.init.name(), r.seed, r.n_train, r.accuracy);
    }
    s
}

/// One row per init and one column per fraction holding the seed-mean
/// accuracy, followed by a row of training-set sizes.
pub fn sweep_table_csv(rows: &[SweepRow]) -> String {
    let mut fractions: Vec<f64> = rows.iter().map(|r| r.fraction).collect();
    fractions.sort_by(f64::total_cmp);
    fractions.dedup();
    let mut inits: Vec<InitSource> = Vec::new();
    for r in rows {
        if !inits.contains(&r.init) {
            inits.push(r.init);
        }
    }
    let mut s = String::from("init");
    for f in &fractions {
        let _ = write!(s, ",{f}");
    }
    s.push('\n');
    for init in &inits {
        s.push_str(init.name());
        for &f in &fractions {
            let accs: Vec<f64> = rows
                .iter()
                .filter(|r| r.init == *init && r.fraction == f)
                .map(|r| r.accuracy)
                .collect();
            if accs.is_empty() {
                s.push(',');
            } else {
                let _ = write!(s, ",{:.1}", accs.iter().sum::<f64>() / accs.len() as f64);
            }
        }
        s.push('\n');
    }
    s.push_str("n_train");
    for &f in &fractions {
        let n = rows.iter().find(|r| r.fraction == f).map_or(0, |r| r.n_train);
        let _ = write!(s, ",{n}");
    }
    s.push('\n');
    s
}

/// Training-set sizes for each fraction of the non-test pool.
pub fn training_counts(ds: &Dataset, split: &SplitSpec, fractions: &[f64]) -> Result<Vec<usize>> {
    fractions
        .iter()
        .map(|&f| {
            let spec = SplitSpec {
                train_fraction_of_pool: f,
                ..*split
            };
            Ok(split_dataset(ds, &spec)?.train.len())
        })
        .collect()
}

/// One fresh fine-tuning run per (fraction, init, seed). `pretrained` is
/// required when `inits` contains the SSL initialization. The test set is
/// the same for every row because split seeds are fixed by `split`.
#[allow(clippy::too_many_arguments)]
pub fn sample_efficiency_sweep(
    ds: &Dataset,
    arch: &Architecture,
    pretrained: Option<&TensorMap>,
    split: &SplitSpec,
    fractions: &[f64],
    inits: &[InitSource],
    seeds: &[u64],
    ft: &FinetuneConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    if let Some(&bad) = fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::Config(format!("sweep fraction {bad} outside (0, 1]")));
    }
    if fractions.is_empty() || seeds.is_empty() || inits.is_empty() {
        return Err(Error::Config("sweep needs at least one fraction, init and seed".into()));
    }
    let mut rows = Vec::new();
    for &fraction in fractions {
        let ids = split_dataset(
            ds,
            &SplitSpec {
                train_fraction_of_pool: fraction,
                ..*split
            },
        )?;
        for &init in inits {
            for &seed in seeds {
                let cfg = FinetuneConfig { init, seed, ..*ft };
                let run_dir = out_dir.map(|d| d.join(format!("{}_f{fraction}_s{seed}", init.name())));
                let (model, _) = finetune(ds, arch, pretrained, &ids.train, &ids.val, &cfg, run_dir.as_deref())?;
                let report = evaluate(&model, ds, &ids.test, &ids)?;
                if let Some(d) = &run_dir {
                    report.export(d)?;
                }
                log::info!("sweep {} f={fraction} seed={seed}: {:.1}%", init.name(), report.overall_accuracy);
                rows.push(SweepRow {
                    fraction,
                    init,
                    seed,
                    n_train: ids.train.len(),
                    accuracy: report.overall_accuracy,
                });
            }
        }
    }
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        let p = d.join("sweep.csv");
        fs::write(&p, sweep_csv(&rows)).map_err(|e| Error::io(&p, e))?;
        let p = d.join("sweep_table.csv");
        fs::write(&p, sweep_table_csv(&rows)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_rules() {
        assert_eq!(argmax(&[0.1, 0.9, 0.3]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[-1.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn sweep_csv_has_one_row_per_run() {
        let rows: Vec<SweepRow> = [0.005, 0.01]
            .iter()
            .flat_map(|&f| {
                [InitSource::SslCheckpoint, InitSource::Xavier].into_iter().map(move |init| SweepRow {
                    fraction: f,
                    init,
                    seed: 0,
                    n_train: 1,
                    accuracy: 50.0,
                })
            })
            .collect();
        assert_eq!(sweep_csv(&rows).lines().count(), 1 + 4);
    }

    #[test]
    fn sweep_table_averages_seeds() {
        let row = |fraction, init, seed, accuracy| SweepRow { fraction, init, seed, n_train: (fraction * 1000.0) as usize, accuracy };
        let rows = vec![
            row(0.01, InitSource::SslCheckpoint, 0, 40.0),
            row(0.01, InitSource::SslCheckpoint, 1, 50.0),
            row(0.5, InitSource::SslCheckpoint, 0, 80.0),
            row(0.01, InitSource::Xavier, 0, 20.0),
        ];
        assert_eq!(sweep_table_csv(&rows), "init,0.01,0.5\nssl,45.0,80.0\nxavier,20.0,\nn_train,10,500\n");
    }
}
