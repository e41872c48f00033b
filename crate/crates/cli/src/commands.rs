//! Subcommand implementations. Each one resolves the config, creates its run
//! directory and writes every artifact below it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rfssl_core::dataio::{generate_dataset, load_container, load_upstream, split_dataset, synthesize_dataset};
use rfssl_core::eval::{evaluate, sample_efficiency_sweep, SweepRow};
use rfssl_core::finetune::{finetune, linear_probe, save_classifier};
use rfssl_core::model::checkpoint::{self, Checkpoint, Stage};
use rfssl_core::ssl::pretrain;
use rfssl_core::{
    Architecture, Classifier, Dataset, EncoderPair, Error, EvalReport, ModulationClass, Result, SplitIds, TrainMode,
};
use serde_json::Value;

use crate::config::{DataSource, ExperimentConfig};
use crate::plot::{accuracy_vs_snr, sample_efficiency};
use crate::rundir::RunDir;
use crate::{Cli, Command, DataArgs};

const DEFAULT_OUTPUT: &str = "runs";

/// Runs one subcommand and returns its run directory.
pub fn run(cli: &Cli) -> Result<RunDir> {
    let doc = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{} is not valid JSON: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    let mut cfg = ExperimentConfig::from_value(doc, cli.global_seed)?;
    apply_flags(&mut cfg, &cli.command)?;
    let root = cli
        .output_dir
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT));
    cfg.output_dir = Some(root.clone());
    let cfg = cfg.validated()?;

    match &cli.command {
        Command::Generate(_) => generate(&cfg, &root),
        Command::Split(a) => split(&cfg, &root, &a.data),
        Command::Pretrain(a) => pretrain_cmd(&cfg, &root, &a.data, a.split.as_deref()),
        Command::Finetune(a) => finetune_cmd(&cfg, &root, &a.data, a.split.as_deref(), a.checkpoint.as_deref()),
        Command::Evaluate(a) => evaluate_cmd(&cfg, &root, &a.data, &a.checkpoint, a.split.as_deref()),
        Command::Sweep(a) => sweep_cmd(&cfg, &root, &a.data, a.checkpoint.as_deref()),
        Command::Plot(a) => plot_cmd(&cfg, &root, &a.reports, a.sweep.as_deref()),
    }
}

/// Command-line flags take precedence over the config file.
fn apply_flags(cfg: &mut ExperimentConfig, command: &Command) -> Result<()> {
    match command {
        Command::Generate(a) => {
            let g = &mut cfg.dataset.generate;
            if let Some(n) = a.examples_per_cell {
                g.examples_per_cell = n;
            }
            if let Some(names) = &a.classes {
                g.classes = names.iter().map(|n| n.parse()).collect::<Result<Vec<ModulationClass>>>()?;
            }
            if let Some(grid) = &a.snr_grid {
                g.snr_grid = grid.clone();
            }
            if let Some(s) = a.seed {
                g.seed = s;
            }
        }
        Command::Split(a) => {
            if let Some(f) = a.test_fraction {
                cfg.split.test_fraction = f;
            }
            if let Some(f) = a.train_fraction {
                cfg.split.train_fraction_of_pool = f;
            }
            if let Some(s) = a.seed {
                cfg.split.seed = s;
            }
        }
        Command::Pretrain(a) => {
            let s = &mut cfg.ssl;
            if let Some(v) = a.epochs {
                s.epochs = v;
            }
            if let Some(v) = a.batch_size {
                s.batch_size = v;
            }
            if let Some(v) = a.tau {
                s.tau = v;
            }
            if let Some(v) = a.alpha {
                s.alpha = v;
            }
            if let Some(v) = a.seed {
                s.seed = v;
            }
            if let Some(w) = a.projection_width {
                cfg.model.heads.projection_width = w;
            }
        }
        Command::Finetune(a) => {
            let f = &mut cfg.finetune;
            if let Some(v) = a.init {
                f.init = v;
            }
            if let Some(v) = a.mode {
                f.mode = v;
            }
            if let Some(v) = a.seed {
                f.seed = v;
            }
            if let Some(v) = a.train_fraction {
                cfg.split.train_fraction_of_pool = v;
            }
        }
        Command::Sweep(a) => {
            if let Some(v) = &a.fractions {
                cfg.eval.fractions = v.clone();
            }
            if let Some(v) = &a.seeds {
                cfg.eval.seeds = v.clone();
            }
            if let Some(v) = &a.inits {
                cfg.eval.inits = v.clone();
            }
        }
        Command::Evaluate(_) | Command::Plot(_) => {}
    }
    Ok(())
}

/// The dataset and, when it lives on disk, its path (hashed into run.json).
fn load_data(cfg: &ExperimentConfig, data: &DataArgs) -> Result<(Dataset, Option<PathBuf>)> {
    if let Some(p) = &data.data {
        let ds = if p.is_dir() { load_container(p)? } else { load_upstream(p)? };
        return Ok((ds, Some(p.clone())));
    }
    match cfg.dataset.source {
        DataSource::Synthetic => Ok((synthesize_dataset(&cfg.dataset.generate)?, None)),
        DataSource::Upstream => {
            let p = cfg.dataset.upstream_path.clone().expect("validated");
            Ok((load_upstream(&p)?, Some(p)))
        }
    }
}

/// Ids from `split_file` (with the config's train fraction applied) or
/// recomputed from the config's split section.
fn resolve_split(ds: &Dataset, cfg: &ExperimentConfig, split_file: Option<&Path>) -> Result<SplitIds> {
    let Some(p) = split_file else {
        return split_dataset(ds, &cfg.split);
    };
    let ids = SplitIds::load(p)?;
    if let Some(&bad) = ids.train.iter().chain(&ids.val).chain(&ids.test).find(|&&i| i >= ds.len()) {
        return Err(Error::Dataset(format!(
            "{}: id {bad} outside a dataset of {} examples",
            p.display(),
            ds.len()
        )));
    }
    if ids.spec.train_fraction_of_pool == cfg.split.train_fraction_of_pool {
        return Ok(ids);
    }
    let resplit = split_dataset(ds, &rfssl_core::SplitSpec { train_fraction_of_pool: cfg.split.train_fraction_of_pool, ..ids.spec })?;
    if resplit.test != ids.test {
        return Err(Error::Dataset(format!("{} was not produced from this dataset", p.display())));
    }
    Ok(resplit)
}

fn inputs<'a>(pairs: &[(&'a str, Option<&'a Path>)]) -> Vec<(&'a str, &'a Path)> {
    pairs.iter().filter_map(|&(k, p)| p.map(|p| (k, p))).collect()
}

fn generate(cfg: &ExperimentConfig, root: &Path) -> Result<RunDir> {
    let run = RunDir::create(root, "generate", cfg, &[])?;
    let ds = generate_dataset(&cfg.dataset.generate, &run.path.join("data"), false)?;
    log::info!("generated {} examples into {}", ds.len(), run.path.join("data").display());
    Ok(run)
}

fn split(cfg: &ExperimentConfig, root: &Path, data: &DataArgs) -> Result<RunDir> {
    let (ds, data_path) = load_data(cfg, data)?;
    let run = RunDir::create(root, "split", cfg, &inputs(&[("data", data_path.as_deref())]))?;
    let ids = split_dataset(&ds, &cfg.split)?;
    ids.save(&run.path.join("split.json"))?;
    log::info!("split: {} train, {} val, {} test", ids.train.len(), ids.val.len(), ids.test.len());
    Ok(run)
}

fn pretrain_cmd(cfg: &ExperimentConfig, root: &Path, data: &DataArgs, split_file: Option<&Path>) -> Result<RunDir> {
    let (ds, data_path) = load_data(cfg, data)?;
    let ids = resolve_split(&ds, cfg, split_file)?;
    let run = RunDir::create(root, "pretrain", cfg, &inputs(&[("data", data_path.as_deref()), ("split", split_file)]))?;
    ids.save(&run.path.join("split.json"))?;
    let mut pair = EncoderPair::new(cfg.model.backbone(), cfg.model.heads, cfg.ssl.seed, cfg.ssl.alpha, cfg.ssl.tau)?;
    let pool = ids.pool();
    let out = pretrain(&ds.unlabeled(&pool), &mut pair, &cfg.augment, &cfg.ssl, Some(&run.path))?;
    if let Some(last) = out.history.last() {
        log::info!("pretrain finished: final loss {:.4}, best epoch {}", last.mean_loss, out.best_epoch);
    }
    Ok(run)
}

fn load_pretrained(path: &Path) -> Result<Checkpoint> {
    let ck = checkpoint::load(path)?;
    if ck.provenance.stage != Stage::Pretrain {
        return Err(Error::Config(format!("{} is not a pretraining checkpoint", path.display())));
    }
    Ok(ck)
}

fn finetune_cmd(
    cfg: &ExperimentConfig,
    root: &Path,
    data: &DataArgs,
    split_file: Option<&Path>,
    checkpoint_dir: Option<&Path>,
) -> Result<RunDir> {
    let (ds, data_path) = load_data(cfg, data)?;
    let ids = resolve_split(&ds, cfg, split_file)?;
    let pretrained = checkpoint_dir.map(load_pretrained).transpose()?;
    let arch = match &pretrained {
        Some(ck) => ck.arch,
        None => Architecture { backbone: cfg.model.backbone(), heads: cfg.model.heads, num_classes: None },
    };
    let weights = pretrained.as_ref().map(|ck| &ck.weights);
    let run = RunDir::create(
        root,
        "finetune",
        cfg,
        &inputs(&[("data", data_path.as_deref()), ("split", split_file), ("checkpoint", checkpoint_dir)]),
    )?;
    ids.save(&run.path.join("split.json"))?;
    let (model, out) = match cfg.finetune.mode {
        TrainMode::EndToEnd => finetune(&ds, &arch, weights, &ids.train, &ids.val, &cfg.finetune, Some(&run.path))?,
        TrainMode::LinearProbe => {
            let w = weights.ok_or_else(|| Error::Config("linear probing needs --checkpoint".into()))?;
            linear_probe(&ds, &arch, w, &ids.train, &ids.val, &cfg.finetune, Some(&run.path))?
        }
    };
    // Re-save the selected weights with their lineage recorded.
    if let Some(ck) = &pretrained {
        if cfg.finetune.init == rfssl_core::InitSource::SslCheckpoint || cfg.finetune.mode == TrainMode::LinearProbe {
            save_classifier(
                &run.path.join("best"),
                &model,
                cfg.finetune.seed,
                out.best_epoch,
                Some(ck.provenance.weights_hash.clone()),
            )?;
        }
    }
    log::info!("finetune: best epoch {} of {}", out.best_epoch, out.stopped_epoch);
    Ok(run)
}

fn evaluate_cmd(
    cfg: &ExperimentConfig,
    root: &Path,
    data: &DataArgs,
    checkpoint_dir: &Path,
    split_file: Option<&Path>,
) -> Result<RunDir> {
    let (ds, data_path) = load_data(cfg, data)?;
    let ck = checkpoint::load(checkpoint_dir)?;
    if ck.arch.num_classes.is_none() {
        return Err(Error::Config(format!("{} is not a fine-tuned checkpoint", checkpoint_dir.display())));
    }
    let sibling = checkpoint_dir.parent().map(|p| p.join("split.json")).filter(|p| p.exists());
    let split_file = split_file.map(Path::to_path_buf).or(sibling);
    let ids = match &split_file {
        Some(p) => SplitIds::load(p)?,
        None => split_dataset(&ds, &cfg.split)?,
    };
    let model = Classifier::from_weights(ck.arch, &ck.weights)?;
    let run = RunDir::create(
        root,
        "evaluate",
        cfg,
        &inputs(&[("data", data_path.as_deref()), ("split", split_file.as_deref()), ("checkpoint", Some(checkpoint_dir))]),
    )?;
    let report = evaluate(&model, &ds, &ids.test, &ids)?;
    report.export(&run.path)?;
    log::info!("evaluate: overall accuracy {:.1}% on {} examples", report.overall_accuracy, report.n_test);
    Ok(run)
}

fn sweep_cmd(cfg: &ExperimentConfig, root: &Path, data: &DataArgs, checkpoint_dir: Option<&Path>) -> Result<RunDir> {
    let (ds, data_path) = load_data(cfg, data)?;
    let pretrained = checkpoint_dir.map(load_pretrained).transpose()?;
    if pretrained.is_none() && cfg.eval.inits.contains(&rfssl_core::InitSource::SslCheckpoint) {
        return Err(Error::Config("sweeping the ssl init needs --checkpoint".into()));
    }
    let arch = match &pretrained {
        Some(ck) => ck.arch,
        None => Architecture { backbone: cfg.model.backbone(), heads: cfg.model.heads, num_classes: None },
    };
    let run = RunDir::create(
        root,
        "sweep",
        cfg,
        &inputs(&[("data", data_path.as_deref()), ("checkpoint", checkpoint_dir)]),
    )?;
    let rows = sample_efficiency_sweep(
        &ds,
        &arch,
        pretrained.as_ref().map(|ck| &ck.weights),
        &cfg.split,
        &cfg.eval.fractions,
        &cfg.eval.inits,
        &cfg.eval.seeds,
        &cfg.finetune,
        Some(&run.path),
    )?;
    log::info!("sweep: {} runs", rows.len());
    Ok(run)
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::Dataset(format!("{}: {e}", path.display()))))
        .collect()
}

/// Per-SNR accuracies averaged over every report in the group.
fn mean_report(reports: &[EvalReport]) -> EvalReport {
    let mut sums: BTreeMap<i32, (f64, usize)> = BTreeMap::new();
    for r in reports {
        for (&s, &a) in &r.per_snr_accuracy {
            let e = sums.entry(s).or_default();
            e.0 += a;
            e.1 += 1;
        }
    }
    let mut out = reports[0].clone();
    out.per_snr_accuracy = sums.into_iter().map(|(s, (a, n))| (s, a / n as f64)).collect();
    out
}

/// Seed-averaged reports of a sweep directory, labelled "<init> <fraction>".
fn sweep_reports(dir: &Path) -> Result<Vec<(String, EvalReport)>> {
    let mut groups: BTreeMap<String, Vec<EvalReport>> = BTreeMap::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("eval_report.json").exists())
        .collect();
    entries.sort();
    for p in entries {
        let name = p.file_name().unwrap_or_default().to_string_lossy().to_string();
        let label = match name.rsplit_once("_s") {
            Some((head, _)) => head.replacen("_f", " ", 1),
            None => name.clone(),
        };
        groups.entry(label).or_default().push(EvalReport::load(&p.join("eval_report.json"))?);
    }
    Ok(groups.into_iter().map(|(label, rs)| (label, mean_report(&rs))).collect())
}

fn plot_cmd(cfg: &ExperimentConfig, root: &Path, report_args: &[String], sweep_dir: Option<&Path>) -> Result<RunDir> {
    if report_args.is_empty() && sweep_dir.is_none() {
        return Err(Error::Config("plot needs --report or --sweep".into()));
    }
    let mut reports = Vec::new();
    let mut input_paths: Vec<(String, PathBuf)> = Vec::new();
    for (i, arg) in report_args.iter().enumerate() {
        let (path, label) = match arg.split_once('=') {
            Some((p, l)) => (PathBuf::from(p), l.to_string()),
            None => {
                let p = PathBuf::from(arg);
                let label = p
                    .parent()
                    .and_then(Path::file_name)
                    .map(|n| n.to_string_lossy().to_string())
                    .unwrap_or_else(|| format!("report {}", i + 1));
                (p, label)
            }
        };
        reports.push((label, EvalReport::load(&path)?));
        input_paths.push((format!("report{}", i + 1), path));
    }
    let mut rows = Vec::new();
    if let Some(d) = sweep_dir {
        rows = read_sweep_csv(&d.join("sweep.csv"))?;
        reports.extend(sweep_reports(d)?);
        input_paths.push(("sweep".into(), d.to_path_buf()));
    }
    let hashed: Vec<(&str, &Path)> = input_paths.iter().map(|(k, p)| (k.as_str(), p.as_path())).collect();
    let run = RunDir::create(root, "plot", cfg, &hashed)?;
    if !reports.is_empty() {
        accuracy_vs_snr(&reports)?.write(&run.path, "accuracy_vs_snr")?;
    }
    if !rows.is_empty() {
        sample_efficiency(&rows)?.write(&run.path, "sample_efficiency")?;
    }
    Ok(run)
}
