//! On-disk container: `manifest.json` plus one little-endian f32 shard per
//! (class, snr) cell.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synth::{synthesize_waveform, ChannelGain, PulseShape, SynthesisParams};
use super::{
    mix_seed, shard_name, Dataset, DatasetManifest, IqFrame, ModulationClass, SignalExample,
    FRAME_LEN,
};
use crate::error::{Error, Result};

const FRAME_BYTES: usize = 2 * FRAME_LEN * 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub classes: Vec<ModulationClass>,
    pub snr_grid: Vec<i32>,
    pub examples_per_cell: usize,
    pub seed: u64,
    pub samples_per_symbol: usize,
    pub pulse: PulseShape,
    /// Per-example frequency offsets are uniform in +-this (rad/sample).
    pub max_freq_offset: f64,
    /// Per-example carrier phases are uniform in [0, max_phase_offset).
    pub max_phase_offset: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            classes: ModulationClass::ALL.to_vec(),
            snr_grid: super::default_snr_grid(),
            examples_per_cell: 1000,
            seed: 0,
            samples_per_symbol: 8,
            pulse: PulseShape::default(),
            max_freq_offset: 0.01,
            max_phase_offset: std::f64::consts::TAU,
        }
    }
}

impl GenerationConfig {
    /// Every violation, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.classes.is_empty() {
            v.push("dataset.classes: at least one class is required".to_owned());
        }
        if self.snr_grid.is_empty() {
            v.push("dataset.snr_grid must be non-empty".to_owned());
        }
        if self.examples_per_cell == 0 {
            v.push("dataset.examples_per_cell must be at least 1".to_owned());
        }
        if self.samples_per_symbol == 0 {
            v.push("dataset.samples_per_symbol must be at least 1".to_owned());
        }
        if !(self.max_freq_offset.is_finite() && self.max_freq_offset >= 0.0) {
            v.push("dataset.max_freq_offset must be finite and >= 0".to_owned());
        }
        if !(0.0..=std::f64::consts::TAU).contains(&self.max_phase_offset) {
            v.push("dataset.max_phase_offset must lie in [0, 2 pi]".to_owned());
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

    fn normalized(&self) -> (Vec<ModulationClass>, Vec<i32>) {
        let mut classes = self.classes.clone();
        classes.sort();
        classes.dedup();
        let mut grid = self.snr_grid.clone();
        grid.sort();
        grid.dedup();
        (classes, grid)
    }
}

fn synthesize_cell(
    cfg: &GenerationConfig,
    class: ModulationClass,
    snr: i32,
) -> Result<Vec<SignalExample>> {
    let cell_seed = mix_seed(cfg.seed, &[class.index() as u64, snr as i64 as u64]);
    (0..cfg.examples_per_cell)
        .map(|k| {
            let example_seed = mix_seed(cell_seed, &[k as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(example_seed);
            let freq_offset = if cfg.max_freq_offset > 0.0 {
                rng.random_range(-cfg.max_freq_offset..=cfg.max_freq_offset)
            } else {
                0.0
            };
            let params = SynthesisParams {
                channel_gain: ChannelGain::Constant(1.0),
                freq_offset,
                phase_offset: if cfg.max_phase_offset > 0.0 {
                    rng.random_range(0.0..cfg.max_phase_offset)
                } else {
                    0.0
                },
                target_snr_db: snr as f64,
                samples_per_symbol: cfg.samples_per_symbol,
                pulse: cfg.pulse,
                rng_seed: rng.random(),
            };
            synthesize_waveform(class, &params)
        })
        .collect()
}

/// Synthesizes the whole grid in memory. Each cell draws from its own
/// substream of `cfg.seed`, so cells can be produced in any order.
pub fn synthesize_dataset(cfg: &GenerationConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (classes, grid) = cfg.normalized();
    let mut examples = Vec::with_capacity(classes.len() * grid.len() * cfg.examples_per_cell);
    for &class in &classes {
        for &snr in &grid {
            examples.extend(synthesize_cell(cfg, class, snr)?);
        }
    }
    let manifest = DatasetManifest::new(classes, grid, cfg.examples_per_cell, cfg.seed);
    Dataset::new(manifest, examples)
}

/// Synthesizes the grid and writes it to `out_dir`.
pub fn generate_dataset(cfg: &GenerationConfig, out_dir: &Path, overwrite: bool) -> Result<Dataset> {
    let mut ds = synthesize_dataset(cfg)?;
    ds.manifest = write_container(&ds, out_dir, overwrite)?;
    Ok(ds)
}

fn prepare_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty {
            if !overwrite {
                return Err(Error::OutputExists(dir.to_path_buf()));
            }
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes shards and the manifest; returns the manifest with
/// `storage_paths` filled in.
pub fn write_container(ds: &Dataset, dir: &Path, overwrite: bool) -> Result<DatasetManifest> {
    prepare_dir(dir, overwrite)?;
    let mut manifest = ds.manifest.clone();
    manifest.storage_paths.clear();
    for ((class, snr), ids) in ds.cell_ids() {
        let shard = shard_name(class, snr);
        let file = format!("{shard}.f32");
        let mut bytes = Vec::with_capacity(ids.len() * FRAME_BYTES);
        for id in ids {
            ds.examples[id].iq.write_f32_le(&mut bytes);
        }
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        manifest.storage_paths.insert(shard, file);
    }
    let path = dir.join("manifest.json");
    fs::write(&path, manifest.to_canonical_json()? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_container(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    manifest.validate()?;
    if manifest.format_version != DatasetManifest::FORMAT_VERSION {
        return Err(Error::Dataset(format!(
            "unsupported container format version {}",
            manifest.format_version
        )));
    }
    let mut examples = Vec::with_capacity(manifest.total);
    for &class in &manifest.classes {
        for &snr in &manifest.snr_grid {
            let shard = shard_name(class, snr);
            let file = manifest
                .storage_paths
                .get(&shard)
                .ok_or_else(|| Error::Dataset(format!("manifest lists no shard for {shard}")))?;
            let path = dir.join(file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() != manifest.examples_per_cell * FRAME_BYTES {
                return Err(Error::Dataset(format!(
                    "shard {shard} holds {} bytes, expected {}",
                    bytes.len(),
                    manifest.examples_per_cell * FRAME_BYTES
                )));
            }
            for chunk in bytes.chunks_exact(FRAME_BYTES) {
                examples.push(SignalExample {
                    iq: IqFrame::from_f32_le(chunk)?,
                    label: class,
                    snr_db: snr,
                });
            }
        }
    }
    Dataset::new(manifest, examples)
}
