//! Waveform datasets: synthesis, the on-disk container, the upstream
//! pickle adapter and stratified splitting.

mod container;
mod split;
mod synth;
mod upstream;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use container::{
    generate_dataset, load_container, synthesize_dataset, write_container, GenerationConfig,
};
pub use split::{split_dataset, split_manifest, SplitIds, SplitSpec};
pub use synth::{
    synthesize_components, synthesize_waveform, ChannelGain, PulseShape, SynthesisParams,
    SynthesizedFrame, SIGNAL_POWER,
};
pub use upstream::{load_upstream, parse_upstream};

/// Samples per waveform.
pub const FRAME_LEN: usize = 128;

/// The SNR grid of the public benchmark: -20 dB to 18 dB in 2 dB steps.
pub fn default_snr_grid() -> Vec<i32> {
    (-20..=18).step_by(2).collect()
}

/// The eleven modulation classes, declared in ascending name order so the
/// discriminant is the class index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModulationClass {
    #[serde(rename = "8PSK")]
    Psk8,
    #[serde(rename = "AM-DSB")]
    AmDsb,
    #[serde(rename = "AM-SSB")]
    AmSsb,
    #[serde(rename = "BPSK")]
    Bpsk,
    #[serde(rename = "CPFSK")]
    Cpfsk,
    #[serde(rename = "GFSK")]
    Gfsk,
    #[serde(rename = "PAM4")]
    Pam4,
    #[serde(rename = "QAM16")]
    Qam16,
    #[serde(rename = "QAM64")]
    Qam64,
    #[serde(rename = "QPSK")]
    Qpsk,
    #[serde(rename = "WBFM")]
    Wbfm,
}

impl ModulationClass {
    pub const COUNT: usize = 11;

    pub const ALL: [ModulationClass; 11] = [
        ModulationClass::Psk8,
        ModulationClass::AmDsb,
        ModulationClass::AmSsb,
        ModulationClass::Bpsk,
        ModulationClass::Cpfsk,
        ModulationClass::Gfsk,
        ModulationClass::Pam4,
        ModulationClass::Qam16,
        ModulationClass::Qam64,
        ModulationClass::Qpsk,
        ModulationClass::Wbfm,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ModulationClass::Psk8 => "8PSK",
            ModulationClass::AmDsb => "AM-DSB",
            ModulationClass::AmSsb => "AM-SSB",
            ModulationClass::Bpsk => "BPSK",
            ModulationClass::Cpfsk => "CPFSK",
            ModulationClass::Gfsk => "GFSK",
            ModulationClass::Pam4 => "PAM4",
            ModulationClass::Qam16 => "QAM16",
            ModulationClass::Qam64 => "QAM64",
            ModulationClass::Qpsk => "QPSK",
            ModulationClass::Wbfm => "WBFM",
        }
    }

    pub fn is_analog(self) -> bool {
        matches!(
            self,
            ModulationClass::AmDsb | ModulationClass::AmSsb | ModulationClass::Wbfm
        )
    }
}

impl fmt::Display for ModulationClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModulationClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unsupported modulation {s:?}")))
    }
}

/// One I/Q frame: row 0 in-phase, row 1 quadrature.
#[derive(Clone, PartialEq)]
pub struct IqFrame {
    pub rows: [[f64; FRAME_LEN]; 2],
}

impl IqFrame {
    pub fn zeros() -> Self {
        IqFrame {
            rows: [[0.0; FRAME_LEN]; 2],
        }
    }

    pub fn from_fn(mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut frame = Self::zeros();
        for (r, row) in frame.rows.iter_mut().enumerate() {
            for (i, v) in row.iter_mut().enumerate() {
                *v = f(r, i);
            }
        }
        frame
    }

    /// Row-major values (I row then Q row).
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().flat_map(|r| r.iter().copied())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    /// Sum of squared values over both rows.
    pub fn energy(&self) -> f64 {
        self.values().map(|v| v * v).sum()
    }

    pub fn write_f32_le(&self, out: &mut Vec<u8>) {
        for v in self.values() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    pub fn from_f32_le(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 2 * FRAME_LEN * 4 {
            return Err(Error::Dataset(format!(
                "frame needs {} bytes, got {}",
                2 * FRAME_LEN * 4,
                bytes.len()
            )));
        }
        let mut frame = Self::zeros();
        for (k, chunk) in bytes.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            frame.rows[k / FRAME_LEN][k % FRAME_LEN] = v as f64;
        }
        Ok(frame)
    }
}

impl fmt::Debug for IqFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "IqFrame {{ i[0..4]: {:?}, q[0..4]: {:?}, energy: {:.4e} }}",
            &self.rows[0][..4],
            &self.rows[1][..4],
            self.energy()
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalExample {
    pub iq: IqFrame,
    pub label: ModulationClass,
    pub snr_db: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<ModulationClass>,
    pub snr_grid: Vec<i32>,
    pub examples_per_cell: usize,
    pub total: usize,
    pub storage_paths: std::collections::BTreeMap<String, String>,
    pub format_version: u32,
    pub seed: u64,
}

impl DatasetManifest {
    pub const FORMAT_VERSION: u32 = 1;

    pub fn new(classes: Vec<ModulationClass>, snr_grid: Vec<i32>, examples_per_cell: usize, seed: u64) -> Self {
        let total = classes.len() * snr_grid.len() * examples_per_cell;
        DatasetManifest {
            classes,
            snr_grid,
            examples_per_cell,
            total,
            storage_paths: Default::default(),
            format_version: Self::FORMAT_VERSION,
            seed,
        }
    }

    pub fn num_cells(&self) -> usize {
        self.classes.len() * self.snr_grid.len()
    }

    /// Id ranges of each cell, in (class index, snr) order.
    pub fn cell_ids(&self) -> Vec<(Cell, std::ops::Range<usize>)> {
        let n = self.examples_per_cell;
        let mut out = Vec::with_capacity(self.num_cells());
        for (ci, &class) in self.classes.iter().enumerate() {
            for (si, &snr) in self.snr_grid.iter().enumerate() {
                let start = (ci * self.snr_grid.len() + si) * n;
                out.push(((class, snr), start..start + n));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.snr_grid.is_empty() || self.examples_per_cell == 0 {
            return Err(Error::Dataset("manifest describes an empty dataset".into()));
        }
        if self.total != self.num_cells() * self.examples_per_cell {
            return Err(Error::Dataset(format!(
                "manifest total {} != {} classes x {} snrs x {}",
                self.total,
                self.classes.len(),
                self.snr_grid.len(),
                self.examples_per_cell
            )));
        }
        let mut sorted = self.classes.clone();
        sorted.sort();
        sorted.dedup();
        if sorted != self.classes {
            return Err(Error::Dataset("manifest classes must be sorted and unique".into()));
        }
        Ok(())
    }

    /// Canonical JSON: UTF-8, keys sorted, two-space indent.
    pub fn to_canonical_json(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        Ok(serde_json::to_string_pretty(&value)?)
    }
}

/// Cell key: (class, snr).
pub type Cell = (ModulationClass, i32);

pub(crate) fn shard_name(class: ModulationClass, snr: i32) -> String {
    format!("{}_{}", class.name(), snr)
}

/// An in-memory dataset. Example ids are positions in `examples`, laid out
/// cell by cell in (class index, snr) order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub examples: Vec<SignalExample>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, examples: Vec<SignalExample>) -> Result<Self> {
        manifest.validate()?;
        if examples.len() != manifest.total {
            return Err(Error::Dataset(format!(
                "manifest promises {} examples, found {}",
                manifest.total,
                examples.len()
            )));
        }
        for (id, ex) in examples.iter().enumerate() {
            let (class, snr) = cell_at(&manifest, id);
            if ex.label != class || ex.snr_db != snr {
                return Err(Error::Dataset(format!(
                    "example {id} is tagged ({}, {}) but sits in cell ({class}, {snr})",
                    ex.label, ex.snr_db
                )));
            }
        }
        Ok(Dataset { manifest, examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.classes.len()
    }

    /// Position of `class` within this dataset's class list (the label used
    /// by classifiers trained on it).
    pub fn class_position(&self, class: ModulationClass) -> Option<usize> {
        self.manifest.classes.iter().position(|&c| c == class)
    }

    pub fn target(&self, id: usize) -> usize {
        self.class_position(self.examples[id].label)
            .expect("dataset examples only carry manifest classes")
    }

    pub fn cell_of(&self, id: usize) -> Cell {
        cell_at(&self.manifest, id)
    }

    /// Ids grouped by cell, cells in (class index, snr) order.
    pub fn cell_ids(&self) -> Vec<(Cell, std::ops::Range<usize>)> {
        self.manifest.cell_ids()
    }

    /// A label-free view of the given examples, for pretraining.
    pub fn unlabeled<'a>(&'a self, ids: &[usize]) -> UnlabeledView<'a> {
        UnlabeledView {
            frames: ids.iter().map(|&id| &self.examples[id].iq).collect(),
        }
    }
}

fn cell_at(manifest: &DatasetManifest, id: usize) -> Cell {
    let cell = id / manifest.examples_per_cell;
    let n_snr = manifest.snr_grid.len();
    (manifest.classes[cell / n_snr], manifest.snr_grid[cell % n_snr])
}

/// Waveforms with every label and SNR tag stripped.
#[derive(Debug, Clone)]
pub struct UnlabeledView<'a> {
    frames: Vec<&'a IqFrame>,
}

impl<'a> UnlabeledView<'a> {
    pub fn from_frames(frames: Vec<&'a IqFrame>) -> Self {
        UnlabeledView { frames }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, i: usize) -> &'a IqFrame {
        self.frames[i]
    }
}

/// splitmix64 finalizer; used to derive independent RNG substreams.
pub fn mix_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = base ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h = h.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}
