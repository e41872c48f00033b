//! Experiment configuration: one JSON document covering every pipeline stage.
//!
//! Loading happens in three passes over the raw JSON: unknown keys are
//! collected against the default document, section seeds that were not given
//! inherit the global seed, then the typed config is decoded and validated.
//! Every problem found is reported in one error.

use std::path::{Path, PathBuf};

use rfssl_core::dataio::GenerationConfig;
use rfssl_core::model::BackboneVariant;
use rfssl_core::{
    AugmentationConfig, BackboneConfig, Error, FinetuneConfig, HeadConfig, InitSource, PretrainConfig, Result,
    SplitSpec,
};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

/// Sections whose `seed` falls back to the global seed.
const SEEDED_SECTIONS: [&[&str]; 4] = [&["dataset", "generate"], &["split"], &["ssl"], &["finetune"]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Upstream,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub source: DataSource,
    /// Pickle file read when `source` is `upstream`.
    pub upstream_path: Option<PathBuf>,
    pub generate: GenerationConfig,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            source: DataSource::Synthetic,
            upstream_path: None,
            generate: GenerationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub variant: BackboneVariant,
    pub first_conv_kernel: [usize; 2],
    pub first_conv_stride: [usize; 2],
    pub heads: HeadConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        let b = BackboneConfig::full();
        ModelSection {
            variant: b.variant,
            first_conv_kernel: b.first_conv_kernel,
            first_conv_stride: b.first_conv_stride,
            heads: HeadConfig::default(),
        }
    }
}

impl ModelSection {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            first_conv_kernel: self.first_conv_kernel,
            first_conv_stride: self.first_conv_stride,
            ..BackboneConfig::new(self.variant)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub inits: Vec<InitSource>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            fractions: vec![0.005, 0.01, 0.05, 0.10, 0.50, 0.75, 0.90],
            seeds: vec![0],
            inits: vec![InitSource::SslCheckpoint, InitSource::Xavier],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSection,
    pub split: SplitSpec,
    pub augment: AugmentationConfig,
    pub model: ModelSection,
    pub ssl: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: None,
            dataset: DatasetSection::default(),
            split: SplitSpec::default(),
            augment: AugmentationConfig::default(),
            model: ModelSection::default(),
            ssl: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

fn unknown_keys(given: &Value, reference: &Value, path: &str, out: &mut Vec<String>) {
    let (Value::Object(g), Value::Object(r)) = (given, reference) else {
        return;
    };
    for (k, v) in g {
        let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        match r.get(k) {
            Some(rv) => unknown_keys(v, rv, &here, out),
            None => out.push(format!("unknown key {here}")),
        }
    }
}

fn section_mut<'a>(root: &'a mut Map<String, Value>, path: &[&str]) -> Option<&'a mut Map<String, Value>> {
    let mut cur = root;
    for key in path {
        cur = cur
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Map::new()))
            .as_object_mut()?;
    }
    Some(cur)
}

impl ExperimentConfig {
    /// Decodes a config document. `global_seed` (from the command line)
    /// replaces the document's top-level seed before inheritance.
    pub fn from_value(mut doc: Value, global_seed: Option<u64>) -> Result<Self> {
        let Some(root) = doc.as_object_mut() else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let mut problems = Vec::new();
        let reference = serde_json::to_value(ExperimentConfig::default())?;
        unknown_keys(&Value::Object(root.clone()), &reference, "", &mut problems);
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        if let Some(s) = global_seed {
            root.insert("seed".into(), s.into());
        }
        let seed = root.get("seed").cloned().unwrap_or(Value::from(0u64));
        for path in SEEDED_SECTIONS {
            match section_mut(root, path) {
                Some(section) => {
                    section.entry("seed").or_insert_with(|| seed.clone());
                }
                None => problems.push(format!("{} must be an object", path.join("."))),
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(doc).map_err(|e| Error::Config(format!("config does not decode: {e}")))?;
        cfg.validated()
    }

    pub fn load(path: &Path, global_seed: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let doc: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{} is not valid JSON: {e}", path.display())))?;
        Self::from_value(doc, global_seed)
    }

    /// Every violation across all sections.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        v.extend(self.dataset.generate.violations());
        if self.dataset.source == DataSource::Upstream && self.dataset.upstream_path.is_none() {
            v.push("dataset.upstream_path is required when dataset.source is upstream".into());
        }
        v.extend(self.split.violations());
        v.extend(self.augment.violations());
        v.extend(self.model.backbone().violations());
        v.extend(self.model.heads.violations());
        v.extend(self.ssl.violations());
        v.extend(self.finetune.violations());
        if self.eval.fractions.is_empty() {
            v.push("eval.fractions must be non-empty".into());
        }
        for f in &self.eval.fractions {
            if !(*f > 0.0 && *f <= 1.0) {
                v.push(format!("eval.fractions entry {f} outside (0, 1]"));
            }
        }
        if self.eval.seeds.is_empty() {
            v.push("eval.seeds must be non-empty".into());
        }
        if self.eval.inits.is_empty() {
            v.push("eval.inits must be non-empty".into());
        }
        v
    }

    pub fn validated(self) -> Result<Self> {
        let v = self.violations();
        if v.is_empty() {
            Ok(self)
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    pub fn to_json(&self) -> Result<String> {
        // Round-trip through Value so keys come out sorted.
        let value = serde_json::to_value(self)?;
        Ok(serde_json::to_string_pretty(&value)?)
    }

    /// SHA-256 of the canonical JSON.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }
}
