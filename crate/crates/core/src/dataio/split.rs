//! Stratified train / validation / test splitting.
//!
//! The test set is carved first from every (class, snr) cell; the train set
//! is then carved from what remains and the rest becomes validation. Per-cell
//! counts are floored and the leftover quota is granted one example at a time
//! to cells in a seeded shuffled order.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mix_seed, Dataset, DatasetManifest};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub train_fraction_of_pool: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            test_fraction: 0.20,
            train_fraction_of_pool: 0.90,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            v.push(format!("split.test_fraction {} must lie in (0, 1)", self.test_fraction));
        }
        if !(self.train_fraction_of_pool > 0.0 && self.train_fraction_of_pool <= 1.0) {
            v.push(format!(
                "split.train_fraction_of_pool {} must lie in (0, 1]",
                self.train_fraction_of_pool
            ));
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitIds {
    pub spec: SplitSpec,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIds {
    /// Train and validation ids together (the unlabeled pretraining pool).
    pub fn pool(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.train.iter().chain(&self.val).copied().collect();
        ids.sort_unstable();
        ids
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Floor of `fraction * n`, tolerant of binary representation error
/// (0.005 * 176000 must give 880, not 879).
fn quota(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 + 1e-9).floor() as usize
}

/// Distributes `total_fraction` of each cell's `sizes` so the grand total is
/// `quota(fraction, sum(sizes))` and every cell is within one of its
/// proportional share.
fn allocate(sizes: &[usize], fraction: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let total = quota(fraction, sizes.iter().sum());
    let exact: Vec<f64> = sizes.iter().map(|&n| fraction * n as f64).collect();
    let mut counts: Vec<usize> = sizes.iter().map(|&n| quota(fraction, n)).collect();
    let assigned: usize = counts.iter().sum();
    let mut remainder = total.saturating_sub(assigned);

    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.shuffle(rng);
    for &c in &order {
        if remainder == 0 {
            break;
        }
        if exact[c] - (counts[c] as f64) > 1e-9 && counts[c] < sizes[c] {
            counts[c] += 1;
            remainder -= 1;
        }
    }
    debug_assert_eq!(remainder, 0);
    counts
}

pub fn split_dataset(ds: &Dataset, spec: &SplitSpec) -> Result<SplitIds> {
    split_manifest(&ds.manifest, spec)
}

/// Splits by layout alone; frames are never touched.
pub fn split_manifest(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<SplitIds> {
    spec.validate()?;
    manifest.validate()?;
    let cells = manifest.cell_ids();

    // Each cell's members in a seeded order; test takes the prefix, train the
    // next block. The test set therefore does not depend on the train fraction.
    let orders: Vec<Vec<usize>> = cells
        .iter()
        .enumerate()
        .map(|(c, (_, range))| {
            let mut ids: Vec<usize> = range.clone().collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, &[1, c as u64]));
            ids.shuffle(&mut rng);
            ids
        })
        .collect();

    let sizes: Vec<usize> = orders.iter().map(Vec::len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, &[2]));
    let test_counts = allocate(&sizes, spec.test_fraction, &mut rng);
    let pool_sizes: Vec<usize> = sizes.iter().zip(&test_counts).map(|(n, t)| n - t).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, &[3]));
    let train_counts = allocate(&pool_sizes, spec.train_fraction_of_pool, &mut rng);

    let mut split = SplitIds {
        spec: *spec,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (c, ids) in orders.iter().enumerate() {
        let (test, rest) = ids.split_at(test_counts[c]);
        let (train, val) = rest.split_at(train_counts[c]);
        split.test.extend_from_slice(test);
        split.train.extend_from_slice(train);
        split.val.extend_from_slice(val);
    }
    for (name, ids) in [("test", &split.test), ("train", &split.train), ("validation", &split.val)] {
        if ids.is_empty() {
            return Err(Error::Split(format!(
                "{name} subset is empty (total {}, test {}, train fraction {})",
                manifest.total,
                spec.test_fraction,
                spec.train_fraction_of_pool
            )));
        }
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{IqFrame, ModulationClass, SignalExample};

    /// A dataset with placeholder frames; splitting only looks at the layout.
    pub(crate) fn layout_only(classes: &[ModulationClass], grid: &[i32], per_cell: usize) -> Dataset {
        let manifest = DatasetManifest::new(classes.to_vec(), grid.to_vec(), per_cell, 0);
        let mut examples = Vec::with_capacity(manifest.total);
        for &c in classes {
            for &s in grid {
                for _ in 0..per_cell {
                    examples.push(SignalExample {
                        iq: IqFrame::zeros(),
                        label: c,
                        snr_db: s,
                    });
                }
            }
        }
        Dataset::new(manifest, examples).unwrap()
    }

    #[test]
    fn train_fraction_one_empties_validation() {
        let ds = layout_only(&[ModulationClass::Bpsk], &[0, 2], 10);
        let spec = SplitSpec {
            train_fraction_of_pool: 1.0,
            ..Default::default()
        };
        assert!(matches!(split_dataset(&ds, &spec), Err(Error::Split(_))));
    }

    #[test]
    fn tiny_fraction_empties_train() {
        let ds = layout_only(&[ModulationClass::Bpsk], &[0], 10);
        let spec = SplitSpec {
            train_fraction_of_pool: 0.01,
            ..Default::default()
        };
        let err = split_dataset(&ds, &spec).unwrap_err().to_string();
        assert!(err.contains("train"), "{err}");
    }

    #[test]
    fn invalid_fractions_are_config_errors() {
        let ds = layout_only(&[ModulationClass::Bpsk], &[0], 10);
        for (t, f) in [(0.0, 0.5), (1.0, 0.5), (0.2, 0.0), (0.2, 1.5)] {
            let spec = SplitSpec {
                test_fraction: t,
                train_fraction_of_pool: f,
                seed: 0,
            };
            assert!(matches!(split_dataset(&ds, &spec), Err(Error::Config(_))));
        }
    }

    #[test]
    fn test_set_is_stable_across_train_fractions() {
        let ds = layout_only(&ModulationClass::ALL[..3], &[0, 2, 4], 37);
        let a = split_dataset(&ds, &SplitSpec { train_fraction_of_pool: 0.1, ..Default::default() }).unwrap();
        let b = split_dataset(&ds, &SplitSpec { train_fraction_of_pool: 0.7, ..Default::default() }).unwrap();
        assert_eq!(a.test, b.test);
        assert!(a.train.iter().all(|id| b.train.contains(id)));
    }

    #[test]
    fn persisted_ids_round_trip() {
        let ds = layout_only(&[ModulationClass::Qpsk], &[0, 2], 20);
        let split = split_dataset(&ds, &SplitSpec::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.json");
        split.save(&path).unwrap();
        assert_eq!(SplitIds::load(&path).unwrap(), split);
    }
}
