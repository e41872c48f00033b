use std::path::PathBuf;

use rfssl_core::dataio::{load_container, load_upstream, split_dataset, write_container};
use rfssl_core::{Error, ErrorCategory, ModulationClass, SplitSpec};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// The fixtures hold 2 classes x SNR {-2, 10} x 3 examples; sample `t` of row
/// `r` in example `k` of writer cell `(ci, si)` is
/// `t * 0.001 * (2r - 1) + 10 ci + si + 0.25 k`, with QPSK written first.
fn expected(class: ModulationClass, snr: i32, k: usize, r: usize, t: usize) -> f32 {
    let ci = if class == ModulationClass::Qpsk { 0.0 } else { 1.0 };
    let si = if snr == -2 { 0.0 } else { 1.0 };
    let sign = if r == 0 { -1.0f32 } else { 1.0 };
    t as f32 * 0.001 * sign + (ci * 10.0 + si) as f32 + k as f32 * 0.25
}

#[test]
fn every_pickle_protocol_decodes_to_the_same_dataset() {
    for p in [2, 4, 5] {
        let ds = load_upstream(&fixture(&format!("upstream_p{p}.pkl"))).unwrap();
        assert_eq!(ds.manifest.classes, vec![ModulationClass::Psk8, ModulationClass::Qpsk]);
        assert_eq!(ds.manifest.snr_grid, vec![-2, 10]);
        assert_eq!(ds.manifest.examples_per_cell, 3);
        for ((class, snr), ids) in ds.cell_ids() {
            for (k, id) in ids.enumerate() {
                let ex = &ds.examples[id];
                assert_eq!((ex.label, ex.snr_db), (class, snr));
                for r in 0..2 {
                    for t in [0, 1, 77, 127] {
                        assert_eq!(ex.iq.rows[r][t] as f32, expected(class, snr, k, r, t), "protocol {p}");
                    }
                }
            }
        }
    }
}

#[test]
fn malformed_cell_is_named_in_the_error() {
    let err = load_upstream(&fixture("upstream_bad_shape.pkl")).unwrap_err();
    assert_eq!(err.category(), ErrorCategory::Data);
    assert!(matches!(err, Error::Ingestion(_)));
    let msg = err.to_string();
    assert!(msg.contains("QPSK") && msg.contains("10"), "{msg}");
}

#[test]
fn missing_file_is_a_data_error() {
    let err = load_upstream(&fixture("absent.pkl")).unwrap_err();
    assert_eq!(err.category(), ErrorCategory::Data);
}

#[test]
fn upstream_data_survives_the_container() {
    let ds = load_upstream(&fixture("upstream_p4.pkl")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_container(&ds, dir.path(), false).unwrap();
    let back = load_container(dir.path()).unwrap();
    assert_eq!(back.examples, ds.examples);
    let spec = SplitSpec { test_fraction: 1.0 / 3.0, train_fraction_of_pool: 0.5, seed: 4 };
    assert_eq!(split_dataset(&back, &spec).unwrap(), split_dataset(&ds, &spec).unwrap());
}
