use std::collections::{BTreeMap, BTreeSet};

use candle_core::{Device, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rfssl_core::augment::{amplitude_scale, augment, augment_seeded, dc_shift, time_shift, zero_mask};
use rfssl_core::dataio::{split_manifest, DatasetManifest};
use rfssl_core::eval::argmax;
use rfssl_core::finetune::{cross_entropy, ClampCounter, ClassProbabilities, PlateauSchedule};
use rfssl_core::ssl::{batch_contrastive_loss, info_nce, l2_normalize, ContrastiveBatch};
use rfssl_core::{AugmentationConfig, IqFrame, ModulationClass, SplitSpec};

fn frame_strategy() -> impl Strategy<Value = IqFrame> {
    prop::collection::vec(-3.0f64..3.0, 256).prop_map(|v| IqFrame::from_fn(|r, i| v[r * 128 + i]))
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-2.0f64..2.0, cols), rows)
        .prop_filter("rows must be non-zero", |m| m.iter().all(|r| r.iter().any(|v| v.abs() > 1e-3)))
}

fn batch_strategy() -> impl Strategy<Value = (Vec<Vec<Vec<f64>>>, f64)> {
    (2usize..=6, 3usize..=10).prop_flat_map(|(b, d)| (prop::collection::vec(matrix(b, d), 4), 0.1f64..3.0))
}

fn to_tensor(m: &[Vec<f64>]) -> Tensor {
    let flat: Vec<f64> = m.iter().flatten().copied().collect();
    Tensor::from_vec(flat, (m.len(), m[0].len()), &Device::Cpu).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions_and_stratifies(
        n_classes in 1usize..5,
        n_snr in 1usize..4,
        per_cell in 5usize..60,
        test_fraction in 0.05f64..0.5,
        train_fraction in 0.2f64..0.9,
        seed in any::<u64>(),
    ) {
        let classes = ModulationClass::ALL[..n_classes].to_vec();
        let grid: Vec<i32> = (0..n_snr as i32).map(|s| 4 * s - 4).collect();
        let m = DatasetManifest::new(classes, grid, per_cell, 0);
        let spec = SplitSpec { test_fraction, train_fraction_of_pool: train_fraction, seed };
        let Ok(split) = split_manifest(&m, &spec) else { return Ok(()) };

        let all: BTreeSet<usize> = split.train.iter().chain(&split.val).chain(&split.test).copied().collect();
        prop_assert_eq!(all.len(), m.total);
        prop_assert_eq!(split.train.len() + split.val.len() + split.test.len(), m.total);

        let expected_test = (test_fraction * m.total as f64 + 1e-9).floor() as usize;
        prop_assert_eq!(split.test.len(), expected_test);
        let mut per_cell_test: BTreeMap<usize, usize> = BTreeMap::new();
        for &id in &split.test {
            *per_cell_test.entry(id / per_cell).or_default() += 1;
        }
        for cell in 0..m.num_cells() {
            let got = per_cell_test.get(&cell).copied().unwrap_or(0) as f64;
            prop_assert!((got - test_fraction * per_cell as f64).abs() < 1.0 + 1e-9);
        }
        prop_assert_eq!(split_manifest(&m, &spec).unwrap(), split);
    }

    #[test]
    fn identity_augmentation_is_exact(x in frame_strategy(), seed in any::<u64>()) {
        prop_assert_eq!(augment_seeded(&x, &AugmentationConfig::identity(), seed).unwrap(), x);
    }

    #[test]
    fn augmentation_is_seed_deterministic(x in frame_strategy(), seed in any::<u64>()) {
        let cfg = AugmentationConfig::default();
        prop_assert_eq!(augment_seeded(&x, &cfg, seed).unwrap(), augment_seeded(&x, &cfg, seed).unwrap());
    }

    #[test]
    fn time_shifts_compose(x in frame_strategy(), a in -200i64..200, b in -200i64..200) {
        prop_assert_eq!(time_shift(&time_shift(&x, a), b), time_shift(&x, a + b));
        prop_assert_eq!(time_shift(&x, 128), x);
    }

    #[test]
    fn zero_mask_touches_only_its_window(x in frame_strategy(), start in 0usize..128, len in 0usize..128) {
        let len = len.min(128 - start);
        let y = zero_mask(&x, start, len).unwrap();
        for t in 0..128 {
            for r in 0..2 {
                let want = if (start..start + len).contains(&t) { 0.0 } else { x.rows[r][t] };
                prop_assert_eq!(y.rows[r][t], want);
            }
        }
    }

    #[test]
    fn masks_past_the_end_are_refused(start in 1usize..128, extra in 1usize..50) {
        prop_assert!(zero_mask(&IqFrame::zeros(), start, 128 - start + extra).is_err());
    }

    #[test]
    fn dc_shift_moves_row_means(x in frame_strategy(), oi in -1.0f64..1.0, oq in -1.0f64..1.0) {
        let y = dc_shift(&x, oi, oq);
        let mean = |f: &IqFrame, r: usize| f.rows[r].iter().sum::<f64>() / 128.0;
        prop_assert!((mean(&y, 0) - mean(&x, 0) - oi).abs() < 1e-12);
        prop_assert!((mean(&y, 1) - mean(&x, 1) - oq).abs() < 1e-12);
    }

    #[test]
    fn amplitude_scale_power_law(x in frame_strategy(), s in 0.05f64..10.0) {
        prop_assume!(x.energy() > 1e-6);
        let ratio = amplitude_scale(&x, s).energy() / x.energy();
        prop_assert!((ratio / (s * s) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn default_augmentation_stays_finite(x in frame_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert!(augment(&x, &AugmentationConfig::default(), &mut rng).unwrap().is_finite());
    }

    #[test]
    fn tensor_loss_matches_scalar_loss((m, tau) in batch_strategy()) {
        let t: Vec<Tensor> = m.iter().map(|x| to_tensor(x)).collect();
        let tensor: f64 = batch_contrastive_loss(&t[0], &t[1], &t[2], &t[3], tau).unwrap().to_scalar().unwrap();
        let scalar = ContrastiveBatch::new(m[0].clone(), m[1].clone(), m[2].clone(), m[3].clone())
            .unwrap()
            .loss(tau)
            .unwrap();
        prop_assert!((tensor - scalar).abs() < 1e-9, "{} vs {}", tensor, scalar);
    }

    #[test]
    fn loss_ignores_row_scale((m, tau) in batch_strategy(), s in 0.1f64..10.0) {
        let scaled: Vec<Vec<Vec<f64>>> = m
            .iter()
            .map(|x| x.iter().map(|r| r.iter().map(|v| v * s).collect()).collect())
            .collect();
        let loss = |m: &[Vec<Vec<f64>>]| -> f64 {
            let t: Vec<Tensor> = m.iter().map(|x| to_tensor(x)).collect();
            batch_contrastive_loss(&t[0], &t[1], &t[2], &t[3], tau).unwrap().to_scalar().unwrap()
        };
        prop_assert!((loss(&m) - loss(&scaled)).abs() < 1e-9);
    }

    #[test]
    fn info_nce_is_bounded_below_by_zero(q in matrix(1, 6), kp in matrix(1, 6), kn in matrix(5, 6), tau in 0.1f64..2.0) {
        let q = l2_normalize(&q[0]).unwrap();
        let kp = l2_normalize(&kp[0]).unwrap();
        let kn: Vec<Vec<f64>> = kn.iter().map(|r| l2_normalize(r).unwrap()).collect();
        let v = info_nce(&q, &kp, &kn, tau).unwrap();
        prop_assert!(v > 0.0 && v.is_finite());
        // With unit vectors the logits lie in [-1/tau, 1/tau].
        prop_assert!(v <= 2.0 / tau + (kn.len() as f64 + 1.0).ln() + 1e-9);
    }

    #[test]
    fn probabilities_from_logits_are_valid(logits in prop::collection::vec(-30.0f64..30.0, 2..12), t in 0usize..12) {
        let t = t % logits.len();
        let p = ClassProbabilities::from_logits(&logits, t).unwrap();
        prop_assert!((p.p().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert_eq!(p.beta().iter().filter(|&&b| b == 1.0).count(), 1);
        let ce = cross_entropy(&p, &mut ClampCounter::default());
        prop_assert!(ce >= 0.0 && ce <= -(1e-12f64).ln() + 1e-9);
        prop_assert_eq!(argmax(&logits), argmax(p.p()));
    }

    #[test]
    fn plateau_lr_only_ever_halves(history in prop::collection::vec(0.0f64..2.0, 1..80)) {
        let mut s = PlateauSchedule::new(0.01, 5, 20);
        let mut lr = s.lr;
        for v in history {
            let d = s.observe(v);
            prop_assert!(!(d.improved && (d.halve_lr || d.stop)));
            if d.halve_lr {
                prop_assert_eq!(s.lr, lr * 0.5);
            } else {
                prop_assert_eq!(s.lr, lr);
            }
            lr = s.lr;
            prop_assert!(s.stale < 20 || d.stop);
            if d.stop {
                break;
            }
        }
    }
}
