//! Label-preserving I/Q transforms used to build positive pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{IqFrame, FRAME_LEN};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    DcShift,
    TimeShift,
    AmplitudeScale,
    ZeroMask,
    Awgn,
}

impl Transform {
    pub const DEFAULT_ORDER: [Transform; 5] = [
        Transform::DcShift,
        Transform::TimeShift,
        Transform::AmplitudeScale,
        Transform::ZeroMask,
        Transform::Awgn,
    ];
}

/// Parameter ranges, all inclusive. Omitted JSON fields take the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub dc_shift_range: [f64; 2],
    pub time_shift_range: [i64; 2],
    pub amplitude_scale_range: [f64; 2],
    pub zero_mask_len_range: [usize; 2],
    /// Per-component noise variance.
    pub awgn_variance: f64,
    pub order: Vec<Transform>,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            dc_shift_range: [0.0, 1e-4],
            time_shift_range: [-40, 40],
            amplitude_scale_range: [0.8, 1.2],
            zero_mask_len_range: [0, 25],
            awgn_variance: 1e-5,
            order: Transform::DEFAULT_ORDER.to_vec(),
        }
    }
}

impl AugmentationConfig {
    /// Ranges collapsed so every transform is the identity.
    pub fn identity() -> Self {
        AugmentationConfig {
            dc_shift_range: [0.0, 0.0],
            time_shift_range: [0, 0],
            amplitude_scale_range: [1.0, 1.0],
            zero_mask_len_range: [0, 0],
            awgn_variance: 0.0,
            order: Transform::DEFAULT_ORDER.to_vec(),
        }
    }

    /// Every violation, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let [dlo, dhi] = self.dc_shift_range;
        if !(dlo.is_finite() && dhi.is_finite() && dlo <= dhi) {
            out.push(format!("augment.dc_shift_range {:?} is not an ordered finite range", self.dc_shift_range));
        }
        let [tlo, thi] = self.time_shift_range;
        if tlo > thi {
            out.push(format!("augment.time_shift_range {:?} is not ordered", self.time_shift_range));
        }
        let [slo, shi] = self.amplitude_scale_range;
        if !(slo.is_finite() && shi.is_finite() && slo <= shi) {
            out.push(format!(
                "augment.amplitude_scale_range {:?} is not an ordered finite range",
                self.amplitude_scale_range
            ));
        }
        let [mlo, mhi] = self.zero_mask_len_range;
        if mlo > mhi || mhi > FRAME_LEN {
            out.push(format!(
                "augment.zero_mask_len_range {:?} must be ordered and at most {FRAME_LEN}",
                self.zero_mask_len_range
            ));
        }
        if !(self.awgn_variance.is_finite() && self.awgn_variance >= 0.0) {
            out.push(format!("augment.awgn_variance {} must be >= 0", self.awgn_variance));
        }
        let mut seen = self.order.clone();
        seen.sort_by_key(|t| *t as u8);
        seen.dedup();
        if seen.len() != self.order.len() || seen.len() != Transform::DEFAULT_ORDER.len() {
            out.push("augment.order must list each of the five transforms exactly once".into());
        }
        out
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

pub fn dc_shift(x: &IqFrame, offset_i: f64, offset_q: f64) -> IqFrame {
    let mut out = x.clone();
    out.rows[0].iter_mut().for_each(|v| *v += offset_i);
    out.rows[1].iter_mut().for_each(|v| *v += offset_q);
    out
}

/// Circular shift; positive `k` delays (sample 0 moves to index `k`).
pub fn time_shift(x: &IqFrame, k: i64) -> IqFrame {
    let shift = k.rem_euclid(FRAME_LEN as i64) as usize;
    let mut out = x.clone();
    for row in out.rows.iter_mut() {
        row.rotate_right(shift);
    }
    out
}

pub fn amplitude_scale(x: &IqFrame, s: f64) -> IqFrame {
    let mut out = x.clone();
    for row in out.rows.iter_mut() {
        row.iter_mut().for_each(|v| *v *= s);
    }
    out
}

/// Zeroes columns `[start, start + length)` on both rows.
pub fn zero_mask(x: &IqFrame, start: usize, length: usize) -> Result<IqFrame> {
    if start.checked_add(length).is_none_or(|end| end > FRAME_LEN) {
        return Err(Error::Contract(format!(
            "zero mask [{start}, {start}+{length}) exceeds frame length {FRAME_LEN}"
        )));
    }
    let mut out = x.clone();
    for row in out.rows.iter_mut() {
        row[start..start + length].iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(out)
}

/// Adds i.i.d. N(0, variance) to every element.
pub fn awgn<R: Rng + ?Sized>(x: &IqFrame, variance: f64, rng: &mut R) -> Result<IqFrame> {
    if !(variance.is_finite() && variance >= 0.0) {
        return Err(Error::Contract(format!("AWGN variance {variance} must be >= 0")));
    }
    if variance == 0.0 {
        return Ok(x.clone());
    }
    let normal = Normal::new(0.0, variance.sqrt()).expect("finite positive sigma");
    let mut out = x.clone();
    for row in out.rows.iter_mut() {
        row.iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    Ok(out)
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Applies every transform in `cfg.order`, each with parameters drawn
/// uniformly from its range.
pub fn augment<R: Rng + ?Sized>(x: &IqFrame, cfg: &AugmentationConfig, rng: &mut R) -> Result<IqFrame> {
    let mut out = x.clone();
    for t in &cfg.order {
        out = match t {
            Transform::DcShift => {
                let oi = uniform(rng, cfg.dc_shift_range);
                let oq = uniform(rng, cfg.dc_shift_range);
                dc_shift(&out, oi, oq)
            }
            Transform::TimeShift => {
                let [lo, hi] = cfg.time_shift_range;
                time_shift(&out, rng.random_range(lo..=hi))
            }
            Transform::AmplitudeScale => amplitude_scale(&out, uniform(rng, cfg.amplitude_scale_range)),
            Transform::ZeroMask => {
                let [lo, hi] = cfg.zero_mask_len_range;
                let length = rng.random_range(lo..=hi.min(FRAME_LEN));
                let start = rng.random_range(0..=FRAME_LEN - length);
                zero_mask(&out, start, length)?
            }
            Transform::Awgn => awgn(&out, cfg.awgn_variance, rng)?,
        };
    }
    Ok(out)
}

/// `augment` on a fresh stream seeded from `seed`.
pub fn augment_seeded(x: &IqFrame, cfg: &AugmentationConfig, seed: u64) -> Result<IqFrame> {
    augment(x, cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> IqFrame {
        IqFrame::from_fn(|r, i| (i as f64 + 1.0) * if r == 0 { 0.01 } else { -0.02 })
    }

    #[test]
    fn dc_shift_cases() {
        let x = ramp();
        assert_eq!(dc_shift(&x, 0.0, 0.0), x);
        let z = dc_shift(&IqFrame::zeros(), 1e-4, 1e-4);
        assert!(z.values().all(|v| v == 1e-4));
        let y = dc_shift(&x, 3e-5, 7e-5);
        let mean = |f: &IqFrame, r: usize| f.rows[r].iter().sum::<f64>() / FRAME_LEN as f64;
        assert!((mean(&y, 0) - mean(&x, 0) - 3e-5).abs() < 1e-15);
        assert!((mean(&y, 1) - mean(&x, 1) - 7e-5).abs() < 1e-15);
    }

    #[test]
    fn time_shift_cases() {
        let x = ramp();
        assert_eq!(time_shift(&x, 0), x);
        assert_eq!(time_shift(&x, FRAME_LEN as i64), x);
        let mut marked = IqFrame::zeros();
        marked.rows[0][0] = 1.0;
        marked.rows[1][0] = -1.0;
        let y = time_shift(&marked, 3);
        assert_eq!(y.rows[0][3], 1.0);
        assert_eq!(y.rows[1][3], -1.0);
        let y = time_shift(&marked, -1);
        assert_eq!(y.rows[0][FRAME_LEN - 1], 1.0);
        assert_eq!(time_shift(&time_shift(&x, 17), -17), x);
    }

    #[test]
    fn amplitude_scale_cases() {
        let x = ramp();
        assert_eq!(amplitude_scale(&x, 1.0), x);
        let ones = IqFrame::from_fn(|_, _| 1.0);
        assert!(amplitude_scale(&ones, 0.8).values().all(|v| v == 0.8));
    }

    #[test]
    fn zero_mask_cases() {
        let x = ramp();
        assert_eq!(zero_mask(&x, 5, 0).unwrap(), x);
        let y = zero_mask(&x, 10, 25).unwrap();
        let zero_cols: Vec<usize> = (0..FRAME_LEN)
            .filter(|&i| y.rows[0][i] == 0.0 && y.rows[1][i] == 0.0)
            .collect();
        assert_eq!(zero_cols, (10..35).collect::<Vec<_>>());
        assert!(zero_mask(&x, FRAME_LEN - 24, 25).is_err());
        assert!(zero_mask(&x, FRAME_LEN - 25, 25).is_ok());
        assert!(zero_mask(&x, usize::MAX, 1).is_err());
    }

    #[test]
    fn awgn_zero_variance_is_identity() {
        let x = ramp();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(awgn(&x, 0.0, &mut rng).unwrap(), x);
        assert!(awgn(&x, -1.0, &mut rng).is_err());
    }

    #[test]
    fn identity_config_is_identity() {
        let x = ramp();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            assert_eq!(augment(&x, &AugmentationConfig::identity(), &mut rng).unwrap(), x);
        }
    }

    #[test]
    fn augment_is_seed_deterministic_and_diverse() {
        let x = ramp();
        let cfg = AugmentationConfig::default();
        assert_eq!(augment_seeded(&x, &cfg, 5).unwrap(), augment_seeded(&x, &cfg, 5).unwrap());
        let outputs: Vec<IqFrame> = (0..100).map(|s| augment_seeded(&x, &cfg, s).unwrap()).collect();
        for i in 0..outputs.len() {
            for j in i + 1..outputs.len() {
                assert_ne!(outputs[i], outputs[j]);
            }
        }
    }

    #[test]
    fn config_parsing_defaults_and_rejects_unknown() {
        let cfg: AugmentationConfig = serde_json::from_str(r#"{"awgn_variance": 0.0}"#).unwrap();
        assert_eq!(cfg.dc_shift_range, [0.0, 1e-4]);
        assert_eq!(cfg.time_shift_range, [-40, 40]);
        assert_eq!(cfg.amplitude_scale_range, [0.8, 1.2]);
        assert_eq!(cfg.zero_mask_len_range, [0, 25]);
        assert_eq!(cfg.awgn_variance, 0.0);
        assert!(serde_json::from_str::<AugmentationConfig>(r#"{"rotation": 1}"#).is_err());
    }

    #[test]
    fn violations_are_all_reported() {
        let cfg = AugmentationConfig {
            dc_shift_range: [1.0, 0.0],
            zero_mask_len_range: [0, 500],
            awgn_variance: -1.0,
            order: vec![Transform::Awgn, Transform::Awgn],
            ..Default::default()
        };
        assert_eq!(cfg.violations().len(), 4);
        assert!(AugmentationConfig::default().validate().is_ok());
    }
}
