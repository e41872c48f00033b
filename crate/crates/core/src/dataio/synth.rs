//! Received-signal synthesis: y(i) = A(i) e^{j(w i + phi)} x(i) + n(i).

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{IqFrame, ModulationClass, SignalExample, FRAME_LEN};
use crate::error::{Error, Result};

/// Mean complex power per sample of the noise-free frame (unit frame energy).
pub const SIGNAL_POWER: f64 = 1.0 / FRAME_LEN as f64;

/// Messages for the analog classes are low-passed to this fraction of the
/// sample rate.
const MESSAGE_CUTOFF: f64 = 0.05;
const AM_MODULATION_INDEX: f64 = 0.5;
const FM_SENSITIVITY: f64 = 0.08;
const FSK_MODULATION_INDEX: f64 = 0.5;
const GFSK_BT: f64 = 0.35;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelGain {
    Constant(f64),
    PerSample(Vec<f64>),
}

impl ChannelGain {
    fn at(&self, i: usize) -> f64 {
        match self {
            ChannelGain::Constant(a) => *a,
            ChannelGain::PerSample(v) => v[i],
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            ChannelGain::Constant(a) => a.is_finite() && *a > 0.0,
            ChannelGain::PerSample(v) => {
                v.len() == FRAME_LEN && v.iter().all(|a| a.is_finite() && *a > 0.0)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "channel gain must be positive and finite (and {FRAME_LEN} long when per-sample)"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PulseShape {
    Rectangular,
    RootRaisedCosine { rolloff: f64, span_symbols: usize },
}

impl Default for PulseShape {
    fn default() -> Self {
        PulseShape::RootRaisedCosine {
            rolloff: 0.35,
            span_symbols: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisParams {
    pub channel_gain: ChannelGain,
    /// Radians per sample.
    pub freq_offset: f64,
    /// Radians, in [0, 2pi).
    pub phase_offset: f64,
    /// `f64::INFINITY` produces a noiseless frame.
    pub target_snr_db: f64,
    pub samples_per_symbol: usize,
    pub pulse: PulseShape,
    pub rng_seed: u64,
}

impl Default for SynthesisParams {
    fn default() -> Self {
        SynthesisParams {
            channel_gain: ChannelGain::Constant(1.0),
            freq_offset: 0.0,
            phase_offset: 0.0,
            target_snr_db: f64::INFINITY,
            samples_per_symbol: 8,
            pulse: PulseShape::default(),
            rng_seed: 0,
        }
    }
}

impl SynthesisParams {
    pub fn validate(&self) -> Result<()> {
        self.channel_gain.validate()?;
        if !self.freq_offset.is_finite() {
            return Err(Error::Config("frequency offset must be finite".into()));
        }
        if !(0.0..2.0 * PI).contains(&self.phase_offset) {
            return Err(Error::Config(format!(
                "phase offset {} outside [0, 2pi)",
                self.phase_offset
            )));
        }
        if self.target_snr_db.is_nan() {
            return Err(Error::Config("target SNR is NaN".into()));
        }
        if self.samples_per_symbol == 0 {
            return Err(Error::Config("samples per symbol must be positive".into()));
        }
        if let PulseShape::RootRaisedCosine {
            rolloff,
            span_symbols,
        } = self.pulse
        {
            if !(0.0..=1.0).contains(&rolloff) || rolloff == 0.0 || span_symbols == 0 {
                return Err(Error::Config(
                    "root-raised-cosine needs rolloff in (0, 1] and a positive span".into(),
                ));
            }
        }
        Ok(())
    }
}

/// The two additive parts of a received frame.
#[derive(Debug, Clone)]
pub struct SynthesizedFrame {
    /// A(i) e^{j(w i + phi)} x(i)
    pub clean: IqFrame,
    /// n(i)
    pub noise: IqFrame,
}

impl SynthesizedFrame {
    pub fn received(&self) -> IqFrame {
        IqFrame::from_fn(|r, i| self.clean.rows[r][i] + self.noise.rows[r][i])
    }
}

pub fn synthesize_components(
    modulation: ModulationClass,
    params: &SynthesisParams,
) -> Result<SynthesizedFrame> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);

    let mut x = baseband(modulation, params, &mut rng);
    let power = x.iter().map(|c| c.norm_sqr()).sum::<f64>() / FRAME_LEN as f64;
    if !(power.is_finite() && power > 0.0) {
        return Err(Error::Synthesis(format!(
            "{modulation} baseband has degenerate power {power}"
        )));
    }
    let norm = (SIGNAL_POWER / power).sqrt();
    for c in x.iter_mut() {
        *c *= norm;
    }

    let mut clean = IqFrame::zeros();
    for (i, xi) in x.iter().enumerate() {
        let rot = Complex64::from_polar(
            params.channel_gain.at(i),
            params.freq_offset * i as f64 + params.phase_offset,
        );
        let s = rot * xi;
        clean.rows[0][i] = s.re;
        clean.rows[1][i] = s.im;
    }

    let mut noise = IqFrame::zeros();
    if params.target_snr_db.is_finite() {
        let signal_power = clean.energy() / FRAME_LEN as f64;
        let noise_power = signal_power / 10f64.powf(params.target_snr_db / 10.0);
        let sigma = (noise_power / 2.0).sqrt();
        for i in 0..FRAME_LEN {
            let ni: f64 = rng.sample(StandardNormal);
            let nq: f64 = rng.sample(StandardNormal);
            noise.rows[0][i] = sigma * ni;
            noise.rows[1][i] = sigma * nq;
        }
    }

    let frame = SynthesizedFrame { clean, noise };
    if !(frame.clean.is_finite() && frame.noise.is_finite()) {
        return Err(Error::Synthesis(format!("{modulation} produced non-finite samples")));
    }
    Ok(frame)
}

/// Synthesizes one received frame. The SNR tag is the rounded target
/// (saturating for a noiseless request).
pub fn synthesize_waveform(
    modulation: ModulationClass,
    params: &SynthesisParams,
) -> Result<SignalExample> {
    let parts = synthesize_components(modulation, params)?;
    let iq = parts.received();
    if !iq.is_finite() {
        return Err(Error::Synthesis(format!("{modulation} produced non-finite samples")));
    }
    Ok(SignalExample {
        iq,
        label: modulation,
        snr_db: params.target_snr_db.round() as i32,
    })
}

fn baseband(modulation: ModulationClass, params: &SynthesisParams, rng: &mut ChaCha8Rng) -> Vec<Complex64> {
    use ModulationClass::*;
    let sps = params.samples_per_symbol;
    match modulation {
        Bpsk | Qpsk | Psk8 | Pam4 | Qam16 | Qam64 => {
            let points = constellation(modulation);
            linear_modulation(&points, sps, params.pulse, rng)
        }
        Cpfsk => frequency_shift_keying(sps, &rect_frequency_pulse(sps), rng),
        Gfsk => frequency_shift_keying(sps, &gaussian_frequency_pulse(sps, GFSK_BT), rng),
        AmDsb => band_limited_message(rng)
            .into_iter()
            .map(|m| Complex64::new(1.0 + AM_MODULATION_INDEX * m, 0.0))
            .collect(),
        AmSsb => upper_sideband_message(rng),
        Wbfm => {
            let mut phase = 0.0;
            band_limited_message(rng)
                .into_iter()
                .map(|m| {
                    phase += 2.0 * PI * FM_SENSITIVITY * m;
                    Complex64::from_polar(1.0, phase)
                })
                .collect()
        }
    }
}

/// Unit-average-power constellation points.
fn constellation(modulation: ModulationClass) -> Vec<Complex64> {
    use ModulationClass::*;
    let raw: Vec<Complex64> = match modulation {
        Bpsk => vec![Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.0)],
        Qpsk => (0..4)
            .map(|k| Complex64::from_polar(1.0, PI / 4.0 + k as f64 * PI / 2.0))
            .collect(),
        Psk8 => (0..8)
            .map(|k| Complex64::from_polar(1.0, k as f64 * PI / 4.0))
            .collect(),
        Pam4 => [-3.0, -1.0, 1.0, 3.0]
            .iter()
            .map(|&a| Complex64::new(a, 0.0))
            .collect(),
        Qam16 => square_qam(4),
        Qam64 => square_qam(8),
        _ => unreachable!("not a linear modulation"),
    };
    let p = raw.iter().map(|c| c.norm_sqr()).sum::<f64>() / raw.len() as f64;
    raw.into_iter().map(|c| c / p.sqrt()).collect()
}

fn square_qam(side: usize) -> Vec<Complex64> {
    let level = |k: usize| 2.0 * k as f64 - (side as f64 - 1.0);
    (0..side)
        .flat_map(|i| (0..side).map(move |q| Complex64::new(level(i), level(q))))
        .collect()
}

fn linear_modulation(
    points: &[Complex64],
    sps: usize,
    pulse: PulseShape,
    rng: &mut ChaCha8Rng,
) -> Vec<Complex64> {
    let taps = match pulse {
        PulseShape::Rectangular => vec![1.0; sps],
        PulseShape::RootRaisedCosine {
            rolloff,
            span_symbols,
        } => root_raised_cosine(rolloff, span_symbols, sps),
    };
    let delay = taps.len() - 1;
    let offset = rng.random_range(0..sps);
    let needed = delay + offset + FRAME_LEN;
    let n_symbols = needed.div_ceil(sps) + 1;
    let symbols: Vec<Complex64> = (0..n_symbols)
        .map(|_| points[rng.random_range(0..points.len())])
        .collect();

    // Upsample-and-filter evaluated only at the samples we keep.
    (0..FRAME_LEN)
        .map(|n| {
            let t = n + delay + offset;
            let mut acc = Complex64::new(0.0, 0.0);
            for (j, &h) in taps.iter().enumerate() {
                let u = t - j;
                if u % sps == 0 {
                    if let Some(sym) = symbols.get(u / sps) {
                        acc += sym * h;
                    }
                }
            }
            acc
        })
        .collect()
}

pub(crate) fn root_raised_cosine(beta: f64, span_symbols: usize, sps: usize) -> Vec<f64> {
    let half = (span_symbols * sps / 2) as isize;
    let mut taps: Vec<f64> = (-half..=half)
        .map(|k| {
            let t = k as f64 / sps as f64;
            if k == 0 {
                1.0 - beta + 4.0 * beta / PI
            } else if ((4.0 * beta * t).abs() - 1.0).abs() < 1e-9 {
                beta / 2f64.sqrt()
                    * ((1.0 + 2.0 / PI) * (PI / (4.0 * beta)).sin()
                        + (1.0 - 2.0 / PI) * (PI / (4.0 * beta)).cos())
            } else {
                ((PI * t * (1.0 - beta)).sin() + 4.0 * beta * t * (PI * t * (1.0 + beta)).cos())
                    / (PI * t * (1.0 - (4.0 * beta * t).powi(2)))
            }
        })
        .collect();
    let energy = taps.iter().map(|h| h * h).sum::<f64>().sqrt();
    taps.iter_mut().for_each(|h| *h /= energy);
    taps
}

fn rect_frequency_pulse(sps: usize) -> Vec<f64> {
    vec![1.0 / sps as f64; sps]
}

/// Rectangular pulse convolved with a Gaussian of bandwidth-time product
/// `bt`, normalized to unit area.
fn gaussian_frequency_pulse(sps: usize, bt: f64) -> Vec<f64> {
    let sigma = (2f64.ln()).sqrt() / (2.0 * PI * bt) * sps as f64;
    let half = 2 * sps as isize;
    let gauss: Vec<f64> = (-half..=half)
        .map(|k| (-(k as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let mut pulse = vec![0.0; gauss.len() + sps - 1];
    for (i, g) in gauss.iter().enumerate() {
        for j in 0..sps {
            pulse[i + j] += g;
        }
    }
    let area: f64 = pulse.iter().sum();
    pulse.iter_mut().for_each(|p| *p /= area);
    pulse
}

fn frequency_shift_keying(sps: usize, pulse: &[f64], rng: &mut ChaCha8Rng) -> Vec<Complex64> {
    let warmup = pulse.len() + rng.random_range(0..sps);
    let total = warmup + FRAME_LEN;
    let n_symbols = total.div_ceil(sps) + 1;
    let mut freq = vec![0.0; total + pulse.len()];
    for k in 0..n_symbols {
        let a = if rng.random::<bool>() { 1.0 } else { -1.0 };
        for (j, &g) in pulse.iter().enumerate() {
            if let Some(f) = freq.get_mut(k * sps + j) {
                *f += a * g;
            }
        }
    }
    let mut phase = 0.0;
    let mut out = Vec::with_capacity(FRAME_LEN);
    for (n, f) in freq.iter().take(total).enumerate() {
        phase += PI * FSK_MODULATION_INDEX * f;
        if n >= warmup {
            out.push(Complex64::from_polar(1.0, phase));
        }
    }
    out
}

const MESSAGE_FFT_LEN: usize = 2 * FRAME_LEN;

fn white_spectrum(rng: &mut ChaCha8Rng) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = (0..MESSAGE_FFT_LEN)
        .map(|_| Complex64::new(rng.sample::<f64, _>(StandardNormal), 0.0))
        .collect();
    FftPlanner::new()
        .plan_fft_forward(MESSAGE_FFT_LEN)
        .process(&mut buf);
    buf
}

fn inverse(mut spectrum: Vec<Complex64>) -> Vec<Complex64> {
    FftPlanner::new()
        .plan_fft_inverse(MESSAGE_FFT_LEN)
        .process(&mut spectrum);
    let scale = 1.0 / MESSAGE_FFT_LEN as f64;
    spectrum.into_iter().take(FRAME_LEN).map(|c| c * scale).collect()
}

fn cutoff_bin() -> usize {
    (MESSAGE_CUTOFF * MESSAGE_FFT_LEN as f64) as usize
}

fn standardize(values: &mut [f64]) {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    let sd = var.sqrt().max(f64::MIN_POSITIVE);
    values.iter_mut().for_each(|v| *v = (*v - mean) / sd);
}

/// Zero-mean, unit-variance low-pass Gaussian message.
fn band_limited_message(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut spec = white_spectrum(rng);
    let cut = cutoff_bin();
    for (k, c) in spec.iter_mut().enumerate() {
        let f = k.min(MESSAGE_FFT_LEN - k);
        if f == 0 || f > cut {
            *c = Complex64::new(0.0, 0.0);
        }
    }
    let mut m: Vec<f64> = inverse(spec).into_iter().map(|c| c.re).collect();
    standardize(&mut m);
    m
}

/// Analytic signal m + j H{m} of a low-pass message.
fn upper_sideband_message(rng: &mut ChaCha8Rng) -> Vec<Complex64> {
    let mut spec = white_spectrum(rng);
    let cut = cutoff_bin();
    for (k, c) in spec.iter_mut().enumerate() {
        if k == 0 || k > cut {
            *c = Complex64::new(0.0, 0.0);
        } else {
            *c *= 2.0;
        }
    }
    inverse(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless(pulse: PulseShape) -> SynthesisParams {
        SynthesisParams {
            pulse,
            rng_seed: 11,
            ..SynthesisParams::default()
        }
    }

    #[test]
    fn bpsk_noiseless_is_antipodal_on_i() {
        let ex = synthesize_waveform(ModulationClass::Bpsk, &noiseless(PulseShape::Rectangular)).unwrap();
        let a = SIGNAL_POWER.sqrt();
        for i in 0..FRAME_LEN {
            let v = ex.iq.rows[0][i];
            assert!((v.abs() - a).abs() < 1e-12, "i={i} v={v}");
            assert_eq!(ex.iq.rows[1][i], 0.0);
        }
        assert!(ex.iq.rows[0].iter().any(|&v| v > 0.0));
        assert!(ex.iq.rows[0].iter().any(|&v| v < 0.0));
    }

    #[test]
    fn phase_pi_negates_the_frame() {
        for m in ModulationClass::ALL {
            let base = noiseless(PulseShape::default());
            let flipped = SynthesisParams {
                phase_offset: PI,
                ..base.clone()
            };
            let a = synthesize_waveform(m, &base).unwrap();
            let b = synthesize_waveform(m, &flipped).unwrap();
            for (x, y) in a.iq.values().zip(b.iq.values()) {
                assert!((x + y).abs() < 1e-12, "{m}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn every_class_has_unit_frame_energy_when_noiseless() {
        for m in ModulationClass::ALL {
            let ex = synthesize_waveform(m, &noiseless(PulseShape::default())).unwrap();
            assert!((ex.iq.energy() - 1.0).abs() < 1e-9, "{m}");
        }
    }

    #[test]
    fn rrc_taps_have_unit_energy_and_symmetry() {
        let taps = root_raised_cosine(0.35, 8, 8);
        assert_eq!(taps.len(), 65);
        let e: f64 = taps.iter().map(|h| h * h).sum();
        assert!((e - 1.0).abs() < 1e-12);
        for k in 0..taps.len() {
            assert!((taps[k] - taps[taps.len() - 1 - k]).abs() < 1e-12);
        }
        // Hits the t = 1/(4 beta) singular point.
        let taps = root_raised_cosine(0.25, 4, 4);
        assert!(taps.iter().all(|h| h.is_finite()));
    }

    #[test]
    fn fsk_classes_are_constant_envelope() {
        for m in [ModulationClass::Cpfsk, ModulationClass::Gfsk, ModulationClass::Wbfm] {
            let ex = synthesize_waveform(m, &noiseless(PulseShape::default())).unwrap();
            for i in 0..FRAME_LEN {
                let mag = (ex.iq.rows[0][i].powi(2) + ex.iq.rows[1][i].powi(2)).sqrt();
                assert!((mag - SIGNAL_POWER.sqrt()).abs() < 1e-9, "{m}");
            }
        }
    }

    #[test]
    fn invalid_params_are_rejected() {
        let bad = [
            SynthesisParams {
                channel_gain: ChannelGain::Constant(0.0),
                ..Default::default()
            },
            SynthesisParams {
                phase_offset: 2.0 * PI,
                ..Default::default()
            },
            SynthesisParams {
                samples_per_symbol: 0,
                ..Default::default()
            },
            SynthesisParams {
                target_snr_db: f64::NAN,
                ..Default::default()
            },
            SynthesisParams {
                channel_gain: ChannelGain::PerSample(vec![1.0; 3]),
                ..Default::default()
            },
        ];
        for p in bad {
            assert!(matches!(
                synthesize_waveform(ModulationClass::Qpsk, &p),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn per_sample_gain_scales_each_sample() {
        let gains: Vec<f64> = (0..FRAME_LEN).map(|i| 1.0 + i as f64 / 100.0).collect();
        let base = noiseless(PulseShape::Rectangular);
        let faded = SynthesisParams {
            channel_gain: ChannelGain::PerSample(gains.clone()),
            ..base.clone()
        };
        let a = synthesize_waveform(ModulationClass::Bpsk, &base).unwrap();
        let b = synthesize_waveform(ModulationClass::Bpsk, &faded).unwrap();
        for i in 0..FRAME_LEN {
            assert!((b.iq.rows[0][i] - gains[i] * a.iq.rows[0][i]).abs() < 1e-12);
        }
    }
}
