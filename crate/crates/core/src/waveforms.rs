//! Signal-of-interest and interference generators plus sample-accurate waveform arithmetic.
//!
//! A [`Waveform`] is the complex envelope of an RF signal referenced to `center_freq`.
//! Generators emit unit mean power; gains are applied explicitly afterwards.

use std::f64::consts::PI;
use std::ops::Range;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp;
use crate::rxdsp;

/// Symbols at each end of a block, and next to invalid samples, left out of EVM.
pub const EDGE_SYMBOLS: usize = 16;

/// Occupied-bandwidth fraction used throughout for bandwidth statements.
pub const OBW_FRACTION: f64 = 0.99;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WaveformError {
    #[error("sample rate must be positive and finite (got {0})")]
    BadSampleRate(f64),
    #[error("waveform has no samples")]
    Empty,
    #[error("cannot combine waveforms: {0}")]
    Mismatch(String),
    #[error("unsupported QAM order {0} (expected 4, 16, 64 or 256)")]
    UnsupportedOrder(u32),
    #[error("sample rate {sample_rate} Hz is not an integer multiple of symbol rate {symbol_rate} Hz")]
    NonIntegerOversampling { sample_rate: f64, symbol_rate: f64 },
    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("delay {delay} s exceeds a quarter of the buffer duration ({limit} s)")]
    DelayTooLarge { delay: f64, limit: f64 },
    #[error("bandwidth calibration failed: {0}")]
    Calibration(String),
}

fn invalid(name: &'static str, reason: impl Into<String>) -> WaveformError {
    WaveformError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

/// Complex-baseband sample sequence referenced to an RF carrier.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<Complex64>,
    pub sample_rate: f64,
    pub center_freq: f64,
    /// Indices whose values are not affected by delay-line edge transients.
    pub valid: Range<usize>,
}

impl Waveform {
    pub fn new(samples: Vec<Complex64>, sample_rate: f64, center_freq: f64) -> Result<Self, WaveformError> {
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(WaveformError::BadSampleRate(sample_rate));
        }
        if samples.is_empty() {
            return Err(WaveformError::Empty);
        }
        let valid = 0..samples.len();
        Ok(Self {
            samples,
            sample_rate,
            center_freq,
            valid,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }

    pub fn valid_samples(&self) -> &[Complex64] {
        &self.samples[self.valid.clone()]
    }

    /// Mean power over the valid region.
    pub fn mean_power(&self) -> f64 {
        dsp::mean_power(self.valid_samples())
    }

    pub fn same_grid(&self, other: &Waveform) -> bool {
        self.sample_rate == other.sample_rate
            && self.center_freq == other.center_freq
            && self.samples.len() == other.samples.len()
    }

    fn check_grid(&self, other: &Waveform) -> Result<(), WaveformError> {
        if self.sample_rate != other.sample_rate {
            return Err(WaveformError::Mismatch(format!(
                "sample rates differ ({} vs {} Hz)",
                self.sample_rate, other.sample_rate
            )));
        }
        if self.center_freq != other.center_freq {
            return Err(WaveformError::Mismatch(format!(
                "center frequencies differ ({} vs {} Hz)",
                self.center_freq, other.center_freq
            )));
        }
        if self.samples.len() != other.samples.len() {
            return Err(WaveformError::Mismatch(format!(
                "lengths differ ({} vs {} samples)",
                self.samples.len(),
                other.samples.len()
            )));
        }
        Ok(())
    }

    pub fn scaled(&self, gain: Complex64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            ..self.clone()
        }
    }

    /// Sample-wise `self + gain * other`; the valid region is the intersection.
    pub fn add_scaled(&self, other: &Waveform, gain: Complex64) -> Result<Waveform, WaveformError> {
        self.check_grid(other)?;
        let samples = self
            .samples
            .iter()
            .zip(&other.samples)
            .map(|(a, b)| a + b * gain)
            .collect();
        Ok(Waveform {
            samples,
            sample_rate: self.sample_rate,
            center_freq: self.center_freq,
            valid: intersect(&self.valid, &other.valid),
        })
    }

    pub fn add(&self, other: &Waveform) -> Result<Waveform, WaveformError> {
        self.add_scaled(other, Complex64::new(1.0, 0.0))
    }

    pub fn with_valid(mut self, valid: Range<usize>) -> Self {
        self.valid = intersect(&self.valid, &valid);
        self
    }
}

pub(crate) fn intersect(a: &Range<usize>, b: &Range<usize>) -> Range<usize> {
    let lo = a.start.max(b.start);
    let hi = a.end.min(b.end).max(lo);
    lo..hi
}

/// Single-carrier QAM surrogate for the LTE signal of interest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QamConfig {
    pub order: u32,
    pub symbol_rate: f64,
    pub rolloff: f64,
    pub num_symbols: usize,
}

impl Default for QamConfig {
    fn default() -> Self {
        Self {
            order: 64,
            symbol_rate: 4.098e6,
            rolloff: 0.22,
            num_symbols: 4000,
        }
    }
}

impl QamConfig {
    /// Nominal occupied bandwidth, `symbol_rate * (1 + rolloff)`.
    pub fn occupied_bandwidth(&self) -> f64 {
        self.symbol_rate * (1.0 + self.rolloff)
    }

    pub fn validate(&self) -> Result<(), WaveformError> {
        Constellation::new(self.order)?;
        if !(self.symbol_rate.is_finite() && self.symbol_rate > 0.0) {
            return Err(invalid("symbol_rate", format!("must be positive (got {})", self.symbol_rate)));
        }
        if !(0.0..=1.0).contains(&self.rolloff) {
            return Err(invalid("rolloff", format!("must lie in [0, 1] (got {})", self.rolloff)));
        }
        if self.num_symbols < 64 {
            return Err(invalid("num_symbols", format!("need at least 64 (got {})", self.num_symbols)));
        }
        Ok(())
    }

    /// Integer oversampling factor at `sample_rate`.
    pub fn samples_per_symbol(&self, sample_rate: f64) -> Result<usize, WaveformError> {
        let ratio = sample_rate / self.symbol_rate;
        let rounded = ratio.round();
        if (ratio - rounded).abs() > 1e-9 * ratio.max(1.0) {
            return Err(WaveformError::NonIntegerOversampling {
                sample_rate,
                symbol_rate: self.symbol_rate,
            });
        }
        if rounded < 4.0 {
            return Err(invalid(
                "sample_rate",
                format!("needs at least 4 samples per symbol (got {ratio})"),
            ));
        }
        Ok(rounded as usize)
    }

    /// RRC amplitude response at offset `f` from the carrier.
    pub fn rrc_response(&self, f: f64) -> f64 {
        dsp::rrc_response(f, self.symbol_rate, self.rolloff)
    }
}

/// Square Gray-coded QAM constellation with unit mean symbol energy.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    order: u32,
    points: Vec<Complex64>,
}

impl Constellation {
    pub fn new(order: u32) -> Result<Self, WaveformError> {
        let side = match order {
            4 => 2,
            16 => 4,
            64 => 8,
            256 => 16,
            other => return Err(WaveformError::UnsupportedOrder(other)),
        };
        let bits_per_axis = (side as u32).trailing_zeros();
        let scale = (2.0 * (order as f64 - 1.0) / 3.0).sqrt();
        let level = |gray_bits: u32| {
            // inverse Gray code: position along the axis
            let mut idx = gray_bits;
            let mut shift = gray_bits >> 1;
            while shift != 0 {
                idx ^= shift;
                shift >>= 1;
            }
            (2 * idx as i64 - (side as i64 - 1)) as f64
        };
        let mask = (1u32 << bits_per_axis) - 1;
        let points = (0..order)
            .map(|v| {
                let i = level(v >> bits_per_axis);
                let q = level(v & mask);
                Complex64::new(i, q) / scale
            })
            .collect();
        Ok(Self { order, points })
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    pub fn map(&self, value: u32) -> Complex64 {
        self.points[value as usize]
    }

    /// Index of the constellation point closest to `z`.
    pub fn nearest(&self, z: Complex64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d = (z - p).norm_sqr();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

/// Generated signal of interest together with the transmitted symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct QamSignal {
    pub waveform: Waveform,
    pub symbols: Vec<Complex64>,
    pub samples_per_symbol: usize,
}

/// RRC-shaped QAM at unit mean power. Symbol `k` peaks at sample `k * sps`.
pub fn generate_qam_soi(
    cfg: &QamConfig,
    seed: u64,
    sample_rate: f64,
    center_freq: f64,
) -> Result<QamSignal, WaveformError> {
    cfg.validate()?;
    if !(sample_rate.is_finite() && sample_rate > 0.0) {
        return Err(WaveformError::BadSampleRate(sample_rate));
    }
    let sps = cfg.samples_per_symbol(sample_rate)?;
    let constellation = Constellation::new(cfg.order)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let symbols: Vec<Complex64> = (0..cfg.num_symbols)
        .map(|_| constellation.map(rng.random_range(0..cfg.order)))
        .collect();

    let mut upsampled = vec![Complex64::new(0.0, 0.0); cfg.num_symbols * sps];
    for (k, s) in symbols.iter().enumerate() {
        upsampled[k * sps] = *s;
    }
    let shaped = dsp::cyclic_filter(&upsampled, sample_rate, |f| cfg.rrc_response(f));
    let power = dsp::mean_power(&shaped);
    let norm = 1.0 / power.sqrt();
    let samples = shaped.into_iter().map(|s| s * norm).collect();

    Ok(QamSignal {
        waveform: Waveform::new(samples, sample_rate, center_freq)?,
        symbols,
        samples_per_symbol: sps,
    })
}

/// Frequency modulation of band-limited Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FmNoiseConfig {
    pub modulating_noise_bandwidth: f64,
    /// RMS frequency deviation in Hz; `None` means calibrate against the target bandwidth.
    #[serde(default)]
    pub freq_deviation: Option<f64>,
    pub target_occupied_bandwidth: f64,
    pub seed: u64,
}

impl Default for FmNoiseConfig {
    fn default() -> Self {
        Self {
            modulating_noise_bandwidth: 5e6,
            freq_deviation: None,
            target_occupied_bandwidth: 40e6,
            seed: 11,
        }
    }
}

impl FmNoiseConfig {
    pub fn validate(&self, sample_rate: f64) -> Result<(), WaveformError> {
        if !(self.modulating_noise_bandwidth.is_finite() && self.modulating_noise_bandwidth > 0.0) {
            return Err(invalid(
                "modulating_noise_bandwidth",
                format!("must be positive (got {})", self.modulating_noise_bandwidth),
            ));
        }
        if let Some(dev) = self.freq_deviation {
            if !(dev.is_finite() && dev >= 0.0) {
                return Err(invalid("freq_deviation", format!("must be non-negative (got {dev})")));
            }
        }
        if !(self.target_occupied_bandwidth.is_finite() && self.target_occupied_bandwidth > 0.0) {
            return Err(invalid(
                "target_occupied_bandwidth",
                format!("must be positive (got {})", self.target_occupied_bandwidth),
            ));
        }
        if sample_rate < 4.0 * self.target_occupied_bandwidth {
            return Err(invalid(
                "sample_rate",
                format!(
                    "must be at least 4x the target occupied bandwidth ({} < {})",
                    sample_rate,
                    4.0 * self.target_occupied_bandwidth
                ),
            ));
        }
        Ok(())
    }
}

/// Unit-variance Gaussian noise, brick-wall low-passed to `bandwidth`.
fn modulating_noise(seed: u64, bandwidth: f64, sample_rate: f64, num_samples: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf: Vec<Complex64> = (0..num_samples)
        .map(|_| Complex64::new(rng.sample(StandardNormal), 0.0))
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(num_samples).process(&mut buf);
    let df = sample_rate / num_samples as f64;
    for (k, v) in buf.iter_mut().enumerate() {
        let f = if k <= num_samples / 2 { k } else { num_samples - k } as f64 * df;
        if f > bandwidth {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(num_samples).process(&mut buf);
    let real: Vec<f64> = buf.iter().map(|v| v.re).collect();
    let mean = real.iter().sum::<f64>() / num_samples as f64;
    let var = real.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / num_samples as f64;
    let sd = var.sqrt();
    real.iter().map(|v| (v - mean) / sd).collect()
}

fn fm_from_noise(noise: &[f64], deviation: f64, sample_rate: f64) -> Vec<Complex64> {
    let step = 2.0 * PI * deviation / sample_rate;
    let mut phase = 0.0f64;
    noise
        .iter()
        .map(|n| {
            phase += step * n;
            Complex64::from_polar(1.0, phase)
        })
        .collect()
}

fn measured_obw(samples: &[Complex64], sample_rate: f64) -> f64 {
    let w = Waveform {
        samples: samples.to_vec(),
        sample_rate,
        center_freq: 0.0,
        valid: 0..samples.len(),
    };
    let seg = rxdsp::DEFAULT_SEGMENT_LEN.min(dsp::next_pow2(samples.len()) / 2).max(64);
    match rxdsp::welch_psd(&w, seg, rxdsp::DEFAULT_OVERLAP) {
        Ok(spec) => rxdsp::occupied_bandwidth(&spec, OBW_FRACTION),
        Err(_) => f64::NAN,
    }
}

/// Finds the RMS deviation whose measured 99% bandwidth matches the target.
///
/// Bisection on the Welch-measured occupied bandwidth, bracketed by Carson's rule
/// (deviation of half the target always overshoots).
pub fn calibrate_fm_deviation(
    cfg: &FmNoiseConfig,
    sample_rate: f64,
    num_samples: usize,
) -> Result<f64, WaveformError> {
    cfg.validate(sample_rate)?;
    if num_samples < 256 {
        return Err(invalid("num_samples", "calibration needs at least 256 samples"));
    }
    let noise = modulating_noise(cfg.seed, cfg.modulating_noise_bandwidth, sample_rate, num_samples);
    let target = cfg.target_occupied_bandwidth;
    let obw = |dev: f64| measured_obw(&fm_from_noise(&noise, dev, sample_rate), sample_rate);

    let mut lo = 0.0;
    let mut hi = (target / 2.0 - cfg.modulating_noise_bandwidth).max(target / 4.0);
    let mut expansions = 0;
    while obw(hi) < target {
        hi *= 2.0;
        expansions += 1;
        if expansions > 8 || hi > sample_rate {
            return Err(WaveformError::Calibration(format!(
                "could not bracket a {target} Hz occupied bandwidth"
            )));
        }
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if obw(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-6 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// FM of low-passed Gaussian noise: `exp(j 2 pi dev * integral n)`, unit modulus.
///
/// If the config carries no deviation it is calibrated first.
pub fn generate_fm_noise(
    cfg: &FmNoiseConfig,
    sample_rate: f64,
    center_freq: f64,
    num_samples: usize,
) -> Result<Waveform, WaveformError> {
    cfg.validate(sample_rate)?;
    if num_samples == 0 {
        return Err(WaveformError::Empty);
    }
    let deviation = match cfg.freq_deviation {
        Some(d) => d,
        None => calibrate_fm_deviation(cfg, sample_rate, num_samples)?,
    };
    if deviation == 0.0 {
        return Waveform::new(vec![Complex64::new(1.0, 0.0); num_samples], sample_rate, center_freq);
    }
    let noise = modulating_noise(cfg.seed, cfg.modulating_noise_bandwidth, sample_rate, num_samples);
    Waveform::new(fm_from_noise(&noise, deviation, sample_rate), sample_rate, center_freq)
}

fn check_delay(w: &Waveform, delay: f64) -> Result<(), WaveformError> {
    let limit = w.duration() / 4.0;
    if !delay.is_finite() || delay.abs() >= limit {
        return Err(WaveformError::DelayTooLarge { delay, limit });
    }
    Ok(())
}

/// Envelope-only delay by windowed-sinc interpolation.
///
/// Integer-sample delays are exact shifts; samples touched by the zero fill are
/// dropped from the valid region.
pub fn apply_fractional_delay(w: &Waveform, delay: f64) -> Result<Waveform, WaveformError> {
    check_delay(w, delay)?;
    if delay == 0.0 {
        return Ok(w.clone());
    }
    let (samples, valid) = dsp::delay_samples(&w.samples, delay * w.sample_rate);
    let shifted = shift_range(&w.valid, delay * w.sample_rate, w.len());
    Ok(Waveform {
        samples,
        sample_rate: w.sample_rate,
        center_freq: w.center_freq,
        valid: intersect(&valid, &shifted),
    })
}

/// Shifts an existing valid range by a (possibly fractional) delay, conservatively.
fn shift_range(r: &Range<usize>, delay_samples: f64, len: usize) -> Range<usize> {
    let lo = (r.start as f64 + delay_samples).ceil().clamp(0.0, len as f64) as usize;
    let hi = (r.end as f64 + delay_samples).floor().clamp(0.0, len as f64) as usize;
    lo..hi.max(lo)
}

/// Physical propagation delay of an RF signal seen through its complex envelope:
/// the envelope is delayed and the carrier picks up a phase of `-2 pi f_c tau`.
pub fn apply_propagation_delay(w: &Waveform, delay: f64) -> Result<Waveform, WaveformError> {
    let mut out = apply_fractional_delay(w, delay)?;
    let rot = Complex64::from_polar(1.0, -2.0 * PI * w.center_freq * delay);
    if rot != Complex64::new(1.0, 0.0) {
        for s in out.samples.iter_mut() {
            *s *= rot;
        }
    }
    Ok(out)
}

/// One interferer as seen at the receiver.
#[derive(Debug, Clone, Copy)]
pub struct ReceivedInterferer<'a> {
    pub waveform: &'a Waveform,
    pub gain: f64,
    pub delay: f64,
}

/// `soi_gain * soi + int_gain * delayed(interferer)`; the delay is a propagation delay.
pub fn mix_at_receiver(
    soi: &Waveform,
    interferer: &Waveform,
    soi_gain: f64,
    int_gain: f64,
    int_delay: f64,
) -> Result<Waveform, WaveformError> {
    mix_many(
        soi,
        soi_gain,
        &[ReceivedInterferer {
            waveform: interferer,
            gain: int_gain,
            delay: int_delay,
        }],
    )
}

/// Receiver mixture with any number of interferers.
pub fn mix_many(
    soi: &Waveform,
    soi_gain: f64,
    interferers: &[ReceivedInterferer<'_>],
) -> Result<Waveform, WaveformError> {
    if !(soi_gain.is_finite() && soi_gain >= 0.0) {
        return Err(invalid("soi_gain", format!("must be non-negative (got {soi_gain})")));
    }
    let mut out = soi.scaled(Complex64::new(soi_gain, 0.0));
    for int in interferers {
        if !(int.gain.is_finite() && int.gain >= 0.0) {
            return Err(invalid("int_gain", format!("must be non-negative (got {})", int.gain)));
        }
        soi.check_grid(int.waveform)?;
        if int.gain == 0.0 {
            continue;
        }
        let delayed = apply_propagation_delay(int.waveform, int.delay)?;
        out = out.add_scaled(&delayed, Complex64::new(int.gain, 0.0))?;
    }
    Ok(out)
}
