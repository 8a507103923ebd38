//! Receiver-side metrology: matched-filter QAM demodulation with data-aided EVM,
//! Welch spectra, occupied bandwidth and band power.

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp;
use crate::waveforms::{Constellation, QamConfig, Waveform, WaveformError, EDGE_SYMBOLS};

pub const DEFAULT_SEGMENT_LEN: usize = 4096;
pub const DEFAULT_OVERLAP: f64 = 0.5;

/// Minimum normalised correlation between matched-filter output and the
/// transmitted symbols for timing to count as locked.
pub const TIMING_LOCK_THRESHOLD: f64 = 0.1;

/// Linear power floor applied before converting bins to dB.
const POWER_FLOOR: f64 = 1e-30;

/// Equivalent noise bandwidth of the Hann window, in bins.
const HANN_ENBW_BINS: f64 = 1.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RxError {
    #[error("segment length {segment_len} is invalid for a {signal_len}-sample signal (must be a power of two no longer than the signal)")]
    BadSegment { segment_len: usize, signal_len: usize },
    #[error("overlap fraction {0} must lie in [0, 1)")]
    BadOverlap(f64),
    #[error("band [{f_lo}, {f_hi}] Hz is outside the spectrum span [{span_lo}, {span_hi}] Hz")]
    BandOutsideSpan { f_lo: f64, f_hi: f64, span_lo: f64, span_hi: f64 },
    #[error("timing lock failed: peak normalised correlation {correlation:.4} below {threshold}")]
    TimingLock { correlation: f64, threshold: f64 },
    #[error("not enough symbols: {0}")]
    TooShort(String),
    #[error(transparent)]
    Waveform(#[from] WaveformError),
}

/// Averaged power spectrum on an absolute RF frequency axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    /// Bin centres in Hz, ascending, centred on `center_freq`.
    pub freqs: Vec<f64>,
    /// Power per bin in dB relative to full scale (unit-power signal = 0 dB total).
    pub psd_db: Vec<f64>,
    pub bin_width: f64,
    pub resolution_bandwidth: f64,
    pub center_freq: f64,
}

impl Spectrum {
    pub fn linear(&self) -> Vec<f64> {
        self.psd_db.iter().map(|db| 10f64.powf(db / 10.0)).collect()
    }

    pub fn total_power(&self) -> f64 {
        self.linear().iter().sum()
    }

    pub fn span(&self) -> (f64, f64) {
        let half = self.bin_width / 2.0;
        (self.freqs[0] - half, self.freqs[self.freqs.len() - 1] + half)
    }

    /// Linear power between `f_lo` and `f_hi`, counting partial bins by overlap.
    fn power_between(&self, lin: &[f64], f_lo: f64, f_hi: f64) -> f64 {
        let half = self.bin_width / 2.0;
        self.freqs
            .iter()
            .zip(lin)
            .map(|(&f, &p)| {
                let overlap = (f_hi.min(f + half) - f_lo.max(f - half)).max(0.0);
                p * overlap / self.bin_width
            })
            .sum()
    }
}

/// Hann-windowed Welch periodogram over the valid region of `w`.
///
/// Bins hold power (not density) so that their sum equals the mean power.
pub fn welch_psd(w: &Waveform, segment_len: usize, overlap_fraction: f64) -> Result<Spectrum, RxError> {
    let x = w.valid_samples();
    if segment_len == 0 || !segment_len.is_power_of_two() || segment_len > x.len() {
        return Err(RxError::BadSegment {
            segment_len,
            signal_len: x.len(),
        });
    }
    if !(0.0..1.0).contains(&overlap_fraction) {
        return Err(RxError::BadOverlap(overlap_fraction));
    }
    let window = dsp::hann(segment_len);
    let window_energy: f64 = window.iter().map(|v| v * v).sum();
    let step = ((segment_len as f64 * (1.0 - overlap_fraction)).round() as usize).max(1);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(segment_len);

    let mut acc = vec![0.0f64; segment_len];
    let mut count = 0usize;
    let mut buf = vec![Complex64::new(0.0, 0.0); segment_len];
    let mut start = 0;
    while start + segment_len <= x.len() {
        for (b, (s, wv)) in buf.iter_mut().zip(x[start..start + segment_len].iter().zip(&window)) {
            *b = s * wv;
        }
        fft.process(&mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm_sqr();
        }
        count += 1;
        start += step;
    }
    let norm = 1.0 / (count as f64 * segment_len as f64 * window_energy);
    let bin_width = w.sample_rate / segment_len as f64;
    let half = segment_len / 2;
    let mut freqs = Vec::with_capacity(segment_len);
    let mut psd_db = Vec::with_capacity(segment_len);
    for i in 0..segment_len {
        // fftshift: negative frequencies first
        let k = (i + half) % segment_len;
        let offset = i as f64 - half as f64;
        freqs.push(w.center_freq + offset * bin_width);
        psd_db.push(10.0 * (acc[k] * norm).max(POWER_FLOOR).log10());
    }
    Ok(Spectrum {
        freqs,
        psd_db,
        bin_width,
        resolution_bandwidth: HANN_ENBW_BINS * bin_width,
        center_freq: w.center_freq,
    })
}

/// Width of the smallest band, symmetric about the power centroid, holding
/// `fraction` of the total power.
pub fn occupied_bandwidth(s: &Spectrum, fraction: f64) -> f64 {
    let lin = s.linear();
    let total: f64 = lin.iter().sum();
    if total <= 0.0 || s.freqs.is_empty() {
        return 0.0;
    }
    let centroid = s.freqs.iter().zip(&lin).map(|(f, p)| f * p).sum::<f64>() / total;
    let (span_lo, span_hi) = s.span();
    let max_half = (centroid - span_lo).max(span_hi - centroid);
    let target = fraction.clamp(0.0, 1.0) * total;

    let (mut lo, mut hi) = (0.0, max_half);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if s.power_between(&lin, centroid - mid, centroid + mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-9 * s.bin_width {
            break;
        }
    }
    2.0 * hi
}

/// Integrated power in `[f_lo, f_hi]` (absolute Hz), in dB relative to full scale.
pub fn band_power(s: &Spectrum, f_lo: f64, f_hi: f64) -> Result<f64, RxError> {
    let (span_lo, span_hi) = s.span();
    let tol = 1e-9 * s.bin_width;
    if !(f_lo < f_hi) || f_lo < span_lo - tol || f_hi > span_hi + tol {
        return Err(RxError::BandOutsideSpan {
            f_lo,
            f_hi,
            span_lo,
            span_hi,
        });
    }
    let p = s.power_between(&s.linear(), f_lo, f_hi);
    Ok(10.0 * p.max(POWER_FLOOR).log10())
}

/// Data-aided EVM measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvmReport {
    pub evm_rms_percent: f64,
    /// Per-symbol error-vector magnitudes after gain normalisation.
    pub error_magnitudes: Vec<f64>,
    /// Gain-normalised received symbols.
    pub constellation: Vec<Complex64>,
    /// Transmitted reference symbols aligned with `constellation`.
    pub reference: Vec<Complex64>,
    pub symbols_used: usize,
    pub order: u32,
    /// Timing offset in samples found by the correlation search.
    pub timing_offset: i64,
    /// Complex gain removed before measuring.
    pub gain: Complex64,
    /// RMS magnitude of the ideal constellation used as the EVM denominator.
    pub reference_rms: f64,
}

/// Matched filtering, correlation timing, one complex gain, then RMS EVM.
pub fn demodulate_qam(rf: &Waveform, cfg: &QamConfig, tx_symbols: &[Complex64]) -> Result<EvmReport, RxError> {
    cfg.validate()?;
    let sps = cfg.samples_per_symbol(rf.sample_rate)?;
    let constellation = Constellation::new(cfg.order)?;
    if tx_symbols.len() < 64 {
        return Err(RxError::TooShort(format!("{} reference symbols (need 64)", tx_symbols.len())));
    }
    if rf.len() < 64 * sps {
        return Err(RxError::TooShort(format!(
            "{} samples hold fewer than 64 symbol periods",
            rf.len()
        )));
    }

    let mf = dsp::cyclic_filter(&rf.samples, rf.sample_rate, |f| cfg.rrc_response(f));
    let guard = EDGE_SYMBOLS * sps;

    let edge = EDGE_SYMBOLS;
    let max_lag = 2 * sps as i64;
    let usable = |k: usize, lag: i64| -> Option<usize> {
        if k < edge || k + edge >= tx_symbols.len() {
            return None;
        }
        let idx = (k * sps) as i64 + lag;
        if idx - (guard as i64) < rf.valid.start as i64 || idx + guard as i64 >= rf.valid.end as i64 {
            return None;
        }
        Some(idx as usize)
    };

    let mut best = (f64::NEG_INFINITY, 0i64);
    for lag in -max_lag..=max_lag {
        let mut c = Complex64::new(0.0, 0.0);
        let mut ez = 0.0;
        let mut es = 0.0;
        for (k, s) in tx_symbols.iter().enumerate() {
            if let Some(idx) = usable(k, lag) {
                let z = mf[idx];
                c += z * s.conj();
                ez += z.norm_sqr();
                es += s.norm_sqr();
            }
        }
        if ez > 0.0 && es > 0.0 {
            let rho = c.norm() / (ez * es).sqrt();
            if rho > best.0 {
                best = (rho, lag);
            }
        }
    }
    let (rho, lag) = best;
    if !(rho >= TIMING_LOCK_THRESHOLD) {
        return Err(RxError::TimingLock {
            correlation: rho.max(0.0),
            threshold: TIMING_LOCK_THRESHOLD,
        });
    }

    let (received, reference): (Vec<Complex64>, Vec<Complex64>) = tx_symbols
        .iter()
        .enumerate()
        .filter_map(|(k, s)| usable(k, lag).map(|idx| (mf[idx], *s)))
        .unzip();
    if received.len() < 16 {
        return Err(RxError::TooShort(format!("only {} symbols clear of edges", received.len())));
    }

    let num: Complex64 = received.iter().zip(&reference).map(|(z, s)| z * s.conj()).sum();
    let den: f64 = reference.iter().map(|s| s.norm_sqr()).sum();
    let gain = num / den;
    let normalized: Vec<Complex64> = received.iter().map(|z| z / gain).collect();
    let error_magnitudes: Vec<f64> = normalized.iter().zip(&reference).map(|(z, s)| (z - s).norm()).collect();

    let reference_rms =
        (constellation.points().iter().map(|p| p.norm_sqr()).sum::<f64>() / constellation.points().len() as f64).sqrt();
    let mse = error_magnitudes.iter().map(|e| e * e).sum::<f64>() / error_magnitudes.len() as f64;

    Ok(EvmReport {
        evm_rms_percent: 100.0 * mse.sqrt() / reference_rms,
        symbols_used: normalized.len(),
        error_magnitudes,
        constellation: normalized,
        reference,
        order: cfg.order,
        timing_offset: lag,
        gain,
        reference_rms,
    })
}
