//! Low-level sample-domain helpers shared by the signal, optical and receiver modules.

use std::f64::consts::PI;
use std::ops::{Add, Mul};

use num_complex::Complex64;
use rustfft::FftPlanner;

/// Number of taps in the windowed-sinc fractional delay kernel.
pub const FRACTIONAL_DELAY_TAPS: usize = 64;

/// Fractional parts closer than this to an integer are treated as integer shifts.
const INTEGER_DELAY_EPS: f64 = 1e-12;

/// Sample types that can be delayed and filtered with real taps.
pub trait Sample: Copy + Add<Output = Self> + Mul<f64, Output = Self> {
    fn zero() -> Self;
}

impl Sample for f64 {
    fn zero() -> Self {
        0.0
    }
}

impl Sample for Complex64 {
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
}

pub fn mean_power(samples: &[Complex64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / samples.len() as f64
}

pub fn next_pow2(n: usize) -> usize {
    n.max(1).next_power_of_two()
}

pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-300 {
        1.0
    } else {
        let px = PI * x;
        px.sin() / px
    }
}

/// Blackman window evaluated at continuous offset `t` from its centre, total width `width`.
pub fn blackman_at(t: f64, width: f64) -> f64 {
    if t.abs() > width / 2.0 {
        return 0.0;
    }
    let a = 2.0 * PI * t / width;
    0.42 + 0.5 * a.cos() + 0.08 * (2.0 * a).cos()
}

/// Periodic Hann window, the usual choice for averaged periodograms.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Splits a delay in samples into (integer part, fractional part in [0, 1)).
/// Fractions within [`INTEGER_DELAY_EPS`] of an integer collapse to that integer.
pub fn split_delay(delay_samples: f64) -> (i64, f64) {
    let rounded = delay_samples.round();
    if (delay_samples - rounded).abs() < INTEGER_DELAY_EPS {
        return (rounded as i64, 0.0);
    }
    let int = delay_samples.floor();
    (int as i64, delay_samples - int)
}

/// Windowed-sinc interpolation taps for a fractional delay `frac` in (0, 1).
///
/// Tap `i` multiplies `x[n - int - (i - 31)]`, so the kernel spans offsets -31..=32.
/// Taps are normalised to unit DC gain.
pub fn fractional_delay_taps(frac: f64) -> [f64; FRACTIONAL_DELAY_TAPS] {
    let half = (FRACTIONAL_DELAY_TAPS / 2) as i64;
    let mut taps = [0.0; FRACTIONAL_DELAY_TAPS];
    for (i, tap) in taps.iter_mut().enumerate() {
        let m = i as i64 - (half - 1);
        let t = m as f64 - frac;
        *tap = sinc(t) * blackman_at(t, FRACTIONAL_DELAY_TAPS as f64);
    }
    let sum: f64 = taps.iter().sum();
    for tap in taps.iter_mut() {
        *tap /= sum;
    }
    taps
}

/// Delays `x` by `delay_samples` (positive = later) with zero fill outside the input.
///
/// Returns the delayed sequence and the half-open range of output indices whose
/// value depends only on in-range input samples.
pub fn delay_samples<T: Sample>(x: &[T], delay_samples: f64) -> (Vec<T>, std::ops::Range<usize>) {
    let n = x.len() as i64;
    let (int, frac) = split_delay(delay_samples);
    if frac == 0.0 {
        if int == 0 {
            return (x.to_vec(), 0..x.len());
        }
        let out: Vec<T> = (0..n)
            .map(|k| {
                let src = k - int;
                if (0..n).contains(&src) {
                    x[src as usize]
                } else {
                    T::zero()
                }
            })
            .collect();
        let lo = int.clamp(0, n) as usize;
        let hi = (n + int).clamp(0, n) as usize;
        return (out, lo..hi.max(lo));
    }

    let taps = fractional_delay_taps(frac);
    let half = (FRACTIONAL_DELAY_TAPS / 2) as i64;
    let out: Vec<T> = (0..n)
        .map(|k| {
            let mut acc = T::zero();
            for (i, &tap) in taps.iter().enumerate() {
                let m = i as i64 - (half - 1);
                let src = k - int - m;
                if (0..n).contains(&src) {
                    acc = acc + x[src as usize] * tap;
                }
            }
            acc
        })
        .collect();
    // Every tap in range: k - int - m in [0, n) for m in [-(half-1), half].
    let lo = (int + half).clamp(0, n) as usize;
    let hi = (n + int - (half - 1)).clamp(0, n) as usize;
    (out, lo..hi.max(lo))
}

/// Full linear convolution through zero-padded FFTs.
pub fn fft_convolve(x: &[Complex64], h: &[Complex64]) -> Vec<Complex64> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let out_len = x.len() + h.len() - 1;
    let n = next_pow2(out_len);
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);

    let mut a = vec![Complex64::new(0.0, 0.0); n];
    a[..x.len()].copy_from_slice(x);
    let mut b = vec![Complex64::new(0.0, 0.0); n];
    b[..h.len()].copy_from_slice(h);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (ai, bi) in a.iter_mut().zip(&b) {
        *ai *= bi;
    }
    inv.process(&mut a);
    let scale = 1.0 / n as f64;
    a.truncate(out_len);
    for v in a.iter_mut() {
        *v *= scale;
    }
    a
}

/// Convolution with an odd-length real filter, centred so the output aligns with the input.
pub fn filter_centered(x: &[Complex64], taps: &[f64]) -> Vec<Complex64> {
    debug_assert!(taps.len() % 2 == 1, "centred filtering needs odd taps");
    let h: Vec<Complex64> = taps.iter().map(|&t| Complex64::new(t, 0.0)).collect();
    let full = fft_convolve(x, &h);
    let offset = taps.len() / 2;
    full[offset..offset + x.len()].to_vec()
}

/// Root-raised-cosine amplitude response at offset `f` from the carrier, unity in the passband.
pub fn rrc_response(f: f64, symbol_rate: f64, rolloff: f64) -> f64 {
    let f = f.abs();
    let inner = (1.0 - rolloff) * symbol_rate / 2.0;
    let outer = (1.0 + rolloff) * symbol_rate / 2.0;
    if f <= inner {
        1.0
    } else if f >= outer {
        0.0
    } else {
        let x = PI / (rolloff * symbol_rate) * (f - inner);
        (0.5 * (1.0 + x.cos())).sqrt()
    }
}

/// Circular filtering of the whole block by a real frequency response.
///
/// With a block of whole symbols, two RRC passes give exactly zero ISI at the
/// symbol instants.
pub fn cyclic_filter(x: &[Complex64], sample_rate: f64, response: impl Fn(f64) -> f64) -> Vec<Complex64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut buf = x.to_vec();
    planner.plan_fft_forward(n).process(&mut buf);
    let df = sample_rate / n as f64;
    for (k, v) in buf.iter_mut().enumerate() {
        let f = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 } * df;
        *v *= response(f) / n as f64;
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf
}

/// Linear-phase lowpass FIR (windowed sinc, Blackman), unit DC gain.
/// `cutoff` is in cycles per sample, `num_taps` must be odd.
pub fn lowpass_taps(cutoff: f64, num_taps: usize) -> Vec<f64> {
    let mid = (num_taps / 2) as f64;
    let mut taps: Vec<f64> = (0..num_taps)
        .map(|i| {
            let t = i as f64 - mid;
            2.0 * cutoff * sinc(2.0 * cutoff * t) * blackman_at(t, num_taps as f64 + 1.0)
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in taps.iter_mut() {
        *t /= sum;
    }
    taps
}

/// Periodogram-based 99% bandwidth of a whole buffer, used for passband sanity checks.
pub fn quick_occupied_bandwidth(samples: &[Complex64], sample_rate: f64, fraction: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let n = next_pow2(samples.len());
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    buf[..samples.len()].copy_from_slice(samples);
    FftPlanner::<f64>::new().plan_fft_forward(n).process(&mut buf);
    let df = sample_rate / n as f64;
    let mut bins: Vec<(f64, f64)> = buf
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let k = if k >= n / 2 { k as i64 - n as i64 } else { k as i64 };
            (k as f64 * df, v.norm_sqr())
        })
        .collect();
    let total: f64 = bins.iter().map(|b| b.1).sum();
    if total <= 0.0 {
        return 0.0;
    }
    let centroid: f64 = bins.iter().map(|b| b.0 * b.1).sum::<f64>() / total;
    bins.sort_by(|a, b| (a.0 - centroid).abs().total_cmp(&(b.0 - centroid).abs()));
    let mut acc = 0.0;
    for (f, p) in &bins {
        acc += p;
        if acc >= fraction * total {
            return 2.0 * (f - centroid).abs() + df;
        }
    }
    sample_rate
}
