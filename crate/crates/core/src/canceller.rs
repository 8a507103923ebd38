//! Automated cancellation tuning.
//!
//! The reference arm must arrive at the combiner delay-matched to the interference
//! and with inverted intensity. The solver works in three closed-form steps:
//! cross-correlation for the delay, normal equations for the complex weights, and
//! a mapping from each weight onto what the hardware can actually set (bias sign,
//! attenuation, tunable delay). Tuning replays the chosen settings through the
//! optical model and reports the measured residual.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp;
use crate::photonics::{
    apply_optical_path, combine_and_detect, linearized_gain, mzm_modulate, FidelityMode, MzmParams,
    OpticalPathParams, OpticalPowerSignal, PdParams, PhotonicsError,
};
use crate::waveforms::{apply_propagation_delay, intersect, Waveform, WaveformError};

/// Normalised correlation peak below which no interference is considered present.
pub const LOCK_THRESHOLD: f64 = 0.05;

/// Relative ridge added to the Gram matrix diagonal.
pub const RIDGE: f64 = 1e-12;

/// Cholesky pivots below this fraction of the largest diagonal flag rank deficiency.
const RANK_TOLERANCE: f64 = 1e-9;

pub const MAX_CHANNELS: usize = 8;

/// Delay/phase refinement stops once every channel moves less than this (s).
const REFINE_TOLERANCE: f64 = 1e-16;
const MAX_REFINE_ITERATIONS: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CancellerError {
    #[error("search window {window} s exceeds a quarter of the buffer ({limit} s)")]
    WindowTooLarge { window: f64, limit: f64 },
    #[error("expected between 1 and {MAX_CHANNELS} reference channels, got {0}")]
    ChannelCount(usize),
    #[error("{references} references but {delays} delays")]
    DelayCount { references: usize, delays: usize },
    #[error("weight magnitude {requested:.6e} is not realizable; maximum achievable is {max:.6e}")]
    Unrealizable { requested: f64, max: f64 },
    #[error("a zero weight needs infinite attenuation; block the channel instead")]
    ZeroWeight,
    #[error("no samples left after aligning references")]
    NoOverlap,
    #[error(transparent)]
    Waveform(#[from] WaveformError),
    #[error(transparent)]
    Photonics(#[from] PhotonicsError),
}

/// Outcome of a delay search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum DelayEstimate {
    Locked { delay: f64, peak_correlation: f64 },
    NoLock { peak_correlation: f64 },
}

impl DelayEstimate {
    pub fn delay(&self) -> Option<f64> {
        match self {
            DelayEstimate::Locked { delay, .. } => Some(*delay),
            DelayEstimate::NoLock { .. } => None,
        }
    }
}

/// Lag of `received` relative to `reference` from the cross-correlation peak,
/// refined by a parabola through the peak and its neighbours.
///
/// A positive result means `received` lags `reference`. Among equal peaks the
/// earliest lag wins.
pub fn estimate_delay(received: &Waveform, reference: &Waveform, search_window: f64) -> Result<DelayEstimate, CancellerError> {
    if !received.same_grid(reference) {
        return Err(WaveformError::Mismatch("received and reference are on different grids".into()).into());
    }
    let limit = received.duration() / 4.0;
    if !(search_window >= 0.0) || search_window > limit {
        return Err(CancellerError::WindowTooLarge {
            window: search_window,
            limit,
        });
    }
    let n = received.len();
    let max_lag = (search_window * received.sample_rate).floor() as usize;

    let masked = |w: &Waveform| -> Vec<Complex64> {
        let mut v = vec![Complex64::new(0.0, 0.0); n];
        v[w.valid.clone()].copy_from_slice(w.valid_samples());
        v
    };
    let r = masked(received);
    let x = masked(reference);
    let er: f64 = r.iter().map(|v| v.norm_sqr()).sum();
    let ex: f64 = x.iter().map(|v| v.norm_sqr()).sum();
    if er == 0.0 || ex == 0.0 {
        return Ok(DelayEstimate::NoLock { peak_correlation: 0.0 });
    }

    // c[l] = sum_n r[n] conj(x[n - l])
    let size = dsp::next_pow2(n + max_lag + 1);
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut a = vec![Complex64::new(0.0, 0.0); size];
    a[..n].copy_from_slice(&r);
    let mut b = vec![Complex64::new(0.0, 0.0); size];
    b[..n].copy_from_slice(&x);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (ai, bi) in a.iter_mut().zip(&b) {
        *ai *= bi.conj();
    }
    inv.process(&mut a);
    let norm = 1.0 / (size as f64 * (er * ex).sqrt());
    let corr = |lag: i64| -> f64 {
        let idx = if lag >= 0 { lag as usize } else { size - (-lag) as usize };
        a[idx].norm() * norm
    };

    let max_lag = max_lag as i64;
    let mut best_lag = -max_lag;
    let mut best = corr(-max_lag);
    for lag in -max_lag + 1..=max_lag {
        let c = corr(lag);
        if c > best {
            best = c;
            best_lag = lag;
        }
    }
    if best < LOCK_THRESHOLD {
        return Ok(DelayEstimate::NoLock { peak_correlation: best });
    }

    let mut frac = 0.0;
    if best_lag > -max_lag && best_lag < max_lag {
        let (l, c, rr) = (corr(best_lag - 1), best, corr(best_lag + 1));
        let den = l - 2.0 * c + rr;
        if (l - rr).abs() > 1e-12 * c && den < 0.0 {
            frac = (0.5 * (l - rr) / den).clamp(-0.5, 0.5);
        }
    }
    Ok(DelayEstimate::Locked {
        delay: (best_lag as f64 + frac) / received.sample_rate,
        peak_correlation: best,
    })
}

/// Least-squares weights for `received ≈ sum_k w_k ref_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSolution {
    pub weights: Vec<Complex64>,
    /// Gram matrix was numerically rank-deficient; the ridge decided the split.
    pub regularized: bool,
    /// Mean residual power over the common valid region.
    pub residual_power: f64,
    pub received_power: f64,
}

/// References aligned with the propagation delays used by the optical paths.
pub fn align_references(references: &[Waveform], delays: &[f64]) -> Result<Vec<Waveform>, CancellerError> {
    if references.len() != delays.len() {
        return Err(CancellerError::DelayCount {
            references: references.len(),
            delays: delays.len(),
        });
    }
    references
        .iter()
        .zip(delays)
        .map(|(r, &d)| apply_propagation_delay(r, d).map_err(CancellerError::from))
        .collect()
}

/// Normal-equation solve of `min_w mean |received - sum_k w_k ref_k(t - delay_k)|^2`.
pub fn solve_weights(received: &Waveform, references: &[Waveform], delays: &[f64]) -> Result<WeightSolution, CancellerError> {
    if references.is_empty() || references.len() > MAX_CHANNELS {
        return Err(CancellerError::ChannelCount(references.len()));
    }
    for r in references {
        if !received.same_grid(r) {
            return Err(WaveformError::Mismatch("reference and received are on different grids".into()).into());
        }
    }
    let aligned = align_references(references, delays)?;
    solve_aligned(received, &aligned)
}

/// Weight solve on references that are already aligned.
pub fn solve_aligned(received: &Waveform, aligned: &[Waveform]) -> Result<WeightSolution, CancellerError> {
    let k = aligned.len();
    let valid = aligned.iter().fold(received.valid.clone(), |acc, a| intersect(&acc, &a.valid));
    if valid.is_empty() {
        return Err(CancellerError::NoOverlap);
    }
    let y = &received.samples[valid.clone()];
    let cols: Vec<&[Complex64]> = aligned.iter().map(|a| &a.samples[valid.clone()]).collect();
    let count = valid.len() as f64;

    let mut gram = vec![vec![Complex64::new(0.0, 0.0); k]; k];
    let mut rhs = vec![Complex64::new(0.0, 0.0); k];
    for i in 0..k {
        for j in i..k {
            let g: Complex64 = cols[i].iter().zip(cols[j]).map(|(a, b)| a.conj() * b).sum::<Complex64>() / count;
            gram[i][j] = g;
            gram[j][i] = g.conj();
        }
        rhs[i] = cols[i].iter().zip(y).map(|(a, b)| a.conj() * b).sum::<Complex64>() / count;
    }
    let (weights, regularized) = hermitian_solve(&gram, &rhs);

    let received_power = dsp::mean_power(y);
    let residual_power = y
        .iter()
        .enumerate()
        .map(|(n, v)| {
            let est: Complex64 = weights.iter().zip(&cols).map(|(w, c)| w * c[n]).sum();
            (v - est).norm_sqr()
        })
        .sum::<f64>()
        / count;
    Ok(WeightSolution {
        weights,
        regularized,
        residual_power,
        received_power,
    })
}

/// Solves `(G + ridge) w = b` by Cholesky for a Hermitian positive semidefinite `G`.
fn hermitian_solve(gram: &[Vec<Complex64>], rhs: &[Complex64]) -> (Vec<Complex64>, bool) {
    let k = rhs.len();
    let trace: f64 = (0..k).map(|i| gram[i][i].re).sum();
    let max_diag = (0..k).map(|i| gram[i][i].re).fold(0.0, f64::max);
    let ridge = RIDGE * (trace / k as f64).max(f64::MIN_POSITIVE);

    let mut l = vec![vec![Complex64::new(0.0, 0.0); k]; k];
    let mut regularized = false;
    for i in 0..k {
        for j in 0..=i {
            let mut sum = gram[i][j];
            if i == j {
                sum += ridge;
            }
            for p in 0..j {
                sum -= l[i][p] * l[j][p].conj();
            }
            if i == j {
                let pivot = sum.re;
                if pivot <= RANK_TOLERANCE * max_diag {
                    regularized = true;
                }
                l[i][i] = Complex64::new(pivot.max(ridge).sqrt(), 0.0);
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    // forward: L z = b
    let mut z = vec![Complex64::new(0.0, 0.0); k];
    for i in 0..k {
        let mut s = rhs[i];
        for p in 0..i {
            s -= l[i][p] * z[p];
        }
        z[i] = s / l[i][i];
    }
    // backward: L^H w = z
    let mut w = vec![Complex64::new(0.0, 0.0); k];
    for i in (0..k).rev() {
        let mut s = z[i];
        for p in i + 1..k {
            s -= l[p][i].conj() * w[p];
        }
        w[i] = s / l[i][i];
    }
    (w, regularized)
}

/// Hardware settings for one reference channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelSettings {
    pub bias_voltage: f64,
    pub attenuation_db: f64,
    pub delay: f64,
    /// False when the channel is blocked (zero weight).
    pub active: bool,
}

impl ChannelSettings {
    /// The settings a channel starts from, blocked.
    pub fn untouched(mzm: &MzmParams, path: &OpticalPathParams) -> Self {
        Self {
            bias_voltage: mzm.bias_voltage,
            attenuation_db: path.attenuation_db,
            delay: path.delay,
            active: false,
        }
    }

    pub fn apply(&self, mzm: &MzmParams, path: &OpticalPathParams) -> (MzmParams, OpticalPathParams) {
        (
            mzm.with_bias(self.bias_voltage),
            OpticalPathParams {
                attenuation_db: self.attenuation_db,
                delay: self.delay,
                ..*path
            },
        )
    }
}

/// Largest weight magnitude a channel can deliver: quadrature bias, no attenuation.
pub fn max_weight(mzm: &MzmParams, path: &OpticalPathParams) -> f64 {
    let quad = mzm.with_bias(mzm.v_pi / 2.0);
    linearized_gain(&quad).abs() * mzm.drive_scale * 10f64.powf(-path.excess_loss_db / 10.0)
}

/// Maps a complex optical-domain weight onto bias, attenuation and delay.
///
/// `weight` multiplies the reference envelope after a propagation delay of
/// `path.delay`, in watts of optical RF power per unit reference amplitude. The
/// sign of its real part picks the quadrature bias (the slope is negative at
/// `+V_pi/2`), the magnitude sets the attenuator, and the leftover phase, at most
/// a quarter carrier cycle, is taken up by trimming the delay.
pub fn weights_to_settings(
    weight: Complex64,
    mzm: &MzmParams,
    path: &OpticalPathParams,
    center_freq: f64,
) -> Result<ChannelSettings, CancellerError> {
    mzm.validate()?;
    path.validate()?;
    let g0 = max_weight(mzm, path);
    let mag = weight.norm();
    if mag == 0.0 {
        return Err(CancellerError::ZeroWeight);
    }
    if mag > g0 * (1.0 + 1e-12) {
        return Err(CancellerError::Unrealizable {
            requested: mag,
            max: g0,
        });
    }
    let attenuation_db = (-10.0 * (mag / g0).log10()).max(0.0);

    let mut negative = weight.re < 0.0;
    let sign = if negative { -1.0 } else { 1.0 };
    let residual_phase = (weight * sign).arg();
    let mut delay = path.delay;
    if center_freq > 0.0 {
        let omega = 2.0 * PI * center_freq;
        delay += -residual_phase / omega;
        if delay < 0.0 {
            delay += 0.5 / center_freq;
            negative = !negative;
        }
    }
    let bias_voltage = if negative { mzm.v_pi / 2.0 } else { -mzm.v_pi / 2.0 };
    Ok(ChannelSettings {
        bias_voltage,
        attenuation_db,
        delay,
        active: true,
    })
}

/// Reference arm output for given settings: modulator, then attenuator and delay.
pub fn channel_signal(
    reference: &Waveform,
    mzm: &MzmParams,
    path: &OpticalPathParams,
    settings: &ChannelSettings,
    mode: FidelityMode,
) -> Result<OpticalPowerSignal, CancellerError> {
    let (m, p) = settings.apply(mzm, path);
    let modulated = mzm_modulate(reference, &m, mode)?;
    Ok(apply_optical_path(&modulated, &p)?)
}

/// One reference arm: the interferer copy and its devices.
#[derive(Debug, Clone)]
pub struct ReferenceChannel {
    pub reference: Waveform,
    pub mzm: MzmParams,
    pub path: OpticalPathParams,
}

/// Everything the tuner observes and controls.
#[derive(Debug, Clone)]
pub struct TuningProblem<'a> {
    /// Detected receiver output with every reference arm blocked.
    pub received: &'a Waveform,
    /// Receiver arm optical signal carrying interference only, for replay.
    pub rx_interference: &'a OpticalPowerSignal,
    pub channels: &'a [ReferenceChannel],
    pub pd: PdParams,
    pub mode: FidelityMode,
    pub search_window: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelTuning {
    pub locked: bool,
    pub peak_correlation: f64,
    /// Delay found by correlation, before phase trimming.
    pub estimated_delay: f64,
    /// Final propagation delay of the channel.
    pub delay: f64,
    /// Solved weight in the detected-current domain.
    pub weight: Complex64,
    pub settings: ChannelSettings,
    /// Requested magnitude exceeded the channel maximum and was clipped.
    pub saturated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub channels: Vec<ChannelTuning>,
    /// Residual interference predicted by the weight solve, dB re. pre-cancellation.
    pub predicted_residual_db: f64,
    /// Residual interference measured by replaying the settings, dB re. pre-cancellation.
    pub residual_interference_power_db: f64,
    pub converged: bool,
    pub regularized: bool,
    pub refine_iterations: usize,
}

impl TuneResult {
    pub fn settings(&self) -> Vec<ChannelSettings> {
        self.channels.iter().map(|c| c.settings).collect()
    }
}

fn untouched_result(problem: &TuningProblem<'_>, estimates: &[DelayEstimate]) -> TuneResult {
    TuneResult {
        channels: problem
            .channels
            .iter()
            .zip(estimates)
            .map(|(ch, est)| ChannelTuning {
                locked: false,
                peak_correlation: match est {
                    DelayEstimate::Locked { peak_correlation, .. } | DelayEstimate::NoLock { peak_correlation } => {
                        *peak_correlation
                    }
                },
                estimated_delay: est.delay().unwrap_or(0.0),
                delay: ch.path.delay,
                weight: Complex64::new(0.0, 0.0),
                settings: ChannelSettings::untouched(&ch.mzm, &ch.path),
                saturated: false,
            })
            .collect(),
        predicted_residual_db: 0.0,
        residual_interference_power_db: 0.0,
        converged: false,
        regularized: false,
        refine_iterations: 0,
    }
}

fn db(ratio: f64) -> f64 {
    10.0 * ratio.max(1e-30).log10()
}

/// Detected interference residual for a set of channel settings, relative to the
/// receiver arm alone, in dB. Noiseless detection.
pub fn replay_residual_db(problem: &TuningProblem<'_>, settings: &[ChannelSettings]) -> Result<f64, CancellerError> {
    let pd = PdParams {
        thermal_noise_density: 0.0,
        ..problem.pd
    };
    let mut signals = vec![problem.rx_interference.clone()];
    for (ch, s) in problem.channels.iter().zip(settings) {
        if s.active {
            signals.push(channel_signal(&ch.reference, &ch.mzm, &ch.path, s, problem.mode)?);
        }
    }
    let post = combine_and_detect(&signals, &pd)?;
    let pre = combine_and_detect(std::slice::from_ref(problem.rx_interference), &pd)?;
    let valid = intersect(&pre.valid, &post.valid);
    let p_pre = dsp::mean_power(&pre.samples[valid.clone()]);
    let p_post = dsp::mean_power(&post.samples[valid]);
    Ok(db(p_post / p_pre))
}

/// Correlation delay per channel, joint weight solve, mapping to hardware, replay.
pub fn tune(problem: &TuningProblem<'_>) -> Result<TuneResult, CancellerError> {
    let channels = problem.channels;
    if channels.is_empty() || channels.len() > MAX_CHANNELS {
        return Err(CancellerError::ChannelCount(channels.len()));
    }
    let estimates: Vec<DelayEstimate> = channels
        .iter()
        .map(|ch| estimate_delay(problem.received, &ch.reference, problem.search_window))
        .collect::<Result<_, _>>()?;
    let locked: Vec<usize> = (0..channels.len()).filter(|&k| estimates[k].delay().is_some()).collect();
    if locked.is_empty() {
        return Ok(untouched_result(problem, &estimates));
    }

    let center_freq = problem.received.center_freq;
    let responsivity = problem.pd.responsivity;
    let refs: Vec<Waveform> = locked.iter().map(|&k| channels[k].reference.clone()).collect();
    let mut delays: Vec<f64> = locked.iter().map(|&k| estimates[k].delay().unwrap().max(0.0)).collect();

    // Trim each delay onto the nearest point where the solved weight is realizable
    // with a bias sign alone; repeat the solve there until the delays settle.
    let mut iterations = 0;
    let (solution, settings, saturated) = loop {
        iterations += 1;
        let solution = solve_weights(problem.received, &refs, &delays)?;
        let mut settings = Vec::with_capacity(locked.len());
        let mut saturated = Vec::with_capacity(locked.len());
        for (i, &k) in locked.iter().enumerate() {
            let ch = &channels[k];
            let path = OpticalPathParams {
                delay: delays[i],
                ..ch.path
            };
            let wanted = -solution.weights[i] / responsivity;
            let (s, sat) = match weights_to_settings(wanted, &ch.mzm, &path, center_freq) {
                Ok(s) => (s, false),
                Err(CancellerError::Unrealizable { max, .. }) => {
                    let clipped = wanted / wanted.norm() * max;
                    (weights_to_settings(clipped, &ch.mzm, &path, center_freq)?, true)
                }
                Err(CancellerError::ZeroWeight) => (ChannelSettings::untouched(&ch.mzm, &ch.path), false),
                Err(e) => return Err(e),
            };
            settings.push(s);
            saturated.push(sat);
        }
        let moved = settings
            .iter()
            .zip(&delays)
            .filter(|(s, _)| s.active)
            .map(|(s, d)| (s.delay - d).abs())
            .fold(0.0, f64::max);
        if moved < REFINE_TOLERANCE || iterations >= MAX_REFINE_ITERATIONS {
            break (solution, settings, saturated);
        }
        for (d, s) in delays.iter_mut().zip(&settings) {
            if s.active {
                *d = s.delay;
            }
        }
    };

    let mut result = untouched_result(problem, &estimates);
    for (i, &k) in locked.iter().enumerate() {
        let ch = &mut result.channels[k];
        ch.locked = true;
        ch.delay = delays[i];
        ch.weight = solution.weights[i];
        ch.settings = settings[i];
        ch.saturated = saturated[i];
    }
    result.regularized = solution.regularized;
    result.refine_iterations = iterations;

    // Prediction on the interference component only: receiver arm minus weighted references.
    let pd = PdParams {
        thermal_noise_density: 0.0,
        ..problem.pd
    };
    let rx_int = combine_and_detect(std::slice::from_ref(problem.rx_interference), &pd)?;
    let aligned = align_references(&refs, &delays)?;
    let mut predicted = rx_int.clone();
    for (a, w) in aligned.iter().zip(&solution.weights) {
        predicted = predicted.add_scaled(a, -w)?;
    }
    let valid = intersect(&rx_int.valid, &predicted.valid);
    result.predicted_residual_db = db(
        dsp::mean_power(&predicted.samples[valid.clone()]) / dsp::mean_power(&rx_int.samples[valid]),
    );

    let measured = replay_residual_db(problem, &result.settings())?;
    if measured > 0.0 {
        let mut reverted = untouched_result(problem, &estimates);
        reverted.predicted_residual_db = result.predicted_residual_db;
        reverted.refine_iterations = iterations;
        return Ok(reverted);
    }
    result.residual_interference_power_db = measured;
    result.converged = true;
    Ok(result)
}

/// Effective complex weight a channel delivers relative to its reference after a
/// propagation delay of `target_delay`, in the linearized model.
pub fn effective_weight(
    settings: &ChannelSettings,
    mzm: &MzmParams,
    path: &OpticalPathParams,
    target_delay: f64,
    center_freq: f64,
) -> Complex64 {
    if !settings.active {
        return Complex64::new(0.0, 0.0);
    }
    let (m, p) = settings.apply(mzm, path);
    let mag = linearized_gain(&m) * m.drive_scale * p.linear_gain();
    Complex64::from_polar(1.0, -2.0 * PI * center_freq * (settings.delay - target_delay)) * mag
}
