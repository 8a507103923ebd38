//! Optical chain: Mach-Zehnder intensity modulators, attenuator/delay free-space
//! paths, the fibre combiner and square-law photodetection.
//!
//! Lasers at distinct wavelengths beat far outside the detector bandwidth, so the
//! photodiode sees the sum of optical powers. Two fidelity modes are offered:
//!
//! * `Linearized`: the modulator is replaced by its small-signal slope about the
//!   bias point and signals stay at complex baseband. The RF carrier is only a
//!   parameter (it sets the phase picked up by delays).
//! * `Passband`: the drive is up-converted to a real signal on a scaled carrier,
//!   the full cosine transfer is applied sample by sample and the photocurrent is
//!   down-converted again after detection.

use std::f64::consts::PI;
use std::ops::Range;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp;
use crate::waveforms::{intersect, Waveform, WaveformError};

/// Speed of light in vacuum, m/s.
const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Passband mode needs this many samples per Hz of highest signal frequency.
const PASSBAND_OVERSAMPLING: f64 = 2.5;

/// Taps of the down-conversion lowpass applied after passband detection.
const DOWNCONVERT_TAPS: usize = 255;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhotonicsError {
    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("peak drive {peak_drive:.4} V exceeds V_pi = {v_pi} V; the linearized model is not valid there")]
    DriveTooLarge { peak_drive: f64, v_pi: f64 },
    #[error("passband mode needs sample rate >= {required:.4e} Hz (carrier {carrier:.4e} Hz, occupied bandwidth {bandwidth:.4e} Hz), got {sample_rate:.4e} Hz")]
    InsufficientSampleRate {
        sample_rate: f64,
        required: f64,
        carrier: f64,
        bandwidth: f64,
    },
    #[error("wavelengths {a} nm and {b} nm beat at {beat_hz:.3e} Hz, inside the detection bandwidth; coherent beating is not modelled")]
    WavelengthCollision { a: f64, b: f64, beat_hz: f64 },
    #[error("optical signals are not on the same sample grid: {0}")]
    GridMismatch(String),
    #[error("no optical signals to detect")]
    NoSignals,
    #[error(transparent)]
    Waveform(#[from] WaveformError),
}

fn invalid(name: &'static str, reason: impl Into<String>) -> PhotonicsError {
    PhotonicsError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

fn db_to_linear(db: f64) -> f64 {
    10f64.powf(-db / 10.0)
}

/// Modulator fidelity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FidelityMode {
    #[default]
    Linearized,
    Passband,
}

/// Mach-Zehnder intensity modulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MzmParams {
    pub v_pi: f64,
    pub bias_voltage: f64,
    pub insertion_loss_db: f64,
    pub extinction_ratio_db: f64,
    /// Laser power into the modulator, W.
    pub input_power: f64,
    /// Drive volts per unit of waveform amplitude.
    pub drive_scale: f64,
}

impl Default for MzmParams {
    fn default() -> Self {
        Self {
            v_pi: 5.0,
            bias_voltage: 2.5,
            insertion_loss_db: 4.0,
            extinction_ratio_db: 30.0,
            input_power: 10e-3,
            drive_scale: 0.25,
        }
    }
}

impl MzmParams {
    pub fn validate(&self) -> Result<(), PhotonicsError> {
        if !(self.v_pi.is_finite() && self.v_pi > 0.0) {
            return Err(invalid("v_pi", format!("must be positive (got {})", self.v_pi)));
        }
        if !self.bias_voltage.is_finite() {
            return Err(invalid("bias_voltage", "must be finite"));
        }
        if !(self.insertion_loss_db.is_finite() && self.insertion_loss_db >= 0.0) {
            return Err(invalid(
                "insertion_loss_db",
                format!("must be >= 0 (got {})", self.insertion_loss_db),
            ));
        }
        if !(self.extinction_ratio_db > 0.0) {
            return Err(invalid(
                "extinction_ratio_db",
                format!("must be > 0 (got {})", self.extinction_ratio_db),
            ));
        }
        if !(self.input_power.is_finite() && self.input_power > 0.0) {
            return Err(invalid("input_power", format!("must be positive (got {})", self.input_power)));
        }
        if !(self.drive_scale.is_finite() && self.drive_scale >= 0.0) {
            return Err(invalid("drive_scale", format!("must be >= 0 (got {})", self.drive_scale)));
        }
        Ok(())
    }

    /// Peak transmission, `10^(-IL/10)`.
    pub fn t_max(&self) -> f64 {
        db_to_linear(self.insertion_loss_db)
    }

    /// Leakage fraction `10^(-ER/10)`; zero for infinite extinction.
    pub fn epsilon(&self) -> f64 {
        db_to_linear(self.extinction_ratio_db)
    }

    /// Power transmission `P_out / P_in` at total drive `v` (bias added here).
    pub fn transmission(&self, v: f64) -> f64 {
        let eps = self.epsilon();
        let phase = PI * (v + self.bias_voltage) / self.v_pi;
        self.t_max() * ((1.0 - eps) * 0.5 * (1.0 + phase.cos()) + eps)
    }

    /// Output power at the bias point with no drive.
    pub fn bias_power(&self) -> f64 {
        self.input_power * self.transmission(0.0)
    }

    /// Same modulator with a different bias.
    pub fn with_bias(&self, bias_voltage: f64) -> Self {
        Self { bias_voltage, ..*self }
    }
}

/// Small-signal slope `dP_out/dv` at the bias point, W per volt.
pub fn linearized_gain(params: &MzmParams) -> f64 {
    let eps = params.epsilon();
    -(PI * params.input_power * params.t_max() * (1.0 - eps)) / (2.0 * params.v_pi)
        * (PI * params.bias_voltage / params.v_pi).sin()
}

/// Attenuator, tunable delay and free-space link between a modulator and the combiner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpticalPathParams {
    pub wavelength_nm: f64,
    pub attenuation_db: f64,
    /// Tunable delay, s.
    pub delay: f64,
    pub excess_loss_db: f64,
}

impl Default for OpticalPathParams {
    fn default() -> Self {
        Self {
            wavelength_nm: 1560.0,
            attenuation_db: 0.0,
            delay: 0.0,
            excess_loss_db: 1.0,
        }
    }
}

impl OpticalPathParams {
    pub fn validate(&self) -> Result<(), PhotonicsError> {
        if !(self.wavelength_nm.is_finite() && self.wavelength_nm > 0.0) {
            return Err(invalid("wavelength_nm", format!("must be positive (got {})", self.wavelength_nm)));
        }
        if !(self.attenuation_db.is_finite() && self.attenuation_db >= 0.0) {
            return Err(invalid("attenuation_db", format!("must be >= 0 (got {})", self.attenuation_db)));
        }
        if !(self.delay.is_finite() && self.delay >= 0.0) {
            return Err(invalid("delay", format!("must be >= 0 (got {})", self.delay)));
        }
        if !(self.excess_loss_db.is_finite() && self.excess_loss_db >= 0.0) {
            return Err(invalid("excess_loss_db", format!("must be >= 0 (got {})", self.excess_loss_db)));
        }
        Ok(())
    }

    /// Linear power gain of attenuator plus link loss.
    pub fn linear_gain(&self) -> f64 {
        db_to_linear(self.attenuation_db + self.excess_loss_db)
    }
}

/// Photodiode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdParams {
    /// A/W.
    pub responsivity: f64,
    pub ac_coupled: bool,
    /// One-sided thermal noise current density, A/sqrt(Hz); zero disables noise.
    pub thermal_noise_density: f64,
    pub seed: u64,
}

impl Default for PdParams {
    fn default() -> Self {
        Self {
            responsivity: 0.8,
            ac_coupled: true,
            thermal_noise_density: 0.0,
            seed: 0,
        }
    }
}

impl PdParams {
    pub fn validate(&self) -> Result<(), PhotonicsError> {
        if !(self.responsivity.is_finite() && self.responsivity > 0.0) {
            return Err(invalid("responsivity", format!("must be positive (got {})", self.responsivity)));
        }
        if !(self.thermal_noise_density.is_finite() && self.thermal_noise_density >= 0.0) {
            return Err(invalid(
                "thermal_noise_density",
                format!("must be >= 0 (got {})", self.thermal_noise_density),
            ));
        }
        Ok(())
    }
}

/// Optical power samples in one of the two fidelity representations.
#[derive(Debug, Clone, PartialEq)]
pub enum PowerSamples {
    /// Mean power plus the complex envelope of the RF intensity modulation about
    /// the carrier: `P(t) = dc + Re{rf(t) e^{j 2 pi f_c t}}`.
    Envelope { dc: f64, rf: Vec<Complex64> },
    /// Instantaneous power on a real passband grid.
    Passband(Vec<f64>),
}

/// Intensity-domain signal between a modulator and the photodiode.
#[derive(Debug, Clone, PartialEq)]
pub struct OpticalPowerSignal {
    pub wavelength_nm: f64,
    pub sample_rate: f64,
    pub center_freq: f64,
    pub valid: Range<usize>,
    pub power: PowerSamples,
}

impl OpticalPowerSignal {
    pub fn len(&self) -> usize {
        match &self.power {
            PowerSamples::Envelope { rf, .. } => rf.len(),
            PowerSamples::Passband(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mode(&self) -> FidelityMode {
        match self.power {
            PowerSamples::Envelope { .. } => FidelityMode::Linearized,
            PowerSamples::Passband(_) => FidelityMode::Passband,
        }
    }

    /// Smallest instantaneous power the representation can take.
    pub fn min_power(&self) -> f64 {
        match &self.power {
            PowerSamples::Envelope { dc, rf } => {
                dc - rf[self.valid.clone()].iter().map(|v| v.norm()).fold(0.0, f64::max)
            }
            PowerSamples::Passband(p) => p[self.valid.clone()].iter().cloned().fold(f64::INFINITY, f64::min),
        }
    }

    /// Instantaneous power samples (passband) or the envelope-reconstructed power at
    /// the carrier (linearized), for inspection.
    pub fn instantaneous(&self) -> Vec<f64> {
        match &self.power {
            PowerSamples::Passband(p) => p.clone(),
            PowerSamples::Envelope { dc, rf } => rf
                .iter()
                .enumerate()
                .map(|(n, e)| {
                    let ph = 2.0 * PI * self.center_freq * n as f64 / self.sample_rate;
                    dc + (e * Complex64::from_polar(1.0, ph)).re
                })
                .collect(),
        }
    }
}

/// Intensity-modulates `rf` onto a laser. The wavelength is assigned by the path.
pub fn mzm_modulate(rf: &Waveform, params: &MzmParams, mode: FidelityMode) -> Result<OpticalPowerSignal, PhotonicsError> {
    params.validate()?;
    match mode {
        FidelityMode::Linearized => {
            let peak = rf.samples.iter().map(|s| s.norm()).fold(0.0, f64::max) * params.drive_scale;
            if peak > params.v_pi {
                return Err(PhotonicsError::DriveTooLarge {
                    peak_drive: peak,
                    v_pi: params.v_pi,
                });
            }
            let gain = linearized_gain(params) * params.drive_scale;
            Ok(OpticalPowerSignal {
                wavelength_nm: f64::NAN,
                sample_rate: rf.sample_rate,
                center_freq: rf.center_freq,
                valid: rf.valid.clone(),
                power: PowerSamples::Envelope {
                    dc: params.bias_power(),
                    rf: rf.samples.iter().map(|s| s * gain).collect(),
                },
            })
        }
        FidelityMode::Passband => {
            let bandwidth = dsp::quick_occupied_bandwidth(rf.valid_samples(), rf.sample_rate, 0.99);
            let required = PASSBAND_OVERSAMPLING * (rf.center_freq.abs() + bandwidth / 2.0);
            if rf.sample_rate < required || rf.center_freq <= 0.0 {
                return Err(PhotonicsError::InsufficientSampleRate {
                    sample_rate: rf.sample_rate,
                    required,
                    carrier: rf.center_freq,
                    bandwidth,
                });
            }
            let w = 2.0 * PI * rf.center_freq / rf.sample_rate;
            let power = rf
                .samples
                .iter()
                .enumerate()
                .map(|(n, s)| {
                    let v = params.drive_scale * (s * Complex64::from_polar(1.0, w * n as f64)).re;
                    params.input_power * params.transmission(v)
                })
                .collect();
            Ok(OpticalPowerSignal {
                wavelength_nm: f64::NAN,
                sample_rate: rf.sample_rate,
                center_freq: rf.center_freq,
                valid: rf.valid.clone(),
                power: PowerSamples::Passband(power),
            })
        }
    }
}

/// Attenuates, delays and tags the signal with the path's wavelength.
pub fn apply_optical_path(sig: &OpticalPowerSignal, path: &OpticalPathParams) -> Result<OpticalPowerSignal, PhotonicsError> {
    path.validate()?;
    let duration = sig.len() as f64 / sig.sample_rate;
    if path.delay >= duration / 4.0 {
        return Err(WaveformError::DelayTooLarge {
            delay: path.delay,
            limit: duration / 4.0,
        }
        .into());
    }
    let gain = path.linear_gain();
    let delay_samples = path.delay * sig.sample_rate;
    let (power, valid) = match &sig.power {
        PowerSamples::Envelope { dc, rf } => {
            let (delayed, valid) = if path.delay == 0.0 {
                (rf.clone(), 0..rf.len())
            } else {
                dsp::delay_samples(rf, delay_samples)
            };
            let rot = Complex64::from_polar(gain, -2.0 * PI * sig.center_freq * path.delay);
            (
                PowerSamples::Envelope {
                    dc: dc * gain,
                    rf: delayed.into_iter().map(|v| v * rot).collect(),
                },
                valid,
            )
        }
        PowerSamples::Passband(p) => {
            let (delayed, valid) = if path.delay == 0.0 {
                (p.clone(), 0..p.len())
            } else {
                dsp::delay_samples(p, delay_samples)
            };
            (PowerSamples::Passband(delayed.into_iter().map(|v| v * gain).collect()), valid)
        }
    };
    let shifted = shift_valid(&sig.valid, delay_samples, sig.len());
    Ok(OpticalPowerSignal {
        wavelength_nm: path.wavelength_nm,
        sample_rate: sig.sample_rate,
        center_freq: sig.center_freq,
        valid: intersect(&valid, &shifted),
        power,
    })
}

fn shift_valid(r: &Range<usize>, delay_samples: f64, len: usize) -> Range<usize> {
    let lo = (r.start as f64 + delay_samples).ceil().clamp(0.0, len as f64) as usize;
    let hi = (r.end as f64 + delay_samples).floor().clamp(0.0, len as f64) as usize;
    lo..hi.max(lo)
}

/// Beat frequency between two optical carriers, Hz.
pub fn beat_frequency(a_nm: f64, b_nm: f64) -> f64 {
    (SPEED_OF_LIGHT / (a_nm * 1e-9) - SPEED_OF_LIGHT / (b_nm * 1e-9)).abs()
}

/// Checks that every pair of wavelengths beats outside `bandwidth`.
pub fn check_wavelengths(wavelengths: &[f64], bandwidth: f64) -> Result<(), PhotonicsError> {
    for (i, &a) in wavelengths.iter().enumerate() {
        for &b in &wavelengths[i + 1..] {
            let beat = beat_frequency(a, b);
            if !(beat > bandwidth) {
                return Err(PhotonicsError::WavelengthCollision { a, b, beat_hz: beat });
            }
        }
    }
    Ok(())
}

/// Sums optical powers at the photodiode and returns the RF photocurrent envelope.
///
/// `i(t) = R * sum_k P_k(t)` plus optional thermal noise; the mean is removed when
/// AC coupled. The result is the complex envelope at the driving carrier (the DC
/// photocurrent never falls in that band).
pub fn combine_and_detect(signals: &[OpticalPowerSignal], pd: &PdParams) -> Result<Waveform, PhotonicsError> {
    pd.validate()?;
    let first = signals.first().ok_or(PhotonicsError::NoSignals)?;
    for s in &signals[1..] {
        if s.sample_rate != first.sample_rate || s.len() != first.len() || s.center_freq != first.center_freq {
            return Err(PhotonicsError::GridMismatch(format!(
                "{} samples @ {} Hz / carrier {} Hz vs {} samples @ {} Hz / carrier {} Hz",
                first.len(),
                first.sample_rate,
                first.center_freq,
                s.len(),
                s.sample_rate,
                s.center_freq
            )));
        }
        if s.mode() != first.mode() {
            return Err(PhotonicsError::GridMismatch("mixed fidelity modes".into()));
        }
    }
    let wavelengths: Vec<f64> = signals.iter().map(|s| s.wavelength_nm).collect();
    if let Some(w) = wavelengths.iter().find(|w| !w.is_finite()) {
        return Err(invalid("wavelength_nm", format!("signal has no wavelength ({w}); route it through an optical path")));
    }
    check_wavelengths(&wavelengths, first.sample_rate)?;

    let valid = signals.iter().fold(first.valid.clone(), |acc, s| intersect(&acc, &s.valid));
    let n = first.len();
    let fs = first.sample_rate;
    let r = pd.responsivity;
    let mut rng = ChaCha8Rng::seed_from_u64(pd.seed);

    let samples = match first.mode() {
        FidelityMode::Linearized => {
            let mut env = vec![Complex64::new(0.0, 0.0); n];
            for s in signals {
                if let PowerSamples::Envelope { rf, .. } = &s.power {
                    for (e, v) in env.iter_mut().zip(rf) {
                        *e += v * r;
                    }
                }
            }
            if pd.thermal_noise_density > 0.0 {
                let sd = pd.thermal_noise_density * (fs / 2.0).sqrt();
                for e in env.iter_mut() {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    *e += Complex64::new(re, im) * sd;
                }
            }
            env
        }
        FidelityMode::Passband => {
            let mut current = vec![0.0f64; n];
            for s in signals {
                if let PowerSamples::Passband(p) = &s.power {
                    for (c, v) in current.iter_mut().zip(p) {
                        *c += v * r;
                    }
                }
            }
            if pd.thermal_noise_density > 0.0 {
                let sd = pd.thermal_noise_density * (fs / 2.0).sqrt();
                for c in current.iter_mut() {
                    let g: f64 = rng.sample(StandardNormal);
                    *c += g * sd;
                }
            }
            if pd.ac_coupled && !valid.is_empty() {
                let mean = current[valid.clone()].iter().sum::<f64>() / valid.len() as f64;
                for c in current.iter_mut() {
                    *c -= mean;
                }
            }
            downconvert(&current, first.center_freq, fs)
        }
    };

    let valid = match first.mode() {
        FidelityMode::Linearized => valid,
        FidelityMode::Passband => {
            let half = DOWNCONVERT_TAPS / 2;
            intersect(&valid, &(half.min(n)..n.saturating_sub(half)))
        }
    };
    Ok(Waveform {
        samples,
        sample_rate: fs,
        center_freq: first.center_freq,
        valid,
    })
}

/// Complex envelope `e` of a real passband signal, `x = Re{e e^{j w n}}`.
fn downconvert(x: &[f64], carrier: f64, sample_rate: f64) -> Vec<Complex64> {
    let w = 2.0 * PI * carrier / sample_rate;
    let mixed: Vec<Complex64> = x
        .iter()
        .enumerate()
        .map(|(n, v)| Complex64::from_polar(2.0 * v, -w * n as f64))
        .collect();
    let taps = dsp::lowpass_taps(0.5 * carrier / sample_rate, DOWNCONVERT_TAPS);
    dsp::filter_centered(&mixed, &taps)
}
