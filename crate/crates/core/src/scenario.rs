//! Scenario files: a TOML description of the bench, validated and resolved.
//!
//! Every default that the simulator relies on is written back into the resolved
//! scenario, so a run is fully described by its echoed scenario.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::photonics::{check_wavelengths, FidelityMode, MzmParams, OpticalPathParams, PdParams};
use crate::waveforms::{calibrate_fm_deviation, FmNoiseConfig, QamConfig, WaveformError};

/// Bundled presets, by name.
pub const PRESETS: &[(&str, &str)] = &[
    ("paper_fig2", include_str!("../scenarios/paper_fig2.toml")),
    ("multiuser_two_interferers", include_str!("../scenarios/multiuser_two_interferers.toml")),
    ("modulation_sweep", include_str!("../scenarios/modulation_sweep.toml")),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

/// Pipeline stage an error was raised in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Load,
    Generate,
    Mix,
    Modulate,
    Tune,
    Detect,
    Demodulate,
    Spectrum,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Load => "load",
            Stage::Generate => "generate",
            Stage::Mix => "mix",
            Stage::Modulate => "modulate",
            Stage::Tune => "tune",
            Stage::Detect => "detect",
            Stage::Demodulate => "demodulate",
            Stage::Spectrum => "spectrum",
            Stage::Output => "output",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("[io] {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("[load] {origin}: parse error: {message}")]
    Parse { origin: String, message: String },
    #[error("[load] invalid scenario: {field}: {reason}")]
    Validation { field: String, reason: String },
    #[error("[{stage}] {message}")]
    Stage { stage: Stage, message: String },
    #[error("[sweep] unknown sweep axis '{0}' (expected one of: order, sir_db, interferer_count, center_freq, delay_error)")]
    UnknownAxis(String),
    #[error("[sweep] value {value} is not valid for axis '{axis}': {reason}")]
    BadSweepValue { axis: String, value: f64, reason: String },
    #[error("[report] {path}: digest mismatch (manifest {expected}, file {actual})")]
    DigestMismatch { path: PathBuf, expected: String, actual: String },
    #[error("[output] {0}")]
    Format(String),
    #[error("[usage] {0}")]
    Usage(String),
}

fn field_err(field: impl Into<String>, reason: impl Into<String>) -> HarnessError {
    HarnessError::Validation {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub sample_rate: f64,
    /// Buffer length in seconds; defaults to the SOI symbol count at its symbol rate.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
    /// RF carrier the scenario is referenced to.
    pub center_freq: f64,
    pub fidelity: FidelityMode,
    /// Scaled carrier used for passband-mode simulation.
    pub passband_carrier: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            sample_rate: 204.9e6,
            duration: None,
            center_freq: 2.4e9,
            fidelity: FidelityMode::Linearized,
            passband_carrier: 60e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SoiConfig {
    pub order: u32,
    pub symbol_rate: f64,
    pub rolloff: f64,
    pub num_symbols: usize,
    pub gain: f64,
    pub seed: u64,
}

impl Default for SoiConfig {
    fn default() -> Self {
        let q = QamConfig::default();
        Self {
            order: q.order,
            symbol_rate: q.symbol_rate,
            rolloff: q.rolloff,
            num_symbols: q.num_symbols,
            gain: 1.0,
            seed: 7,
        }
    }
}

impl SoiConfig {
    pub fn qam(&self) -> QamConfig {
        QamConfig {
            order: self.order,
            symbol_rate: self.symbol_rate,
            rolloff: self.rolloff,
            num_symbols: self.num_symbols,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterfererConfig {
    pub modulating_noise_bandwidth: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub freq_deviation: Option<f64>,
    pub target_occupied_bandwidth: f64,
    pub seed: u64,
    pub gain: f64,
    /// Propagation delay from the interfering transmitter to the receiver, s.
    pub delay: f64,
}

impl Default for InterfererConfig {
    fn default() -> Self {
        let f = FmNoiseConfig::default();
        Self {
            modulating_noise_bandwidth: f.modulating_noise_bandwidth,
            freq_deviation: None,
            target_occupied_bandwidth: f.target_occupied_bandwidth,
            seed: f.seed,
            gain: 1.0,
            delay: 0.0,
        }
    }
}

impl InterfererConfig {
    pub fn fm(&self) -> FmNoiseConfig {
        FmNoiseConfig {
            modulating_noise_bandwidth: self.modulating_noise_bandwidth,
            freq_deviation: self.freq_deviation,
            target_occupied_bandwidth: self.target_occupied_bandwidth,
            seed: self.seed,
        }
    }
}

/// Reference modulators are driven from a direct split of the interfering
/// transmitter, harder than the over-the-air mixture.
pub fn default_reference_mzm() -> MzmParams {
    MzmParams {
        drive_scale: 0.5,
        ..MzmParams::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceChannelConfig {
    #[serde(default = "default_reference_mzm")]
    pub mzm: MzmParams,
    #[serde(default)]
    pub path: OpticalPathParams,
}

impl Default for ReferenceChannelConfig {
    fn default() -> Self {
        Self {
            mzm: default_reference_mzm(),
            path: OpticalPathParams::default(),
        }
    }
}

pub fn default_receiver_path() -> OpticalPathParams {
    OpticalPathParams {
        wavelength_nm: 1544.0,
        attenuation_db: 0.0,
        delay: 0.0,
        excess_loss_db: 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuningConfig {
    /// Half-width of the delay search, s.
    pub search_window: f64,
    /// Deliberate error added to every tuned delay before the post-cancellation run, s.
    pub delay_error: f64,
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self {
            search_window: 1e-6,
            delay_error: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub segment_len: usize,
    pub overlap: f64,
    /// Interference sidebands are measured at carrier offsets in [inner, outer].
    pub sideband_inner: f64,
    pub sideband_outer: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            segment_len: crate::rxdsp::DEFAULT_SEGMENT_LEN,
            overlap: crate::rxdsp::DEFAULT_OVERLAP,
            sideband_inner: 5e6,
            sideband_outer: 20e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub soi: SoiConfig,
    #[serde(default)]
    pub interferers: Vec<InterfererConfig>,
    #[serde(default)]
    pub reference_channels: Vec<ReferenceChannelConfig>,
    #[serde(default)]
    pub receiver_modulator: MzmParams,
    #[serde(default = "default_receiver_path")]
    pub receiver_path: OpticalPathParams,
    #[serde(default)]
    pub pd: PdParams,
    #[serde(default)]
    pub tuning: TuningConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

impl Scenario {
    /// Carrier the waveforms are generated on for the configured fidelity.
    pub fn simulation_carrier(&self) -> f64 {
        match self.sim.fidelity {
            FidelityMode::Linearized => self.sim.center_freq,
            FidelityMode::Passband => self.sim.passband_carrier,
        }
    }

    pub fn samples_per_symbol(&self) -> Result<usize, HarnessError> {
        self.soi
            .qam()
            .samples_per_symbol(self.sim.sample_rate)
            .map_err(|e| field_err("sim.sample_rate", e.to_string()))
    }

    pub fn num_samples(&self) -> Result<usize, HarnessError> {
        Ok(self.soi.num_symbols * self.samples_per_symbol()?)
    }

    /// Checks every invariant and returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>, HarnessError> {
        let mut warnings = Vec::new();
        let sim = &self.sim;
        if !(sim.sample_rate.is_finite() && sim.sample_rate > 0.0) {
            return Err(field_err("sim.sample_rate", format!("must be positive (got {})", sim.sample_rate)));
        }
        if !(sim.center_freq.is_finite() && sim.center_freq >= 0.0) {
            return Err(field_err("sim.center_freq", format!("must be >= 0 (got {})", sim.center_freq)));
        }
        if sim.fidelity == FidelityMode::Passband && !(sim.passband_carrier > 0.0) {
            return Err(field_err("sim.passband_carrier", "must be positive in passband mode"));
        }

        self.soi.qam().validate().map_err(|e| match e {
            WaveformError::UnsupportedOrder(_) => field_err("soi.order", e.to_string()),
            WaveformError::InvalidParameter { name, reason } => field_err(format!("soi.{name}"), reason),
            other => field_err("soi", other.to_string()),
        })?;
        if !(self.soi.gain.is_finite() && self.soi.gain >= 0.0) {
            return Err(field_err("soi.gain", format!("must be >= 0 (got {})", self.soi.gain)));
        }
        let n = self.num_samples()?;
        let natural = n as f64 / sim.sample_rate;
        if let Some(d) = sim.duration {
            if ((d - natural) * sim.sample_rate).abs() > 0.5 {
                return Err(field_err(
                    "sim.duration",
                    format!("{d} s does not match {} symbols at {} Bd ({natural} s)", self.soi.num_symbols, self.soi.symbol_rate),
                ));
            }
        }

        for (i, int) in self.interferers.iter().enumerate() {
            let name = |f: &str| format!("interferers[{i}].{f}");
            if !(int.gain.is_finite() && int.gain >= 0.0) {
                return Err(field_err(name("gain"), format!("must be >= 0 (got {})", int.gain)));
            }
            if !(int.delay.is_finite() && int.delay >= 0.0 && int.delay < natural / 4.0) {
                return Err(field_err(
                    name("delay"),
                    format!("must lie in [0, {}) s (got {})", natural / 4.0, int.delay),
                ));
            }
            int.fm().validate(sim.sample_rate).map_err(|e| field_err(format!("interferers[{i}]"), e.to_string()))?;
        }

        if self.reference_channels.len() > crate::canceller::MAX_CHANNELS {
            return Err(field_err(
                "reference_channels",
                format!("at most {} channels", crate::canceller::MAX_CHANNELS),
            ));
        }
        if self.reference_channels.len() > self.interferers.len() {
            return Err(field_err(
                "reference_channels",
                format!(
                    "{} channels but only {} interferers to tap",
                    self.reference_channels.len(),
                    self.interferers.len()
                ),
            ));
        }
        for (i, ch) in self.reference_channels.iter().enumerate() {
            ch.mzm.validate().map_err(|e| field_err(format!("reference_channels[{i}].mzm"), e.to_string()))?;
            ch.path.validate().map_err(|e| field_err(format!("reference_channels[{i}].path"), e.to_string()))?;
        }
        self.receiver_modulator
            .validate()
            .map_err(|e| field_err("receiver_modulator", e.to_string()))?;
        self.receiver_path.validate().map_err(|e| field_err("receiver_path", e.to_string()))?;
        self.pd.validate().map_err(|e| field_err("pd", e.to_string()))?;

        let mut wavelengths = vec![self.receiver_path.wavelength_nm];
        wavelengths.extend(self.reference_channels.iter().map(|c| c.path.wavelength_nm));
        check_wavelengths(&wavelengths, sim.sample_rate)
            .map_err(|e| field_err("reference_channels[].path.wavelength_nm", e.to_string()))?;

        if !(self.tuning.search_window > 0.0 && self.tuning.search_window <= natural / 4.0) {
            return Err(field_err(
                "tuning.search_window",
                format!("must lie in (0, {}] s (got {})", natural / 4.0, self.tuning.search_window),
            ));
        }
        if !self.tuning.delay_error.is_finite() {
            return Err(field_err("tuning.delay_error", "must be finite"));
        }
        let a = &self.analysis;
        if !a.segment_len.is_power_of_two() || a.segment_len > n {
            return Err(field_err(
                "analysis.segment_len",
                format!("must be a power of two no longer than the buffer ({n} samples)"),
            ));
        }
        if !(0.0..1.0).contains(&a.overlap) {
            return Err(field_err("analysis.overlap", "must lie in [0, 1)"));
        }
        if !(a.sideband_inner >= 0.0 && a.sideband_outer > a.sideband_inner && a.sideband_outer < sim.sample_rate / 2.0) {
            return Err(field_err(
                "analysis.sideband_outer",
                "need 0 <= sideband_inner < sideband_outer < sample_rate / 2",
            ));
        }

        if self.reference_channels.len() < self.interferers.len() {
            warnings.push(format!(
                "{} interferers but only {} reference channels: cancellation will be partial",
                self.interferers.len(),
                self.reference_channels.len()
            ));
        }
        if self.reference_channels.is_empty() {
            warnings.push("no reference channels: nothing to tune".into());
        }
        Ok(warnings)
    }

    /// Fills in derived defaults (buffer duration, calibrated FM deviations).
    pub fn resolve(&mut self) -> Result<(), HarnessError> {
        let n = self.num_samples()?;
        if self.sim.duration.is_none() {
            self.sim.duration = Some(n as f64 / self.sim.sample_rate);
        }
        for (i, int) in self.interferers.iter_mut().enumerate() {
            if int.freq_deviation.is_none() {
                let dev = calibrate_fm_deviation(&int.fm(), self.sim.sample_rate, n)
                    .map_err(|e| field_err(format!("interferers[{i}].freq_deviation"), e.to_string()))?;
                int.freq_deviation = Some(dev);
            }
        }
        Ok(())
    }

    pub fn is_resolved(&self) -> bool {
        self.sim.duration.is_some() && self.interferers.iter().all(|i| i.freq_deviation.is_some())
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string_pretty(self).map_err(|e| HarnessError::Format(e.to_string()))
    }
}

/// Parses, validates and resolves scenario text.
pub fn parse_scenario(text: &str, origin: &str) -> Result<Scenario, HarnessError> {
    let mut scenario: Scenario = toml::from_str(text).map_err(|e| HarnessError::Parse {
        origin: origin.to_string(),
        message: e.to_string(),
    })?;
    scenario.validate()?;
    scenario.resolve()?;
    Ok(scenario)
}

/// Loads a scenario file.
pub fn load_scenario(path: &Path) -> Result<Scenario, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_scenario(&text, &path.display().to_string())
}

/// A path on disk, or the name of a bundled preset.
pub fn load_scenario_or_preset(arg: &str) -> Result<Scenario, HarnessError> {
    let path = Path::new(arg);
    if !path.exists() {
        if let Some(text) = preset(arg) {
            return parse_scenario(text, arg);
        }
        let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
        return Err(HarnessError::Usage(format!(
            "'{arg}' is neither a scenario file nor a bundled preset ({})",
            names.join(", ")
        )));
    }
    load_scenario(path)
}
