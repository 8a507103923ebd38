//! End-to-end runs: generate, mix, modulate, tune, detect, demodulate.

use std::str::FromStr;
use std::time::Instant;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::canceller::{self, ChannelSettings, ReferenceChannel, TuneResult, TuningProblem};
use crate::photonics::{self, linearized_gain, OpticalPowerSignal};
use crate::rxdsp::{self, EvmReport, Spectrum};
use crate::scenario::{HarnessError, InterfererConfig, ReferenceChannelConfig, Scenario, Stage};
use crate::waveforms::{self, QamSignal, ReceivedInterferer, Waveform};

fn tag<E: std::fmt::Display>(stage: Stage) -> impl Fn(E) -> HarnessError {
    move |e| HarnessError::Stage {
        stage,
        message: e.to_string(),
    }
}

/// Receiver-side measurements for one detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub evm: EvmReport,
    pub spectrum: Spectrum,
    /// Power in both interference sidebands, dB full scale.
    pub sideband_power_db: f64,
    pub total_power_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub version: String,
    pub soi_seed: u64,
    pub interferer_seeds: Vec<u64>,
    pub pd_seed: u64,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Resolved scenario; rerunning it reproduces every metric.
    pub scenario: Scenario,
    pub warnings: Vec<String>,
    /// Signal to total interference power at the antenna, dB. Absent without interferers.
    pub sir_db: Option<f64>,
    pub pre: StageMetrics,
    pub post: StageMetrics,
    /// Drop in sideband power from pre to post, dB.
    pub suppression_db: f64,
    /// Absent when the scenario has no reference channels.
    pub tune: Option<TuneResult>,
    pub meta: RunMeta,
}

impl RunReport {
    /// Equality of everything but the wall clock.
    pub fn same_metrics(&self, other: &RunReport) -> bool {
        let mut a = self.meta.clone();
        a.wall_clock_s = other.meta.wall_clock_s;
        self.scenario == other.scenario
            && self.sir_db == other.sir_db
            && self.pre == other.pre
            && self.post == other.post
            && self.suppression_db == other.suppression_db
            && self.tune == other.tune
            && a == other.meta
    }
}

/// Everything up to the tuner: signals, optical arms and the untuned detection.
pub struct Bench {
    pub scenario: Scenario,
    pub soi: QamSignal,
    /// Transmitted interferer waveforms, one per interferer.
    pub interferers: Vec<Waveform>,
    /// Receiver arm carrying the full antenna mixture.
    pub rx_optical: OpticalPowerSignal,
    /// Receiver arm carrying the interference alone.
    pub rx_interference: OpticalPowerSignal,
    pub channels: Vec<ReferenceChannel>,
    /// Detected receiver output with every reference arm blocked.
    pub received: Waveform,
}

impl Bench {
    pub fn build(scenario: &Scenario) -> Result<Self, HarnessError> {
        let mut s = scenario.clone();
        s.validate()?;
        if !s.is_resolved() {
            s.resolve()?;
        }
        let fs = s.sim.sample_rate;
        let fc = s.simulation_carrier();
        let n = s.num_samples()?;

        let soi = waveforms::generate_qam_soi(&s.soi.qam(), s.soi.seed, fs, fc).map_err(tag(Stage::Generate))?;
        let interferers: Vec<Waveform> = s
            .interferers
            .iter()
            .map(|i| waveforms::generate_fm_noise(&i.fm(), fs, fc, n))
            .collect::<Result<_, _>>()
            .map_err(tag(Stage::Generate))?;

        let received_int: Vec<ReceivedInterferer<'_>> = s
            .interferers
            .iter()
            .zip(&interferers)
            .map(|(cfg, w)| ReceivedInterferer {
                waveform: w,
                gain: cfg.gain,
                delay: cfg.delay,
            })
            .collect();
        let mixture = waveforms::mix_many(&soi.waveform, s.soi.gain, &received_int).map_err(tag(Stage::Mix))?;
        let interference = waveforms::mix_many(&soi.waveform, 0.0, &received_int).map_err(tag(Stage::Mix))?;

        let mode = s.sim.fidelity;
        let arm = |w: &Waveform| -> Result<OpticalPowerSignal, HarnessError> {
            let m = photonics::mzm_modulate(w, &s.receiver_modulator, mode).map_err(tag(Stage::Modulate))?;
            photonics::apply_optical_path(&m, &s.receiver_path).map_err(tag(Stage::Modulate))
        };
        let rx_optical = arm(&mixture)?;
        let rx_interference = arm(&interference)?;

        let channels = s
            .reference_channels
            .iter()
            .zip(&interferers)
            .map(|(c, w)| ReferenceChannel {
                reference: w.clone(),
                mzm: c.mzm,
                path: c.path,
            })
            .collect();
        let received = photonics::combine_and_detect(std::slice::from_ref(&rx_optical), &s.pd).map_err(tag(Stage::Detect))?;

        Ok(Self {
            scenario: s,
            soi,
            interferers,
            rx_optical,
            rx_interference,
            channels,
            received,
        })
    }

    pub fn problem(&self) -> TuningProblem<'_> {
        TuningProblem {
            received: &self.received,
            rx_interference: &self.rx_interference,
            channels: &self.channels,
            pd: self.scenario.pd,
            mode: self.scenario.sim.fidelity,
            search_window: self.scenario.tuning.search_window,
        }
    }

    pub fn tune(&self) -> Result<Option<TuneResult>, HarnessError> {
        if self.channels.is_empty() {
            return Ok(None);
        }
        canceller::tune(&self.problem()).map(Some).map_err(tag(Stage::Tune))
    }

    /// Detected receiver output with the reference arms at `settings`.
    pub fn detect(&self, settings: &[ChannelSettings]) -> Result<Waveform, HarnessError> {
        let mut signals = vec![self.rx_optical.clone()];
        for (ch, st) in self.channels.iter().zip(settings) {
            if st.active {
                let sig = canceller::channel_signal(&ch.reference, &ch.mzm, &ch.path, st, self.scenario.sim.fidelity)
                    .map_err(tag(Stage::Detect))?;
                signals.push(sig);
            }
        }
        photonics::combine_and_detect(&signals, &self.scenario.pd).map_err(tag(Stage::Detect))
    }

    /// Scale from antenna amplitude to detected current through the receiver arm.
    pub fn receiver_gain(&self) -> f64 {
        let s = &self.scenario;
        s.pd.responsivity
            * linearized_gain(&s.receiver_modulator).abs()
            * s.receiver_modulator.drive_scale
            * s.receiver_path.linear_gain()
    }

    pub fn measure(&self, detected: &Waveform) -> Result<StageMetrics, HarnessError> {
        let s = &self.scenario;
        let evm = rxdsp::demodulate_qam(detected, &s.soi.qam(), &self.soi.symbols).map_err(tag(Stage::Demodulate))?;

        let input_referred = detected.scaled(Complex64::new(1.0 / self.receiver_gain(), 0.0));
        let mut spectrum =
            rxdsp::welch_psd(&input_referred, s.analysis.segment_len, s.analysis.overlap).map_err(tag(Stage::Spectrum))?;
        let shift = s.sim.center_freq - spectrum.center_freq;
        if shift != 0.0 {
            for f in spectrum.freqs.iter_mut() {
                *f += shift;
            }
            spectrum.center_freq = s.sim.center_freq;
        }
        let sideband_power_db = sideband_power_db(&spectrum, s.analysis.sideband_inner, s.analysis.sideband_outer)?;
        let total_power_db = 10.0 * spectrum.total_power().max(1e-30).log10();
        Ok(StageMetrics {
            evm,
            spectrum,
            sideband_power_db,
            total_power_db,
        })
    }
}

/// Power in `[fc - outer, fc - inner]` and `[fc + inner, fc + outer]`, dB full scale.
pub fn sideband_power_db(spectrum: &Spectrum, inner: f64, outer: f64) -> Result<f64, HarnessError> {
    let fc = spectrum.center_freq;
    let lin = |db: f64| 10f64.powf(db / 10.0);
    let lo = rxdsp::band_power(spectrum, fc - outer, fc - inner).map_err(tag(Stage::Spectrum))?;
    let hi = rxdsp::band_power(spectrum, fc + inner, fc + outer).map_err(tag(Stage::Spectrum))?;
    Ok(10.0 * (lin(lo) + lin(hi)).max(1e-30).log10())
}

/// Runs the bench through the tuner and returns its result.
pub fn tune_scenario(s: &Scenario) -> Result<Option<TuneResult>, HarnessError> {
    Bench::build(s)?.tune()
}

pub fn run_simulation(s: &Scenario) -> Result<RunReport, HarnessError> {
    let start = Instant::now();
    let warnings = s.validate()?;
    let bench = Bench::build(s)?;
    let pre = bench.measure(&bench.received)?;

    let tune = bench.tune()?;
    let post = match &tune {
        Some(t) => {
            let err = bench.scenario.tuning.delay_error;
            let settings: Vec<ChannelSettings> = t
                .settings()
                .into_iter()
                .map(|mut st| {
                    if st.active {
                        st.delay += err;
                    }
                    st
                })
                .collect();
            let detected = bench.detect(&settings)?;
            bench.measure(&detected)?
        }
        None => pre.clone(),
    };

    let sc = &bench.scenario;
    let int_power: f64 = sc.interferers.iter().map(|i| i.gain * i.gain).sum();
    let sir_db = (int_power > 0.0).then(|| 10.0 * (sc.soi.gain * sc.soi.gain / int_power).log10());
    let suppression_db = pre.sideband_power_db - post.sideband_power_db;
    let meta = RunMeta {
        version: env!("CARGO_PKG_VERSION").to_string(),
        soi_seed: sc.soi.seed,
        interferer_seeds: sc.interferers.iter().map(|i| i.seed).collect(),
        pd_seed: sc.pd.seed,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    Ok(RunReport {
        scenario: bench.scenario,
        warnings,
        sir_db,
        pre,
        post,
        suppression_db,
        tune,
        meta,
    })
}

/// Parameters a sweep can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Order,
    SirDb,
    InterfererCount,
    CenterFreq,
    DelayError,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Order => "order",
            SweepAxis::SirDb => "sir_db",
            SweepAxis::InterfererCount => "interferer_count",
            SweepAxis::CenterFreq => "center_freq",
            SweepAxis::DelayError => "delay_error",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "order" => SweepAxis::Order,
            "sir_db" | "sir" => SweepAxis::SirDb,
            "interferer_count" => SweepAxis::InterfererCount,
            "center_freq" => SweepAxis::CenterFreq,
            "delay_error" => SweepAxis::DelayError,
            other => return Err(HarnessError::UnknownAxis(other.to_string())),
        })
    }
}

/// Spacing between wavelengths of added reference channels, nm.
const ADDED_CHANNEL_SPACING_NM: f64 = 4.0;

/// The base scenario with one axis set to `value`, resolved.
pub fn scenario_at(base: &Scenario, axis: SweepAxis, value: f64) -> Result<Scenario, HarnessError> {
    let bad = |reason: &str| HarnessError::BadSweepValue {
        axis: axis.name().to_string(),
        value,
        reason: reason.to_string(),
    };
    let mut s = base.clone();
    s.sweep = None;
    match axis {
        SweepAxis::Order => {
            if value.fract() != 0.0 || !matches!(value as u32, 4 | 16 | 64 | 256) {
                return Err(bad("expected 4, 16, 64 or 256"));
            }
            s.soi.order = value as u32;
        }
        SweepAxis::SirDb => {
            if !value.is_finite() {
                return Err(bad("must be finite"));
            }
            let int_power: f64 = s.interferers.iter().map(|i| i.gain * i.gain).sum();
            if int_power == 0.0 {
                return Err(bad("scenario has no interference to scale"));
            }
            // total antenna power is held fixed so the modulator drive does not change
            let total = s.soi.gain * s.soi.gain + int_power;
            let r = 10f64.powf(value / 10.0);
            s.soi.gain = (total * r / (1.0 + r)).sqrt();
            let c = (total / (1.0 + r) / int_power).sqrt();
            for i in s.interferers.iter_mut() {
                i.gain *= c;
            }
        }
        SweepAxis::InterfererCount => {
            if value.fract() != 0.0 || !(0.0..=crate::canceller::MAX_CHANNELS as f64).contains(&value) {
                return Err(bad(&format!("expected an integer in 0..={}", crate::canceller::MAX_CHANNELS)));
            }
            let count = value as usize;
            let template_int = s.interferers.last().cloned().unwrap_or_default();
            let template_ch = s.reference_channels.last().cloned().unwrap_or_default();
            let have = s.interferers.len();
            s.interferers.truncate(count);
            s.reference_channels.truncate(count);
            for k in have..count {
                let step = (k + 1 - have) as u64;
                s.interferers.push(InterfererConfig {
                    seed: template_int.seed + 1000 * step,
                    freq_deviation: None,
                    ..template_int.clone()
                });
            }
            let have_ch = s.reference_channels.len();
            let lowest = s
                .reference_channels
                .iter()
                .map(|c| c.path.wavelength_nm)
                .fold(template_ch.path.wavelength_nm, f64::min)
                .min(s.receiver_path.wavelength_nm);
            for k in have_ch..count {
                let mut ch: ReferenceChannelConfig = template_ch.clone();
                ch.path.wavelength_nm = lowest - ADDED_CHANNEL_SPACING_NM * (k + 1 - have_ch) as f64;
                s.reference_channels.push(ch);
            }
        }
        SweepAxis::CenterFreq => {
            if !(value.is_finite() && value >= 0.0) {
                return Err(bad("must be a non-negative frequency"));
            }
            s.sim.center_freq = value;
        }
        SweepAxis::DelayError => {
            if !value.is_finite() {
                return Err(bad("must be finite"));
            }
            s.tuning.delay_error = value;
        }
    }
    s.validate()?;
    s.resolve()?;
    Ok(s)
}

/// Independent runs at each value, in input order.
pub fn run_sweep(base: &Scenario, axis: SweepAxis, values: &[f64]) -> Result<Vec<RunReport>, HarnessError> {
    let scenarios: Vec<Scenario> = values
        .iter()
        .map(|&v| scenario_at(base, axis, v))
        .collect::<Result<_, _>>()?;
    scenarios.par_iter().map(run_simulation).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::parse_scenario;

    fn small(extra: &str) -> Scenario {
        let text = format!(
            r#"
            [soi]
            num_symbols = 600
            [[interferers]]
            freq_deviation = 7e6
            delay = 20e-9
            [[reference_channels]]
            {extra}
            "#
        );
        parse_scenario(&text, "inline").unwrap()
    }

    #[test]
    fn axis_names_parse() {
        for a in ["order", "sir_db", "interferer_count", "center_freq", "delay_error"] {
            assert_eq!(a.parse::<SweepAxis>().unwrap().name(), a);
        }
        assert!(matches!("gain".parse::<SweepAxis>(), Err(HarnessError::UnknownAxis(_))));
    }

    #[test]
    fn sir_axis_holds_total_power() {
        let s = small("");
        let t = scenario_at(&s, SweepAxis::SirDb, 10.0).unwrap();
        let total = t.soi.gain.powi(2) + t.interferers[0].gain.powi(2);
        assert!((total - 2.0).abs() < 1e-12);
        assert!((10.0 * (t.soi.gain.powi(2) / t.interferers[0].gain.powi(2)).log10() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn interferer_count_adds_distinct_channels() {
        let s = small("");
        let t = scenario_at(&s, SweepAxis::InterfererCount, 3.0).unwrap();
        assert_eq!(t.interferers.len(), 3);
        assert_eq!(t.reference_channels.len(), 3);
        assert_ne!(t.interferers[1].seed, t.interferers[2].seed);
        let z = scenario_at(&s, SweepAxis::InterfererCount, 0.0).unwrap();
        assert!(z.interferers.is_empty() && z.reference_channels.is_empty());
    }

    #[test]
    fn bad_order_value() {
        let s = small("");
        assert!(matches!(scenario_at(&s, SweepAxis::Order, 32.0), Err(HarnessError::BadSweepValue { .. })));
    }

    #[test]
    fn no_channels_means_post_equals_pre() {
        let s = scenario_at(&small(""), SweepAxis::InterfererCount, 0.0).unwrap();
        let r = run_simulation(&s).unwrap();
        assert!(r.tune.is_none());
        assert_eq!(r.pre, r.post);
        assert!(r.pre.evm.evm_rms_percent < 0.1, "{}", r.pre.evm.evm_rms_percent);
    }
}
