use std::f64::consts::PI;

use num_complex::Complex64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rfim_core::canceller::*;
use rfim_core::dsp::mean_power;
use rfim_core::photonics::*;
use rfim_core::waveforms::*;

const FS: f64 = 204.9e6;
const FC: f64 = 2.4e9;

fn fm(seed: u64, n: usize) -> Waveform {
    let cfg = FmNoiseConfig {
        freq_deviation: Some(7.5e6),
        seed,
        ..FmNoiseConfig::default()
    };
    generate_fm_noise(&cfg, FS, FC, n).unwrap()
}

fn soi(num_symbols: usize) -> Waveform {
    let cfg = QamConfig {
        num_symbols,
        ..QamConfig::default()
    };
    generate_qam_soi(&cfg, 7, FS, FC).unwrap().waveform
}

fn noise(n: usize, variance: f64, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = (variance / 2.0).sqrt();
    let s = (0..n)
        .map(|_| {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            Complex64::new(re, im) * sd
        })
        .collect();
    Waveform::new(s, FS, FC).unwrap()
}

fn cost(received: &Waveform, refs: &[Waveform], w: &[Complex64]) -> f64 {
    let valid = refs.iter().fold(received.valid.clone(), |acc, r| {
        acc.start.max(r.valid.start)..acc.end.min(r.valid.end)
    });
    valid
        .clone()
        .map(|n| {
            let est: Complex64 = refs.iter().zip(w).map(|(r, wk)| r.samples[n] * wk).sum();
            (received.samples[n] - est).norm_sqr()
        })
        .sum::<f64>()
        / valid.len() as f64
}

#[test]
fn reference_against_itself_is_zero_delay() {
    let x = fm(1, 8192);
    match estimate_delay(&x, &x, 1e-6).unwrap() {
        DelayEstimate::Locked { delay, peak_correlation } => {
            assert_eq!(delay, 0.0);
            assert!((peak_correlation - 1.0).abs() < 1e-9);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn inserted_delay_is_found_at_twenty_db_snr() {
    let n = 1 << 15;
    let x = fm(2, n);
    // 20 dB SNR over the interferer's 40 MHz occupied band
    let variance = 0.01 * FS / 40e6;
    let d = apply_fractional_delay(&x, 7.3 / FS).unwrap();
    let rx = d.add(&noise(n, variance, 5)).unwrap();
    let est = estimate_delay(&rx, &x, 1e-6).unwrap().delay().unwrap() * FS;
    assert!((est - 7.3).abs() <= 0.1, "{est}");
}

#[test]
fn soi_alone_does_not_lock() {
    let s = soi(800);
    let x = fm(3, s.len());
    assert!(matches!(estimate_delay(&s, &x, 1e-6).unwrap(), DelayEstimate::NoLock { .. }));
}

#[test]
fn exact_reference_gives_unit_weight() {
    let x = fm(4, 4096);
    let sol = solve_weights(&x, std::slice::from_ref(&x), &[0.0]).unwrap();
    assert!((sol.weights[0] - Complex64::new(1.0, 0.0)).norm() < 1e-9);
    assert!(!sol.regularized);
}

#[test]
fn inverted_half_reference_is_recovered_under_soi() {
    let s = soi(4000);
    let x = fm(5, s.len());
    let rx = s.add_scaled(&x, Complex64::from_polar(0.5, PI)).unwrap();
    let sol = solve_weights(&rx, std::slice::from_ref(&x), &[0.0]).unwrap();
    let w = sol.weights[0];
    assert!((w.norm() / 0.5 - 1.0).abs() < 0.02, "{w}");
    assert!((w.arg().abs() - PI).abs() < 0.02, "{w}");
}

#[test]
fn two_interferers_two_references() {
    let s = soi(4000);
    let n = s.len();
    let (x1, x2) = (fm(11, n), fm(23, n));
    let (g1, g2) = (Complex64::from_polar(0.8, 0.4), Complex64::from_polar(0.6, -2.0));
    let (d1, d2) = (12.3e-9, 31.7e-9);
    let int = apply_propagation_delay(&x1, d1)
        .unwrap()
        .scaled(g1)
        .add_scaled(&apply_propagation_delay(&x2, d2).unwrap(), g2)
        .unwrap();
    let rx = s.add(&int).unwrap();
    let refs = [x1, x2];
    let sol = solve_weights(&rx, &refs, &[d1, d2]).unwrap();
    assert!((sol.weights[0] / g1 - 1.0).norm() < 0.02);
    assert!((sol.weights[1] / g2 - 1.0).norm() < 0.02);

    let aligned = align_references(&refs, &[d1, d2]).unwrap();
    let mut left = int.clone();
    for (a, w) in aligned.iter().zip(&sol.weights) {
        left = left.add_scaled(a, -w).unwrap();
    }
    let resid_db = 10.0 * (left.mean_power() / int.mean_power()).log10();
    assert!(resid_db <= -30.0, "{resid_db}");
}

#[test]
fn one_channel_matches_exhaustive_grid() {
    let n = 4000;
    let s = soi(n / 50);
    let x = fm(6, n);
    let truth = Complex64::from_polar(0.7, 2.2);
    let rx = s.scaled(Complex64::new(0.3, 0.0)).add_scaled(&x, truth).unwrap();
    let sol = solve_weights(&rx, std::slice::from_ref(&x), &[0.0]).unwrap();

    // cost(w) = P - 2 Re(conj(w) c) + |w|^2 g, with the moments summed directly
    let p = mean_power(&rx.samples);
    let c: Complex64 = x.samples.iter().zip(&rx.samples).map(|(a, b)| a.conj() * b).sum::<Complex64>() / n as f64;
    let g = mean_power(&x.samples);
    let step = 1e-3;
    let mut best = (f64::INFINITY, Complex64::new(0.0, 0.0));
    for i in 0..=1500 {
        let mag = i as f64 * step;
        let mut ph = -PI;
        while ph < PI {
            let w = Complex64::from_polar(mag, ph);
            let j = p - 2.0 * (w.conj() * c).re + w.norm_sqr() * g;
            if j < best.0 {
                best = (j, w);
            }
            ph += step;
        }
    }
    let w = sol.weights[0];
    assert!((w.norm() - best.1.norm()).abs() <= step);
    let dphi = (w / best.1).arg().abs();
    assert!(dphi <= step, "{dphi}");
    assert!(sol.residual_power <= best.0 * (1.0 + 1e-12));
}

#[test]
fn two_channels_match_local_grid() {
    let n = 4000;
    let s = soi(n / 50);
    let (x1, x2) = (fm(7, n), fm(8, n));
    let rx = s
        .add_scaled(&x1, Complex64::from_polar(0.9, -0.7))
        .unwrap()
        .add_scaled(&x2, Complex64::from_polar(0.4, 1.9))
        .unwrap();
    let refs = [x1, x2];
    let sol = solve_weights(&rx, &refs, &[0.0, 0.0]).unwrap();

    // exhaustive grid in magnitude and phase of both weights, +-20 steps about the solution
    let moments = |a: &Waveform, b: &[Complex64]| -> Complex64 {
        a.samples.iter().zip(b).map(|(u, v)| u.conj() * v).sum::<Complex64>() / n as f64
    };
    let p = mean_power(&rx.samples);
    let c = [moments(&refs[0], &rx.samples), moments(&refs[1], &rx.samples)];
    let g11 = moments(&refs[0], &refs[0].samples).re;
    let g22 = moments(&refs[1], &refs[1].samples).re;
    let g12 = moments(&refs[0], &refs[1].samples);
    let j = |w1: Complex64, w2: Complex64| -> f64 {
        p - 2.0 * (w1.conj() * c[0]).re - 2.0 * (w2.conj() * c[1]).re
            + w1.norm_sqr() * g11
            + w2.norm_sqr() * g22
            + 2.0 * (w1.conj() * g12 * w2).re
    };
    let step = 1e-3;
    let (m1, p1, m2, p2) = (
        sol.weights[0].norm(),
        sol.weights[0].arg(),
        sol.weights[1].norm(),
        sol.weights[1].arg(),
    );
    let mut best = (f64::INFINITY, [0i32; 4]);
    for a in -20..=20 {
        for b in -20..=20 {
            for c2 in -20..=20 {
                for d in -20..=20 {
                    let w1 = Complex64::from_polar(m1 + a as f64 * step, p1 + b as f64 * step);
                    let w2 = Complex64::from_polar(m2 + c2 as f64 * step, p2 + d as f64 * step);
                    let v = j(w1, w2);
                    if v < best.0 {
                        best = (v, [a, b, c2, d]);
                    }
                }
            }
        }
    }
    assert!(best.1.iter().all(|k| k.abs() <= 1), "{:?}", best.1);
    assert!((cost(&rx, &refs, &sol.weights) - sol.residual_power).abs() < 1e-12);
}

#[test]
fn solved_weights_are_wiener_optimal() {
    let s = soi(1000);
    let n = s.len();
    let (x1, x2) = (fm(9, n), fm(10, n));
    let rx = s
        .add_scaled(&x1, Complex64::from_polar(1.1, 0.3))
        .unwrap()
        .add_scaled(&x2, Complex64::from_polar(0.5, -1.0))
        .unwrap();
    let refs = [x1, x2];
    let sol = solve_weights(&rx, &refs, &[0.0, 0.0]).unwrap();
    let base = cost(&rx, &refs, &sol.weights);
    for k in 0..2 {
        for f in [
            Complex64::new(1.01, 0.0),
            Complex64::new(0.99, 0.0),
            Complex64::from_polar(1.0, 0.01),
            Complex64::from_polar(1.0, -0.01),
        ] {
            let mut w = sol.weights.clone();
            w[k] *= f;
            assert!(cost(&rx, &refs, &w) > base);
        }
    }
}

#[test]
fn soi_survives_cancellation() {
    let s = soi(4000);
    let x = fm(12, s.len());
    let rx = s.add_scaled(&x, Complex64::from_polar(1.0, 0.8)).unwrap();
    let sol = solve_weights(&rx, std::slice::from_ref(&x), &[0.0]).unwrap();
    let out = rx.add_scaled(&x, -sol.weights[0]).unwrap();
    let change_db = 10.0 * (out.mean_power() / s.mean_power()).log10();
    assert!(change_db.abs() < 0.2, "{change_db}");
}

fn bench(int_gain: f64) -> (Waveform, OpticalPowerSignal, Vec<ReferenceChannel>, PdParams) {
    let s = soi(2000);
    let x = fm(13, s.len());
    let rx_mzm = MzmParams::default();
    let rx_path = OpticalPathParams {
        wavelength_nm: 1544.0,
        excess_loss_db: 0.0,
        ..OpticalPathParams::default()
    };
    let pd = PdParams::default();
    let arm = |w: &Waveform| {
        apply_optical_path(&mzm_modulate(w, &rx_mzm, FidelityMode::Linearized).unwrap(), &rx_path).unwrap()
    };
    let mix = mix_at_receiver(&s, &x, 1.0, int_gain, 12.3e-9).unwrap();
    let int_only = mix_at_receiver(&s, &x, 0.0, int_gain, 12.3e-9).unwrap();
    let received = combine_and_detect(&[arm(&mix)], &pd).unwrap();
    let channel = ReferenceChannel {
        reference: x,
        mzm: MzmParams {
            drive_scale: 0.5,
            ..MzmParams::default()
        },
        path: OpticalPathParams::default(),
    };
    (received, arm(&int_only), vec![channel], pd)
}

#[test]
fn tune_cancels_single_interferer() {
    let (received, rx_int, channels, pd) = bench(1.0);
    let problem = TuningProblem {
        received: &received,
        rx_interference: &rx_int,
        channels: &channels,
        pd,
        mode: FidelityMode::Linearized,
        search_window: 1e-6,
    };
    let r = tune(&problem).unwrap();
    assert!(r.converged);
    assert!(r.residual_interference_power_db <= -30.0, "{}", r.residual_interference_power_db);
    assert!((r.residual_interference_power_db - r.predicted_residual_db).abs() < 0.5);
    let replay = replay_residual_db(&problem, &r.settings()).unwrap();
    assert_eq!(replay, r.residual_interference_power_db);
    let s = r.channels[0].settings;
    assert!(s.active);
    assert!((s.bias_voltage.abs() - 2.5).abs() < 1e-12);
    assert!(s.attenuation_db >= 0.0 && s.delay >= 0.0);
}

#[test]
fn tune_without_interference_leaves_settings_alone() {
    let (received, rx_int, channels, pd) = bench(0.0);
    let problem = TuningProblem {
        received: &received,
        rx_interference: &rx_int,
        channels: &channels,
        pd,
        mode: FidelityMode::Linearized,
        search_window: 1e-6,
    };
    let r = tune(&problem).unwrap();
    assert!(!r.converged);
    assert_eq!(r.residual_interference_power_db, 0.0);
    assert_eq!(r.channels[0].settings, ChannelSettings::untouched(&channels[0].mzm, &channels[0].path));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scaling_reference_scales_weight_inversely(re in -3.0f64..3.0, im in -3.0f64..3.0) {
        let c = Complex64::new(re, im);
        prop_assume!(c.norm() > 0.05);
        let s = soi(200);
        let x = fm(14, s.len());
        let rx = s.add_scaled(&x, Complex64::from_polar(0.6, 1.0)).unwrap();
        let a = solve_weights(&rx, std::slice::from_ref(&x), &[0.0]).unwrap();
        let b = solve_weights(&rx, &[x.scaled(c)], &[0.0]).unwrap();
        prop_assert!((b.weights[0] * c - a.weights[0]).norm() < 1e-9 * a.weights[0].norm());
        prop_assert!((b.residual_power / a.residual_power - 1.0).abs() < 1e-9);
    }

    #[test]
    fn settings_round_trip_through_photonics(frac in 0.01f64..1.0, phase in -PI..PI, base_delay in 0.0f64..30e-9) {
        let mzm = MzmParams { drive_scale: 0.5, ..MzmParams::default() };
        let path = OpticalPathParams { delay: base_delay, ..OpticalPathParams::default() };
        let g0 = max_weight(&mzm, &path);
        let wanted = Complex64::from_polar(frac * g0, phase);
        let settings = weights_to_settings(wanted, &mzm, &path, FC).unwrap();

        let x = fm(15, 4096);
        let sig = channel_signal(&x, &mzm, &path, &settings, FidelityMode::Linearized).unwrap();
        let det = combine_and_detect(&[sig], &PdParams::default()).unwrap();
        let target = apply_propagation_delay(&x, base_delay).unwrap();
        let fit = solve_aligned(&det, &[target]).unwrap().weights[0] / PdParams::default().responsivity;
        prop_assert!((fit / wanted - 1.0).norm() < 0.01, "fit {} wanted {}", fit, wanted);
    }
}
