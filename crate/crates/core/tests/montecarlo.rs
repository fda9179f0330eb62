use qkdbench_core::decoy::{model_observables, ErrorModel};
use qkdbench_core::model::{ClassLabel, GainConvention, LinkConfig, SourceConfig, TICK_SECONDS};
use qkdbench_core::montecarlo::{estimate_observables, run, RunError, RunOptions};
use qkdbench_core::timetag::{gate, in_window, recover_phase, window_ticks};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sigma(p: f64, n: u64) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

#[test]
fn zero_frames_rejected() {
    let r = run(&SourceConfig::default(), &LinkConfig::default(), &RunOptions::new(0, 1));
    assert_eq!(r.unwrap_err(), RunError::NoFrames);
}

#[test]
fn gains_agree_with_model_on_random_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..20 {
        let mu = rng.random_range(0.1..1.0);
        let source = SourceConfig {
            mu,
            nu1: mu * rng.random_range(0.05..0.5),
            nu2: 0.0,
            dop: rng.random_range(0.9..1.0),
            ..SourceConfig::default()
        };
        let link = LinkConfig {
            attenuation_db: rng.random_range(0.0..20.0),
            y0: 10f64.powf(rng.random_range(-6.0..-2.0)),
            e_det: rng.random_range(0.0..0.05),
            gain_convention: if rng.random_bool(0.5) {
                GainConvention::FullBudget
            } else {
                GainConvention::AttenuationOnly
            },
            ..LinkConfig::default()
        };
        let out = run(&source, &link, &RunOptions::new(400_000, case)).unwrap();
        let analytic = model_observables(&source, &link, ErrorModel::WithSource);
        for (class, q) in [
            (ClassLabel::Signal, analytic.q_mu),
            (ClassLabel::Decoy1, analytic.q_nu1),
        ] {
            let c = out.summary.class(class);
            let got = c.gain().unwrap();
            assert!(
                (got - q).abs() <= 4.0 * sigma(q, c.sent),
                "case {case} {class:?}: {got} vs {q}"
            );
        }
    }
}

#[test]
fn background_only_channel() {
    let source = SourceConfig::default();
    let link = LinkConfig {
        attenuation_db: 300.0,
        y0: 1e-2,
        background_suppression: Some(0.5),
        ..LinkConfig::default()
    };
    let n = 2_000_000;
    let out = run(&source, &link, &RunOptions::new(n, 4)).unwrap();
    let s = &out.summary;
    let detected: u64 = ClassLabel::ALL.iter().map(|&c| s.class(c).detected).sum();
    let p = 5e-3;
    let gain = detected as f64 / n as f64;
    assert!((gain - p).abs() <= 3.0 * sigma(p, n), "{gain}");
    let sifted: u64 = ClassLabel::ALL.iter().map(|&c| s.class(c).sifted).sum();
    let errors: u64 = ClassLabel::ALL.iter().map(|&c| s.class(c).errors).sum();
    let e = errors as f64 / sifted as f64;
    assert!((e - 0.5).abs() <= 3.0 * sigma(0.5, sifted), "{e}");
    // Half the detections land in the matching basis.
    let frac = sifted as f64 / detected as f64;
    assert!((frac - 0.5).abs() <= 3.0 * sigma(0.5, detected), "{frac}");
}

#[test]
fn full_window_without_jitter_keeps_everything() {
    let source = SourceConfig::default();
    let link = LinkConfig {
        attenuation_db: 3.0,
        jitter_sigma_s: 0.0,
        gating_window_s: source.pulse_period_s(),
        ttag_cap_cps: None,
        ..LinkConfig::default()
    };
    let options = RunOptions {
        emit_ttags: true,
        ..RunOptions::new(300_000, 5)
    };
    let out = run(&source, &link, &options).unwrap();
    let stream = out.stream.unwrap();
    let detected: u64 = ClassLabel::ALL.iter().map(|&c| out.summary.class(c).detected).sum();
    assert_eq!(stream.records.len() as u64, detected);
    let period = stream.sidecar.period_ticks;
    let g = gate(&stream.records, period, stream.sidecar.phase_ticks, period);
    assert_eq!(g.rejected, 0);
}

fn gated_counts(window_s: f64, jitter_sigma_s: f64, attenuation_db: f64, y0: f64, seed: u64) -> (f64, u64) {
    let source = SourceConfig::default();
    let link = LinkConfig {
        attenuation_db,
        y0,
        jitter_sigma_s,
        background_suppression: Some(1.0),
        ttag_cap_cps: None,
        ..LinkConfig::default()
    };
    let frames = 1_000_000;
    let options = RunOptions {
        emit_ttags: true,
        ..RunOptions::new(frames, seed)
    };
    let stream = run(&source, &link, &options).unwrap().stream.unwrap();
    let period = stream.sidecar.period_ticks;
    let phase = recover_phase(&stream.records, period).unwrap().phase;
    let g = gate(&stream.records, period, phase, window_ticks(window_s));
    (g.accepted.len() as f64, frames)
}

#[test]
fn gated_background_scales_with_window() {
    // No signal reaches Bob; the stream carries background spread over the
    // whole period at y0 * period / window per frame.
    let y0 = 2e-3;
    let emitted_window = 13.0;
    let period = 128.0;
    let per_frame = y0 * period / emitted_window;
    for window_ns in [0.5, 1.0, 2.0, 4.0] {
        let source = SourceConfig::default();
        let link = LinkConfig {
            attenuation_db: 400.0,
            y0,
            background_suppression: Some(1.0),
            ttag_cap_cps: None,
            ..LinkConfig::default()
        };
        let options = RunOptions {
            emit_ttags: true,
            ..RunOptions::new(1_000_000, 77)
        };
        let stream = run(&source, &link, &options).unwrap().stream.unwrap();
        let w = window_ticks(window_ns * 1e-9);
        // Background has no peak to lock to, so gate at the emitted phase.
        let g = gate(&stream.records, 128, stream.sidecar.phase_ticks, w);
        let p = per_frame * w as f64 / period;
        let n = 1_000_000;
        let got = g.accepted.len() as f64 / n as f64;
        assert!(
            (got - p).abs() <= 3.0 * sigma(p, n),
            "window {window_ns} ns: {got} vs {p}"
        );
    }
}

#[test]
fn signal_acceptance_follows_jitter_integral() {
    let jitter = 300e-12;
    let (accepted, frames) = gated_counts(1e-9, jitter, 0.0, 0.0, 88);
    let (total, _) = gated_counts(128.0 * TICK_SECONDS, jitter, 0.0, 0.0, 88);
    // Probability that a Gaussian offset rounds to a residual inside the window.
    let w = window_ticks(1e-9);
    let sigma_ticks = jitter / TICK_SECONDS;
    let cdf = |x: f64| 0.5 * (1.0 + erf(x / (sigma_ticks * 2f64.sqrt())));
    let mut p = 0.0;
    for k in -64i64..64 {
        let r = k.rem_euclid(128) as u64;
        if in_window(r, 128, w) {
            p += cdf(k as f64 + 0.5) - cdf(k as f64 - 0.5);
        }
    }
    let frac = accepted / total;
    let sd = sigma(p, total as u64);
    assert!((frac - p).abs() <= 3.0 * sd, "{frac} vs {p} ({frames} frames)");
}

// Power series below 3, continued fraction for the tail.
fn erf(x: f64) -> f64 {
    if x < 0.0 {
        return -erf(-x);
    }
    if x < 3.0 {
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0;
        loop {
            n += 1.0;
            term *= -x * x / n;
            let add = term / (2.0 * n + 1.0);
            sum += add;
            if add.abs() < 1e-17 {
                break;
            }
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    } else {
        let mut f = 0.0;
        for k in (1..60).rev() {
            f = (k as f64 / 2.0) / (x + f);
        }
        1.0 - (-x * x).exp() / (std::f64::consts::PI.sqrt() * (x + f))
    }
}

#[test]
fn same_seed_is_deterministic() {
    let source = SourceConfig::default();
    let link = LinkConfig::default().with_attenuation(6.0);
    let options = RunOptions {
        emit_ttags: true,
        ..RunOptions::new(200_000, 99)
    };
    let a = run(&source, &link, &options).unwrap();
    let b = run(&source, &link, &options).unwrap();
    let mut sa = a.summary.clone();
    let mut sb = b.summary.clone();
    sa.elapsed_s = 0.0;
    sb.elapsed_s = 0.0;
    assert_eq!(sa, sb);
    assert_eq!(a.stream.unwrap().records, b.stream.unwrap().records);
}

#[test]
fn estimated_observables_match_analytic_qber() {
    let source = SourceConfig {
        mu: 0.5,
        nu1: 0.066,
        nu2: 0.002,
        ..SourceConfig::default()
    };
    let link = LinkConfig::default().with_attenuation(6.0);
    let out = run(&source, &link, &RunOptions::new(3_000_000, 12)).unwrap();
    let est = estimate_observables(&out.summary).unwrap();
    let analytic = model_observables(&source, &link, ErrorModel::WithSource);
    let n = out.summary.signal.sifted;
    assert!((est.observables.e_mu - analytic.e_mu).abs() <= 4.0 * sigma(analytic.e_mu, n));
}
