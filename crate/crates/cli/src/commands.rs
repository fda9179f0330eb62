use std::fmt::Write as _;
use std::fs::File;
use std::path::Path;

use qkdbench_core::decoy::{
    self, attenuation_range, cutoff_attenuation, model_observables, optimize_intensities, write_sweep_csv, ErrorModel,
    GridSpec, KeyRateReport, SWEEP_CSV_HEADER,
};
use qkdbench_core::model::{load_config, ClassLabel, Config};
use qkdbench_core::montecarlo::{run, RunOptions};
use qkdbench_core::sidechannel::{
    self, leakage, leakage_debit, load_profiles, remove_pedestal, synth_profiles, LeakageBudget, PulseProfile,
    SynthSpec,
};
use qkdbench_core::timetag::{self, analyze_stream, read_alice_log, read_ttag_file, write_alice_log, StreamSidecar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::output::{sibling, write_atomic};
use crate::{AnalyzeArgs, Failure, Format, OptimizeArgs, SidechannelArgs, SimulateArgs, SweepArgs};

fn config(path: Option<&Path>) -> Result<Config, Failure> {
    match path {
        Some(p) => load_config(p).map_err(|e| Failure::Usage(e.to_string())),
        None => Ok(Config::default()),
    }
}

fn seed_or_random(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = rand::random();
        eprintln!("seed = {s}");
        s
    })
}

fn sweep_text(reports: &[KeyRateReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>8} {:>11} {:>11} {:>11} {:>11} {:>11} {:>11} {:>11} {:>12} {:>12}",
        "att_dB", "Q_mu", "Q_nu1", "Q_nu2", "E_mu", "Y1_lower", "Q1_lower", "e1_upper", "RKR_bps", "LBSKR_bps"
    );
    for r in reports {
        let (o, e) = (&r.observables, &r.estimates);
        let _ = writeln!(
            s,
            "{:>8.2} {:>11.4e} {:>11.4e} {:>11.4e} {:>11.4e} {:>11.4e} {:>11.4e} {:>11.4e} {:>12.4e} {:>12.4e}",
            r.attenuation_db.unwrap_or(f64::NAN),
            o.q_mu,
            o.q_nu1,
            o.q_nu2,
            o.e_mu,
            e.y1_lower,
            e.q1_lower,
            e.e1_upper,
            r.raw_key_rate_bps,
            r.secure_key_rate_bps
        );
    }
    s
}

pub fn sweep(args: &SweepArgs) -> Result<(), Failure> {
    let c = config(args.config.as_deref())?;
    if !(args.atten_step > 0.0) || args.atten_max < args.atten_min {
        return Err(Failure::Usage(
            "need --atten-step > 0 and --atten-max >= --atten-min".into(),
        ));
    }
    let atts = attenuation_range(args.atten_min, args.atten_max, args.atten_step);
    let reports = decoy::sweep(&c.link, &atts, &c.source, &c.protocol).map_err(|e| Failure::Usage(e.to_string()))?;
    let bytes = match args.format {
        Format::Csv => {
            let mut buf = Vec::new();
            write_sweep_csv(&reports, &mut buf).map_err(|e| Failure::Io(e.to_string()))?;
            buf
        }
        Format::Text => sweep_text(&reports).into_bytes(),
    };
    write_atomic(args.out.as_deref(), &bytes)?;
    match cutoff_attenuation(&reports) {
        Some(att) => eprintln!("QBER exceeds {} at {att} dB", decoy::QBER_CUTOFF),
        None => eprintln!("QBER stays below {} over the sweep", decoy::QBER_CUTOFF),
    }
    Ok(())
}

pub fn simulate(args: &SimulateArgs) -> Result<(), Failure> {
    let c = config(args.config.as_deref())?;
    if args.frames == 0 {
        return Err(Failure::Usage("--frames must be >= 1".into()));
    }
    let link = match args.atten {
        Some(a) => c.link.with_attenuation(a),
        None => c.link.clone(),
    };
    let seed = seed_or_random(args.seed);
    let options = RunOptions {
        emit_ttags: args.emit_ttags,
        ..RunOptions::new(args.frames, seed)
    };
    let out = run(&c.source, &link, &options).map_err(|e| Failure::Usage(e.to_string()))?;
    write_atomic(Some(&args.out), out.summary.to_toml_string().as_bytes())?;

    if let Some(stream) = &out.stream {
        let ttag = sibling(&args.out, "ttag");
        let bytes = timetag::encode(&stream.records).map_err(|e| Failure::Io(e.to_string()))?;
        write_atomic(Some(&ttag), &bytes)?;
        write_atomic(
            Some(&sibling(&args.out, "sidecar.toml")),
            stream.sidecar.to_toml_string().as_bytes(),
        )?;
        let mut alice = Vec::new();
        write_alice_log(&mut alice, &stream.alice_log).map_err(|e| Failure::Io(e.to_string()))?;
        write_atomic(Some(&sibling(&args.out, "alice.csv")), &alice)?;
        if stream.sidecar.dropped_records > 0 {
            eprintln!(
                "timetagger cap dropped {} records ({:.3e} cps recorded)",
                stream.sidecar.dropped_records,
                stream.record_rate_cps(c.source.pulse_period_s())
            );
        }
    }

    let analytic = model_observables(&c.source, &link, ErrorModel::WithSource);
    let s = &out.summary;
    println!(
        "{:<8} {:>10} {:>12} {:>12} {:>12} {:>8}",
        "class", "sent", "gain_mc", "gain_model", "delta", "z"
    );
    for (class, q) in [
        (ClassLabel::Signal, analytic.q_mu),
        (ClassLabel::Decoy1, analytic.q_nu1),
        (ClassLabel::Decoy2, analytic.q_nu2),
    ] {
        let counts = s.class(class);
        let Some(gain) = counts.gain() else {
            println!("{:<8} {:>10} {:>12}", class.label(), 0, "-");
            continue;
        };
        let sd = (q * (1.0 - q) / counts.sent as f64).sqrt();
        println!(
            "{:<8} {:>10} {:>12.5e} {:>12.5e} {:>12.3e} {:>8.2}",
            class.label(),
            counts.sent,
            gain,
            q,
            gain - q,
            if sd > 0.0 { (gain - q) / sd } else { 0.0 }
        );
    }
    for (class, e) in [
        (ClassLabel::Signal, analytic.e_mu),
        (ClassLabel::Decoy1, analytic.e_nu1),
    ] {
        let counts = s.class(class);
        if let Some(qber) = counts.qber() {
            let sd = (e * (1.0 - e) / counts.sifted as f64).sqrt();
            println!(
                "E_{:<6} {:>10} {:>12.5e} {:>12.5e} {:>12.3e} {:>8.2}",
                class.label(),
                counts.sifted,
                qber,
                e,
                qber - e,
                if sd > 0.0 { (qber - e) / sd } else { 0.0 }
            );
        }
    }
    Ok(())
}

pub fn analyze_ttags(args: &AnalyzeArgs) -> Result<(), Failure> {
    let c = config(args.config.as_deref())?;
    let input = |p: &Path, e: &dyn std::fmt::Display| Failure::Usage(format!("{}: {e}", p.display()));

    let decoded = read_ttag_file(&args.ttag).map_err(|e| input(&args.ttag, &e))?;
    if decoded.non_monotonic > 0 {
        log::warn!("{} non-monotonic records", decoded.non_monotonic);
    }
    let sidecar_path = args
        .sidecar
        .clone()
        .unwrap_or_else(|| sibling(&args.ttag, "sidecar.toml"));
    let sidecar_text = std::fs::read_to_string(&sidecar_path).map_err(|e| input(&sidecar_path, &e))?;
    let sidecar = StreamSidecar::from_toml_str(&sidecar_text).map_err(|e| input(&sidecar_path, &e))?;
    let alice_path = args.alice.clone().unwrap_or_else(|| sibling(&args.ttag, "alice.csv"));
    let alice_file = File::open(&alice_path).map_err(|e| input(&alice_path, &e))?;
    let alice = read_alice_log(alice_file).map_err(|e| input(&alice_path, &e))?;

    let window_s = args.window_ns.map_or(c.link.gating_window_s, |ns| ns * 1e-9);
    if !(window_s > 0.0) {
        return Err(Failure::Usage("--window-ns must be > 0".into()));
    }
    let window = timetag::window_ticks(window_s).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed_or_random(args.seed));
    let a = analyze_stream(
        &decoded.records,
        &alice,
        &sidecar,
        window,
        c.source.pulse_period_s(),
        &c.source.intensities(),
        c.link.e0,
        &c.protocol,
        &mut rng,
    )
    .map_err(|e| input(&args.ttag, &e))?;
    if a.phase.low_confidence {
        log::warn!(
            "phase histogram contrast {:.2} is low; the stream may carry no pulse structure",
            a.phase.contrast
        );
    }
    for class in &a.undefined_qber {
        log::warn!("no sifted {} detections; its QBER is set to 0.5", class.label());
    }

    let sent = sidecar.sent();
    let mut text = String::new();
    match args.format {
        Format::Csv => {
            let _ = writeln!(text, "class,sent,detections,sifted,errors,gain,qber");
            for class in ClassLabel::ALL {
                let s = a.sifted.class(class);
                let n = sent[class.index()];
                let gain = if n > 0 {
                    s.detections as f64 / n as f64
                } else {
                    f64::NAN
                };
                let qber = s.qber().unwrap_or(f64::NAN);
                let _ = writeln!(
                    text,
                    "{},{n},{},{},{},{gain:e},{qber:e}",
                    class.label(),
                    s.detections,
                    s.sifted,
                    s.errors
                );
            }
        }
        Format::Text => {
            let _ = writeln!(text, "phase_ticks = {}", a.phase.phase);
            let _ = writeln!(text, "phase_contrast = {:.3}", a.phase.contrast);
            let _ = writeln!(text, "window_ticks = {window}");
            let _ = writeln!(text, "accepted = {}", a.accepted);
            let _ = writeln!(text, "rejected = {}", a.rejected);
            let _ = writeln!(text, "collisions = {}", a.sifted.collisions);
            let _ = writeln!(text, "unmatched = {}", a.sifted.unmatched);
            let _ = writeln!(text, "sifted_bits = {}", a.sifted.len());
            let _ = writeln!(text, "sifted_rate_bps = {:e}", a.sifted_rate_bps);
            for class in ClassLabel::ALL {
                let s = a.sifted.class(class);
                let qber = s.qber().map_or("undefined".to_string(), |q| format!("{q:e}"));
                let _ = writeln!(text, "qber_{} = {qber}", class.label());
            }
            let o = &a.observables;
            let _ = writeln!(
                text,
                "Q_mu = {:e}\nQ_nu1 = {:e}\nQ_nu2 = {:e}",
                o.q_mu, o.q_nu1, o.q_nu2
            );
            match &a.report {
                Some(r) => {
                    let e = &r.estimates;
                    let _ = writeln!(text, "Y0 = {:e}", e.y0);
                    let _ = writeln!(text, "Y1_lower = {:e}", e.y1_lower);
                    let _ = writeln!(text, "Q1_lower = {:e}", e.q1_lower);
                    let _ = writeln!(text, "e1_upper = {:e}", e.e1_upper);
                    let _ = writeln!(text, "rkr_bps = {:e}", r.raw_key_rate_bps);
                    let _ = writeln!(text, "lbskr_bps = {:e}", r.secure_key_rate_bps);
                }
                None => {
                    let _ = writeln!(text, "lbskr_bps = undefined (degenerate intensities)");
                }
            }
        }
    }
    write_atomic(args.out.as_deref(), text.as_bytes())
}

fn vec4(flag: &str, v: &Option<Vec<f64>>, scale: f64) -> Result<[f64; 4], Failure> {
    match v.as_deref() {
        None => Ok([0.0; 4]),
        Some(&[h, v, d, a]) => Ok([h * scale, v * scale, d * scale, a * scale]),
        Some(other) => Err(Failure::Usage(format!(
            "--{flag} takes 4 comma-separated values (H,V,D,A), got {}",
            other.len()
        ))),
    }
}

fn profile_leakage(profiles: &[PulseProfile], prior: &[f64], edge_bins: Option<usize>) -> Result<f64, Failure> {
    let cleaned: Vec<PulseProfile>;
    let used = match edge_bins {
        Some(k) => {
            cleaned = profiles.iter().map(|p| remove_pedestal(p, k)).collect();
            &cleaned
        }
        None => profiles,
    };
    leakage(used, prior).map_err(|e| Failure::Usage(e.to_string()))
}

pub fn sidechannel(args: &SidechannelArgs) -> Result<(), Failure> {
    let c = config(args.config.as_deref())?;
    let prior = c.source.polarization_probs.to_vec();
    if !(args.spatial >= 0.0) {
        return Err(Failure::Usage("--spatial must be >= 0".into()));
    }

    let (temporal, spectral) = if args.synth {
        let spec = SynthSpec {
            fwhm_s: args.fwhm_ps * 1e-12,
            tbp: args.tbp,
            ase_pedestal: vec4("pedestal", &args.pedestal, 1.0)?,
            time_shifts_s: vec4("time-shift-ps", &args.time_shift_ps, 1e-12)?,
            freq_shifts_hz: vec4("freq-shift-ghz", &args.freq_shift_ghz, 1e9)?,
            ..SynthSpec::default()
        };
        let (t, f) = synth_profiles(&spec).map_err(|e| Failure::Usage(e.to_string()))?;
        (Some(t), Some(f))
    } else {
        let load = |p: &Option<std::path::PathBuf>| -> Result<Option<Vec<PulseProfile>>, Failure> {
            p.as_ref()
                .map(|p| load_profiles(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display()))))
                .transpose()
        };
        (load(&args.profiles)?, load(&args.spectral_profiles)?)
    };
    if temporal.is_none() && spectral.is_none() {
        return Err(Failure::Usage(
            "give --profiles and/or --spectral-profiles, or --synth".into(),
        ));
    }
    let i_t = match &temporal {
        Some(p) => profile_leakage(p, &prior, args.remove_pedestal)?,
        None => 0.0,
    };
    let i_f = match &spectral {
        Some(p) => profile_leakage(p, &prior, args.remove_pedestal)?,
        None => 0.0,
    };
    let budget = LeakageBudget::new(i_t, i_f, args.spatial);

    if let Some(report_path) = &args.report {
        let bytes = adjust_sweep_csv(report_path, &budget, &c)?;
        eprint!("{}", budget.to_text());
        return write_atomic(args.out.as_deref(), &bytes);
    }

    let mut text = String::new();
    let model = args
        .config
        .is_some()
        .then(|| decoy::model_report(&c.source, &c.link, &c.protocol))
        .transpose()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    match args.format {
        Format::Text => {
            text.push_str(&budget.to_text());
            if let Some(r) = &model {
                let _ = writeln!(text, "attenuation_db = {}", c.link.attenuation_db);
                let _ = writeln!(text, "lbskr_bps = {:e}", r.secure_key_rate_bps);
                let _ = writeln!(
                    text,
                    "leakage_adjusted_bps = {:e}",
                    sidechannel::leakage_adjusted_rate(r, &budget, &c.protocol)
                );
            }
        }
        Format::Csv => {
            let _ = writeln!(
                text,
                "I_temporal,I_spectral,I_spatial,I_total,lbskr_bps,leakage_adjusted_bps"
            );
            let (r, adj) = match &model {
                Some(r) => (
                    r.secure_key_rate_bps,
                    sidechannel::leakage_adjusted_rate(r, &budget, &c.protocol),
                ),
                None => (f64::NAN, f64::NAN),
            };
            let _ = writeln!(
                text,
                "{:e},{:e},{:e},{:e},{r:e},{adj:e}",
                budget.temporal, budget.spectral, budget.spatial, budget.total
            );
        }
    }
    write_atomic(args.out.as_deref(), text.as_bytes())
}

/// Copy a sweep CSV, appending a `leakage_adjusted_bps` column.
fn adjust_sweep_csv(path: &Path, budget: &LeakageBudget, c: &Config) -> Result<Vec<u8>, Failure> {
    let bad = |e: &dyn std::fmt::Display| Failure::Usage(format!("{}: {e}", path.display()));
    let mut rdr = csv::Reader::from_path(path).map_err(|e| bad(&e))?;
    let headers = rdr.headers().map_err(|e| bad(&e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| bad(&format!("missing column {name}")))
    };
    let (q_col, r_col) = (col(SWEEP_CSV_HEADER[1])?, col(SWEEP_CSV_HEADER[9])?);
    let mut out = csv::Writer::from_writer(Vec::new());
    let mut header = headers.clone();
    header.push_field("leakage_adjusted_bps");
    out.write_record(&header).map_err(|e| Failure::Io(e.to_string()))?;
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| bad(&e))?;
        let number = |k: usize| -> Result<f64, Failure> {
            record
                .get(k)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| bad(&format!("row {}: column {k} is not a number", i + 1)))
        };
        let (q_mu, rate) = (number(q_col)?, number(r_col)?);
        let adjusted = (rate - leakage_debit(q_mu, budget, &c.protocol)).clamp(0.0, rate.max(0.0));
        let mut row = record.clone();
        row.push_field(&format!("{adjusted:e}"));
        out.write_record(&row).map_err(|e| Failure::Io(e.to_string()))?;
    }
    out.into_inner().map_err(|e| Failure::Io(e.to_string()))
}

pub fn optimize(args: &OptimizeArgs) -> Result<(), Failure> {
    let c = config(args.config.as_deref())?;
    if !(args.step > 0.0 && args.step < 1.0) {
        return Err(Failure::Usage("--step must be in (0, 1)".into()));
    }
    let best = optimize_intensities(&c.source, &c.link, &c.protocol, &GridSpec::uniform(args.step))
        .map_err(|e| Failure::Usage(e.to_string()))?;
    if best.no_positive_rate {
        log::warn!("no grid point gives a positive key rate");
    }
    let text = format!(
        "attenuation_db = {}\nstep = {}\nmu = {}\nnu1 = {}\nnu2 = 0\nlbskr_bps = {:e}\nno_positive_rate = {}\n",
        c.link.attenuation_db, args.step, best.mu, best.nu1, best.rate_bps, best.no_positive_rate
    );
    write_atomic(args.out.as_deref(), text.as_bytes())
}
