//! Analytic decoy-state BB84 model.
//!
//! Gains and QBERs follow the usual Poisson-source model
//! `Q = Y₀ + 1 − e^{−ηn}`, `E·Q = e₀Y₀ + e_det(1 − e^{−ηn})`. The single-photon
//! quantities are bounded with the vacuum + weak decoy estimates and folded
//! into the asymptotic lower bound
//!
//! ```text
//! R ≥ q·(N_μ/t)·[−Q_μ f(E_μ) H₂(E_μ) + Q₁ (1 − H₂(e₁))]
//! ```
//!
//! All bounds clamp to their physical ranges instead of failing on noisy
//! input; [`DecoyEstimates::clamped`] records when that happened.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::entropy::h2_unchecked;
use crate::model::{GainConvention, Intensities, LinkConfig, ProtocolConfig, SourceConfig};

/// Signal QBER above which no secret key can be distilled.
pub const QBER_CUTOFF: f64 = 0.11;

#[derive(Debug, Error, PartialEq)]
pub enum DecoyError {
    #[error("degenerate intensities: need mu > nu1 > 0 (mu = {mu}, nu1 = {nu1})")]
    DegenerateIntensities { mu: f64, nu1: f64 },
    #[error("single-photon error bound undefined: Y1 lower bound is zero")]
    UndefinedBound,
    #[error("empty intensity grid")]
    EmptyGrid,
}

/// Transmittance of the link in linear units.
pub fn transmittance(link: &LinkConfig, include_detector: bool) -> f64 {
    let optical = 10f64.powf(-(link.attenuation_db + link.setup_loss_db) / 10.0);
    if include_detector {
        optical * link.detector_efficiency
    } else {
        optical
    }
}

/// Transmittance used for gains under the link's [`GainConvention`].
pub fn channel_eta(link: &LinkConfig) -> f64 {
    match link.gain_convention {
        GainConvention::AttenuationOnly => 10f64.powf(-link.attenuation_db / 10.0),
        GainConvention::FullBudget => transmittance(link, true),
    }
}

/// Detection probability per pulse of mean photon number `mean_photons`.
pub fn gain(mean_photons: f64, eta: f64, y0: f64) -> f64 {
    y0 + detection_probability(mean_photons, eta)
}

/// Error rate among detections of pulses with mean photon number `mean_photons`.
pub fn qber(mean_photons: f64, eta: f64, y0: f64, e0: f64, e_det: f64) -> f64 {
    let q = gain(mean_photons, eta, y0);
    if q <= 0.0 {
        return 0.0;
    }
    (e0 * y0 + e_det * detection_probability(mean_photons, eta)) / q
}

/// 1 − e^{−η·n}
fn detection_probability(mean_photons: f64, eta: f64) -> f64 {
    -(-eta * mean_photons).exp_m1()
}

/// Measured or modeled channel observables for one link setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChannelObservables {
    pub q_mu: f64,
    pub q_nu1: f64,
    pub q_nu2: f64,
    pub e_mu: f64,
    pub e_nu1: f64,
    /// Overall transmittance, when known.
    pub eta: Option<f64>,
}

/// Which intrinsic error terms the analytic model includes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ErrorModel {
    /// e_det only.
    #[default]
    DetectorOnly,
    /// e_det plus the source polarization error (1 − DOP)/2, as the Monte
    /// Carlo applies it.
    WithSource,
}

/// Observables predicted by the analytic model for a source/link pair.
pub fn model_observables(source: &SourceConfig, link: &LinkConfig, errors: ErrorModel) -> ChannelObservables {
    let eta = channel_eta(link);
    let y0 = link.effective_y0(source.pulse_period_s());
    let e_int = match errors {
        ErrorModel::DetectorOnly => link.e_det,
        ErrorModel::WithSource => link.e_det + source.source_error(),
    };
    ChannelObservables {
        q_mu: gain(source.mu, eta, y0),
        q_nu1: gain(source.nu1, eta, y0),
        q_nu2: gain(source.nu2, eta, y0),
        e_mu: qber(source.mu, eta, y0, link.e0, e_int),
        e_nu1: qber(source.nu1, eta, y0, link.e0, e_int),
        eta: Some(eta),
    }
}

/// A bound value and whether it had to be clamped into range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bound {
    pub value: f64,
    pub clamped: bool,
}

fn clamp(value: f64, lo: f64, hi: f64) -> Bound {
    if value.is_nan() {
        return Bound {
            value: lo,
            clamped: true,
        };
    }
    let clamped = value.clamp(lo, hi);
    Bound {
        value: clamped,
        clamped: clamped != value,
    }
}

/// Lower bound on the single-photon yield from the signal and weak decoy gains.
pub fn y1_lower(obs: &ChannelObservables, mu: f64, nu1: f64, y0: f64) -> Result<Bound, DecoyError> {
    if !(mu > nu1 && nu1 > 0.0) {
        return Err(DecoyError::DegenerateIntensities { mu, nu1 });
    }
    let mu2 = mu * mu;
    let nu1_2 = nu1 * nu1;
    let raw = mu / (mu * nu1 - nu1_2)
        * (obs.q_nu1 * nu1.exp() - obs.q_mu * mu.exp() * nu1_2 / mu2 - (mu2 - nu1_2) / mu2 * y0);
    Ok(clamp(raw, 0.0, 1.0))
}

/// Upper bound on the single-photon error rate.
pub fn e1_upper(obs: &ChannelObservables, y1_lower: f64, nu1: f64, y0: f64, e0: f64) -> Result<Bound, DecoyError> {
    if !(y1_lower > 0.0) || !(nu1 > 0.0) {
        return Err(DecoyError::UndefinedBound);
    }
    let raw = (obs.e_nu1 * obs.q_nu1 * nu1.exp() - e0 * y0) / (y1_lower * nu1);
    Ok(clamp(raw, 0.0, 0.5))
}

/// Background yield estimated from the weakest decoy.
///
/// Solves `Q_ν2 = Y₀ + 1 − e^{−ν₂η}` and `Q_μ = Y₀ + 1 − e^{−μη}` by fixed-point
/// iteration starting from Y₀ = 0. Falls back to the conservative `Q_ν2`
/// when the signal gain does not determine η.
pub fn estimate_y0(obs: &ChannelObservables, intensities: &Intensities) -> f64 {
    let Intensities { mu, nu2, .. } = *intensities;
    if nu2 <= 0.0 {
        return obs.q_nu2.max(0.0);
    }
    let mut y0 = 0.0;
    for _ in 0..64 {
        let signal = obs.q_mu - y0;
        if !(signal > 0.0 && signal < 1.0) || !(mu > 0.0) {
            return obs.q_nu2.max(0.0);
        }
        let eta = -(-signal).ln_1p() / mu;
        let next = (obs.q_nu2 - detection_probability(nu2, eta)).max(0.0);
        if (next - y0).abs() <= 1e-15 {
            return next;
        }
        y0 = next;
    }
    y0
}

/// Single-photon estimates derived from observables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecoyEstimates {
    /// Background yield used in the bounds.
    pub y0: f64,
    pub y1_lower: f64,
    /// μ e^{−μ} Y₁ᴸ
    pub q1_lower: f64,
    pub e1_upper: f64,
    pub clamped: bool,
}

/// Estimate Y₀ from the weakest decoy, then bound Y₁ and e₁.
pub fn estimate_decoy(
    obs: &ChannelObservables,
    intensities: &Intensities,
    e0: f64,
) -> Result<DecoyEstimates, DecoyError> {
    let y0 = estimate_y0(obs, intensities);
    decoy_estimates_with_y0(obs, intensities, e0, y0)
}

/// Same as [`estimate_decoy`] with a known background yield.
pub fn decoy_estimates_with_y0(
    obs: &ChannelObservables,
    intensities: &Intensities,
    e0: f64,
    y0: f64,
) -> Result<DecoyEstimates, DecoyError> {
    let Intensities { mu, nu1, .. } = *intensities;
    let y1 = y1_lower(obs, mu, nu1, y0)?;
    let e1 = match e1_upper(obs, y1.value, nu1, y0, e0) {
        Ok(b) => b,
        Err(DecoyError::UndefinedBound) => Bound {
            value: 0.5,
            clamped: true,
        },
        Err(e) => return Err(e),
    };
    Ok(DecoyEstimates {
        y0,
        y1_lower: y1.value,
        q1_lower: mu * (-mu).exp() * y1.value,
        e1_upper: e1.value,
        clamped: y1.clamped || e1.clamped,
    })
}

/// Key-rate budget for one operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KeyRateReport {
    pub attenuation_db: Option<f64>,
    pub observables: ChannelObservables,
    pub estimates: DecoyEstimates,
    /// q·(N_μ/t)·Q_μ (bits/s)
    pub raw_key_rate_bps: f64,
    /// Lower-bound secure key rate (bits/s), clamped at zero.
    pub secure_key_rate_bps: f64,
    /// Secure rate after the side-channel debit; equals the secure rate
    /// until a leakage budget is applied.
    pub leakage_adjusted_bps: f64,
    pub qber_cutoff_hit: bool,
}

/// Lower-bound secure key rate.
pub fn key_rate_lower_bound(obs: &ChannelObservables, est: &DecoyEstimates, proto: &ProtocolConfig) -> KeyRateReport {
    let rate = proto.sifting_q * proto.signal_rate();
    let raw_key_rate_bps = rate * obs.q_mu;
    let e_mu = obs.e_mu.clamp(0.0, 1.0);
    let qber_cutoff_hit = obs.e_mu > QBER_CUTOFF;
    let secure = if qber_cutoff_hit {
        0.0
    } else {
        let f = proto.ec_efficiency.at(e_mu);
        let per_pulse =
            -obs.q_mu * f * h2_unchecked(e_mu) + est.q1_lower * (1.0 - h2_unchecked(est.e1_upper.clamp(0.0, 1.0)));
        (rate * per_pulse).max(0.0)
    };
    KeyRateReport {
        attenuation_db: None,
        observables: *obs,
        estimates: *est,
        raw_key_rate_bps,
        secure_key_rate_bps: secure,
        leakage_adjusted_bps: secure,
        qber_cutoff_hit,
    }
}

/// Observables → decoy estimates → key rate.
pub fn analyze_observables(
    obs: &ChannelObservables,
    intensities: &Intensities,
    e0: f64,
    proto: &ProtocolConfig,
) -> Result<KeyRateReport, DecoyError> {
    let est = estimate_decoy(obs, intensities, e0)?;
    Ok(key_rate_lower_bound(obs, &est, proto))
}

/// Full analytic pipeline for one link setting.
pub fn model_report(
    source: &SourceConfig,
    link: &LinkConfig,
    proto: &ProtocolConfig,
) -> Result<KeyRateReport, DecoyError> {
    let obs = model_observables(source, link, ErrorModel::DetectorOnly);
    let mut report = analyze_observables(&obs, &source.intensities(), link.e0, proto)?;
    report.attenuation_db = Some(link.attenuation_db);
    Ok(report)
}

/// One report per attenuation, in input order.
pub fn sweep(
    link: &LinkConfig,
    attenuations_db: &[f64],
    source: &SourceConfig,
    proto: &ProtocolConfig,
) -> Result<Vec<KeyRateReport>, DecoyError> {
    attenuations_db
        .par_iter()
        .map(|&att| model_report(source, &link.with_attenuation(att), proto))
        .collect()
}

/// Inclusive attenuation grid `min, min+step, …, max`.
pub fn attenuation_range(min_db: f64, max_db: f64, step_db: f64) -> Vec<f64> {
    if !(step_db > 0.0) || max_db < min_db {
        return if max_db == min_db { vec![min_db] } else { Vec::new() };
    }
    let n = ((max_db - min_db) / step_db + 1e-9).floor() as usize;
    (0..=n).map(|i| min_db + i as f64 * step_db).collect()
}

/// First attenuation in a sweep whose signal QBER exceeds the cutoff.
pub fn cutoff_attenuation(reports: &[KeyRateReport]) -> Option<f64> {
    reports
        .iter()
        .find(|r| r.qber_cutoff_hit)
        .and_then(|r| r.attenuation_db)
}

pub const SWEEP_CSV_HEADER: [&str; 10] = [
    "attenuation_db",
    "Q_mu",
    "Q_nu1",
    "Q_nu2",
    "E_mu",
    "Y1_lower",
    "Q1_lower",
    "e1_upper",
    "rkr_bps",
    "lbskr_bps",
];

/// Write sweep reports as CSV with [`SWEEP_CSV_HEADER`].
pub fn write_sweep_csv<W: Write>(reports: &[KeyRateReport], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_CSV_HEADER)?;
    for r in reports {
        let o = &r.observables;
        let e = &r.estimates;
        w.write_record(
            [
                r.attenuation_db.unwrap_or(f64::NAN),
                o.q_mu,
                o.q_nu1,
                o.q_nu2,
                o.e_mu,
                e.y1_lower,
                e.q1_lower,
                e.e1_upper,
                r.raw_key_rate_bps,
                r.secure_key_rate_bps,
            ]
            .iter()
            .map(|v| format!("{v:e}")),
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Candidate values for the intensity search.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub mu: Vec<f64>,
    /// Decoy candidates; only values strictly below the current μ are used.
    pub nu1: Vec<f64>,
}

impl GridSpec {
    /// μ and ν₁ on `step, 2·step, …` up to 1.
    pub fn uniform(step: f64) -> GridSpec {
        let n = if step > 0.0 {
            (1.0 / step + 1e-9).floor() as usize
        } else {
            0
        };
        let values: Vec<f64> = (1..=n).map(|i| i as f64 * step).collect();
        GridSpec {
            mu: values.clone(),
            nu1: values,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityOptimum {
    pub mu: f64,
    pub nu1: f64,
    pub rate_bps: f64,
    /// No grid point yields a positive rate; the first grid point is reported.
    pub no_positive_rate: bool,
}

/// Grid search for the intensities maximizing the secure rate, with ν₂ = 0.
/// Ties go to the smaller μ.
pub fn optimize_intensities(
    source: &SourceConfig,
    link: &LinkConfig,
    proto: &ProtocolConfig,
    grid: &GridSpec,
) -> Result<IntensityOptimum, DecoyError> {
    let points: Vec<(f64, f64)> = grid
        .mu
        .iter()
        .filter(|&&mu| mu > 0.0 && mu <= 1.0)
        .flat_map(|&mu| {
            grid.nu1
                .iter()
                .filter(move |&&nu1| nu1 > 0.0 && nu1 < mu)
                .map(move |&nu1| (mu, nu1))
        })
        .collect();
    if points.is_empty() {
        return Err(DecoyError::EmptyGrid);
    }
    let rates = points
        .par_iter()
        .map(|&(mu, nu1)| {
            let candidate = SourceConfig {
                mu,
                nu1,
                nu2: 0.0,
                ..source.clone()
            };
            model_report(&candidate, link, proto).map(|r| r.secure_key_rate_bps)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut best = 0;
    for (i, &r) in rates.iter().enumerate() {
        let (mu, _) = points[i];
        let (best_mu, _) = points[best];
        if r > rates[best] || (r == rates[best] && mu < best_mu) {
            best = i;
        }
    }
    let (mu, nu1) = points[best];
    Ok(IntensityOptimum {
        mu,
        nu1,
        rate_bps: rates[best],
        no_positive_rate: !(rates[best] > 0.0),
    })
}
