//! Distinguishability side channels: per-state temporal and spectral pulse
//! profiles, their mutual information with the sent state, and the key-rate
//! debit that leakage implies.

use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::decoy::KeyRateReport;
use crate::entropy::{mi_from_profiles, ConditionalProfiles, EntropyError};
use crate::model::{Polarization, ProtocolConfig};

pub const DEFAULT_BINS: usize = 256;
/// Profiles span ±this many FWHM around the pulse centre.
pub const DEFAULT_SPAN_FWHM: f64 = 3.0;
/// Transform limit of a Gaussian pulse.
pub const GAUSSIAN_TBP: f64 = 0.44;
pub const DEFAULT_SPATIAL_LEAKAGE: f64 = 1e-5;

const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_4;

#[derive(Debug, Error)]
pub enum SideChannelError {
    #[error("profile csv: {0}")]
    Csv(String),
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("missing state column {0}")]
    MissingState(Polarization),
    #[error("profile for state {0} is all zero")]
    ZeroProfile(Polarization),
    #[error("need at least two profiles, got {0}")]
    TooFewProfiles(usize),
    #[error("profiles do not share a common axis")]
    AxisMismatch,
    #[error("time-bandwidth product {0} below the Gaussian transform limit 0.44")]
    BelowTransformLimit(f64),
    #[error("invalid synthesis parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PulseProfile {
    /// Uniformly spaced bin centres (s or Hz).
    pub axis: Vec<f64>,
    /// Raw, unnormalized intensity per bin.
    pub intensity: Vec<f64>,
    pub state: Polarization,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LeakageBudget {
    pub temporal: f64,
    pub spectral: f64,
    pub spatial: f64,
    pub total: f64,
}

impl LeakageBudget {
    pub fn new(temporal: f64, spectral: f64, spatial: f64) -> Self {
        Self {
            temporal,
            spectral,
            spatial,
            total: temporal + spectral + spatial,
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "I_temporal = {:e}\nI_spectral = {:e}\nI_spatial = {:e}\nI_total = {:e}\n",
            self.temporal, self.spectral, self.spatial, self.total
        )
    }
}

const CSV_HEADER: [&str; 5] = ["axis", "stateH", "stateV", "stateD", "stateA"];

/// Read `axis,stateH,stateV,stateD,stateA` rows into four profiles.
pub fn read_profiles<R: Read>(input: R) -> Result<Vec<PulseProfile>, SideChannelError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let headers = rdr.headers().map_err(|e| SideChannelError::Csv(e.to_string()))?.clone();
    let column = |name: &str| headers.iter().position(|h| h.trim() == name);
    let axis_col = column("axis").ok_or_else(|| SideChannelError::Csv("missing `axis` column".into()))?;
    let mut state_cols = [0usize; 4];
    for (i, p) in Polarization::ALL.into_iter().enumerate() {
        state_cols[i] = column(CSV_HEADER[i + 1]).ok_or(SideChannelError::MissingState(p))?;
    }

    let mut axis = Vec::new();
    let mut values: [Vec<f64>; 4] = Default::default();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| SideChannelError::Csv(e.to_string()))?;
        if record.len() != headers.len() {
            return Err(SideChannelError::Row {
                row,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let parse = |col: usize| -> Result<f64, SideChannelError> {
            let field = record[col].trim();
            let v: f64 = field.parse().map_err(|_| SideChannelError::Row {
                row,
                message: format!("`{field}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(SideChannelError::Row {
                    row,
                    message: "non-finite value".into(),
                });
            }
            Ok(v)
        };
        axis.push(parse(axis_col)?);
        for (k, &col) in state_cols.iter().enumerate() {
            let v = parse(col)?;
            if v < 0.0 {
                return Err(SideChannelError::Row {
                    row,
                    message: format!("negative intensity {v} for state {}", Polarization::ALL[k]),
                });
            }
            values[k].push(v);
        }
    }
    Ok(Polarization::ALL
        .into_iter()
        .zip(values)
        .map(|(state, intensity)| PulseProfile {
            axis: axis.clone(),
            intensity,
            state,
        })
        .collect())
}

pub fn load_profiles(path: impl AsRef<Path>) -> Result<Vec<PulseProfile>, SideChannelError> {
    read_profiles(std::fs::File::open(path)?)
}

/// Write four profiles sharing one axis, ordered H, V, D, A.
pub fn write_profiles<W: Write>(out: W, profiles: &[PulseProfile]) -> Result<(), SideChannelError> {
    let ordered: Vec<&PulseProfile> = Polarization::ALL
        .iter()
        .map(|p| {
            profiles
                .iter()
                .find(|q| q.state == *p)
                .ok_or(SideChannelError::MissingState(*p))
        })
        .collect::<Result<_, _>>()?;
    let axis = &ordered[0].axis;
    if ordered
        .iter()
        .any(|p| p.axis != *axis || p.intensity.len() != axis.len())
    {
        return Err(SideChannelError::AxisMismatch);
    }
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| SideChannelError::Csv(e.to_string());
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for (i, x) in axis.iter().enumerate() {
        let row = std::iter::once(*x).chain(ordered.iter().map(|p| p.intensity[i]));
        w.write_record(row.map(|v| format!("{v:e}"))).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Parameters of the synthetic Gaussian pulse fixture.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub fwhm_s: f64,
    pub tbp: f64,
    /// Constant ASE pedestal per state (H, V, D, A), as a fraction of the peak.
    pub ase_pedestal: [f64; 4],
    /// Temporal centre shift per state (s).
    pub time_shifts_s: [f64; 4],
    /// Spectral centre shift per state (Hz).
    pub freq_shifts_hz: [f64; 4],
    pub bins: usize,
    pub span_fwhm: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            fwhm_s: 400e-12,
            tbp: 0.56,
            ase_pedestal: [0.0; 4],
            time_shifts_s: [0.0; 4],
            freq_shifts_hz: [0.0; 4],
            bins: DEFAULT_BINS,
            span_fwhm: DEFAULT_SPAN_FWHM,
        }
    }
}

impl SynthSpec {
    pub fn spectral_fwhm_hz(&self) -> f64 {
        self.tbp / self.fwhm_s
    }
}

fn bin_centres(fwhm: f64, span_fwhm: f64, bins: usize) -> Vec<f64> {
    let half = span_fwhm * fwhm;
    let width = 2.0 * half / bins as f64;
    (0..bins).map(|i| -half + width * (i as f64 + 0.5)).collect()
}

fn gaussian_profiles(axis: &[f64], fwhm: f64, shifts: &[f64; 4], pedestal: &[f64; 4]) -> Vec<PulseProfile> {
    let sigma = fwhm / FWHM_PER_SIGMA;
    Polarization::ALL
        .into_iter()
        .map(|state| {
            let k = state.index();
            let intensity = axis
                .iter()
                .map(|&x| {
                    let d = x - shifts[k];
                    (-d * d / (2.0 * sigma * sigma)).exp() + pedestal[k]
                })
                .collect();
            PulseProfile {
                axis: axis.to_vec(),
                intensity,
                state,
            }
        })
        .collect()
}

/// Temporal and spectral Gaussian profiles for the four states.
pub fn synth_profiles(spec: &SynthSpec) -> Result<(Vec<PulseProfile>, Vec<PulseProfile>), SideChannelError> {
    if !(spec.fwhm_s > 0.0 && spec.fwhm_s.is_finite()) {
        return Err(SideChannelError::InvalidParameter("fwhm must be > 0".into()));
    }
    if !(spec.tbp >= GAUSSIAN_TBP - 1e-12) {
        return Err(SideChannelError::BelowTransformLimit(spec.tbp));
    }
    if spec.bins < 2 || !(spec.span_fwhm > 0.0) {
        return Err(SideChannelError::InvalidParameter(
            "need >= 2 bins and a positive span".into(),
        ));
    }
    if spec.ase_pedestal.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(SideChannelError::InvalidParameter(
            "pedestals must be finite and >= 0".into(),
        ));
    }
    let t_axis = bin_centres(spec.fwhm_s, spec.span_fwhm, spec.bins);
    let temporal = gaussian_profiles(&t_axis, spec.fwhm_s, &spec.time_shifts_s, &spec.ase_pedestal);
    let f_fwhm = spec.spectral_fwhm_hz();
    let f_axis = bin_centres(f_fwhm, spec.span_fwhm, spec.bins);
    let spectral = gaussian_profiles(&f_axis, f_fwhm, &spec.freq_shifts_hz, &spec.ase_pedestal);
    Ok((temporal, spectral))
}

/// Subtract the constant floor estimated from the outermost `edge_bins` on
/// each side, clamping at zero.
pub fn remove_pedestal(profile: &PulseProfile, edge_bins: usize) -> PulseProfile {
    let n = profile.intensity.len();
    let k = edge_bins.clamp(1, (n / 2).max(1));
    let edges = profile.intensity[..k]
        .iter()
        .chain(&profile.intensity[n.saturating_sub(k)..]);
    let floor = edges.clone().sum::<f64>() / edges.count() as f64;
    PulseProfile {
        intensity: profile.intensity.iter().map(|v| (v - floor).max(0.0)).collect(),
        ..profile.clone()
    }
}

/// Mutual information (bits/pulse) between the sent state and the observable
/// behind `profiles`. `prior` holds p(b) in profile order.
pub fn leakage(profiles: &[PulseProfile], prior: &[f64]) -> Result<f64, SideChannelError> {
    if profiles.len() < 2 {
        return Err(SideChannelError::TooFewProfiles(profiles.len()));
    }
    let axis = &profiles[0].axis;
    if profiles
        .iter()
        .any(|p| p.axis.len() != axis.len() || p.intensity.len() != axis.len())
    {
        return Err(SideChannelError::AxisMismatch);
    }
    let scale = axis.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    if profiles
        .iter()
        .any(|p| p.axis.iter().zip(axis).any(|(a, b)| (a - b).abs() > 1e-9 * scale))
    {
        return Err(SideChannelError::AxisMismatch);
    }
    let mut conditionals = Vec::with_capacity(profiles.len());
    for p in profiles {
        let sum: f64 = p.intensity.iter().sum();
        if !(sum > 0.0) {
            return Err(SideChannelError::ZeroProfile(p.state));
        }
        conditionals.push(p.intensity.iter().map(|v| v / sum).collect());
    }
    let c = ConditionalProfiles::new(conditionals, prior.to_vec())?;
    Ok(mi_from_profiles(&c))
}

/// Leakage debit `q·(N_μ/t)·Q_μ·I_total` in bits/s.
pub fn leakage_debit(q_mu: f64, budget: &LeakageBudget, proto: &ProtocolConfig) -> f64 {
    proto.sifting_q * proto.signal_rate() * q_mu * budget.total.max(0.0)
}

/// Secure rate minus [`leakage_debit`], clamped to `[0, R]`.
pub fn leakage_adjusted_rate(report: &KeyRateReport, budget: &LeakageBudget, proto: &ProtocolConfig) -> f64 {
    let debit = leakage_debit(report.observables.q_mu, budget, proto);
    (report.secure_key_rate_bps - debit).clamp(0.0, report.secure_key_rate_bps.max(0.0))
}

/// Copy of `report` with `leakage_adjusted_bps` filled in.
pub fn apply_leakage(report: &KeyRateReport, budget: &LeakageBudget, proto: &ProtocolConfig) -> KeyRateReport {
    KeyRateReport {
        leakage_adjusted_bps: leakage_adjusted_rate(report, budget, proto),
        ..*report
    }
}
