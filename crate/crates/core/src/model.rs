//! Domain types, the flat configuration file, and configuration validation.
//!
//! Every other module consumes the three configuration values defined here:
//! [`SourceConfig`] (what Alice emits), [`LinkConfig`] (what happens between
//! Alice and Bob's detectors) and [`ProtocolConfig`] (sifting and
//! post-processing parameters). They are plain values; nothing mutates them
//! after [`load_config`] or [`Config::default`] hands them out.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Timetag resolution in seconds.
pub const TICK_SECONDS: f64 = 78.125e-12;

/// Tolerance on probability vectors that must sum to one.
pub const PROBABILITY_SUM_TOLERANCE: f64 = 1e-12;

/// Measurement / preparation basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Basis {
    /// Rectilinear, H/V.
    Z,
    /// Diagonal, D/A.
    X,
}

impl Basis {
    pub fn index(self) -> usize {
        match self {
            Basis::Z => 0,
            Basis::X => 1,
        }
    }

    pub fn from_index(index: usize) -> Option<Basis> {
        match index {
            0 => Some(Basis::Z),
            1 => Some(Basis::X),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Basis::Z => "Z",
            Basis::X => "X",
        }
    }
}

/// The four BB84 polarization states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Polarization {
    /// 0°
    H,
    /// 90°
    V,
    /// +45°
    D,
    /// −45°
    A,
}

impl Polarization {
    pub const ALL: [Polarization; 4] = [Polarization::H, Polarization::V, Polarization::D, Polarization::A];

    pub fn basis(self) -> Basis {
        match self {
            Polarization::H | Polarization::V => Basis::Z,
            Polarization::D | Polarization::A => Basis::X,
        }
    }

    /// Bit value carried by the state: H and D encode 0, V and A encode 1.
    pub fn bit(self) -> u8 {
        match self {
            Polarization::H | Polarization::D => 0,
            Polarization::V | Polarization::A => 1,
        }
    }

    pub fn from_basis_bit(basis: Basis, bit: u8) -> Polarization {
        match (basis, bit & 1) {
            (Basis::Z, 0) => Polarization::H,
            (Basis::Z, _) => Polarization::V,
            (Basis::X, 0) => Polarization::D,
            (Basis::X, _) => Polarization::A,
        }
    }

    /// Position in [`Polarization::ALL`], also the default detector channel id.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Polarization> {
        Self::ALL.get(index).copied()
    }

    /// Polarization angle in degrees.
    pub fn angle_deg(self) -> f64 {
        match self {
            Polarization::H => 0.0,
            Polarization::V => 90.0,
            Polarization::D => 45.0,
            Polarization::A => -45.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Polarization::H => "H",
            Polarization::V => "V",
            Polarization::D => "D",
            Polarization::A => "A",
        }
    }

    pub fn parse(s: &str) -> Option<Polarization> {
        match s.trim() {
            "H" | "h" => Some(Polarization::H),
            "V" | "v" => Some(Polarization::V),
            "D" | "d" => Some(Polarization::D),
            "A" | "a" => Some(Polarization::A),
            _ => None,
        }
    }
}

impl fmt::Display for Polarization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Which of the three intensity levels a pulse belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Signal,
    Decoy1,
    Decoy2,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Signal, ClassLabel::Decoy1, ClassLabel::Decoy2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<ClassLabel> {
        Self::ALL.get(index).copied()
    }

    pub fn label(self) -> &'static str {
        match self {
            ClassLabel::Signal => "signal",
            ClassLabel::Decoy1 => "decoy1",
            ClassLabel::Decoy2 => "decoy2",
        }
    }

    pub fn parse(s: &str) -> Option<ClassLabel> {
        match s.trim() {
            "signal" | "mu" | "0" => Some(ClassLabel::Signal),
            "decoy1" | "nu1" | "1" => Some(ClassLabel::Decoy1),
            "decoy2" | "nu2" | "2" => Some(ClassLabel::Decoy2),
            _ => None,
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// An intensity level and its mean photon number per pulse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityClass {
    pub label: ClassLabel,
    pub mean_photons: f64,
}

/// Signal and decoy mean photon numbers, in the order μ > ν₁ > ν₂.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intensities {
    pub mu: f64,
    pub nu1: f64,
    pub nu2: f64,
}

impl Intensities {
    pub fn mean(&self, class: ClassLabel) -> f64 {
        match class {
            ClassLabel::Signal => self.mu,
            ClassLabel::Decoy1 => self.nu1,
            ClassLabel::Decoy2 => self.nu2,
        }
    }
}

/// Faint-pulse source parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceConfig {
    /// Pulse repetition rate (Hz).
    pub rep_rate_hz: f64,
    pub mu: f64,
    pub nu1: f64,
    pub nu2: f64,
    /// Emission probabilities of the signal / decoy1 / decoy2 classes.
    pub class_probs: [f64; 3],
    /// Preparation probabilities of H, V, D, A.
    pub polarization_probs: [f64; 4],
    /// Intensity modulator extinction ratio (dB). `None` means an ideal
    /// modulator, i.e. the weakest decoy can be true vacuum.
    pub extinction_ratio_db: Option<f64>,
    /// Degree of polarization, fraction in (0, 1].
    pub dop: f64,
    /// Pulse full width at half maximum (s).
    pub pulse_fwhm_s: f64,
    pub time_bandwidth_product: f64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            rep_rate_hz: 1e8,
            mu: 0.5,
            nu1: 0.125,
            nu2: 0.0,
            class_probs: [0.8, 0.15, 0.05],
            polarization_probs: [0.25; 4],
            extinction_ratio_db: None,
            dop: 0.9968,
            pulse_fwhm_s: 400e-12,
            time_bandwidth_product: 0.56,
        }
    }
}

impl SourceConfig {
    pub fn intensities(&self) -> Intensities {
        Intensities {
            mu: self.mu,
            nu1: self.nu1,
            nu2: self.nu2,
        }
    }

    pub fn class(&self, label: ClassLabel) -> IntensityClass {
        IntensityClass {
            label,
            mean_photons: self.intensities().mean(label),
        }
    }

    pub fn pulse_period_s(&self) -> f64 {
        1.0 / self.rep_rate_hz
    }

    /// Pulse period expressed in timetag ticks (128 at 100 MHz).
    pub fn period_ticks(&self) -> u64 {
        (self.pulse_period_s() / TICK_SECONDS).round().max(1.0) as u64
    }

    /// Polarization error contributed by the depolarized fraction of the
    /// source: half of it lands in the wrong detector.
    pub fn source_error(&self) -> f64 {
        (1.0 - self.dop) / 2.0
    }

    /// Residual intensity of a nominally dark pulse for a given extinction ratio.
    pub fn residual_intensity(mu: f64, extinction_ratio_db: f64) -> f64 {
        mu * 10f64.powf(-extinction_ratio_db / 10.0)
    }
}

/// Which losses enter the transmittance used for gains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GainConvention {
    /// η = 10^(−attenuation/10). Reproduces the tabulated 6 dB gains.
    AttenuationOnly,
    /// η = 10^(−(attenuation+setup)/10) · detector efficiency.
    #[default]
    FullBudget,
}

impl GainConvention {
    pub fn label(self) -> &'static str {
        match self {
            GainConvention::AttenuationOnly => "attenuation_only",
            GainConvention::FullBudget => "full_budget",
        }
    }
}

/// Channel, receiver and detection parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkConfig {
    pub attenuation_db: f64,
    pub setup_loss_db: f64,
    pub detector_efficiency: f64,
    /// Raw background yield per frame, before software gating.
    pub y0: f64,
    /// Error probability of a background click.
    pub e0: f64,
    /// Intrinsic detection (misalignment) error.
    pub e_det: f64,
    /// Gaussian timing jitter of a detection (s).
    pub jitter_sigma_s: f64,
    /// Software gating window (s).
    pub gating_window_s: f64,
    /// Fraction of background surviving the gate. `None` derives it as
    /// window / pulse period.
    pub background_suppression: Option<f64>,
    pub gain_convention: GainConvention,
    /// Timetagger transfer cap (counts/s); `None` disables it.
    pub ttag_cap_cps: Option<f64>,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            attenuation_db: 0.0,
            setup_loss_db: 2.0,
            detector_efficiency: 0.5,
            y0: 5.58e-4,
            e0: 0.5,
            e_det: 7.9e-3,
            // 500 ps FWHM detector jitter.
            jitter_sigma_s: 500e-12 / 2.354_820_045,
            gating_window_s: 1e-9,
            background_suppression: None,
            gain_convention: GainConvention::FullBudget,
            ttag_cap_cps: Some(1e7),
        }
    }
}

impl LinkConfig {
    pub fn with_attenuation(&self, attenuation_db: f64) -> LinkConfig {
        LinkConfig {
            attenuation_db,
            ..self.clone()
        }
    }

    /// Suppression factor actually applied for a source with the given period.
    pub fn suppression(&self, pulse_period_s: f64) -> f64 {
        self.background_suppression
            .unwrap_or_else(|| (self.gating_window_s / pulse_period_s).min(1.0))
    }

    /// Background yield per frame after gating.
    pub fn effective_y0(&self, pulse_period_s: f64) -> f64 {
        self.y0 * self.suppression(pulse_period_s)
    }
}

/// Error-correction inefficiency f(E).
#[derive(Debug, Clone, PartialEq)]
pub enum EcEfficiency {
    Constant(f64),
    /// Piecewise-linear table of (QBER, f) points, ascending in QBER;
    /// values outside the table are clamped to the end points.
    Table(Vec<(f64, f64)>),
}

impl EcEfficiency {
    pub fn at(&self, qber: f64) -> f64 {
        match self {
            EcEfficiency::Constant(f) => *f,
            EcEfficiency::Table(points) => {
                let Some(first) = points.first() else {
                    return 1.0;
                };
                if qber <= first.0 {
                    return first.1;
                }
                for pair in points.windows(2) {
                    let (x0, y0) = pair[0];
                    let (x1, y1) = pair[1];
                    if qber <= x1 {
                        if x1 == x0 {
                            return y1;
                        }
                        return y0 + (y1 - y0) * (qber - x0) / (x1 - x0);
                    }
                }
                points[points.len() - 1].1
            }
        }
    }

    fn to_table_string(points: &[(f64, f64)]) -> String {
        points
            .iter()
            .map(|(e, f)| format!("{e}:{f}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    fn parse_table(s: &str) -> Result<Vec<(f64, f64)>, String> {
        s.split(',')
            .filter(|item| !item.trim().is_empty())
            .map(|item| {
                let (e, f) = item
                    .split_once(':')
                    .ok_or_else(|| format!("table entry `{item}` is not `qber:f`"))?;
                let e: f64 = e.trim().parse().map_err(|_| format!("bad qber `{e}`"))?;
                let f: f64 = f.trim().parse().map_err(|_| format!("bad f `{f}`"))?;
                Ok((e, f))
            })
            .collect()
    }
}

/// Sifting and post-processing parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    /// Sifting factor q (½ for BB84).
    pub sifting_q: f64,
    pub ec_efficiency: EcEfficiency,
    /// Transmission duration t (s).
    pub duration_s: f64,
    /// Total number of signal pulses N_μ sent during `duration_s`.
    pub n_signal_pulses: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            sifting_q: 0.5,
            ec_efficiency: EcEfficiency::Constant(1.16),
            duration_s: 1.0,
            n_signal_pulses: 1e8,
        }
    }
}

impl ProtocolConfig {
    /// N_μ / t.
    pub fn signal_rate(&self) -> f64 {
        self.n_signal_pulses / self.duration_s
    }
}

/// The three configuration values loaded together from one file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub source: SourceConfig,
    pub link: LinkConfig,
    pub protocol: ProtocolConfig,
}

/// One broken invariant: which field, and the rule it violates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    fn new(field: &str, rule: impl Into<String>) -> Self {
        Self {
            field: field.to_string(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("invalid config: {}", join_violations(.0))]
    Validation(Vec<Violation>),
}

fn join_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

struct Checker {
    violations: Vec<Violation>,
}

impl Checker {
    fn push(&mut self, field: &str, rule: impl Into<String>) {
        self.violations.push(Violation::new(field, rule));
    }

    fn finite(&mut self, field: &str, value: f64) -> bool {
        if value.is_finite() {
            true
        } else {
            self.push(field, "must be finite");
            false
        }
    }

    fn fraction(&mut self, field: &str, value: f64) {
        if self.finite(field, value) && !(0.0..=1.0).contains(&value) {
            self.push(field, "must lie in [0, 1]");
        }
    }

    fn positive(&mut self, field: &str, value: f64) {
        if self.finite(field, value) && value <= 0.0 {
            self.push(field, "must be > 0");
        }
    }

    fn non_negative(&mut self, field: &str, value: f64) {
        if self.finite(field, value) && value < 0.0 {
            self.push(field, "must be >= 0");
        }
    }

    fn distribution(&mut self, field: &str, names: &[&str], values: &[f64]) {
        let mut ok = true;
        for (name, &v) in names.iter().zip(values) {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                self.push(name, "probability must lie in [0, 1]");
                ok = false;
            }
        }
        if ok {
            let sum: f64 = values.iter().sum();
            if (sum - 1.0).abs() > PROBABILITY_SUM_TOLERANCE {
                self.push(field, format!("probabilities must sum to 1 (got {sum})"));
            }
        }
    }
}

/// Check every configuration invariant. Returns an empty list iff all hold.
pub fn validate(source: &SourceConfig, link: &LinkConfig, proto: &ProtocolConfig) -> Vec<Violation> {
    let mut c = Checker { violations: Vec::new() };

    c.positive("rep_rate_hz", source.rep_rate_hz);
    let mut intensities_ok = true;
    for (name, v) in [("mu", source.mu), ("nu1", source.nu1), ("nu2", source.nu2)] {
        if !v.is_finite() || v < 0.0 {
            c.push(name, "mean photon number must be finite and >= 0");
            intensities_ok = false;
        }
    }
    if intensities_ok && !(source.mu > source.nu1 && source.nu1 > source.nu2) {
        c.push("mu/nu1/nu2", "intensity ordering requires mu > nu1 > nu2");
    }
    c.distribution("class_probs", &["p_mu", "p_nu1", "p_nu2"], &source.class_probs);
    c.distribution(
        "polarization_probs",
        &["p_h", "p_v", "p_d", "p_a"],
        &source.polarization_probs,
    );
    if let Some(er) = source.extinction_ratio_db {
        c.positive("extinction_ratio_db", er);
    }
    if c.finite("dop", source.dop) && !(source.dop > 0.0 && source.dop <= 1.0) {
        c.push("dop", "degree of polarization must lie in (0, 1]");
    }
    c.positive("pulse_fwhm_s", source.pulse_fwhm_s);
    c.positive("time_bandwidth_product", source.time_bandwidth_product);

    c.non_negative("attenuation_db", link.attenuation_db);
    c.non_negative("setup_loss_db", link.setup_loss_db);
    c.fraction("detector_efficiency", link.detector_efficiency);
    c.fraction("y0", link.y0);
    c.fraction("e0", link.e0);
    c.fraction("e_det", link.e_det);
    c.non_negative("jitter_sigma_s", link.jitter_sigma_s);
    c.positive("gating_window_s", link.gating_window_s);
    if link.gating_window_s.is_finite()
        && source.rep_rate_hz.is_finite()
        && source.rep_rate_hz > 0.0
        && link.gating_window_s > source.pulse_period_s() * (1.0 + 1e-12)
    {
        c.push("gating_window_s", "window must not exceed the pulse period");
    }
    if let Some(s) = link.background_suppression {
        c.fraction("background_suppression", s);
    }
    if let Some(cap) = link.ttag_cap_cps {
        c.positive("ttag_cap_cps", cap);
    }

    if c.finite("sifting_q", proto.sifting_q) && !(proto.sifting_q > 0.0 && proto.sifting_q <= 1.0) {
        c.push("sifting_q", "must lie in (0, 1]");
    }
    match &proto.ec_efficiency {
        EcEfficiency::Constant(f) => {
            if !f.is_finite() || *f < 1.0 {
                c.push("f_ec", "error-correction efficiency must be >= 1");
            }
        }
        EcEfficiency::Table(points) => {
            if points.is_empty() {
                c.push("f_ec_table", "table must not be empty");
            }
            if points.iter().any(|(e, f)| !e.is_finite() || !f.is_finite() || *f < 1.0) {
                c.push("f_ec_table", "every f must be finite and >= 1");
            }
            if points.windows(2).any(|w| !(w[0].0 <= w[1].0)) {
                c.push("f_ec_table", "qber points must be ascending");
            }
        }
    }
    c.positive("duration_s", proto.duration_s);
    c.non_negative("n_signal_pulses", proto.n_signal_pulses);

    c.violations
}

impl Config {
    pub fn validate(&self) -> Vec<Violation> {
        validate(&self.source, &self.link, &self.protocol)
    }

    /// Parse a flat key-value document. Absent keys take their defaults.
    pub fn from_toml_str(text: &str) -> Result<Config, ConfigError> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let config = file.into_config()?;
        let violations = config.validate();
        if violations.is_empty() {
            Ok(config)
        } else {
            Err(ConfigError::Validation(violations))
        }
    }

    /// Serialize every key explicitly, so the output loads back to an equal value.
    pub fn to_toml_string(&self) -> String {
        let file = ConfigFile::from_config(self);
        toml::to_string(&file).expect("flat config always serializes")
    }
}

/// Load, default-fill and validate a configuration file.
pub fn load_config(path: impl AsRef<Path>) -> Result<Config, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Config::from_toml_str(&text)
}

/// On-disk schema. One flat table; unknown keys are rejected.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    // source
    rep_rate_hz: Option<f64>,
    mu: Option<f64>,
    nu1: Option<f64>,
    nu2: Option<f64>,
    p_mu: Option<f64>,
    p_nu1: Option<f64>,
    p_nu2: Option<f64>,
    p_h: Option<f64>,
    p_v: Option<f64>,
    p_d: Option<f64>,
    p_a: Option<f64>,
    extinction_ratio_db: Option<f64>,
    dop: Option<f64>,
    pulse_fwhm_s: Option<f64>,
    time_bandwidth_product: Option<f64>,
    // link
    attenuation_db: Option<f64>,
    setup_loss_db: Option<f64>,
    detector_efficiency: Option<f64>,
    y0: Option<f64>,
    e0: Option<f64>,
    e_det: Option<f64>,
    jitter_sigma_s: Option<f64>,
    gating_window_s: Option<f64>,
    background_suppression: Option<f64>,
    gain_convention: Option<GainConvention>,
    /// 0 disables the cap.
    ttag_cap_cps: Option<f64>,
    // protocol
    sifting_q: Option<f64>,
    f_ec: Option<f64>,
    f_ec_table: Option<String>,
    duration_s: Option<f64>,
    n_signal_pulses: Option<f64>,
}

impl ConfigFile {
    fn into_config(self) -> Result<Config, ConfigError> {
        let ds = SourceConfig::default();
        let dl = LinkConfig::default();
        let dp = ProtocolConfig::default();

        let mu = self.mu.unwrap_or(ds.mu);
        let nu2 = match (self.nu2, self.extinction_ratio_db) {
            (Some(nu2), _) => nu2,
            (None, Some(er)) => SourceConfig::residual_intensity(mu, er),
            (None, None) => ds.nu2,
        };
        let source = SourceConfig {
            rep_rate_hz: self.rep_rate_hz.unwrap_or(ds.rep_rate_hz),
            mu,
            nu1: self.nu1.unwrap_or(ds.nu1),
            nu2,
            class_probs: [
                self.p_mu.unwrap_or(ds.class_probs[0]),
                self.p_nu1.unwrap_or(ds.class_probs[1]),
                self.p_nu2.unwrap_or(ds.class_probs[2]),
            ],
            polarization_probs: [
                self.p_h.unwrap_or(ds.polarization_probs[0]),
                self.p_v.unwrap_or(ds.polarization_probs[1]),
                self.p_d.unwrap_or(ds.polarization_probs[2]),
                self.p_a.unwrap_or(ds.polarization_probs[3]),
            ],
            extinction_ratio_db: self.extinction_ratio_db,
            dop: self.dop.unwrap_or(ds.dop),
            pulse_fwhm_s: self.pulse_fwhm_s.unwrap_or(ds.pulse_fwhm_s),
            time_bandwidth_product: self.time_bandwidth_product.unwrap_or(ds.time_bandwidth_product),
        };

        let link = LinkConfig {
            attenuation_db: self.attenuation_db.unwrap_or(dl.attenuation_db),
            setup_loss_db: self.setup_loss_db.unwrap_or(dl.setup_loss_db),
            detector_efficiency: self.detector_efficiency.unwrap_or(dl.detector_efficiency),
            y0: self.y0.unwrap_or(dl.y0),
            e0: self.e0.unwrap_or(dl.e0),
            e_det: self.e_det.unwrap_or(dl.e_det),
            jitter_sigma_s: self.jitter_sigma_s.unwrap_or(dl.jitter_sigma_s),
            gating_window_s: self.gating_window_s.unwrap_or(dl.gating_window_s),
            background_suppression: self.background_suppression,
            gain_convention: self.gain_convention.unwrap_or(dl.gain_convention),
            ttag_cap_cps: match self.ttag_cap_cps {
                Some(0.0) => None,
                Some(cap) => Some(cap),
                None => dl.ttag_cap_cps,
            },
        };

        let ec_efficiency = match (self.f_ec, self.f_ec_table) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::Validation(vec![Violation::new(
                    "f_ec/f_ec_table",
                    "give either a constant or a table, not both",
                )]))
            }
            (Some(f), None) => EcEfficiency::Constant(f),
            (None, Some(table)) => EcEfficiency::Table(EcEfficiency::parse_table(&table).map_err(ConfigError::Parse)?),
            (None, None) => dp.ec_efficiency,
        };
        let protocol = ProtocolConfig {
            sifting_q: self.sifting_q.unwrap_or(dp.sifting_q),
            ec_efficiency,
            duration_s: self.duration_s.unwrap_or(dp.duration_s),
            n_signal_pulses: self.n_signal_pulses.unwrap_or(dp.n_signal_pulses),
        };

        Ok(Config { source, link, protocol })
    }

    fn from_config(config: &Config) -> ConfigFile {
        let s = &config.source;
        let l = &config.link;
        let p = &config.protocol;
        let (f_ec, f_ec_table) = match &p.ec_efficiency {
            EcEfficiency::Constant(f) => (Some(*f), None),
            EcEfficiency::Table(points) => (None, Some(EcEfficiency::to_table_string(points))),
        };
        ConfigFile {
            rep_rate_hz: Some(s.rep_rate_hz),
            mu: Some(s.mu),
            nu1: Some(s.nu1),
            nu2: Some(s.nu2),
            p_mu: Some(s.class_probs[0]),
            p_nu1: Some(s.class_probs[1]),
            p_nu2: Some(s.class_probs[2]),
            p_h: Some(s.polarization_probs[0]),
            p_v: Some(s.polarization_probs[1]),
            p_d: Some(s.polarization_probs[2]),
            p_a: Some(s.polarization_probs[3]),
            extinction_ratio_db: s.extinction_ratio_db,
            dop: Some(s.dop),
            pulse_fwhm_s: Some(s.pulse_fwhm_s),
            time_bandwidth_product: Some(s.time_bandwidth_product),
            attenuation_db: Some(l.attenuation_db),
            setup_loss_db: Some(l.setup_loss_db),
            detector_efficiency: Some(l.detector_efficiency),
            y0: Some(l.y0),
            e0: Some(l.e0),
            e_det: Some(l.e_det),
            jitter_sigma_s: Some(l.jitter_sigma_s),
            gating_window_s: Some(l.gating_window_s),
            background_suppression: l.background_suppression,
            gain_convention: Some(l.gain_convention),
            ttag_cap_cps: Some(l.ttag_cap_cps.unwrap_or(0.0)),
            sifting_q: Some(p.sifting_q),
            f_ec,
            f_ec_table,
            duration_s: Some(p.duration_s),
            n_signal_pulses: Some(p.n_signal_pulses),
        }
    }
}
