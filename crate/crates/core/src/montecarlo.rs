//! Per-pulse Monte Carlo of Alice → channel → Bob.
//!
//! Frames are simulated in fixed-size blocks. Block `b` draws from a ChaCha8
//! generator keyed by the run seed with stream id `b`, so a run is
//! bit-identical for a given seed no matter how many threads execute it.
//!
//! Detection model per frame:
//! * every emitted photon survives independently with probability η and picks
//!   Bob's basis 50/50 at the passive beam splitter;
//! * in the matching basis it hits the wrong detector with probability
//!   `e_det + (1 − DOP)/2`, in the other basis either detector 50/50;
//! * a background click lands on a uniformly chosen detector with probability
//!   `Y₀ · suppression`;
//! * several clicked detectors are squashed to one, chosen uniformly.
//!
//! With timetag emission on, the stream also carries the background the
//! software gate would have rejected, spread uniformly over the rest of the
//! period, so gating the stream reproduces the summary's background level.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoy::{channel_eta, ChannelObservables};
use crate::model::{ClassLabel, LinkConfig, Polarization, SourceConfig, TICK_SECONDS};
use crate::timetag::{self, AliceEntry, ChannelMap, StreamSidecar, TimeTagRecord};

/// Frames per RNG block.
pub const BLOCK_FRAMES: u64 = 1 << 16;

/// Generator for one block of a seeded run.
pub fn block_rng(seed: u64, block: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PulseEmission {
    pub frame: u64,
    pub polarization: Polarization,
    pub class: ClassLabel,
    pub photons: u32,
}

/// Cached sampling distributions for a source.
#[derive(Debug, Clone)]
pub struct PulseSampler {
    class_cdf: [f64; 3],
    polarization_cdf: [f64; 4],
    poisson: [Option<Poisson<f64>>; 3],
}

fn cdf<const N: usize>(p: &[f64; N]) -> [f64; N] {
    let mut out = [0.0; N];
    let mut acc = 0.0;
    for (o, v) in out.iter_mut().zip(p) {
        acc += v;
        *o = acc;
    }
    out
}

fn pick<const N: usize>(cdf: &[f64; N], u: f64) -> usize {
    cdf.iter().position(|&c| u < c).unwrap_or_else(|| {
        // u landed in rounding slack above the last cumulative value
        cdf.iter().rposition(|&c| c > 0.0).unwrap_or(0)
    })
}

impl PulseSampler {
    pub fn new(source: &SourceConfig) -> Self {
        let means = [source.mu, source.nu1, source.nu2];
        Self {
            class_cdf: cdf(&source.class_probs),
            polarization_cdf: cdf(&source.polarization_probs),
            poisson: means.map(|m| if m > 0.0 { Poisson::new(m).ok() } else { None }),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, frame: u64, rng: &mut R) -> PulseEmission {
        let class = ClassLabel::ALL[pick(&self.class_cdf, rng.random::<f64>())];
        let polarization = Polarization::ALL[pick(&self.polarization_cdf, rng.random::<f64>())];
        let photons = match &self.poisson[class.index()] {
            Some(d) => d.sample(rng) as u32,
            None => 0,
        };
        PulseEmission {
            frame,
            polarization,
            class,
            photons,
        }
    }
}

/// Draw one pulse: class from the class probabilities, polarization from the
/// polarization probabilities, photon number Poisson in the class mean.
pub fn sample_pulse<R: Rng + ?Sized>(frame: u64, source: &SourceConfig, rng: &mut R) -> PulseEmission {
    PulseSampler::new(source).sample(frame, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Signal,
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionEvent {
    pub frame: u64,
    pub channel: Polarization,
    /// Arrival time relative to the nominal pulse position (s).
    pub offset_s: f64,
    pub origin: Origin,
}

/// Per-frame detection parameters derived from a source/link pair.
#[derive(Debug, Clone)]
pub struct ReceiverModel {
    pub eta: f64,
    /// In-window background click probability per frame.
    pub background: f64,
    /// Wrong-detector probability for a photon measured in the right basis.
    pub error: f64,
    pub window_s: f64,
    jitter: Option<Normal<f64>>,
}

impl ReceiverModel {
    pub fn new(source: &SourceConfig, link: &LinkConfig) -> Self {
        Self {
            eta: channel_eta(link),
            background: link.effective_y0(source.pulse_period_s()),
            error: (link.e_det + source.source_error()).clamp(0.0, 1.0),
            window_s: link.gating_window_s,
            jitter: (link.jitter_sigma_s > 0.0)
                .then(|| Normal::new(0.0, link.jitter_sigma_s).ok())
                .flatten(),
        }
    }
}

/// Propagate one pulse to Bob. Returns at most one detection.
pub fn transmit_detect<R: Rng + ?Sized>(p: &PulseEmission, rx: &ReceiverModel, rng: &mut R) -> Option<DetectionEvent> {
    let mut signal_mask = 0u8;
    for _ in 0..p.photons {
        if !rng.random_bool(rx.eta.clamp(0.0, 1.0)) {
            continue;
        }
        let bob_basis_matches = rng.random_bool(0.5);
        let measured = if bob_basis_matches {
            let flip = rng.random_bool(rx.error);
            Polarization::from_basis_bit(p.polarization.basis(), p.polarization.bit() ^ u8::from(flip))
        } else {
            let other = match p.polarization.basis() {
                crate::model::Basis::Z => crate::model::Basis::X,
                crate::model::Basis::X => crate::model::Basis::Z,
            };
            Polarization::from_basis_bit(other, u8::from(rng.random_bool(0.5)))
        };
        signal_mask |= 1 << measured.index();
    }
    let mut background_mask = 0u8;
    if rx.background > 0.0 && rng.random_bool(rx.background.min(1.0)) {
        background_mask = 1 << rng.random_range(0..4);
    }
    let clicked = signal_mask | background_mask;
    if clicked == 0 {
        return None;
    }
    let n = clicked.count_ones();
    let nth = if n > 1 { rng.random_range(0..n) } else { 0 };
    let index = (0..4)
        .filter(|i| clicked & (1 << i) != 0)
        .nth(nth as usize)
        .expect("n set bits");
    let origin = if signal_mask & (1 << index) != 0 {
        Origin::Signal
    } else {
        Origin::Background
    };
    let offset_s = match origin {
        Origin::Signal => rx.jitter.map_or(0.0, |d| d.sample(rng)),
        Origin::Background => (rng.random::<f64>() - 0.5) * rx.window_s,
    };
    Some(DetectionEvent {
        frame: p.frame,
        channel: Polarization::ALL[index],
        offset_s,
        origin,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub sent: u64,
    pub detected: u64,
    /// Detections measured in Alice's basis.
    pub sifted: u64,
    /// Sifted detections with the wrong bit.
    pub errors: u64,
}

impl ClassCounts {
    fn merge(&mut self, other: &ClassCounts) {
        self.sent += other.sent;
        self.detected += other.detected;
        self.sifted += other.sifted;
        self.errors += other.errors;
    }

    pub fn gain(&self) -> Option<f64> {
        (self.sent > 0).then(|| self.detected as f64 / self.sent as f64)
    }

    pub fn qber(&self) -> Option<f64> {
        (self.sifted > 0).then(|| self.errors as f64 / self.sifted as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub frames: u64,
    pub signal: ClassCounts,
    pub decoy1: ClassCounts,
    pub decoy2: ClassCounts,
    /// Simulated acquisition time (s).
    pub elapsed_s: f64,
}

impl RunSummary {
    pub fn class(&self, class: ClassLabel) -> &ClassCounts {
        match class {
            ClassLabel::Signal => &self.signal,
            ClassLabel::Decoy1 => &self.decoy1,
            ClassLabel::Decoy2 => &self.decoy2,
        }
    }

    pub fn class_mut(&mut self, class: ClassLabel) -> &mut ClassCounts {
        match class {
            ClassLabel::Signal => &mut self.signal,
            ClassLabel::Decoy1 => &mut self.decoy1,
            ClassLabel::Decoy2 => &mut self.decoy2,
        }
    }

    /// Associative, order-independent merge.
    pub fn merge(&mut self, other: &RunSummary) {
        self.frames += other.frames;
        self.signal.merge(&other.signal);
        self.decoy1.merge(&other.decoy1);
        self.decoy2.merge(&other.decoy2);
        self.elapsed_s += other.elapsed_s;
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("summary serializes")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub frames: u64,
    pub seed: u64,
    pub emit_ttags: bool,
    /// Tick offset of the pulse centre within a period.
    pub phase_ticks: u64,
}

impl RunOptions {
    pub fn new(frames: u64, seed: u64) -> Self {
        Self {
            frames,
            seed,
            emit_ttags: false,
            phase_ticks: 64,
        }
    }
}

/// Timetag stream produced by a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeTagStream {
    pub records: Vec<TimeTagRecord>,
    /// Alice's entries for every frame that has at least one record.
    pub alice_log: Vec<AliceEntry>,
    pub sidecar: StreamSidecar,
}

impl TimeTagStream {
    /// Recorded count rate over the simulated acquisition time.
    pub fn record_rate_cps(&self, pulse_period_s: f64) -> f64 {
        self.records.len() as f64 / (self.sidecar.frames as f64 * pulse_period_s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub stream: Option<TimeTagStream>,
}

#[derive(Debug, Error, PartialEq)]
pub enum RunError {
    #[error("frames must be >= 1")]
    NoFrames,
}

struct StreamGeometry {
    period: u64,
    phase: u64,
    window: u64,
    /// Per-frame probability of a background click outside the window.
    outside_background: f64,
}

struct BlockOutput {
    summary: RunSummary,
    /// (tick, channel, frame index)
    records: Vec<(u64, u8, u64)>,
    alice: Vec<AliceEntry>,
}

fn simulate_block(
    block: u64,
    frames: std::ops::Range<u64>,
    seed: u64,
    sampler: &PulseSampler,
    rx: &ReceiverModel,
    geometry: Option<&StreamGeometry>,
) -> BlockOutput {
    let mut rng = block_rng(seed, block);
    let mut summary = RunSummary::default();
    let mut records = Vec::new();
    let mut alice = Vec::new();
    for frame in frames {
        let pulse = sampler.sample(frame, &mut rng);
        let counts = summary.class_mut(pulse.class);
        counts.sent += 1;
        let event = transmit_detect(&pulse, rx, &mut rng);
        if let Some(ev) = &event {
            counts.detected += 1;
            if ev.channel.basis() == pulse.polarization.basis() {
                counts.sifted += 1;
                if ev.channel.bit() != pulse.polarization.bit() {
                    counts.errors += 1;
                }
            }
        }
        summary.frames += 1;

        let Some(g) = geometry else { continue };
        let centre = (frame * g.period + g.phase) as i64;
        let mut emitted = false;
        if let Some(ev) = &event {
            let tick = (centre + (ev.offset_s / TICK_SECONDS).round() as i64).max(0) as u64;
            records.push((tick, ev.channel.index() as u8, frame));
            emitted = true;
        }
        if g.outside_background > 0.0 && rng.random_bool(g.outside_background) {
            // uniform over the residuals the gate rejects
            let rejected = g.period - g.window;
            let k = rng.random_range(0..rejected);
            let late = g.window - g.window / 2;
            let offset = late + k; // residual in late..period-early
            let tick =
                (centre + offset as i64 - if offset >= g.period / 2 { g.period as i64 } else { 0 }).max(0) as u64;
            records.push((tick, rng.random_range(0..4u8), frame));
            emitted = true;
        }
        if emitted {
            alice.push(AliceEntry {
                frame,
                bit: pulse.polarization.bit(),
                basis: pulse.polarization.basis(),
                class: pulse.class,
            });
        }
    }
    BlockOutput {
        summary,
        records,
        alice,
    }
}

/// Simulate `options.frames` pulses.
pub fn run(source: &SourceConfig, link: &LinkConfig, options: &RunOptions) -> Result<RunOutput, RunError> {
    if options.frames == 0 {
        return Err(RunError::NoFrames);
    }
    let sampler = PulseSampler::new(source);
    let rx = ReceiverModel::new(source, link);
    let period = source.period_ticks();
    let window = timetag::window_ticks(link.gating_window_s).clamp(1, period);
    let geometry = options.emit_ttags.then(|| StreamGeometry {
        period,
        phase: options.phase_ticks % period,
        window,
        outside_background: (rx.background * (period - window) as f64 / window as f64).min(1.0),
    });

    let blocks = options.frames.div_ceil(BLOCK_FRAMES);
    let outputs: Vec<BlockOutput> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let start = b * BLOCK_FRAMES;
            let end = (start + BLOCK_FRAMES).min(options.frames);
            simulate_block(b, start..end, options.seed, &sampler, &rx, geometry.as_ref())
        })
        .collect();

    let mut summary = RunSummary::default();
    for o in &outputs {
        summary.merge(&o.summary);
    }
    summary.elapsed_s = options.frames as f64 * source.pulse_period_s();

    let stream = geometry.map(|g| {
        let mut tagged: Vec<(u64, u8, u64)> = Vec::new();
        let mut alice: Vec<AliceEntry> = Vec::new();
        for o in outputs {
            tagged.extend(o.records);
            alice.extend(o.alice);
        }
        tagged.sort_by_key(|&(tick, _, _)| tick);

        let mut dropped = 0u64;
        if let Some(cap) = link.ttag_cap_cps {
            let mut kept = 0u64;
            tagged.retain(|&(tick, _, _)| {
                let budget = cap * (tick as f64 * TICK_SECONDS) + 1.0;
                if (kept as f64) < budget {
                    kept += 1;
                    true
                } else {
                    dropped += 1;
                    false
                }
            });
            let mut frames: Vec<u64> = tagged.iter().map(|&(_, _, f)| f).collect();
            frames.sort_unstable();
            frames.dedup();
            alice.retain(|e| frames.binary_search(&e.frame).is_ok());
        }
        let records = tagged
            .into_iter()
            .map(|(tick, channel, _)| TimeTagRecord { tick, channel })
            .collect();

        let sent = [summary.signal.sent, summary.decoy1.sent, summary.decoy2.sent];
        let mut sidecar = StreamSidecar::new(period, g.phase, window, &ChannelMap::default(), options.frames, sent);
        sidecar.dropped_records = dropped;
        TimeTagStream {
            records,
            alice_log: alice,
            sidecar,
        }
    });

    Ok(RunOutput { summary, stream })
}

#[derive(Debug, Error, PartialEq)]
pub enum ObservablesError {
    #[error("no {0} pulses were sent; its gain is undefined")]
    UndefinedObservable(ClassLabel),
}

/// Observables estimated from a run.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatedObservables {
    pub observables: ChannelObservables,
    /// Decoy-2 QBER, when defined.
    pub e_nu2: Option<f64>,
    /// Classes with no sifted detections. Their QBER in `observables` is
    /// set to the uninformative 0.5.
    pub undefined_qber: Vec<ClassLabel>,
}

/// Q = detected/sent and E = errors/sifted per class.
pub fn estimate_observables(s: &RunSummary) -> Result<EstimatedObservables, ObservablesError> {
    let mut gains = [0.0; 3];
    let mut qbers = [None; 3];
    for class in ClassLabel::ALL {
        let c = s.class(class);
        gains[class.index()] = c.gain().ok_or(ObservablesError::UndefinedObservable(class))?;
        qbers[class.index()] = c.qber();
    }
    let undefined_qber = ClassLabel::ALL
        .into_iter()
        .filter(|c| qbers[c.index()].is_none())
        .collect();
    Ok(EstimatedObservables {
        observables: ChannelObservables {
            q_mu: gains[0],
            q_nu1: gains[1],
            q_nu2: gains[2],
            e_mu: qbers[0].unwrap_or(0.5),
            e_nu1: qbers[1].unwrap_or(0.5),
            eta: None,
        },
        e_nu2: qbers[2],
        undefined_qber,
    })
}
