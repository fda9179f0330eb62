//! Timetag records: binary codec, clock-phase recovery, software gating,
//! basis sifting and per-class QBER.
//!
//! A record is one little-endian 64-bit word, tick count in bits 63..4 and
//! channel id in bits 3..0. Ticks are integer multiples of
//! [`TICK_SECONDS`]; a 10 ns pulse period is exactly 128 ticks, so every
//! operation here works in integer ticks.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoy::{self, ChannelObservables, KeyRateReport};
use crate::model::{Basis, ClassLabel, Intensities, Polarization, ProtocolConfig, TICK_SECONDS};

pub const TICK_BITS: u32 = 60;
pub const MAX_TICK: u64 = (1 << TICK_BITS) - 1;
/// Channels 0..4 are detectors; 4..16 are reserved for markers.
pub const DETECTOR_CHANNELS: u8 = 4;
pub const SYNC_MARKER_CHANNEL: u8 = 15;

#[derive(Debug, Error)]
pub enum TimeTagError {
    #[error("stream length {0} is not a multiple of 8 bytes")]
    Truncated(usize),
    #[error("tick {0} does not fit in 60 bits")]
    TickOverflow(u64),
    #[error("channel {0} does not fit in 4 bits")]
    ChannelOverflow(u8),
    #[error("need at least {needed} detection records for phase recovery, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("period must be > 0")]
    ZeroPeriod,
    #[error("no records")]
    NoRecords,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("alice log: {0}")]
    AliceLog(String),
    #[error("sidecar: {0}")]
    Sidecar(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeTagRecord {
    pub tick: u64,
    pub channel: u8,
}

impl TimeTagRecord {
    pub fn new(tick: u64, channel: u8) -> Result<Self, TimeTagError> {
        if tick > MAX_TICK {
            return Err(TimeTagError::TickOverflow(tick));
        }
        if channel > 0x0f {
            return Err(TimeTagError::ChannelOverflow(channel));
        }
        Ok(Self { tick, channel })
    }

    pub fn is_detection(&self) -> bool {
        self.channel < DETECTOR_CHANNELS
    }

    pub fn word(&self) -> u64 {
        (self.tick << 4) | u64::from(self.channel & 0x0f)
    }

    pub fn from_word(word: u64) -> Self {
        Self {
            tick: word >> 4,
            channel: (word & 0x0f) as u8,
        }
    }
}

pub fn encode(records: &[TimeTagRecord]) -> Result<Vec<u8>, TimeTagError> {
    let mut out = Vec::with_capacity(records.len() * 8);
    for r in records {
        let r = TimeTagRecord::new(r.tick, r.channel)?;
        out.extend_from_slice(&r.word().to_le_bytes());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedStream {
    pub records: Vec<TimeTagRecord>,
    /// Positions where the tick went backwards; such records are kept.
    pub non_monotonic: usize,
}

pub fn decode(bytes: &[u8]) -> Result<DecodedStream, TimeTagError> {
    if !bytes.len().is_multiple_of(8) {
        return Err(TimeTagError::Truncated(bytes.len()));
    }
    let records: Vec<TimeTagRecord> = bytes
        .chunks_exact(8)
        .map(|c| TimeTagRecord::from_word(u64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
        .collect();
    let non_monotonic = records.windows(2).filter(|w| w[1].tick < w[0].tick).count();
    if non_monotonic > 0 {
        log::warn!("{non_monotonic} non-monotonic ticks in timetag stream");
    }
    Ok(DecodedStream { records, non_monotonic })
}

pub fn write_ttag<W: Write>(mut out: W, records: &[TimeTagRecord]) -> Result<(), TimeTagError> {
    out.write_all(&encode(records)?)?;
    Ok(())
}

pub fn read_ttag<R: Read>(mut input: R) -> Result<DecodedStream, TimeTagError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn read_ttag_file(path: impl AsRef<Path>) -> Result<DecodedStream, TimeTagError> {
    read_ttag(std::fs::File::open(path)?)
}

/// Window length in whole ticks, rounded to nearest: 1 ns → 13.
pub fn window_ticks(window_s: f64) -> u64 {
    (window_s / TICK_SECONDS).round().max(0.0) as u64
}

/// Residual of `tick` relative to `phase`, in `0..period`.
pub fn residual(tick: u64, period: u64, phase: u64) -> u64 {
    let phase = phase % period;
    ((tick % period) + period - phase) % period
}

/// Whether a residual falls in a window of `window` ticks centred on the
/// phase. The window covers signed residuals `-(w/2) ..= w - w/2 - 1`, so
/// exactly `w` of the `period` residuals are accepted (odd windows are
/// symmetric; even ones lose one tick on the late side).
pub fn in_window(residual: u64, period: u64, window: u64) -> bool {
    let window = window.min(period);
    let early = window / 2;
    let late = window - early; // late side covers 0..late
    residual < late || residual >= period - early
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseEstimate {
    pub phase: u64,
    /// Peak bin count over mean bin count.
    pub contrast: f64,
    pub low_confidence: bool,
}

pub const MIN_PHASE_RECORDS: usize = 10;

/// Recover the pulse arrival phase from the histogram of `tick mod period`.
///
/// The peak bin is located, then refined by a background-subtracted circular
/// mean over ±period/8 around it.
pub fn recover_phase(records: &[TimeTagRecord], period: u64) -> Result<PhaseEstimate, TimeTagError> {
    if period == 0 {
        return Err(TimeTagError::ZeroPeriod);
    }
    let p = period as usize;
    let mut hist = vec![0u64; p];
    let mut n = 0usize;
    for r in records.iter().filter(|r| r.is_detection()) {
        hist[(r.tick % period) as usize] += 1;
        n += 1;
    }
    if n < MIN_PHASE_RECORDS {
        return Err(TimeTagError::InsufficientData {
            needed: MIN_PHASE_RECORDS,
            got: n,
        });
    }
    let (peak, &peak_count) = hist
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .expect("period > 0");
    let mean = n as f64 / p as f64;
    let contrast = peak_count as f64 / mean;

    let mut sorted = hist.clone();
    sorted.sort_unstable();
    let background = sorted[p / 2] as f64;

    let half = (p / 8).max(1);
    let (mut sx, mut sy) = (0.0, 0.0);
    for k in 0..=2 * half {
        let offset = k as i64 - half as i64;
        let bin = (peak as i64 + offset).rem_euclid(p as i64) as usize;
        let w = (hist[bin] as f64 - background).max(0.0);
        let angle = std::f64::consts::TAU * offset as f64 / p as f64;
        sx += w * angle.cos();
        sy += w * angle.sin();
    }
    let phase = if sx == 0.0 && sy == 0.0 {
        peak as u64
    } else {
        let shift = (sy.atan2(sx) / std::f64::consts::TAU * p as f64).round() as i64;
        (peak as i64 + shift).rem_euclid(p as i64) as u64
    };
    Ok(PhaseEstimate {
        phase,
        contrast,
        low_confidence: contrast < 2.0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatingResult {
    pub accepted: Vec<TimeTagRecord>,
    pub rejected: usize,
    /// Marker records, neither accepted nor rejected.
    pub markers: usize,
    pub period: u64,
    pub phase: u64,
    pub window: u64,
}

/// Keep detection records whose residual lies inside the window.
pub fn gate(records: &[TimeTagRecord], period: u64, phase: u64, window: u64) -> GatingResult {
    let mut accepted = Vec::new();
    let mut rejected = 0;
    let mut markers = 0;
    for r in records {
        if !r.is_detection() {
            markers += 1;
        } else if in_window(residual(r.tick, period, phase), period, window) {
            accepted.push(*r);
        } else {
            rejected += 1;
        }
    }
    GatingResult {
        accepted,
        rejected,
        markers,
        period,
        phase: phase % period,
        window,
    }
}

/// Frame a tick belongs to: `(tick − phase + period/2) div period`.
pub fn frame_of(tick: u64, period: u64, phase: u64) -> Option<u64> {
    let shifted = i128::from(tick) - i128::from(phase % period) + i128::from(period / 2);
    (shifted >= 0).then(|| (shifted / i128::from(period)) as u64)
}

/// Detector channel id → measured polarization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelMap(pub [Polarization; 4]);

impl Default for ChannelMap {
    fn default() -> Self {
        ChannelMap(Polarization::ALL)
    }
}

impl ChannelMap {
    pub fn polarization(&self, channel: u8) -> Option<Polarization> {
        self.0.get(usize::from(channel)).copied()
    }

    pub fn channel_of(&self, p: Polarization) -> u8 {
        self.0.iter().position(|&q| q == p).unwrap_or(p.index()) as u8
    }
}

/// Alice's record of one emitted pulse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AliceEntry {
    pub frame: u64,
    pub bit: u8,
    pub basis: Basis,
    pub class: ClassLabel,
}

#[derive(Debug, Serialize, Deserialize)]
struct AliceRow {
    frame: u64,
    bit: u8,
    basis: String,
    class: String,
}

pub fn write_alice_log<W: Write>(out: W, entries: &[AliceEntry]) -> Result<(), TimeTagError> {
    let mut w = csv::Writer::from_writer(out);
    for e in entries {
        w.serialize(AliceRow {
            frame: e.frame,
            bit: e.bit,
            basis: e.basis.label().to_string(),
            class: e.class.label().to_string(),
        })
        .map_err(|e| TimeTagError::AliceLog(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Read `frame,bit,basis,class` rows; the result is sorted by frame.
pub fn read_alice_log<R: Read>(input: R) -> Result<Vec<AliceEntry>, TimeTagError> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut entries = Vec::new();
    for (i, row) in rdr.deserialize::<AliceRow>().enumerate() {
        let row = row.map_err(|e| TimeTagError::AliceLog(format!("row {}: {e}", i + 1)))?;
        let basis = match row.basis.trim() {
            "Z" | "z" | "0" => Basis::Z,
            "X" | "x" | "1" => Basis::X,
            other => {
                return Err(TimeTagError::AliceLog(format!(
                    "row {}: unknown basis `{other}`",
                    i + 1
                )))
            }
        };
        let class = ClassLabel::parse(&row.class)
            .ok_or_else(|| TimeTagError::AliceLog(format!("row {}: unknown class `{}`", i + 1, row.class)))?;
        if row.bit > 1 {
            return Err(TimeTagError::AliceLog(format!("row {}: bit must be 0 or 1", i + 1)));
        }
        entries.push(AliceEntry {
            frame: row.frame,
            bit: row.bit,
            basis,
            class,
        });
    }
    entries.sort_by_key(|e| e.frame);
    Ok(entries)
}

/// Bob's view of one detection after sifting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SiftedEntry {
    pub frame: u64,
    pub bit: u8,
    pub basis: Basis,
    pub matched: bool,
    pub class: ClassLabel,
    pub error: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ClassSift {
    pub detections: u64,
    pub sifted: u64,
    pub errors: u64,
}

impl ClassSift {
    pub fn qber(&self) -> Option<f64> {
        (self.sifted > 0).then(|| self.errors as f64 / self.sifted as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SiftedKey {
    pub entries: Vec<SiftedEntry>,
    /// Bob's bits on basis-matched frames.
    pub bits: Vec<u8>,
    /// Indices into `bits` that disagree with Alice.
    pub error_positions: Vec<usize>,
    /// Accepted records discarded because another record shared their frame.
    pub collisions: usize,
    /// Frames with a detection but no entry in Alice's log.
    pub unmatched: usize,
    pub per_class: [ClassSift; 3],
}

impl SiftedKey {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn qber(&self) -> Option<f64> {
        (!self.bits.is_empty()).then(|| self.error_positions.len() as f64 / self.bits.len() as f64)
    }

    pub fn class(&self, class: ClassLabel) -> &ClassSift {
        &self.per_class[class.index()]
    }
}

/// Keep detections measured in Alice's preparation basis.
///
/// `alice` must be sorted by frame. Several accepted records in one frame are
/// resolved by a uniform random choice.
pub fn sift<R: Rng + ?Sized>(alice: &[AliceEntry], gating: &GatingResult, map: &ChannelMap, rng: &mut R) -> SiftedKey {
    let mut key = SiftedKey::default();
    let records = &gating.accepted;
    let mut i = 0;
    while i < records.len() {
        let Some(frame) = frame_of(records[i].tick, gating.period, gating.phase) else {
            key.unmatched += 1;
            i += 1;
            continue;
        };
        let mut j = i + 1;
        while j < records.len() && frame_of(records[j].tick, gating.period, gating.phase) == Some(frame) {
            j += 1;
        }
        let group = &records[i..j];
        let chosen = if group.len() > 1 {
            key.collisions += group.len() - 1;
            group[rng.random_range(0..group.len())]
        } else {
            group[0]
        };
        i = j;

        let Ok(pos) = alice.binary_search_by_key(&frame, |e| e.frame) else {
            key.unmatched += 1;
            continue;
        };
        let a = alice[pos];
        let Some(bob) = map.polarization(chosen.channel) else {
            continue;
        };
        let matched = bob.basis() == a.basis;
        let error = matched && bob.bit() != a.bit;
        let stats = &mut key.per_class[a.class.index()];
        stats.detections += 1;
        if matched {
            stats.sifted += 1;
            if error {
                stats.errors += 1;
                key.error_positions.push(key.bits.len());
            }
            key.bits.push(bob.bit());
        }
        key.entries.push(SiftedEntry {
            frame,
            bit: bob.bit(),
            basis: bob.basis(),
            matched,
            class: a.class,
            error,
        });
    }
    key
}

/// Acquisition metadata stored next to a `.ttag` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSidecar {
    pub period_ticks: u64,
    pub phase_ticks: u64,
    pub window_ticks: u64,
    pub channel_0: String,
    pub channel_1: String,
    pub channel_2: String,
    pub channel_3: String,
    /// Frames emitted during the acquisition.
    pub frames: u64,
    pub sent_signal: u64,
    pub sent_decoy1: u64,
    pub sent_decoy2: u64,
    /// Records dropped by the transfer cap.
    #[serde(default)]
    pub dropped_records: u64,
}

impl StreamSidecar {
    pub fn new(
        period_ticks: u64,
        phase_ticks: u64,
        window_ticks: u64,
        map: &ChannelMap,
        frames: u64,
        sent: [u64; 3],
    ) -> Self {
        Self {
            period_ticks,
            phase_ticks,
            window_ticks,
            channel_0: map.0[0].label().into(),
            channel_1: map.0[1].label().into(),
            channel_2: map.0[2].label().into(),
            channel_3: map.0[3].label().into(),
            frames,
            sent_signal: sent[0],
            sent_decoy1: sent[1],
            sent_decoy2: sent[2],
            dropped_records: 0,
        }
    }

    pub fn channel_map(&self) -> Result<ChannelMap, TimeTagError> {
        let parse = |s: &str| {
            Polarization::parse(s).ok_or_else(|| TimeTagError::Sidecar(format!("unknown polarization `{s}`")))
        };
        Ok(ChannelMap([
            parse(&self.channel_0)?,
            parse(&self.channel_1)?,
            parse(&self.channel_2)?,
            parse(&self.channel_3)?,
        ]))
    }

    pub fn sent(&self) -> [u64; 3] {
        [self.sent_signal, self.sent_decoy1, self.sent_decoy2]
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat sidecar serializes")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, TimeTagError> {
        toml::from_str(text).map_err(|e| TimeTagError::Sidecar(e.to_string()))
    }
}

/// Result of phase recovery → gating → sifting → decoy analysis.
#[derive(Debug, Clone)]
pub struct StreamAnalysis {
    pub phase: PhaseEstimate,
    pub accepted: usize,
    pub rejected: usize,
    pub sifted: SiftedKey,
    pub observables: ChannelObservables,
    /// Classes whose QBER was undefined (no sifted bits); set to 0.5.
    pub undefined_qber: Vec<ClassLabel>,
    pub sifted_rate_bps: f64,
    pub report: Option<KeyRateReport>,
}

/// Run the whole receiver-side chain on a decoded stream.
#[allow(clippy::too_many_arguments)]
pub fn analyze_stream<R: Rng + ?Sized>(
    records: &[TimeTagRecord],
    alice: &[AliceEntry],
    sidecar: &StreamSidecar,
    window: u64,
    pulse_period_s: f64,
    intensities: &Intensities,
    e0: f64,
    proto: &ProtocolConfig,
    rng: &mut R,
) -> Result<StreamAnalysis, TimeTagError> {
    if records.iter().all(|r| !r.is_detection()) {
        return Err(TimeTagError::NoRecords);
    }
    let period = sidecar.period_ticks;
    let phase = recover_phase(records, period)?;
    let gated = gate(records, period, phase.phase, window);
    let map = sidecar.channel_map()?;
    let sifted = sift(alice, &gated, &map, rng);

    let sent = sidecar.sent();
    let mut undefined_qber = Vec::new();
    let mut gains = [0.0; 3];
    let mut qbers = [0.5; 3];
    for class in ClassLabel::ALL {
        let c = sifted.class(class);
        let n = sent[class.index()];
        gains[class.index()] = if n > 0 { c.detections as f64 / n as f64 } else { 0.0 };
        match c.qber() {
            Some(q) => qbers[class.index()] = q,
            None => undefined_qber.push(class),
        }
    }
    let observables = ChannelObservables {
        q_mu: gains[0],
        q_nu1: gains[1],
        q_nu2: gains[2],
        e_mu: qbers[0],
        e_nu1: qbers[1],
        eta: None,
    };
    let elapsed = sidecar.frames as f64 * pulse_period_s;
    let sifted_rate_bps = if elapsed > 0.0 {
        sifted.len() as f64 / elapsed
    } else {
        0.0
    };
    let report = decoy::analyze_observables(&observables, intensities, e0, proto).ok();
    Ok(StreamAnalysis {
        phase,
        accepted: gated.accepted.len(),
        rejected: gated.rejected,
        sifted,
        observables,
        undefined_qber,
        sifted_rate_bps,
        report,
    })
}

/// Index Alice's log by frame for callers that build it incrementally.
pub fn index_alice_log(entries: &[AliceEntry]) -> HashMap<u64, AliceEntry> {
    entries.iter().map(|e| (e.frame, *e)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn word_layout() {
        assert_eq!(TimeTagRecord::new(0, 0).unwrap().word(), 0);
        assert_eq!(TimeTagRecord::new(1, 3).unwrap().word(), 0x13);
        let bytes = encode(&[TimeTagRecord::new(1, 3).unwrap()]).unwrap();
        assert_eq!(bytes, vec![0x13, 0, 0, 0, 0, 0, 0, 0]);
        let max = TimeTagRecord::new(MAX_TICK, 15).unwrap();
        assert_eq!(max.word(), u64::MAX);
        assert_eq!(TimeTagRecord::from_word(u64::MAX), max);
    }

    #[test]
    fn overflow_rejected() {
        assert!(matches!(
            TimeTagRecord::new(MAX_TICK + 1, 0),
            Err(TimeTagError::TickOverflow(_))
        ));
        assert!(matches!(
            TimeTagRecord::new(0, 16),
            Err(TimeTagError::ChannelOverflow(16))
        ));
        let bad = TimeTagRecord { tick: 0, channel: 200 };
        assert!(encode(&[bad]).is_err());
    }

    #[test]
    fn truncated_stream() {
        assert!(matches!(decode(&[0u8; 9]), Err(TimeTagError::Truncated(9))));
    }

    #[test]
    fn non_monotonic_preserved() {
        let recs = [
            TimeTagRecord::new(10, 0).unwrap(),
            TimeTagRecord::new(5, 1).unwrap(),
            TimeTagRecord::new(20, 2).unwrap(),
        ];
        let d = decode(&encode(&recs).unwrap()).unwrap();
        assert_eq!(d.records, recs);
        assert_eq!(d.non_monotonic, 1);
    }

    #[test]
    fn markers_pass_through_codec_and_skip_gate() {
        let recs = [
            TimeTagRecord::new(37, 0).unwrap(),
            TimeTagRecord::new(100, SYNC_MARKER_CHANNEL).unwrap(),
        ];
        let d = decode(&encode(&recs).unwrap()).unwrap();
        assert_eq!(d.records, recs);
        let g = gate(&d.records, 128, 37, 13);
        assert_eq!(g.accepted.len(), 1);
        assert_eq!(g.markers, 1);
        assert_eq!(g.rejected, 0);
    }

    #[test]
    fn window_rounding() {
        assert_eq!(window_ticks(1e-9), 13);
        assert_eq!(window_ticks(10e-9), 128);
    }

    #[test]
    fn window_accepts_exactly_w_residuals() {
        for period in [1u64, 2, 7, 128] {
            for w in 0..=period {
                let n = (0..period).filter(|&r| in_window(r, period, w)).count() as u64;
                assert_eq!(n, w, "period {period} window {w}");
            }
        }
    }

    #[test]
    fn exact_phase() {
        let recs: Vec<_> = (0..200u64)
            .map(|k| TimeTagRecord::new(k * 128 + 37, 0).unwrap())
            .collect();
        let p = recover_phase(&recs, 128).unwrap();
        assert_eq!(p.phase, 37);
        assert!(!p.low_confidence);
    }

    #[test]
    fn phase_needs_ten_records() {
        let recs: Vec<_> = (0..9u64).map(|k| TimeTagRecord::new(k * 128, 0).unwrap()).collect();
        assert!(matches!(
            recover_phase(&recs, 128),
            Err(TimeTagError::InsufficientData { got: 9, .. })
        ));
    }

    #[test]
    fn phase_near_wrap_point() {
        let recs: Vec<_> = (0..1000u64)
            .map(|k| TimeTagRecord::new(k * 128 + 126 + (k % 5), 1).unwrap())
            .collect();
        // residuals 126,127,0,1,2 → centre 0
        assert_eq!(recover_phase(&recs, 128).unwrap().phase, 0);
    }

    #[test]
    fn gate_on_phase_and_full_window() {
        let recs: Vec<_> = (0..50u64)
            .map(|k| TimeTagRecord::new(k * 128 + 37, 2).unwrap())
            .collect();
        assert_eq!(gate(&recs, 128, 37, 13).accepted.len(), 50);
        let spread: Vec<_> = (0..128u64).map(|k| TimeTagRecord::new(k, 0).unwrap()).collect();
        let g = gate(&spread, 128, 37, 128);
        assert_eq!(g.accepted.len(), 128);
        assert_eq!(g.rejected, 0);
        let g = gate(&spread, 128, 37, 13);
        assert_eq!(g.accepted.len(), 13);
        assert!(g.accepted.iter().all(|r| (r.tick as i64 - 37).abs() <= 6));
    }

    #[test]
    fn frame_assignment() {
        assert_eq!(frame_of(37, 128, 37), Some(0));
        assert_eq!(frame_of(128 + 37 - 64, 128, 37), Some(1));
        assert_eq!(frame_of(128 + 37 - 65, 128, 37), Some(0));
        assert_eq!(frame_of(0, 128, 100), None);
    }

    fn alice(frame: u64, p: Polarization, class: ClassLabel) -> AliceEntry {
        AliceEntry {
            frame,
            bit: p.bit(),
            basis: p.basis(),
            class,
        }
    }

    #[test]
    fn sift_error_free_matched() {
        let mut alice_log = Vec::new();
        let mut recs = Vec::new();
        for k in 0..400u64 {
            let p = Polarization::ALL[(k % 4) as usize];
            alice_log.push(alice(k, p, ClassLabel::Signal));
            recs.push(TimeTagRecord::new(k * 128 + 40, p.index() as u8).unwrap());
        }
        let g = gate(&recs, 128, 40, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let key = sift(&alice_log, &g, &ChannelMap::default(), &mut rng);
        assert_eq!(key.len(), 400);
        assert_eq!(key.qber(), Some(0.0));
        assert_eq!(key.class(ClassLabel::Signal).detections, 400);
        assert_eq!(key.collisions, 0);
    }

    #[test]
    fn sift_collisions_and_unmatched() {
        let alice_log = vec![alice(0, Polarization::H, ClassLabel::Decoy1)];
        let recs = vec![
            TimeTagRecord::new(40, 0).unwrap(),
            TimeTagRecord::new(41, 1).unwrap(),
            TimeTagRecord::new(128 + 40, 0).unwrap(),
        ];
        let g = gate(&recs, 128, 40, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let key = sift(&alice_log, &g, &ChannelMap::default(), &mut rng);
        assert_eq!(key.collisions, 1);
        assert_eq!(key.unmatched, 1);
        assert_eq!(key.class(ClassLabel::Decoy1).detections, 1);
    }

    #[test]
    fn alice_log_csv() {
        let log = vec![
            alice(5, Polarization::A, ClassLabel::Decoy2),
            alice(2, Polarization::H, ClassLabel::Signal),
        ];
        let mut buf = Vec::new();
        write_alice_log(&mut buf, &log).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("frame,bit,basis,class\n"));
        let back = read_alice_log(buf.as_slice()).unwrap();
        assert_eq!(back[0], log[1]);
        assert_eq!(back[1], log[0]);
        assert!(read_alice_log("frame,bit,basis,class\n1,0,Q,signal\n".as_bytes()).is_err());
    }

    #[test]
    fn sidecar_round_trip() {
        let s = StreamSidecar::new(128, 64, 13, &ChannelMap::default(), 1000, [800, 150, 50]);
        let back = StreamSidecar::from_toml_str(&s.to_toml_string()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.channel_map().unwrap(), ChannelMap::default());
    }
}
