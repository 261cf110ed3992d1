//! Note events, octuple compound tokens and their vocabularies.
//!
//! A note is the fundamental unit: each [`NoteEvent`] quantizes to exactly one
//! [`OctupleToken`] carrying eight attribute indices (pitch, velocity,
//! duration, instrument, position, bar, time signature, tempo). Sequences are
//! kept in a canonical order so that the track/bar view transforms are
//! well-defined bijections.
//!
//! The module also provides [`remi_plus_token_count`], which counts how many
//! 1-D event tokens the same score would occupy under an event-based scheme
//! (bar/position markers plus one event per note attribute). It exists only
//! for sequence-length comparisons against the compound representation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of attributes in a compound token.
pub const ATTRIBUTE_COUNT: usize = 8;

/// Normalized tick resolution; all onsets/durations are expressed at this
/// ticks-per-quarter-note after ingestion.
pub const TICKS_PER_QUARTER: u32 = 480;

/// The eight token attributes, in canonical storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Attribute {
    Pitch,
    Velocity,
    Duration,
    Instrument,
    Position,
    Bar,
    TimeSignature,
    Tempo,
}

impl Attribute {
    pub const ALL: [Attribute; ATTRIBUTE_COUNT] = [
        Attribute::Pitch,
        Attribute::Velocity,
        Attribute::Duration,
        Attribute::Instrument,
        Attribute::Position,
        Attribute::Bar,
        Attribute::TimeSignature,
        Attribute::Tempo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Pitch => "pitch",
            Attribute::Velocity => "velocity",
            Attribute::Duration => "duration",
            Attribute::Instrument => "instrument",
            Attribute::Position => "position",
            Attribute::Bar => "bar",
            Attribute::TimeSignature => "time_signature",
            Attribute::Tempo => "tempo",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Attribute::Pitch => 0,
            Attribute::Velocity => 1,
            Attribute::Duration => 2,
            Attribute::Instrument => 3,
            Attribute::Position => 4,
            Attribute::Bar => 5,
            Attribute::TimeSignature => 6,
            Attribute::Tempo => 7,
        }
    }
}

/// General MIDI programs of the thirteen chamber instruments used by the
/// four-part chorale corpus, plus acoustic grand (program 0) as the fallback
/// for files without program changes.
pub const DEFAULT_PROGRAMS: [u8; 14] = [0, 40, 41, 42, 43, 56, 57, 58, 60, 65, 68, 70, 71, 73];

/// A musical note with its context, prior to quantization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteEvent {
    /// MIDI pitch number, 0..=127.
    pub pitch: u8,
    /// MIDI velocity, 1..=127.
    pub velocity: u8,
    /// Onset in ticks from piece start at [`TICKS_PER_QUARTER`] resolution.
    #[serde(rename = "onset_ticks")]
    pub onset: u64,
    /// Length in ticks, >= 1.
    #[serde(rename = "duration_ticks")]
    pub duration: u64,
    /// General MIDI program number.
    pub instrument: u8,
    /// Tempo in beats per minute at the onset.
    #[serde(rename = "tempo_bpm")]
    pub tempo: f64,
    /// (numerator, denominator) at the onset.
    #[serde(rename = "timesig")]
    pub time_signature: (u8, u8),
}

impl NoteEvent {
    /// Checks the domain invariants that do not need a vocabulary.
    pub fn validate(&self) -> Result<()> {
        if self.pitch > 127 {
            return Err(Error::Contract(format!("pitch {} out of range", self.pitch)));
        }
        if self.velocity == 0 || self.velocity > 127 {
            return Err(Error::Contract(format!(
                "velocity {} out of range 1..=127",
                self.velocity
            )));
        }
        if self.duration == 0 {
            return Err(Error::Contract("duration must be >= 1 tick".into()));
        }
        if !(self.tempo > 0.0) || !self.tempo.is_finite() {
            return Err(Error::Contract(format!("tempo {} must be positive", self.tempo)));
        }
        Ok(())
    }
}

/// One note as eight attribute indices into an [`OctupleVocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OctupleToken {
    pub pitch_idx: u32,
    pub velocity_idx: u32,
    pub duration_idx: u32,
    pub instrument_idx: u32,
    pub position_idx: u32,
    pub bar_idx: u32,
    pub timesig_idx: u32,
    pub tempo_idx: u32,
}

impl OctupleToken {
    /// Attribute indices in [`Attribute::ALL`] order.
    pub fn as_array(&self) -> [u32; ATTRIBUTE_COUNT] {
        [
            self.pitch_idx,
            self.velocity_idx,
            self.duration_idx,
            self.instrument_idx,
            self.position_idx,
            self.bar_idx,
            self.timesig_idx,
            self.tempo_idx,
        ]
    }

    pub fn from_array(a: [u32; ATTRIBUTE_COUNT]) -> Self {
        OctupleToken {
            pitch_idx: a[0],
            velocity_idx: a[1],
            duration_idx: a[2],
            instrument_idx: a[3],
            position_idx: a[4],
            bar_idx: a[5],
            timesig_idx: a[6],
            tempo_idx: a[7],
        }
    }

    pub fn get(&self, attr: Attribute) -> u32 {
        self.as_array()[attr.index()]
    }

    /// Canonical ordering key: (bar, position, instrument, pitch, duration),
    /// with the remaining attributes as deterministic tie-breakers.
    fn sort_key(&self) -> (u32, u32, u32, u32, u32, u32, u32, u32) {
        (
            self.bar_idx,
            self.position_idx,
            self.instrument_idx,
            self.pitch_idx,
            self.duration_idx,
            self.velocity_idx,
            self.tempo_idx,
            self.timesig_idx,
        )
    }
}

/// Per-attribute value lists, bidirectional maps and quantization grids.
///
/// The defining lists are serialized as a versioned JSON file next to
/// checkpoints; lookup tables are rebuilt on load. Each attribute reserves a
/// PAD index (= real vocabulary size) and an end-of-group index (= real size
/// + 1) used only by the model; quantization of a real note never produces
/// either.
#[derive(Debug, Clone, PartialEq)]
pub struct OctupleVocabulary {
    ticks_per_quarter: u32,
    positions_per_bar: u32,
    max_bars: u32,
    /// Representative MIDI velocity per bin, ascending.
    velocity_bins: Vec<u8>,
    /// Duration grid values in ticks, ascending.
    duration_bins: Vec<u32>,
    /// Tempo grid values in bpm, ascending (log-spaced).
    tempo_bins: Vec<f64>,
    time_signatures: Vec<(u8, u8)>,
    /// Supported General MIDI programs, ascending.
    instruments: Vec<u8>,
    /// velocity value (1..=127) -> bin index.
    velocity_lookup: [u32; 128],
    /// program -> instrument index.
    instrument_lookup: [Option<u32>; 128],
}

/// Serialized form of [`OctupleVocabulary`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VocabularyFile {
    pub version: u32,
    pub ticks_per_quarter: u32,
    pub positions_per_bar: u32,
    pub max_bars: u32,
    pub velocity_bins: Vec<u8>,
    pub duration_bins: Vec<u32>,
    pub tempo_bins: Vec<f64>,
    pub time_signatures: Vec<(u8, u8)>,
    pub instruments: Vec<u8>,
}

pub const VOCABULARY_VERSION: u32 = 1;

impl Default for OctupleVocabulary {
    fn default() -> Self {
        OctupleVocabulary::new()
    }
}

impl OctupleVocabulary {
    /// The default vocabulary: 128 pitches, 32 velocity bins, 64 duration
    /// bins on a 1/16-bar grid up to four bars, 16 positions per bar, 256
    /// bars, 49 log-spaced tempo bins over 16..=256 bpm, four time
    /// signatures and the fourteen default programs.
    pub fn new() -> Self {
        let bar_ticks = 4 * TICKS_PER_QUARTER; // duration grid anchored to 4/4
        let slot = bar_ticks / 16; // 120 ticks
        let duration_bins: Vec<u32> = (1..=64).map(|i| i * slot).collect();
        // 12 bins per doubling: 16 * 2^(i/12), i = 0..=48
        let tempo_bins: Vec<f64> =
            (0..49).map(|i| 16.0 * (2f64).powf(i as f64 / 12.0)).collect();
        // 32 uniform bins over 1..=127, represented by their median value
        let mut members: Vec<Vec<u8>> = vec![Vec::new(); 32];
        for v in 1..=127u32 {
            let bin = ((v - 1) * 32 / 127).min(31);
            members[bin as usize].push(v as u8);
        }
        let velocity_bins: Vec<u8> = members.iter().map(|m| m[m.len() / 2]).collect();
        Self::from_parts(
            TICKS_PER_QUARTER,
            16,
            256,
            velocity_bins,
            duration_bins,
            tempo_bins,
            vec![(4, 4), (3, 4), (2, 4), (6, 8)],
            DEFAULT_PROGRAMS.to_vec(),
        )
        .expect("default vocabulary is valid")
    }

    #[allow(clippy::too_many_arguments)]
    fn from_parts(
        ticks_per_quarter: u32,
        positions_per_bar: u32,
        max_bars: u32,
        velocity_bins: Vec<u8>,
        duration_bins: Vec<u32>,
        tempo_bins: Vec<f64>,
        time_signatures: Vec<(u8, u8)>,
        mut instruments: Vec<u8>,
    ) -> Result<Self> {
        instruments.sort_unstable();
        instruments.dedup();
        if velocity_bins.is_empty() || duration_bins.len() < 2 || tempo_bins.is_empty() {
            return Err(Error::Config("vocabulary bins must be non-empty".into()));
        }
        let mut velocity_lookup = [0u32; 128];
        for v in 1..=127u8 {
            // nearest representative, ties toward the lower bin
            let mut best = 0u32;
            let mut best_d = i32::MAX;
            for (i, &r) in velocity_bins.iter().enumerate() {
                let d = (v as i32 - r as i32).abs();
                if d < best_d {
                    best_d = d;
                    best = i as u32;
                }
            }
            velocity_lookup[v as usize] = best;
        }
        let mut instrument_lookup = [None; 128];
        for (i, &p) in instruments.iter().enumerate() {
            instrument_lookup[p as usize] = Some(i as u32);
        }
        Ok(OctupleVocabulary {
            ticks_per_quarter,
            positions_per_bar,
            max_bars,
            velocity_bins,
            duration_bins,
            tempo_bins,
            time_signatures,
            instruments,
            velocity_lookup,
            instrument_lookup,
        })
    }

    pub fn to_file(&self) -> VocabularyFile {
        VocabularyFile {
            version: VOCABULARY_VERSION,
            ticks_per_quarter: self.ticks_per_quarter,
            positions_per_bar: self.positions_per_bar,
            max_bars: self.max_bars,
            velocity_bins: self.velocity_bins.clone(),
            duration_bins: self.duration_bins.clone(),
            tempo_bins: self.tempo_bins.clone(),
            time_signatures: self.time_signatures.clone(),
            instruments: self.instruments.clone(),
        }
    }

    pub fn from_file(f: VocabularyFile) -> Result<Self> {
        if f.version != VOCABULARY_VERSION {
            return Err(Error::Config(format!(
                "unsupported vocabulary version {} (expected {})",
                f.version, VOCABULARY_VERSION
            )));
        }
        Self::from_parts(
            f.ticks_per_quarter,
            f.positions_per_bar,
            f.max_bars,
            f.velocity_bins,
            f.duration_bins,
            f.tempo_bins,
            f.time_signatures,
            f.instruments,
        )
    }

    /// Stable FNV-1a fingerprint of the serialized vocabulary, used to detect
    /// checkpoint/corpus mismatches.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(&self.to_file()).expect("vocab serializes");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in json.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }

    pub fn ticks_per_quarter(&self) -> u32 {
        self.ticks_per_quarter
    }

    pub fn positions_per_bar(&self) -> u32 {
        self.positions_per_bar
    }

    pub fn max_bars(&self) -> u32 {
        self.max_bars
    }

    pub fn instruments(&self) -> &[u8] {
        &self.instruments
    }

    pub fn time_signatures(&self) -> &[(u8, u8)] {
        &self.time_signatures
    }

    pub fn velocity_bins(&self) -> &[u8] {
        &self.velocity_bins
    }

    pub fn duration_bins(&self) -> &[u32] {
        &self.duration_bins
    }

    pub fn tempo_bins(&self) -> &[f64] {
        &self.tempo_bins
    }

    /// Real vocabulary size (excluding the reserved PAD/end-of-group slots).
    pub fn size(&self, attr: Attribute) -> usize {
        match attr {
            Attribute::Pitch => 128,
            Attribute::Velocity => self.velocity_bins.len(),
            Attribute::Duration => self.duration_bins.len(),
            Attribute::Instrument => self.instruments.len(),
            Attribute::Position => self.positions_per_bar as usize,
            Attribute::Bar => self.max_bars as usize,
            Attribute::TimeSignature => self.time_signatures.len(),
            Attribute::Tempo => self.tempo_bins.len(),
        }
    }

    /// Reserved padding index for an attribute.
    pub fn pad_index(&self, attr: Attribute) -> u32 {
        self.size(attr) as u32
    }

    /// Reserved end-of-group index for an attribute (used by the decoders).
    pub fn eog_index(&self, attr: Attribute) -> u32 {
        self.size(attr) as u32 + 1
    }

    /// Vocabulary size as seen by the model: real values + PAD + end-of-group.
    pub fn model_size(&self, attr: Attribute) -> usize {
        self.size(attr) + 2
    }

    pub fn model_sizes(&self) -> [usize; ATTRIBUTE_COUNT] {
        let mut out = [0; ATTRIBUTE_COUNT];
        for (i, a) in Attribute::ALL.iter().enumerate() {
            out[i] = self.model_size(*a);
        }
        out
    }

    /// A token whose every attribute is the PAD index.
    pub fn pad_token(&self) -> OctupleToken {
        let mut a = [0u32; ATTRIBUTE_COUNT];
        for (i, attr) in Attribute::ALL.iter().enumerate() {
            a[i] = self.pad_index(*attr);
        }
        OctupleToken::from_array(a)
    }

    /// Ticks per position slot under a time signature. The per-bar grid keeps
    /// [`positions_per_bar`](Self::positions_per_bar) slots regardless of bar
    /// length.
    pub fn slot_ticks(&self, timesig: (u8, u8)) -> Result<u64> {
        let (num, den) = timesig;
        if num == 0 || den == 0 || !den.is_power_of_two() {
            return Err(Error::Contract(format!("invalid time signature {num}/{den}")));
        }
        let bar_ticks = num as u64 * 4 * self.ticks_per_quarter as u64 / den as u64;
        if !bar_ticks.is_multiple_of(self.positions_per_bar as u64) {
            return Err(Error::Contract(format!(
                "bar of {num}/{den} ({bar_ticks} ticks) not divisible into {} positions",
                self.positions_per_bar
            )));
        }
        Ok(bar_ticks / self.positions_per_bar as u64)
    }

    fn timesig_index(&self, ts: (u8, u8)) -> Option<u32> {
        self.time_signatures.iter().position(|&t| t == ts).map(|i| i as u32)
    }

    fn tempo_index(&self, bpm: f64) -> Option<u32> {
        let lo = self.tempo_bins[0];
        let hi = *self.tempo_bins.last().unwrap();
        // reject tempos more than half a bin outside the grid
        let step = (self.tempo_bins.get(1).copied().unwrap_or(lo * 2.0) / lo).sqrt();
        if !(bpm >= lo / step && bpm <= hi * step) {
            return None;
        }
        let ln = bpm.ln();
        let mut best = 0u32;
        let mut best_d = f64::INFINITY;
        for (i, &t) in self.tempo_bins.iter().enumerate() {
            let d = (ln - t.ln()).abs();
            // strict < keeps ties on the earlier (slower) bin
            if d < best_d {
                best_d = d;
                best = i as u32;
            }
        }
        Some(best)
    }

    /// Round-to-nearest on a uniform grid with ties toward the earlier point.
    fn grid_round(value: u64, step: u64) -> u64 {
        let half = step / 2;
        let tie_down = step.is_multiple_of(2) as u64;
        (value + half - tie_down.min(half)) / step
    }

    /// Quantize one note. Errors name the note and the failing attribute.
    pub fn quantize(&self, note: &NoteEvent, note_index: usize) -> Result<OctupleToken> {
        note.validate().map_err(|e| Error::Encoding {
            note_index,
            attribute: "note",
            message: e.to_string(),
        })?;
        let err = |attribute: &'static str, message: String| Error::Encoding {
            note_index,
            attribute,
            message,
        };

        let instrument_idx = self
            .instrument_lookup
            .get(note.instrument as usize)
            .copied()
            .flatten()
            .ok_or_else(|| {
                err("instrument", format!("program {} not in vocabulary", note.instrument))
            })?;

        let timesig_idx = self.timesig_index(note.time_signature).ok_or_else(|| {
            err(
                "time_signature",
                format!(
                    "{}/{} not in vocabulary",
                    note.time_signature.0, note.time_signature.1
                ),
            )
        })?;

        let slot = self
            .slot_ticks(note.time_signature)
            .map_err(|e| err("time_signature", e.to_string()))?;
        let grid = Self::grid_round(note.onset, slot);
        let ppb = self.positions_per_bar as u64;
        let bar = grid / ppb;
        let position = grid % ppb;
        if bar >= self.max_bars as u64 {
            return Err(err("bar", format!("bar {bar} exceeds maximum {}", self.max_bars - 1)));
        }

        // round to the nearest duration grid value; ties toward shorter
        let duration_idx = {
            let mut best = 0u32;
            let mut best_d = u64::MAX;
            for (i, &d) in self.duration_bins.iter().enumerate() {
                let dist = note.duration.abs_diff(d as u64);
                if dist < best_d {
                    best_d = dist;
                    best = i as u32;
                }
            }
            let last = *self.duration_bins.last().unwrap() as u64;
            let prev = self.duration_bins[self.duration_bins.len() - 2] as u64;
            if note.duration > last + (last - prev) / 2 {
                return Err(err(
                    "duration",
                    format!("{} ticks exceeds the longest bin {last}", note.duration),
                ));
            }
            best
        };

        let tempo_idx = self
            .tempo_index(note.tempo)
            .ok_or_else(|| err("tempo", format!("{} bpm outside bin range", note.tempo)))?;

        Ok(OctupleToken {
            pitch_idx: note.pitch as u32,
            velocity_idx: self.velocity_lookup[note.velocity as usize],
            duration_idx,
            instrument_idx,
            position_idx: position as u32,
            bar_idx: bar as u32,
            timesig_idx,
            tempo_idx,
        })
    }

    /// Invert one token back to a grid-aligned note.
    pub fn dequantize(&self, token: &OctupleToken, token_index: usize) -> Result<NoteEvent> {
        let check = |attribute: &'static str, index: u32, vocab_size: usize| -> Result<()> {
            if (index as usize) < vocab_size {
                Ok(())
            } else {
                Err(Error::Decoding { token_index, attribute, index, vocab_size })
            }
        };
        check("pitch", token.pitch_idx, self.size(Attribute::Pitch))?;
        check("velocity", token.velocity_idx, self.velocity_bins.len())?;
        check("duration", token.duration_idx, self.duration_bins.len())?;
        check("instrument", token.instrument_idx, self.instruments.len())?;
        check("position", token.position_idx, self.positions_per_bar as usize)?;
        check("bar", token.bar_idx, self.max_bars as usize)?;
        check("time_signature", token.timesig_idx, self.time_signatures.len())?;
        check("tempo", token.tempo_idx, self.tempo_bins.len())?;

        let ts = self.time_signatures[token.timesig_idx as usize];
        let slot = self.slot_ticks(ts)?;
        let onset = (token.bar_idx as u64 * self.positions_per_bar as u64
            + token.position_idx as u64)
            * slot;
        Ok(NoteEvent {
            pitch: token.pitch_idx as u8,
            velocity: self.velocity_bins[token.velocity_idx as usize],
            onset,
            duration: self.duration_bins[token.duration_idx as usize] as u64,
            instrument: self.instruments[token.instrument_idx as usize],
            tempo: self.tempo_bins[token.tempo_idx as usize],
            time_signature: ts,
        })
    }

    /// True when every attribute of `token` is its PAD index.
    pub fn is_pad(&self, token: &OctupleToken) -> bool {
        Attribute::ALL.iter().all(|&a| token.get(a) == self.pad_index(a))
    }

    /// Validate that every attribute refers to a real vocabulary value.
    pub fn validate_token(&self, token: &OctupleToken, token_index: usize) -> Result<()> {
        self.dequantize(token, token_index).map(|_| ())
    }
}

/// The canonical token sequence of one piece.
///
/// Tokens are always held sorted by (bar, position, instrument, pitch,
/// duration) with the remaining attributes as tie-breakers, so equal
/// multisets of tokens compare equal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<OctupleToken>,
    pub provenance: Option<String>,
}

impl TokenSequence {
    pub fn new(mut tokens: Vec<OctupleToken>, provenance: Option<String>) -> Self {
        tokens.sort_by_key(|t| t.sort_key());
        TokenSequence { tokens, provenance }
    }

    pub fn tokens(&self) -> &[OctupleToken] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Quantize a score into its canonical token sequence; exactly one token per
/// note. Mid-piece time-signature changes are rejected (the supported corpora
/// are uniform within a piece).
pub fn encode_score(events: &[NoteEvent], vocab: &OctupleVocabulary) -> Result<TokenSequence> {
    if let Some(first) = events.first() {
        if let Some((i, e)) = events
            .iter()
            .enumerate()
            .find(|(_, e)| e.time_signature != first.time_signature)
        {
            return Err(Error::Encoding {
                note_index: i,
                attribute: "time_signature",
                message: format!(
                    "changes mid-piece ({}/{} vs {}/{}), which is not supported",
                    e.time_signature.0,
                    e.time_signature.1,
                    first.time_signature.0,
                    first.time_signature.1
                ),
            });
        }
    }
    let tokens = events
        .iter()
        .enumerate()
        .map(|(i, e)| vocab.quantize(e, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(TokenSequence::new(tokens, None))
}

/// Decode a token sequence back to grid-aligned notes. PAD tokens are
/// skipped; any other out-of-range index is an error.
pub fn decode_sequence(seq: &TokenSequence, vocab: &OctupleVocabulary) -> Result<Vec<NoteEvent>> {
    let mut out = Vec::with_capacity(seq.len());
    for (i, token) in seq.tokens().iter().enumerate() {
        if vocab.is_pad(token) {
            continue;
        }
        out.push(vocab.dequantize(token, i)?);
    }
    Ok(out)
}

/// Count the 1-D event tokens the score would occupy under an event-based
/// scheme:
///
/// - one bar marker per bar from bar 0 through the last occupied bar;
/// - one position event per distinct (bar, position) onset on the vocabulary
///   grid;
/// - instrument, pitch, velocity and duration events for every note;
/// - a tempo event and a time-signature event at the start and at each
///   change point (in onset order).
///
/// Empty scores count zero tokens.
pub fn remi_plus_token_count(events: &[NoteEvent], vocab: &OctupleVocabulary) -> Result<usize> {
    if events.is_empty() {
        return Ok(0);
    }
    let mut sorted: Vec<&NoteEvent> = events.iter().collect();
    sorted.sort_by(|a, b| {
        a.onset
            .cmp(&b.onset)
            .then(a.instrument.cmp(&b.instrument))
            .then(a.pitch.cmp(&b.pitch))
    });

    let mut onsets = BTreeSet::new();
    let mut max_bar = 0u64;
    for (i, e) in sorted.iter().enumerate() {
        let slot = vocab.slot_ticks(e.time_signature).map_err(|err| Error::Encoding {
            note_index: i,
            attribute: "time_signature",
            message: err.to_string(),
        })?;
        let grid = OctupleVocabulary::grid_round(e.onset, slot);
        let ppb = vocab.positions_per_bar() as u64;
        onsets.insert((grid / ppb, grid % ppb));
        max_bar = max_bar.max(grid / ppb);
    }

    let mut tempo_events = 1usize;
    let mut timesig_events = 1usize;
    for w in sorted.windows(2) {
        if w[1].tempo != w[0].tempo {
            tempo_events += 1;
        }
        if w[1].time_signature != w[0].time_signature {
            timesig_events += 1;
        }
    }

    let bar_events = max_bar as usize + 1;
    let position_events = onsets.len();
    let note_events = 4 * events.len(); // instrument, pitch, velocity, duration
    Ok(bar_events + position_events + note_events + tempo_events + timesig_events)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn note(pitch: u8, onset: u64, duration: u64, instrument: u8) -> NoteEvent {
        NoteEvent {
            pitch,
            velocity: 80,
            onset,
            duration,
            instrument,
            tempo: 120.0,
            time_signature: (4, 4),
        }
    }

    #[test]
    fn c4_quarter_at_origin() {
        let vocab = OctupleVocabulary::new();
        let seq = encode_score(&[note(60, 0, 480, 40)], &vocab).unwrap();
        assert_eq!(seq.len(), 1);
        let t = seq.tokens()[0];
        assert_eq!(t.pitch_idx, 60);
        assert_eq!(t.position_idx, 0);
        assert_eq!(t.bar_idx, 0);
        assert_eq!(t.duration_idx, 3); // 480 ticks = 4 * 120
        assert_eq!(t.instrument_idx, 1); // program 40 sorts after program 0
    }

    #[test]
    fn position_rounds_to_nearest_slot() {
        // 719 ticks with 120-tick slots -> 5.99 slots -> slot 6
        let vocab = OctupleVocabulary::new();
        let seq = encode_score(&[note(60, 719, 480, 40)], &vocab).unwrap();
        assert_eq!(seq.tokens()[0].position_idx, 6);
        assert_eq!(seq.tokens()[0].bar_idx, 0);
    }

    #[test]
    fn position_ties_round_earlier() {
        // 60 ticks sits exactly between slot 0 and slot 1
        let vocab = OctupleVocabulary::new();
        let seq = encode_score(&[note(60, 60, 480, 40)], &vocab).unwrap();
        assert_eq!(seq.tokens()[0].position_idx, 0);
    }

    #[test]
    fn onset_near_bar_end_wraps_to_next_bar() {
        let vocab = OctupleVocabulary::new();
        let seq = encode_score(&[note(60, 1900, 480, 40)], &vocab).unwrap();
        assert_eq!(seq.tokens()[0].bar_idx, 1);
        assert_eq!(seq.tokens()[0].position_idx, 0);
    }

    #[test]
    fn token_count_equals_note_count() {
        let vocab = OctupleVocabulary::new();
        let mut events = Vec::new();
        for bar in 0..8u64 {
            for (part, &prog) in [40u8, 41, 42, 43].iter().enumerate() {
                for beat in 0..4u64 {
                    events.push(note(
                        (70 - 8 * part as i32) as u8,
                        bar * 1920 + beat * 480,
                        480,
                        prog,
                    ));
                }
            }
        }
        assert_eq!(events.len(), 128);
        let seq = encode_score(&events, &vocab).unwrap();
        assert_eq!(seq.len(), 128);
    }

    #[test]
    fn encode_decode_round_trip_on_grid() {
        let vocab = OctupleVocabulary::new();
        let events =
            vec![note(60, 0, 480, 40), note(64, 480, 240, 41), note(55, 1920, 960, 42)];
        let seq = encode_score(&events, &vocab).unwrap();
        let decoded = decode_sequence(&seq, &vocab).unwrap();
        let seq2 = encode_score(&decoded, &vocab).unwrap();
        assert_eq!(seq, seq2);
    }

    #[test]
    fn decode_empty_and_pad_only() {
        let vocab = OctupleVocabulary::new();
        let empty = TokenSequence::new(vec![], None);
        assert!(decode_sequence(&empty, &vocab).unwrap().is_empty());
        let pads = TokenSequence::new(vec![vocab.pad_token(); 3], None);
        assert!(decode_sequence(&pads, &vocab).unwrap().is_empty());
    }

    #[test]
    fn decode_rejects_out_of_range() {
        let vocab = OctupleVocabulary::new();
        let mut t = vocab.pad_token();
        t.pitch_idx = 60; // mixed pad/real token: pitch real, velocity still PAD
        let seq = TokenSequence::new(vec![t], None);
        let err = decode_sequence(&seq, &vocab).unwrap_err();
        assert!(matches!(err, Error::Decoding { attribute: "velocity", .. }));
    }

    #[test]
    fn encode_rejects_unknown_instrument() {
        let vocab = OctupleVocabulary::new();
        let err = encode_score(&[note(60, 0, 480, 99)], &vocab).unwrap_err();
        match err {
            Error::Encoding { note_index, attribute, .. } => {
                assert_eq!(note_index, 0);
                assert_eq!(attribute, "instrument");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn encode_rejects_overlong_duration() {
        let vocab = OctupleVocabulary::new();
        let err = encode_score(&[note(60, 0, 9000, 40)], &vocab).unwrap_err();
        assert!(matches!(err, Error::Encoding { attribute: "duration", .. }));
    }

    #[test]
    fn encode_rejects_bar_overflow() {
        let vocab = OctupleVocabulary::new();
        let err = encode_score(&[note(60, 256 * 1920, 480, 40)], &vocab).unwrap_err();
        assert!(matches!(err, Error::Encoding { attribute: "bar", .. }));
    }

    #[test]
    fn velocity_representatives_round_trip() {
        let vocab = OctupleVocabulary::new();
        for bin in 0..vocab.size(Attribute::Velocity) as u32 {
            let rep = vocab.velocity_bins[bin as usize];
            assert_eq!(vocab.velocity_lookup[rep as usize], bin);
        }
    }

    #[test]
    fn tempo_bins_round_trip() {
        let vocab = OctupleVocabulary::new();
        for i in 0..vocab.size(Attribute::Tempo) as u32 {
            let bpm = vocab.tempo_bins[i as usize];
            assert_eq!(vocab.tempo_index(bpm), Some(i));
        }
        assert_eq!(vocab.tempo_index(8.0), None);
        assert_eq!(vocab.tempo_index(400.0), None);
    }

    #[test]
    fn remi_counts() {
        let vocab = OctupleVocabulary::new();
        assert_eq!(remi_plus_token_count(&[], &vocab).unwrap(), 0);
        // one note: 1 bar + 1 position + 4 note events + tempo + timesig = 8
        let one = remi_plus_token_count(&[note(60, 0, 480, 40)], &vocab).unwrap();
        assert_eq!(one, 8);
        assert!(one >= 5);
        // a simultaneous chord shares its bar and position events
        let chord: Vec<NoteEvent> =
            [40u8, 41, 42, 43].iter().map(|&p| note(60, 0, 480, p)).collect();
        assert_eq!(remi_plus_token_count(&chord, &vocab).unwrap(), 1 + 1 + 16 + 2);
    }

    #[test]
    fn remi_at_least_four_per_note() {
        let vocab = OctupleVocabulary::new();
        let events: Vec<NoteEvent> = (0..50).map(|i| note(60, i * 120, 120, 40)).collect();
        let count = remi_plus_token_count(&events, &vocab).unwrap();
        assert!(count >= 4 * events.len());
    }

    #[test]
    fn canonical_order_is_stable_under_shuffle() {
        let vocab = OctupleVocabulary::new();
        let events = vec![note(64, 480, 240, 41), note(60, 0, 480, 40), note(55, 0, 960, 42)];
        let mut reversed = events.clone();
        reversed.reverse();
        assert_eq!(
            encode_score(&events, &vocab).unwrap(),
            encode_score(&reversed, &vocab).unwrap()
        );
    }

    #[test]
    fn default_vocabulary_has_the_documented_bin_counts() {
        let vocab = OctupleVocabulary::new();
        assert_eq!(vocab.size(Attribute::Pitch), 128);
        assert_eq!(vocab.size(Attribute::Velocity), 32);
        assert_eq!(vocab.size(Attribute::Duration), 64);
        assert_eq!(vocab.size(Attribute::Instrument), 14);
        assert_eq!(vocab.size(Attribute::Position), 16);
        assert_eq!(vocab.size(Attribute::Bar), 256);
        assert_eq!(vocab.size(Attribute::TimeSignature), 4);
        assert_eq!(vocab.size(Attribute::Tempo), 49);
        // duration grid spans one sixteenth of a bar up to four bars
        assert_eq!(vocab.duration_bins()[0], 120);
        assert_eq!(*vocab.duration_bins().last().unwrap(), 4 * 1920);
        // tempo grid spans 16..=256 bpm, twelve bins per doubling
        assert!((vocab.tempo_bins()[0] - 16.0).abs() < 1e-12);
        assert!((vocab.tempo_bins()[48] - 256.0).abs() < 1e-9);
        assert!((vocab.tempo_bins()[12] - 32.0).abs() < 1e-9);
    }

    #[test]
    fn vocabulary_file_round_trip_and_fingerprint() {
        let vocab = OctupleVocabulary::new();
        let json = serde_json::to_string(&vocab.to_file()).unwrap();
        let back = OctupleVocabulary::from_file(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(vocab, back);
        assert_eq!(vocab.fingerprint(), back.fingerprint());
    }
}
