//! Standard MIDI File (formats 0 and 1) reading and writing, plus the JSON
//! note-list interchange format used by fixtures and the synthetic corpus.
//!
//! Parsing normalizes all times to [`TICKS_PER_QUARTER`] ticks per quarter
//! note, closes unpaired note-ons at track end, takes instruments from
//! program-change events (default program 0) and attaches the tempo and time
//! signature in effect at each note's onset. Control changes, pitch bends,
//! aftertouch and sysex data are skipped. SMPTE divisions and SMF format 2
//! are rejected.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::octuple::{NoteEvent, TICKS_PER_QUARTER};

const DEFAULT_TEMPO_BPM: f64 = 120.0;
const DEFAULT_TIMESIG: (u8, u8) = (4, 4);

/// Parse a Standard MIDI File into note events, sorted by
/// (onset, instrument, pitch, duration, velocity).
pub fn load_smf(path: impl AsRef<Path>) -> Result<Vec<NoteEvent>> {
    let bytes = fs::read(path.as_ref())
        .map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
    parse_smf(&bytes)
}

/// Parse SMF bytes; see [`load_smf`].
pub fn parse_smf(bytes: &[u8]) -> Result<Vec<NoteEvent>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != b"MThd" {
        return Err(r.err_at(0, "missing MThd header"));
    }
    let header_len = r.u32()?;
    if header_len < 6 {
        return Err(r.err_here(&format!("header length {header_len} < 6")));
    }
    let format = r.u16()?;
    if format > 1 {
        return Err(Error::UnsupportedSmfFormat(format));
    }
    let ntrks = r.u16()?;
    let division = r.u16()?;
    if division & 0x8000 != 0 {
        return Err(r.err_here("SMPTE division is not supported"));
    }
    if division == 0 {
        return Err(r.err_here("division must be positive"));
    }
    r.skip(header_len as usize - 6)?;

    let mut raw_notes: Vec<RawNote> = Vec::new();
    let mut tempo_map: Vec<(u64, f64)> = Vec::new(); // (raw tick, bpm)
    let mut timesig_map: Vec<(u64, (u8, u8))> = Vec::new();

    for _ in 0..ntrks {
        parse_track(&mut r, &mut raw_notes, &mut tempo_map, &mut timesig_map)?;
    }

    tempo_map.sort_by_key(|&(t, _)| t);
    timesig_map.sort_by_key(|&(t, _)| t);

    let scale = |t: u64| -> u64 {
        // round-to-nearest tick at the normalized resolution
        (t * TICKS_PER_QUARTER as u64 + division as u64 / 2) / division as u64
    };

    let mut events: Vec<NoteEvent> = raw_notes
        .iter()
        .map(|n| {
            let onset = scale(n.onset);
            let end = scale(n.end.max(n.onset + 1));
            NoteEvent {
                pitch: n.pitch,
                velocity: n.velocity.max(1),
                onset,
                duration: (end - onset).max(1),
                instrument: n.program,
                tempo: lookup(&tempo_map, n.onset).unwrap_or(DEFAULT_TEMPO_BPM),
                time_signature: lookup(&timesig_map, n.onset).unwrap_or(DEFAULT_TIMESIG),
            }
        })
        .collect();
    sort_events(&mut events);
    Ok(events)
}

fn lookup<T: Copy>(map: &[(u64, T)], tick: u64) -> Option<T> {
    map.iter().take_while(|&&(t, _)| t <= tick).last().map(|&(_, v)| v)
}

fn sort_events(events: &mut [NoteEvent]) {
    events.sort_by(|a, b| {
        (a.onset, a.instrument, a.pitch, a.duration, a.velocity)
            .cmp(&(b.onset, b.instrument, b.pitch, b.duration, b.velocity))
    });
}

struct RawNote {
    onset: u64,
    end: u64,
    pitch: u8,
    velocity: u8,
    program: u8,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err_here(&self, message: &str) -> Error {
        self.err_at(self.pos, message)
    }

    fn err_at(&self, offset: usize, message: &str) -> Error {
        Error::MidiParse { offset, message: message.to_string() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err_here("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn skip(&mut self, n: usize) -> Result<()> {
        self.take(n).map(|_| ())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn varlen(&mut self) -> Result<u64> {
        let mut value: u64 = 0;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | (b & 0x7f) as u64;
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(self.err_here("variable-length quantity longer than 4 bytes"))
    }
}

fn parse_track(
    r: &mut Reader,
    notes: &mut Vec<RawNote>,
    tempo_map: &mut Vec<(u64, f64)>,
    timesig_map: &mut Vec<(u64, (u8, u8))>,
) -> Result<()> {
    let chunk_start = r.pos;
    let magic = r.take(4)?;
    if magic != b"MTrk" {
        // unknown chunks are skipped per the SMF specification
        let len = r.u32()?;
        if magic == b"MThd" {
            return Err(r.err_at(chunk_start, "unexpected second MThd chunk"));
        }
        return r.skip(len as usize);
    }
    let len = r.u32()? as usize;
    let end = r.pos + len;
    if end > r.bytes.len() {
        return Err(r.err_at(chunk_start, "track length exceeds file size"));
    }

    let mut tick: u64 = 0;
    let mut running_status: Option<u8> = None;
    let mut programs = [0u8; 16];
    // open note-ons per (channel, pitch), FIFO
    let mut open: Vec<(u8, u8, usize)> = Vec::new();

    while r.pos < end {
        tick += r.varlen()?;
        let status_pos = r.pos;
        let mut status = r.u8()?;
        if status < 0x80 {
            // running status: byte already consumed is the first data byte
            status = running_status
                .ok_or_else(|| r.err_at(status_pos, "data byte without running status"))?;
            r.pos = status_pos;
        }
        match status & 0xf0 {
            0x80 | 0x90 => {
                running_status = Some(status);
                let channel = status & 0x0f;
                let pitch = r.u8()? & 0x7f;
                let velocity = r.u8()? & 0x7f;
                let is_on = status & 0xf0 == 0x90 && velocity > 0;
                if is_on {
                    open.push((channel, pitch, notes.len()));
                    notes.push(RawNote {
                        onset: tick,
                        end: tick,
                        pitch,
                        velocity,
                        program: programs[channel as usize],
                    });
                } else if let Some(i) =
                    open.iter().position(|&(c, p, _)| c == channel && p == pitch)
                {
                    let (_, _, note_idx) = open.remove(i);
                    notes[note_idx].end = tick;
                }
                // orphan note-offs are ignored
            }
            0xa0 | 0xb0 | 0xe0 => {
                running_status = Some(status);
                r.skip(2)?;
            }
            0xc0 => {
                running_status = Some(status);
                let program = r.u8()? & 0x7f;
                programs[(status & 0x0f) as usize] = program;
            }
            0xd0 => {
                running_status = Some(status);
                r.skip(1)?;
            }
            0xf0 => match status {
                0xff => {
                    running_status = None;
                    let meta_type = r.u8()?;
                    let len = r.varlen()? as usize;
                    let data = r.take(len)?;
                    match meta_type {
                        0x51 => {
                            if data.len() != 3 {
                                return Err(r.err_at(status_pos, "tempo meta must be 3 bytes"));
                            }
                            let uspq = u32::from_be_bytes([0, data[0], data[1], data[2]]);
                            if uspq == 0 {
                                return Err(r.err_at(status_pos, "tempo of 0 us per quarter"));
                            }
                            tempo_map.push((tick, 60_000_000.0 / uspq as f64));
                        }
                        0x58 => {
                            if data.len() < 2 {
                                return Err(r.err_at(
                                    status_pos,
                                    "time-signature meta must be >= 2 bytes",
                                ));
                            }
                            if data[1] > 7 {
                                return Err(
                                    r.err_at(status_pos, "time-signature denominator too large")
                                );
                            }
                            timesig_map.push((tick, (data[0], 1u8 << data[1])));
                        }
                        0x2f => break, // end of track
                        _ => {}
                    }
                }
                0xf0 | 0xf7 => {
                    running_status = None;
                    let len = r.varlen()? as usize;
                    r.skip(len)?;
                }
                other => {
                    return Err(
                        r.err_at(status_pos, &format!("unsupported status byte 0x{other:02x}"))
                    );
                }
            },
            _ => unreachable!("status bytes are >= 0x80 here"),
        }
    }

    // close unpaired note-ons at the end of the track
    let track_end = tick;
    for (_, _, note_idx) in open {
        notes[note_idx].end = track_end.max(notes[note_idx].onset + 1);
    }
    r.pos = end;
    Ok(())
}

/// Write events as SMF format 1: tempo/time-signature metas on track 0, one
/// track per distinct instrument. Events at the same onset must agree on
/// tempo and time signature.
pub fn save_smf(events: &[NoteEvent], path: impl AsRef<Path>) -> Result<()> {
    let bytes = render_smf(events)?;
    fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path.as_ref().display().to_string(), e))
}

/// Render events to SMF bytes; see [`save_smf`].
pub fn render_smf(events: &[NoteEvent]) -> Result<Vec<u8>> {
    for e in events {
        e.validate()?;
        if !e.time_signature.1.is_power_of_two() || e.time_signature.1 == 0 {
            return Err(Error::Contract(format!(
                "time-signature denominator {} is not a power of two",
                e.time_signature.1
            )));
        }
    }
    let mut sorted: Vec<&NoteEvent> = events.iter().collect();
    sorted.sort_by_key(|e| (e.onset, e.instrument, e.pitch));

    // conductor track: tempo / time signature change points
    let mut meta = TrackWriter::new();
    let mut cur_tempo: Option<u32> = None;
    let mut cur_ts: Option<(u8, u8)> = None;
    for e in &sorted {
        let uspq = (60_000_000.0 / e.tempo).round() as u32;
        if cur_tempo != Some(uspq) {
            if let Some(prev) = cur_tempo {
                let prev_bpm = 60_000_000.0 / prev as f64;
                if sorted.iter().any(|o| o.onset == e.onset && o.tempo != e.tempo) {
                    return Err(Error::Contract(format!(
                        "conflicting tempos at tick {} ({} vs {})",
                        e.onset, prev_bpm, e.tempo
                    )));
                }
            }
            meta.meta(e.onset, 0x51, &uspq.to_be_bytes()[1..4]);
            cur_tempo = Some(uspq);
        }
        if cur_ts != Some(e.time_signature) {
            if sorted.iter().any(|o| o.onset == e.onset && o.time_signature != e.time_signature)
            {
                return Err(Error::Contract(format!(
                    "conflicting time signatures at tick {}",
                    e.onset
                )));
            }
            let (num, den) = e.time_signature;
            meta.meta(e.onset, 0x58, &[num, den.trailing_zeros() as u8, 24, 8]);
            cur_ts = Some(e.time_signature);
        }
    }
    if cur_tempo.is_none() {
        let uspq = (60_000_000.0 / DEFAULT_TEMPO_BPM) as u32;
        meta.meta(0, 0x51, &uspq.to_be_bytes()[1..4]);
        meta.meta(0, 0x58, &[4, 2, 24, 8]);
    }
    let mut tracks = vec![meta.finish()];

    // one track per instrument, channels 0..15 skipping the percussion channel
    let mut programs: Vec<u8> = sorted.iter().map(|e| e.instrument).collect();
    programs.sort_unstable();
    programs.dedup();
    for (i, &program) in programs.iter().enumerate() {
        let channel = {
            let c = (i % 15) as u8;
            if c >= 9 {
                c + 1
            } else {
                c
            }
        };
        let mut tw = TrackWriter::new();
        tw.push_event(0, &[0xc0 | channel, program]);
        // note-offs sort before note-ons at the same tick
        let mut moments: Vec<(u64, u8, u8, u8)> = Vec::new(); // (tick, kind 0=off 1=on, pitch, vel)
        for e in sorted.iter().filter(|e| e.instrument == program) {
            moments.push((e.onset, 1, e.pitch, e.velocity));
            moments.push((e.onset + e.duration, 0, e.pitch, 0));
        }
        moments.sort_unstable();
        for (tick, kind, pitch, vel) in moments {
            let status = if kind == 1 { 0x90 } else { 0x80 } | channel;
            tw.push_event(tick, &[status, pitch, vel]);
        }
        tracks.push(tw.finish());
    }

    let mut out = Vec::new();
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&(tracks.len() as u16).to_be_bytes());
    out.extend_from_slice(&(TICKS_PER_QUARTER as u16).to_be_bytes());
    for t in tracks {
        out.extend_from_slice(&t);
    }
    Ok(out)
}

struct TrackWriter {
    data: Vec<u8>,
    last_tick: u64,
}

impl TrackWriter {
    fn new() -> Self {
        TrackWriter { data: Vec::new(), last_tick: 0 }
    }

    fn delta(&mut self, tick: u64) {
        let mut delta = tick - self.last_tick;
        self.last_tick = tick;
        let mut buf = [0u8; 5];
        let mut i = 4;
        buf[i] = (delta & 0x7f) as u8;
        delta >>= 7;
        while delta > 0 {
            i -= 1;
            buf[i] = 0x80 | (delta & 0x7f) as u8;
            delta >>= 7;
        }
        self.data.extend_from_slice(&buf[i..]);
    }

    fn push_event(&mut self, tick: u64, bytes: &[u8]) {
        self.delta(tick);
        self.data.extend_from_slice(bytes);
    }

    fn meta(&mut self, tick: u64, meta_type: u8, data: &[u8]) {
        self.delta(tick);
        self.data.push(0xff);
        self.data.push(meta_type);
        self.data.push(data.len() as u8);
        self.data.extend_from_slice(data);
    }

    fn finish(mut self) -> Vec<u8> {
        self.data.extend_from_slice(&[0x00, 0xff, 0x2f, 0x00]);
        let mut out = Vec::with_capacity(self.data.len() + 8);
        out.extend_from_slice(b"MTrk");
        out.extend_from_slice(&(self.data.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.data);
        out
    }
}

/// Force a single piece-level tempo and time signature (the modal values)
/// onto every note. Model-reconstructed or generated token sequences can
/// carry inconsistent per-note tempo predictions; rendering them as one SMF
/// needs a coherent meta track.
pub fn harmonize_meta(events: &mut [NoteEvent]) {
    if events.is_empty() {
        return;
    }
    let mut tempo_votes: Vec<(u64, usize)> = Vec::new(); // (bpm bits, count)
    let mut ts_votes: Vec<((u8, u8), usize)> = Vec::new();
    for e in events.iter() {
        let bits = e.tempo.to_bits();
        match tempo_votes.iter_mut().find(|(b, _)| *b == bits) {
            Some((_, c)) => *c += 1,
            None => tempo_votes.push((bits, 1)),
        }
        match ts_votes.iter_mut().find(|(t, _)| *t == e.time_signature) {
            Some((_, c)) => *c += 1,
            None => ts_votes.push((e.time_signature, 1)),
        }
    }
    let tempo = f64::from_bits(tempo_votes.iter().max_by_key(|(_, c)| *c).unwrap().0);
    let ts = ts_votes.iter().max_by_key(|(_, c)| *c).unwrap().0;
    for e in events.iter_mut() {
        e.tempo = tempo;
        e.time_signature = ts;
    }
}

/// Read a JSON note list (array of objects with keys `pitch`, `velocity`,
/// `onset_ticks`, `duration_ticks`, `instrument`, `tempo_bpm`, `timesig`).
pub fn load_note_json(path: impl AsRef<Path>) -> Result<Vec<NoteEvent>> {
    let text = fs::read_to_string(path.as_ref())
        .map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
    let mut events: Vec<NoteEvent> = serde_json::from_str(&text)?;
    sort_events(&mut events);
    Ok(events)
}

/// Write a JSON note list; the inverse of [`load_note_json`].
pub fn save_note_json(events: &[NoteEvent], path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(events)?;
    fs::write(path.as_ref(), text).map_err(|e| Error::io(path.as_ref().display().to_string(), e))
}

/// Load either format by file extension (`.json` vs anything else = SMF).
pub fn load_events(path: impl AsRef<Path>) -> Result<Vec<NoteEvent>> {
    let p = path.as_ref();
    if p.extension().map(|e| e.eq_ignore_ascii_case("json")).unwrap_or(false) {
        load_note_json(p)
    } else {
        load_smf(p)
    }
}
