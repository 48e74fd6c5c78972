//! Standard MIDI File (format 0/1) parsing and writing.
//!
//! The parser covers exactly the event types downstream code consumes:
//! note-on/note-off, program change, set-tempo, time signature and
//! end-of-track. Everything else (SysEx, controllers, pitch bend,
//! aftertouch, other metas) is skipped over but must still be
//! structurally valid. Each SMF track is split into one logical track
//! per MIDI channel, mirroring the per-instrument view most MIDI
//! toolkits present.

use thiserror::Error;

pub const DEFAULT_TEMPO_BPM: f64 = 120.0;
pub const DEFAULT_TICKS_PER_QUARTER: u16 = 480;

/// One matched note. Velocity-0 note-ons are treated as note-offs during
/// parsing, so `velocity >= 1` always holds; `duration_ticks >= 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoteEvent {
    pub onset_ticks: u64,
    pub duration_ticks: u64,
    pub pitch: u8,
    pub velocity: u8,
    pub channel: u8,
}

/// A logical track: all notes of one (SMF track, channel) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackData {
    pub program: u8,
    pub is_drum: bool,
    pub events: Vec<NoteEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSignature {
    pub numerator: u8,
    pub denominator: u16,
    pub onset_ticks: u64,
}

/// In-memory timed-event document for one MIDI file.
#[derive(Debug, Clone, PartialEq)]
pub struct MidiDocument {
    pub ticks_per_quarter: u16,
    /// First tempo event wins; 120 BPM when absent.
    pub tempo_bpm: f64,
    pub tracks: Vec<TrackData>,
    pub time_signatures: Vec<TimeSignature>,
}

impl MidiDocument {
    pub fn empty() -> Self {
        MidiDocument {
            ticks_per_quarter: DEFAULT_TICKS_PER_QUARTER,
            tempo_bpm: DEFAULT_TEMPO_BPM,
            tracks: Vec::new(),
            time_signatures: Vec::new(),
        }
    }

    pub fn note_count(&self) -> usize {
        self.tracks.iter().map(|t| t.events.len()).sum()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MidiError {
    #[error("malformed header at byte {offset}: {reason}")]
    MalformedHeader { offset: usize, reason: &'static str },
    #[error("unsupported format at byte {offset}: {reason}")]
    UnsupportedFormat { offset: usize, reason: &'static str },
    #[error("truncated or undecodable chunk at byte {offset}")]
    TruncatedChunk { offset: usize },
    #[error("bad variable-length quantity at byte {offset}")]
    BadVarint { offset: usize },
    #[error("document violates invariants: {0}")]
    InvalidDocument(&'static str),
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8, MidiError> {
        let b = *self
            .bytes
            .get(self.pos)
            .ok_or(MidiError::TruncatedChunk { offset: self.pos })?;
        self.pos += 1;
        Ok(b)
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn u16(&mut self) -> Result<u16, MidiError> {
        Ok(u16::from_be_bytes([self.u8()?, self.u8()?]))
    }

    fn u32(&mut self) -> Result<u32, MidiError> {
        Ok(u32::from_be_bytes([
            self.u8()?,
            self.u8()?,
            self.u8()?,
            self.u8()?,
        ]))
    }

    fn skip(&mut self, n: usize) -> Result<(), MidiError> {
        if self.remaining() < n {
            return Err(MidiError::TruncatedChunk { offset: self.pos });
        }
        self.pos += n;
        Ok(())
    }

    /// MIDI variable-length quantity: up to four bytes, seven payload
    /// bits each, continuation in the top bit.
    fn varint(&mut self) -> Result<u32, MidiError> {
        let start = self.pos;
        let mut value: u32 = 0;
        for i in 0..4 {
            let b = self.u8().map_err(|_| MidiError::BadVarint { offset: start })?;
            value = (value << 7) | u32::from(b & 0x7f);
            if b & 0x80 == 0 {
                return Ok(value);
            }
            if i == 3 {
                return Err(MidiError::BadVarint { offset: start });
            }
        }
        unreachable!()
    }
}

/// Parse an SMF format 0 or 1 file.
pub fn parse_midi(bytes: &[u8]) -> Result<MidiDocument, MidiError> {
    let mut c = Cursor::new(bytes);

    if c.remaining() < 4 || &bytes[0..4] != b"MThd" {
        return Err(MidiError::MalformedHeader {
            offset: 0,
            reason: "missing MThd magic",
        });
    }
    c.pos = 4;
    let header_len = c.u32()? as usize;
    if header_len < 6 {
        return Err(MidiError::MalformedHeader {
            offset: 4,
            reason: "header length below 6",
        });
    }
    let format = c.u16()?;
    let declared_tracks = c.u16()?;
    let division = c.u16()?;
    // Ignore any bytes beyond the six mandatory ones.
    c.skip(header_len - 6)
        .map_err(|_| MidiError::MalformedHeader {
            offset: 8,
            reason: "header length exceeds file size",
        })?;

    if format > 1 {
        return Err(MidiError::UnsupportedFormat {
            offset: 8,
            reason: "only SMF formats 0 and 1 are supported",
        });
    }
    if division & 0x8000 != 0 {
        return Err(MidiError::UnsupportedFormat {
            offset: 12,
            reason: "SMPTE time division is not supported",
        });
    }
    if division == 0 {
        return Err(MidiError::MalformedHeader {
            offset: 12,
            reason: "zero ticks per quarter",
        });
    }

    let mut parser = DocumentBuilder::new(division);
    let mut seen_tracks = 0u16;
    while seen_tracks < declared_tracks {
        if c.remaining() < 8 {
            return Err(MidiError::TruncatedChunk { offset: c.pos });
        }
        let tag = [c.u8()?, c.u8()?, c.u8()?, c.u8()?];
        let chunk_len = c.u32()? as usize;
        if c.remaining() < chunk_len {
            return Err(MidiError::TruncatedChunk { offset: c.pos });
        }
        if &tag == b"MTrk" {
            let body_start = c.pos;
            parser.parse_track(
                &bytes[body_start..body_start + chunk_len],
                body_start,
                seen_tracks,
            )?;
            seen_tracks += 1;
        }
        // Alien chunk types are skipped wholesale per the SMF spec.
        c.skip(chunk_len)?;
    }

    Ok(parser.finish())
}

struct ChannelState {
    program: Option<u8>,
    // pitch -> (onset, velocity); one active note per pitch, last-wins.
    active: Vec<Option<(u64, u8)>>,
    events: Vec<NoteEvent>,
}

impl ChannelState {
    fn new() -> Self {
        ChannelState {
            program: None,
            active: vec![None; 128],
            events: Vec::new(),
        }
    }

    fn used(&self) -> bool {
        self.program.is_some() || !self.events.is_empty()
    }
}

struct DocumentBuilder {
    ticks_per_quarter: u16,
    tempo_bpm: Option<f64>,
    time_signatures: Vec<TimeSignature>,
    channels: Vec<((u16, u8), ChannelState)>,
}

impl DocumentBuilder {
    fn new(ticks_per_quarter: u16) -> Self {
        DocumentBuilder {
            ticks_per_quarter,
            tempo_bpm: None,
            time_signatures: Vec::new(),
            channels: Vec::new(),
        }
    }

    fn channel(&mut self, track: u16, ch: u8) -> &mut ChannelState {
        if let Some(i) = self.channels.iter().position(|(k, _)| *k == (track, ch)) {
            return &mut self.channels[i].1;
        }
        self.channels.push(((track, ch), ChannelState::new()));
        &mut self.channels.last_mut().unwrap().1
    }

    fn parse_track(&mut self, body: &[u8], base: usize, track_index: u16) -> Result<(), MidiError> {
        let mut c = Cursor::new(body);
        let mut tick: u64 = 0;
        let mut running_status: Option<u8> = None;
        let mut touched: Vec<(u16, u8)> = Vec::new();

        while c.remaining() > 0 {
            let delta = c.varint().map_err(|e| offset_err(e, base))?;
            tick += u64::from(delta);

            let status = match c.peek() {
                Some(b) if b >= 0x80 => {
                    c.pos += 1;
                    if b < 0xf0 {
                        running_status = Some(b);
                    }
                    b
                }
                Some(_) => running_status.ok_or(MidiError::TruncatedChunk {
                    offset: base + c.pos,
                })?,
                None => return Err(MidiError::TruncatedChunk { offset: base + c.pos }),
            };

            match status & 0xf0 {
                0x80 => {
                    let pitch = c.u8().map_err(|e| offset_err(e, base))? & 0x7f;
                    let _vel = c.u8().map_err(|e| offset_err(e, base))?;
                    self.note_off(track_index, status & 0x0f, pitch, tick);
                }
                0x90 => {
                    let pitch = c.u8().map_err(|e| offset_err(e, base))? & 0x7f;
                    let vel = c.u8().map_err(|e| offset_err(e, base))? & 0x7f;
                    let key = (track_index, status & 0x0f);
                    if !touched.contains(&key) {
                        touched.push(key);
                    }
                    if vel == 0 {
                        // Velocity-0 note-on is a note-off by convention.
                        self.note_off(track_index, status & 0x0f, pitch, tick);
                    } else {
                        self.note_on(track_index, status & 0x0f, pitch, vel, tick);
                    }
                }
                0xa0 | 0xb0 | 0xe0 => {
                    c.skip(2).map_err(|e| offset_err(e, base))?;
                }
                0xc0 => {
                    let program = c.u8().map_err(|e| offset_err(e, base))? & 0x7f;
                    let ch = self.channel(track_index, status & 0x0f);
                    // The program in effect when the first note arrives
                    // defines the instrument; later changes are ignored.
                    if ch.program.is_none() {
                        ch.program = Some(program);
                    }
                }
                0xd0 => {
                    c.skip(1).map_err(|e| offset_err(e, base))?;
                }
                0xf0 => match status {
                    0xff => {
                        let meta = c.u8().map_err(|e| offset_err(e, base))?;
                        let len = c.varint().map_err(|e| offset_err(e, base))? as usize;
                        if c.remaining() < len {
                            return Err(MidiError::TruncatedChunk { offset: base + c.pos });
                        }
                        match meta {
                            0x51 if len == 3 => {
                                let us = (u32::from(body[c.pos]) << 16)
                                    | (u32::from(body[c.pos + 1]) << 8)
                                    | u32::from(body[c.pos + 2]);
                                if self.tempo_bpm.is_none() && us > 0 {
                                    self.tempo_bpm = Some(60_000_000.0 / f64::from(us));
                                }
                            }
                            0x58 if len >= 2 => {
                                let numerator = body[c.pos];
                                let denominator = 1u16 << body[c.pos + 1].min(15);
                                self.time_signatures.push(TimeSignature {
                                    numerator,
                                    denominator,
                                    onset_ticks: tick,
                                });
                            }
                            0x2f => {
                                c.skip(len)?;
                                break;
                            }
                            _ => {}
                        }
                        c.skip(len)?;
                    }
                    0xf0 | 0xf7 => {
                        let len = c.varint().map_err(|e| offset_err(e, base))? as usize;
                        c.skip(len).map_err(|e| offset_err(e, base))?;
                    }
                    _ => {
                        // Remaining system-common messages carry no payload we need.
                    }
                },
                _ => unreachable!("status byte has high bit set"),
            }
        }

        // Unmatched note-ons are closed at the end of the track.
        let end_tick = tick;
        for (track, ch) in touched {
            let state = self.channel(track, ch);
            for pitch in 0..128u8 {
                if let Some((onset, vel)) = state.active[pitch as usize].take() {
                    state.events.push(NoteEvent {
                        onset_ticks: onset,
                        duration_ticks: (end_tick - onset).max(1),
                        pitch,
                        velocity: vel,
                        channel: ch,
                    });
                }
            }
        }
        Ok(())
    }

    fn note_on(&mut self, track: u16, ch: u8, pitch: u8, vel: u8, tick: u64) {
        let state = self.channel(track, ch);
        // Overlapping same-pitch notes: the later onset closes the
        // earlier note (last-wins).
        if let Some((onset, v)) = state.active[pitch as usize].take() {
            state.events.push(NoteEvent {
                onset_ticks: onset,
                duration_ticks: (tick - onset).max(1),
                pitch,
                velocity: v,
                channel: ch,
            });
        }
        state.active[pitch as usize] = Some((tick, vel));
    }

    fn note_off(&mut self, track: u16, ch: u8, pitch: u8, tick: u64) {
        let state = self.channel(track, ch);
        if let Some((onset, vel)) = state.active[pitch as usize].take() {
            state.events.push(NoteEvent {
                onset_ticks: onset,
                duration_ticks: (tick - onset).max(1),
                pitch,
                velocity: vel,
                channel: ch,
            });
        }
    }

    fn finish(mut self) -> MidiDocument {
        self.channels.sort_by_key(|(k, _)| *k);
        let mut tracks = Vec::new();
        for ((_, ch), mut state) in self.channels {
            if !state.used() {
                continue;
            }
            state
                .events
                .sort_by_key(|e| (e.onset_ticks, e.pitch, e.duration_ticks));
            tracks.push(TrackData {
                program: state.program.unwrap_or(0),
                is_drum: ch == 9,
                events: state.events,
            });
        }
        MidiDocument {
            ticks_per_quarter: self.ticks_per_quarter,
            tempo_bpm: self.tempo_bpm.unwrap_or(DEFAULT_TEMPO_BPM),
            tracks,
            time_signatures: self.time_signatures,
        }
    }
}

fn offset_err(e: MidiError, base: usize) -> MidiError {
    match e {
        MidiError::TruncatedChunk { offset } => MidiError::TruncatedChunk { offset: offset + base },
        MidiError::BadVarint { offset } => MidiError::BadVarint { offset: offset + base },
        other => other,
    }
}

/// Serialize a document as SMF format 1. The first track carries tempo
/// (omitted at the 120 BPM default) and time signatures; each document
/// track becomes one MTrk with an initial program change.
pub fn write_midi(doc: &MidiDocument) -> Result<Vec<u8>, MidiError> {
    validate(doc)?;

    let mut chunks: Vec<Vec<u8>> = Vec::new();
    chunks.push(conductor_track(doc));
    for track in &doc.tracks {
        chunks.push(note_track(track));
    }

    let mut out = Vec::new();
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&(chunks.len() as u16).to_be_bytes());
    out.extend_from_slice(&doc.ticks_per_quarter.to_be_bytes());
    for chunk in chunks {
        out.extend_from_slice(b"MTrk");
        out.extend_from_slice(&(chunk.len() as u32).to_be_bytes());
        out.extend_from_slice(&chunk);
    }
    Ok(out)
}

fn validate(doc: &MidiDocument) -> Result<(), MidiError> {
    if doc.ticks_per_quarter == 0 {
        return Err(MidiError::InvalidDocument("ticks_per_quarter must be positive"));
    }
    if !doc.tempo_bpm.is_finite() || doc.tempo_bpm <= 0.0 {
        return Err(MidiError::InvalidDocument("tempo must be positive"));
    }
    for track in &doc.tracks {
        if track.program > 127 {
            return Err(MidiError::InvalidDocument("program out of range"));
        }
        let mut last_onset = 0;
        for e in &track.events {
            if e.duration_ticks == 0 {
                return Err(MidiError::InvalidDocument("zero-duration note"));
            }
            if e.velocity == 0 || e.velocity > 127 {
                return Err(MidiError::InvalidDocument("velocity outside 1..=127"));
            }
            if e.pitch > 127 {
                return Err(MidiError::InvalidDocument("pitch outside 0..=127"));
            }
            if e.channel > 15 {
                return Err(MidiError::InvalidDocument("channel outside 0..=15"));
            }
            if e.onset_ticks < last_onset {
                return Err(MidiError::InvalidDocument("events not sorted by onset"));
            }
            last_onset = e.onset_ticks;
        }
    }
    Ok(())
}

fn push_varint(out: &mut Vec<u8>, mut value: u64) {
    let mut stack = [0u8; 10];
    let mut n = 0;
    loop {
        stack[n] = (value & 0x7f) as u8;
        value >>= 7;
        n += 1;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        let mut b = stack[i];
        if i != 0 {
            b |= 0x80;
        }
        out.push(b);
    }
}

fn conductor_track(doc: &MidiDocument) -> Vec<u8> {
    let mut events: Vec<(u64, Vec<u8>)> = Vec::new();
    if (doc.tempo_bpm - DEFAULT_TEMPO_BPM).abs() > f64::EPSILON {
        let us = (60_000_000.0 / doc.tempo_bpm).round().max(1.0) as u32;
        events.push((
            0,
            vec![
                0xff,
                0x51,
                0x03,
                ((us >> 16) & 0xff) as u8,
                ((us >> 8) & 0xff) as u8,
                (us & 0xff) as u8,
            ],
        ));
    }
    for ts in &doc.time_signatures {
        let dd = (ts.denominator as f64).log2() as u8;
        events.push((
            ts.onset_ticks,
            vec![0xff, 0x58, 0x04, ts.numerator, dd, 24, 8],
        ));
    }
    events.sort_by_key(|(tick, _)| *tick);
    finish_track(events)
}

fn note_track(track: &TrackData) -> Vec<u8> {
    // (tick, order, payload): note-offs sort before note-ons at a tick so
    // back-to-back retriggers re-parse unambiguously. The program change
    // sits at the first event's tick, which lets time-shifted segments
    // share a channel without clobbering each other's programs.
    let mut events: Vec<(u64, u8, Vec<u8>)> = Vec::new();
    let channel = track.events.first().map(|e| e.channel).unwrap_or(0);
    let program_tick = track.events.first().map(|e| e.onset_ticks).unwrap_or(0);
    events.push((program_tick, 0, vec![0xc0 | channel, track.program]));
    for e in &track.events {
        events.push((
            e.onset_ticks,
            2,
            vec![0x90 | e.channel, e.pitch, e.velocity],
        ));
        events.push((
            e.onset_ticks + e.duration_ticks,
            1,
            vec![0x80 | e.channel, e.pitch, 0],
        ));
    }
    events.sort_by_key(|e| (e.0, e.1));
    finish_track(events.into_iter().map(|(t, _, p)| (t, p)).collect())
}

fn finish_track(events: Vec<(u64, Vec<u8>)>) -> Vec<u8> {
    let mut out = Vec::new();
    let mut last_tick = 0;
    for (tick, payload) in events {
        push_varint(&mut out, tick - last_tick);
        out.extend_from_slice(&payload);
        last_tick = tick;
    }
    push_varint(&mut out, 0);
    out.extend_from_slice(&[0xff, 0x2f, 0x00]);
    out
}
