//! Pitch/velocity/instrument roll representation.
//!
//! A song becomes `n_T` monophonic voices on a 16th-note grid, split
//! into bars of `n_B` steps. Each (step, track) cell holds exactly one
//! pitch symbol out of `n_P + 1` (the extra symbol is silence) plus a
//! velocity value in `[0, 1]`:
//!
//! * `0.0` — silence
//! * `0.25` — a held note (continuation step)
//! * `(0.5, 1.0]` — a note onset, MIDI velocity mapped onto a 128-level grid
//!
//! Instruments are one program per track, constant over a song. The
//! encoder and decoder are exact inverses on records satisfying the
//! invariants documented on [`SongRecord`].

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::midi_io::{MidiDocument, NoteEvent, TrackData, DEFAULT_TICKS_PER_QUARTER};

/// Grid and vocabulary sizes. The defaults follow the usual four-track,
/// 16-steps-per-bar setup with 60 pitch classes spanning `[24, 84)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RollConfig {
    /// Pitch vocabulary size (without the silence symbol).
    pub pitch_classes: usize,
    /// Lowest representable MIDI pitch; the range is `[pitch_lo, pitch_lo + pitch_classes)`.
    pub pitch_lo: u8,
    /// Steps per bar (16th notes).
    pub steps_per_bar: usize,
    /// Number of voices extracted per song.
    pub tracks: usize,
    /// Instrument vocabulary (General MIDI programs).
    pub programs: usize,
}

impl Default for RollConfig {
    fn default() -> Self {
        RollConfig {
            pitch_classes: 60,
            pitch_lo: 24,
            steps_per_bar: 16,
            tracks: 4,
            programs: 128,
        }
    }
}

impl RollConfig {
    /// Index of the silence symbol (== `pitch_classes`), giving a
    /// vocabulary of `pitch_classes + 1`.
    pub fn silence_index(&self) -> u8 {
        self.pitch_classes as u8
    }

    pub fn pitch_hi_exclusive(&self) -> u8 {
        self.pitch_lo + self.pitch_classes as u8
    }

    pub fn vocab_size(&self) -> usize {
        self.pitch_classes + 1
    }

    pub fn frames_per_bar(&self) -> usize {
        self.steps_per_bar * self.tracks
    }

    /// Fold a MIDI pitch into range by octaves; `None` when the range is
    /// narrower than an octave and the pitch cannot reach it.
    pub fn fold_pitch(&self, pitch: u8) -> Option<u8> {
        let lo = i32::from(self.pitch_lo);
        let hi = i32::from(self.pitch_lo) + self.pitch_classes as i32;
        let mut p = i32::from(pitch);
        while p < lo {
            p += 12;
        }
        while p >= hi {
            p -= 12;
        }
        if p >= lo {
            Some((p - lo) as u8)
        } else {
            None
        }
    }
}

/// Velocity value marking a held (continuation) step.
pub const HOLD_VELOCITY: f32 = 0.25;
/// Anything at or below this is hold/silence; above it is an onset.
pub const ONSET_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StyleLabel {
    pub index: usize,
    pub name: String,
}

impl StyleLabel {
    pub fn new(index: usize, name: &str) -> Self {
        StyleLabel {
            index,
            name: name.to_string(),
        }
    }
}

/// One bar: `steps_per_bar x tracks` grids, step-major and track-minor
/// (cell `(s, t)` lives at `s * tracks + t`).
#[derive(Debug, Clone, PartialEq)]
pub struct BarSample {
    pub pitch: Vec<u8>,
    pub velocity: Vec<f32>,
    pub tracks: usize,
    pub bar_index: usize,
    pub song_id: String,
}

impl BarSample {
    pub fn silent(cfg: &RollConfig, bar_index: usize, song_id: &str) -> Self {
        let cells = cfg.frames_per_bar();
        BarSample {
            pitch: vec![cfg.silence_index(); cells],
            velocity: vec![0.0; cells],
            tracks: cfg.tracks,
            bar_index,
            song_id: song_id.to_string(),
        }
    }

    pub fn steps(&self) -> usize {
        self.pitch.len() / self.tracks
    }

    pub fn pitch_at(&self, step: usize, track: usize) -> u8 {
        self.pitch[step * self.tracks + track]
    }

    pub fn velocity_at(&self, step: usize, track: usize) -> f32 {
        self.velocity[step * self.tracks + track]
    }

    pub fn set(&mut self, step: usize, track: usize, pitch: u8, velocity: f32) {
        let i = step * self.tracks + track;
        self.pitch[i] = pitch;
        self.velocity[i] = velocity;
    }
}

/// A full song in roll form.
///
/// Invariants for the representable set (the image of [`encode_song`],
/// on which [`decode_song`] is an exact inverse):
///
/// * `instruments.len() == cfg.tracks`, every bar the same shape, bar
///   indices contiguous from 0;
/// * silence cells have velocity exactly 0.0; held cells carry the pitch
///   of the preceding step and velocity exactly [`HOLD_VELOCITY`];
/// * onset cells have velocity `velocity_to_unit(v)` for some MIDI
///   velocity `v in 1..=127`;
/// * each track's first sounding step in a song, and any step whose
///   pitch differs from its predecessor, is an onset;
/// * tracks are ordered by descending onset count (ties keep their
///   relative order) — the order voice selection produces;
/// * the final bar contains at least one sounding cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SongRecord {
    pub bars: Vec<BarSample>,
    pub instruments: Vec<u8>,
    pub style: StyleLabel,
    pub source_path: String,
}

impl SongRecord {
    pub fn pitch_at(&self, global_step: usize, track: usize, cfg: &RollConfig) -> u8 {
        let bar = global_step / cfg.steps_per_bar;
        self.bars[bar].pitch_at(global_step % cfg.steps_per_bar, track)
    }

    pub fn velocity_at(&self, global_step: usize, track: usize, cfg: &RollConfig) -> f32 {
        let bar = global_step / cfg.steps_per_bar;
        self.bars[bar].velocity_at(global_step % cfg.steps_per_bar, track)
    }

    pub fn total_steps(&self, cfg: &RollConfig) -> usize {
        self.bars.len() * cfg.steps_per_bar
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("no playable tracks: every track is empty or a drum track")]
    NoPlayableTracks,
    #[error("need at least {needed} songs to split, got {got}")]
    TooFewSongs { needed: usize, got: usize },
    #[error("split ratio must lie strictly between 0 and 1, got {0}")]
    BadSplitRatio(f64),
}

/// Map MIDI velocity `0..=127` onto `(0.5, 1.0]`:
/// `0.5 + 0.5 * (v + 1) / 128`. Every played note lands strictly above
/// the onset threshold; 0.5 itself is reserved for hold/silence.
///
/// Panics above 127 (inputs are 7-bit by construction).
pub fn velocity_to_unit(v: u8) -> f32 {
    assert!(v <= 127, "MIDI velocity out of range: {v}");
    0.5 + 0.5 * f32::from(v + 1) / 128.0
}

/// Inverse of [`velocity_to_unit`]: `None` at or below the onset
/// threshold (hold/silence), otherwise the exact MIDI velocity for
/// values on the 128-level grid (clamped to `0..=127` off-grid).
pub fn unit_to_velocity(u: f32) -> Option<u8> {
    if u <= ONSET_THRESHOLD {
        return None;
    }
    let v = (f64::from(u) * 256.0 - 129.0).round();
    Some(v.clamp(0.0, 127.0) as u8)
}

/// A monophonic voice in tick domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Voice {
    pub program: u8,
    pub notes: Vec<NoteEvent>,
}

/// Pick `cfg.tracks` monophonic voices from a document.
///
/// Non-drum tracks are ranked by note count. Depth-0 voices take the
/// highest sounding note of each track at every instant; if fewer tracks
/// than voices exist, depth 1 (second-highest), depth 2, ... voices are
/// extracted from the same tracks until enough exist. The final list is
/// stably sorted by descending note count, which fixes the track order
/// of everything downstream.
pub fn select_voices(doc: &MidiDocument, cfg: &RollConfig) -> Result<Vec<Voice>, CodecError> {
    let mut candidates: Vec<&TrackData> = doc.tracks.iter().filter(|t| !t.is_drum).collect();
    if !candidates.iter().any(|t| !t.events.is_empty()) {
        return Err(CodecError::NoPlayableTracks);
    }
    candidates.sort_by_key(|t| std::cmp::Reverse(t.events.len()));
    candidates.truncate(cfg.tracks);

    let mut voices: Vec<Voice> = Vec::with_capacity(cfg.tracks);
    let mut depth = 0;
    while voices.len() < cfg.tracks {
        for track in &candidates {
            if voices.len() == cfg.tracks {
                break;
            }
            voices.push(Voice {
                program: track.program,
                notes: extract_voice(&track.events, depth),
            });
        }
        depth += 1;
    }

    voices.sort_by_key(|v| std::cmp::Reverse(v.notes.len()));
    Ok(voices)
}

/// The `depth`-th highest sounding note at every instant, merged back
/// into note segments. A note shadowed for a while and exposed again
/// yields separate segments (retriggers).
fn extract_voice(events: &[NoteEvent], depth: usize) -> Vec<NoteEvent> {
    if events.is_empty() {
        return Vec::new();
    }
    let mut boundaries: Vec<u64> = Vec::with_capacity(events.len() * 2);
    for e in events {
        boundaries.push(e.onset_ticks);
        boundaries.push(e.onset_ticks + e.duration_ticks);
    }
    boundaries.sort_unstable();
    boundaries.dedup();

    let mut segments: Vec<NoteEvent> = Vec::new();
    let mut current: Option<(usize, u64)> = None; // (event index, segment start)
    for w in boundaries.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let _ = hi;
        // Events sounding over [lo, hi), highest pitch first. Parse-time
        // last-wins matching guarantees no same-pitch overlap.
        let mut active: Vec<usize> = events
            .iter()
            .enumerate()
            .filter(|(_, e)| e.onset_ticks <= lo && e.onset_ticks + e.duration_ticks > lo)
            .map(|(i, _)| i)
            .collect();
        active.sort_by_key(|&i| std::cmp::Reverse(events[i].pitch));
        let here = active.get(depth).copied();
        match (current, here) {
            (Some((idx, _)), Some(nidx)) if idx == nidx => {
                // same note continues through this interval
            }
            (prev, next) => {
                if let Some((idx, start)) = prev {
                    push_segment(&mut segments, &events[idx], start, lo);
                }
                current = next.map(|idx| (idx, lo));
            }
        }
    }
    if let Some((idx, start)) = current {
        let end = events[idx].onset_ticks + events[idx].duration_ticks;
        push_segment(&mut segments, &events[idx], start, end);
    }
    segments
}

fn push_segment(out: &mut Vec<NoteEvent>, source: &NoteEvent, start: u64, end: u64) {
    if end > start {
        out.push(NoteEvent {
            onset_ticks: start,
            duration_ticks: end - start,
            pitch: source.pitch,
            velocity: source.velocity,
            channel: source.channel,
        });
    }
}

/// A quantized note: `[start_step, end_step)` on the 16th-note grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepNote {
    pub start_step: usize,
    pub end_step: usize,
    pub pitch: u8,
    pub velocity: u8,
}

/// Snap a monophonic note list to the 16th-note grid
/// (`ticks_per_quarter / 4` ticks per step, ties rounding to the later
/// step). Every surviving note occupies at least one step; notes whose
/// steps are entirely stolen by a later onset are dropped.
pub fn quantize(events: &[NoteEvent], doc: &MidiDocument) -> Vec<StepNote> {
    let step_ticks = f64::from(doc.ticks_per_quarter) / 4.0;
    let to_step = |tick: u64| -> usize { (tick as f64 / step_ticks + 0.5).floor() as usize };

    let mut out: Vec<StepNote> = Vec::with_capacity(events.len());
    for e in events {
        let s0 = to_step(e.onset_ticks);
        let mut s1 = to_step(e.onset_ticks + e.duration_ticks);
        if s1 <= s0 {
            s1 = s0 + 1;
        }
        // Enforce monophony after rounding: a later onset truncates or
        // evicts whatever it lands on.
        while let Some(prev) = out.last_mut() {
            if s0 >= prev.end_step {
                break;
            }
            if s0 <= prev.start_step {
                out.pop();
            } else {
                prev.end_step = s0;
                break;
            }
        }
        out.push(StepNote {
            start_step: s0,
            end_step: s1,
            pitch: e.pitch,
            velocity: e.velocity,
        });
    }
    out
}

/// Encode a document into rolls: voice selection, quantization, octave
/// folding into the pitch range, bar splitting with zero-padding of the
/// final partial bar.
pub fn encode_song(
    doc: &MidiDocument,
    style: &StyleLabel,
    cfg: &RollConfig,
    source_path: &str,
) -> Result<SongRecord, CodecError> {
    let voices = select_voices(doc, cfg)?;
    let quantized: Vec<Vec<StepNote>> = voices.iter().map(|v| quantize(&v.notes, doc)).collect();

    let total_steps = quantized
        .iter()
        .flat_map(|notes| notes.iter().map(|n| n.end_step))
        .max()
        .unwrap_or(0)
        .max(1);
    let n_bars = total_steps.div_ceil(cfg.steps_per_bar);

    let mut bars: Vec<BarSample> = (0..n_bars)
        .map(|b| BarSample::silent(cfg, b, source_path))
        .collect();
    for (track, notes) in quantized.iter().enumerate() {
        for note in notes {
            let Some(index) = cfg.fold_pitch(note.pitch) else {
                continue; // unreachable pitch becomes silence
            };
            for step in note.start_step..note.end_step {
                let bar = step / cfg.steps_per_bar;
                let local = step % cfg.steps_per_bar;
                let velocity = if step == note.start_step {
                    velocity_to_unit(note.velocity)
                } else {
                    HOLD_VELOCITY
                };
                bars[bar].set(local, track, index, velocity);
            }
        }
    }

    Ok(SongRecord {
        bars,
        instruments: voices.iter().map(|v| v.program).collect(),
        style: style.clone(),
        source_path: source_path.to_string(),
    })
}

/// Decode rolls back into a document. Consecutive steps with the same
/// pitch at hold velocity merge into one note; an onset (velocity above
/// 0.5) starts a new note. A pitch change at hold velocity — outside the
/// representable set — starts a new note at MIDI velocity 64.
pub fn decode_song(rec: &SongRecord, cfg: &RollConfig, tempo_bpm: f64) -> MidiDocument {
    let step_ticks = u64::from(DEFAULT_TICKS_PER_QUARTER) / 4;
    let total = rec.total_steps(cfg);
    let silence = cfg.silence_index();

    let mut tracks = Vec::with_capacity(cfg.tracks);
    for track in 0..cfg.tracks {
        // MIDI channel per voice, skipping the percussion channel.
        let channel = if track < 9 { track as u8 } else { (track + 1).min(15) as u8 };
        let mut events: Vec<NoteEvent> = Vec::new();
        let mut open: Option<(u8, usize, u8)> = None; // (pitch index, start step, velocity)

        let close_at =
            |open: &mut Option<(u8, usize, u8)>, events: &mut Vec<NoteEvent>, end: usize| {
                if let Some((pitch, start, vel)) = open.take() {
                    events.push(NoteEvent {
                        onset_ticks: start as u64 * step_ticks,
                        duration_ticks: (end - start) as u64 * step_ticks,
                        pitch: pitch + cfg.pitch_lo,
                        velocity: vel,
                        channel,
                    });
                }
            };

        for step in 0..total {
            let p = rec.pitch_at(step, track, cfg);
            let v = rec.velocity_at(step, track, cfg);
            if p >= silence {
                close_at(&mut open, &mut events, step);
            } else if v > ONSET_THRESHOLD {
                close_at(&mut open, &mut events, step);
                let vel = unit_to_velocity(v).unwrap_or(64).max(1);
                open = Some((p, step, vel));
            } else if let Some((cur, _, _)) = open {
                if cur != p {
                    close_at(&mut open, &mut events, step);
                    open = Some((p, step, 64));
                }
            } else {
                open = Some((p, step, 64));
            }
        }
        close_at(&mut open, &mut events, total);

        tracks.push(TrackData {
            program: rec.instruments[track],
            is_drum: false,
            events,
        });
    }

    MidiDocument {
        ticks_per_quarter: DEFAULT_TICKS_PER_QUARTER,
        tempo_bpm,
        tracks,
        time_signatures: Vec::new(),
    }
}

/// One model input frame. `pitch_index` is the hot position of the
/// one-hot pitch vector of width `vocab_size()`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub pitch_index: u8,
    pub velocity: f32,
    pub track: usize,
}

/// Unroll a bar into `steps * tracks` frames, step-major track-minor:
/// `(step 0, track 0), (step 0, track 1), ..., (step 1, track 0), ...`
pub fn unroll(bar: &BarSample) -> Vec<Frame> {
    let steps = bar.steps();
    let mut frames = Vec::with_capacity(steps * bar.tracks);
    for step in 0..steps {
        for track in 0..bar.tracks {
            frames.push(Frame {
                pitch_index: bar.pitch_at(step, track),
                velocity: bar.velocity_at(step, track),
                track,
            });
        }
    }
    frames
}

/// Inverse of [`unroll`].
pub fn reroll(frames: &[Frame], cfg: &RollConfig, bar_index: usize, song_id: &str) -> BarSample {
    assert_eq!(frames.len(), cfg.frames_per_bar(), "frame count mismatch");
    let mut bar = BarSample::silent(cfg, bar_index, song_id);
    for (i, f) in frames.iter().enumerate() {
        let step = i / cfg.tracks;
        let track = i % cfg.tracks;
        debug_assert_eq!(track, f.track);
        bar.set(step, track, f.pitch_index, f.velocity);
    }
    bar
}

/// Split songs (never bars) into train/test partitions, deterministic
/// under the seed. Both partitions end up with at least one song.
pub fn split_dataset(
    songs: Vec<SongRecord>,
    ratio: f64,
    seed: u64,
) -> Result<(Vec<SongRecord>, Vec<SongRecord>), CodecError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CodecError::BadSplitRatio(ratio));
    }
    if songs.len() < 2 {
        return Err(CodecError::TooFewSongs {
            needed: 2,
            got: songs.len(),
        });
    }
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..songs.len()).collect();
    order.shuffle(&mut rng);

    let n_train = ((songs.len() as f64) * ratio).round() as usize;
    let n_train = n_train.clamp(1, songs.len() - 1);
    let mut train_idx: Vec<usize> = order[..n_train].to_vec();
    let mut test_idx: Vec<usize> = order[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    let mut slots: Vec<Option<SongRecord>> = songs.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<SongRecord> {
        idx.iter().map(|&i| slots[i].take().unwrap()).collect()
    };
    let train = take(&train_idx);
    let test = take(&test_idx);
    Ok((train, test))
}

/// A random record satisfying every [`SongRecord`] invariant. Used by
/// round-trip tests; also handy for demos.
pub fn arbitrary_song_record(
    rng: &mut ChaCha8Rng,
    cfg: &RollConfig,
    style: &StyleLabel,
    n_bars: usize,
    song_id: &str,
) -> SongRecord {
    assert!(n_bars >= 1);
    let total = n_bars * cfg.steps_per_bar;
    let mut bars: Vec<BarSample> = (0..n_bars)
        .map(|b| BarSample::silent(cfg, b, song_id))
        .collect();

    let mut tracks: Vec<(usize, Vec<(u8, f32)>)> = Vec::new(); // (onsets, cells)
    for track in 0..cfg.tracks {
        let mut cells: Vec<(u8, f32)> = vec![(cfg.silence_index(), 0.0); total];
        let mut onsets = 0;
        // Empty voices occur in real corpora; generate one occasionally.
        if track + 1 < cfg.tracks || rng.gen_bool(0.9) {
            let mut step = 0;
            while step < total {
                if rng.gen_bool(0.3) {
                    step += rng.gen_range(1..=4); // rest
                    continue;
                }
                let pitch = rng.gen_range(0..cfg.pitch_classes as u8);
                let len = rng.gen_range(1..=6).min(total - step);
                let vel: u8 = rng.gen_range(1..=127);
                cells[step] = (pitch, velocity_to_unit(vel));
                for c in cells.iter_mut().take(step + len).skip(step + 1) {
                    *c = (pitch, HOLD_VELOCITY);
                }
                onsets += 1;
                step += len;
            }
        }
        tracks.push((onsets, cells));
    }
    // Voice selection orders tracks by descending onset count.
    tracks.sort_by_key(|(onsets, _)| std::cmp::Reverse(*onsets));

    // The last bar must sound somewhere or the song would shrink on decode.
    let last_bar_start = (n_bars - 1) * cfg.steps_per_bar;
    if tracks
        .iter()
        .all(|(_, cells)| cells[last_bar_start..].iter().all(|(p, _)| *p == cfg.silence_index()))
    {
        let pitch = rng.gen_range(0..cfg.pitch_classes as u8);
        let vel: u8 = rng.gen_range(1..=127);
        tracks[0].1[last_bar_start] = (pitch, velocity_to_unit(vel));
        tracks[0].0 += 1;
        tracks.sort_by_key(|(onsets, _)| std::cmp::Reverse(*onsets));
    }

    for (track, (_, cells)) in tracks.iter().enumerate() {
        for (step, &(p, v)) in cells.iter().enumerate() {
            bars[step / cfg.steps_per_bar].set(step % cfg.steps_per_bar, track, p, v);
        }
    }

    let instruments = (0..cfg.tracks)
        .map(|_| rng.gen_range(0..cfg.programs as u8))
        .collect();

    SongRecord {
        bars,
        instruments,
        style: style.clone(),
        source_path: song_id.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::midi_io::{parse_midi, write_midi};
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn cfg() -> RollConfig {
        RollConfig::default()
    }

    fn style() -> StyleLabel {
        StyleLabel::new(0, "test")
    }

    fn note(onset: u64, dur: u64, pitch: u8, vel: u8) -> NoteEvent {
        NoteEvent {
            onset_ticks: onset,
            duration_ticks: dur,
            pitch,
            velocity: vel,
            channel: 0,
        }
    }

    fn doc_with_tracks(tracks: Vec<TrackData>) -> MidiDocument {
        MidiDocument {
            tracks,
            ..MidiDocument::empty()
        }
    }

    fn mono_track(program: u8, notes: Vec<NoteEvent>) -> TrackData {
        TrackData {
            program,
            is_drum: false,
            events: notes,
        }
    }

    // --- velocity mapping ---

    #[test]
    fn velocity_unit_endpoints() {
        assert_eq!(velocity_to_unit(127), 1.0);
        assert_eq!(velocity_to_unit(63), 0.75);
        assert_eq!(velocity_to_unit(0), 0.50390625);
        assert!(velocity_to_unit(0) > ONSET_THRESHOLD);
    }

    #[test]
    fn unit_velocity_left_inverse_over_all_128_values() {
        for v in 0..=127u8 {
            assert_eq!(unit_to_velocity(velocity_to_unit(v)), Some(v), "v = {v}");
        }
    }

    #[test]
    fn unit_velocity_below_threshold_is_no_onset() {
        assert_eq!(unit_to_velocity(0.3), None);
        assert_eq!(unit_to_velocity(0.5), None);
        assert_eq!(unit_to_velocity(0.0), None);
        assert_eq!(unit_to_velocity(1.0), Some(127));
    }

    // --- voice selection ---

    #[test]
    fn four_mono_tracks_pass_through_ordered_by_count() {
        let doc = doc_with_tracks(vec![
            mono_track(10, vec![note(0, 480, 60, 64)]),
            mono_track(20, (0..3).map(|i| note(i * 480, 480, 50, 64)).collect()),
            mono_track(30, (0..2).map(|i| note(i * 480, 480, 40, 64)).collect()),
            mono_track(40, (0..4).map(|i| note(i * 480, 480, 30, 64)).collect()),
        ]);
        let voices = select_voices(&doc, &cfg()).unwrap();
        assert_eq!(voices.len(), 4);
        let programs: Vec<u8> = voices.iter().map(|v| v.program).collect();
        assert_eq!(programs, vec![40, 20, 30, 10]);
        let counts: Vec<usize> = voices.iter().map(|v| v.notes.len()).collect();
        assert_eq!(counts, vec![4, 3, 2, 1]);
    }

    #[test]
    fn chords_split_into_top_and_bottom_voices() {
        // One track of 2-note chords throughout.
        let mut events = Vec::new();
        for i in 0..8u64 {
            events.push(note(i * 480, 480, 64, 100)); // top
            events.push(note(i * 480, 480, 52, 90)); // bottom
        }
        events.sort_by_key(|e| (e.onset_ticks, e.pitch));
        let doc = doc_with_tracks(vec![mono_track(0, events.clone())]);
        let voices = select_voices(&doc, &cfg()).unwrap();
        assert_eq!(voices.len(), 4);
        assert!(voices[0].notes.iter().all(|n| n.pitch == 64));
        assert!(voices[1].notes.iter().all(|n| n.pitch == 52));
        assert_eq!(voices[0].notes.len(), 8);
        assert_eq!(voices[1].notes.len(), 8);
        assert!(voices[2].notes.is_empty());
        assert!(voices[3].notes.is_empty());

        // Brute-force oracle: per-tick max / second-max extraction.
        for tick in (0..8 * 480).step_by(120) {
            let sounding: Vec<u8> = {
                let mut p: Vec<u8> = events
                    .iter()
                    .filter(|e| e.onset_ticks <= tick && e.onset_ticks + e.duration_ticks > tick)
                    .map(|e| e.pitch)
                    .collect();
                p.sort_unstable_by_key(|&x| std::cmp::Reverse(x));
                p
            };
            for (voice_idx, want) in sounding.iter().enumerate() {
                let got = voices[voice_idx]
                    .notes
                    .iter()
                    .find(|n| n.onset_ticks <= tick && n.onset_ticks + n.duration_ticks > tick)
                    .map(|n| n.pitch);
                assert_eq!(got, Some(*want), "tick {tick} voice {voice_idx}");
            }
        }
    }

    #[test]
    fn drums_only_document_is_unplayable() {
        let doc = doc_with_tracks(vec![TrackData {
            program: 0,
            is_drum: true,
            events: vec![note(0, 480, 36, 100)],
        }]);
        assert_eq!(select_voices(&doc, &cfg()), Err(CodecError::NoPlayableTracks));
    }

    #[test]
    fn overlap_exposes_lower_note_as_segment() {
        // High note covers ticks [0, 960); low note [480, 1920).
        // Voice 0: high for [0,960) then low for [960,1920).
        let events = vec![note(0, 960, 70, 100), note(480, 1440, 50, 90)];
        let doc = doc_with_tracks(vec![mono_track(0, events)]);
        let voices = select_voices(&doc, &cfg()).unwrap();
        let v0 = &voices[0].notes;
        assert_eq!(v0.len(), 2);
        assert_eq!((v0[0].pitch, v0[0].onset_ticks, v0[0].duration_ticks), (70, 0, 960));
        assert_eq!((v0[1].pitch, v0[1].onset_ticks, v0[1].duration_ticks), (50, 960, 960));
        // Voice 1 holds the shadowed low-note slice.
        let v1 = &voices[1].notes;
        assert_eq!(v1.len(), 1);
        assert_eq!((v1[0].pitch, v1[0].onset_ticks, v1[0].duration_ticks), (50, 480, 480));
    }

    // --- quantize ---

    #[test]
    fn exact_grid_alignment() {
        let doc = MidiDocument::empty(); // tpq 480, step 120
        let q = quantize(&[note(0, 480, 60, 64)], &doc);
        assert_eq!(
            q,
            vec![StepNote { start_step: 0, end_step: 4, pitch: 60, velocity: 64 }]
        );
    }

    #[test]
    fn onset_rounds_to_nearest_step_ties_up() {
        let doc = MidiDocument::empty();
        let q = quantize(&[note(70, 480, 60, 64)], &doc);
        assert_eq!(q[0].start_step, 1); // 70/120 = 0.58 -> 1
        let q = quantize(&[note(60, 480, 60, 64)], &doc);
        assert_eq!(q[0].start_step, 1); // exactly halfway rounds to the later step
        let q = quantize(&[note(50, 480, 60, 64)], &doc);
        assert_eq!(q[0].start_step, 0);
    }

    #[test]
    fn zero_length_note_gets_one_step() {
        let doc = MidiDocument::empty();
        let q = quantize(&[note(0, 10, 60, 64)], &doc);
        assert_eq!((q[0].start_step, q[0].end_step), (0, 1));
    }

    #[test]
    fn collision_after_rounding_last_wins() {
        let doc = MidiDocument::empty();
        // Both notes round to onset step 0; the later evicts the sliver.
        let q = quantize(&[note(10, 30, 60, 64), note(50, 480, 62, 64)], &doc);
        assert_eq!(q.len(), 1);
        assert_eq!(q[0].pitch, 62);
    }

    // --- encode / decode ---

    fn one_note_doc() -> MidiDocument {
        // Pitch 24, velocity 127, lasting one full bar (16 steps).
        doc_with_tracks(vec![mono_track(7, vec![note(0, 16 * 120, 24, 127)])])
    }

    #[test]
    fn encode_one_full_bar_note() {
        let rec = encode_song(&one_note_doc(), &style(), &cfg(), "one").unwrap();
        assert_eq!(rec.bars.len(), 1);
        assert_eq!(rec.instruments[0], 7);
        let bar = &rec.bars[0];
        for step in 0..16 {
            assert_eq!(bar.pitch_at(step, 0), 0, "pitch index at step {step}");
            let want = if step == 0 { 1.0 } else { HOLD_VELOCITY };
            assert_eq!(bar.velocity_at(step, 0), want, "velocity at step {step}");
        }
        for step in 0..16 {
            for track in 1..4 {
                assert_eq!(bar.pitch_at(step, track), 60);
                assert_eq!(bar.velocity_at(step, track), 0.0);
            }
        }
    }

    #[test]
    fn interior_silent_bar_is_all_silence() {
        // Notes in bars 0 and 2; bar 1 is silent.
        let doc = doc_with_tracks(vec![mono_track(
            0,
            vec![note(0, 16 * 120, 60, 80), note(32 * 120, 16 * 120, 60, 80)],
        )]);
        let rec = encode_song(&doc, &style(), &cfg(), "gap").unwrap();
        assert_eq!(rec.bars.len(), 3);
        let bar = &rec.bars[1];
        for step in 0..16 {
            for track in 0..4 {
                assert_eq!(bar.pitch_at(step, track), 60);
                assert_eq!(bar.velocity_at(step, track), 0.0);
            }
        }
    }

    #[test]
    fn below_range_pitch_folds_up_an_octave() {
        let doc = doc_with_tracks(vec![mono_track(0, vec![note(0, 480, 12, 64)])]);
        let rec = encode_song(&doc, &style(), &cfg(), "low").unwrap();
        assert_eq!(rec.bars[0].pitch_at(0, 0), 0); // 12 -> 24 -> index 0
    }

    #[test]
    fn octave_fold_preserves_pitch_class() {
        let c = cfg();
        for pitch in 0..=127u8 {
            let folded = c.fold_pitch(pitch).unwrap();
            assert_eq!(
                (u32::from(folded) + u32::from(c.pitch_lo)) % 12,
                u32::from(pitch) % 12,
                "pitch {pitch} folded to {folded}"
            );
        }
    }

    #[test]
    fn decode_one_note_roundtrip() {
        let rec = encode_song(&one_note_doc(), &style(), &cfg(), "one").unwrap();
        let doc = decode_song(&rec, &cfg(), 120.0);
        assert_eq!(doc.note_count(), 1);
        let e = &doc.tracks[0].events[0];
        assert_eq!(e.pitch, 24);
        assert_eq!(e.velocity, 127);
        assert_eq!(e.duration_ticks, 16 * 120);
        assert_eq!(doc.tracks[0].program, 7);
    }

    #[test]
    fn decode_all_silence_has_no_notes() {
        let rec = SongRecord {
            bars: vec![BarSample::silent(&cfg(), 0, "s")],
            instruments: vec![0; 4],
            style: style(),
            source_path: "s".into(),
        };
        assert_eq!(decode_song(&rec, &cfg(), 120.0).note_count(), 0);
    }

    #[test]
    fn repeated_onsets_become_two_notes() {
        let c = cfg();
        let mut bar = BarSample::silent(&c, 0, "r");
        let u = velocity_to_unit(100);
        bar.set(0, 0, 5, u);
        for step in 1..4 {
            bar.set(step, 0, 5, HOLD_VELOCITY);
        }
        bar.set(4, 0, 5, u);
        for step in 5..16 {
            bar.set(step, 0, 5, HOLD_VELOCITY);
        }
        let rec = SongRecord {
            bars: vec![bar],
            instruments: vec![0; 4],
            style: style(),
            source_path: "r".into(),
        };
        let doc = decode_song(&rec, &c, 120.0);
        let events = &doc.tracks[0].events;
        assert_eq!(events.len(), 2);
        assert_eq!(events[0].duration_ticks, 4 * 120);
        assert_eq!(events[1].duration_ticks, 12 * 120);
    }

    // --- unroll ---

    #[test]
    fn unroll_is_sixty_four_frames_step_major() {
        let c = cfg();
        let mut bar = BarSample::silent(&c, 0, "u");
        bar.set(0, 1, 3, velocity_to_unit(64));
        let frames = unroll(&bar);
        assert_eq!(frames.len(), 64);
        assert_eq!(frames[1].pitch_index, 3); // (step 0, track 1) is frame 1
        assert_eq!(frames[0].track, 0);
        assert_eq!(frames[4].track, 0); // frame 4 begins step 1
    }

    #[test]
    fn silent_bar_unrolls_to_silence_frames() {
        let c = cfg();
        let frames = unroll(&BarSample::silent(&c, 0, "s"));
        assert_eq!(frames.len(), 64);
        assert!(frames.iter().all(|f| f.pitch_index == c.silence_index()));
    }

    // --- split ---

    #[test]
    fn ninety_ten_split_of_ten_songs() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let songs: Vec<SongRecord> = (0..10)
            .map(|i| arbitrary_song_record(&mut rng, &c, &style(), 2, &format!("s{i}")))
            .collect();
        let (train, test) = split_dataset(songs, 0.9, 42).unwrap();
        assert_eq!(train.len(), 9);
        assert_eq!(test.len(), 1);
    }

    #[test]
    fn split_is_deterministic_under_seed() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let songs: Vec<SongRecord> = (0..7)
            .map(|i| arbitrary_song_record(&mut rng, &c, &style(), 2, &format!("s{i}")))
            .collect();
        let (a_train, a_test) = split_dataset(songs.clone(), 0.7, 9).unwrap();
        let (b_train, b_test) = split_dataset(songs, 0.7, 9).unwrap();
        assert_eq!(a_train, b_train);
        assert_eq!(a_test, b_test);
    }

    #[test]
    fn single_song_split_errors() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let songs = vec![arbitrary_song_record(&mut rng, &c, &style(), 2, "only")];
        assert!(matches!(
            split_dataset(songs, 0.9, 0),
            Err(CodecError::TooFewSongs { .. })
        ));
    }

    // --- properties ---

    proptest! {
        #[test]
        fn reroll_inverts_unroll(seed in 0u64..500) {
            let c = cfg();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rec = arbitrary_song_record(&mut rng, &c, &style(), 1, "p");
            let bar = &rec.bars[0];
            let back = reroll(&unroll(bar), &c, bar.bar_index, &bar.song_id);
            prop_assert_eq!(&back, bar);
        }

        #[test]
        fn encode_decode_roundtrip(seed in 0u64..200) {
            let c = cfg();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bars = (seed % 3 + 1) as usize;
            let rec = arbitrary_song_record(&mut rng, &c, &style(), bars, "rt");
            let doc = decode_song(&rec, &c, 120.0);
            let back = encode_song(&doc, &style(), &c, "rt").unwrap();
            prop_assert_eq!(back, rec);
        }

        #[test]
        fn full_midi_roundtrip(seed in 0u64..200) {
            let c = cfg();
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(77).wrapping_add(5));
            let rec = arbitrary_song_record(&mut rng, &c, &style(), 2, "mrt");
            let bytes = write_midi(&decode_song(&rec, &c, 120.0)).unwrap();
            let back = encode_song(&parse_midi(&bytes).unwrap(), &style(), &c, "mrt").unwrap();
            prop_assert_eq!(back, rec);
        }

        #[test]
        fn decode_never_overlaps_within_a_voice(seed in 0u64..200) {
            let c = cfg();
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(31337));
            let rec = arbitrary_song_record(&mut rng, &c, &style(), 2, "mono");
            let doc = decode_song(&rec, &c, 120.0);
            for track in &doc.tracks {
                let mut last_end = 0u64;
                for e in &track.events {
                    prop_assert!(e.onset_ticks >= last_end, "overlap in voice");
                    last_end = e.onset_ticks + e.duration_ticks;
                }
            }
        }
    }
}
