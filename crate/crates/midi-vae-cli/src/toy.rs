//! Synthetic two-style corpus generator: a desk-scale stand-in for real
//! style datasets. The two styles occupy disjoint pitch registers,
//! disjoint instrument sets and disjoint velocity bands, so style
//! membership is unambiguous by construction and transfer effects are
//! measurable.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use midi_vae::midi_io::{write_midi, MidiDocument, NoteEvent, TrackData};

use crate::error::{io_err, CliError};

pub const TRACKS: usize = 4;
const TICKS_PER_STEP: u64 = 120; // 480 tpq / 4
const STEPS_PER_BAR: u64 = 16;

/// Note length in steps per track: distinct densities keep the voice
/// ranking stable and give every head something to reconstruct.
const TRACK_NOTE_LEN: [u64; TRACKS] = [1, 2, 4, 8];

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpusSpec {
    pub songs_per_style: usize,
    pub bars_per_song: usize,
    /// Pitch register `[lo, hi)` per style.
    pub registers: [(u8, u8); 2],
    /// Instrument programs per style, one per track (cycled if shorter).
    pub programs: [Vec<u8>; 2],
    /// Onset velocity band `[lo, hi)` per style.
    pub velocities: [(u8, u8); 2],
    pub seed: u64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        ToyCorpusSpec {
            songs_per_style: 40,
            bars_per_song: 16,
            registers: [(24, 48), (60, 84)],
            // Piano family vs reed family.
            programs: [vec![0, 1, 2, 3], vec![64, 65, 66, 67]],
            velocities: [(30, 50), (90, 110)],
            seed: 0,
        }
    }
}

impl ToyCorpusSpec {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |what: &str| Err(CliError::Config(format!("toy corpus: {what}")));
        if self.songs_per_style == 0 || self.bars_per_song == 0 {
            return bad("song and bar counts must be positive");
        }
        let overlaps = |a: (u8, u8), b: (u8, u8)| a.0 < b.1 && b.0 < a.1;
        if overlaps(self.registers[0], self.registers[1]) {
            return bad("style registers must be disjoint");
        }
        if overlaps(self.velocities[0], self.velocities[1]) {
            return bad("style velocity bands must be disjoint");
        }
        if self.programs[0].iter().any(|p| self.programs[1].contains(p)) {
            return bad("style program sets must be disjoint");
        }
        if self.programs.iter().any(|p| p.is_empty()) {
            return bad("each style needs at least one program");
        }
        for (lo, hi) in self.registers {
            if hi <= lo || hi > 127 {
                return bad("registers must be non-empty ranges below 128");
            }
        }
        for (lo, hi) in self.velocities {
            if hi <= lo || lo == 0 || hi > 127 {
                return bad("velocity bands must be non-empty ranges in 1..=127");
            }
        }
        Ok(())
    }

    /// One deterministic toy song. All tracks harmonize one wrapped
    /// scale-run pattern per bar (start pitch, stride, direction),
    /// transposed per track and played at a track-specific note length,
    /// with a song-constant velocity from the style band. Voices are
    /// correlated the way real arrangements are, which also keeps the
    /// per-bar content compact.
    pub fn song(&self, style: usize, index: usize) -> MidiDocument {
        let (lo, hi) = self.registers[style];
        let span = u32::from(hi - lo);
        let (vlo, vhi) = self.velocities[style];
        let mut rng = song_rng(self.seed, style, index);

        let velocities: Vec<u8> = (0..TRACKS).map(|_| rng.gen_range(vlo..vhi)).collect();
        // Shared per-bar pattern: a scale run from a start degree, going
        // up or down and bouncing at the register edges (triangular
        // fold), so contours stay continuous. Start degrees sit on a
        // coarse grid, so every pattern recurs across many songs and
        // reconstruction cannot fall back on memorizing song context.
        let starts = (span / 3).max(1);
        let mut start_slot = rng.gen_range(0..starts) as i64;
        let mut patterns = Vec::with_capacity(self.bars_per_song);
        for _ in 0..self.bars_per_song {
            let descending: bool = rng.gen_bool(0.5);
            patterns.push((start_slot * 3, descending));
            let delta = rng.gen_range(-2..=2i64);
            start_slot = (start_slot + delta).rem_euclid(starts as i64);
        }

        let mut tracks = Vec::with_capacity(TRACKS);
        for (track, &note_len) in TRACK_NOTE_LEN.iter().enumerate() {
            let program = self.programs[style][track % self.programs[style].len()];
            let velocity = velocities[track];
            let transpose = track as i64 * 5;
            let notes_per_bar = STEPS_PER_BAR / note_len;

            let mut events = Vec::new();
            for (bar, &(start, descending)) in patterns.iter().enumerate() {
                for n in 0..notes_per_bar {
                    let walk = 2 * n as i64;
                    let raw = if descending {
                        start + transpose - walk
                    } else {
                        start + transpose + walk
                    };
                    let degree = reflect(raw, span as i64);
                    let step = bar as u64 * STEPS_PER_BAR + n * note_len;
                    events.push(NoteEvent {
                        onset_ticks: step * TICKS_PER_STEP,
                        duration_ticks: note_len * TICKS_PER_STEP,
                        pitch: lo + degree as u8,
                        velocity,
                        channel: track as u8,
                    });
                }
            }
            tracks.push(TrackData {
                program,
                is_drum: false,
                events,
            });
        }

        MidiDocument {
            tracks,
            ..MidiDocument::empty()
        }
    }

    /// Write the corpus as `<root>/<style_name>/song_NNN.mid`.
    pub fn generate(
        &self,
        root: &Path,
        style_names: &[String],
    ) -> Result<ToySummary, CliError> {
        self.validate()?;
        assert_eq!(style_names.len(), 2, "toy corpus is two-style");
        let mut files = 0;
        for (style, name) in style_names.iter().enumerate() {
            let dir = root.join(name);
            std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            for index in 0..self.songs_per_style {
                let doc = self.song(style, index);
                let bytes = write_midi(&doc).expect("generated documents are valid");
                let path = dir.join(format!("song_{index:03}.mid"));
                std::fs::write(&path, bytes).map_err(io_err(&path))?;
                files += 1;
            }
        }
        Ok(ToySummary {
            files,
            songs_per_style: self.songs_per_style,
            bars_per_song: self.bars_per_song,
        })
    }
}

/// Triangular fold into `[0, span)`: walk off one edge, bounce back.
fn reflect(x: i64, span: i64) -> i64 {
    let period = 2 * span;
    let m = x.rem_euclid(period);
    if m < span {
        m
    } else {
        period - 1 - m
    }
}

fn song_rng(seed: u64, style: usize, index: usize) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(
        seed ^ (style as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
            ^ (index as u64).wrapping_mul(0x2545_f491_4f6c_dd1d),
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToySummary {
    pub files: usize,
    pub songs_per_style: usize,
    pub bars_per_song: usize,
}
