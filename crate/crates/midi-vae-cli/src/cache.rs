//! On-disk cache of an encoded dataset, so training never re-parses
//! MIDI. All integers and floats little-endian:
//!
//! ```text
//! "MVDS", u32 version (1)
//! roll config: u32 x 5 (pitch_classes, pitch_lo, steps_per_bar, tracks, programs)
//! u32 style count, then per style: u32 length + UTF-8 bytes
//! u32 song count, then per song:
//!   u32 style index
//!   u32 path length + UTF-8 bytes
//!   u8 x tracks   instruments
//!   u32 bar count, then per bar:
//!     u8 x (steps * tracks)   pitch grid
//!     f32 x (steps * tracks)  velocity grid
//! ```

use midi_vae::roll_codec::{BarSample, RollConfig, SongRecord, StyleLabel};

use crate::error::CliError;

const MAGIC: &[u8; 4] = b"MVDS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetCache {
    pub cfg: RollConfig,
    pub styles: Vec<String>,
    pub songs: Vec<SongRecord>,
}

pub fn write_cache(cache: &DatasetCache) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        cache.cfg.pitch_classes as u32,
        u32::from(cache.cfg.pitch_lo),
        cache.cfg.steps_per_bar as u32,
        cache.cfg.tracks as u32,
        cache.cfg.programs as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(cache.styles.len() as u32).to_le_bytes());
    for style in &cache.styles {
        out.extend_from_slice(&(style.len() as u32).to_le_bytes());
        out.extend_from_slice(style.as_bytes());
    }
    out.extend_from_slice(&(cache.songs.len() as u32).to_le_bytes());
    for song in &cache.songs {
        out.extend_from_slice(&(song.style.index as u32).to_le_bytes());
        out.extend_from_slice(&(song.source_path.len() as u32).to_le_bytes());
        out.extend_from_slice(song.source_path.as_bytes());
        out.extend_from_slice(&song.instruments);
        out.extend_from_slice(&(song.bars.len() as u32).to_le_bytes());
        for bar in &song.bars {
            out.extend_from_slice(&bar.pitch);
            for &v in &bar.velocity {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn read_cache(bytes: &[u8]) -> Result<DatasetCache, CliError> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], CliError> {
        if *pos + n > bytes.len() {
            return Err(CliError::BadCache(format!("truncated at byte {pos}")));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let u32at = |pos: &mut usize| -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };

    if take(&mut pos, 4)? != MAGIC {
        return Err(CliError::BadCache("bad magic".into()));
    }
    let version = u32at(&mut pos)?;
    if version != VERSION {
        return Err(CliError::BadCache(format!("unsupported version {version}")));
    }
    let cfg = RollConfig {
        pitch_classes: u32at(&mut pos)? as usize,
        pitch_lo: u32at(&mut pos)? as u8,
        steps_per_bar: u32at(&mut pos)? as usize,
        tracks: u32at(&mut pos)? as usize,
        programs: u32at(&mut pos)? as usize,
    };
    let style_count = u32at(&mut pos)? as usize;
    let mut styles = Vec::with_capacity(style_count);
    for _ in 0..style_count {
        let len = u32at(&mut pos)? as usize;
        let name = std::str::from_utf8(take(&mut pos, len)?)
            .map_err(|_| CliError::BadCache("style name not UTF-8".into()))?;
        styles.push(name.to_string());
    }

    let cells = cfg.frames_per_bar();
    let song_count = u32at(&mut pos)? as usize;
    let mut songs = Vec::with_capacity(song_count);
    for _ in 0..song_count {
        let style_index = u32at(&mut pos)? as usize;
        let path_len = u32at(&mut pos)? as usize;
        let path = std::str::from_utf8(take(&mut pos, path_len)?)
            .map_err(|_| CliError::BadCache("song path not UTF-8".into()))?
            .to_string();
        let instruments = take(&mut pos, cfg.tracks)?.to_vec();
        let bar_count = u32at(&mut pos)? as usize;
        let mut bars = Vec::with_capacity(bar_count);
        for bar_index in 0..bar_count {
            let pitch = take(&mut pos, cells)?.to_vec();
            let mut velocity = Vec::with_capacity(cells);
            for _ in 0..cells {
                velocity.push(f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()));
            }
            bars.push(BarSample {
                pitch,
                velocity,
                tracks: cfg.tracks,
                bar_index,
                song_id: path.clone(),
            });
        }
        let style_name = styles
            .get(style_index)
            .cloned()
            .unwrap_or_else(|| "?".to_string());
        songs.push(SongRecord {
            bars,
            instruments,
            style: StyleLabel::new(style_index, &style_name),
            source_path: path,
        });
    }

    Ok(DatasetCache { cfg, styles, songs })
}
