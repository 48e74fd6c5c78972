//! Binary checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "MVAE"                      4-byte magic
//! u32   format version (1)
//! u32   tensor count
//! per tensor, in registration order:
//!   u32   name length, then that many UTF-8 bytes
//!   u32   rank
//!   u32 x rank   shape
//!   f32 x prod(shape)   values
//! trailing section:
//!   hyperparameters: f64 x 7  (lambda_pitch, lambda_instrument,
//!                    lambda_velocity, lambda_style, beta,
//!                    noise_variance, learning_rate)
//!                    u32 x 8  (latent_dim, gru_state, pitch_layers,
//!                    other_layers, batch_size, num_styles, epochs,
//!                    patience)
//!                    u64      (seed)
//!   roll config:     u32 x 5  (pitch_classes, pitch_lo, steps_per_bar,
//!                    tracks, programs)
//!   styles:          u32 count, then per style u32 length + UTF-8 bytes
//!   latent stats:    u8 present flag; when 1:
//!                    u32 dim, f32 x dim mu_hat, f32 x dim sigma_hat,
//!                    u64 sample_count, u32 k, f32 x k*k style_means
//! ```

use thiserror::Error;

use crate::model::{HyperParams, MidiVae};
use crate::roll_codec::RollConfig;
use crate::style_ops::LatentStats;

pub const MAGIC: &[u8; 4] = b"MVAE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("bad magic (not a checkpoint file)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("checkpoint holds tensor {0} the architecture does not expect")]
    UnknownTensor(String),
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {0} has the wrong shape")]
    ShapeMismatch(String),
}

pub struct Checkpoint {
    pub model: MidiVae<f32>,
    pub stats: Option<LatentStats>,
}

pub fn write_checkpoint(model: &MidiVae<f32>, stats: Option<&LatentStats>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, FORMAT_VERSION);
    push_u32(&mut out, model.store.len() as u32);
    for (name, tensor) in model.store.iter() {
        push_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        push_u32(&mut out, tensor.shape().len() as u32);
        for &d in tensor.shape() {
            push_u32(&mut out, d as u32);
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    let hp = &model.hp;
    for v in [
        hp.lambda_pitch,
        hp.lambda_instrument,
        hp.lambda_velocity,
        hp.lambda_style,
        hp.beta,
        hp.noise_variance,
        hp.learning_rate,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in [
        hp.latent_dim,
        hp.gru_state,
        hp.pitch_layers,
        hp.other_layers,
        hp.batch_size,
        hp.num_styles,
        hp.epochs,
        hp.patience,
    ] {
        push_u32(&mut out, v as u32);
    }
    out.extend_from_slice(&hp.seed.to_le_bytes());

    let cfg = &model.cfg;
    for v in [
        cfg.pitch_classes as u32,
        u32::from(cfg.pitch_lo),
        cfg.steps_per_bar as u32,
        cfg.tracks as u32,
        cfg.programs as u32,
    ] {
        push_u32(&mut out, v);
    }

    push_u32(&mut out, model.styles.len() as u32);
    for style in &model.styles {
        push_u32(&mut out, style.len() as u32);
        out.extend_from_slice(style.as_bytes());
    }

    match stats {
        Some(stats) => {
            out.push(1);
            push_u32(&mut out, stats.mu_hat.len() as u32);
            for &v in &stats.mu_hat {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for &v in &stats.sigma_hat {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&stats.sample_count.to_le_bytes());
            push_u32(&mut out, stats.style_means.len() as u32);
            for row in &stats.style_means {
                for &v in row {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        None => out.push(0),
    }
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let tensor_count = r.u32()? as usize;
    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::with_capacity(tensor_count);
    for _ in 0..tensor_count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::BadName)?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(r.f32()?);
        }
        tensors.push((name, shape, data));
    }

    let hp = HyperParams {
        lambda_pitch: r.f64()?,
        lambda_instrument: r.f64()?,
        lambda_velocity: r.f64()?,
        lambda_style: r.f64()?,
        beta: r.f64()?,
        noise_variance: r.f64()?,
        learning_rate: r.f64()?,
        latent_dim: r.u32()? as usize,
        gru_state: r.u32()? as usize,
        pitch_layers: r.u32()? as usize,
        other_layers: r.u32()? as usize,
        batch_size: r.u32()? as usize,
        num_styles: r.u32()? as usize,
        epochs: r.u32()? as usize,
        patience: r.u32()? as usize,
        seed: r.u64()?,
    };
    let cfg = RollConfig {
        pitch_classes: r.u32()? as usize,
        pitch_lo: r.u32()? as u8,
        steps_per_bar: r.u32()? as usize,
        tracks: r.u32()? as usize,
        programs: r.u32()? as usize,
    };
    let style_count = r.u32()? as usize;
    let mut styles = Vec::with_capacity(style_count);
    for _ in 0..style_count {
        let len = r.u32()? as usize;
        styles.push(
            std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::BadName)?
                .to_string(),
        );
    }

    let stats = if r.u8()? == 1 {
        let dim = r.u32()? as usize;
        let mut mu_hat = Vec::with_capacity(dim);
        for _ in 0..dim {
            mu_hat.push(r.f32()?);
        }
        let mut sigma_hat = Vec::with_capacity(dim);
        for _ in 0..dim {
            sigma_hat.push(r.f32()?);
        }
        let sample_count = r.u64()?;
        let k = r.u32()? as usize;
        let mut style_means = Vec::with_capacity(k);
        for _ in 0..k {
            let mut row = Vec::with_capacity(k);
            for _ in 0..k {
                row.push(r.f32()?);
            }
            style_means.push(row);
        }
        Some(LatentStats {
            mu_hat,
            sigma_hat,
            sample_count,
            style_means,
        })
    } else {
        None
    };

    // Rebuild the architecture, then overwrite every tensor by name.
    let mut model = MidiVae::<f32>::new(hp, cfg, styles);
    let mut seen = vec![false; model.store.len()];
    for (name, shape, data) in tensors {
        let idx = model
            .store
            .index_of(&name)
            .ok_or_else(|| CheckpointError::UnknownTensor(name.clone()))?;
        if model.store.value(idx).shape() != shape.as_slice() {
            return Err(CheckpointError::ShapeMismatch(name));
        }
        model.store.value_mut(idx).data_mut().copy_from_slice(&data);
        seen[idx] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(CheckpointError::MissingTensor(
            model.store.name(missing).to_string(),
        ));
    }

    Ok(Checkpoint { model, stats })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated(self.pos));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, CheckpointError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model(seed: u64) -> MidiVae<f32> {
        let hp = HyperParams {
            latent_dim: 8,
            gru_state: 8,
            seed,
            ..HyperParams::default()
        };
        let cfg = RollConfig {
            pitch_classes: 6,
            pitch_lo: 24,
            steps_per_bar: 4,
            tracks: 2,
            programs: 8,
        };
        MidiVae::new(hp, cfg, vec!["alpha".into(), "beta".into()])
    }

    fn some_stats() -> LatentStats {
        LatentStats {
            mu_hat: (0..8).map(|i| i as f32 * 0.01).collect(),
            sigma_hat: (0..8).map(|i| 0.5 + i as f32 * 0.1).collect(),
            sample_count: 42,
            style_means: vec![vec![0.7, -0.7], vec![-0.7, 0.7]],
        }
    }

    #[test]
    fn roundtrip_preserves_everything_bitwise() {
        let model = tiny_model(9);
        let stats = some_stats();
        let bytes = write_checkpoint(&model, Some(&stats));
        let loaded = read_checkpoint(&bytes).unwrap();

        assert_eq!(loaded.model.hp, model.hp);
        assert_eq!(loaded.model.cfg, model.cfg);
        assert_eq!(loaded.model.styles, model.styles);
        assert_eq!(loaded.stats, Some(stats));
        for ((name_a, t_a), (name_b, t_b)) in model.store.iter().zip(loaded.model.store.iter()) {
            assert_eq!(name_a, name_b);
            let bits_a: Vec<u32> = t_a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = t_b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "tensor {name_a}");
        }
        // Writing the loaded model again reproduces the same bytes.
        assert_eq!(bytes, write_checkpoint(&loaded.model, loaded.stats.as_ref()));
    }

    #[test]
    fn magic_is_checked() {
        let model = tiny_model(1);
        let mut bytes = write_checkpoint(&model, None);
        bytes[0] = b'X';
        assert!(matches!(
            read_checkpoint(&bytes),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn truncation_is_detected() {
        let model = tiny_model(2);
        let bytes = write_checkpoint(&model, None);
        let cut = &bytes[..bytes.len() / 2];
        assert!(matches!(
            read_checkpoint(cut),
            Err(CheckpointError::Truncated(_))
        ));
    }

    #[test]
    fn missing_stats_round_trips_as_none() {
        let model = tiny_model(3);
        let bytes = write_checkpoint(&model, None);
        let loaded = read_checkpoint(&bytes).unwrap();
        assert!(loaded.stats.is_none());
    }
}
