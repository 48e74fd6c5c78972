//! Inference-time latent manipulation: style transfer by swapping the
//! latent style dimensions, bar interpolation, medleys, whole-song
//! mixtures and prior sampling from empirical latent statistics.
//!
//! All operations read the checkpoint, never mutate their inputs, and
//! use `mu` directly as the latent (no sampling), so every output is a
//! deterministic function of (checkpoint, inputs, seed).

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{CarryState, MidiVae, RollWriter};
use crate::nn::func::argmax;
use crate::rng::normal;
use crate::roll_codec::{SongRecord, StyleLabel};

/// Per-dimension mean and standard deviation of training-set encodings,
/// plus the mean style-dimension values per style (for style-conditioned
/// prior sampling).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    pub mu_hat: Vec<f32>,
    pub sigma_hat: Vec<f32>,
    pub sample_count: u64,
    /// `style_means[s]` holds the mean of latent dims `0..k` over
    /// training bars of style `s`.
    pub style_means: Vec<Vec<f32>>,
}

/// A whole-song style change request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransferSpec {
    pub source_style: usize,
    pub target_style: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum StyleOpsError {
    #[error("style index {index} out of range (k = {k})")]
    StyleOutOfRange { index: usize, k: usize },
    #[error("source and target style must differ")]
    SameStyle,
    #[error("latent index {0} out of range")]
    IndexOutOfRange(usize),
    #[error("interpolation needs at least 2 steps, got {0}")]
    TooFewSteps(usize),
    #[error("mixture weight must lie in [0, 1], got {0}")]
    BadAlpha(f64),
    #[error("medley bridge needs at least 1 bar")]
    EmptyBridge,
    #[error("song has no bars")]
    EmptySong,
    #[error("latent statistics need at least 2 encodings, got {0}")]
    TooFewSamples(u64),
    #[error("degenerate statistics: {0}")]
    DegenerateStats(&'static str),
}

/// Exchange latent entries `i` and `j`, leaving everything else
/// bit-identical. An involution: applying it twice restores the input.
pub fn swap_style(z: &[f32], i: usize, j: usize) -> Result<Vec<f32>, StyleOpsError> {
    if i >= z.len() {
        return Err(StyleOpsError::IndexOutOfRange(i));
    }
    if j >= z.len() {
        return Err(StyleOpsError::IndexOutOfRange(j));
    }
    if i == j {
        return Err(StyleOpsError::SameStyle);
    }
    let mut out = z.to_vec();
    out.swap(i, j);
    Ok(out)
}

/// `m` points on the segment from `a` to `b`:
/// element `t` is `(1 - alpha_t) a + alpha_t b` with `alpha_t = t/(m-1)`.
/// Computed in f64 so the endpoints — and the degenerate `a == b` case —
/// come back bit-exact in f32.
pub fn interpolate(a: &[f32], b: &[f32], steps: usize) -> Result<Vec<Vec<f32>>, StyleOpsError> {
    if steps < 2 {
        return Err(StyleOpsError::TooFewSteps(steps));
    }
    assert_eq!(a.len(), b.len(), "latent dimension mismatch");
    Ok((0..steps)
        .map(|t| {
            let alpha = t as f64 / (steps - 1) as f64;
            lerp(a, b, alpha)
        })
        .collect())
}

/// Convex combination `(1 - alpha) a + alpha b` in f64, rounded to f32.
pub fn lerp(a: &[f32], b: &[f32], alpha: f64) -> Vec<f32> {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| ((1.0 - alpha) * f64::from(x) + alpha * f64::from(y)) as f32)
        .collect()
}

/// Latent vector (`mu`) of every bar, encoded with state carryover.
pub fn encode_song_latents(model: &MidiVae<f32>, song: &SongRecord) -> Vec<Vec<f32>> {
    let mut carry = CarryState::fresh(&model.hp);
    let mut out = Vec::with_capacity(song.bars.len());
    for bar in &song.bars {
        let (mu, _sigma, next) = model.encode(bar, &song.instruments, &carry);
        carry = next;
        out.push(mu);
    }
    out
}

/// Decode a latent sequence with decoder state carryover; instruments
/// resolved per track by majority vote over the per-bar argmax (the
/// instrument assignment is a global property of a song).
pub fn decode_song_latents(
    model: &MidiVae<f32>,
    latents: &[Vec<f32>],
    style: StyleLabel,
    song_id: &str,
) -> SongRecord {
    let cfg = &model.cfg;
    let mut carry = CarryState::fresh(&model.hp);
    let mut writer = RollWriter::new(cfg, song_id);
    let mut bars = Vec::with_capacity(latents.len());
    let mut votes = vec![vec![0u32; cfg.programs]; cfg.tracks];
    for z in latents {
        let (decoded, next) = model.decode(z, &carry);
        carry = next;
        for (track, logits) in decoded.inst_logits.iter().enumerate() {
            votes[track][argmax(logits)] += 1;
        }
        bars.push(writer.push_bar(&decoded));
    }
    let instruments = votes
        .iter()
        .map(|counts| argmax_u32(counts) as u8)
        .collect();
    SongRecord {
        bars,
        instruments,
        style,
        source_path: song_id.to_string(),
    }
}

fn argmax_u32(counts: &[u32]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate().skip(1) {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

/// Reconstruct a song through the model without touching the latents.
pub fn auto_encode(model: &MidiVae<f32>, song: &SongRecord) -> Result<SongRecord, StyleOpsError> {
    if song.bars.is_empty() {
        return Err(StyleOpsError::EmptySong);
    }
    let latents = encode_song_latents(model, song);
    Ok(decode_song_latents(
        model,
        &latents,
        song.style.clone(),
        &song.source_path,
    ))
}

/// Change a song's style: encode every bar with state carryover, swap
/// latent dimensions `source` and `target`, decode. The input record is
/// never modified.
pub fn transfer_song(
    model: &MidiVae<f32>,
    song: &SongRecord,
    spec: TransferSpec,
) -> Result<SongRecord, StyleOpsError> {
    let k = model.hp.num_styles;
    for index in [spec.source_style, spec.target_style] {
        if index >= k {
            return Err(StyleOpsError::StyleOutOfRange { index, k });
        }
    }
    if spec.source_style == spec.target_style {
        return Err(StyleOpsError::SameStyle);
    }
    if song.bars.is_empty() {
        return Err(StyleOpsError::EmptySong);
    }
    let latents: Vec<Vec<f32>> = encode_song_latents(model, song)
        .iter()
        .map(|z| swap_style(z, spec.source_style, spec.target_style))
        .collect::<Result<_, _>>()?;
    let style = StyleLabel::new(
        spec.target_style,
        model
            .styles
            .get(spec.target_style)
            .map(String::as_str)
            .unwrap_or("?"),
    );
    Ok(decode_song_latents(model, &latents, style, &song.source_path))
}

/// Two songs joined by latent-interpolated bridge bars. The output keeps
/// the original sections verbatim; each bridge bar is decoded from a
/// fresh state and carries its own instrument assignment, so the result
/// is a list of constant-instrument spans.
pub fn medley(
    model: &MidiVae<f32>,
    song_a: &SongRecord,
    song_b: &SongRecord,
    bridge_bars: usize,
) -> Result<Vec<SongRecord>, StyleOpsError> {
    if bridge_bars < 1 {
        return Err(StyleOpsError::EmptyBridge);
    }
    if song_a.bars.is_empty() || song_b.bars.is_empty() {
        return Err(StyleOpsError::EmptySong);
    }
    let z_a = encode_song_latents(model, song_a)
        .pop()
        .expect("non-empty song");
    let z_b = encode_song_latents(model, song_b).swap_remove(0);

    let bridge_latents = if bridge_bars == 1 {
        vec![lerp(&z_a, &z_b, 0.5)]
    } else {
        interpolate(&z_a, &z_b, bridge_bars)?
    };

    let mut spans = Vec::with_capacity(bridge_latents.len() + 2);
    spans.push(song_a.clone());
    for (i, z) in bridge_latents.iter().enumerate() {
        spans.push(decode_song_latents(
            model,
            std::slice::from_ref(z),
            song_a.style.clone(),
            &format!("bridge{i}"),
        ));
    }
    spans.push(song_b.clone());
    Ok(spans)
}

/// Bar-wise convex combination of two songs' latents at fixed weight:
/// `decode((1 - alpha) z_a[t] + alpha z_b[t])` up to the shorter length.
pub fn mixture(
    model: &MidiVae<f32>,
    song_a: &SongRecord,
    song_b: &SongRecord,
    alpha: f64,
) -> Result<SongRecord, StyleOpsError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(StyleOpsError::BadAlpha(alpha));
    }
    if song_a.bars.is_empty() || song_b.bars.is_empty() {
        return Err(StyleOpsError::EmptySong);
    }
    let za = encode_song_latents(model, song_a);
    let zb = encode_song_latents(model, song_b);
    let latents: Vec<Vec<f32>> = za
        .iter()
        .zip(zb.iter())
        .map(|(a, b)| lerp(a, b, alpha))
        .collect();
    let style = if alpha <= 0.5 {
        song_a.style.clone()
    } else {
        song_b.style.clone()
    };
    let id = format!("mix({},{},{alpha})", song_a.source_path, song_b.source_path);
    Ok(decode_song_latents(model, &latents, style, &id))
}

/// Per-dimension mean and standard deviation of `mu` over every training
/// bar (encoded with state carryover), plus per-style means of the style
/// dimensions. Styles absent from the dataset get zero means.
pub fn empirical_latent_stats(
    model: &MidiVae<f32>,
    songs: &[SongRecord],
) -> Result<LatentStats, StyleOpsError> {
    let dim = model.hp.latent_dim;
    let k = model.hp.num_styles;
    let latents = model.song_latents(songs);
    let count: u64 = latents.iter().map(|s| s.len() as u64).sum();
    if count < 2 {
        return Err(StyleOpsError::TooFewSamples(count));
    }

    let mut mean = vec![0f64; dim];
    for song in &latents {
        for z in song {
            for (m, &v) in mean.iter_mut().zip(z.iter()) {
                *m += f64::from(v);
            }
        }
    }
    for m in &mut mean {
        *m /= count as f64;
    }

    let mut var = vec![0f64; dim];
    for song in &latents {
        for z in song {
            for ((v, &x), &m) in var.iter_mut().zip(z.iter()).zip(mean.iter()) {
                let d = f64::from(x) - m;
                *v += d * d;
            }
        }
    }
    for v in &mut var {
        *v /= count as f64;
    }
    if var.iter().any(|&v| v.is_nan() || v <= 0.0) {
        return Err(StyleOpsError::DegenerateStats(
            "a latent dimension has zero empirical variance",
        ));
    }

    let mut style_sums = vec![vec![0f64; k]; k];
    let mut style_counts = vec![0u64; k];
    for (song, zs) in songs.iter().zip(latents.iter()) {
        let s = song.style.index.min(k.saturating_sub(1));
        for z in zs {
            for (acc, &v) in style_sums[s].iter_mut().zip(z.iter()) {
                *acc += f64::from(v);
            }
            style_counts[s] += 1;
        }
    }
    let style_means = style_sums
        .into_iter()
        .zip(style_counts.iter())
        .map(|(sums, &n)| {
            sums.into_iter()
                .map(|s| if n > 0 { (s / n as f64) as f32 } else { 0.0 })
                .collect()
        })
        .collect();

    Ok(LatentStats {
        mu_hat: mean.into_iter().map(|m| m as f32).collect(),
        sigma_hat: var.into_iter().map(|v| (v.sqrt()) as f32).collect(),
        sample_count: count,
        style_means,
    })
}

/// Draw `z ~ N(0, diag(sigma_hat^2))`. With `style` given, the style
/// dimensions `0..k` are overwritten with that style's mean values from
/// the training set.
pub fn sample_prior(
    stats: &LatentStats,
    rng: &mut ChaCha8Rng,
    style: Option<usize>,
) -> Result<Vec<f32>, StyleOpsError> {
    let mut z: Vec<f32> = stats
        .sigma_hat
        .iter()
        .map(|&s| (f64::from(s) * normal(rng)) as f32)
        .collect();
    if let Some(s) = style {
        let k = stats.style_means.len();
        if s >= k {
            return Err(StyleOpsError::StyleOutOfRange { index: s, k });
        }
        z[..k].copy_from_slice(&stats.style_means[s]);
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HyperParams;
    use crate::roll_codec::{arbitrary_song_record, RollConfig};
    use rand::SeedableRng;

    fn tiny_cfg() -> RollConfig {
        RollConfig {
            pitch_classes: 6,
            pitch_lo: 24,
            steps_per_bar: 4,
            tracks: 2,
            programs: 8,
        }
    }

    fn tiny_model(seed: u64) -> MidiVae<f32> {
        let hp = HyperParams {
            latent_dim: 8,
            gru_state: 8,
            seed,
            ..HyperParams::default()
        };
        MidiVae::new(hp, tiny_cfg(), vec!["a".into(), "b".into()])
    }

    fn song(seed: u64, style: usize, bars: usize) -> SongRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = ["a", "b"];
        arbitrary_song_record(
            &mut rng,
            &tiny_cfg(),
            &StyleLabel::new(style, labels[style]),
            bars,
            &format!("s{seed}"),
        )
    }

    /// Encode, swap the style dims there and back, decode.
    fn transfer_latents_twice(
        model: &MidiVae<f32>,
        s: &SongRecord,
        i: usize,
        j: usize,
    ) -> SongRecord {
        let latents: Vec<Vec<f32>> = encode_song_latents(model, s)
            .iter()
            .map(|z| swap_style(&swap_style(z, i, j).unwrap(), j, i).unwrap())
            .collect();
        decode_song_latents(model, &latents, s.style.clone(), &s.source_path)
    }

    #[test]
    fn swap_matches_definition() {
        let z = vec![0.3f32, -1.2, 7.0, 8.0];
        let swapped = swap_style(&z, 0, 1).unwrap();
        assert_eq!(swapped, vec![-1.2, 0.3, 7.0, 8.0]);
    }

    #[test]
    fn swap_is_an_involution() {
        let z: Vec<f32> = (0..16).map(|i| (i as f32 * 0.7).sin()).collect();
        let twice = swap_style(&swap_style(&z, 0, 1).unwrap(), 0, 1).unwrap();
        assert_eq!(twice, z);
    }

    #[test]
    fn swap_fixed_point_on_equal_values() {
        let z = vec![0.5f32, 0.5, 3.0];
        assert_eq!(swap_style(&z, 0, 1).unwrap(), z);
    }

    #[test]
    fn swap_rejects_bad_indices() {
        let z = vec![0.0f32; 4];
        assert_eq!(swap_style(&z, 0, 9), Err(StyleOpsError::IndexOutOfRange(9)));
        assert_eq!(swap_style(&z, 2, 2), Err(StyleOpsError::SameStyle));
    }

    #[test]
    fn swap_commutes_with_interpolation() {
        let a: Vec<f32> = (0..8).map(|i| (i as f32 * 1.3).cos()).collect();
        let b: Vec<f32> = (0..8).map(|i| (i as f32 * 0.9).sin()).collect();
        let path = interpolate(&a, &b, 5).unwrap();
        let swapped_path = interpolate(
            &swap_style(&a, 0, 1).unwrap(),
            &swap_style(&b, 0, 1).unwrap(),
            5,
        )
        .unwrap();
        for (p, q) in path.iter().zip(swapped_path.iter()) {
            assert_eq!(&swap_style(p, 0, 1).unwrap(), q);
        }
    }

    #[test]
    fn interpolation_endpoints_are_bit_exact() {
        let a: Vec<f32> = (0..8).map(|i| (i as f32 * 0.31).tan()).collect();
        let b: Vec<f32> = (0..8).map(|i| (i as f32 * 0.17).sin()).collect();
        let path = interpolate(&a, &b, 7).unwrap();
        assert_eq!(path.first().unwrap(), &a);
        assert_eq!(path.last().unwrap(), &b);
    }

    #[test]
    fn interpolation_of_identical_points_is_constant() {
        let a: Vec<f32> = (0..8).map(|i| 0.1 + i as f32).collect();
        for z in interpolate(&a, &a, 5).unwrap() {
            assert_eq!(z, a);
        }
    }

    #[test]
    fn interpolation_midpoint_is_arithmetic_mean() {
        let a = vec![0.0f32; 4];
        let b = vec![2.0f32; 4];
        let path = interpolate(&a, &b, 3).unwrap();
        assert_eq!(path[1], vec![1.0f32; 4]);
    }

    #[test]
    fn interpolation_points_are_exact_convex_combinations() {
        let a: Vec<f32> = (0..6).map(|i| (i as f32).sin()).collect();
        let b: Vec<f32> = (0..6).map(|i| (i as f32).cos()).collect();
        let m = 5;
        let path = interpolate(&a, &b, m).unwrap();
        for (t, z) in path.iter().enumerate() {
            let alpha = t as f64 / (m - 1) as f64;
            for (d, &v) in z.iter().enumerate() {
                let want = ((1.0 - alpha) * f64::from(a[d]) + alpha * f64::from(b[d])) as f32;
                assert_eq!(v, want);
            }
        }
    }

    #[test]
    fn interpolate_needs_two_steps() {
        assert_eq!(
            interpolate(&[0.0], &[1.0], 1),
            Err(StyleOpsError::TooFewSteps(1))
        );
    }

    #[test]
    fn transfer_rejects_same_style() {
        let model = tiny_model(0);
        let s = song(1, 0, 2);
        assert_eq!(
            transfer_song(
                &model,
                &s,
                TransferSpec {
                    source_style: 1,
                    target_style: 1
                }
            ),
            Err(StyleOpsError::SameStyle)
        );
    }

    #[test]
    fn transfer_never_mutates_the_input() {
        let model = tiny_model(1);
        let s = song(2, 0, 3);
        let snapshot = s.clone();
        let _ = transfer_song(
            &model,
            &s,
            TransferSpec {
                source_style: 0,
                target_style: 1,
            },
        )
        .unwrap();
        assert_eq!(s, snapshot);
    }

    #[test]
    fn transfer_twice_equals_auto_encode_bitwise() {
        // Swapping the style dims twice before decoding restores the
        // latents exactly, so the decoded rolls match a plain
        // reconstruction bit for bit.
        let model = tiny_model(2);
        let s = song(3, 0, 3);
        let restored = transfer_latents_twice(&model, &s, 0, 1);
        let plain = auto_encode(&model, &s).unwrap();
        assert_eq!(restored.bars.len(), plain.bars.len());
        for (x, y) in restored.bars.iter().zip(plain.bars.iter()) {
            assert_eq!(x.pitch, y.pitch, "pitch rolls must match bit for bit");
            let xv: Vec<u32> = x.velocity.iter().map(|v| v.to_bits()).collect();
            let yv: Vec<u32> = y.velocity.iter().map(|v| v.to_bits()).collect();
            assert_eq!(xv, yv, "velocity rolls must match bit for bit");
        }
        assert_eq!(restored.instruments, plain.instruments);
    }

    #[test]
    fn mixture_endpoints_reduce_to_auto_encode() {
        let model = tiny_model(3);
        let a = song(4, 0, 2);
        let b = song(5, 1, 2);
        let auto_a = auto_encode(&model, &a).unwrap();
        let m0 = mixture(&model, &a, &b, 0.0).unwrap();
        assert_eq!(m0.bars.len(), auto_a.bars.len().min(b.bars.len()));
        for (x, y) in m0.bars.iter().zip(auto_a.bars.iter()) {
            assert_eq!(x.pitch, y.pitch);
            assert_eq!(x.velocity, y.velocity);
        }
        let auto_b = auto_encode(&model, &b).unwrap();
        let m1 = mixture(&model, &a, &b, 1.0).unwrap();
        for (x, y) in m1.bars.iter().zip(auto_b.bars.iter()) {
            assert_eq!(x.pitch, y.pitch);
        }
    }

    #[test]
    fn self_mixture_is_idempotent_for_any_alpha() {
        let model = tiny_model(4);
        let a = song(6, 0, 2);
        let plain = auto_encode(&model, &a).unwrap();
        for alpha in [0.0, 0.25, 0.5, 1.0] {
            let mixed = mixture(&model, &a, &a, alpha).unwrap();
            for (x, y) in mixed.bars.iter().zip(plain.bars.iter()) {
                assert_eq!(x.pitch, y.pitch, "alpha {alpha}");
                let xv: Vec<u32> = x.velocity.iter().map(|v| v.to_bits()).collect();
                let yv: Vec<u32> = y.velocity.iter().map(|v| v.to_bits()).collect();
                assert_eq!(xv, yv, "alpha {alpha}");
            }
        }
    }

    #[test]
    fn mixture_rejects_bad_alpha() {
        let model = tiny_model(5);
        let a = song(7, 0, 1);
        assert!(matches!(
            mixture(&model, &a, &a, 1.5),
            Err(StyleOpsError::BadAlpha(_))
        ));
    }

    #[test]
    fn medley_has_expected_structure() {
        let model = tiny_model(6);
        let a = song(8, 0, 3);
        let b = song(9, 1, 2);
        let spans = medley(&model, &a, &b, 2).unwrap();
        let total_bars: usize = spans.iter().map(|s| s.bars.len()).sum();
        assert_eq!(total_bars, 3 + 2 + 2);
        assert_eq!(spans.first().unwrap().bars.len(), 3);
        assert_eq!(spans.last().unwrap().bars.len(), 2);
    }

    #[test]
    fn medley_bridge_endpoints_match_fresh_bar_reconstructions() {
        let model = tiny_model(7);
        let a = song(10, 0, 2);
        let b = song(11, 1, 2);
        let spans = medley(&model, &a, &b, 3).unwrap();

        // Expected endpoint: decode(latent of A's last bar, fresh state).
        let z_last = encode_song_latents(&model, &a).pop().unwrap();
        let expect_first = decode_song_latents(&model, &[z_last], a.style.clone(), "x");
        assert_eq!(spans[1].bars[0].pitch, expect_first.bars[0].pitch);

        let z_first = encode_song_latents(&model, &b).swap_remove(0);
        let expect_last = decode_song_latents(&model, &[z_first], b.style.clone(), "y");
        assert_eq!(
            spans[spans.len() - 2].bars[0].pitch,
            expect_last.bars[0].pitch
        );
    }

    #[test]
    fn medley_of_identical_one_bar_songs_collapses() {
        let model = tiny_model(8);
        let a = song(12, 0, 1);
        let spans = medley(&model, &a, &a, 2).unwrap();
        // Both bridge bars decode the same latent.
        assert_eq!(spans[1].bars[0].pitch, spans[2].bars[0].pitch);
        assert_eq!(spans[1].bars[0].velocity, spans[2].bars[0].velocity);
    }

    #[test]
    fn stats_require_variation() {
        let model = tiny_model(9);
        let one = song(13, 0, 1);
        let mut two = one.clone();
        two.source_path = "copy".into();
        match empirical_latent_stats(&model, &[one, two]) {
            Err(StyleOpsError::DegenerateStats(_)) => {}
            other => panic!("expected DegenerateStats, got {other:?}"),
        }
    }

    #[test]
    fn stats_count_every_bar() {
        let model = tiny_model(10);
        let songs = vec![song(14, 0, 2), song(15, 1, 3)];
        let stats = empirical_latent_stats(&model, &songs).unwrap();
        assert_eq!(stats.sample_count, 5);
        assert_eq!(stats.mu_hat.len(), model.hp.latent_dim);
        assert!(stats.sigma_hat.iter().all(|&s| s > 0.0));
        assert_eq!(stats.style_means.len(), 2);
        assert_eq!(stats.style_means[0].len(), 2);
    }

    #[test]
    fn prior_sampling_is_deterministic_and_tracks_sigma() {
        let stats = LatentStats {
            mu_hat: vec![0.0; 4],
            sigma_hat: vec![0.5, 1.0, 2.0, 0.1],
            sample_count: 10,
            style_means: vec![vec![0.9, -0.9], vec![-0.9, 0.9]],
        };
        let mut rng1 = ChaCha8Rng::seed_from_u64(5);
        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(
            sample_prior(&stats, &mut rng1, None).unwrap(),
            sample_prior(&stats, &mut rng2, None).unwrap()
        );

        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 100_000;
        let mut acc = [0f64; 4];
        for _ in 0..n {
            let z = sample_prior(&stats, &mut rng, None).unwrap();
            for (a, &v) in acc.iter_mut().zip(z.iter()) {
                *a += f64::from(v) * f64::from(v);
            }
        }
        for (d, a) in acc.iter().enumerate() {
            let var = a / n as f64;
            let want = f64::from(stats.sigma_hat[d]) * f64::from(stats.sigma_hat[d]);
            assert!((var - want).abs() / want < 0.05, "dim {d}: {var} vs {want}");
        }
    }

    #[test]
    fn prior_style_override_sets_exactly_k_entries() {
        let stats = LatentStats {
            mu_hat: vec![0.0; 6],
            sigma_hat: vec![1.0; 6],
            sample_count: 10,
            style_means: vec![vec![0.9, -0.9], vec![-0.9, 0.9]],
        };
        let mut rng_a = ChaCha8Rng::seed_from_u64(3);
        let mut rng_b = ChaCha8Rng::seed_from_u64(3);
        let plain = sample_prior(&stats, &mut rng_a, None).unwrap();
        let styled = sample_prior(&stats, &mut rng_b, Some(1)).unwrap();
        assert_eq!(&styled[..2], &[-0.9, 0.9]);
        assert_eq!(&styled[2..], &plain[2..], "content dims untouched");
    }
}
