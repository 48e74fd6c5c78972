//! Command implementations. Each command is a thin orchestration over
//! the library, deterministic under the config seed; `main` only parses
//! arguments and prints the one-line error on failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use midi_vae::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use midi_vae::eval::{
    before_after_report, classifier_accuracy, instrument_switch_matrix, latent_sweep,
    EnsembleClassifiers, SweepTable, SwitchMatrix, TransferReport,
};
use midi_vae::midi_io::{parse_midi, write_midi, MidiDocument, TrackData};
use midi_vae::model::{train, EpochMetrics, MidiVae, ReconstructionMetrics, METRICS_CSV_HEADER};
use midi_vae::roll_codec::{decode_song, encode_song, split_dataset, SongRecord, StyleLabel};
use midi_vae::style_ops::{interpolate, medley, mixture, transfer_song, TransferSpec};

use crate::cache::{read_cache, write_cache, DatasetCache};
use crate::config::RunConfig;
use crate::error::{io_err, CliError};
use crate::toy::ToySummary;

/// Generate the synthetic toy corpus under the dataset root.
pub fn cmd_make_toy(cfg: &RunConfig) -> Result<ToySummary, CliError> {
    let mut names = cfg.styles.clone();
    names.sort();
    let summary = cfg.toy.generate(&cfg.dataset_root, &names)?;
    println!(
        "wrote {} files ({} songs x 2 styles, {} bars each) under {}",
        summary.files,
        summary.songs_per_style,
        summary.bars_per_song,
        cfg.dataset_root.display()
    );
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepareSummary {
    pub per_style: Vec<(String, usize, usize)>, // (name, songs, bars)
    pub skipped: usize,
    pub cache_path: PathBuf,
}

/// Parse and encode every `<root>/<style>/*.mid`, writing the dataset
/// cache. Unreadable files are logged and skipped; an empty style
/// aborts. Style indices follow lexicographic style-name order.
pub fn cmd_prepare(cfg: &RunConfig) -> Result<PrepareSummary, CliError> {
    let mut names = cfg.styles.clone();
    names.sort();

    let roll_cfg = midi_vae::roll_codec::RollConfig::default();
    let mut songs: Vec<SongRecord> = Vec::new();
    let mut per_style = Vec::new();
    let mut skipped = 0usize;

    for (index, name) in names.iter().enumerate() {
        let dir = cfg.dataset_root.join(name);
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .map(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
                    .unwrap_or(false)
            })
            .collect();
        files.sort();

        let label = StyleLabel::new(index, name);
        let mut style_songs = 0usize;
        let mut style_bars = 0usize;
        for path in files {
            let bytes = match std::fs::read(&path) {
                Ok(b) => b,
                Err(e) => {
                    eprintln!("skipping {}: {e}", path.display());
                    skipped += 1;
                    continue;
                }
            };
            let doc = match parse_midi(&bytes) {
                Ok(d) => d,
                Err(e) => {
                    eprintln!("skipping {}: {e}", path.display());
                    skipped += 1;
                    continue;
                }
            };
            let record = match encode_song(&doc, &label, &roll_cfg, &path.display().to_string()) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("skipping {}: {e}", path.display());
                    skipped += 1;
                    continue;
                }
            };
            style_songs += 1;
            style_bars += record.bars.len();
            songs.push(record);
        }
        if style_songs == 0 {
            return Err(CliError::EmptyStyle(name.clone()));
        }
        per_style.push((name.clone(), style_songs, style_bars));
    }

    let cache_path = cfg.cache_path();
    if let Some(parent) = cache_path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let cache = DatasetCache {
        cfg: roll_cfg,
        styles: names,
        songs,
    };
    std::fs::write(&cache_path, write_cache(&cache)).map_err(io_err(&cache_path))?;

    println!("{:<16} {:>8} {:>8}", "style", "songs", "bars");
    for (name, songs, bars) in &per_style {
        println!("{name:<16} {songs:>8} {bars:>8}");
    }
    let total_songs: usize = per_style.iter().map(|(_, s, _)| s).sum();
    let total_bars: usize = per_style.iter().map(|(_, _, b)| b).sum();
    println!("{:<16} {:>8} {:>8}", "total", total_songs, total_bars);
    if skipped > 0 {
        println!("skipped {skipped} unreadable files");
    }
    println!("cache written to {}", cache_path.display());

    Ok(PrepareSummary {
        per_style,
        skipped,
        cache_path,
    })
}

fn load_cache(cfg: &RunConfig) -> Result<DatasetCache, CliError> {
    let path = cfg.cache_path();
    let bytes = std::fs::read(&path).map_err(|_| CliError::MissingCache(path.clone()))?;
    read_cache(&bytes)
}

fn split_cache(
    cfg: &RunConfig,
    cache: &DatasetCache,
) -> Result<(Vec<SongRecord>, Vec<SongRecord>), CliError> {
    Ok(split_dataset(
        cache.songs.clone(),
        cfg.split_ratio,
        cfg.seed,
    )?)
}

pub struct TrainSummary {
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub epochs_run: usize,
    pub parameter_count: usize,
    pub last: EpochMetrics,
}

/// Train on the cached dataset (90/10 song split by default), appending
/// per-epoch metrics to a CSV log and writing the checkpoint.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    let cache = load_cache(cfg)?;
    let (train_songs, test_songs) = split_cache(cfg, &cache)?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(io_err(&cfg.output_dir))?;

    let metrics_path = cfg.output_dir.join("metrics.csv");
    let mut log_text = String::new();
    log_text.push_str(METRICS_CSV_HEADER);
    log_text.push('\n');

    let outcome = train(
        &train_songs,
        &test_songs,
        &cfg.hp,
        &cache.cfg,
        &cache.styles,
        |m| {
            println!(
                "epoch {:>4}  total {:.4}  pitch_ce {:.4}  test pitch acc {:.4}  style acc {:.4}",
                m.epoch, m.total, m.pitch_ce, m.test.pitch_accuracy, m.test.style_accuracy
            );
            log_text.push_str(&m.csv_row());
            log_text.push('\n');
        },
    )?;

    std::fs::write(&metrics_path, &log_text).map_err(io_err(&metrics_path))?;
    let checkpoint_path = cfg.output_dir.join("checkpoint.mvae");
    let bytes = write_checkpoint(&outcome.model, Some(&outcome.stats));
    std::fs::write(&checkpoint_path, bytes).map_err(io_err(&checkpoint_path))?;

    let last = outcome.log.last().expect("at least one epoch").clone();
    println!(
        "trained {} parameters for {} epochs; checkpoint at {}",
        outcome.model.parameter_count(),
        outcome.log.len(),
        checkpoint_path.display()
    );
    Ok(TrainSummary {
        checkpoint_path,
        metrics_path,
        epochs_run: outcome.log.len(),
        parameter_count: outcome.model.parameter_count(),
        last,
    })
}

fn load_checkpoint_file(path: &Path) -> Result<Checkpoint, CliError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    read_checkpoint(&bytes).map_err(|source| CliError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })
}

fn resolve_style(model: &MidiVae<f32>, name: &str) -> Result<usize, CliError> {
    model
        .styles
        .iter()
        .position(|s| s == name)
        .ok_or_else(|| CliError::StyleMismatch {
            requested: name.to_string(),
            available: model.styles.join(", "),
        })
}

pub struct EvalSummary {
    pub recon_train: ReconstructionMetrics,
    pub recon_test: ReconstructionMetrics,
    pub classifier_test_accuracy: [f64; 3],
    pub report_train: TransferReport,
    pub report_test: TransferReport,
    pub switch_forward: SwitchMatrix,
    pub switch_backward: SwitchMatrix,
    pub report_path: PathBuf,
}

/// Full evaluation: reconstruction metrics, independent classifiers,
/// before/after transfer reports on both splits, and the
/// instrument-switch matrices for both directions on the test split.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalSummary, CliError> {
    let cache = load_cache(cfg)?;
    let loaded = load_checkpoint_file(checkpoint)?;
    let model = loaded.model;
    if model.styles != cache.styles {
        return Err(CliError::StyleMismatch {
            requested: cache.styles.join(", "),
            available: model.styles.join(", "),
        });
    }
    let (train_songs, test_songs) = split_cache(cfg, &cache)?;

    let classifiers = EnsembleClassifiers::train(&train_songs, &cache.cfg, &cfg.classifier)?;
    let recon_train = model.reconstruction_metrics(&train_songs);
    let recon_test = model.reconstruction_metrics(&test_songs);
    let classifier_test_accuracy = [
        classifier_accuracy(&classifiers.pitch, &test_songs),
        classifier_accuracy(&classifiers.velocity, &test_songs),
        classifier_accuracy(&classifiers.instrument, &test_songs),
    ];

    let spec = TransferSpec {
        source_style: 0,
        target_style: 1,
    };
    let report_train = before_after_report(&model, &classifiers, &train_songs, spec)?;
    let report_test = before_after_report(&model, &classifiers, &test_songs, spec)?;
    let switch_forward = instrument_switch_matrix(&model, &test_songs, spec);
    let switch_backward = instrument_switch_matrix(
        &model,
        &test_songs,
        TransferSpec {
            source_style: 1,
            target_style: 0,
        },
    );

    let mut text = String::new();
    let _ = writeln!(text, "reconstruction (accuracy; velocity is MSE)");
    let _ = writeln!(
        text,
        "{:<8} {:>8} {:>12} {:>8} {:>10}",
        "split", "pitch", "instrument", "style", "velocity"
    );
    for (name, m) in [("train", &recon_train), ("test", &recon_test)] {
        let _ = writeln!(
            text,
            "{:<8} {:>8.4} {:>12.4} {:>8.4} {:>10.6}",
            name, m.pitch_accuracy, m.instrument_accuracy, m.style_accuracy, m.velocity_mse
        );
    }
    let _ = writeln!(text);
    let _ = writeln!(
        text,
        "style transfer, source-style share before/after ({} <-> {})",
        cache.styles[0], cache.styles[1]
    );
    let _ = writeln!(
        text,
        "{:<8} {:<12} {:>8} {:>8} {:>8} {:>9} {:>9} {:>9}",
        "split", "classifier", "bf.acc", "af.acc", "diff", "bf.prob", "af.prob", "diff"
    );
    for (split, report) in [("train", &report_train), ("test", &report_test)] {
        for row in &report.rows {
            let _ = writeln!(
                text,
                "{:<8} {:<12} {:>8.4} {:>8.4} {:>8.4} {:>9.4} {:>9.4} {:>9.4}",
                split,
                row.scope,
                row.before_acc,
                row.after_acc,
                row.acc_diff(),
                row.before_prob,
                row.after_prob,
                row.prob_diff()
            );
        }
    }
    let _ = writeln!(text);
    for (title, matrix) in [
        (
            format!("instrument family movement {} -> {}", cache.styles[0], cache.styles[1]),
            &switch_forward,
        ),
        (
            format!("instrument family movement {} -> {}", cache.styles[1], cache.styles[0]),
            &switch_backward,
        ),
    ] {
        let _ = writeln!(text, "{title}");
        text.push_str(&switch_matrix_csv(matrix));
        let _ = writeln!(text);
    }

    print!("{text}");
    std::fs::create_dir_all(&cfg.output_dir).map_err(io_err(&cfg.output_dir))?;
    let report_path = cfg.output_dir.join("eval_report.txt");
    std::fs::write(&report_path, &text).map_err(io_err(&report_path))?;

    Ok(EvalSummary {
        recon_train,
        recon_test,
        classifier_test_accuracy,
        report_train,
        report_test,
        switch_forward,
        switch_backward,
        report_path,
    })
}

fn switch_matrix_csv(matrix: &SwitchMatrix) -> String {
    let mut out = String::new();
    for (f, row) in matrix.matrix.iter().enumerate() {
        let _ = write!(out, "{f}");
        for v in row {
            let _ = write!(out, ",{v:.6}");
        }
        let _ = writeln!(out, ",{}", if matrix.observed[f] { "observed" } else { "unobserved" });
    }
    out
}

fn read_song(
    path: &Path,
    model: &MidiVae<f32>,
    style: StyleLabel,
) -> Result<(SongRecord, f64), CliError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let doc = parse_midi(&bytes).map_err(|e| CliError::Midi {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let record = encode_song(&doc, &style, &model.cfg, &path.display().to_string())?;
    Ok((record, doc.tempo_bpm))
}

fn write_song(
    record: &SongRecord,
    model: &MidiVae<f32>,
    tempo: f64,
    output: &Path,
) -> Result<(), CliError> {
    let doc = decode_song(record, &model.cfg, tempo);
    let bytes = write_midi(&doc).expect("decoded documents are valid");
    if let Some(parent) = output.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
    }
    std::fs::write(output, bytes).map_err(io_err(output))
}

/// Re-style one MIDI file. The source/target equality check runs before
/// any file or checkpoint is touched.
pub fn cmd_transfer(
    checkpoint: &Path,
    input: &Path,
    source: &str,
    target: &str,
    output: &Path,
) -> Result<(), CliError> {
    if source == target {
        return Err(CliError::SameStyle);
    }
    let model = load_checkpoint_file(checkpoint)?.model;
    let source_index = resolve_style(&model, source)?;
    let target_index = resolve_style(&model, target)?;
    let (record, tempo) = read_song(input, &model, StyleLabel::new(source_index, source))?;
    let transferred = transfer_song(
        &model,
        &record,
        TransferSpec {
            source_style: source_index,
            target_style: target_index,
        },
    )?;
    write_song(&transferred, &model, tempo, output)?;
    println!(
        "transferred {} from {source} to {target} -> {}",
        input.display(),
        output.display()
    );
    Ok(())
}

/// Interpolate from the last bar of A to the first bar of B.
pub fn cmd_interpolate(
    checkpoint: &Path,
    input_a: &Path,
    input_b: &Path,
    steps: usize,
    output: &Path,
) -> Result<(), CliError> {
    let model = load_checkpoint_file(checkpoint)?.model;
    let style = StyleLabel::new(0, model.styles.first().map(String::as_str).unwrap_or("?"));
    let (rec_a, tempo) = read_song(input_a, &model, style.clone())?;
    let (rec_b, _) = read_song(input_b, &model, style.clone())?;
    let z_a = midi_vae::style_ops::encode_song_latents(&model, &rec_a)
        .pop()
        .ok_or(midi_vae::style_ops::StyleOpsError::EmptySong)?;
    let z_b = midi_vae::style_ops::encode_song_latents(&model, &rec_b)
        .into_iter()
        .next()
        .ok_or(midi_vae::style_ops::StyleOpsError::EmptySong)?;
    let latents = interpolate(&z_a, &z_b, steps)?;
    let record =
        midi_vae::style_ops::decode_song_latents(&model, &latents, style, "interpolation");
    write_song(&record, &model, tempo, output)?;
    println!("wrote {steps}-step interpolation to {}", output.display());
    Ok(())
}

/// Join two songs with latent-interpolated bridge bars.
pub fn cmd_medley(
    checkpoint: &Path,
    input_a: &Path,
    input_b: &Path,
    bridge_bars: usize,
    output: &Path,
) -> Result<(), CliError> {
    let model = load_checkpoint_file(checkpoint)?.model;
    let style = StyleLabel::new(0, model.styles.first().map(String::as_str).unwrap_or("?"));
    let (rec_a, tempo) = read_song(input_a, &model, style.clone())?;
    let (rec_b, _) = read_song(input_b, &model, style)?;
    let spans = medley(&model, &rec_a, &rec_b, bridge_bars)?;
    let doc = spans_to_document(&spans, &model, tempo);
    let bytes = write_midi(&doc).expect("decoded documents are valid");
    std::fs::write(output, bytes).map_err(io_err(output))?;
    let total: usize = spans.iter().map(|s| s.bars.len()).sum();
    println!(
        "wrote medley ({} bars, {} bridge) to {}",
        total,
        bridge_bars,
        output.display()
    );
    Ok(())
}

/// Concatenate constant-instrument spans into one document; each span's
/// tracks keep their channel, with program changes at the span start.
fn spans_to_document(spans: &[SongRecord], model: &MidiVae<f32>, tempo: f64) -> MidiDocument {
    let cfg = &model.cfg;
    let step_ticks = 120u64;
    let mut merged = MidiDocument {
        tempo_bpm: tempo,
        ..MidiDocument::empty()
    };
    let mut offset = 0u64;
    for span in spans {
        let doc = decode_song(span, cfg, tempo);
        for track in doc.tracks {
            if track.events.is_empty() {
                continue;
            }
            let mut events = track.events;
            for e in &mut events {
                e.onset_ticks += offset;
            }
            merged.tracks.push(TrackData {
                program: track.program,
                is_drum: false,
                events,
            });
        }
        offset += span.bars.len() as u64 * cfg.steps_per_bar as u64 * step_ticks;
    }
    merged
}

/// Bar-wise latent blend of two songs at fixed weight.
pub fn cmd_mix(
    checkpoint: &Path,
    input_a: &Path,
    input_b: &Path,
    alpha: f64,
    output: &Path,
) -> Result<(), CliError> {
    let model = load_checkpoint_file(checkpoint)?.model;
    let style = StyleLabel::new(0, model.styles.first().map(String::as_str).unwrap_or("?"));
    let (rec_a, tempo) = read_song(input_a, &model, style.clone())?;
    let (rec_b, _) = read_song(input_b, &model, style)?;
    let mixed = mixture(&model, &rec_a, &rec_b, alpha)?;
    write_song(&mixed, &model, tempo, output)?;
    println!("wrote mixture (alpha {alpha}) to {}", output.display());
    Ok(())
}

pub struct SweepSummary {
    pub table: SweepTable,
    pub output: PathBuf,
}

/// Sweep every latent dimension and correlate against the bar metrics;
/// writes the full table as CSV and prints the strongest style dims.
pub fn cmd_sweep(cfg: &RunConfig, checkpoint: &Path, output: &Path) -> Result<SweepSummary, CliError> {
    let cache = load_cache(cfg)?;
    let loaded = load_checkpoint_file(checkpoint)?;
    let stats = loaded.stats.ok_or_else(|| CliError::Checkpoint {
        path: checkpoint.to_path_buf(),
        source: midi_vae::checkpoint::CheckpointError::Truncated(0),
    })?;
    let model = loaded.model;
    let (train_songs, _) = split_cache(cfg, &cache)?;
    let classifiers = EnsembleClassifiers::train(&train_songs, &cache.cfg, &cfg.classifier)?;

    let table = latent_sweep(
        &model,
        &classifiers,
        &train_songs,
        &stats,
        cfg.sweep_bars,
        cfg.sweep_points,
        cfg.seed ^ 0x53ee9,
    );

    let mut csv = String::from("dim");
    for name in &table.metric_names {
        let _ = write!(csv, ",{name}");
    }
    csv.push('\n');
    for (dim, row) in table.correlations.iter().enumerate() {
        let _ = write!(csv, "{dim}");
        for v in row {
            let _ = write!(csv, ",{v:.6}");
        }
        csv.push('\n');
    }
    std::fs::write(output, &csv).map_err(io_err(output))?;

    let style_metric = table
        .metric_index("ensemble_style_probability")
        .expect("style metric always present");
    let ranked = table.rank_dims(style_metric);
    println!("strongest dims for the style metric:");
    for &dim in ranked.iter().take(5) {
        println!(
            "  dim {:>4}  correlation {:+.4}",
            dim, table.correlations[dim][style_metric]
        );
    }
    println!("sweep table written to {}", output.display());
    Ok(SweepSummary {
        table,
        output: output.to_path_buf(),
    })
}

/// Export every bar's latent vector plus ensemble source-style
/// probability as comma-separated text.
pub fn cmd_export_latents(
    cfg: &RunConfig,
    checkpoint: &Path,
    output: &Path,
) -> Result<(), CliError> {
    let cache = load_cache(cfg)?;
    let model = load_checkpoint_file(checkpoint)?.model;
    let (train_songs, _) = split_cache(cfg, &cache)?;
    let classifiers = EnsembleClassifiers::train(&train_songs, &cache.cfg, &cfg.classifier)?;
    let text = midi_vae::eval::export_latents(&model, &classifiers, &cache.songs);
    std::fs::write(output, text).map_err(io_err(output))?;
    let rows: usize = cache.songs.iter().map(|s| s.bars.len()).sum();
    println!("exported {rows} latent rows to {}", output.display());
    Ok(())
}

