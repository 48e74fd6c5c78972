//! Flat `key = value` run configuration with `#` comments. Every knob is
//! scalar, so there is no nesting to express.

use std::path::{Path, PathBuf};

use midi_vae::eval::ClassifierConfig;
use midi_vae::model::HyperParams;

use crate::error::CliError;
use crate::toy::ToyCorpusSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset_root: PathBuf,
    /// Exactly two style names; one model per style pair.
    pub styles: Vec<String>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub split_ratio: f64,
    pub hp: HyperParams,
    pub classifier: ClassifierConfig,
    pub toy: ToyCorpusSpec,
    pub sweep_bars: usize,
    pub sweep_points: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_root: PathBuf::from("dataset"),
            styles: vec!["style_a".into(), "style_b".into()],
            output_dir: PathBuf::from("out"),
            seed: 0,
            split_ratio: 0.9,
            hp: HyperParams::default(),
            classifier: ClassifierConfig::default(),
            toy: ToyCorpusSpec::default(),
            sweep_bars: 8,
            sweep_points: 7,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(crate::error::io_err(path))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.apply(key.trim(), value.trim())
                .map_err(|e| CliError::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        if cfg.styles.len() != 2 {
            return Err(CliError::Config(format!(
                "exactly 2 styles are required, got {}",
                cfg.styles.len()
            )));
        }
        cfg.hp.num_styles = 2;
        cfg.classifier.num_styles = 2;
        cfg.classifier.seed = cfg.seed ^ 0xc1a5;
        cfg.toy.seed = cfg.seed;
        cfg.hp.seed = cfg.seed;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(value: &str, what: &str) -> Result<T, String> {
            value
                .parse()
                .map_err(|_| format!("cannot parse `{value}` as {what}"))
        }
        fn pair(value: &str) -> Result<(u8, u8), String> {
            let parts: Vec<&str> = value.split(',').map(str::trim).collect();
            if parts.len() != 2 {
                return Err(format!("expected `lo,hi`, got `{value}`"));
            }
            Ok((num(parts[0], "integer")?, num(parts[1], "integer")?))
        }
        fn list(value: &str) -> Result<Vec<u8>, String> {
            value
                .split(',')
                .map(str::trim)
                .map(|p| num(p, "integer"))
                .collect()
        }

        match key {
            "dataset_root" => self.dataset_root = PathBuf::from(value),
            "styles" => {
                self.styles = value.split(',').map(|s| s.trim().to_string()).collect();
            }
            "output_dir" => self.output_dir = PathBuf::from(value),
            "seed" => self.seed = num(value, "integer")?,
            "split_ratio" => self.split_ratio = num(value, "real")?,
            "lambda_pitch" => self.hp.lambda_pitch = num(value, "real")?,
            "lambda_instrument" => self.hp.lambda_instrument = num(value, "real")?,
            "lambda_velocity" => self.hp.lambda_velocity = num(value, "real")?,
            "lambda_style" => self.hp.lambda_style = num(value, "real")?,
            "beta" => self.hp.beta = num(value, "real")?,
            "noise_variance" => self.hp.noise_variance = num(value, "real")?,
            "latent_dim" => self.hp.latent_dim = num(value, "integer")?,
            "gru_state" => self.hp.gru_state = num(value, "integer")?,
            "pitch_layers" => self.hp.pitch_layers = num(value, "integer")?,
            "other_layers" => self.hp.other_layers = num(value, "integer")?,
            "learning_rate" => self.hp.learning_rate = num(value, "real")?,
            "batch_size" => self.hp.batch_size = num(value, "integer")?,
            "epochs" => self.hp.epochs = num(value, "integer")?,
            "patience" => self.hp.patience = num(value, "integer")?,
            "classifier_state" => self.classifier.state = num(value, "integer")?,
            "classifier_epochs" => self.classifier.epochs = num(value, "integer")?,
            "classifier_learning_rate" => {
                self.classifier.learning_rate = num(value, "real")?;
            }
            "classifier_batch_size" => self.classifier.batch_size = num(value, "integer")?,
            "toy_songs_per_style" => self.toy.songs_per_style = num(value, "integer")?,
            "toy_bars_per_song" => self.toy.bars_per_song = num(value, "integer")?,
            "toy_register_a" => self.toy.registers[0] = pair(value)?,
            "toy_register_b" => self.toy.registers[1] = pair(value)?,
            "toy_programs_a" => self.toy.programs[0] = list(value)?,
            "toy_programs_b" => self.toy.programs[1] = list(value)?,
            "toy_velocity_a" => self.toy.velocities[0] = pair(value)?,
            "toy_velocity_b" => self.toy.velocities[1] = pair(value)?,
            "sweep_bars" => self.sweep_bars = num(value, "integer")?,
            "sweep_points" => self.sweep_points = num(value, "integer")?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Cache file location: `MIDIVAE_CACHE` overrides the default under
    /// the output directory.
    pub fn cache_path(&self) -> PathBuf {
        match std::env::var_os("MIDIVAE_CACHE") {
            Some(path) => PathBuf::from(path),
            None => self.output_dir.join("dataset.mvds"),
        }
    }
}
