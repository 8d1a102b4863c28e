//! Flat `key = value` run configuration with `#` comments. Serialization is
//! lossless (f64 values print with round-trip precision) and parsing rejects
//! unknown keys outright.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::attacks::{AttackInit, AttackLossKind};
use crate::error::{Error, Result};
use crate::eval::SyntheticSpec;
use crate::models::AagInputMode;
use crate::trainer::{AagWith, AeMode, TrainConfig, TrainMethod};

/// Where the experiment's data comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetSource {
    /// The in-process synthetic generator, parameterized by the `synth_*` keys.
    Synthetic,
    /// CIFAR-10 binary file or directory.
    Cifar(PathBuf),
}

/// One experiment description: training setup, data source, and output paths.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub run_id: String,
    pub train: TrainConfig,
    pub dataset: DatasetSource,
    pub synth: SyntheticSpec,
    pub synth_train_per_class: usize,
    pub synth_test_per_class: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_id: "run".to_string(),
            train: TrainConfig::desk_default(),
            dataset: DatasetSource::Synthetic,
            synth: SyntheticSpec::desk_default(),
            synth_train_per_class: 96,
            synth_test_per_class: 32,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn method_str(m: TrainMethod) -> &'static str {
    match m {
        TrainMethod::Standard => "standard",
        TrainMethod::PgdAt => "pgd-at",
        TrainMethod::Trades => "trades",
        TrainMethod::Dat => "dat",
    }
}

fn parse_method(s: &str) -> Result<TrainMethod> {
    match s {
        "standard" => Ok(TrainMethod::Standard),
        "pgd-at" => Ok(TrainMethod::PgdAt),
        "trades" => Ok(TrainMethod::Trades),
        "dat" => Ok(TrainMethod::Dat),
        other => Err(Error::config(format!("unknown method {other:?}"))),
    }
}

fn ae_mode_str(m: AeMode) -> &'static str {
    match m {
        AeMode::Dual => "dual",
        AeMode::Single => "single",
    }
}

fn parse_ae_mode(s: &str) -> Result<AeMode> {
    match s {
        "dual" => Ok(AeMode::Dual),
        "single" => Ok(AeMode::Single),
        other => Err(Error::config(format!("unknown ae-mode {other:?}"))),
    }
}

fn aag_input_str(m: AagInputMode) -> &'static str {
    match m {
        AagInputMode::NoiseOnly => "noise",
        AagInputMode::NoiseOneHot => "noise-onehot",
        AagInputMode::NoiseLogits => "noise-logits",
    }
}

fn parse_aag_input(s: &str) -> Result<AagInputMode> {
    match s {
        "noise" => Ok(AagInputMode::NoiseOnly),
        "noise-onehot" => Ok(AagInputMode::NoiseOneHot),
        "noise-logits" => Ok(AagInputMode::NoiseLogits),
        other => Err(Error::config(format!("unknown aag-input {other:?}"))),
    }
}

fn aag_with_str(m: AagWith) -> &'static str {
    match m {
        AagWith::Dat => "dat",
        AagWith::PgdAt => "pgd-at",
        AagWith::Trades => "trades",
    }
}

fn parse_aag_with(s: &str) -> Result<AagWith> {
    match s {
        "dat" => Ok(AagWith::Dat),
        "pgd-at" => Ok(AagWith::PgdAt),
        "trades" => Ok(AagWith::Trades),
        other => Err(Error::config(format!("unknown aag-with {other:?}"))),
    }
}

fn init_str(i: AttackInit) -> &'static str {
    match i {
        AttackInit::Gaussian1e3 => "gaussian-1e-3",
        AttackInit::UniformEps => "uniform-eps",
    }
}

fn parse_init(s: &str) -> Result<AttackInit> {
    match s {
        "gaussian-1e-3" => Ok(AttackInit::Gaussian1e3),
        "uniform-eps" => Ok(AttackInit::UniformEps),
        other => Err(Error::config(format!("unknown attack init {other:?}"))),
    }
}

fn loss_kind_str(k: AttackLossKind) -> &'static str {
    match k {
        AttackLossKind::CeOnly => "ce-only",
        AttackLossKind::Eaeg => "eaeg",
    }
}

fn parse_loss_kind(s: &str) -> Result<AttackLossKind> {
    match s {
        "ce-only" => Ok(AttackLossKind::CeOnly),
        "eaeg" => Ok(AttackLossKind::Eaeg),
        other => Err(Error::config(format!("unknown attack loss {other:?}"))),
    }
}

fn schedule_str(schedule: &[(usize, f64)]) -> String {
    schedule
        .iter()
        .map(|(e, lr)| format!("{e}:{lr}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_schedule(s: &str) -> Result<Vec<(usize, f64)>> {
    s.split(',')
        .map(|pair| {
            let (e, lr) = pair
                .split_once(':')
                .ok_or_else(|| Error::config(format!("bad schedule entry {pair:?}")))?;
            Ok((
                e.trim()
                    .parse()
                    .map_err(|_| Error::config(format!("bad schedule epoch {e:?}")))?,
                lr.trim()
                    .parse()
                    .map_err(|_| Error::config(format!("bad schedule rate {lr:?}")))?,
            ))
        })
        .collect()
}

impl RunConfig {
    /// Render as `key = value` lines in a fixed order.
    pub fn serialize(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("run_id", self.run_id.clone());
        put("method", method_str(t.method).to_string());
        put("epochs", t.epochs.to_string());
        put("batch_size", t.batch_size.to_string());
        put("lr_schedule", schedule_str(&t.lr_schedule));
        put("momentum", t.momentum.to_string());
        put("weight_decay", t.weight_decay.to_string());
        put("epsilon", t.attack.epsilon.to_string());
        put("alpha", t.attack.alpha.to_string());
        put("steps", t.attack.steps.to_string());
        put("attack_loss", loss_kind_str(t.attack.loss_kind).to_string());
        put("attack_init", init_str(t.attack.init).to_string());
        put("beta", t.beta.to_string());
        put("omega", t.omega.to_string());
        put("aag_lr", t.aag_lr.to_string());
        put("tau", t.noise_dim.to_string());
        put("lambda_max", t.lambda_max.to_string());
        put("ae_mode", ae_mode_str(t.ae_mode).to_string());
        put("aag_input", aag_input_str(t.aag_input).to_string());
        put("aag_with", aag_with_str(t.aag_with).to_string());
        put("seed", t.seed.to_string());
        put("eval_steps", t.eval_steps.to_string());
        match &self.dataset {
            DatasetSource::Synthetic => put("dataset", "synthetic".to_string()),
            DatasetSource::Cifar(p) => put("dataset", format!("cifar:{}", p.display())),
        }
        put("synth_classes", self.synth.classes.to_string());
        put("synth_channels", self.synth.channels.to_string());
        put("synth_height", self.synth.height.to_string());
        put("synth_width", self.synth.width.to_string());
        put("synth_noise", self.synth.noise_level.to_string());
        put("synth_style_spread", self.synth.style_spread.to_string());
        put("synth_pixel_std", self.synth.pixel_std.to_string());
        put("synth_template_radius", self.synth.template_radius.to_string());
        put("synth_train_per_class", self.synth_train_per_class.to_string());
        put("synth_test_per_class", self.synth_test_per_class.to_string());
        put("out_dir", self.out_dir.display().to_string());
        s
    }

    /// Parse the `key = value` text; unknown keys and duplicates are errors.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::config(format!("duplicate key {key:?}")));
            }
            cfg.apply(key, value)
                .map_err(|e| Error::config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    /// Apply one key/value pair (also used for CLI flag overrides).
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "run_id" => self.run_id = value.to_string(),
            "method" => self.train.method = parse_method(value)?,
            "epochs" => self.train.epochs = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "lr_schedule" => self.train.lr_schedule = parse_schedule(value)?,
            "momentum" => self.train.momentum = num(key, value)?,
            "weight_decay" => self.train.weight_decay = num(key, value)?,
            "epsilon" => self.train.attack.epsilon = num(key, value)?,
            "alpha" => self.train.attack.alpha = num(key, value)?,
            "steps" => self.train.attack.steps = num(key, value)?,
            "attack_loss" => self.train.attack.loss_kind = parse_loss_kind(value)?,
            "attack_init" => self.train.attack.init = parse_init(value)?,
            "beta" => {
                self.train.beta = num(key, value)?;
                self.train.attack.beta = self.train.beta;
            }
            "omega" => self.train.omega = num(key, value)?,
            "aag_lr" => self.train.aag_lr = num(key, value)?,
            "tau" => self.train.noise_dim = num(key, value)?,
            "lambda_max" => self.train.lambda_max = num(key, value)?,
            "ae_mode" => self.train.ae_mode = parse_ae_mode(value)?,
            "aag_input" => self.train.aag_input = parse_aag_input(value)?,
            "aag_with" => self.train.aag_with = parse_aag_with(value)?,
            "seed" => self.train.seed = num(key, value)?,
            "eval_steps" => self.train.eval_steps = num(key, value)?,
            "dataset" => {
                self.dataset = if value == "synthetic" {
                    DatasetSource::Synthetic
                } else if let Some(path) = value.strip_prefix("cifar:") {
                    DatasetSource::Cifar(PathBuf::from(path))
                } else {
                    return Err(Error::config(format!(
                        "dataset must be 'synthetic' or 'cifar:<path>', got {value:?}"
                    )));
                };
            }
            "synth_classes" => self.synth.classes = num(key, value)?,
            "synth_channels" => self.synth.channels = num(key, value)?,
            "synth_height" => self.synth.height = num(key, value)?,
            "synth_width" => self.synth.width = num(key, value)?,
            "synth_noise" => self.synth.noise_level = num(key, value)?,
            "synth_style_spread" => self.synth.style_spread = num(key, value)?,
            "synth_pixel_std" => self.synth.pixel_std = num(key, value)?,
            "synth_template_radius" => self.synth.template_radius = num(key, value)?,
            "synth_train_per_class" => self.synth_train_per_class = num(key, value)?,
            "synth_test_per_class" => self.synth_test_per_class = num(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => return Err(Error::config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.serialize())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_config(rng: &mut ChaCha8Rng) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.run_id = format!("run{}", rng.random_range(0..1000));
        cfg.train.method = [
            TrainMethod::Standard,
            TrainMethod::PgdAt,
            TrainMethod::Trades,
            TrainMethod::Dat,
        ][rng.random_range(0..4)];
        cfg.train.epochs = rng.random_range(0..200);
        cfg.train.batch_size = rng.random_range(1..256);
        cfg.train.lr_schedule = vec![
            (0, rng.random_range(0.001..0.5)),
            (rng.random_range(1..100), rng.random_range(0.0001..0.01)),
        ];
        cfg.train.momentum = rng.random_range(0.0..0.99);
        cfg.train.weight_decay = rng.random_range(0.0..0.01);
        cfg.train.attack.epsilon = rng.random_range(0.0..0.2);
        cfg.train.attack.alpha = rng.random_range(0.001..0.05);
        cfg.train.attack.steps = rng.random_range(0..20);
        cfg.train.attack.init = if rng.random_range(0..2) == 0 {
            AttackInit::Gaussian1e3
        } else {
            AttackInit::UniformEps
        };
        cfg.train.beta = rng.random_range(0.0..30.0);
        cfg.train.attack.beta = cfg.train.beta;
        cfg.train.omega = rng.random_range(0.0..5.0);
        cfg.train.seed = rng.random_range(0..u64::MAX / 2);
        cfg.train.lambda_max = rng.random_range(0.0..1.0);
        cfg.synth.noise_level = rng.random_range(0.0..1.0);
        cfg.out_dir = PathBuf::from(format!("out/{}", rng.random_range(0..100)));
        cfg
    }

    #[test]
    fn hundred_random_configs_round_trip_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let cfg = random_config(&mut rng);
            let text = cfg.serialize();
            let parsed = RunConfig::parse(&text).unwrap();
            assert_eq!(cfg, parsed);
        }
    }

    #[test]
    fn unknown_keys_and_duplicates_are_rejected()  {
        assert!(RunConfig::parse("bogus_key = 1").is_err());
        assert!(RunConfig::parse("epochs = 5\nepochs = 6").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = RunConfig::parse("# full line comment\n\nepochs = 7 # trailing\n").unwrap();
        assert_eq!(cfg.train.epochs, 7);
    }

    #[test]
    fn beta_applies_to_both_training_and_attack() {
        let cfg = RunConfig::parse("beta = 7.5").unwrap();
        assert_eq!(cfg.train.beta, 7.5);
        assert_eq!(cfg.train.attack.beta, 7.5);
    }
}
