//! Command-line surface: every experiment the library implements, driven from
//! flat config files plus flag overrides.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attacks::AttackConfig;
use crate::checks;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{self, MotivationConfig, Theorem1Task};
use crate::io::{self, DatasetSource, MetricsRow, RunConfig, WriteMode};
use crate::models::{AagNet, SmallConvNet};
use crate::tensor::{BnBank, ParameterSet};
use crate::trainer::{self, AagWith, EpochMetrics, TrainMethod};

#[derive(Parser)]
#[command(
    name = "datk",
    about = "Dual adversarial training experiments at desk scale",
    version,
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Path to a key = value run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// RNG seed (falls back to $DATK_SEED, then the config value).
    #[arg(long)]
    seed: Option<u64>,
    /// Training method: standard | pgd-at | trades | dat.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Perturbation radius ε.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Inner attack step size α.
    #[arg(long)]
    alpha: Option<f64>,
    /// Attack iteration count K.
    #[arg(long)]
    steps: Option<usize>,
    /// KL weight β shared by the attack and training losses.
    #[arg(long)]
    beta: Option<f64>,
    /// JS consistency weight ω.
    #[arg(long)]
    omega: Option<f64>,
    /// Upper end of the per-sample mixing weight distribution.
    #[arg(long = "lambda-max")]
    lambda_max: Option<f64>,
    /// Recombined-branch AE construction: dual | single.
    #[arg(long = "ae-mode")]
    ae_mode: Option<String>,
    /// Generator conditioning: noise | noise-onehot | noise-logits.
    #[arg(long = "aag-input")]
    aag_input: Option<String>,
    /// Objective the generator add-on trains under: dat | pgd-at | trades.
    #[arg(long = "aag-with")]
    aag_with: Option<String>,
    /// Output directory (checkpoint, metrics, resolved config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model with the configured method and write checkpoint + metrics.
    Train(Overrides),
    /// Load a checkpoint and report natural, FGSM, and PGD accuracies.
    Evaluate {
        #[command(flatten)]
        overrides: Overrides,
        /// Checkpoint produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train plain / adversarial / amplitude-perturbed models and tabulate
    /// their accuracies on the amplitude/phase evaluation splits.
    Motivation(Overrides),
    /// Norm-ratio curve of the noisy-block linear-softmax experiment.
    Theorem1 {
        #[command(flatten)]
        overrides: Overrides,
        /// Comma-separated variance ratios to evaluate.
        #[arg(long, default_value = "1,10,100")]
        ratios: String,
        /// Gradient-descent steps per ratio.
        #[arg(long = "gd-steps", default_value_t = 2000)]
        gd_steps: usize,
        /// Gradient-descent learning rate.
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
    },
    /// Run the finite-difference gradient suite; non-zero exit on any failure.
    Gradcheck {
        #[command(flatten)]
        overrides: Overrides,
        /// Number of seeds to sweep.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Materialize the configured synthetic dataset to disk.
    SynthData {
        #[command(flatten)]
        overrides: Overrides,
        /// Output file for the binary records.
        #[arg(long = "file")]
        file: Option<PathBuf>,
    },
}

/// Entry point returning a process exit code: 0 success, 1 validation
/// failure, 2 I/O failure.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train(o) => cmd_train(&o),
        Command::Evaluate {
            overrides,
            checkpoint,
        } => cmd_evaluate(&overrides, &checkpoint),
        Command::Motivation(o) => cmd_motivation(&o),
        Command::Theorem1 {
            overrides,
            ratios,
            gd_steps,
            lr,
        } => cmd_theorem1(&overrides, &ratios, gd_steps, lr),
        Command::Gradcheck { overrides, seeds } => cmd_gradcheck(&overrides, seeds),
        Command::SynthData { overrides, file } => cmd_synth_data(&overrides, file.as_deref()),
    }
}

/// Merge the config file, the DATK_SEED fallback, and flag overrides into one
/// resolved configuration.
fn resolve_config(o: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut config_sets_seed = false;
    if let Some(path) = &o.config {
        let text = std::fs::read_to_string(path)?;
        config_sets_seed = text
            .lines()
            .filter_map(|l| l.split('#').next())
            .any(|l| l.trim_start().starts_with("seed") && l.contains('='));
        cfg = RunConfig::parse(&text)?;
    }
    if o.seed.is_none() && !config_sets_seed {
        if let Ok(env_seed) = std::env::var("DATK_SEED") {
            let parsed = env_seed
                .parse::<u64>()
                .map_err(|_| Error::config(format!("DATK_SEED={env_seed:?} is not a number")))?;
            cfg.train.seed = parsed;
        }
    }
    if let Some(seed) = o.seed {
        cfg.train.seed = seed;
    }
    if let Some(v) = &o.method {
        cfg.apply("method", v)?;
    }
    if let Some(v) = o.epochs {
        cfg.apply("epochs", &v.to_string())?;
    }
    if let Some(v) = o.epsilon {
        cfg.apply("epsilon", &v.to_string())?;
    }
    if let Some(v) = o.alpha {
        cfg.apply("alpha", &v.to_string())?;
    }
    if let Some(v) = o.steps {
        cfg.apply("steps", &v.to_string())?;
    }
    if let Some(v) = o.beta {
        cfg.apply("beta", &v.to_string())?;
    }
    if let Some(v) = o.omega {
        cfg.apply("omega", &v.to_string())?;
    }
    if let Some(v) = o.lambda_max {
        cfg.apply("lambda_max", &v.to_string())?;
    }
    if let Some(v) = &o.ae_mode {
        cfg.apply("ae_mode", v)?;
    }
    if let Some(v) = &o.aag_input {
        cfg.apply("aag_input", v)?;
    }
    if let Some(v) = &o.aag_with {
        cfg.apply("aag_with", v)?;
    }
    if let Some(v) = &o.out {
        cfg.out_dir = v.clone();
    }
    Ok(cfg)
}

fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetSource::Synthetic => eval::make_synthetic_split(
            &cfg.synth,
            cfg.synth_train_per_class,
            cfg.synth_test_per_class,
            cfg.train.seed,
        ),
        DatasetSource::Cifar(path) => Ok((
            io::load_cifar_binary(path, io::Split::Train)?,
            io::load_cifar_binary(path, io::Split::Test)?,
        )),
    }
}

/// Write the fully resolved configuration before any training step.
fn write_provenance(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    cfg.save(&cfg.out_dir.join("config.resolved.txt"))?;
    println!(
        "run {} method {:?} seed {} -> {}",
        cfg.run_id,
        cfg.train.method,
        cfg.train.seed,
        cfg.out_dir.display()
    );
    Ok(())
}

fn metrics_rows(cfg: &RunConfig, metrics: &[EpochMetrics]) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    for m in metrics {
        let mut push = |split: &str, name: &str, value: f64| {
            rows.push(MetricsRow {
                run_id: cfg.run_id.clone(),
                epoch: m.epoch,
                split: split.to_string(),
                metric_name: name.to_string(),
                value,
                seed: cfg.train.seed,
                wall_seconds: m.wall_seconds,
            });
        };
        push("train", "loss_total", m.train_loss);
        push("train", "loss_at_benign", m.at_benign);
        push("train", "loss_at_recombined", m.at_recombined);
        push("train", "loss_js", m.js);
        push("test", "natural_acc", m.natural_acc);
        push("test", "pgd_acc", m.pgd_acc);
    }
    rows
}

fn cmd_train(o: &Overrides) -> Result<i32> {
    let cfg = resolve_config(o)?;
    cfg.train.validate()?;
    write_provenance(&cfg)?;
    let (train_set, test_set) = load_datasets(&cfg)?;
    let (c, h, w) = train_set.image_dims();
    let classes = train_set.classes();
    let mut net = SmallConvNet::init(c, h, w, classes, cfg.train.seed)?;

    let uses_generator = cfg.train.method == TrainMethod::Dat;
    let mut gen = AagNet::init(
        cfg.train.aag_input,
        cfg.train.noise_dim,
        classes,
        c,
        h,
        w,
        cfg.train.seed ^ 0xaa6,
    )?;

    let metrics = match cfg.train.method {
        TrainMethod::Standard => trainer::train_standard(&train_set, &test_set, &mut net, &cfg.train)?,
        TrainMethod::PgdAt => trainer::train_pgd_at(&train_set, &test_set, &mut net, &cfg.train)?,
        TrainMethod::Trades => trainer::train_trades(&train_set, &test_set, &mut net, &cfg.train)?,
        TrainMethod::Dat => {
            if cfg.train.aag_with == AagWith::Dat {
                trainer::train_dat(&train_set, &test_set, &mut net, &mut gen, &cfg.train)?
            } else {
                trainer::train_with_aag_baseline(&train_set, &test_set, &mut net, &mut gen, &cfg.train)?
            }
        }
    };

    for m in &metrics {
        println!(
            "epoch {:>3}: loss {:.4} natural {:.3} pgd {:.3} ({:.1}s)",
            m.epoch, m.train_loss, m.natural_acc, m.pgd_acc, m.wall_seconds
        );
    }

    io::write_metrics(
        &metrics_rows(&cfg, &metrics),
        &cfg.out_dir.join("metrics.csv"),
        WriteMode::Append,
    )?;

    // single-branch methods never touch bank B; mirror bank A so the
    // checkpoint serves every method
    if !uses_generator {
        net.mirror_bank_a_to_b()?;
    }
    let merged = if uses_generator {
        ParameterSet::merged_with_prefix(&[("model", &net.params), ("aag", &gen.params)])?
    } else {
        ParameterSet::merged_with_prefix(&[("model", &net.params)])?
    };
    io::save_checkpoint(&merged, &cfg.out_dir.join("checkpoint.datk"))?;
    println!("checkpoint -> {}", cfg.out_dir.join("checkpoint.datk").display());
    Ok(0)
}

fn cmd_evaluate(o: &Overrides, checkpoint: &Path) -> Result<i32> {
    let cfg = resolve_config(o)?;
    let (_, test_set) = load_datasets(&cfg)?;
    let (c, h, w) = test_set.image_dims();
    let merged = io::load_checkpoint(checkpoint)?;
    let model_params = merged.split_prefix("model");
    if model_params.is_empty() {
        return Err(Error::format(checkpoint, "no model parameters in checkpoint"));
    }
    let net = SmallConvNet::from_params(model_params, c, h, w, test_set.classes())?;

    let attack = cfg.train.attack;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let natural = eval::evaluate_accuracy(&net, &test_set, None, BnBank::A, &mut rng)?;
    let fgsm_acc = {
        let mut correct = 0usize;
        for idx in test_set.sequential_batches(64) {
            let (x, y) = test_set.gather(&idx)?;
            let adv = crate::attacks::fgsm(&net, &x, &y, attack.epsilon, BnBank::A)?;
            let logits = net.logits_eval(&adv, BnBank::A)?;
            let cls = logits.shape()[1];
            for (i, &label) in y.iter().enumerate() {
                let row = &logits.data()[i * cls..(i + 1) * cls];
                let pred = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
                    .map(|(j, _)| j)
                    .expect("non-empty");
                if pred == label {
                    correct += 1;
                }
            }
        }
        correct as f64 / test_set.len() as f64
    };
    let pgd_cfg = AttackConfig::eval_pgd(attack.epsilon, attack.alpha, cfg.train.eval_steps);
    let pgd_acc = eval::evaluate_accuracy(&net, &test_set, Some(&pgd_cfg), BnBank::A, &mut rng)?;
    println!("natural  {natural:.4}");
    println!("fgsm     {fgsm_acc:.4}");
    println!("pgd-{:<3}  {pgd_acc:.4}", cfg.train.eval_steps);

    std::fs::create_dir_all(&cfg.out_dir)?;
    let rows: Vec<MetricsRow> = [
        ("natural_acc", natural),
        ("fgsm_acc", fgsm_acc),
        ("pgd_acc", pgd_acc),
    ]
    .into_iter()
    .map(|(name, value)| MetricsRow {
        run_id: cfg.run_id.clone(),
        epoch: 0,
        split: "eval".to_string(),
        metric_name: name.to_string(),
        value,
        seed: cfg.train.seed,
        wall_seconds: 0.0,
    })
    .collect();
    io::write_metrics(&rows, &cfg.out_dir.join("metrics.csv"), WriteMode::Append)?;
    Ok(0)
}

fn cmd_motivation(o: &Overrides) -> Result<i32> {
    let cfg = resolve_config(o)?;
    write_provenance(&cfg)?;
    let (train_set, test_set) = load_datasets(&cfg)?;
    let mcfg = MotivationConfig {
        split_attack: AttackConfig::eval_pgd(
            cfg.train.attack.epsilon,
            cfg.train.attack.alpha,
            cfg.train.eval_steps,
        ),
        train: cfg.train.clone(),
    };
    let rows = eval::motivation_experiment(&train_set, &test_set, &mcfg)?;
    println!("{:<10} {:>8} {:>8} {:>8} {:>8}", "model", "natural", "d_ae", "d_amp", "d_pha");
    let mut out_rows = Vec::new();
    for r in &rows {
        println!(
            "{:<10} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
            r.model, r.natural, r.d_ae, r.d_amp, r.d_pha
        );
        for (name, value) in [
            ("natural_acc", r.natural),
            ("d_ae_acc", r.d_ae),
            ("d_amp_acc", r.d_amp),
            ("d_pha_acc", r.d_pha),
        ] {
            out_rows.push(MetricsRow {
                run_id: cfg.run_id.clone(),
                epoch: 0,
                split: r.model.clone(),
                metric_name: name.to_string(),
                value,
                seed: cfg.train.seed,
                wall_seconds: 0.0,
            });
        }
    }
    io::write_metrics(&out_rows, &cfg.out_dir.join("motivation.csv"), WriteMode::Append)?;
    Ok(0)
}

fn cmd_theorem1(o: &Overrides, ratios: &str, gd_steps: usize, lr: f64) -> Result<i32> {
    let cfg = resolve_config(o)?;
    let parsed: Vec<f64> = ratios
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(format!("bad ratio {s:?}")))
        })
        .collect::<Result<_>>()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut rows = Vec::new();
    println!("{:>14} {:>12}", "variance_ratio", "norm_ratio");
    for vr in parsed {
        let task = Theorem1Task::new(vr, cfg.train.seed);
        let ratio = eval::theorem1_experiment(&task, gd_steps, lr)?;
        println!("{vr:>14} {ratio:>12.4}");
        rows.push(MetricsRow {
            run_id: cfg.run_id.clone(),
            epoch: 0,
            split: "theorem1".to_string(),
            metric_name: format!("norm_ratio_at_{vr}"),
            value: ratio,
            seed: cfg.train.seed,
            wall_seconds: 0.0,
        });
    }
    io::write_metrics(&rows, &cfg.out_dir.join("theorem1.csv"), WriteMode::Append)?;
    Ok(0)
}

fn cmd_gradcheck(o: &Overrides, seeds: u64) -> Result<i32> {
    let _ = resolve_config(o)?;
    let reports = checks::run_gradient_checks(seeds)?;
    let mut failures = 0usize;
    for r in &reports {
        if !r.passed() {
            failures += 1;
            println!("[fail] {:<32} rel err {:.3e} (tol {:.0e})", r.name, r.max_rel_err, r.tolerance);
        }
    }
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    println!(
        "gradcheck: {}/{} comparisons passed, worst rel err {:.3e}",
        reports.len() - failures,
        reports.len(),
        worst
    );
    Ok(if failures == 0 { 0 } else { 1 })
}

fn cmd_synth_data(o: &Overrides, file: Option<&Path>) -> Result<i32> {
    let cfg = resolve_config(o)?;
    let data = eval::make_synthetic_dataset(
        &cfg.synth,
        cfg.synth_train_per_class + cfg.synth_test_per_class,
        cfg.train.seed,
    )?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let path = file
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir.join("synthetic.bin"));
    let (c, h, w) = data.image_dims();
    if (c, h, w) == (3, 32, 32) {
        io::save_cifar_binary(&data, &path)?;
    } else {
        // same record layout generalized: label byte + C*H*W pixel bytes
        let per = c * h * w;
        let mut out = Vec::with_capacity(data.len() * (per + 1));
        for i in 0..data.len() {
            out.push(data.labels()[i] as u8);
            for &v in &data.images().data()[i * per..(i + 1) * per] {
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        std::fs::write(&path, out)?;
    }
    println!(
        "wrote {} samples ([{c},{h},{w}], {} classes) -> {}",
        data.len(),
        data.classes(),
        path.display()
    );
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flags_exit_one() {
        assert_eq!(cli_main(["datk", "train", "--bogus"]), 1);
        assert_eq!(cli_main(["datk", "no-such-command"]), 1);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(cli_main(["datk", "--help"]), 0);
    }
}
