//! Training loops: plain empirical risk minimization, PGD-AT, TRADES, the
//! joint dual-branch min-max loop, and the amplitude-generator add-on for the
//! two baselines.
//!
//! Every loop is single-threaded and bit-reproducible given a seed. The
//! dual-branch loop routes benign data (and its adversarial examples) through
//! batch-norm bank A and recombined data through bank B, evaluates one joint
//! loss, and applies one classifier descent step and one generator ascent
//! step computed from the same backward pass.

use std::time::Instant;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attacks::{self, AttackConfig, AttackInit, AttackLossKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval;
use crate::losses;
use crate::models::{
    aag_conditioning, batch_half_amplitudes, batch_spectra, build_recombined_tape, AagInputMode,
    AagNet, AmplitudeScale, SmallConvNet,
};
use crate::tensor::{
    commit_bn_updates, sgd_momentum_step, BnBank, GradientRecord, Mode, StepDirection, Tape,
    Tensor, ValueId,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrainMethod {
    Standard,
    PgdAt,
    Trades,
    #[default]
    Dat,
}

/// How the adversarial example of the recombined branch is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AeMode {
    /// Run the attack a second time, on the recombined batch.
    #[default]
    Dual,
    /// Recombine the benign adversarial example through the generator instead
    /// of attacking twice.
    Single,
}

/// Which objective the generator add-on trains under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AagWith {
    #[default]
    Dat,
    PgdAt,
    Trades,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: TrainMethod,
    pub epochs: usize,
    pub batch_size: usize,
    /// Step learning-rate schedule as (start epoch, rate) pairs.
    pub lr_schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub attack: AttackConfig,
    /// KL weight shared by the attack loss and the per-branch training loss.
    pub beta: f64,
    /// Weight of the JS consistency term.
    pub omega: f64,
    /// Fixed generator learning rate.
    pub aag_lr: f64,
    /// Noise dimension τ of the generator input.
    pub noise_dim: usize,
    /// Per-sample mixing weights are drawn uniformly from [0, lambda_max].
    pub lambda_max: f64,
    pub ae_mode: AeMode,
    pub aag_input: AagInputMode,
    pub aag_with: AagWith,
    pub seed: u64,
    /// PGD step count for the per-epoch robust-accuracy column.
    pub eval_steps: usize,
}

impl Default for TrainConfig {
    /// Full-scale defaults: 150 epochs with decays at 100 and 110.
    fn default() -> Self {
        TrainConfig {
            method: TrainMethod::Dat,
            epochs: 150,
            batch_size: 128,
            lr_schedule: vec![(0, 0.1), (100, 0.01), (110, 0.001)],
            momentum: 0.9,
            weight_decay: 5e-4,
            attack: AttackConfig::training_default(),
            beta: 15.0,
            omega: 2.0,
            aag_lr: 0.1,
            noise_dim: 100,
            lambda_max: 1.0,
            ae_mode: AeMode::Dual,
            aag_input: AagInputMode::NoiseLogits,
            aag_with: AagWith::Dat,
            seed: 0,
            eval_steps: 10,
        }
    }
}

impl TrainConfig {
    /// Scaled-down defaults that finish in minutes on a laptop: 30 epochs,
    /// decays at 20 and 25, batches of 32.
    pub fn desk_default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr_schedule: vec![(0, 0.1), (20, 0.01), (25, 0.001)],
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        lr_at(&self.lr_schedule, 0)?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if self.beta < 0.0 || self.omega < 0.0 {
            return Err(Error::config("beta and omega must be non-negative"));
        }
        if self.aag_lr <= 0.0 {
            return Err(Error::config("aag_lr must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lambda_max) {
            return Err(Error::config(format!(
                "lambda_max must lie in [0,1], got {}",
                self.lambda_max
            )));
        }
        if self.noise_dim == 0 {
            return Err(Error::config("noise_dim must be positive"));
        }
        self.attack.validate()
    }

    fn train_attack(&self) -> AttackConfig {
        AttackConfig {
            beta: self.beta,
            ..self.attack
        }
    }

    fn eval_attack(&self) -> AttackConfig {
        AttackConfig {
            steps: self.eval_steps,
            loss_kind: AttackLossKind::CeOnly,
            init: AttackInit::UniformEps,
            beta: 0.0,
            ..self.attack
        }
    }
}

/// Piecewise-constant learning rate: the rate of the last entry whose epoch
/// does not exceed the query.
pub fn lr_at(schedule: &[(usize, f64)], epoch: usize) -> Result<f64> {
    if schedule.is_empty() {
        return Err(Error::config("learning-rate schedule must not be empty"));
    }
    if schedule[0].0 != 0 {
        return Err(Error::config("learning-rate schedule must start at epoch 0"));
    }
    if schedule.windows(2).any(|w| w[0].0 > w[1].0) {
        return Err(Error::config("learning-rate schedule epochs must be non-decreasing"));
    }
    if let Some(bad) = schedule.iter().find(|(_, lr)| *lr <= 0.0) {
        return Err(Error::config(format!("learning rate must be positive, got {}", bad.1)));
    }
    Ok(schedule
        .iter()
        .take_while(|(e, _)| *e <= epoch)
        .last()
        .expect("schedule starts at 0")
        .1)
}

/// One per-epoch result row.
#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub at_benign: f64,
    pub at_recombined: f64,
    pub js: f64,
    pub natural_acc: f64,
    pub pgd_acc: f64,
    pub wall_seconds: f64,
}

fn draw_z(rng: &mut ChaCha8Rng, n: usize, tau: usize) -> Tensor {
    let data: Vec<f64> = (0..n * tau).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![n, tau], data).expect("shape matches data")
}

fn draw_lambdas(rng: &mut ChaCha8Rng, n: usize, lambda_max: f64) -> Vec<f64> {
    use rand::RngExt;
    (0..n)
        .map(|_| {
            if lambda_max == 0.0 {
                0.0
            } else {
                rng.random_range(0.0..=lambda_max)
            }
        })
        .collect()
}

fn split_grads(record: GradientRecord) -> (GradientRecord, GradientRecord) {
    let mut model = IndexMap::new();
    let mut aag = IndexMap::new();
    for (name, grad) in record.grads {
        if let Some(rest) = name.strip_prefix("model/") {
            model.insert(rest.to_string(), grad);
        } else if let Some(rest) = name.strip_prefix("aag/") {
            aag.insert(rest.to_string(), grad);
        }
    }
    (
        GradientRecord {
            grads: model,
            input_grad: None,
        },
        GradientRecord {
            grads: aag,
            input_grad: None,
        },
    )
}

fn check_finite(value: f64, what: &str, epoch: usize, batch: usize) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::numerical(format!(
            "{what} became non-finite ({value}) at epoch {epoch}, batch {batch}"
        )));
    }
    Ok(value)
}

fn epoch_eval(
    net: &SmallConvNet,
    test: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    let natural = eval::evaluate_accuracy(net, test, None, BnBank::A, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let attack = cfg.eval_attack();
    let robust = eval::evaluate_accuracy(
        net,
        test,
        Some(&attack),
        BnBank::A,
        &mut ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9),
    )?;
    Ok((natural, robust))
}

/// Plain cross-entropy training on benign data, bank A only.
pub fn train_standard(
    train: &Dataset,
    test: &Dataset,
    net: &mut SmallConvNet,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut metrics = Vec::new();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_at(&cfg.lr_schedule, epoch)?;
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (bi, idx) in train.epoch_batches(cfg.batch_size, &mut rng).iter().enumerate() {
            let (x, y) = train.gather(idx)?;
            let mut tape = Tape::new();
            let x_id = tape.constant(x);
            let (logits, pending) =
                net.forward_tape(&mut tape, x_id, "model/", Mode::Train, BnBank::A)?;
            let loss = losses::cross_entropy(&mut tape, logits, &y)?;
            let loss_val = check_finite(tape.value(loss).item()?, "loss", epoch, bi)?;
            tape.backward(loss)?;
            let (model_grads, _) = split_grads(tape.gradient_record(None));
            sgd_momentum_step(
                &mut net.params,
                &model_grads,
                lr,
                cfg.momentum,
                cfg.weight_decay,
                StepDirection::Descent,
            )?;
            commit_bn_updates(&mut net.params, &pending)?;
            loss_sum += loss_val;
            batches += 1;
        }
        let train_loss = loss_sum / batches.max(1) as f64;
        let (natural_acc, pgd_acc) = epoch_eval(net, test, cfg, cfg.seed ^ epoch as u64)?;
        metrics.push(EpochMetrics {
            epoch,
            train_loss,
            at_benign: train_loss,
            at_recombined: 0.0,
            js: 0.0,
            natural_acc,
            pgd_acc,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(metrics)
}

/// Min-max training on adversarial examples only (cross-entropy outer loss).
pub fn train_pgd_at(
    train: &Dataset,
    test: &Dataset,
    net: &mut SmallConvNet,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    let attack = AttackConfig {
        loss_kind: AttackLossKind::CeOnly,
        beta: 0.0,
        ..cfg.train_attack()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut metrics = Vec::new();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_at(&cfg.lr_schedule, epoch)?;
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (bi, idx) in train.epoch_batches(cfg.batch_size, &mut rng).iter().enumerate() {
            let (x, y) = train.gather(idx)?;
            let x_adv = attacks::pgd(net, &x, &y, &attack, BnBank::A, &mut rng)?;
            let mut tape = Tape::new();
            let adv_id = tape.constant(x_adv);
            let (logits, pending) =
                net.forward_tape(&mut tape, adv_id, "model/", Mode::Train, BnBank::A)?;
            let loss = losses::cross_entropy(&mut tape, logits, &y)?;
            let loss_val = check_finite(tape.value(loss).item()?, "loss", epoch, bi)?;
            tape.backward(loss)?;
            let (model_grads, _) = split_grads(tape.gradient_record(None));
            sgd_momentum_step(
                &mut net.params,
                &model_grads,
                lr,
                cfg.momentum,
                cfg.weight_decay,
                StepDirection::Descent,
            )?;
            commit_bn_updates(&mut net.params, &pending)?;
            loss_sum += loss_val;
            batches += 1;
        }
        let train_loss = loss_sum / batches.max(1) as f64;
        let (natural_acc, pgd_acc) = epoch_eval(net, test, cfg, cfg.seed ^ epoch as u64)?;
        metrics.push(EpochMetrics {
            epoch,
            train_loss,
            at_benign: train_loss,
            at_recombined: 0.0,
            js: 0.0,
            natural_acc,
            pgd_acc,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(metrics)
}

/// TRADES: perturb by ascending the prediction divergence, then minimize
/// benign cross-entropy plus the β-weighted divergence.
pub fn train_trades(
    train: &Dataset,
    test: &Dataset,
    net: &mut SmallConvNet,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    let attack = cfg.train_attack();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut metrics = Vec::new();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_at(&cfg.lr_schedule, epoch)?;
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (bi, idx) in train.epoch_batches(cfg.batch_size, &mut rng).iter().enumerate() {
            let (x, y) = train.gather(idx)?;
            let x_adv = attacks::kl_ascent(net, &x, &attack, BnBank::A, &mut rng)?;
            let mut tape = Tape::new();
            let x_id = tape.constant(x);
            let adv_id = tape.constant(x_adv);
            let (logits_x, mut pending) =
                net.forward_tape(&mut tape, x_id, "model/", Mode::Train, BnBank::A)?;
            let (logits_adv, mut p2) =
                net.forward_tape(&mut tape, adv_id, "model/", Mode::Train, BnBank::A)?;
            pending.append(&mut p2);
            let loss = losses::loss_trades(&mut tape, logits_x, logits_adv, &y, cfg.beta)?;
            let loss_val = check_finite(tape.value(loss).item()?, "loss", epoch, bi)?;
            tape.backward(loss)?;
            let (model_grads, _) = split_grads(tape.gradient_record(None));
            sgd_momentum_step(
                &mut net.params,
                &model_grads,
                lr,
                cfg.momentum,
                cfg.weight_decay,
                StepDirection::Descent,
            )?;
            commit_bn_updates(&mut net.params, &pending)?;
            loss_sum += loss_val;
            batches += 1;
        }
        let train_loss = loss_sum / batches.max(1) as f64;
        let (natural_acc, pgd_acc) = epoch_eval(net, test, cfg, cfg.seed ^ epoch as u64)?;
        metrics.push(EpochMetrics {
            epoch,
            train_loss,
            at_benign: train_loss,
            at_recombined: 0.0,
            js: 0.0,
            natural_acc,
            pgd_acc,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(metrics)
}

/// Loss components realized by one dual-branch batch step.
#[derive(Debug, Clone, Copy)]
pub struct DatStep {
    pub total: f64,
    pub at_benign: f64,
    pub at_recombined: f64,
    pub js: f64,
}

/// Frozen draws of one batch step, sufficient to re-evaluate the same
/// objective under perturbed parameters.
#[derive(Debug, Clone)]
pub struct DatBatchTrace {
    pub z: Tensor,
    pub lambdas: Vec<f64>,
    pub conditioning: Tensor,
    pub x_adv: Tensor,
    /// Realized adversarial recombination (dual mode only).
    pub xhat_adv: Option<Tensor>,
    /// Conditioning built from the benign adversarial batch (single mode).
    pub conditioning_adv: Option<Tensor>,
}

struct DatBatchGraph {
    logits_x: ValueId,
    logits_x_adv: ValueId,
    logits_xhat: ValueId,
    logits_xhat_adv: ValueId,
    pending: Vec<crate::tensor::BnPending>,
}

/// Record the four branch forwards of the joint objective on one tape.
#[allow(clippy::too_many_arguments)]
fn dat_graph(
    tape: &mut Tape,
    net: &SmallConvNet,
    gen: &AagNet,
    scale: &AmplitudeScale,
    x: &Tensor,
    y: &[usize],
    trace: &DatBatchTrace,
    ae_mode: AeMode,
    mode: Mode,
) -> Result<DatBatchGraph> {
    let (amp, phase) = batch_spectra(x)?;
    let rec = build_recombined_tape(
        tape,
        gen,
        "aag/",
        &trace.z,
        &trace.conditioning,
        &trace.lambdas,
        &amp,
        &phase,
        scale,
    )?;

    let xhat_adv_id = match ae_mode {
        AeMode::Dual => {
            let adv = trace.xhat_adv.as_ref().ok_or_else(|| {
                Error::contract("dual mode requires a realized recombined adversarial batch")
            })?;
            tape.constant(adv.clone())
        }
        AeMode::Single => {
            let cond_adv = trace.conditioning_adv.as_ref().ok_or_else(|| {
                Error::contract("single mode requires conditioning for the adversarial batch")
            })?;
            let (adv_amp, adv_phase) = batch_spectra(&trace.x_adv)?;
            let rec_adv = build_recombined_tape(
                tape,
                gen,
                "aag/",
                &trace.z,
                cond_adv,
                &trace.lambdas,
                &adv_amp,
                &adv_phase,
                scale,
            )?;
            rec_adv.xhat
        }
    };

    let x_id = tape.constant(x.clone());
    let x_adv_id = tape.constant(trace.x_adv.clone());
    let (logits_x, mut pending) = net.forward_tape(tape, x_id, "model/", mode, BnBank::A)?;
    let (logits_x_adv, mut p2) = net.forward_tape(tape, x_adv_id, "model/", mode, BnBank::A)?;
    let (logits_xhat, mut p3) = net.forward_tape(tape, rec.xhat, "model/", mode, BnBank::B)?;
    let (logits_xhat_adv, mut p4) =
        net.forward_tape(tape, xhat_adv_id, "model/", mode, BnBank::B)?;
    pending.append(&mut p2);
    pending.append(&mut p3);
    pending.append(&mut p4);
    let _ = y;
    Ok(DatBatchGraph {
        logits_x,
        logits_x_adv,
        logits_xhat,
        logits_xhat_adv,
        pending,
    })
}

/// Generate the frozen draws and adversarial examples for one batch.
#[allow(clippy::too_many_arguments)]
fn dat_prepare_batch(
    net: &SmallConvNet,
    gen: &AagNet,
    scale: &mut AmplitudeScale,
    x: &Tensor,
    y: &[usize],
    cfg: &TrainConfig,
    attack: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<DatBatchTrace> {
    scale.update_from_batch(&batch_half_amplitudes(x)?)?;
    let x_adv = attacks::eaeg(net, x, y, attack, BnBank::A, rng)?;
    let n = x.shape()[0];
    let z = draw_z(rng, n, cfg.noise_dim);
    let lambdas = draw_lambdas(rng, n, cfg.lambda_max);
    let conditioning = aag_conditioning(cfg.aag_input, net, x, y)?;

    let (xhat_adv, conditioning_adv) = match cfg.ae_mode {
        AeMode::Dual => {
            // realize x̂ with the current generator, then attack it on bank B
            let (amp, phase) = batch_spectra(x)?;
            let mut tape = Tape::new();
            let rec = build_recombined_tape(
                &mut tape,
                gen,
                "aag/",
                &z,
                &conditioning,
                &lambdas,
                &amp,
                &phase,
                scale,
            )?;
            let xhat = tape.value(rec.xhat).clone();
            let adv = attacks::eaeg(net, &xhat, y, attack, BnBank::B, rng)?;
            (Some(adv), None)
        }
        AeMode::Single => {
            let cond_adv = aag_conditioning(cfg.aag_input, net, &x_adv, y)?;
            (None, Some(cond_adv))
        }
    };
    Ok(DatBatchTrace {
        z,
        lambdas,
        conditioning,
        x_adv,
        xhat_adv,
        conditioning_adv,
    })
}

/// One dual-branch batch step: build the joint graph, backpropagate once,
/// descend the classifier, ascend the generator, commit batch-norm updates.
#[allow(clippy::too_many_arguments)]
pub fn dat_batch_step(
    net: &mut SmallConvNet,
    gen: &mut AagNet,
    scale: &mut AmplitudeScale,
    x: &Tensor,
    y: &[usize],
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(DatStep, DatBatchTrace)> {
    let attack = cfg.train_attack();
    let trace = dat_prepare_batch(net, gen, scale, x, y, cfg, &attack, rng)?;

    let mut tape = Tape::new();
    let graph = dat_graph(
        &mut tape, net, gen, scale, x, y, &trace, cfg.ae_mode, Mode::Train,
    )?;
    let parts = losses::loss_dat(
        &mut tape,
        graph.logits_x,
        graph.logits_x_adv,
        graph.logits_xhat,
        graph.logits_xhat_adv,
        y,
        cfg.beta,
        cfg.omega,
    )?;
    let step = DatStep {
        total: tape.value(parts.total).item()?,
        at_benign: tape.value(parts.at_benign).item()?,
        at_recombined: tape.value(parts.at_recombined).item()?,
        js: tape.value(parts.js).item()?,
    };
    tape.backward(parts.total)?;
    let (model_grads, aag_grads) = split_grads(tape.gradient_record(None));
    sgd_momentum_step(
        &mut net.params,
        &model_grads,
        lr,
        cfg.momentum,
        cfg.weight_decay,
        StepDirection::Descent,
    )?;
    sgd_momentum_step(
        &mut gen.params,
        &aag_grads,
        cfg.aag_lr,
        cfg.momentum,
        cfg.weight_decay,
        StepDirection::Ascent,
    )?;
    commit_bn_updates(&mut net.params, &graph.pending)?;
    Ok((step, trace))
}

/// Re-evaluate the joint objective for a frozen batch trace under the current
/// parameters, without touching any state. Used for min-max direction checks.
pub fn dat_probe_loss(
    net: &SmallConvNet,
    gen: &AagNet,
    scale: &AmplitudeScale,
    x: &Tensor,
    y: &[usize],
    trace: &DatBatchTrace,
    cfg: &TrainConfig,
) -> Result<DatStep> {
    let mut tape = Tape::new();
    let graph = dat_graph(&mut tape, net, gen, scale, x, y, trace, cfg.ae_mode, Mode::Train)?;
    let parts = losses::loss_dat(
        &mut tape,
        graph.logits_x,
        graph.logits_x_adv,
        graph.logits_xhat,
        graph.logits_xhat_adv,
        y,
        cfg.beta,
        cfg.omega,
    )?;
    Ok(DatStep {
        total: tape.value(parts.total).item()?,
        at_benign: tape.value(parts.at_benign).item()?,
        at_recombined: tape.value(parts.at_recombined).item()?,
        js: tape.value(parts.js).item()?,
    })
}

/// The joint dual-branch training loop.
pub fn train_dat(
    train: &Dataset,
    test: &Dataset,
    net: &mut SmallConvNet,
    gen: &mut AagNet,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    let mut scale = AmplitudeScale::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut metrics = Vec::new();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_at(&cfg.lr_schedule, epoch)?;
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for (bi, idx) in train.epoch_batches(cfg.batch_size, &mut rng).iter().enumerate() {
            let (x, y) = train.gather(idx)?;
            let (step, _) = dat_batch_step(net, gen, &mut scale, &x, &y, cfg, lr, &mut rng)?;
            check_finite(step.total, "joint loss", epoch, bi)?;
            sums.0 += step.total;
            sums.1 += step.at_benign;
            sums.2 += step.at_recombined;
            sums.3 += step.js;
            batches += 1;
        }
        let inv = 1.0 / batches.max(1) as f64;
        let (natural_acc, pgd_acc) = epoch_eval(net, test, cfg, cfg.seed ^ epoch as u64)?;
        metrics.push(EpochMetrics {
            epoch,
            train_loss: sums.0 * inv,
            at_benign: sums.1 * inv,
            at_recombined: sums.2 * inv,
            js: sums.3 * inv,
            natural_acc,
            pgd_acc,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(metrics)
}

/// Generator add-on for the two baselines: recombined samples join the batch
/// under the baseline's own loss applied to both branches (bank A benign,
/// bank B recombined), while the generator ascends the same total.
pub fn train_with_aag_baseline(
    train: &Dataset,
    test: &Dataset,
    net: &mut SmallConvNet,
    gen: &mut AagNet,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if cfg.aag_with == AagWith::Dat {
        return train_dat(train, test, net, gen, cfg);
    }
    let mut scale = AmplitudeScale::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut metrics = Vec::new();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_at(&cfg.lr_schedule, epoch)?;
        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for (bi, idx) in train.epoch_batches(cfg.batch_size, &mut rng).iter().enumerate() {
            let (x, y) = train.gather(idx)?;
            let step = aag_baseline_batch_step(net, gen, &mut scale, &x, &y, cfg, lr, &mut rng)?;
            check_finite(step.0, "joint loss", epoch, bi)?;
            sums.0 += step.0;
            sums.1 += step.1;
            sums.2 += step.2;
            batches += 1;
        }
        let inv = 1.0 / batches.max(1) as f64;
        let (natural_acc, pgd_acc) = epoch_eval(net, test, cfg, cfg.seed ^ epoch as u64)?;
        metrics.push(EpochMetrics {
            epoch,
            train_loss: sums.0 * inv,
            at_benign: sums.1 * inv,
            at_recombined: sums.2 * inv,
            js: 0.0,
            natural_acc,
            pgd_acc,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(metrics)
}

/// Returns (total, benign branch, recombined branch).
#[allow(clippy::too_many_arguments)]
fn aag_baseline_batch_step(
    net: &mut SmallConvNet,
    gen: &mut AagNet,
    scale: &mut AmplitudeScale,
    x: &Tensor,
    y: &[usize],
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, f64)> {
    scale.update_from_batch(&batch_half_amplitudes(x)?)?;
    let n = x.shape()[0];
    let z = draw_z(rng, n, cfg.noise_dim);
    let lambdas = draw_lambdas(rng, n, cfg.lambda_max);

    let mut tape = Tape::new();
    let (total, benign, recombined, pending) = match cfg.aag_with {
        AagWith::PgdAt => {
            // benign AE via plain PGD; the recombined branch trains on the
            // generator's recombination of that AE, which keeps the
            // generator inside the objective
            let attack = AttackConfig {
                loss_kind: AttackLossKind::CeOnly,
                beta: 0.0,
                ..cfg.train_attack()
            };
            let x_adv = attacks::pgd(net, x, y, &attack, BnBank::A, rng)?;
            let cond_adv = aag_conditioning(cfg.aag_input, net, &x_adv, y)?;
            let (adv_amp, adv_phase) = batch_spectra(&x_adv)?;
            let rec_adv = build_recombined_tape(
                &mut tape, gen, "aag/", &z, &cond_adv, &lambdas, &adv_amp, &adv_phase, scale,
            )?;
            let adv_id = tape.constant(x_adv);
            let (logits_adv, mut pending) =
                net.forward_tape(&mut tape, adv_id, "model/", Mode::Train, BnBank::A)?;
            let (logits_rec, mut p2) =
                net.forward_tape(&mut tape, rec_adv.xhat, "model/", Mode::Train, BnBank::B)?;
            pending.append(&mut p2);
            let ce_adv = losses::cross_entropy(&mut tape, logits_adv, y)?;
            let ce_rec = losses::cross_entropy(&mut tape, logits_rec, y)?;
            let sum = tape.add(ce_adv, ce_rec)?;
            let total = tape.scale(sum, 0.5);
            (total, ce_adv, ce_rec, pending)
        }
        AagWith::Trades => {
            let attack = cfg.train_attack();
            let x_adv = attacks::kl_ascent(net, x, &attack, BnBank::A, rng)?;
            let conditioning = aag_conditioning(cfg.aag_input, net, x, y)?;
            let (amp, phase) = batch_spectra(x)?;
            let rec = build_recombined_tape(
                &mut tape, gen, "aag/", &z, &conditioning, &lambdas, &amp, &phase, scale,
            )?;
            let xhat = tape.value(rec.xhat).clone();
            let xhat_adv_id = match cfg.ae_mode {
                AeMode::Dual => {
                    let adv = attacks::kl_ascent(net, &xhat, &attack, BnBank::B, rng)?;
                    tape.constant(adv)
                }
                AeMode::Single => {
                    let cond_adv = aag_conditioning(cfg.aag_input, net, &x_adv, y)?;
                    let (adv_amp, adv_phase) = batch_spectra(&x_adv)?;
                    build_recombined_tape(
                        &mut tape, gen, "aag/", &z, &cond_adv, &lambdas, &adv_amp, &adv_phase,
                        scale,
                    )?
                    .xhat
                }
            };
            let x_id = tape.constant(x.clone());
            let adv_id = tape.constant(x_adv);
            let (logits_x, mut pending) =
                net.forward_tape(&mut tape, x_id, "model/", Mode::Train, BnBank::A)?;
            let (logits_adv, mut p2) =
                net.forward_tape(&mut tape, adv_id, "model/", Mode::Train, BnBank::A)?;
            let (logits_xhat, mut p3) =
                net.forward_tape(&mut tape, rec.xhat, "model/", Mode::Train, BnBank::B)?;
            let (logits_xhat_adv, mut p4) =
                net.forward_tape(&mut tape, xhat_adv_id, "model/", Mode::Train, BnBank::B)?;
            pending.append(&mut p2);
            pending.append(&mut p3);
            pending.append(&mut p4);
            let t_benign = losses::loss_trades(&mut tape, logits_x, logits_adv, y, cfg.beta)?;
            let t_rec =
                losses::loss_trades(&mut tape, logits_xhat, logits_xhat_adv, y, cfg.beta)?;
            let sum = tape.add(t_benign, t_rec)?;
            let total = tape.scale(sum, 0.5);
            (total, t_benign, t_rec, pending)
        }
        AagWith::Dat => unreachable!("handled by train_dat"),
    };

    let step = (
        tape.value(total).item()?,
        tape.value(benign).item()?,
        tape.value(recombined).item()?,
    );
    tape.backward(total)?;
    let (model_grads, aag_grads) = split_grads(tape.gradient_record(None));
    sgd_momentum_step(
        &mut net.params,
        &model_grads,
        lr,
        cfg.momentum,
        cfg.weight_decay,
        StepDirection::Descent,
    )?;
    sgd_momentum_step(
        &mut gen.params,
        &aag_grads,
        cfg.aag_lr,
        cfg.momentum,
        cfg.weight_decay,
        StepDirection::Ascent,
    )?;
    commit_bn_updates(&mut net.params, &pending)?;
    Ok(step)
}
