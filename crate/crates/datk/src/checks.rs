//! The finite-difference gradient suite: every layer kind, every loss, the
//! attack objective's input gradient, and the generator's gradient through
//! the full recombination chain, all checked against central differences.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::losses;
use crate::models::{
    aag_conditioning, batch_half_amplitudes, batch_spectra, build_recombined_tape, AagInputMode,
    AagNet, AmplitudeScale, SmallConvNet,
};
use crate::tensor::{
    apply_layer, finite_difference_gradient, finite_difference_subset, relative_error, BnBank,
    LayerKind, Mode, ParameterSet, Tape, Tensor,
};

pub const FD_STEP: f64 = 1e-3;
pub const GRAD_TOLERANCE: f64 = 1e-3;

/// One named comparison between reverse-mode and finite-difference gradients.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Fraction of coordinates whose probe interval was smooth (central
    /// differences are meaningless across a ReLU or clamp kink).
    pub coverage: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance && self.coverage >= 0.5
    }
}

/// Central differences at `step` and `step/2`; a coordinate whose two
/// estimates disagree has a kink inside the probe interval and is excluded
/// from the comparison.
fn masked_fd<F>(mut f: F, point: &Tensor, step: f64) -> Result<Vec<Option<f64>>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let full = finite_difference_gradient(&mut f, point, step)?;
    let half = finite_difference_gradient(&mut f, point, step / 2.0)?;
    Ok(full
        .iter()
        .zip(&half)
        .map(|(&a, &b)| {
            let tol = 2e-4 * a.abs().max(b.abs()) + 1e-9;
            if (a - b).abs() <= tol {
                // Richardson extrapolation cancels the O(step²) truncation
                Some((4.0 * b - a) / 3.0)
            } else {
                None
            }
        })
        .collect())
}

/// Relative error over the stable coordinates, plus the fraction that were
/// stable.
fn masked_relative_error(ad: &[f64], fd: &[Option<f64>]) -> (f64, f64) {
    let pairs: Vec<(f64, f64)> = ad
        .iter()
        .zip(fd)
        .filter_map(|(&a, m)| m.map(|b| (a, b)))
        .collect();
    if pairs.is_empty() {
        return (f64::INFINITY, 0.0);
    }
    let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    (relative_error(&a, &b), pairs.len() as f64 / ad.len() as f64)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}

fn cotangent(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Check one layer: loss = sum(w ⊙ layer(input, params)), gradients for the
/// input and every trainable parameter versus central differences.
fn check_layer(
    name: &str,
    kind: LayerKind,
    params: &ParameterSet,
    prefix: &str,
    input: &Tensor,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<CheckReport> {
    // forward once to size the cotangent
    let run = |params: &ParameterSet, input: &Tensor, weights: Option<&[f64]>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.input(input.clone());
        let (out, _) = apply_layer(&mut tape, kind, x, params, prefix, mode, BnBank::A)?;
        let w = weights
            .map(|w| w.to_vec())
            .unwrap_or_else(|| vec![1.0; tape.value(out).len()]);
        let loss = tape.weighted_sum(out, w)?;
        tape.value(loss).item()
    };
    let out_len = {
        let mut tape = Tape::new();
        let x = tape.input(input.clone());
        let (out, _) = apply_layer(&mut tape, kind, x, params, prefix, mode, BnBank::A)?;
        tape.value(out).len()
    };
    let weights = cotangent(rng, out_len);

    // reverse-mode gradients
    let mut tape = Tape::new();
    let x = tape.input(input.clone());
    let (out, _) = apply_layer(&mut tape, kind, x, params, prefix, mode, BnBank::A)?;
    let loss = tape.weighted_sum(out, weights.clone())?;
    tape.backward(loss)?;
    let record = tape.gradient_record(Some(x));

    let mut worst: f64 = 0.0;
    let mut coverage: f64 = 1.0;

    // input gradient
    let fd_input = masked_fd(|probe| run(params, probe, Some(&weights)), input, FD_STEP)?;
    let ad_input = record
        .input_grad
        .as_ref()
        .ok_or_else(|| Error::numerical(format!("{name}: no input gradient")))?;
    let (rel, cov) = masked_relative_error(ad_input, &fd_input);
    worst = worst.max(rel);
    coverage = coverage.min(cov);

    // every trainable parameter the layer touched
    for (pname, grad) in &record.grads {
        let base = params.value(pname)?.clone();
        let fd = masked_fd(
            |probe| {
                let mut perturbed = params.clone();
                perturbed.get_mut(pname)?.value = probe.clone();
                run(&perturbed, input, Some(&weights))
            },
            &base,
            FD_STEP,
        )?;
        let (rel, cov) = masked_relative_error(grad, &fd);
        worst = worst.max(rel);
        coverage = coverage.min(cov);
    }

    Ok(CheckReport {
        name: name.to_string(),
        max_rel_err: worst,
        tolerance: GRAD_TOLERANCE,
        coverage,
    })
}

fn layer_params(rng: &mut ChaCha8Rng) -> Result<ParameterSet> {
    let mut params = ParameterSet::new();
    params.insert("conv.weight", random_tensor(rng, vec![3, 2, 3, 3], 0.4), true)?;
    params.insert("conv.bias", random_tensor(rng, vec![3], 0.2), true)?;
    params.insert("fc.weight", random_tensor(rng, vec![3, 4], 0.5), true)?;
    params.insert("fc.bias", random_tensor(rng, vec![3], 0.2), true)?;
    for tag in ["a", "b"] {
        params.insert(format!("bn.{tag}.gamma"), random_tensor(rng, vec![2], 0.5), true)?;
        params.insert(format!("bn.{tag}.beta"), random_tensor(rng, vec![2], 0.3), true)?;
        params.insert(
            format!("bn.{tag}.running_mean"),
            random_tensor(rng, vec![2], 0.2),
            false,
        )?;
        let var = Tensor::new(
            vec![2],
            (0..2).map(|_| rng.random_range(0.5..1.5)).collect(),
        )?;
        params.insert(format!("bn.{tag}.running_var"), var, false)?;
    }
    Ok(params)
}

fn check_layers(seed: u64, reports: &mut Vec<CheckReport>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(1));
    let params = layer_params(&mut rng)?;
    let conv_input = random_tensor(&mut rng, vec![2, 2, 4, 5], 0.8);
    let fc_input = random_tensor(&mut rng, vec![3, 4], 0.8);
    let cases: Vec<(String, LayerKind, &Tensor, &str, Mode)> = vec![
        (
            format!("conv3x3/s1 seed {seed}"),
            LayerKind::Conv3x3 { stride: 1 },
            &conv_input,
            "conv",
            Mode::Eval,
        ),
        (
            format!("conv3x3/s2 seed {seed}"),
            LayerKind::Conv3x3 { stride: 2 },
            &conv_input,
            "conv",
            Mode::Eval,
        ),
        (
            format!("linear seed {seed}"),
            LayerKind::Linear,
            &fc_input,
            "fc",
            Mode::Eval,
        ),
        (
            format!("relu seed {seed}"),
            LayerKind::Relu,
            &conv_input,
            "",
            Mode::Eval,
        ),
        (
            format!("global-avg-pool seed {seed}"),
            LayerKind::GlobalAvgPool,
            &conv_input,
            "",
            Mode::Eval,
        ),
        (
            format!("batch-norm/train seed {seed}"),
            LayerKind::BatchNorm,
            &conv_input,
            "bn",
            Mode::Train,
        ),
        (
            format!("batch-norm/eval seed {seed}"),
            LayerKind::BatchNorm,
            &conv_input,
            "bn",
            Mode::Eval,
        ),
    ];
    for (name, kind, input, prefix, mode) in cases {
        reports.push(check_layer(&name, kind, &params, prefix, input, mode, &mut rng)?);
    }
    Ok(())
}

/// Scalar loss as a function of one logits tensor, everything else fixed.
type LossFn<'a> = &'a dyn Fn(&mut Tape, crate::tensor::ValueId) -> Result<crate::tensor::ValueId>;

fn check_loss_arg(
    name: &str,
    build: LossFn,
    logits: &Tensor,
) -> Result<CheckReport> {
    let mut tape = Tape::new();
    let x = tape.input(logits.clone());
    let loss = build(&mut tape, x)?;
    tape.backward(loss)?;
    let ad = tape
        .grad(x)
        .ok_or_else(|| Error::numerical(format!("{name}: no gradient")))?
        .to_vec();
    let fd = masked_fd(
        |probe| {
            let mut tape = Tape::new();
            let x = tape.input(probe.clone());
            let loss = build(&mut tape, x)?;
            tape.value(loss).item()
        },
        logits,
        FD_STEP,
    )?;
    let (rel, coverage) = masked_relative_error(&ad, &fd);
    Ok(CheckReport {
        name: name.to_string(),
        max_rel_err: rel,
        tolerance: GRAD_TOLERANCE,
        coverage,
    })
}

fn check_losses(seed: u64, reports: &mut Vec<CheckReport>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x517c_c1b7).wrapping_add(2));
    let (n, c) = (3usize, 4usize);
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    let za = random_tensor(&mut rng, vec![n, c], 1.0);
    let zb = random_tensor(&mut rng, vec![n, c], 1.0);
    let zc = random_tensor(&mut rng, vec![n, c], 1.0);
    let zd = random_tensor(&mut rng, vec![n, c], 1.0);
    let (beta, omega) = (15.0, 2.0);

    // probabilities for the divergence checks
    let softmax = |t: &Tensor| -> Tensor {
        let mut tape = Tape::new();
        let x = tape.constant(t.clone());
        let p = tape.softmax(x).unwrap();
        tape.value(p).clone()
    };
    let pa = softmax(&za);
    let pb = softmax(&zb);

    let labels2 = labels.clone();
    reports.push(check_loss_arg(
        &format!("cross-entropy seed {seed}"),
        &move |tape, x| losses::cross_entropy(tape, x, &labels2),
        &za,
    )?);

    let pb2 = pb.clone();
    reports.push(check_loss_arg(
        &format!("kl/p seed {seed}"),
        &move |tape, x| {
            let q = tape.constant(pb2.clone());
            losses::kl_divergence(tape, x, q)
        },
        &pa,
    )?);
    let pa2 = pa.clone();
    reports.push(check_loss_arg(
        &format!("kl/q seed {seed}"),
        &move |tape, x| {
            let p = tape.constant(pa2.clone());
            losses::kl_divergence(tape, p, x)
        },
        &pb,
    )?);

    let pb3 = pb.clone();
    reports.push(check_loss_arg(
        &format!("js seed {seed}"),
        &move |tape, x| {
            let q = tape.constant(pb3.clone());
            losses::js_divergence(tape, x, q)
        },
        &pa,
    )?);

    // attack loss: benign branch constant, gradient flows through adv only
    let za2 = za.clone();
    let labels3 = labels.clone();
    reports.push(check_loss_arg(
        &format!("attack-loss/adv seed {seed}"),
        &move |tape, x| {
            let benign = tape.constant(za2.clone());
            losses::loss_ae(tape, benign, x, &labels3, beta)
        },
        &zb,
    )?);

    // per-branch training loss: both arguments carry gradient
    let zb2 = zb.clone();
    let labels4 = labels.clone();
    reports.push(check_loss_arg(
        &format!("at-loss/benign seed {seed}"),
        &move |tape, x| {
            let adv = tape.constant(zb2.clone());
            losses::loss_at(tape, x, adv, &labels4, beta)
        },
        &za,
    )?);
    let za3 = za.clone();
    let labels5 = labels.clone();
    reports.push(check_loss_arg(
        &format!("at-loss/adv seed {seed}"),
        &move |tape, x| {
            let benign = tape.constant(za3.clone());
            losses::loss_at(tape, benign, x, &labels5, beta)
        },
        &zb,
    )?);

    let zb3 = zb.clone();
    let labels6 = labels.clone();
    reports.push(check_loss_arg(
        &format!("trades seed {seed}"),
        &move |tape, x| {
            let adv = tape.constant(zb3.clone());
            losses::loss_trades(tape, x, adv, &labels6, beta)
        },
        &za,
    )?);

    // joint loss, one argument at a time
    for (tag, which) in ["x", "x-adv", "xhat", "xhat-adv"].iter().zip(0..4) {
        let (za4, zb4, zc4, zd4) = (za.clone(), zb.clone(), zc.clone(), zd.clone());
        let labels7 = labels.clone();
        let moving = match which {
            0 => za.clone(),
            1 => zb.clone(),
            2 => zc.clone(),
            _ => zd.clone(),
        };
        reports.push(check_loss_arg(
            &format!("dat-loss/{tag} seed {seed}"),
            &move |tape, x| {
                let ids: Vec<_> = [&za4, &zb4, &zc4, &zd4]
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        if i == which {
                            x
                        } else {
                            tape.constant((*t).clone())
                        }
                    })
                    .collect();
                Ok(losses::loss_dat(tape, ids[0], ids[1], ids[2], ids[3], &labels7, beta, omega)?
                    .total)
            },
            &moving,
        )?);
    }
    Ok(())
}

/// Gradient of the attack objective with respect to the image, through the
/// classifier.
fn check_attack_input_grad(seed: u64, reports: &mut Vec<CheckReport>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491).wrapping_add(3));
    let net = SmallConvNet::init(1, 6, 6, 3, seed)?;
    let x = Tensor::new(
        vec![2, 1, 6, 6],
        (0..72).map(|_| rng.random_range(0.05..0.95)).collect(),
    )?;
    let labels = vec![0usize, 2];
    let beta = 15.0;
    let benign = net.logits_eval(&x, BnBank::A)?;

    let run = |probe: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let input = tape.constant(probe.clone());
        let (logits, _) = net.forward_tape(&mut tape, input, "", Mode::Eval, BnBank::A)?;
        let benign_id = tape.constant(benign.clone());
        let loss = losses::loss_ae(&mut tape, benign_id, logits, &labels, beta)?;
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let input = tape.input(x.clone());
    let (logits, _) = net.forward_tape(&mut tape, input, "", Mode::Eval, BnBank::A)?;
    let benign_id = tape.constant(benign.clone());
    let loss = losses::loss_ae(&mut tape, benign_id, logits, &labels, beta)?;
    tape.backward(loss)?;
    let ad = tape
        .grad(input)
        .ok_or_else(|| Error::numerical("no input gradient through attack loss"))?
        .to_vec();
    let fd = masked_fd(run, &x, FD_STEP)?;
    let (rel, coverage) = masked_relative_error(&ad, &fd);
    reports.push(CheckReport {
        name: format!("attack-loss input-grad seed {seed}"),
        max_rel_err: rel,
        tolerance: GRAD_TOLERANCE,
        coverage,
    });
    Ok(())
}

/// Generator gradients through squash → scale → expand → mix → inverse
/// transform → classifier → joint loss, on a sampled subset of coordinates.
fn check_generator_chain(seed: u64, reports: &mut Vec<CheckReport>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(4));
    let net = SmallConvNet::init(1, 6, 6, 3, seed)?;
    let gen = AagNet::init(AagInputMode::NoiseLogits, 5, 3, 1, 6, 6, seed ^ 1)?;
    let batch = Tensor::new(
        vec![2, 1, 6, 6],
        (0..72).map(|_| rng.random_range(0.1..0.9)).collect(),
    )?;
    let labels = vec![0usize, 1];
    let mut scale = AmplitudeScale::new();
    scale.update_from_batch(&batch_half_amplitudes(&batch)?)?;
    let z = random_tensor(&mut rng, vec![2, 5], 1.0);
    let lambdas = vec![0.6, 0.9];
    let conditioning = aag_conditioning(gen.input_mode, &net, &batch, &labels)?;
    let (amp, phase) = batch_spectra(&batch)?;

    let loss_for = |gen: &AagNet| -> Result<f64> {
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
            &scale,
        )?;
        let (logits, _) = net.forward_tape(&mut tape, rec.xhat, "model/", Mode::Eval, BnBank::B)?;
        let loss = losses::cross_entropy(&mut tape, logits, &labels)?;
        tape.value(loss).item()
    };

    // reverse-mode gradients for every generator parameter
    let mut tape = Tape::new();
    let rec = build_recombined_tape(
        &mut tape,
        &gen,
        "aag/",
        &z,
        &conditioning,
        &lambdas,
        &amp,
        &phase,
        &scale,
    )?;
    let (logits, _) = net.forward_tape(&mut tape, rec.xhat, "model/", Mode::Eval, BnBank::B)?;
    let loss = losses::cross_entropy(&mut tape, logits, &labels)?;
    tape.backward(loss)?;
    let record = tape.gradient_record(None);

    let mut worst: f64 = 0.0;
    let mut coverage: f64 = 1.0;
    for pname in ["fc1.weight", "fc4.weight", "fc4.bias"] {
        let grad = record
            .get(&format!("aag/{pname}"))
            .ok_or_else(|| Error::numerical(format!("no generator gradient for {pname}")))?;
        let base = gen.params.value(pname)?.clone();
        let coords: Vec<usize> = (0..12.min(base.len()))
            .map(|_| rng.random_range(0..base.len()))
            .collect();
        let probe_at = |pname: &str, probe: &Tensor| -> Result<f64> {
            let mut perturbed = gen.clone();
            perturbed.params.get_mut(pname)?.value = probe.clone();
            loss_for(&perturbed)
        };
        let fd_full = finite_difference_subset(|p| probe_at(pname, p), &base, FD_STEP, &coords)?;
        let fd_half =
            finite_difference_subset(|p| probe_at(pname, p), &base, FD_STEP / 2.0, &coords)?;
        let mut ad_sub = Vec::new();
        let mut fd_sub = Vec::new();
        for ((&(i, a), &(_, b)), _) in fd_full.iter().zip(&fd_half).zip(&coords) {
            let tol = 2e-4 * a.abs().max(b.abs()) + 1e-9;
            if (a - b).abs() <= tol {
                ad_sub.push(grad[i]);
                fd_sub.push((4.0 * b - a) / 3.0);
            }
        }
        if fd_sub.is_empty() {
            coverage = 0.0;
            continue;
        }
        coverage = coverage.min(fd_sub.len() as f64 / coords.len() as f64);
        worst = worst.max(relative_error(&ad_sub, &fd_sub));
    }
    reports.push(CheckReport {
        name: format!("generator chain seed {seed}"),
        max_rel_err: worst,
        tolerance: GRAD_TOLERANCE,
        coverage,
    });
    Ok(())
}

/// Run the whole suite over `seeds` seeds.
pub fn run_gradient_checks(seeds: u64) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    for seed in 0..seeds {
        check_layers(seed, &mut reports)?;
        check_losses(seed, &mut reports)?;
        check_attack_input_grad(seed, &mut reports)?;
        check_generator_chain(seed, &mut reports)?;
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_suite_passes_over_three_seeds() {
        let reports = run_gradient_checks(3).unwrap();
        assert!(reports.len() >= 3 * 20);
        for r in &reports {
            assert!(
                r.passed(),
                "{} failed: rel err {:.3e} > {:.1e}",
                r.name,
                r.max_rel_err,
                r.tolerance
            );
        }
    }
}
