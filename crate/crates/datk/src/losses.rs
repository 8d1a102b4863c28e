//! Scalar objectives: cross-entropy, KL and JS divergences, the KL-boosted
//! attack loss, the per-branch adversarial training loss, the joint
//! dual-branch objective, and the TRADES baseline.
//!
//! Divergences take probability batches that are floored at `1e-12` and
//! renormalized before any logarithm. `kl_divergence(p, q)` is
//! `mean_i Σ_j p_ij ln(p_ij/q_ij)` — the first argument is the numerator
//! distribution. All losses are recorded on a [`Tape`], so gradients with
//! respect to any logits argument fall out of `backward`.

use crate::error::Result;
use crate::tensor::{Tape, ValueId};

/// Mean cross-entropy of logits against integer labels, computed as
/// `-mean log_softmax(logits)[y]` with max-subtraction for stability.
pub fn cross_entropy(tape: &mut Tape, logits: ValueId, labels: &[usize]) -> Result<ValueId> {
    let logp = tape.log_softmax(logits)?;
    tape.nll_mean(logp, labels)
}

/// Batch-mean KL divergence between probability batches.
pub fn kl_divergence(tape: &mut Tape, p: ValueId, q: ValueId) -> Result<ValueId> {
    let pn = tape.floor_norm(p)?;
    let qn = tape.floor_norm(q)?;
    tape.kl_mean(pn, qn)
}

/// Batch-mean Jensen–Shannon divergence: `½·KL(p, m) + ½·KL(q, m)` with
/// `m = (p+q)/2`. Symmetric, bounded by ln 2, zero iff the arguments agree.
pub fn js_divergence(tape: &mut Tape, p: ValueId, q: ValueId) -> Result<ValueId> {
    let pn = tape.floor_norm(p)?;
    let qn = tape.floor_norm(q)?;
    let sum = tape.add(pn, qn)?;
    let m = tape.scale(sum, 0.5);
    let kl_pm = tape.kl_mean(pn, m)?;
    let kl_qm = tape.kl_mean(qn, m)?;
    let total = tape.add(kl_pm, kl_qm)?;
    Ok(tape.scale(total, 0.5))
}

fn softmax_probs(tape: &mut Tape, logits: ValueId) -> Result<ValueId> {
    let p = tape.softmax(logits)?;
    tape.floor_norm(p)
}

/// Attack objective: `CE(adv, y) + β·KL(softmax(adv), softmax(benign))`.
///
/// During attack generation the caller passes the benign logits as a tape
/// constant, so the KL term only pushes on the adversarial branch.
pub fn loss_ae(
    tape: &mut Tape,
    logits_benign: ValueId,
    logits_adv: ValueId,
    labels: &[usize],
    beta: f64,
) -> Result<ValueId> {
    let ce = cross_entropy(tape, logits_adv, labels)?;
    if beta == 0.0 {
        return Ok(ce);
    }
    let p_adv = softmax_probs(tape, logits_adv)?;
    let p_ben = softmax_probs(tape, logits_benign)?;
    let kl = tape.kl_mean(p_adv, p_ben)?;
    let klw = tape.scale(kl, beta);
    tape.add(ce, klw)
}

/// Per-branch training loss: `CE(benign, y) + β·KL(softmax(adv), softmax(benign))`.
pub fn loss_at(
    tape: &mut Tape,
    logits_benign: ValueId,
    logits_adv: ValueId,
    labels: &[usize],
    beta: f64,
) -> Result<ValueId> {
    let ce = cross_entropy(tape, logits_benign, labels)?;
    if beta == 0.0 {
        return Ok(ce);
    }
    let p_adv = softmax_probs(tape, logits_adv)?;
    let p_ben = softmax_probs(tape, logits_benign)?;
    let kl = tape.kl_mean(p_adv, p_ben)?;
    let klw = tape.scale(kl, beta);
    tape.add(ce, klw)
}

/// TRADES objective; functionally the same shape as [`loss_at`], kept as its
/// own entry point because it is a distinct named baseline.
pub fn loss_trades(
    tape: &mut Tape,
    logits_benign: ValueId,
    logits_adv: ValueId,
    labels: &[usize],
    beta: f64,
) -> Result<ValueId> {
    loss_at(tape, logits_benign, logits_adv, labels, beta)
}

/// The joint objective with its component breakdown.
#[derive(Debug, Clone, Copy)]
pub struct DatLoss {
    pub total: ValueId,
    pub at_benign: ValueId,
    pub at_recombined: ValueId,
    pub js: ValueId,
}

/// Joint dual-branch objective:
/// `½(L_AT(benign) + L_AT(recombined)) + ω·JS(softmax(x), softmax(x̂))`.
#[allow(clippy::too_many_arguments)]
pub fn loss_dat(
    tape: &mut Tape,
    logits_x: ValueId,
    logits_x_adv: ValueId,
    logits_xhat: ValueId,
    logits_xhat_adv: ValueId,
    labels: &[usize],
    beta: f64,
    omega: f64,
) -> Result<DatLoss> {
    let at_benign = loss_at(tape, logits_x, logits_x_adv, labels, beta)?;
    let at_recombined = loss_at(tape, logits_xhat, logits_xhat_adv, labels, beta)?;
    let p_x = softmax_probs(tape, logits_x)?;
    let p_xhat = softmax_probs(tape, logits_xhat)?;
    let js = js_from_probs(tape, p_x, p_xhat)?;

    let at_sum = tape.add(at_benign, at_recombined)?;
    let at_mean = tape.scale(at_sum, 0.5);
    let jsw = tape.scale(js, omega);
    let total = tape.add(at_mean, jsw)?;
    Ok(DatLoss {
        total,
        at_benign,
        at_recombined,
        js,
    })
}

fn js_from_probs(tape: &mut Tape, p: ValueId, q: ValueId) -> Result<ValueId> {
    let sum = tape.add(p, q)?;
    let m = tape.scale(sum, 0.5);
    let kl_pm = tape.kl_mean(p, m)?;
    let kl_qm = tape.kl_mean(q, m)?;
    let total = tape.add(kl_pm, kl_qm)?;
    Ok(tape.scale(total, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    const LN2: f64 = std::f64::consts::LN_2;

    fn prob(tape: &mut Tape, rows: &[&[f64]]) -> ValueId {
        let c = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        tape.constant(Tensor::new(vec![rows.len(), c], data).unwrap())
    }

    fn scalar(tape: &Tape, id: ValueId) -> f64 {
        tape.value(id).item().unwrap()
    }

    #[test]
    fn ce_uniform_logits_is_log_c() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(vec![2, 10]));
        let ce = cross_entropy(&mut tape, logits, &[3, 7]).unwrap();
        assert!((scalar(&tape, ce) - 10.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn ce_saturated_logits_is_near_zero() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::new(vec![1, 3], vec![1000.0, 0.0, 0.0]).unwrap());
        let ce = cross_entropy(&mut tape, logits, &[0]).unwrap();
        assert!(scalar(&tape, ce) < 1e-9);
    }

    #[test]
    fn ce_two_class_hand_value() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let ce = cross_entropy(&mut tape, logits, &[0]).unwrap();
        // -ln(e/(e+1)) = ln(1 + e^-1)
        assert!((scalar(&tape, ce) - 0.313261687518).abs() < 1e-9);
    }

    #[test]
    fn ce_rejects_out_of_range_label() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(vec![1, 3]));
        assert!(cross_entropy(&mut tape, logits, &[3]).is_err());
    }

    #[test]
    fn kl_hand_values() {
        let mut tape = Tape::new();
        let p = prob(&mut tape, &[&[1.0, 0.0]]);
        let q = prob(&mut tape, &[&[0.5, 0.5]]);
        let kl = kl_divergence(&mut tape, p, q).unwrap();
        assert!((scalar(&tape, kl) - LN2).abs() < 1e-6);

        let p = prob(&mut tape, &[&[0.5, 0.5]]);
        let q = prob(&mut tape, &[&[0.25, 0.75]]);
        let kl = kl_divergence(&mut tape, p, q).unwrap();
        // 0.5 ln 2 + 0.5 ln(2/3)
        assert!((scalar(&tape, kl) - 0.143841036226).abs() < 1e-6);
    }

    #[test]
    fn kl_zero_on_equal_inputs() {
        let mut tape = Tape::new();
        let p = prob(&mut tape, &[&[0.2, 0.3, 0.5], &[0.7, 0.2, 0.1]]);
        let kl = kl_divergence(&mut tape, p, p).unwrap();
        assert!(scalar(&tape, kl).abs() < 1e-9);
    }

    #[test]
    fn js_is_symmetric_bounded_and_maximal_on_disjoint_support() {
        let mut tape = Tape::new();
        let p = prob(&mut tape, &[&[1.0, 0.0]]);
        let q = prob(&mut tape, &[&[0.0, 1.0]]);
        let js_pq = js_divergence(&mut tape, p, q).unwrap();
        let js_qp = js_divergence(&mut tape, q, p).unwrap();
        assert!((scalar(&tape, js_pq) - LN2).abs() < 1e-6);
        assert_eq!(
            scalar(&tape, js_pq).to_bits(),
            scalar(&tape, js_qp).to_bits(),
            "js must be exactly symmetric"
        );

        let a = prob(&mut tape, &[&[0.6, 0.3, 0.1]]);
        let b = prob(&mut tape, &[&[0.1, 0.4, 0.5]]);
        let js = js_divergence(&mut tape, a, b).unwrap();
        let v = scalar(&tape, js);
        assert!(v > 0.0 && v < LN2);
        let js_self = js_divergence(&mut tape, a, a).unwrap();
        assert!(scalar(&tape, js_self).abs() < 1e-9);
    }

    #[test]
    fn loss_ae_reductions() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        // identical branches: KL term vanishes
        let ae = loss_ae(&mut tape, z, z, &[0], 15.0).unwrap();
        let ce = cross_entropy(&mut tape, z, &[0]).unwrap();
        assert!((scalar(&tape, ae) - scalar(&tape, ce)).abs() < 1e-9);

        // beta = 0 ignores the benign branch entirely
        let zb = tape.constant(Tensor::new(vec![1, 2], vec![-3.0, 5.0]).unwrap());
        let ae0 = loss_ae(&mut tape, zb, z, &[0], 0.0).unwrap();
        assert!((scalar(&tape, ae0) - scalar(&tape, ce)).abs() < 1e-12);
    }

    #[test]
    fn loss_ae_hand_composition() {
        // distinct toy logits; CE and KL composed by hand
        let mut tape = Tape::new();
        let zx = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let za = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let beta = 15.0;
        let ae = loss_ae(&mut tape, zx, za, &[0], beta).unwrap();
        let ce = cross_entropy(&mut tape, za, &[0]).unwrap();
        let pa = tape.softmax(za).unwrap();
        let pa = tape.floor_norm(pa).unwrap();
        let px = tape.softmax(zx).unwrap();
        let px = tape.floor_norm(px).unwrap();
        let kl = tape.kl_mean(pa, px).unwrap();
        let expect = scalar(&tape, ce) + beta * scalar(&tape, kl);
        assert!((scalar(&tape, ae) - expect).abs() < 1e-12);
    }

    #[test]
    fn loss_at_takes_ce_on_benign_branch() {
        let mut tape = Tape::new();
        let zx = tape.constant(Tensor::new(vec![1, 2], vec![2.0, -1.0]).unwrap());
        let za = tape.constant(Tensor::new(vec![1, 2], vec![-1.0, 2.0]).unwrap());
        let at0 = loss_at(&mut tape, zx, za, &[0], 0.0).unwrap();
        let ce_benign = cross_entropy(&mut tape, zx, &[0]).unwrap();
        assert!((scalar(&tape, at0) - scalar(&tape, ce_benign)).abs() < 1e-12);

        let at_same = loss_at(&mut tape, zx, zx, &[0], 15.0).unwrap();
        assert!((scalar(&tape, at_same) - scalar(&tape, ce_benign)).abs() < 1e-9);

        let trades = loss_trades(&mut tape, zx, za, &[0], 6.0).unwrap();
        let at = loss_at(&mut tape, zx, za, &[0], 6.0).unwrap();
        assert_eq!(scalar(&tape, trades).to_bits(), scalar(&tape, at).to_bits());
    }

    #[test]
    fn loss_dat_component_identity_and_collapse() {
        let mut tape = Tape::new();
        let zx = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 0.2, -0.3, 0.0, 0.5, 1.5]).unwrap());
        let zxa =
            tape.constant(Tensor::new(vec![2, 3], vec![0.3, 0.9, -1.0, 0.2, -0.2, 2.0]).unwrap());
        let zh = tape.constant(Tensor::new(vec![2, 3], vec![0.8, 0.1, 0.4, -0.6, 0.7, 0.9]).unwrap());
        let zha =
            tape.constant(Tensor::new(vec![2, 3], vec![0.5, -0.5, 0.0, 1.1, 0.3, -0.8]).unwrap());
        let labels = [0usize, 2];
        let (beta, omega) = (15.0, 2.0);
        let parts = loss_dat(&mut tape, zx, zxa, zh, zha, &labels, beta, omega).unwrap();
        let total = scalar(&tape, parts.total);
        let composed = 0.5 * (scalar(&tape, parts.at_benign) + scalar(&tape, parts.at_recombined))
            + omega * scalar(&tape, parts.js);
        assert!((total - composed).abs() < 1e-9);

        // recombined branch identical to benign branch: js vanishes, halves equal
        let parts2 = loss_dat(&mut tape, zx, zxa, zx, zxa, &labels, beta, omega).unwrap();
        let at = loss_at(&mut tape, zx, zxa, &labels, beta).unwrap();
        assert!((scalar(&tape, parts2.total) - scalar(&tape, at)).abs() < 1e-9);
        assert!(scalar(&tape, parts2.js).abs() < 1e-9);

        // omega = 0 leaves the mean of the two branch losses
        let parts3 = loss_dat(&mut tape, zx, zxa, zh, zha, &labels, beta, 0.0).unwrap();
        let expect = 0.5 * (scalar(&tape, parts3.at_benign) + scalar(&tape, parts3.at_recombined));
        assert!((scalar(&tape, parts3.total) - expect).abs() < 1e-12);
    }

    #[test]
    fn losses_invariant_to_constant_logit_shift() {
        let mut tape = Tape::new();
        let z = Tensor::new(vec![1, 3], vec![0.3, -0.7, 1.1]).unwrap();
        let shifted = Tensor::new(vec![1, 3], vec![0.3 + 10.0, -0.7 + 10.0, 1.1 + 10.0]).unwrap();
        let za = tape.constant(z);
        let zb = tape.constant(shifted);
        let ce_a = cross_entropy(&mut tape, za, &[2]).unwrap();
        let ce_b = cross_entropy(&mut tape, zb, &[2]).unwrap();
        assert!((scalar(&tape, ce_a) - scalar(&tape, ce_b)).abs() < 1e-9);

        let other = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 0.0, -1.0]).unwrap());
        let ae_a = loss_ae(&mut tape, other, za, &[1], 15.0).unwrap();
        let ae_b = loss_ae(&mut tape, other, zb, &[1], 15.0).unwrap();
        assert!((scalar(&tape, ae_a) - scalar(&tape, ae_b)).abs() < 1e-9);
    }
}
