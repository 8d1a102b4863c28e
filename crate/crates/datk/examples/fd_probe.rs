//! Step-size scaling probe for the full-network input gradient
//! (calibration scratch, not part of the documented set).

use datk::losses;
use datk::models::SmallConvNet;
use datk::tensor::{
    finite_difference_gradient, relative_error, BnBank, Mode, Tape, Tensor,
};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> datk::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = SmallConvNet::init(1, 6, 6, 3, 0)?;
    let x = Tensor::new(
        vec![2, 1, 6, 6],
        (0..72).map(|_| rng.random_range(0.05..0.95)).collect(),
    )?;
    let labels = vec![0usize, 2];
    let beta = 15.0;
    let benign = net.logits_eval(&x, BnBank::A)?;

    let run = |probe: &Tensor| -> datk::Result<f64> {
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
    let ad = tape.grad(input).unwrap().to_vec();

    for step in [1e-2, 1e-3, 1e-4, 1e-5, 1e-6] {
        let fd = finite_difference_gradient(run, &x, step)?;
        let rel = relative_error(&ad, &fd);
        // worst coordinate
        let scale = ad
            .iter()
            .chain(fd.iter())
            .map(|v| v.abs())
            .fold(0.0f64, f64::max);
        let (worst_i, worst_d) = ad
            .iter()
            .zip(&fd)
            .enumerate()
            .map(|(i, (a, b))| (i, (a - b).abs()))
            .max_by(|p, q| p.1.partial_cmp(&q.1).unwrap())
            .unwrap();
        println!(
            "step {step:>8.0e}: rel {rel:.3e}  worst coord {worst_i} |ad-fd| {worst_d:.3e} ad {:.4e} fd {:.4e} scale {scale:.3e}",
            ad[worst_i],
            fd[worst_i]
        );
    }
    Ok(())
}
