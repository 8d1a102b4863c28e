//! Timing probe for the hot kernels (not part of the documented example set).

use std::time::Instant;

use datk::losses;
use datk::models::SmallConvNet;
use datk::tensor::{BnBank, Mode, Tape, Tensor};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> datk::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = SmallConvNet::init(1, 16, 16, 4, 0)?;
    let data: Vec<f64> = (0..32 * 256).map(|_| rng.random_range(0.0..1.0)).collect();
    let batch = Tensor::new(vec![32, 1, 16, 16], data)?;
    let labels: Vec<usize> = (0..32).map(|i| i % 4).collect();

    let reps = 50;
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let (logits, _) = net.forward_tape(&mut tape, x, "", Mode::Eval, BnBank::A)?;
        std::hint::black_box(tape.value(logits).data()[0]);
    }
    println!("forward eval: {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::with_frozen_params();
        let x = tape.input(batch.clone());
        let (logits, _) = net.forward_tape(&mut tape, x, "", Mode::Eval, BnBank::A)?;
        let loss = losses::cross_entropy(&mut tape, logits, &labels)?;
        tape.backward(loss)?;
        std::hint::black_box(tape.grad(x).unwrap()[0]);
    }
    println!(
        "forward+backward(input, frozen): {:.2} ms",
        t0.elapsed().as_secs_f64() * 1000.0 / reps as f64
    );

    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let (logits, _) = net.forward_tape(&mut tape, x, "model/", Mode::Train, BnBank::A)?;
        let loss = losses::cross_entropy(&mut tape, logits, &labels)?;
        tape.backward(loss)?;
        std::hint::black_box(tape.gradient_record(None).grads.len());
    }
    println!(
        "forward+backward(params, train): {:.2} ms",
        t0.elapsed().as_secs_f64() * 1000.0 / reps as f64
    );
    Ok(())
}
