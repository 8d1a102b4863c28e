//! Scratch probe used while calibrating desk-scale budgets (not part of the
//! documented example set; kept runnable for re-calibration).

use std::time::Instant;

use datk::attacks::AttackConfig;
use datk::data::Dataset;
use datk::eval::{self, SyntheticSpec};
use datk::models::{AagInputMode, AagNet, SmallConvNet};
use datk::tensor::BnBank;
use datk::trainer::{self, TrainConfig, TrainMethod};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> datk::Result<()> {
    let spec = SyntheticSpec::desk_default();
    let (train, test) = eval::make_synthetic_split(&spec, 96, 32, 0)?;
    println!("train {} samples, test {}", train.len(), test.len());

    let mut cfg = TrainConfig::desk_default();
    cfg.epochs = 10;
    cfg.lr_schedule = vec![(0, 0.05), (8, 0.01)];
    cfg.attack.epsilon = 0.06;
    cfg.attack.alpha = 0.015;
    cfg.attack.steps = 5;
    cfg.eval_steps = 10;
    cfg.seed = 0;

    // standard
    let t0 = Instant::now();
    let mut net = SmallConvNet::init(1, 16, 16, 4, 0)?;
    let mut c = cfg.clone();
    c.method = TrainMethod::Standard;
    let m = trainer::train_standard(&train, &test, &mut net, &c)?;
    println!(
        "standard: {:.1}s  nat={:.3} pgd={:.3} (last epoch loss {:.3})",
        t0.elapsed().as_secs_f64(),
        m.last().unwrap().natural_acc,
        m.last().unwrap().pgd_acc,
        m.last().unwrap().train_loss
    );

    // pgd-at
    let t0 = Instant::now();
    let mut net_at = SmallConvNet::init(1, 16, 16, 4, 0)?;
    let m_at = trainer::train_pgd_at(&train, &test, &mut net_at, &cfg)?;
    println!(
        "pgd-at:   {:.1}s  nat={:.3} pgd={:.3}",
        t0.elapsed().as_secs_f64(),
        m_at.last().unwrap().natural_acc,
        m_at.last().unwrap().pgd_acc
    );

    // trades
    let t0 = Instant::now();
    let mut net_tr = SmallConvNet::init(1, 16, 16, 4, 0)?;
    let m_tr = trainer::train_trades(&train, &test, &mut net_tr, &cfg)?;
    println!(
        "trades:   {:.1}s  nat={:.3} pgd={:.3}",
        t0.elapsed().as_secs_f64(),
        m_tr.last().unwrap().natural_acc,
        m_tr.last().unwrap().pgd_acc
    );

    // dat
    let t0 = Instant::now();
    let mut net_dat = SmallConvNet::init(1, 16, 16, 4, 0)?;
    let mut gen = AagNet::init(AagInputMode::NoiseLogits, cfg.noise_dim, 4, 1, 16, 16, 0)?;
    let m_dat = trainer::train_dat(&train, &test, &mut net_dat, &mut gen, &cfg)?;
    let last = m_dat.last().unwrap();
    println!(
        "dat:      {:.1}s  nat={:.3} pgd={:.3}  (ab={:.3} ar={:.3} js={:.4})",
        t0.elapsed().as_secs_f64(),
        last.natural_acc,
        last.pgd_acc,
        last.at_benign,
        last.at_recombined,
        last.js
    );

    // fgsm robustness comparison
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let fg = AttackConfig::eval_pgd(cfg.attack.epsilon, cfg.attack.epsilon, 1);
    for (name, net) in [
        ("standard", &net),
        ("pgd-at", &net_at),
        ("dat", &net_dat),
    ] {
        let acc = eval::evaluate_accuracy(net, &test, Some(&fg), BnBank::A, &mut rng)?;
        println!("  fgsm1({name}) = {acc:.3}");
    }
    probe_motivation(&train, &test)?;
    Ok(())
}

fn probe_motivation(train: &Dataset, test: &Dataset) -> datk::Result<()> {
    for seed in 0..3u64 {
        let t0 = Instant::now();
        let cfg = eval::MotivationConfig::desk_default(seed);
        let rows = eval::motivation_experiment(train, test, &cfg)?;
        println!("motivation seed {seed} ({:.1}s):", t0.elapsed().as_secs_f64());
        for r in rows {
            println!(
                "  {:<9} nat={:.3} ae={:.3} amp={:.3} pha={:.3}",
                r.model, r.natural, r.d_ae, r.d_amp, r.d_pha
            );
        }
    }
    Ok(())
}
