//! Sweep the split-attack budget against fixed trained models and watch the
//! amplitude/phase split accuracies (calibration scratch).

use datk::attacks::{AttackConfig, AttackInit, AttackLossKind};
use datk::eval::{self, SyntheticSpec};
use datk::models::SmallConvNet;
use datk::tensor::BnBank;
use datk::trainer::{self, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> datk::Result<()> {
    let spec = SyntheticSpec {
        noise_level: 0.35,
        ..SyntheticSpec::desk_default()
    };
    let (train, test) = eval::make_synthetic_split(&spec, 96, 24, 0)?;

    let mut tc = TrainConfig::desk_default();
    tc.seed = 0;
    tc.epochs = 8;
    tc.lr_schedule = vec![(0, 0.05), (6, 0.01)];
    tc.attack = AttackConfig {
        epsilon: 0.1,
        alpha: 0.025,
        steps: 5,
        beta: 0.0,
        loss_kind: AttackLossKind::CeOnly,
        init: AttackInit::Gaussian1e3,
    };
    tc.eval_steps = 10;

    let mut standard = SmallConvNet::init(1, 16, 16, 4, 0)?;
    let mut c = tc.clone();
    c.attack.epsilon = 0.0;
    trainer::train_standard(&train, &test, &mut standard, &c)?;
    let mut robust = SmallConvNet::init(1, 16, 16, 4, 0)?;
    trainer::train_pgd_at(&train, &test, &mut robust, &tc)?;

    println!("split sweep (train eps 0.1):");
    for (eps, alpha_div) in [
        (0.10, 4.0),
        (0.10, 1.0),
        (0.15, 1.0),
        (0.20, 4.0),
        (0.20, 2.0),
        (0.20, 1.0),
        (0.30, 2.0),
        (0.40, 2.0),
    ] {
        let attack = AttackConfig::eval_pgd(eps, eps / alpha_div, 10);
        for (name, net) in [("std", &standard), ("rob", &robust)] {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let splits = eval::build_eval_splits(&test, net, &attack, &mut rng)?;
            let mut erng = ChaCha8Rng::seed_from_u64(8);
            let ae = eval::evaluate_accuracy(net, &splits.d_ae, None, BnBank::A, &mut erng)?;
            let amp = eval::evaluate_accuracy(net, &splits.d_amp, None, BnBank::A, &mut erng)?;
            let pha = eval::evaluate_accuracy(net, &splits.d_pha, None, BnBank::A, &mut erng)?;
            println!(
                "  eps={eps:.2} a=eps/{alpha_div}: {name} ae={ae:.2} amp={amp:.2} pha={pha:.2} {}",
                if name == "rob" && pha > amp { "<-- flip" } else { "" }
            );
        }
    }
    Ok(())
}
