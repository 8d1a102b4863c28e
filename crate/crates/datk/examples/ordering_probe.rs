//! Sweep attack strength / task difficulty until the split-accuracy orderings
//! have headroom (calibration scratch, not part of the documented set).

use datk::attacks::{AttackConfig, AttackInit, AttackLossKind};
use datk::eval::{self, MotivationConfig, SyntheticSpec};
use datk::trainer::TrainConfig;

fn main() -> datk::Result<()> {
    for (eps, noise, tilt, spread) in [
        (0.12, 0.5, 0.8, 0.3),
        (0.12, 0.7, 1.2, 0.3),
        (0.15, 0.7, 1.2, 0.3),
        (0.12, 0.9, 1.2, 0.25),
    ] {
        let spec = SyntheticSpec {
            noise_level: noise,
            amp_class_tilt: tilt,
            style_spread: spread,
            ..SyntheticSpec::desk_default()
        };
        let (train, test) = eval::make_synthetic_split(&spec, 96, 24, 0)?;
        let oracle = eval::nearest_template_accuracy(
            &test,
            &eval::synthetic_phase_templates(&spec, 0)?,
        )?;
        println!("eps={eps} noise={noise} tilt={tilt} spread={spread} (oracle {oracle:.2}):");
        for seed in 0..3u64 {
            let mut tc = TrainConfig::desk_default();
            tc.seed = seed;
            tc.epochs = 8;
            tc.lr_schedule = vec![(0, 0.05), (6, 0.01)];
            tc.attack = AttackConfig {
                epsilon: eps,
                alpha: eps / 4.0,
                steps: 5,
                beta: 0.0,
                loss_kind: AttackLossKind::CeOnly,
                init: AttackInit::Gaussian1e3,
            };
            tc.eval_steps = 10;
            let cfg = MotivationConfig {
                split_attack: AttackConfig::eval_pgd(eps, eps / 4.0, 10),
                train: tc,
            };
            let rows = eval::motivation_experiment(&train, &test, &cfg)?;
            let std = &rows[0];
            let rob = &rows[1];
            let per = &rows[2];
            let o1 = std.d_amp > std.d_pha;
            let o2 = rob.d_pha > rob.d_amp;
            let o3 = per.d_ae >= rob.d_ae;
            println!(
                "  seed {seed}: std(nat {:.2} amp {:.2} pha {:.2} ae {:.2}) rob(nat {:.2} amp {:.2} pha {:.2} ae {:.2}) per(ae {:.2}) | {}{}{}",
                std.natural, std.d_amp, std.d_pha, std.d_ae,
                rob.natural, rob.d_amp, rob.d_pha, rob.d_ae, per.d_ae,
                if o1 { "1" } else { "-" },
                if o2 { "2" } else { "-" },
                if o3 { "3" } else { "-" },
            );
        }
    }
    Ok(())
}
