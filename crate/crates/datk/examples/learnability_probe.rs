//! Grid probe: can the small classifier generalize on the synthetic family?
//! (Calibration scratch, not part of the documented example set.)

use std::time::Instant;

use datk::eval::{self, SyntheticSpec};
use datk::models::SmallConvNet;
use datk::trainer::{self, TrainConfig};

fn main() -> datk::Result<()> {
    let mut cfg = TrainConfig::desk_default();
    cfg.epochs = 8;
    cfg.lr_schedule = vec![(0, 0.05), (6, 0.01)];
    cfg.eval_steps = 5;
    cfg.attack.epsilon = 0.06;
    cfg.attack.alpha = 0.015;

    for (radius, noise, spread, classes, per_class) in [
        (0.45, 0.25, 0.4, 4usize, 96usize),
        (0.35, 0.25, 0.4, 4, 96),
        (0.35, 0.15, 0.3, 4, 96),
        (0.55, 0.25, 0.4, 4, 96),
        (0.45, 0.25, 0.4, 2, 96),
        (0.45, 0.15, 0.5, 4, 96),
    ] {
        let spec = SyntheticSpec {
            classes,
            channels: 1,
            height: 16,
            width: 16,
            noise_level: noise,
            style_spread: spread,
            pixel_std: 0.16,
            template_radius: radius,
            amp_class_tilt: 0.5,
        };
        let (train, test) = eval::make_synthetic_split(&spec, per_class, 32, 0)?;
        let oracle = eval::nearest_template_accuracy(
            &test,
            &eval::synthetic_phase_templates(&spec, 0)?,
        )?;
        let t0 = Instant::now();
        let mut net = SmallConvNet::init(1, 16, 16, classes, 0)?;
        let m = trainer::train_standard(&train, &test, &mut net, &cfg)?;
        let last = m.last().unwrap();
        println!(
            "radius={radius} noise={noise} spread={spread} c={classes} n={per_class}: \
             oracle={oracle:.3} nat={:.3} pgd5={:.3} loss={:.3} ({:.0}s)",
            last.natural_acc,
            last.pgd_acc,
            last.train_loss,
            t0.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
