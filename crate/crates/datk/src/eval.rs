//! Robust-accuracy evaluation, the amplitude/phase split experiment, the
//! synthetic phase-labeled dataset, and an empirical check that amplitude
//! noise regularizes the corresponding linear weights toward zero.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attacks::{self, AttackConfig, AttackLossKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses;
use crate::models::SmallConvNet;
use crate::spectral;
use crate::tensor::{BnBank, Tape, Tensor};
use crate::trainer::{self, TrainConfig};

const EVAL_BATCH: usize = 64;

/// Fraction of argmax-correct predictions, optionally under attack.
pub fn evaluate_accuracy(
    net: &SmallConvNet,
    data: &Dataset,
    attack: Option<&AttackConfig>,
    bank: BnBank,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    let mut correct = 0usize;
    for idx in data.sequential_batches(EVAL_BATCH) {
        let (x, y) = data.gather(&idx)?;
        let x = match attack {
            Some(cfg) => attacks::generate(net, &x, &y, cfg, bank, rng)?,
            None => x,
        };
        let logits = net.logits_eval(&x, bank)?;
        let c = logits.shape()[1];
        for (i, &label) in y.iter().enumerate() {
            let row = &logits.data()[i * c..(i + 1) * c];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(j, _)| j)
                .expect("non-empty row");
            if pred == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// The three evaluation splits derived from one attacked test set: the raw
/// adversarial examples, adversarial amplitude with benign phase, and benign
/// amplitude with adversarial phase.
#[derive(Debug, Clone)]
pub struct EvalSplits {
    pub d_ae: Dataset,
    pub d_amp: Dataset,
    pub d_pha: Dataset,
}

/// Attack every test image against `net`, then recombine spectra to isolate
/// where the perturbation lives.
pub fn build_eval_splits(
    test: &Dataset,
    net: &SmallConvNet,
    attack: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EvalSplits> {
    if test.is_empty() {
        return Err(Error::contract("cannot build splits from an empty dataset"));
    }
    let (c, h, w) = test.image_dims();
    let per = c * h * w;
    let n = test.len();
    let mut ae = vec![0.0; n * per];
    let mut amp_split = vec![0.0; n * per];
    let mut pha_split = vec![0.0; n * per];
    for idx in test.sequential_batches(EVAL_BATCH) {
        let (x, y) = test.gather(&idx)?;
        let x_adv = attacks::generate(net, &x, &y, attack, BnBank::A, rng)?;
        for (row, &sample) in idx.iter().enumerate() {
            let img = Tensor::new(vec![c, h, w], x.data()[row * per..(row + 1) * per].to_vec())?;
            let adv =
                Tensor::new(vec![c, h, w], x_adv.data()[row * per..(row + 1) * per].to_vec())?;
            let spec_x = spectral::dft_decompose(&img)?;
            let spec_a = spectral::dft_decompose(&adv)?;
            let x_amp = spectral::idft_recombine(&spec_a.amplitude, &spec_x.phase, true)?;
            let x_pha = spectral::idft_recombine(&spec_x.amplitude, &spec_a.phase, true)?;
            ae[sample * per..(sample + 1) * per].copy_from_slice(adv.data());
            amp_split[sample * per..(sample + 1) * per].copy_from_slice(x_amp.data());
            pha_split[sample * per..(sample + 1) * per].copy_from_slice(x_pha.data());
        }
    }
    Ok(EvalSplits {
        d_ae: test.with_images(Tensor::new(vec![n, c, h, w], ae)?)?,
        d_amp: test.with_images(Tensor::new(vec![n, c, h, w], amp_split)?)?,
        d_pha: test.with_images(Tensor::new(vec![n, c, h, w], pha_split)?)?,
    })
}

// ---------------------------------------------------------------------------
// synthetic dataset
// ---------------------------------------------------------------------------

/// Synthetic image family whose label-defining signal lives in the phase
/// spectrum: each class owns a fixed random phase template over the
/// low-frequency bins (where the smooth amplitudes put their energy), while
/// high-frequency phases are per-sample style. Amplitude styles are random
/// per sample around a weak class-conditioned energy tilt — a secondary,
/// noisier cue, mirroring how natural-image amplitudes correlate with the
/// label without defining it. The label stays a deterministic function of
/// the phase template.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation (radians) of the per-sample phase jitter applied to
    /// the template bins.
    pub noise_level: f64,
    /// Log-scale spread of the per-sample amplitude styles.
    pub style_spread: f64,
    /// Target pixel standard deviation before clamping.
    pub pixel_std: f64,
    /// Template bins are those with radial frequency below this fraction of
    /// Nyquist; phases above it are drawn fresh per sample.
    pub template_radius: f64,
    /// Log-scale strength of the class-conditioned amplitude tilt (0 disables
    /// the secondary cue).
    pub amp_class_tilt: f64,
}

impl SyntheticSpec {
    pub fn desk_default() -> Self {
        SyntheticSpec {
            classes: 4,
            channels: 1,
            height: 16,
            width: 16,
            noise_level: 0.25,
            style_spread: 0.4,
            pixel_std: 0.16,
            template_radius: 0.45,
            amp_class_tilt: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config(format!(
                "synthetic spec needs at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.height < 2 || self.width < 2 {
            return Err(Error::config("synthetic images must be at least 2x2"));
        }
        if self.noise_level < 0.0
            || self.style_spread < 0.0
            || self.pixel_std <= 0.0
            || self.amp_class_tilt < 0.0
        {
            return Err(Error::config("synthetic spec parameters out of range"));
        }
        if !(0.0..=1.0).contains(&self.template_radius) {
            return Err(Error::config(format!(
                "template_radius must lie in (0,1], got {}",
                self.template_radius
            )));
        }
        Ok(())
    }

    /// Normalized radial frequency of a bin, 1.0 at Nyquist.
    fn radial(&self, u: usize, v: usize) -> f64 {
        let fu = u.min(self.height - u) as f64 / (self.height as f64 / 2.0);
        let fv = v.min(self.width - v) as f64 / (self.width as f64 / 2.0);
        (fu * fu + fv * fv).sqrt() / std::f64::consts::SQRT_2
    }

    fn in_template(&self, u: usize, v: usize) -> bool {
        self.radial(u, v) <= self.template_radius
    }
}

fn mirror_index(u: usize, v: usize, h: usize, w: usize) -> (usize, usize) {
    ((h - u) % h, (w - v) % w)
}

/// Antisymmetrize a field so it is a valid phase of a real image:
/// `f(u,v) = -f((H-u)%H,(W-v)%W)`, zero on self-paired bins.
fn antisymmetrize(field: &mut [f64], h: usize, w: usize) {
    for u in 0..h {
        for v in 0..w {
            let (mu, mv) = mirror_index(u, v, h, w);
            if (mu, mv) == (u, v) {
                field[u * w + v] = 0.0;
            } else if (u, v) < (mu, mv) {
                let d = 0.5 * (field[u * w + v] - field[mu * w + mv]);
                field[u * w + v] = d;
                field[mu * w + mv] = -d;
            }
        }
    }
}

/// Symmetrize a field so it is a valid amplitude modulation of a real image.
fn symmetrize(field: &mut [f64], h: usize, w: usize) {
    for u in 0..h {
        for v in 0..w {
            let (mu, mv) = mirror_index(u, v, h, w);
            if (u, v) < (mu, mv) {
                let m = 0.5 * (field[u * w + v] + field[mu * w + mv]);
                field[u * w + v] = m;
                field[mu * w + mv] = m;
            }
        }
    }
}

/// Smooth radial falloff favouring low frequencies.
fn radial_base(h: usize, w: usize) -> Vec<f64> {
    let mut base = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let fu = u.min(h - u) as f64 / h as f64;
            let fv = v.min(w - v) as f64 / w as f64;
            let r = (fu * fu + fv * fv).sqrt();
            base[u * w + v] = 1.0 / (r + 0.08).powf(1.4);
        }
    }
    base[0] = 0.0; // DC handled separately
    base
}

/// The fixed per-class phase templates for a spec and seed, `[C,H,W]` each;
/// zero outside the template radius. Regenerated deterministically so oracles
/// can classify by nearest template.
pub fn synthetic_phase_templates(spec: &SyntheticSpec, seed: u64) -> Result<Vec<Tensor>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let mut out = Vec::with_capacity(spec.classes);
    for _ in 0..spec.classes {
        let mut t = vec![0.0; c * h * w];
        for ch in 0..c {
            let field = &mut t[ch * h * w..(ch + 1) * h * w];
            for v in field.iter_mut() {
                *v = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            }
            antisymmetrize(field, h, w);
            for u in 0..h {
                for v in 0..w {
                    if !spec.in_template(u, v) {
                        field[u * w + v] = 0.0;
                    }
                }
            }
        }
        out.push(Tensor::new(vec![c, h, w], t)?);
    }
    Ok(out)
}

/// Train/test pair drawn from one sample stream: both halves share the same
/// class templates, and the test samples are the tail of each class block.
pub fn make_synthetic_split(
    spec: &SyntheticSpec,
    n_train_per_class: usize,
    n_test_per_class: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let total = n_train_per_class + n_test_per_class;
    let all = make_synthetic_dataset(spec, total, seed)?;
    let (c, h, w) = all.image_dims();
    let per = c * h * w;
    let split = |take_start: usize, take_len: usize| -> Result<Dataset> {
        let mut images = Vec::with_capacity(spec.classes * take_len * per);
        let mut labels = Vec::with_capacity(spec.classes * take_len);
        for class in 0..spec.classes {
            for j in 0..take_len {
                let i = class * total + take_start + j;
                images.extend_from_slice(&all.images().data()[i * per..(i + 1) * per]);
                labels.push(all.labels()[i]);
            }
        }
        Dataset::new(
            Tensor::new(vec![spec.classes * take_len, c, h, w], images)?,
            labels,
            spec.classes,
        )
    };
    let train = split(0, n_train_per_class)?;
    let test = split(n_train_per_class, n_test_per_class)?;
    Ok((train, test))
}

/// The fixed class-conditioned amplitude tilts (log scale, symmetric, zero at
/// DC), `[C,H,W]` per class.
pub fn synthetic_class_tilts(spec: &SyntheticSpec, seed: u64) -> Result<Vec<Tensor>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0717_f00d);
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let mut out = Vec::with_capacity(spec.classes);
    for _ in 0..spec.classes {
        let mut t = vec![0.0; c * h * w];
        for ch in 0..c {
            let field = &mut t[ch * h * w..(ch + 1) * h * w];
            for v in field.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = spec.amp_class_tilt * z;
            }
            symmetrize(field, h, w);
            field[0] = 0.0;
        }
        out.push(Tensor::new(vec![c, h, w], t)?);
    }
    Ok(out)
}

/// Deterministic labeled dataset: per sample, a class phase template plus
/// small antisymmetric jitter is paired with a random smooth symmetric
/// amplitude style (tilted by the class energy profile above the template
/// radius), inverse-transformed, and clamped to `[0,1]`.
pub fn make_synthetic_dataset(
    spec: &SyntheticSpec,
    n_per_class: usize,
    seed: u64,
) -> Result<Dataset> {
    spec.validate()?;
    if n_per_class == 0 {
        return Err(Error::contract("n_per_class must be at least 1"));
    }
    let templates = synthetic_phase_templates(spec, seed)?;
    let tilts = synthetic_class_tilts(spec, seed)?;
    // separate stream so templates do not depend on the sample count
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5a17);
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let per = c * h * w;
    let hw = (h * w) as f64;
    let base = radial_base(h, w);
    let n = spec.classes * n_per_class;
    let mut images = vec![0.0; n * per];
    let mut labels = Vec::with_capacity(n);

    for class in 0..spec.classes {
        for _ in 0..n_per_class {
            let sample = labels.len();
            for ch in 0..c {
                // symmetric log-normal style over the radial base, tilted by
                // the class energy profile
                let mut style = vec![0.0; h * w];
                for v in style.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = spec.style_spread * z;
                }
                symmetrize(&mut style, h, w);
                let tilt = &tilts[class].data()[ch * h * w..(ch + 1) * h * w];
                let mut amp = vec![0.0; h * w];
                for k in 0..h * w {
                    amp[k] = base[k] * (style[k] + tilt[k]).exp();
                }
                // scale fluctuation energy to the requested pixel std
                let energy: f64 = amp.iter().map(|a| a * a).sum();
                let target = spec.pixel_std * hw;
                let factor = if energy > 0.0 {
                    target / energy.sqrt()
                } else {
                    0.0
                };
                for a in amp.iter_mut() {
                    *a *= factor;
                }
                amp[0] = 0.5 * hw; // mean pixel value 0.5

                // template bins: class phase plus small antisymmetric jitter;
                // everything above the template radius is fresh style phase
                let mut noise = vec![0.0; h * w];
                for v in noise.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = spec.noise_level * z;
                }
                antisymmetrize(&mut noise, h, w);
                let mut style_phase = vec![0.0; h * w];
                for v in style_phase.iter_mut() {
                    *v = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                }
                antisymmetrize(&mut style_phase, h, w);
                let template = &templates[class].data()[ch * h * w..(ch + 1) * h * w];
                let mut phase = vec![0.0; h * w];
                for u in 0..h {
                    for v in 0..w {
                        let k = u * w + v;
                        phase[k] = if spec.in_template(u, v) {
                            spectral::wrap_angle(template[k] + noise[k])
                        } else {
                            style_phase[k]
                        };
                    }
                }

                let img = spectral::idft_recombine(
                    &Tensor::new(vec![1, h, w], amp)?,
                    &Tensor::new(vec![1, h, w], phase)?,
                    true,
                )?;
                images[sample * per + ch * h * w..sample * per + (ch + 1) * h * w]
                    .copy_from_slice(img.data());
            }
            labels.push(class);
        }
    }
    Dataset::new(
        Tensor::new(vec![n, c, h, w], images)?,
        labels,
        spec.classes,
    )
}

/// Classify by the phase template closest to the image's own phase, weighting
/// each frequency by the image amplitude. The reference classifier used to
/// confirm the class signal is recoverable from phase alone.
pub fn nearest_template_accuracy(
    data: &Dataset,
    templates: &[Tensor],
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::contract("cannot score an empty dataset"));
    }
    let (c, h, w) = data.image_dims();
    let per = c * h * w;
    let mut correct = 0usize;
    for i in 0..data.len() {
        let img = Tensor::new(
            vec![c, h, w],
            data.images().data()[i * per..(i + 1) * per].to_vec(),
        )?;
        let spec = spectral::dft_decompose(&img)?;
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (class, template) in templates.iter().enumerate() {
            let mut score = 0.0;
            for k in 0..per {
                if k % (h * w) == 0 {
                    continue; // skip DC
                }
                score += spec.amplitude.data()[k]
                    * (spec.phase.data()[k] - template.data()[k]).cos();
            }
            if score > best.0 {
                best = (score, class);
            }
        }
        if best.1 == data.labels()[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

// ---------------------------------------------------------------------------
// amplitude/phase split experiment
// ---------------------------------------------------------------------------

/// Accuracy columns for one trained model.
#[derive(Debug, Clone)]
pub struct SplitAccuracies {
    pub model: String,
    pub natural: f64,
    pub d_ae: f64,
    pub d_amp: f64,
    pub d_pha: f64,
}

/// Budgets for the three-model comparison.
#[derive(Debug, Clone)]
pub struct MotivationConfig {
    pub train: TrainConfig,
    /// Attack used to build the evaluation splits (plain PGD by default).
    pub split_attack: AttackConfig,
}

impl MotivationConfig {
    pub fn desk_default(seed: u64) -> Self {
        let mut train = TrainConfig::desk_default();
        train.seed = seed;
        train.epochs = 8;
        train.lr_schedule = vec![(0, 0.05), (6, 0.01)];
        train.attack = AttackConfig {
            epsilon: 0.06,
            alpha: 0.015,
            steps: 5,
            beta: 0.0,
            loss_kind: AttackLossKind::CeOnly,
            init: crate::attacks::AttackInit::Gaussian1e3,
        };
        train.eval_steps = 10;
        MotivationConfig {
            split_attack: AttackConfig::eval_pgd(train.attack.epsilon, train.attack.alpha, 10),
            train,
        }
    }
}

/// Train three classifiers — plain, adversarially trained, and adversarially
/// trained on amplitude-mixed data — and score each on its own white-box
/// evaluation splits.
pub fn motivation_experiment(
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &MotivationConfig,
) -> Result<Vec<SplitAccuracies>> {
    let (c, h, w) = train_set.image_dims();
    let mut rows = Vec::new();

    let mut standard = SmallConvNet::init(c, h, w, train_set.classes(), cfg.train.seed)?;
    trainer::train_standard(train_set, test_set, &mut standard, &cfg.train)?;
    rows.push(score_model("standard", &standard, test_set, cfg)?);

    let mut robust = SmallConvNet::init(c, h, w, train_set.classes(), cfg.train.seed)?;
    trainer::train_pgd_at(train_set, test_set, &mut robust, &cfg.train)?;
    rows.push(score_model("robust", &robust, test_set, cfg)?);

    let mut perturbed = SmallConvNet::init(c, h, w, train_set.classes(), cfg.train.seed)?;
    train_perturbed(train_set, test_set, &mut perturbed, &cfg.train)?;
    rows.push(score_model("perturbed", &perturbed, test_set, cfg)?);

    Ok(rows)
}

fn score_model(
    name: &str,
    net: &SmallConvNet,
    test: &Dataset,
    cfg: &MotivationConfig,
) -> Result<SplitAccuracies> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x0e7a);
    let splits = build_eval_splits(test, net, &cfg.split_attack, &mut rng)?;
    let mut erng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x0acc);
    Ok(SplitAccuracies {
        model: name.to_string(),
        natural: evaluate_accuracy(net, test, None, BnBank::A, &mut erng)?,
        d_ae: evaluate_accuracy(net, &splits.d_ae, None, BnBank::A, &mut erng)?,
        d_amp: evaluate_accuracy(net, &splits.d_amp, None, BnBank::A, &mut erng)?,
        d_pha: evaluate_accuracy(net, &splits.d_pha, None, BnBank::A, &mut erng)?,
    })
}

/// PGD-AT over per-batch amplitude-mixed training data: every sample's
/// amplitude is mixed (λ ~ U(0,1)) with that of a distractor drawn i.i.d.
/// from the training set, re-drawn each batch.
fn train_perturbed(
    train: &Dataset,
    test: &Dataset,
    net: &mut SmallConvNet,
    cfg: &TrainConfig,
) -> Result<()> {
    cfg.validate()?;
    let attack = AttackConfig {
        loss_kind: AttackLossKind::CeOnly,
        beta: 0.0,
        ..cfg.attack
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (c, h, w) = train.image_dims();
    let per = c * h * w;
    for epoch in 0..cfg.epochs {
        let lr = trainer::lr_at(&cfg.lr_schedule, epoch)?;
        for idx in train.epoch_batches(cfg.batch_size, &mut rng) {
            let (x, y) = train.gather(&idx)?;
            // amplitude-level mixing with a random distractor per sample
            let mut mixed = vec![0.0; x.len()];
            for row in 0..idx.len() {
                let distractor = rng.random_range(0..train.len());
                let lambda: f64 = rng.random_range(0.0..1.0);
                let img =
                    Tensor::new(vec![c, h, w], x.data()[row * per..(row + 1) * per].to_vec())?;
                let (other, _) = train.gather(&[distractor])?;
                let other = Tensor::new(vec![c, h, w], other.data().to_vec())?;
                let spec = spectral::dft_decompose(&img)?;
                let spec_o = spectral::dft_decompose(&other)?;
                let amp = spectral::mix_amplitudes(&spec.amplitude, &spec_o.amplitude, lambda)?;
                let rec = spectral::idft_recombine(&amp, &spec.phase, true)?;
                mixed[row * per..(row + 1) * per].copy_from_slice(rec.data());
            }
            let x_mixed = Tensor::new(x.shape().to_vec(), mixed)?;
            let x_adv = attacks::pgd(net, &x_mixed, &y, &attack, BnBank::A, &mut rng)?;

            let mut tape = Tape::new();
            let adv_id = tape.constant(x_adv);
            let (logits, pending) =
                net.forward_tape(&mut tape, adv_id, "model/", crate::tensor::Mode::Train, BnBank::A)?;
            let loss = losses::cross_entropy(&mut tape, logits, &y)?;
            if !tape.value(loss).item()?.is_finite() {
                return Err(Error::numerical(format!(
                    "perturbed-model loss non-finite at epoch {epoch}"
                )));
            }
            tape.backward(loss)?;
            let record = tape.gradient_record(None);
            let mut model_grads = crate::tensor::GradientRecord::default();
            for (name, grad) in record.grads {
                if let Some(rest) = name.strip_prefix("model/") {
                    model_grads.grads.insert(rest.to_string(), grad);
                }
            }
            crate::tensor::sgd_momentum_step(
                &mut net.params,
                &model_grads,
                lr,
                cfg.momentum,
                cfg.weight_decay,
                crate::tensor::StepDirection::Descent,
            )?;
            crate::tensor::commit_bn_updates(&mut net.params, &pending)?;
        }
        let _ = test;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// weight regularization of noisy feature blocks
// ---------------------------------------------------------------------------

/// A linear-softmax task over features split into a lightly and a heavily
/// augmented block, mirroring how recombination perturbs amplitude-derived
/// features far more than phase-derived ones.
#[derive(Debug, Clone)]
pub struct Theorem1Task {
    pub phase_dim: usize,
    pub amp_dim: usize,
    /// Augmentation noise on the phase-like block.
    pub sigma_phase: f64,
    /// Augmentation noise on the amplitude-like block.
    pub sigma_amp: f64,
    pub classes: usize,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl Theorem1Task {
    pub fn new(variance_ratio: f64, seed: u64) -> Self {
        let sigma_phase = 0.3;
        Theorem1Task {
            phase_dim: 10,
            amp_dim: 10,
            sigma_phase,
            sigma_amp: sigma_phase * variance_ratio.sqrt(),
            classes: 4,
            samples_per_class: 10,
            seed,
        }
    }

    pub fn variance_ratio(&self) -> f64 {
        (self.sigma_amp / self.sigma_phase).powi(2)
    }

    fn validate(&self) -> Result<()> {
        if self.phase_dim == 0 || self.amp_dim == 0 {
            return Err(Error::config("both feature blocks must be non-empty"));
        }
        if self.classes < 2 || self.samples_per_class == 0 {
            return Err(Error::config("need at least 2 classes and 1 sample per class"));
        }
        if self.sigma_phase < 0.0 || self.sigma_amp < 0.0 {
            return Err(Error::config("noise levels must be non-negative"));
        }
        Ok(())
    }

    /// Base features: one standard-normal class mean per class, repeated with
    /// small within-class jitter. Both blocks carry equal class signal.
    fn base_features(&self) -> (Vec<f64>, Vec<usize>) {
        let m = self.phase_dim + self.amp_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let means: Vec<f64> = (0..self.classes * m)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let n = self.classes * self.samples_per_class;
        let mut features = vec![0.0; n * m];
        let mut labels = Vec::with_capacity(n);
        for class in 0..self.classes {
            for _ in 0..self.samples_per_class {
                let i = labels.len();
                for k in 0..m {
                    let jitter: f64 = StandardNormal.sample(&mut rng);
                    features[i * m + k] = means[class * m + k] + 0.1 * jitter;
                }
                labels.push(class);
            }
        }
        (features, labels)
    }
}

/// Train a linear softmax classifier by full-batch gradient descent over
/// augmented features (fresh block noise every step) and report
/// `‖W_amp‖ / ‖W_phase‖` over the block rows.
pub fn theorem1_experiment(task: &Theorem1Task, steps: usize, lr: f64) -> Result<f64> {
    task.validate()?;
    if lr <= 0.0 {
        return Err(Error::contract(format!("lr must be positive, got {lr}")));
    }
    let m = task.phase_dim + task.amp_dim;
    let (features, labels) = task.base_features();
    let n = labels.len();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(task.seed ^ 0xa06);
    let mut weight = Tensor::zeros(vec![task.classes, m]);
    let bias = Tensor::zeros(vec![task.classes]);

    for step in 0..steps {
        // fresh augmentation noise per sample per step
        let mut aug = features.clone();
        for i in 0..n {
            for k in 0..m {
                let sigma = if k < task.phase_dim {
                    task.sigma_phase
                } else {
                    task.sigma_amp
                };
                let z: f64 = StandardNormal.sample(&mut noise_rng);
                aug[i * m + k] += sigma * z;
            }
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![n, m], aug)?);
        let w = tape.param("w", &weight);
        let b = tape.constant(bias.clone());
        let logits = tape.linear(x, w, b)?;
        let loss = losses::cross_entropy(&mut tape, logits, &labels)?;
        let loss_val = tape.value(loss).item()?;
        if !loss_val.is_finite() {
            return Err(Error::numerical(format!(
                "loss diverged at step {step}; reduce the learning rate (lr = {lr})"
            )));
        }
        tape.backward(loss)?;
        let grad = tape
            .grad(w)
            .ok_or_else(|| Error::numerical("no weight gradient"))?
            .to_vec();
        for (p, g) in weight.data_mut().iter_mut().zip(&grad) {
            *p -= lr * g;
        }
    }

    let mut phase_sq = 0.0;
    let mut amp_sq = 0.0;
    for class in 0..task.classes {
        for k in 0..m {
            let v = weight.data()[class * m + k];
            if k < task.phase_dim {
                phase_sq += v * v;
            } else {
                amp_sq += v * v;
            }
        }
    }
    if phase_sq == 0.0 {
        return Err(Error::numerical("phase-block weights collapsed to zero"));
    }
    Ok((amp_sq / phase_sq).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_dataset_is_deterministic_and_valid() {
        let spec = SyntheticSpec {
            classes: 3,
            channels: 1,
            height: 8,
            width: 8,
            noise_level: 0.2,
            style_spread: 0.4,
            pixel_std: 0.15,
            template_radius: 0.45,
            amp_class_tilt: 0.0,
        };
        let a = make_synthetic_dataset(&spec, 5, 7).unwrap();
        let b = make_synthetic_dataset(&spec, 5, 7).unwrap();
        assert_eq!(a.images().data(), b.images().data());
        assert_eq!(a.len(), 15);
        assert!(a.images().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // labels grouped per class
        assert_eq!(&a.labels()[0..5], &[0, 0, 0, 0, 0]);
    }

    #[test]
    fn zero_noise_gives_identical_within_class_phases() {
        let spec = SyntheticSpec {
            classes: 2,
            channels: 1,
            height: 8,
            width: 8,
            noise_level: 0.0,
            style_spread: 0.4,
            pixel_std: 0.15,
            template_radius: 0.45,
            amp_class_tilt: 0.0,
        };
        let ds = make_synthetic_dataset(&spec, 2, 3).unwrap();
        let per = 64;
        let img = |i: usize| {
            Tensor::new(
                vec![1, 8, 8],
                ds.images().data()[i * per..(i + 1) * per].to_vec(),
            )
            .unwrap()
        };
        let s0 = spectral::dft_decompose(&img(0)).unwrap();
        let s1 = spectral::dft_decompose(&img(1)).unwrap();
        // same class: template-bin phases agree wherever both carry energy
        // (high-frequency bins are per-sample style by design, and clamping
        // perturbs even the template bins slightly)
        let mut checked = 0;
        for u in 0..8 {
            for v in 0..8 {
                let k = u * 8 + v;
                if spec.in_template(u, v)
                    && s0.amplitude.data()[k] > 1e-2
                    && s1.amplitude.data()[k] > 1e-2
                {
                    let d = spectral::wrap_angle(s0.phase.data()[k] - s1.phase.data()[k]).abs();
                    assert!(d < 0.35, "phase deviation {d} at bin ({u},{v})");
                    checked += 1;
                }
            }
        }
        assert!(checked > 10, "only {checked} template bins compared");
        // amplitudes differ (different styles)
        assert!(s0.amplitude.max_abs_diff(&s1.amplitude) > 1e-3);
    }

    #[test]
    fn nearest_template_oracle_recovers_classes() {
        let spec = SyntheticSpec::desk_default();
        let ds = make_synthetic_dataset(&spec, 50, 0).unwrap();
        let templates = synthetic_phase_templates(&spec, 0).unwrap();
        let acc = nearest_template_accuracy(&ds, &templates).unwrap();
        assert!(acc > 0.95, "oracle accuracy {acc}");
    }

    #[test]
    fn untrained_model_sits_at_chance() {
        let spec = SyntheticSpec::desk_default();
        let ds = make_synthetic_dataset(&spec, 25, 1).unwrap();
        let mut accs = Vec::new();
        for seed in 0..4 {
            let net = SmallConvNet::init(1, 16, 16, 4, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            accs.push(evaluate_accuracy(&net, &ds, None, BnBank::A, &mut rng).unwrap());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.25).abs() < 0.15, "chance-level mean {mean}");
    }

    #[test]
    fn zero_epsilon_splits_collapse_to_benign_set() {
        let spec = SyntheticSpec {
            classes: 2,
            channels: 1,
            height: 8,
            width: 8,
            noise_level: 0.3,
            style_spread: 0.4,
            pixel_std: 0.15,
            template_radius: 0.45,
            amp_class_tilt: 0.0,
        };
        let ds = make_synthetic_dataset(&spec, 4, 2).unwrap();
        let net = SmallConvNet::init(1, 8, 8, 2, 0).unwrap();
        let attack = AttackConfig::eval_pgd(0.0, 0.01, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let splits = build_eval_splits(&ds, &net, &attack, &mut rng).unwrap();
        assert!(splits.d_ae.images().max_abs_diff(ds.images()) < 1e-4);
        assert!(splits.d_amp.images().max_abs_diff(ds.images()) < 1e-4);
        assert!(splits.d_pha.images().max_abs_diff(ds.images()) < 1e-4);
        assert_eq!(splits.d_ae.labels(), ds.labels());
    }

    #[test]
    fn theorem1_symmetric_noise_gives_unit_ratio() {
        let task = Theorem1Task::new(1.0, 0);
        let ratio = theorem1_experiment(&task, 400, 0.1).unwrap();
        assert!((ratio - 1.0).abs() < 0.3, "ratio {ratio}");
    }

    #[test]
    fn theorem1_heavy_amp_noise_shrinks_amp_weights() {
        let r1 = theorem1_experiment(&Theorem1Task::new(1.0, 0), 2000, 0.1).unwrap();
        let r10 = theorem1_experiment(&Theorem1Task::new(10.0, 0), 2000, 0.1).unwrap();
        let r100 = theorem1_experiment(&Theorem1Task::new(100.0, 0), 2000, 0.1).unwrap();
        assert!(r100 < 0.2, "ratio at 100x variance: {r100}");
        assert!(r100 <= r10 && r10 <= r1, "not monotone: {r1} {r10} {r100}");
    }
}
