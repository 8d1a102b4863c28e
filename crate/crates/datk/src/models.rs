//! The split-bank convolutional classifier, the amplitude generator, and the
//! recombined-sample construction that ties them together.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::spectral::{self, HalfAmplitude};
use crate::tensor::{
    apply_layer_in_namespace, BnBank, BnPending, LayerKind, Mode, ParameterSet, Tape, Tensor,
    ValueId,
};

/// Classifier architecture: three 3x3 conv blocks (stride 1, 2, 2), each with
/// dual-bank batch norm and ReLU, then global average pooling and one linear
/// head. Stands in for the full-size residual networks at desk scale.
#[derive(Debug, Clone)]
pub struct SmallConvNet {
    pub params: ParameterSet,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

const CONV_WIDTHS: [usize; 3] = [16, 32, 64];
const CONV_STRIDES: [usize; 3] = [1, 2, 2];

fn he_normal(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

fn add_bn_banks(params: &mut ParameterSet, prefix: &str, c: usize) -> Result<()> {
    for tag in ["a", "b"] {
        params.insert(format!("{prefix}.{tag}.gamma"), Tensor::full(vec![c], 1.0), true)?;
        params.insert(format!("{prefix}.{tag}.beta"), Tensor::zeros(vec![c]), true)?;
        params.insert(
            format!("{prefix}.{tag}.running_mean"),
            Tensor::zeros(vec![c]),
            false,
        )?;
        params.insert(
            format!("{prefix}.{tag}.running_var"),
            Tensor::full(vec![c], 1.0),
            false,
        )?;
    }
    Ok(())
}

impl SmallConvNet {
    pub fn init(in_channels: usize, height: usize, width: usize, classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        let mut cin = in_channels;
        for (i, (&cout, _)) in CONV_WIDTHS.iter().zip(CONV_STRIDES).enumerate() {
            let fan_in = cin * 9;
            params.insert(
                format!("conv{}.weight", i + 1),
                Tensor::new(vec![cout, cin, 3, 3], he_normal(&mut rng, fan_in, cout * cin * 9))?,
                true,
            )?;
            params.insert(format!("conv{}.bias", i + 1), Tensor::zeros(vec![cout]), true)?;
            add_bn_banks(&mut params, &format!("bn{}", i + 1), cout)?;
            cin = cout;
        }
        let feat = CONV_WIDTHS[2];
        params.insert(
            "fc.weight",
            Tensor::new(
                vec![classes, feat],
                he_normal(&mut rng, feat, classes * feat),
            )?,
            true,
        )?;
        params.insert("fc.bias", Tensor::zeros(vec![classes]), true)?;
        Ok(SmallConvNet {
            params,
            in_channels,
            height,
            width,
            classes,
        })
    }

    /// Rebuild a net around parameters loaded from a checkpoint.
    pub fn from_params(
        params: ParameterSet,
        in_channels: usize,
        height: usize,
        width: usize,
        classes: usize,
    ) -> Result<Self> {
        for key in ["conv1.weight", "bn1.a.gamma", "bn1.b.gamma", "fc.weight"] {
            if !params.contains(key) {
                return Err(Error::config(format!("parameter set missing {key:?}")));
            }
        }
        let fc = params.value("fc.weight")?;
        if fc.shape() != [classes, CONV_WIDTHS[2]] {
            return Err(Error::config(format!(
                "fc.weight shape {:?} does not match {classes} classes",
                fc.shape()
            )));
        }
        Ok(SmallConvNet {
            params,
            in_channels,
            height,
            width,
            classes,
        })
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        match *batch.shape() {
            [_, c, h, w] if c == self.in_channels && h == self.height && w == self.width => Ok(()),
            _ => Err(Error::config(format!(
                "batch shape {:?} does not match net input [N,{},{},{}]",
                batch.shape(),
                self.in_channels,
                self.height,
                self.width
            ))),
        }
    }

    /// Record the forward pass on a tape. Tape parameters are registered
    /// under `namespace` so one tape can carry several nets (or branches) at
    /// once. Running statistics are not touched; train-mode batch-norm
    /// updates come back as pendings for the caller to commit.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        input: ValueId,
        namespace: &str,
        mode: Mode,
        bank: BnBank,
    ) -> Result<(ValueId, Vec<BnPending>)> {
        let mut pending = Vec::new();
        let mut x = input;
        for (i, &stride) in CONV_STRIDES.iter().enumerate() {
            let (y, _) = apply_layer_in_namespace(
                tape,
                namespace,
                LayerKind::Conv3x3 { stride },
                x,
                &self.params,
                &format!("conv{}", i + 1),
                mode,
                bank,
            )?;
            let (y, mut p) = apply_layer_in_namespace(
                tape,
                namespace,
                LayerKind::BatchNorm,
                y,
                &self.params,
                &format!("bn{}", i + 1),
                mode,
                bank,
            )?;
            pending.append(&mut p);
            let (y, _) = apply_layer_in_namespace(
                tape,
                namespace,
                LayerKind::Relu,
                y,
                &self.params,
                "",
                mode,
                bank,
            )?;
            x = y;
        }
        let (x, _) = apply_layer_in_namespace(
            tape,
            namespace,
            LayerKind::GlobalAvgPool,
            x,
            &self.params,
            "",
            mode,
            bank,
        )?;
        let (logits, _) = apply_layer_in_namespace(
            tape,
            namespace,
            LayerKind::Linear,
            x,
            &self.params,
            "fc",
            mode,
            bank,
        )?;
        Ok((logits, pending))
    }

    /// One stateful forward: in train mode the selected bank's running
    /// statistics are updated, in eval mode nothing mutates.
    pub fn model_forward(&mut self, batch: &Tensor, mode: Mode, bank: BnBank) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let input = tape.constant(batch.clone());
        let (logits, pending) = self.forward_tape(&mut tape, input, "", mode, bank)?;
        if mode == Mode::Train {
            crate::tensor::commit_bn_updates(&mut self.params, &pending)?;
        }
        Ok(tape.value(logits).clone())
    }

    /// Eval-mode logits with no state changes.
    pub fn logits_eval(&self, batch: &Tensor, bank: BnBank) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let input = tape.constant(batch.clone());
        let (logits, _) = self.forward_tape(&mut tape, input, "", Mode::Eval, bank)?;
        Ok(tape.value(logits).clone())
    }

    /// Copy bank A's affine parameters and running statistics into bank B, so
    /// checkpoints written by single-branch trainers stay loadable everywhere.
    pub fn mirror_bank_a_to_b(&mut self) -> Result<()> {
        for i in 1..=3 {
            for field in ["gamma", "beta", "running_mean", "running_var"] {
                let src = self.params.value(&format!("bn{i}.a.{field}"))?.clone();
                self.params.get_mut(&format!("bn{i}.b.{field}"))?.value = src;
            }
        }
        Ok(())
    }

    pub fn bn_layer_count(&self) -> usize {
        3
    }
}

/// Per-layer cosine similarities between the two batch-norm banks.
#[derive(Debug, Clone)]
pub struct BnSimilarity {
    pub layer: String,
    pub gamma: f64,
    pub beta: f64,
    pub mean: f64,
    pub var: f64,
    /// Set when any compared vector had zero norm.
    pub degenerate: bool,
}

fn cosine(a: &[f64], b: &[f64]) -> (f64, bool) {
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        return (1.0, true);
    }
    if na == 0.0 || nb == 0.0 {
        return (0.0, true);
    }
    if a == b {
        return (1.0, false);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb), false)
}

/// Compare the two statistic banks of every batch-norm layer.
pub fn bn_parameter_similarity(net: &SmallConvNet) -> Result<Vec<BnSimilarity>> {
    let mut out = Vec::new();
    for i in 1..=net.bn_layer_count() {
        let get = |tag: &str, field: &str| -> Result<Vec<f64>> {
            Ok(net
                .params
                .value(&format!("bn{i}.{tag}.{field}"))?
                .data()
                .to_vec())
        };
        let (gamma, d1) = cosine(&get("a", "gamma")?, &get("b", "gamma")?);
        let (beta, d2) = cosine(&get("a", "beta")?, &get("b", "beta")?);
        let (mean, d3) = cosine(&get("a", "running_mean")?, &get("b", "running_mean")?);
        let (var, d4) = cosine(&get("a", "running_var")?, &get("b", "running_var")?);
        out.push(BnSimilarity {
            layer: format!("bn{i}"),
            gamma,
            beta,
            mean,
            var,
            degenerate: d1 || d2 || d3 || d4,
        });
    }
    Ok(out)
}

/// How the generator input is assembled from the noise vector and the sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AagInputMode {
    /// Noise vector only.
    NoiseOnly,
    /// Noise plus the one-hot training label.
    NoiseOneHot,
    /// Noise plus the classifier's pre-softmax logits (computed in eval mode
    /// on bank A and detached).
    #[default]
    NoiseLogits,
}

impl AagInputMode {
    pub fn conditioning_width(self, classes: usize) -> usize {
        match self {
            AagInputMode::NoiseOnly => 0,
            AagInputMode::NoiseOneHot | AagInputMode::NoiseLogits => classes,
        }
    }
}

/// The adversarial amplitude generator: four linear layers with ReLU between
/// them and a sigmoid squashing the output into `(0,1)`. The output width is
/// the element count of one half-amplitude.
#[derive(Debug, Clone)]
pub struct AagNet {
    pub params: ParameterSet,
    pub input_mode: AagInputMode,
    pub noise_dim: usize,
    pub classes: usize,
    pub out_channels: usize,
    pub out_height: usize,
    pub out_width: usize,
}

const AAG_HIDDEN: [usize; 3] = [256, 512, 1024];

impl AagNet {
    pub fn init(
        input_mode: AagInputMode,
        noise_dim: usize,
        classes: usize,
        channels: usize,
        height: usize,
        width: usize,
        seed: u64,
    ) -> Result<Self> {
        if noise_dim == 0 {
            return Err(Error::config("noise dimension must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        let in_width = noise_dim + input_mode.conditioning_width(classes);
        let out_width = HalfAmplitude::element_count(channels, height, width);
        let dims = [
            in_width,
            AAG_HIDDEN[0],
            AAG_HIDDEN[1],
            AAG_HIDDEN[2],
            out_width,
        ];
        for i in 0..4 {
            let (fin, fout) = (dims[i], dims[i + 1]);
            params.insert(
                format!("fc{}.weight", i + 1),
                Tensor::new(vec![fout, fin], he_normal(&mut rng, fin, fout * fin))?,
                true,
            )?;
            params.insert(format!("fc{}.bias", i + 1), Tensor::zeros(vec![fout]), true)?;
        }
        Ok(AagNet {
            params,
            input_mode,
            noise_dim,
            classes,
            out_channels: channels,
            out_height: height,
            out_width: width,
        })
    }

    pub fn from_params(
        params: ParameterSet,
        input_mode: AagInputMode,
        noise_dim: usize,
        classes: usize,
        channels: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let out_width = HalfAmplitude::element_count(channels, height, width);
        let w4 = params.value("fc4.weight")?;
        if w4.shape()[0] != out_width {
            return Err(Error::config(format!(
                "fc4.weight produces {} outputs, half amplitude needs {out_width}",
                w4.shape()[0]
            )));
        }
        Ok(AagNet {
            params,
            input_mode,
            noise_dim,
            classes,
            out_channels: channels,
            out_height: height,
            out_width: width,
        })
    }

    pub fn half_elements(&self) -> usize {
        HalfAmplitude::element_count(self.out_channels, self.out_height, self.out_width)
    }

    fn check_inputs(&self, z: &Tensor, conditioning: &Tensor) -> Result<usize> {
        let [n, tau] = *z.shape() else {
            return Err(Error::config(format!("z must be [N,tau], got {:?}", z.shape())));
        };
        if tau != self.noise_dim {
            return Err(Error::config(format!(
                "z width {tau} does not match noise dimension {}",
                self.noise_dim
            )));
        }
        let want = self.input_mode.conditioning_width(self.classes);
        let [cn, cw] = *conditioning.shape() else {
            return Err(Error::config(format!(
                "conditioning must be [N,width], got {:?}",
                conditioning.shape()
            )));
        };
        if cn != n || cw != want {
            return Err(Error::config(format!(
                "conditioning shape {:?} does not match [N={n}, width={want}]",
                conditioning.shape()
            )));
        }
        Ok(n)
    }

    fn concat_input(&self, z: &Tensor, conditioning: &Tensor) -> Result<Tensor> {
        let n = self.check_inputs(z, conditioning)?;
        let tau = self.noise_dim;
        let cw = conditioning.shape()[1];
        let mut data = Vec::with_capacity(n * (tau + cw));
        for i in 0..n {
            data.extend_from_slice(&z.data()[i * tau..(i + 1) * tau]);
            data.extend_from_slice(&conditioning.data()[i * cw..(i + 1) * cw]);
        }
        Tensor::new(vec![n, tau + cw], data)
    }

    /// Record the generator on a tape: input is a constant (no gradient flows
    /// into the noise or conditioning), parameters are registered under
    /// `prefix`, output is the batch of flattened half-amplitudes in `(0,1)`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        z: &Tensor,
        conditioning: &Tensor,
        prefix: &str,
    ) -> Result<ValueId> {
        let input = self.concat_input(z, conditioning)?;
        let mut x = tape.constant(input);
        for i in 1..=4 {
            let w = tape.param(
                &format!("{prefix}fc{i}.weight"),
                self.params.value(&format!("fc{i}.weight"))?,
            );
            let b = tape.param(
                &format!("{prefix}fc{i}.bias"),
                self.params.value(&format!("fc{i}.bias"))?,
            );
            x = tape.linear(x, w, b)?;
            if i < 4 {
                x = tape.relu(x);
            }
        }
        Ok(tape.sigmoid(x))
    }

    /// Plain forward returning one `HalfAmplitude` per sample.
    pub fn aag_forward(&self, z: &Tensor, conditioning: &Tensor) -> Result<Vec<HalfAmplitude>> {
        let mut tape = Tape::new();
        let out = self.forward_tape(&mut tape, z, conditioning, "")?;
        let flat = tape.value(out);
        let n = flat.shape()[0];
        let per = self.half_elements();
        let (c, h) = (self.out_channels, self.out_height);
        let wh = self.out_width / 2 + 1;
        (0..n)
            .map(|i| {
                HalfAmplitude::new(Tensor::new(
                    vec![c, h, wh],
                    flat.data()[i * per..(i + 1) * per].to_vec(),
                )?)
            })
            .collect()
    }
}

/// Build the conditioning tensor for a batch according to the input mode.
pub fn aag_conditioning(
    mode: AagInputMode,
    net: &SmallConvNet,
    batch: &Tensor,
    labels: &[usize],
) -> Result<Tensor> {
    let n = batch.shape()[0];
    match mode {
        AagInputMode::NoiseOnly => Tensor::new(vec![n, 0], Vec::new()),
        AagInputMode::NoiseOneHot => {
            let mut data = vec![0.0; n * net.classes];
            for (i, &y) in labels.iter().enumerate() {
                if y >= net.classes {
                    return Err(Error::contract(format!(
                        "label {y} out of range for {} classes",
                        net.classes
                    )));
                }
                data[i * net.classes + y] = 1.0;
            }
            Tensor::new(vec![n, net.classes], data)
        }
        AagInputMode::NoiseLogits => net.logits_eval(batch, BnBank::A),
    }
}

/// Running per-frequency mean of natural half-amplitudes. Generated
/// amplitudes in `(0,1)` are rescaled by `2·mean` so their expected magnitude
/// matches the data they are mixed into.
#[derive(Debug, Clone)]
pub struct AmplitudeScale {
    mean: Option<Tensor>,
    pub momentum: f64,
}

impl Default for AmplitudeScale {
    fn default() -> Self {
        AmplitudeScale {
            mean: None,
            momentum: 0.01,
        }
    }
}

impl AmplitudeScale {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_initialized(&self) -> bool {
        self.mean.is_some()
    }

    /// Blend in the mean half-amplitude of one batch (the first update adopts
    /// it outright). Entries are floored at 1e-12 to stay strictly positive.
    pub fn update_from_batch(&mut self, halves: &[HalfAmplitude]) -> Result<()> {
        let first = halves
            .first()
            .ok_or_else(|| Error::contract("amplitude scale update needs at least one sample"))?;
        let shape = first.tensor().shape().to_vec();
        let len = first.tensor().len();
        let mut batch_mean = vec![0.0; len];
        for h in halves {
            if h.tensor().shape() != shape.as_slice() {
                return Err(Error::contract("inconsistent half-amplitude shapes in batch"));
            }
            for (acc, v) in batch_mean.iter_mut().zip(h.tensor().data()) {
                *acc += v;
            }
        }
        let inv = 1.0 / halves.len() as f64;
        for v in batch_mean.iter_mut() {
            *v = (*v * inv).max(1e-12);
        }
        match &mut self.mean {
            None => self.mean = Some(Tensor::new(shape, batch_mean)?),
            Some(mean) => {
                let m = self.momentum;
                for (r, b) in mean.data_mut().iter_mut().zip(&batch_mean) {
                    *r = ((1.0 - m) * *r + m * b).max(1e-12);
                }
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> Result<&Tensor> {
        self.mean
            .as_ref()
            .ok_or_else(|| Error::config("amplitude scale not initialized from any batch"))
    }

    /// The per-frequency factor applied to raw generator outputs.
    pub fn row_factors(&self) -> Result<Vec<f64>> {
        Ok(self.mean()?.data().iter().map(|v| 2.0 * v).collect())
    }
}

/// `raw · 2·mean`, elementwise; raw 0.5 lands exactly on the running mean.
pub fn scale_generated_amplitude(
    raw: &HalfAmplitude,
    scale: &AmplitudeScale,
) -> Result<HalfAmplitude> {
    let factors = scale.row_factors()?;
    let t = raw.tensor();
    if t.len() != factors.len() {
        return Err(Error::config(format!(
            "half amplitude has {} entries, scale has {}",
            t.len(),
            factors.len()
        )));
    }
    let data: Vec<f64> = t.data().iter().zip(&factors).map(|(r, f)| r * f).collect();
    HalfAmplitude::new(Tensor::new(t.shape().to_vec(), data)?)
}

/// Everything needed to rebuild (or differentiate through) one recombined
/// batch: the tape node of `x̂` plus the draws that produced it.
pub struct RecombinedBatch {
    /// Recombined images clamped into the valid `[0,1]` pixel range.
    pub xhat: ValueId,
    /// Recombined images before clamping; the recombination itself preserves
    /// the donor phase exactly, clamping afterwards does not.
    pub xhat_raw: ValueId,
    pub lambdas: Vec<f64>,
    pub raw_half: ValueId,
}

/// Record the full recombination chain on a tape:
/// generator → sigmoid → 2·mean scaling → half expansion → per-sample mix
/// with the natural amplitude → inverse transform with the natural phase →
/// clamp to `[0,1]`. Gradients flow back to the generator parameters only.
#[allow(clippy::too_many_arguments)]
pub fn build_recombined_tape(
    tape: &mut Tape,
    gen: &AagNet,
    gen_prefix: &str,
    z: &Tensor,
    conditioning: &Tensor,
    lambdas: &[f64],
    nat_amplitude: &Tensor,
    nat_phase: &Tensor,
    scale: &AmplitudeScale,
) -> Result<RecombinedBatch> {
    let [n, c, h, w] = *nat_amplitude.shape() else {
        return Err(Error::config(format!(
            "natural amplitude must be [N,C,H,W], got {:?}",
            nat_amplitude.shape()
        )));
    };
    if lambdas.len() != n {
        return Err(Error::contract(format!(
            "{} lambdas for batch of {n}",
            lambdas.len()
        )));
    }
    if let Some(bad) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::contract(format!("lambda {bad} outside [0,1]")));
    }
    let raw = gen.forward_tape(tape, z, conditioning, gen_prefix)?;
    let scaled = tape.mul_broadcast_row(raw, scale.row_factors()?)?;
    let gen_full = tape.expand_half(scaled, c, h, w)?;

    // offset (1-λ_i)·A(x_i) is constant with respect to the generator
    let mut offset = vec![0.0; n * c * h * w];
    let per = c * h * w;
    for i in 0..n {
        for k in 0..per {
            offset[i * per + k] = (1.0 - lambdas[i]) * nat_amplitude.data()[i * per + k];
        }
    }
    let mixed = tape.per_sample_affine(
        gen_full,
        lambdas.to_vec(),
        Tensor::new(vec![n, c, h, w], offset)?,
    )?;
    let image = tape.idft_fixed_phase(mixed, nat_phase.clone())?;
    let xhat = tape.clamp01(image);
    Ok(RecombinedBatch {
        xhat,
        xhat_raw: image,
        lambdas: lambdas.to_vec(),
        raw_half: raw,
    })
}

/// Convenience wrapper producing recombined images as a plain tensor.
#[allow(clippy::too_many_arguments)]
pub fn build_recombined(
    batch: &Tensor,
    net: &SmallConvNet,
    gen: &AagNet,
    scale: &AmplitudeScale,
    lambdas: &[f64],
    labels: &[usize],
    z: &Tensor,
) -> Result<Tensor> {
    let (amp, phase) = batch_spectra(batch)?;
    let conditioning = aag_conditioning(gen.input_mode, net, batch, labels)?;
    let mut tape = Tape::new();
    let rec = build_recombined_tape(
        &mut tape,
        gen,
        "",
        z,
        &conditioning,
        lambdas,
        &amp,
        &phase,
        scale,
    )?;
    Ok(tape.value(rec.xhat).clone())
}

/// Per-sample spectra of a `[N,C,H,W]` batch, stacked back into `[N,C,H,W]`
/// amplitude and phase tensors.
pub fn batch_spectra(batch: &Tensor) -> Result<(Tensor, Tensor)> {
    let [n, c, h, w] = *batch.shape() else {
        return Err(Error::config(format!(
            "batch_spectra: expected [N,C,H,W], got {:?}",
            batch.shape()
        )));
    };
    let per = c * h * w;
    let mut amp = vec![0.0; n * per];
    let mut phase = vec![0.0; n * per];
    for i in 0..n {
        let img = Tensor::new(vec![c, h, w], batch.data()[i * per..(i + 1) * per].to_vec())?;
        let spec = spectral::dft_decompose(&img)?;
        amp[i * per..(i + 1) * per].copy_from_slice(spec.amplitude.data());
        phase[i * per..(i + 1) * per].copy_from_slice(spec.phase.data());
    }
    Ok((
        Tensor::new(vec![n, c, h, w], amp)?,
        Tensor::new(vec![n, c, h, w], phase)?,
    ))
}

/// Mean half-amplitudes of a batch, for feeding [`AmplitudeScale`].
pub fn batch_half_amplitudes(batch: &Tensor) -> Result<Vec<HalfAmplitude>> {
    let [n, c, h, w] = *batch.shape() else {
        return Err(Error::config(format!(
            "batch_half_amplitudes: expected [N,C,H,W], got {:?}",
            batch.shape()
        )));
    };
    let per = c * h * w;
    (0..n)
        .map(|i| {
            let img = Tensor::new(vec![c, h, w], batch.data()[i * per..(i + 1) * per].to_vec())?;
            let spec = spectral::dft_decompose(&img)?;
            spectral::extract_half(&spec.amplitude)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngExt;

    fn random_batch(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * c * h * w)
            .map(|_| rng.random_range(0.05..0.95))
            .collect();
        Tensor::new(vec![n, c, h, w], data).unwrap()
    }

    #[test]
    fn model_forward_is_deterministic() {
        let mut net = SmallConvNet::init(1, 8, 8, 3, 0).unwrap();
        let batch = random_batch(2, 1, 8, 8, 1);
        let a = net.model_forward(&batch, Mode::Eval, BnBank::A).unwrap();
        let b = net.model_forward(&batch, Mode::Eval, BnBank::A).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.shape(), &[2, 3]);
        assert!(a.all_finite());
    }

    #[test]
    fn train_pass_through_bank_b_leaves_bank_a_outputs_unchanged() {
        let mut net = SmallConvNet::init(1, 8, 8, 3, 0).unwrap();
        let batch = random_batch(4, 1, 8, 8, 2);
        let before = net.model_forward(&batch, Mode::Eval, BnBank::A).unwrap();
        net.model_forward(&batch, Mode::Train, BnBank::B).unwrap();
        let after = net.model_forward(&batch, Mode::Eval, BnBank::A).unwrap();
        assert!(before
            .data()
            .iter()
            .zip(after.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        // bank B statistics did move
        assert_ne!(
            net.params.value("bn1.b.running_mean").unwrap().data(),
            vec![0.0; 16].as_slice()
        );
    }

    #[test]
    fn fresh_banks_have_unit_cosine_everywhere() {
        let net = SmallConvNet::init(1, 8, 8, 3, 0).unwrap();
        for sim in bn_parameter_similarity(&net).unwrap() {
            assert_eq!(sim.gamma, 1.0);
            assert_eq!(sim.beta, 1.0);
            assert_eq!(sim.mean, 1.0);
            assert_eq!(sim.var, 1.0);
            // beta and running-mean start at zero, flagged as degenerate
            assert!(sim.degenerate);
        }
    }

    #[test]
    fn opposed_gammas_give_negative_cosine() {
        let mut net = SmallConvNet::init(1, 8, 8, 3, 0).unwrap();
        let ga = net.params.value("bn1.a.gamma").unwrap().clone();
        let neg: Vec<f64> = ga.data().iter().map(|v| -v).collect();
        net.params.get_mut("bn1.b.gamma").unwrap().value =
            Tensor::new(vec![neg.len()], neg).unwrap();
        let sims = bn_parameter_similarity(&net).unwrap();
        assert_eq!(sims[0].gamma, -1.0);
    }

    #[test]
    fn zero_weight_generator_emits_half_everywhere() {
        let mut gen = AagNet::init(AagInputMode::NoiseOnly, 8, 3, 1, 8, 8, 0).unwrap();
        for i in 1..=4 {
            let shape = gen
                .params
                .value(&format!("fc{i}.weight"))
                .unwrap()
                .shape()
                .to_vec();
            gen.params.get_mut(&format!("fc{i}.weight")).unwrap().value = Tensor::zeros(shape);
        }
        let z = Tensor::zeros(vec![2, 8]);
        let cond = Tensor::new(vec![2, 0], vec![]).unwrap();
        let halves = gen.aag_forward(&z, &cond).unwrap();
        for h in &halves {
            for &v in h.tensor().data() {
                assert_eq!(v, 0.5);
            }
        }
    }

    #[test]
    fn generator_output_shape_matches_half_count() {
        // a [3,32,32] image has 3*32*17 = 1632 half-amplitude entries
        assert_eq!(HalfAmplitude::element_count(3, 32, 32), 1632);
        let gen = AagNet::init(AagInputMode::NoiseLogits, 4, 10, 3, 32, 32, 0).unwrap();
        assert_eq!(gen.half_elements(), 1632);
        assert_eq!(gen.params.value("fc4.weight").unwrap().shape()[0], 1632);
    }

    #[test]
    fn generator_is_deterministic_in_inputs() {
        let gen = AagNet::init(AagInputMode::NoiseOneHot, 6, 3, 1, 4, 4, 9).unwrap();
        let z = random_batch(1, 1, 1, 6, 5); // reuse helper for random data
        let z = Tensor::new(vec![1, 6], z.data().to_vec()).unwrap();
        let cond = Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let a = gen.aag_forward(&z, &cond).unwrap();
        let b = gen.aag_forward(&z, &cond).unwrap();
        assert_eq!(a[0].tensor().data(), b[0].tensor().data());
        for &v in a[0].tensor().data() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn amplitude_scale_midpoint_recovers_mean() {
        let batch = random_batch(6, 1, 4, 4, 3);
        let halves = batch_half_amplitudes(&batch).unwrap();
        let mut scale = AmplitudeScale::new();
        assert!(scale.mean().is_err());
        scale.update_from_batch(&halves).unwrap();
        let mean = scale.mean().unwrap().clone();
        assert!(mean.data().iter().all(|&v| v > 0.0));

        let raw = HalfAmplitude::new(Tensor::full(vec![1, 4, 3], 0.5)).unwrap();
        let scaled = scale_generated_amplitude(&raw, &scale).unwrap();
        for (s, m) in scaled.tensor().data().iter().zip(mean.data()) {
            assert!((s - m).abs() < 1e-15);
        }
        let zero = HalfAmplitude::new(Tensor::zeros(vec![1, 4, 3])).unwrap();
        let scaled = scale_generated_amplitude(&zero, &scale).unwrap();
        assert!(scaled.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_images_concentrate_scale_at_dc() {
        let batch = Tensor::full(vec![3, 1, 4, 4], 0.6);
        let halves = batch_half_amplitudes(&batch).unwrap();
        let mut scale = AmplitudeScale::new();
        scale.update_from_batch(&halves).unwrap();
        let mean = scale.mean().unwrap();
        // DC carries 0.6*16; everything else is the 1e-12 positivity floor
        assert!((mean.data()[0] - 0.6 * 16.0).abs() < 1e-9);
        for &v in &mean.data()[1..] {
            assert!(v <= 1e-10, "non-dc entry {v}");
        }
    }

    #[test]
    fn lambda_zero_recombination_is_identity() {
        let net = SmallConvNet::init(1, 8, 8, 3, 0).unwrap();
        let gen = AagNet::init(AagInputMode::NoiseLogits, 4, 3, 1, 8, 8, 1).unwrap();
        let batch = random_batch(3, 1, 8, 8, 7);
        let halves = batch_half_amplitudes(&batch).unwrap();
        let mut scale = AmplitudeScale::new();
        scale.update_from_batch(&halves).unwrap();
        let z = Tensor::zeros(vec![3, 4]);
        let xhat = build_recombined(
            &batch,
            &net,
            &gen,
            &scale,
            &[0.0, 0.0, 0.0],
            &[0, 1, 2],
            &z,
        )
        .unwrap();
        assert!(batch.max_abs_diff(&xhat) < 1e-4);
    }

    #[test]
    fn recombination_preserves_phase() {
        let net = SmallConvNet::init(1, 8, 8, 3, 0).unwrap();
        let gen = AagNet::init(AagInputMode::NoiseLogits, 4, 3, 1, 8, 8, 1).unwrap();
        let batch = random_batch(2, 1, 8, 8, 11);
        let halves = batch_half_amplitudes(&batch).unwrap();
        let mut scale = AmplitudeScale::new();
        scale.update_from_batch(&halves).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z_data: Vec<f64> = (0..2 * 4)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let z = Tensor::new(vec![2, 4], z_data).unwrap();
        let lambdas = [0.35, 0.9];
        let (amp, phase) = batch_spectra(&batch).unwrap();
        let cond = aag_conditioning(gen.input_mode, &net, &batch, &[0, 1]).unwrap();
        let mut tape = Tape::new();
        let rec = build_recombined_tape(
            &mut tape, &gen, "", &z, &cond, &lambdas, &amp, &phase, &scale,
        )
        .unwrap();
        let xhat_raw = tape.value(rec.xhat_raw).clone();

        let (re_amp, re_phase) = batch_spectra(&xhat_raw).unwrap();
        let per = 64;
        for i in 0..2 {
            for k in 0..per {
                if re_amp.data()[i * per + k] > 1e-6 {
                    let d = crate::spectral::wrap_angle(
                        re_phase.data()[i * per + k] - phase.data()[i * per + k],
                    )
                    .abs();
                    assert!(d < 1e-3, "phase deviation {d} at sample {i} bin {k}");
                }
            }
        }
    }
}
