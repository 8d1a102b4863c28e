//! Eagerly evaluated computation tape with reverse-mode differentiation.
//!
//! Every op validates shapes when it is recorded and computes its output
//! immediately; `backward` walks the tape once in reverse. Node indices are
//! topological by construction, so the reverse walk needs no explicit sort.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::spectral::fft2_inplace;

use super::layers;
use super::{GradientRecord, Tensor};

/// Probability floor applied before logarithms in divergence ops.
pub(crate) const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Scale(ValueId, f64),
    Relu(ValueId),
    Sigmoid(ValueId),
    Clamp01(ValueId),
    Linear {
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
    },
    Conv3x3 {
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
        stride: usize,
    },
    GlobalAvgPool(ValueId),
    BatchNormTrain {
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LogSoftmax(ValueId),
    Softmax(ValueId),
    NllMean {
        logp: ValueId,
        labels: Vec<usize>,
    },
    FloorNorm(ValueId),
    KlMean {
        p: ValueId,
        q: ValueId,
    },
    WeightedSum {
        input: ValueId,
        weights: Vec<f64>,
    },
    MulBroadcastRow {
        input: ValueId,
        row: Vec<f64>,
    },
    PerSampleAffine {
        input: ValueId,
        scale: Vec<f64>,
    },
    ExpandHalf {
        half: ValueId,
        channels: usize,
        height: usize,
        width: usize,
    },
    IdftFixedPhase {
        amp: ValueId,
        phase: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// New running statistics computed by a train-mode batch-norm op; the caller
/// decides when (and whether) to commit them.
#[derive(Debug, Clone)]
pub(crate) struct BnStatsUpdate {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, ValueId)>,
    by_name: HashMap<String, ValueId>,
    grads: Vec<Option<Vec<f64>>>,
    frozen_params: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape for input-gradient work only: parameters registered afterwards
    /// are treated as constants, which skips their share of the backward
    /// pass. Used by the attack loops.
    pub fn with_frozen_params() -> Self {
        Tape {
            frozen_params: true,
            ..Self::default()
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> ValueId {
        debug_assert!(value.all_finite(), "non-finite value out of {:?}", op_name(&op));
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Record a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> ValueId {
        self.push(value, Op::Leaf, false)
    }

    /// Record a tracked input; its gradient can be requested after `backward`.
    pub fn input(&mut self, value: Tensor) -> ValueId {
        self.push(value, Op::Leaf, true)
    }

    /// Record (or reuse) a named trainable parameter.
    pub fn param(&mut self, name: &str, value: &Tensor) -> ValueId {
        if let Some(&id) = self.by_name.get(name) {
            debug_assert_eq!(self.nodes[id.0].value.shape(), value.shape());
            return id;
        }
        let id = self.push(value.clone(), Op::Leaf, !self.frozen_params);
        if !self.frozen_params {
            self.params.push((name.to_string(), id));
        }
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn binary_same_shape(&self, a: ValueId, b: ValueId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::config(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: ValueId, k: f64) -> ValueId {
        let data = self.value(a).data().iter().map(|x| x * k).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        let ng = self.needs(a);
        self.push(t, Op::Scale(a, k), ng)
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        let data = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        let ng = self.needs(a);
        self.push(t, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: ValueId) -> ValueId {
        let data = self.value(a).data().iter().map(|&x| sigmoid(x)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        let ng = self.needs(a);
        self.push(t, Op::Sigmoid(a), ng)
    }

    pub fn clamp01(&mut self, a: ValueId) -> ValueId {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| x.clamp(0.0, 1.0))
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        let ng = self.needs(a);
        self.push(t, Op::Clamp01(a), ng)
    }

    pub fn linear(&mut self, input: ValueId, weight: ValueId, bias: ValueId) -> Result<ValueId> {
        let out = layers::linear_forward(self.value(input), self.value(weight), self.value(bias))?;
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
            ng,
        ))
    }

    pub fn conv3x3(
        &mut self,
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
        stride: usize,
    ) -> Result<ValueId> {
        let out = layers::conv3x3_forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
        )?;
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            out,
            Op::Conv3x3 {
                input,
                weight,
                bias,
                stride,
            },
            ng,
        ))
    }

    pub fn global_avg_pool(&mut self, input: ValueId) -> Result<ValueId> {
        let out = layers::gap_forward(self.value(input))?;
        let ng = self.needs(input);
        Ok(self.push(out, Op::GlobalAvgPool(input), ng))
    }

    /// Train-mode batch norm: normalizes with the current batch statistics and
    /// returns the blended running statistics for the caller to commit later.
    pub(crate) fn batch_norm_train(
        &mut self,
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<(ValueId, BnStatsUpdate)> {
        let (out, mean, inv_std, update) = layers::bn_train_forward(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
        )?;
        let ng = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let id = self.push(
            out,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            },
            ng,
        );
        Ok((id, update))
    }

    pub(crate) fn batch_norm_eval(
        &mut self,
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<ValueId> {
        let (out, mean, inv_std) = layers::bn_eval_forward(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
        )?;
        let ng = self.needs(input) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            },
            ng,
        ))
    }

    fn rank2(&self, id: ValueId, what: &str) -> Result<(usize, usize)> {
        match self.value(id).shape() {
            [n, c] => Ok((*n, *c)),
            s => Err(Error::config(format!("{what}: expected [N,C], got {s:?}"))),
        }
    }

    pub fn log_softmax(&mut self, x: ValueId) -> Result<ValueId> {
        let (n, c) = self.rank2(x, "log_softmax")?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &xv[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let t = Tensor::new(vec![n, c], out)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::LogSoftmax(x), ng))
    }

    pub fn softmax(&mut self, x: ValueId) -> Result<ValueId> {
        let (n, c) = self.rank2(x, "softmax")?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &xv[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                s += e;
            }
            for j in 0..c {
                out[i * c + j] /= s;
            }
        }
        let t = Tensor::new(vec![n, c], out)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Softmax(x), ng))
    }

    /// Mean negative log-likelihood over the batch, `logp` holding
    /// log-probabilities.
    pub fn nll_mean(&mut self, logp: ValueId, labels: &[usize]) -> Result<ValueId> {
        let (n, c) = self.rank2(logp, "nll_mean")?;
        if labels.len() != n {
            return Err(Error::contract(format!(
                "nll_mean: {} labels for batch of {n}",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::contract(format!(
                "nll_mean: label {bad} out of range for {c} classes"
            )));
        }
        let lv = self.value(logp).data();
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -lv[i * c + y])
            .sum();
        let t = Tensor::scalar(total / n as f64);
        let ng = self.needs(logp);
        Ok(self.push(
            t,
            Op::NllMean {
                logp,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }

    /// Per-row `max(x, 1e-12)` followed by renormalization to sum 1.
    pub fn floor_norm(&mut self, x: ValueId) -> Result<ValueId> {
        let (n, c) = self.rank2(x, "floor_norm")?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..c {
                let m = xv[i * c + j].max(PROB_FLOOR);
                out[i * c + j] = m;
                s += m;
            }
            for j in 0..c {
                out[i * c + j] /= s;
            }
        }
        let t = Tensor::new(vec![n, c], out)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::FloorNorm(x), ng))
    }

    /// Batch-mean KL divergence `(1/N) sum_i sum_j p_ij ln(p_ij / q_ij)`.
    /// Inputs must already be valid probability rows (see `floor_norm`).
    pub fn kl_mean(&mut self, p: ValueId, q: ValueId) -> Result<ValueId> {
        self.binary_same_shape(p, q, "kl_mean")?;
        let (n, c) = self.rank2(p, "kl_mean")?;
        let pv = self.value(p).data();
        let qv = self.value(q).data();
        let mut total = 0.0;
        for i in 0..n * c {
            total += pv[i] * (pv[i].ln() - qv[i].ln());
        }
        let t = Tensor::scalar(total / n as f64);
        let ng = self.needs(p) || self.needs(q);
        Ok(self.push(t, Op::KlMean { p, q }, ng))
    }

    /// Scalar `sum(weights ⊙ x)`.
    pub fn weighted_sum(&mut self, input: ValueId, weights: Vec<f64>) -> Result<ValueId> {
        if weights.len() != self.value(input).len() {
            return Err(Error::contract(format!(
                "weighted_sum: {} weights for {} elements",
                weights.len(),
                self.value(input).len()
            )));
        }
        let total: f64 = self
            .value(input)
            .data()
            .iter()
            .zip(&weights)
            .map(|(x, w)| x * w)
            .sum();
        let t = Tensor::scalar(total);
        let ng = self.needs(input);
        Ok(self.push(t, Op::WeightedSum { input, weights }, ng))
    }

    /// Elementwise multiply every row of `[N, M]` input by a fixed `M`-vector.
    pub fn mul_broadcast_row(&mut self, input: ValueId, row: Vec<f64>) -> Result<ValueId> {
        let (n, m) = self.rank2(input, "mul_broadcast_row")?;
        if row.len() != m {
            return Err(Error::config(format!(
                "mul_broadcast_row: row length {} vs width {m}",
                row.len()
            )));
        }
        let xv = self.value(input).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = xv[i * m + j] * row[j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        let ng = self.needs(input);
        Ok(self.push(t, Op::MulBroadcastRow { input, row }, ng))
    }

    /// `out[i, ...] = scale[i] * input[i, ...] + offset[i, ...]` with one
    /// scalar per leading-dimension slice.
    pub fn per_sample_affine(
        &mut self,
        input: ValueId,
        scale: Vec<f64>,
        offset: Tensor,
    ) -> Result<ValueId> {
        let shape = self.value(input).shape().to_vec();
        if shape.is_empty() || shape[0] != scale.len() {
            return Err(Error::config(format!(
                "per_sample_affine: {} scales for shape {:?}",
                scale.len(),
                shape
            )));
        }
        if offset.shape() != shape.as_slice() {
            return Err(Error::config(format!(
                "per_sample_affine: offset shape {:?} vs input {:?}",
                offset.shape(),
                shape
            )));
        }
        let n = shape[0];
        let per = self.value(input).len() / n;
        let xv = self.value(input).data();
        let ov = offset.data();
        let mut out = vec![0.0; xv.len()];
        for i in 0..n {
            for j in 0..per {
                out[i * per + j] = scale[i] * xv[i * per + j] + ov[i * per + j];
            }
        }
        let t = Tensor::new(shape, out)?;
        let ng = self.needs(input);
        Ok(self.push(t, Op::PerSampleAffine { input, scale }, ng))
    }

    /// Expand a batch of flattened half-amplitudes `[N, C*H*(W/2+1)]` into
    /// full conjugate-mirrored amplitude arrays `[N, C, H, W]`.
    pub fn expand_half(
        &mut self,
        half: ValueId,
        channels: usize,
        height: usize,
        width: usize,
    ) -> Result<ValueId> {
        let wh = width / 2 + 1;
        let (n, m) = self.rank2(half, "expand_half")?;
        if m != channels * height * wh {
            return Err(Error::config(format!(
                "expand_half: got width {m}, expected {}x{}x{} = {}",
                channels,
                height,
                wh,
                channels * height * wh
            )));
        }
        let hv = self.value(half).data();
        let mut out = vec![0.0; n * channels * height * width];
        for i in 0..n {
            for ch in 0..channels {
                for u in 0..height {
                    for v in 0..width {
                        let (su, sv) = if v < wh {
                            (u, v)
                        } else {
                            ((height - u) % height, width - v)
                        };
                        out[((i * channels + ch) * height + u) * width + v] =
                            hv[(i * channels + ch) * height * wh + su * wh + sv];
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, channels, height, width], out)?;
        let ng = self.needs(half);
        Ok(self.push(
            t,
            Op::ExpandHalf {
                half,
                channels,
                height,
                width,
            },
            ng,
        ))
    }

    /// Real part of the inverse DFT of `amp · e^{i·phase}` with the phase held
    /// fixed; linear in the amplitude, so the backward pass is one forward
    /// transform of the output gradient.
    pub fn idft_fixed_phase(&mut self, amp: ValueId, phase: Tensor) -> Result<ValueId> {
        let shape = self.value(amp).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::config(format!(
                "idft_fixed_phase: expected [N,C,H,W], got {shape:?}"
            )));
        }
        if phase.shape() != shape.as_slice() {
            return Err(Error::config(format!(
                "idft_fixed_phase: phase shape {:?} vs amp {:?}",
                phase.shape(),
                shape
            )));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let av = self.value(amp).data();
        let pv = phase.data();
        let hw = h * w;
        let mut out = vec![0.0; n * c * hw];
        let mut re = vec![0.0; hw];
        let mut im = vec![0.0; hw];
        for s in 0..n * c {
            let base = s * hw;
            for k in 0..hw {
                let (sin, cos) = pv[base + k].sin_cos();
                re[k] = av[base + k] * cos;
                im[k] = av[base + k] * sin;
            }
            fft2_inplace(&mut re, &mut im, h, w, 1);
            let scale = 1.0 / hw as f64;
            for k in 0..hw {
                out[base + k] = re[k] * scale;
            }
        }
        let t = Tensor::new(shape, out)?;
        let ng = self.needs(amp);
        Ok(self.push(t, Op::IdftFixedPhase { amp, phase }, ng))
    }

    /// Accumulate gradients from a scalar loss back to every tracked node.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let g = upper[0].as_ref().expect("checked above").clone();
            self.propagate(i, &g, lower);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], id: ValueId, contrib: &[f64]| {
            if !self.needs(id) {
                return;
            }
            let slot =
                grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.len()]);
            for (dst, src) in slot.iter_mut().zip(contrib) {
                *dst += src;
            }
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g);
                acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                acc(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.needs(*a) {
                    let ga: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                    acc(grads, *a, &ga);
                }
                if self.needs(*b) {
                    let gb: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    acc(grads, *b, &gb);
                }
            }
            Op::Scale(a, k) => {
                let ga: Vec<f64> = g.iter().map(|x| x * k).collect();
                acc(grads, *a, &ga);
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                let ga: Vec<f64> = g
                    .iter()
                    .zip(av)
                    .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                    .collect();
                acc(grads, *a, &ga);
            }
            Op::Sigmoid(a) => {
                let yv = self.nodes[i].value.data();
                let ga: Vec<f64> = g.iter().zip(yv).map(|(x, &y)| x * y * (1.0 - y)).collect();
                acc(grads, *a, &ga);
            }
            Op::Clamp01(a) => {
                let av = self.value(*a).data();
                let ga: Vec<f64> = g
                    .iter()
                    .zip(av)
                    .map(|(x, &v)| if v > 0.0 && v < 1.0 { *x } else { 0.0 })
                    .collect();
                acc(grads, *a, &ga);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (gi, gw, gb) = layers::linear_backward(
                    g,
                    self.value(*input),
                    self.value(*weight),
                    self.needs(*input),
                    self.needs(*weight),
                );
                acc(grads, *input, &gi);
                acc(grads, *weight, &gw);
                acc(grads, *bias, &gb);
            }
            Op::Conv3x3 {
                input,
                weight,
                bias,
                stride,
            } => {
                let (gi, gw, gb) = layers::conv3x3_backward(
                    g,
                    self.value(*input),
                    self.value(*weight),
                    *stride,
                    self.needs(*input),
                    self.needs(*weight),
                );
                acc(grads, *input, &gi);
                acc(grads, *weight, &gw);
                acc(grads, *bias, &gb);
            }
            Op::GlobalAvgPool(a) => {
                let ga = layers::gap_backward(g, self.value(*a));
                acc(grads, *a, &ga);
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (gi, gg, gb) = layers::bn_train_backward(
                    g,
                    self.value(*input),
                    self.value(*gamma),
                    mean,
                    inv_std,
                );
                acc(grads, *input, &gi);
                acc(grads, *gamma, &gg);
                acc(grads, *beta, &gb);
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (gi, gg, gb) = layers::bn_eval_backward(
                    g,
                    self.value(*input),
                    self.value(*gamma),
                    mean,
                    inv_std,
                );
                acc(grads, *input, &gi);
                acc(grads, *gamma, &gg);
                acc(grads, *beta, &gb);
            }
            Op::LogSoftmax(a) => {
                let yv = self.nodes[i].value.data();
                let [n, c] = *self.value(*a).shape() else {
                    unreachable!()
                };
                let mut ga = vec![0.0; n * c];
                for r in 0..n {
                    let gs: f64 = g[r * c..(r + 1) * c].iter().sum();
                    for j in 0..c {
                        let p = yv[r * c + j].exp();
                        ga[r * c + j] = g[r * c + j] - p * gs;
                    }
                }
                acc(grads, *a, &ga);
            }
            Op::Softmax(a) => {
                let pv = self.nodes[i].value.data();
                let [n, c] = *self.value(*a).shape() else {
                    unreachable!()
                };
                let mut ga = vec![0.0; n * c];
                for r in 0..n {
                    let dot: f64 = (0..c).map(|j| g[r * c + j] * pv[r * c + j]).sum();
                    for j in 0..c {
                        ga[r * c + j] = pv[r * c + j] * (g[r * c + j] - dot);
                    }
                }
                acc(grads, *a, &ga);
            }
            Op::NllMean { logp, labels } => {
                let [n, c] = *self.value(*logp).shape() else {
                    unreachable!()
                };
                let mut gl = vec![0.0; n * c];
                let s = g[0] / n as f64;
                for (r, &y) in labels.iter().enumerate() {
                    gl[r * c + y] = -s;
                }
                acc(grads, *logp, &gl);
            }
            Op::FloorNorm(a) => {
                let xv = self.value(*a).data();
                let yv = self.nodes[i].value.data();
                let [n, c] = *self.value(*a).shape() else {
                    unreachable!()
                };
                let mut ga = vec![0.0; n * c];
                for r in 0..n {
                    let mut s = 0.0;
                    for j in 0..c {
                        s += xv[r * c + j].max(PROB_FLOOR);
                    }
                    let dot: f64 = (0..c).map(|j| g[r * c + j] * yv[r * c + j]).sum();
                    for j in 0..c {
                        if xv[r * c + j] > PROB_FLOOR {
                            ga[r * c + j] = (g[r * c + j] - dot) / s;
                        }
                    }
                }
                acc(grads, *a, &ga);
            }
            Op::KlMean { p, q } => {
                let pv = self.value(*p).data();
                let qv = self.value(*q).data();
                let [n, _c] = *self.value(*p).shape() else {
                    unreachable!()
                };
                let s = g[0] / n as f64;
                if self.needs(*p) {
                    let gp: Vec<f64> = pv
                        .iter()
                        .zip(qv)
                        .map(|(&pi, &qi)| s * (pi.ln() - qi.ln() + 1.0))
                        .collect();
                    acc(grads, *p, &gp);
                }
                if self.needs(*q) {
                    let gq: Vec<f64> = pv.iter().zip(qv).map(|(&pi, &qi)| -s * pi / qi).collect();
                    acc(grads, *q, &gq);
                }
            }
            Op::WeightedSum { input, weights } => {
                let gi: Vec<f64> = weights.iter().map(|w| w * g[0]).collect();
                acc(grads, *input, &gi);
            }
            Op::MulBroadcastRow { input, row } => {
                let m = row.len();
                let gi: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(k, x)| x * row[k % m])
                    .collect();
                acc(grads, *input, &gi);
            }
            Op::PerSampleAffine { input, scale } => {
                let per = g.len() / scale.len();
                let gi: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(k, x)| x * scale[k / per])
                    .collect();
                acc(grads, *input, &gi);
            }
            Op::ExpandHalf {
                half,
                channels,
                height,
                width,
            } => {
                let (c, h, w) = (*channels, *height, *width);
                let wh = w / 2 + 1;
                let n = self.value(*half).shape()[0];
                let mut gh = vec![0.0; n * c * h * wh];
                for i2 in 0..n {
                    for ch in 0..c {
                        for u in 0..h {
                            for v in 0..w {
                                let (su, sv) =
                                    if v < wh { (u, v) } else { ((h - u) % h, w - v) };
                                gh[(i2 * c + ch) * h * wh + su * wh + sv] +=
                                    g[((i2 * c + ch) * h + u) * w + v];
                            }
                        }
                    }
                }
                acc(grads, *half, &gh);
            }
            Op::IdftFixedPhase { amp, phase } => {
                let shape = self.value(*amp).shape();
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let hw = h * w;
                let pv = phase.data();
                let mut ga = vec![0.0; n * c * hw];
                let mut re = vec![0.0; hw];
                let mut im = vec![0.0; hw];
                for s in 0..n * c {
                    let base = s * hw;
                    re.copy_from_slice(&g[base..base + hw]);
                    im.iter_mut().for_each(|x| *x = 0.0);
                    // adjoint of Re∘IDFT: unscaled +i transform of the cotangent
                    fft2_inplace(&mut re, &mut im, h, w, 1);
                    let scale = 1.0 / hw as f64;
                    for k in 0..hw {
                        let (sin, cos) = pv[base + k].sin_cos();
                        ga[base + k] = (cos * re[k] - sin * im[k]) * scale;
                    }
                }
                acc(grads, *amp, &ga);
            }
        }
    }

    /// Collect named parameter gradients (and optionally one input gradient)
    /// after `backward`.
    pub fn gradient_record(&self, input: Option<ValueId>) -> GradientRecord {
        let mut record = GradientRecord::default();
        for (name, id) in &self.params {
            if let Some(g) = self.grad(*id) {
                record.grads.insert(name.clone(), g.to_vec());
            }
        }
        record.input_grad = input.and_then(|id| self.grad(id).map(|g| g.to_vec()));
        record
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Relu(..) => "relu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Clamp01(..) => "clamp01",
        Op::Linear { .. } => "linear",
        Op::Conv3x3 { .. } => "conv3x3",
        Op::GlobalAvgPool(..) => "global_avg_pool",
        Op::BatchNormTrain { .. } => "batch_norm_train",
        Op::BatchNormEval { .. } => "batch_norm_eval",
        Op::LogSoftmax(..) => "log_softmax",
        Op::Softmax(..) => "softmax",
        Op::NllMean { .. } => "nll_mean",
        Op::FloorNorm(..) => "floor_norm",
        Op::KlMean { .. } => "kl_mean",
        Op::WeightedSum { .. } => "weighted_sum",
        Op::MulBroadcastRow { .. } => "mul_broadcast_row",
        Op::PerSampleAffine { .. } => "per_sample_affine",
        Op::ExpandHalf { .. } => "expand_half",
        Op::IdftFixedPhase { .. } => "idft_fixed_phase",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_weighted_input_grad_is_weights() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1, 4], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let w = vec![2.0, -1.0, 0.0, 4.0];
        let loss = tape.weighted_sum(x, w.clone()).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), w.as_slice());
    }

    #[test]
    fn half_norm_squared_grad_is_input() {
        let mut tape = Tape::new();
        let data = vec![0.3, -1.2, 2.5];
        let x = tape.input(Tensor::new(vec![1, 3], data.clone()).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.weighted_sum(sq, vec![0.5; 3]).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        for (a, b) in g.iter().zip(&data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert!(matches!(
            tape.backward(y),
            Err(crate::error::Error::Contract(_))
        ));
    }

    #[test]
    fn softmax_ce_gradient_matches_analytic() {
        // d CE/dz = softmax(z) - onehot(y) for a single sample
        let mut tape = Tape::new();
        let z = tape.input(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let logp = tape.log_softmax(z).unwrap();
        let loss = tape.nll_mean(logp, &[0]).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(z).unwrap();
        let p0 = 1.0_f64.exp() / (1.0_f64.exp() + 1.0);
        assert!((g[0] - (p0 - 1.0)).abs() < 1e-12);
        assert!((g[1] - (1.0 - p0)).abs() < 1e-12);
    }

    #[test]
    fn identical_passes_produce_bit_identical_records() {
        let run = || {
            let mut tape = Tape::new();
            let w = Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap();
            let b = Tensor::new(vec![2], vec![0.05, -0.05]).unwrap();
            let wid = tape.param("w", &w);
            let bid = tape.param("b", &b);
            let x = tape.input(Tensor::new(vec![1, 3], vec![0.7, -0.1, 0.2]).unwrap());
            let h = tape.linear(x, wid, bid).unwrap();
            let r = tape.relu(h);
            let logp = tape.log_softmax(r).unwrap();
            let loss = tape.nll_mean(logp, &[1]).unwrap();
            tape.backward(loss).unwrap();
            tape.gradient_record(Some(x))
        };
        let a = run();
        let b = run();
        assert!(a.bitwise_eq(&b));
        assert!(a.input_grad.is_some());
    }
}
