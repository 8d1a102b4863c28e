//! Layer kernels and the generic single-layer driver.
//!
//! Convolutions are computed directly; at the image sizes this crate targets
//! that is fast enough and keeps the arithmetic easy to audit.

use crate::error::{Error, Result};

use super::tape::BnStatsUpdate;
use super::{ParameterSet, Tape, Tensor, ValueId};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Which of the two batch-norm statistic banks a forward pass reads (and, in
/// train mode, updates).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnBank {
    A,
    B,
}

impl BnBank {
    pub fn tag(self) -> &'static str {
        match self {
            BnBank::A => "a",
            BnBank::B => "b",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv3x3 { stride: usize },
    Linear,
    Relu,
    GlobalAvgPool,
    BatchNorm,
}

/// Deferred running-statistics update produced by a train-mode batch-norm
/// forward. Nothing mutates until `commit_bn_updates` is called, which keeps
/// forward passes pure and bank isolation trivial to audit.
#[derive(Debug, Clone)]
pub struct BnPending {
    pub mean_key: String,
    pub var_key: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Write pending batch-norm running statistics into the parameter set.
pub fn commit_bn_updates(params: &mut ParameterSet, pending: &[BnPending]) -> Result<()> {
    for p in pending {
        params.get_mut(&p.mean_key)?.value =
            Tensor::new(vec![p.mean.len()], p.mean.clone())?;
        params.get_mut(&p.var_key)?.value = Tensor::new(vec![p.var.len()], p.var.clone())?;
    }
    Ok(())
}

/// Drive one layer on the tape, locating its parameters under `prefix`.
///
/// Convolution and linear layers expect `{prefix}.weight` / `{prefix}.bias`;
/// batch norm expects `{prefix}.{bank}.{gamma,beta,running_mean,running_var}`
/// and in train mode returns the blended running statistics for the selected
/// bank only.
pub fn apply_layer(
    tape: &mut Tape,
    kind: LayerKind,
    input: ValueId,
    params: &ParameterSet,
    prefix: &str,
    mode: Mode,
    bank: BnBank,
) -> Result<(ValueId, Vec<BnPending>)> {
    apply_layer_in_namespace(tape, "", kind, input, params, prefix, mode, bank)
}

/// Like [`apply_layer`], but registering tape parameters under an extra
/// `namespace` so several networks can share one tape. Pending batch-norm
/// keys stay un-namespaced (they address `params` directly).
#[allow(clippy::too_many_arguments)]
pub fn apply_layer_in_namespace(
    tape: &mut Tape,
    namespace: &str,
    kind: LayerKind,
    input: ValueId,
    params: &ParameterSet,
    prefix: &str,
    mode: Mode,
    bank: BnBank,
) -> Result<(ValueId, Vec<BnPending>)> {
    match kind {
        LayerKind::Relu => Ok((tape.relu(input), Vec::new())),
        LayerKind::GlobalAvgPool => Ok((tape.global_avg_pool(input)?, Vec::new())),
        LayerKind::Linear => {
            let w = tape.param(
                &format!("{namespace}{prefix}.weight"),
                params.value(&format!("{prefix}.weight"))?,
            );
            let b = tape.param(
                &format!("{namespace}{prefix}.bias"),
                params.value(&format!("{prefix}.bias"))?,
            );
            Ok((tape.linear(input, w, b)?, Vec::new()))
        }
        LayerKind::Conv3x3 { stride } => {
            if stride == 0 {
                return Err(Error::config("conv3x3: stride must be positive"));
            }
            let w = tape.param(
                &format!("{namespace}{prefix}.weight"),
                params.value(&format!("{prefix}.weight"))?,
            );
            let b = tape.param(
                &format!("{namespace}{prefix}.bias"),
                params.value(&format!("{prefix}.bias"))?,
            );
            Ok((tape.conv3x3(input, w, b, stride)?, Vec::new()))
        }
        LayerKind::BatchNorm => {
            let tag = bank.tag();
            let gamma_key = format!("{prefix}.{tag}.gamma");
            let beta_key = format!("{prefix}.{tag}.beta");
            let mean_key = format!("{prefix}.{tag}.running_mean");
            let var_key = format!("{prefix}.{tag}.running_var");
            let gamma = tape.param(&format!("{namespace}{gamma_key}"), params.value(&gamma_key)?);
            let beta = tape.param(&format!("{namespace}{beta_key}"), params.value(&beta_key)?);
            let rm = params.value(&mean_key)?.data().to_vec();
            let rv = params.value(&var_key)?.data().to_vec();
            match mode {
                Mode::Eval => Ok((
                    tape.batch_norm_eval(input, gamma, beta, &rm, &rv)?,
                    Vec::new(),
                )),
                Mode::Train => {
                    let (out, BnStatsUpdate { mean, var }) =
                        tape.batch_norm_train(input, gamma, beta, &rm, &rv)?;
                    Ok((
                        out,
                        vec![BnPending {
                            mean_key,
                            var_key,
                            mean,
                            var,
                        }],
                    ))
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// kernels
// ---------------------------------------------------------------------------

/// Dot product with four accumulators; breaking the dependency chain roughly
/// quadruples throughput on long rows and the summation order stays fixed, so
/// results are bit-reproducible.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let (ra, rb) = (&a[i * 4..i * 4 + 4], &b[i * 4..i * 4 + 4]);
        acc[0] += ra[0] * rb[0];
        acc[1] += ra[1] * rb[1];
        acc[2] += ra[2] * rb[2];
        acc[3] += ra[3] * rb[3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(super) fn linear_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [n, fin] = *input.shape() else {
        return Err(Error::config(format!(
            "linear: expected [N,F] input, got {:?}",
            input.shape()
        )));
    };
    let [fout, fin2] = *weight.shape() else {
        return Err(Error::config(format!(
            "linear: expected [Fout,Fin] weight, got {:?}",
            weight.shape()
        )));
    };
    if fin != fin2 || bias.shape() != [fout] {
        return Err(Error::config(format!(
            "linear: incompatible shapes input {:?} weight {:?} bias {:?}",
            input.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let x = input.data();
    let w = weight.data();
    let b = bias.data();
    let mut out = vec![0.0; n * fout];
    for i in 0..n {
        let xrow = &x[i * fin..(i + 1) * fin];
        for o in 0..fout {
            let wrow = &w[o * fin..(o + 1) * fin];
            out[i * fout + o] = b[o] + dot(xrow, wrow);
        }
    }
    Tensor::new(vec![n, fout], out)
}

pub(super) fn linear_backward(
    g: &[f64],
    input: &Tensor,
    weight: &Tensor,
    need_input: bool,
    need_weight: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [n, fin] = *input.shape() else { unreachable!() };
    let [fout, _] = *weight.shape() else { unreachable!() };
    let x = input.data();
    let w = weight.data();
    let mut gi = vec![0.0; if need_input { n * fin } else { 0 }];
    let mut gw = vec![0.0; if need_weight { fout * fin } else { 0 }];
    let mut gb = vec![0.0; fout];
    for i in 0..n {
        for o in 0..fout {
            let go = g[i * fout + o];
            gb[o] += go;
            if go == 0.0 {
                continue;
            }
            if need_input {
                let wrow = &w[o * fin..(o + 1) * fin];
                let girow = &mut gi[i * fin..(i + 1) * fin];
                for (gv, &wv) in girow.iter_mut().zip(wrow) {
                    *gv += go * wv;
                }
            }
            if need_weight {
                let xrow = &x[i * fin..(i + 1) * fin];
                let gwrow = &mut gw[o * fin..(o + 1) * fin];
                for (gv, &xv) in gwrow.iter_mut().zip(xrow) {
                    *gv += go * xv;
                }
            }
        }
    }
    (gi, gw, gb)
}

/// Output spatial size for kernel 3, padding 1: `ceil(len / stride)`.
fn conv_out(len: usize, stride: usize) -> usize {
    (len - 1) / stride + 1
}

/// Gather every 3x3 input patch into rows of `[N*Ho*Wo, Cin*9]` so the
/// convolution itself becomes long contiguous dot products.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let k = cin * 9;
    let mut patches = vec![0.0; n * ho * wo * k];
    for ni in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((ni * ho + oy) * wo + ox) * k;
                for ci in 0..cin {
                    let xbase = (ni * cin + ci) * h * w;
                    let pbase = row + ci * 9;
                    for ky in 0..3 {
                        let iy = oy * stride + ky;
                        if iy < 1 || iy > h {
                            continue;
                        }
                        let xrow = xbase + (iy - 1) * w;
                        for kx in 0..3 {
                            let ix = ox * stride + kx;
                            if ix < 1 || ix > w {
                                continue;
                            }
                            patches[pbase + ky * 3 + kx] = x[xrow + ix - 1];
                        }
                    }
                }
            }
        }
    }
    patches
}

pub(super) fn conv3x3_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
) -> Result<Tensor> {
    let [n, cin, h, w] = *input.shape() else {
        return Err(Error::config(format!(
            "conv3x3: expected [N,C,H,W] input, got {:?}",
            input.shape()
        )));
    };
    let [cout, cin2, kh, kw] = *weight.shape() else {
        return Err(Error::config(format!(
            "conv3x3: expected [Cout,Cin,3,3] weight, got {:?}",
            weight.shape()
        )));
    };
    if cin != cin2 || kh != 3 || kw != 3 || bias.shape() != [cout] {
        return Err(Error::config(format!(
            "conv3x3: incompatible shapes input {:?} weight {:?} bias {:?}",
            input.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let ho = conv_out(h, stride);
    let wo = conv_out(w, stride);
    let x = input.data();
    let wt = weight.data();
    let b = bias.data();
    let k = cin * 9;
    let patches = im2col(x, n, cin, h, w, stride, ho, wo);
    let hw_out = ho * wo;
    let mut out = vec![0.0; n * cout * hw_out];
    for ni in 0..n {
        for pos in 0..hw_out {
            let patch = &patches[(ni * hw_out + pos) * k..(ni * hw_out + pos + 1) * k];
            let obase = ni * cout * hw_out + pos;
            for co in 0..cout {
                let wrow = &wt[co * k..(co + 1) * k];
                out[obase + co * hw_out] = b[co] + dot(patch, wrow);
            }
        }
    }
    Tensor::new(vec![n, cout, ho, wo], out)
}

pub(super) fn conv3x3_backward(
    g: &[f64],
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    need_input: bool,
    need_weight: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [n, cin, h, w] = *input.shape() else { unreachable!() };
    let [cout, ..] = *weight.shape() else { unreachable!() };
    let ho = conv_out(h, stride);
    let wo = conv_out(w, stride);
    let x = input.data();
    let wt = weight.data();
    let k = cin * 9;
    let hw_out = ho * wo;
    let patches = if need_weight {
        im2col(x, n, cin, h, w, stride, ho, wo)
    } else {
        Vec::new()
    };
    let mut gi = vec![0.0; if need_input { n * cin * h * w } else { 0 }];
    let mut gw = vec![0.0; if need_weight { cout * k } else { 0 }];
    let mut gb = vec![0.0; cout];
    let mut gpatch = vec![0.0; k];
    for ni in 0..n {
        for pos in 0..hw_out {
            let obase = ni * cout * hw_out + pos;
            gpatch.iter_mut().for_each(|v| *v = 0.0);
            for co in 0..cout {
                let go = g[obase + co * hw_out];
                gb[co] += go;
                if go == 0.0 {
                    continue;
                }
                if need_input {
                    let wrow = &wt[co * k..(co + 1) * k];
                    for (gp, &wv) in gpatch.iter_mut().zip(wrow) {
                        *gp += go * wv;
                    }
                }
                if need_weight {
                    let patch =
                        &patches[(ni * hw_out + pos) * k..(ni * hw_out + pos + 1) * k];
                    let gwrow = &mut gw[co * k..(co + 1) * k];
                    for (gwv, &p) in gwrow.iter_mut().zip(patch) {
                        *gwv += go * p;
                    }
                }
            }
            if !need_input {
                continue;
            }
            // scatter the patch cotangent back onto the padded input window
            let oy = pos / wo;
            let ox = pos % wo;
            for ci in 0..cin {
                let xbase = (ni * cin + ci) * h * w;
                for ky in 0..3 {
                    let iy = oy * stride + ky;
                    if iy < 1 || iy > h {
                        continue;
                    }
                    let xrow = xbase + (iy - 1) * w;
                    for kx in 0..3 {
                        let ix = ox * stride + kx;
                        if ix < 1 || ix > w {
                            continue;
                        }
                        gi[xrow + ix - 1] += gpatch[ci * 9 + ky * 3 + kx];
                    }
                }
            }
        }
    }
    (gi, gw, gb)
}

pub(super) fn gap_forward(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = *input.shape() else {
        return Err(Error::config(format!(
            "global_avg_pool: expected [N,C,H,W], got {:?}",
            input.shape()
        )));
    };
    let x = input.data();
    let inv = 1.0 / (h * w) as f64;
    let mut out = vec![0.0; n * c];
    for i in 0..n * c {
        let s: f64 = x[i * h * w..(i + 1) * h * w].iter().sum();
        out[i] = s * inv;
    }
    Tensor::new(vec![n, c], out)
}

pub(super) fn gap_backward(g: &[f64], input: &Tensor) -> Vec<f64> {
    let [n, c, h, w] = *input.shape() else { unreachable!() };
    let inv = 1.0 / (h * w) as f64;
    let mut gi = vec![0.0; n * c * h * w];
    for i in 0..n * c {
        let v = g[i] * inv;
        for k in 0..h * w {
            gi[i * h * w + k] = v;
        }
    }
    gi
}

fn bn_shape(input: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize)> {
    let [n, c, h, w] = *input.shape() else {
        return Err(Error::config(format!(
            "batch_norm: expected [N,C,H,W], got {:?}",
            input.shape()
        )));
    };
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::config(format!(
            "batch_norm: affine shapes {:?}/{:?} vs {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok((n, c, h * w))
}

#[allow(clippy::type_complexity)]
pub(super) fn bn_train_forward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
) -> Result<(Tensor, Vec<f64>, Vec<f64>, BnStatsUpdate)> {
    let (n, c, hw) = bn_shape(input, gamma, beta)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::config(format!(
            "batch_norm: running stats length {}/{} vs {c} channels",
            running_mean.len(),
            running_var.len()
        )));
    }
    let m = (n * hw) as f64;
    let x = input.data();
    let g = gamma.data();
    let b = beta.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for ni in 0..n {
            let off = (ni * c + ch) * hw;
            for k in 0..hw {
                s += x[off + k];
            }
        }
        let mu = s / m;
        let mut v = 0.0;
        for ni in 0..n {
            let off = (ni * c + ch) * hw;
            for k in 0..hw {
                let d = x[off + k] - mu;
                v += d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        for ch in 0..c {
            let off = (ni * c + ch) * hw;
            for k in 0..hw {
                out[off + k] = g[ch] * (x[off + k] - mean[ch]) * inv_std[ch] + b[ch];
            }
        }
    }
    // running update blends the unbiased batch variance, as is conventional
    let unbias = if n * hw > 1 {
        m / (m - 1.0)
    } else {
        1.0
    };
    let new_mean: Vec<f64> = running_mean
        .iter()
        .zip(&mean)
        .map(|(r, b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b)
        .collect();
    let new_var: Vec<f64> = running_var
        .iter()
        .zip(&var)
        .map(|(r, b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * (b * unbias))
        .collect();
    Ok((
        Tensor::new(input.shape().to_vec(), out)?,
        mean,
        inv_std,
        BnStatsUpdate {
            mean: new_mean,
            var: new_var,
        },
    ))
}

pub(super) fn bn_train_backward(
    g: &[f64],
    input: &Tensor,
    gamma: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = *input.shape() else { unreachable!() };
    let hw = h * w;
    let m = (n * hw) as f64;
    let x = input.data();
    let gm = gamma.data();
    let mut gi = vec![0.0; x.len()];
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    for ch in 0..c {
        let mut sum_g = [0.0f64; 2];
        let mut sum_gx = [0.0f64; 2];
        for ni in 0..n {
            let off = (ni * c + ch) * hw;
            let gr = &g[off..off + hw];
            let xr = &x[off..off + hw];
            for k in 0..hw {
                let xhat = (xr[k] - mean[ch]) * inv_std[ch];
                sum_g[k & 1] += gr[k];
                sum_gx[k & 1] += gr[k] * xhat;
            }
        }
        let sum_g = sum_g[0] + sum_g[1];
        let sum_gx = sum_gx[0] + sum_gx[1];
        gg[ch] = sum_gx;
        gb[ch] = sum_g;
        let scale = gm[ch] * inv_std[ch];
        for ni in 0..n {
            let off = (ni * c + ch) * hw;
            let gr = &g[off..off + hw];
            let xr = &x[off..off + hw];
            let gir = &mut gi[off..off + hw];
            for k in 0..hw {
                let xhat = (xr[k] - mean[ch]) * inv_std[ch];
                gir[k] = scale * (gr[k] - sum_g / m - xhat * sum_gx / m);
            }
        }
    }
    (gi, gg, gb)
}

pub(super) fn bn_eval_forward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (n, c, hw) = bn_shape(input, gamma, beta)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::config(format!(
            "batch_norm: running stats length {}/{} vs {c} channels",
            running_mean.len(),
            running_var.len()
        )));
    }
    let inv_std: Vec<f64> = running_var
        .iter()
        .map(|v| 1.0 / (v + BN_EPS).sqrt())
        .collect();
    let x = input.data();
    let g = gamma.data();
    let b = beta.data();
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        for ch in 0..c {
            let off = (ni * c + ch) * hw;
            for k in 0..hw {
                out[off + k] = g[ch] * (x[off + k] - running_mean[ch]) * inv_std[ch] + b[ch];
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), out)?,
        running_mean.to_vec(),
        inv_std,
    ))
}

pub(super) fn bn_eval_backward(
    g: &[f64],
    input: &Tensor,
    gamma: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = *input.shape() else { unreachable!() };
    let hw = h * w;
    let x = input.data();
    let gm = gamma.data();
    let mut gi = vec![0.0; x.len()];
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    for ni in 0..n {
        for ch in 0..c {
            let off = (ni * c + ch) * hw;
            for k in 0..hw {
                let xhat = (x[off + k] - mean[ch]) * inv_std[ch];
                gi[off + k] = g[off + k] * gm[ch] * inv_std[ch];
                gg[ch] += g[off + k] * xhat;
                gb[ch] += g[off + k];
            }
        }
    }
    (gi, gg, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1, 3], vec![-1.0, 0.0, 2.0]).unwrap());
        let (y, pending) = apply_layer(
            &mut tape,
            LayerKind::Relu,
            x,
            &ParameterSet::new(),
            "",
            Mode::Eval,
            BnBank::A,
        )
        .unwrap();
        assert!(pending.is_empty());
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn conv_all_ones_4x4_has_nine_interior_four_corner() {
        // hand convolution of an all-ones 3x3 kernel over an all-ones 4x4 grid
        let mut params = ParameterSet::new();
        params
            .insert("c.weight", Tensor::full(vec![1, 1, 3, 3], 1.0), true)
            .unwrap();
        params
            .insert("c.bias", Tensor::zeros(vec![1]), true)
            .unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::full(vec![1, 1, 4, 4], 1.0));
        let (y, _) = apply_layer(
            &mut tape,
            LayerKind::Conv3x3 { stride: 1 },
            x,
            &params,
            "c",
            Mode::Eval,
            BnBank::A,
        )
        .unwrap();
        let out = tape.value(y).data();
        assert_eq!(tape.value(y).shape(), &[1, 1, 4, 4]);
        assert_eq!(out[0], 4.0); // corner
        assert_eq!(out[3], 4.0);
        assert_eq!(out[5], 9.0); // interior
        assert_eq!(out[10], 9.0);
        assert_eq!(out[1], 6.0); // edge
    }

    #[test]
    fn conv_stride_two_halves_spatial_dims() {
        let mut params = ParameterSet::new();
        params
            .insert("c.weight", Tensor::full(vec![2, 1, 3, 3], 0.5), true)
            .unwrap();
        params
            .insert("c.bias", Tensor::zeros(vec![2]), true)
            .unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::full(vec![1, 1, 5, 8], 1.0));
        let (y, _) = apply_layer(
            &mut tape,
            LayerKind::Conv3x3 { stride: 2 },
            x,
            &params,
            "c",
            Mode::Eval,
            BnBank::A,
        )
        .unwrap();
        // ceil(5/2)=3, ceil(8/2)=4
        assert_eq!(tape.value(y).shape(), &[1, 2, 3, 4]);
    }

    fn bn_params(c: usize) -> ParameterSet {
        let mut params = ParameterSet::new();
        for tag in ["a", "b"] {
            params
                .insert(format!("bn.{tag}.gamma"), Tensor::full(vec![c], 1.0), true)
                .unwrap();
            params
                .insert(format!("bn.{tag}.beta"), Tensor::zeros(vec![c]), true)
                .unwrap();
            params
                .insert(
                    format!("bn.{tag}.running_mean"),
                    Tensor::zeros(vec![c]),
                    false,
                )
                .unwrap();
            params
                .insert(
                    format!("bn.{tag}.running_var"),
                    Tensor::full(vec![c], 1.0),
                    false,
                )
                .unwrap();
        }
        params
    }

    #[test]
    fn bn_train_normalizes_batch_to_unit_stats() {
        let mut params = bn_params(2);
        let data: Vec<f64> = (0..2 * 2 * 3 * 3).map(|i| (i as f64) * 0.37 - 2.0).collect();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![2, 2, 3, 3], data).unwrap());
        let (y, pending) = apply_layer(
            &mut tape,
            LayerKind::BatchNorm,
            x,
            &params,
            "bn",
            Mode::Train,
            BnBank::A,
        )
        .unwrap();
        let out = tape.value(y).data();
        for ch in 0..2 {
            let mut vals = Vec::new();
            for ni in 0..2 {
                for k in 0..9 {
                    vals.push(out[(ni * 2 + ch) * 9 + k]);
                }
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5, "channel mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "channel variance {var}");
        }
        assert_eq!(pending.len(), 1);
        assert_eq!(pending[0].mean_key, "bn.a.running_mean");
        commit_bn_updates(&mut params, &pending).unwrap();
        // bank B untouched
        assert_eq!(params.value("bn.b.running_mean").unwrap().data(), &[0.0, 0.0]);
        assert_ne!(params.value("bn.a.running_mean").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn bn_eval_uses_selected_bank_and_mutates_nothing() {
        let mut params = bn_params(1);
        params.get_mut("bn.b.running_mean").unwrap().value = Tensor::full(vec![1], 5.0);
        let before = params.clone();

        let mut tape = Tape::new();
        let x = tape.input(Tensor::full(vec![1, 1, 2, 2], 5.0));
        let (yb, pending) = apply_layer(
            &mut tape,
            LayerKind::BatchNorm,
            x,
            &params,
            "bn",
            Mode::Eval,
            BnBank::B,
        )
        .unwrap();
        assert!(pending.is_empty());
        // (5 - 5) / sqrt(1 + eps) = 0 under bank B
        for v in tape.value(yb).data() {
            assert!(v.abs() < 1e-12);
        }
        let (ya, _) = apply_layer(
            &mut tape,
            LayerKind::BatchNorm,
            x,
            &params,
            "bn",
            Mode::Eval,
            BnBank::A,
        )
        .unwrap();
        // (5 - 0) / sqrt(1 + eps) under bank A
        for v in tape.value(ya).data() {
            assert!((v - 5.0 / (1.0f64 + BN_EPS).sqrt()).abs() < 1e-12);
        }
        assert!(before.bitwise_eq(&params));
    }

    #[test]
    fn unknown_bank_parameter_is_config_error() {
        let mut params = ParameterSet::new();
        params
            .insert("bn.a.gamma", Tensor::full(vec![1], 1.0), true)
            .unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::full(vec![1, 1, 2, 2], 0.0));
        let err = apply_layer(
            &mut tape,
            LayerKind::BatchNorm,
            x,
            &params,
            "bn",
            Mode::Eval,
            BnBank::B,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
