//! 2-D discrete Fourier machinery: amplitude/phase decomposition, recombination
//! from mixed amplitudes, and the non-redundant half-spectrum representation
//! used by the amplitude generator.
//!
//! Convention: the forward transform is unscaled and the inverse carries the
//! full `1/(H*W)` factor. Phase is `atan2(Im, Re)`, so it lands in `(-π, π]`.
//! Images are `[C, H, W]` tensors; the transform runs per channel.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Amplitude and phase of a per-channel 2-D DFT, both `[C, H, W]`.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub amplitude: Tensor,
    pub phase: Tensor,
}

/// The non-redundant columns `0..=W/2` of a conjugate-symmetric amplitude,
/// stored as `[C, H, W/2+1]`. All entries are non-negative.
#[derive(Debug, Clone)]
pub struct HalfAmplitude {
    data: Tensor,
}

impl HalfAmplitude {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.shape().len() != 3 {
            return Err(Error::config(format!(
                "half amplitude must be [C,H,Wh], got {:?}",
                data.shape()
            )));
        }
        if data.data().iter().any(|&v| v < 0.0) {
            return Err(Error::contract("half amplitude entries must be non-negative"));
        }
        Ok(HalfAmplitude { data })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// Element count of the half representation for a `[C, H, W]` image.
    pub fn element_count(channels: usize, height: usize, width: usize) -> usize {
        channels * height * (width / 2 + 1)
    }
}

fn image_dims(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::config(format!(
            "{what}: expected [C,H,W], got {:?}",
            t.shape()
        ))),
    }
}

/// Decompose an image into its amplitude and phase spectra (fast path for
/// power-of-two sides, direct transform otherwise).
pub fn dft_decompose(image: &Tensor) -> Result<Spectrum> {
    decompose_with(image, false)
}

/// Same as [`dft_decompose`] but forced through the O(N²) direct transform;
/// kept as a cross-check against the fast path.
pub fn dft_decompose_direct(image: &Tensor) -> Result<Spectrum> {
    decompose_with(image, true)
}

fn decompose_with(image: &Tensor, force_direct: bool) -> Result<Spectrum> {
    let (c, h, w) = image_dims(image, "dft_decompose")?;
    if h < 2 || w < 2 {
        return Err(Error::config(format!("image sides must be >= 2, got {h}x{w}")));
    }
    let hw = h * w;
    let x = image.data();
    let mut amp = vec![0.0; c * hw];
    let mut phase = vec![0.0; c * hw];
    let mut re = vec![0.0; hw];
    let mut im = vec![0.0; hw];
    for ch in 0..c {
        let base = ch * hw;
        if force_direct {
            let (r, i) = dft2_direct(&x[base..base + hw], h, w, -1);
            re.copy_from_slice(&r);
            im.copy_from_slice(&i);
        } else {
            re.copy_from_slice(&x[base..base + hw]);
            im.iter_mut().for_each(|v| *v = 0.0);
            fft2_inplace(&mut re, &mut im, h, w, -1);
        }
        for k in 0..hw {
            amp[base + k] = re[k].hypot(im[k]);
            phase[base + k] = im[k].atan2(re[k]);
        }
    }
    Ok(Spectrum {
        amplitude: Tensor::new(vec![c, h, w], amp)?,
        phase: Tensor::new(vec![c, h, w], phase)?,
    })
}

/// Rebuild an image from an amplitude and a phase array.
///
/// When both inputs are conjugate-(anti)symmetric the imaginary residue of the
/// inverse transform is verified to stay below `1e-4`; a larger residue on a
/// symmetric input signals a transform bug and is reported as an error. For
/// intentionally asymmetric inputs (e.g. raw generated amplitudes) the real
/// part is taken as-is, which implicitly averages the mirrored bins. Pass
/// `clamp` to clip the result into the valid `[0,1]` pixel range.
pub fn idft_recombine(amplitude: &Tensor, phase: &Tensor, clamp: bool) -> Result<Tensor> {
    let (c, h, w) = image_dims(amplitude, "idft_recombine")?;
    if phase.shape() != amplitude.shape() {
        return Err(Error::config(format!(
            "idft_recombine: amplitude {:?} vs phase {:?}",
            amplitude.shape(),
            phase.shape()
        )));
    }
    if amplitude.data().iter().any(|&v| v < 0.0) {
        return Err(Error::contract("idft_recombine: amplitude must be non-negative"));
    }
    let symmetric = amplitude_symmetry_residual(amplitude)? < 1e-5
        && phase_antisymmetry_residual(phase, amplitude, 1e-8)? < 1e-5;

    let hw = h * w;
    let a = amplitude.data();
    let p = phase.data();
    let mut out = vec![0.0; c * hw];
    let mut re = vec![0.0; hw];
    let mut im = vec![0.0; hw];
    let scale = 1.0 / hw as f64;
    for ch in 0..c {
        let base = ch * hw;
        for k in 0..hw {
            let (sin, cos) = p[base + k].sin_cos();
            re[k] = a[base + k] * cos;
            im[k] = a[base + k] * sin;
        }
        fft2_inplace(&mut re, &mut im, h, w, 1);
        if symmetric {
            let max_im = im.iter().map(|v| (v * scale).abs()).fold(0.0, f64::max);
            if max_im >= 1e-4 {
                return Err(Error::numerical(format!(
                    "imaginary residue {max_im:.3e} on a symmetric spectrum (channel {ch})"
                )));
            }
        }
        for k in 0..hw {
            let v = re[k] * scale;
            out[base + k] = if clamp { v.clamp(0.0, 1.0) } else { v };
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// `λ·a_other + (1-λ)·a_primary`, elementwise.
pub fn mix_amplitudes(a_primary: &Tensor, a_other: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::contract(format!("lambda must lie in [0,1], got {lambda}")));
    }
    if a_primary.shape() != a_other.shape() {
        return Err(Error::contract(format!(
            "mix_amplitudes: shape {:?} vs {:?}",
            a_primary.shape(),
            a_other.shape()
        )));
    }
    if a_primary.data().iter().any(|&v| v < 0.0) || a_other.data().iter().any(|&v| v < 0.0) {
        return Err(Error::contract("mix_amplitudes: amplitudes must be non-negative"));
    }
    let data = a_primary
        .data()
        .iter()
        .zip(a_other.data())
        .map(|(p, o)| lambda * o + (1.0 - lambda) * p)
        .collect();
    Tensor::new(a_primary.shape().to_vec(), data)
}

/// Mirror the non-redundant half back into a full `[C, H, W]` amplitude:
/// columns above `W/2` are filled from `A((H-u) mod H, W-v)`.
pub fn expand_half_amplitude(half: &HalfAmplitude, height: usize, width: usize) -> Result<Tensor> {
    let (c, hh, wh) = image_dims(half.tensor(), "expand_half_amplitude")?;
    if hh != height || wh != width / 2 + 1 {
        return Err(Error::contract(format!(
            "expand_half_amplitude: half is [{c},{hh},{wh}], expected [{c},{height},{}]",
            width / 2 + 1
        )));
    }
    let hv = half.tensor().data();
    let mut out = vec![0.0; c * height * width];
    for ch in 0..c {
        for u in 0..height {
            for v in 0..width {
                let (su, sv) = if v < wh {
                    (u, v)
                } else {
                    ((height - u) % height, width - v)
                };
                out[(ch * height + u) * width + v] = hv[(ch * height + su) * wh + sv];
            }
        }
    }
    Tensor::new(vec![c, height, width], out)
}

/// Keep the first `W/2+1` columns of a conjugate-symmetric amplitude.
pub fn extract_half(full: &Tensor) -> Result<HalfAmplitude> {
    let (c, h, w) = image_dims(full, "extract_half")?;
    let residual = amplitude_symmetry_residual(full)?;
    if residual > 1e-5 {
        return Err(Error::contract(format!(
            "extract_half: amplitude asymmetric by {residual:.3e}"
        )));
    }
    let wh = w / 2 + 1;
    let fv = full.data();
    let mut out = vec![0.0; c * h * wh];
    for ch in 0..c {
        for u in 0..h {
            for v in 0..wh {
                out[(ch * h + u) * wh + v] = fv[(ch * h + u) * w + v];
            }
        }
    }
    HalfAmplitude::new(Tensor::new(vec![c, h, wh], out)?)
}

/// Largest deviation from `A(u,v) == A((H-u) mod H, (W-v) mod W)`.
pub fn amplitude_symmetry_residual(amplitude: &Tensor) -> Result<f64> {
    let (c, h, w) = image_dims(amplitude, "amplitude_symmetry_residual")?;
    let a = amplitude.data();
    let mut worst: f64 = 0.0;
    for ch in 0..c {
        for u in 0..h {
            for v in 0..w {
                let mu = (h - u) % h;
                let mv = (w - v) % w;
                let d = (a[(ch * h + u) * w + v] - a[(ch * h + mu) * w + mv]).abs();
                worst = worst.max(d);
            }
        }
    }
    Ok(worst)
}

/// Largest deviation from `P(u,v) == -P((H-u) mod H, (W-v) mod W)` (angles
/// compared modulo 2π), measured only where the amplitude exceeds `floor`.
pub fn phase_antisymmetry_residual(phase: &Tensor, amplitude: &Tensor, floor: f64) -> Result<f64> {
    let (c, h, w) = image_dims(phase, "phase_antisymmetry_residual")?;
    if amplitude.shape() != phase.shape() {
        return Err(Error::config(format!(
            "phase_antisymmetry_residual: phase {:?} vs amplitude {:?}",
            phase.shape(),
            amplitude.shape()
        )));
    }
    let p = phase.data();
    let a = amplitude.data();
    let mut worst: f64 = 0.0;
    for ch in 0..c {
        for u in 0..h {
            for v in 0..w {
                let i = (ch * h + u) * w + v;
                let j = (ch * h + (h - u) % h) * w + (w - v) % w;
                if a[i] > floor && a[j] > floor {
                    worst = worst.max(wrap_angle(p[i] + p[j]).abs());
                }
            }
        }
    }
    Ok(worst)
}

/// Smallest-magnitude representative of an angle, in `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut t = theta % two_pi;
    if t > std::f64::consts::PI {
        t -= two_pi;
    } else if t <= -std::f64::consts::PI {
        t += two_pi;
    }
    t
}

// ---------------------------------------------------------------------------
// transforms
// ---------------------------------------------------------------------------

/// Unscaled 2-D transform, in place over row-major `[H, W]` data.
/// `sign = -1` is the forward transform, `sign = +1` the unscaled inverse.
/// Power-of-two lines go through radix-2 butterflies, anything else through
/// the direct per-line sum.
pub(crate) fn fft2_inplace(re: &mut [f64], im: &mut [f64], h: usize, w: usize, sign: i32) {
    debug_assert_eq!(re.len(), h * w);
    for row in 0..h {
        line_transform(&mut re[row * w..(row + 1) * w], &mut im[row * w..(row + 1) * w], sign);
    }
    let mut cre = vec![0.0; h];
    let mut cim = vec![0.0; h];
    for col in 0..w {
        for row in 0..h {
            cre[row] = re[row * w + col];
            cim[row] = im[row * w + col];
        }
        line_transform(&mut cre, &mut cim, sign);
        for row in 0..h {
            re[row * w + col] = cre[row];
            im[row * w + col] = cim[row];
        }
    }
}

fn line_transform(re: &mut [f64], im: &mut [f64], sign: i32) {
    if re.len().is_power_of_two() {
        fft1d_pow2(re, im, sign);
    } else {
        dft1d_direct(re, im, sign);
    }
}

fn fft1d_pow2(re: &mut [f64], im: &mut [f64], sign: i32) {
    let n = re.len();
    if n <= 1 {
        return;
    }
    // bit-reversal permutation
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sgn = sign as f64;
    let mut len = 2;
    while len <= n {
        let ang = sgn * 2.0 * std::f64::consts::PI / len as f64;
        for start in (0..n).step_by(len) {
            for k in 0..len / 2 {
                let (ws, wc) = (ang * k as f64).sin_cos();
                let a = start + k;
                let b = start + k + len / 2;
                let tr = re[b] * wc - im[b] * ws;
                let ti = re[b] * ws + im[b] * wc;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
}

fn dft1d_direct(re: &mut [f64], im: &mut [f64], sign: i32) {
    let n = re.len();
    let sgn = sign as f64;
    let mut out_re = vec![0.0; n];
    let mut out_im = vec![0.0; n];
    for (u, (our, oui)) in out_re.iter_mut().zip(out_im.iter_mut()).enumerate() {
        let mut sr = 0.0;
        let mut si = 0.0;
        for a in 0..n {
            let ang = sgn * 2.0 * std::f64::consts::PI * (u * a) as f64 / n as f64;
            let (s, c) = ang.sin_cos();
            sr += re[a] * c - im[a] * s;
            si += re[a] * s + im[a] * c;
        }
        *our = sr;
        *oui = si;
    }
    re.copy_from_slice(&out_re);
    im.copy_from_slice(&out_im);
}

/// Full O((HW)²) double-sum transform of one real channel; the reference the
/// fast path is compared against.
pub(crate) fn dft2_direct(x: &[f64], h: usize, w: usize, sign: i32) -> (Vec<f64>, Vec<f64>) {
    let sgn = sign as f64;
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let mut sr = 0.0;
            let mut si = 0.0;
            for a in 0..h {
                for b in 0..w {
                    let ang = sgn
                        * 2.0
                        * std::f64::consts::PI
                        * (u as f64 * a as f64 / h as f64 + v as f64 * b as f64 / w as f64);
                    let (s, c) = ang.sin_cos();
                    sr += x[a * w + b] * c;
                    si += x[a * w + b] * s;
                }
            }
            re[u * w + v] = sr;
            im[u * w + v] = si;
        }
    }
    (re, im)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    #[test]
    fn constant_image_concentrates_at_dc() {
        let img = Tensor::full(vec![1, 2, 2], 1.0);
        let spec = dft_decompose(&img).unwrap();
        assert!((spec.amplitude.data()[0] - 4.0).abs() < 1e-12);
        for &v in &spec.amplitude.data()[1..] {
            assert!(v.abs() < 1e-12);
        }
        assert!(spec.phase.data()[0].abs() < 1e-12);
    }

    #[test]
    fn impulse_image_has_flat_unit_amplitude() {
        let mut data = vec![0.0; 4];
        data[0] = 1.0;
        let img = Tensor::new(vec![1, 2, 2], data).unwrap();
        let spec = dft_decompose(&img).unwrap();
        for &v in spec.amplitude.data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        for &v in spec.phase.data() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn real_images_have_symmetric_spectra() {
        let img = random_image(3, 8, 8, 7);
        let spec = dft_decompose(&img).unwrap();
        assert!(amplitude_symmetry_residual(&spec.amplitude).unwrap() < 1e-5);
        assert!(phase_antisymmetry_residual(&spec.phase, &spec.amplitude, 1e-8).unwrap() < 1e-5);
    }

    #[test]
    fn round_trip_recovers_image() {
        for seed in 0..5 {
            let img = random_image(3, 16, 16, seed);
            let spec = dft_decompose(&img).unwrap();
            let back = idft_recombine(&spec.amplitude, &spec.phase, false).unwrap();
            assert!(img.max_abs_diff(&back) < 1e-4);
        }
    }

    #[test]
    fn dc_only_spectrum_recombines_to_constant() {
        let mut amp = Tensor::zeros(vec![1, 2, 2]);
        amp.data_mut()[0] = 4.0;
        let phase = Tensor::zeros(vec![1, 2, 2]);
        let img = idft_recombine(&amp, &phase, false).unwrap();
        for &v in img.data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fast_and_direct_paths_agree() {
        for &(c, h, w, seed) in &[(1usize, 8usize, 8usize, 1u64), (2, 16, 12, 2), (1, 6, 10, 3)] {
            let img = random_image(c, h, w, seed);
            let fast = dft_decompose(&img).unwrap();
            let direct = dft_decompose_direct(&img).unwrap();
            assert!(
                fast.amplitude.max_abs_diff(&direct.amplitude) < 1e-8,
                "amplitude mismatch at {h}x{w}"
            );
        }
    }

    #[test]
    fn parseval_energy_identity_holds() {
        let img = random_image(2, 8, 8, 11);
        let spec = dft_decompose(&img).unwrap();
        let hw = 64.0;
        for ch in 0..2 {
            let e_freq: f64 = spec.amplitude.data()[ch * 64..(ch + 1) * 64]
                .iter()
                .map(|v| v * v)
                .sum();
            let e_pix: f64 = img.data()[ch * 64..(ch + 1) * 64].iter().map(|v| v * v).sum();
            assert!(((e_freq - hw * e_pix) / (hw * e_pix)).abs() < 1e-6);
        }
    }

    #[test]
    fn mix_amplitudes_endpoints_and_midpoint() {
        let a = Tensor::full(vec![1, 2, 2], 2.0);
        let b = Tensor::full(vec![1, 2, 2], 4.0);
        assert_eq!(mix_amplitudes(&a, &b, 0.0).unwrap().data(), a.data());
        assert_eq!(mix_amplitudes(&a, &b, 1.0).unwrap().data(), b.data());
        for &v in mix_amplitudes(&a, &b, 0.5).unwrap().data() {
            assert!((v - 3.0).abs() < 1e-15);
        }
        assert!(mix_amplitudes(&a, &b, 1.5).is_err());
        assert!(mix_amplitudes(&a, &b, -0.1).is_err());
    }

    #[test]
    fn swap_test_preserves_donor_phase() {
        // recombine amplitude of one image with phase of another; the phase of
        // the result must match the donor wherever energy is present
        let x1 = random_image(1, 4, 4, 21);
        let x2 = random_image(1, 4, 4, 22);
        let s1 = dft_decompose(&x1).unwrap();
        let s2 = dft_decompose(&x2).unwrap();
        let swapped = idft_recombine(&s1.amplitude, &s2.phase, false).unwrap();
        let re = dft_decompose(&swapped).unwrap();
        for k in 0..16 {
            if s1.amplitude.data()[k] > 1e-6 {
                let d = wrap_angle(re.phase.data()[k] - s2.phase.data()[k]).abs();
                assert!(d < 1e-3, "phase deviation {d} at bin {k}");
            }
        }
    }

    #[test]
    fn half_amplitude_round_trips() {
        // 2x2: every column is self-conjugate, expand is the identity
        let half = HalfAmplitude::new(
            Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        )
        .unwrap();
        let full = expand_half_amplitude(&half, 2, 2).unwrap();
        assert_eq!(full.data(), half.tensor().data());

        // 4x4: (1,1) mirrors to (3,3)
        let mut data = vec![0.0; 4 * 3];
        data[1 * 3 + 1] = 7.0;
        let half = HalfAmplitude::new(Tensor::new(vec![1, 4, 3], data).unwrap()).unwrap();
        let full = expand_half_amplitude(&half, 4, 4).unwrap();
        assert_eq!(full.data()[1 * 4 + 1], 7.0);
        assert_eq!(full.data()[3 * 4 + 3], 7.0);

        // extract(expand(h)) == h exactly, and expand(extract(full)) == full
        let img = random_image(2, 8, 8, 33);
        let spec = dft_decompose(&img).unwrap();
        let half = extract_half(&spec.amplitude).unwrap();
        let full = expand_half_amplitude(&half, 8, 8).unwrap();
        assert!(full.max_abs_diff(&spec.amplitude) < 1e-6);
        let half2 = extract_half(&full).unwrap();
        assert_eq!(half.tensor().data(), half2.tensor().data());
    }

    #[test]
    fn extract_half_rejects_asymmetric_input() {
        let mut amp = Tensor::zeros(vec![1, 4, 4]);
        amp.data_mut()[1] = 1.0; // (0,1) without its mirror at (0,3)
        assert!(matches!(
            extract_half(&amp),
            Err(crate::error::Error::Contract(_))
        ));
    }

    #[test]
    fn zero_half_expands_to_zero() {
        let half = HalfAmplitude::new(Tensor::zeros(vec![1, 4, 3])).unwrap();
        let full = expand_half_amplitude(&half, 4, 4).unwrap();
        assert!(full.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn extract_half_matches_oracle_columns() {
        // brute-force DFT oracle, written from the definition
        let img = random_image(1, 4, 4, 44);
        let x = img.data();
        let mut oracle = vec![0.0; 16];
        for u in 0..4 {
            for v in 0..4 {
                let mut sr = 0.0;
                let mut si = 0.0;
                for a in 0..4 {
                    for b in 0..4 {
                        let ang = -2.0 * std::f64::consts::PI
                            * ((u * a) as f64 / 4.0 + (v * b) as f64 / 4.0);
                        sr += x[a * 4 + b] * ang.cos();
                        si += x[a * 4 + b] * ang.sin();
                    }
                }
                oracle[u * 4 + v] = sr.hypot(si);
            }
        }
        let spec = dft_decompose(&img).unwrap();
        let half = extract_half(&spec.amplitude).unwrap();
        for u in 0..4 {
            for v in 0..3 {
                let got = half.tensor().data()[u * 3 + v];
                assert!((got - oracle[u * 4 + v]).abs() < 1e-8);
            }
        }
    }
}
