//! Central finite differences for validating reverse-mode gradients.

use crate::error::{Error, Result};

use super::Tensor;

/// Central-difference gradient of a scalar function at `point`:
/// `(f(p + δe_i) - f(p - δe_i)) / (2δ)` per coordinate.
pub fn finite_difference_gradient<F>(mut f: F, point: &Tensor, step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if step <= 0.0 {
        return Err(Error::contract(format!("step must be positive, got {step}")));
    }
    let mut grad = vec![0.0; point.len()];
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite probe at coordinate {i}: f+={plus}, f-={minus}"
            )));
        }
        grad[i] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// Finite differences restricted to selected coordinates, for parameters too
/// large to probe exhaustively. Returns `(index, estimate)` pairs.
pub fn finite_difference_subset<F>(
    mut f: F,
    point: &Tensor,
    step: f64,
    coords: &[usize],
) -> Result<Vec<(usize, f64)>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if step <= 0.0 {
        return Err(Error::contract(format!("step must be positive, got {step}")));
    }
    let mut out = Vec::with_capacity(coords.len());
    let mut probe = point.clone();
    for &i in coords {
        if i >= point.len() {
            return Err(Error::contract(format!(
                "coordinate {i} out of range for {} elements",
                point.len()
            )));
        }
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite probe at coordinate {i}: f+={plus}, f-={minus}"
            )));
        }
        out.push((i, (plus - minus) / (2.0 * step)));
    }
    Ok(out)
}

/// Scale-relative disagreement between two gradient vectors: the largest
/// absolute difference divided by the largest magnitude present (or 1 when
/// both vectors are tiny).
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let scale = a
        .iter()
        .chain(b.iter())
        .map(|v| v.abs())
        .fold(0.0, f64::max)
        .max(1e-8);
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_sum_is_ones() {
        let point = Tensor::new(vec![4], vec![0.3, -1.0, 2.0, 7.5]).unwrap();
        let g = finite_difference_gradient(|t| Ok(t.data().iter().sum()), &point, 1e-3).unwrap();
        for v in g {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_of_half_norm_squared_is_point() {
        let point = Tensor::new(vec![3], vec![0.4, -0.9, 1.7]).unwrap();
        let g = finite_difference_gradient(
            |t| Ok(0.5 * t.data().iter().map(|v| v * v).sum::<f64>()),
            &point,
            1e-3,
        )
        .unwrap();
        for (a, b) in g.iter().zip(point.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn ce_of_softmax_matches_analytic() {
        // f(z) = -log softmax(z)[0] at z = [1, 0]
        let point = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let f = |t: &Tensor| -> Result<f64> {
            let z = t.data();
            let m = z[0].max(z[1]);
            let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
            Ok(lse - z[0])
        };
        let g = finite_difference_gradient(f, &point, 1e-3).unwrap();
        let p0 = 1.0f64.exp() / (1.0f64.exp() + 1.0);
        assert!((g[0] - (p0 - 1.0)).abs() < 1e-5);
        assert!((g[1] - (1.0 - p0)).abs() < 1e-5);
    }

    #[test]
    fn non_finite_probe_reports_coordinate() {
        let point = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let err = finite_difference_gradient(
            |t| {
                let v = t.data()[1].ln();
                Ok(v)
            },
            &point,
            2.0,
        )
        .unwrap_err();
        match err {
            Error::Numerical(msg) => assert!(msg.contains("coordinate 1"), "{msg}"),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
