//! Plain-slice numerical kernels shared by the tape and by callers that
//! only need forward values.

use crate::error::{AdcError, Result};
use crate::nn::params::ParamMatrix;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `W x + b`.
pub fn linear_forward(w: &ParamMatrix, b: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != w.cols {
        return Err(AdcError::shape(
            format!("linear '{}' input", w.name),
            format!("W {} needs x of length {}", w.shape_str(), w.cols),
            format!("x of length {}", x.len()),
        ));
    }
    if b.len() != w.rows {
        return Err(AdcError::shape(
            format!("linear '{}' bias", w.name),
            format!("W {} needs b of length {}", w.shape_str(), w.rows),
            format!("b of length {}", b.len()),
        ));
    }
    let mut y = matvec(w, x);
    y.iter_mut().zip(b).for_each(|(y, b)| *y += b);
    Ok(y)
}

pub(crate) fn matvec(w: &ParamMatrix, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.cols, x.len());
    w.values
        .chunks_exact(w.cols.max(1))
        .take(w.rows)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(AdcError::shape("softmax", "length >= 1", "length 0"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `log(sum(exp(z)))` with max subtraction.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Normalized values `(x - mean) / sqrt(var + eps)` and the inverse std.
pub(crate) fn normalize(x: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    (x.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    if gain.len() != x.len() || bias.len() != x.len() {
        return Err(AdcError::shape(
            "layer_norm",
            format!("gain and bias of length {}", x.len()),
            format!("gain {} / bias {}", gain.len(), bias.len()),
        ));
    }
    if x.is_empty() {
        return Ok(Vec::new());
    }
    let (normed, _) = normalize(x, eps);
    Ok(normed
        .iter()
        .zip(gain)
        .zip(bias)
        .map(|((n, g), b)| g * n + b)
        .collect())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = norm(a);
    let nb = norm(b);
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat(rows: usize, cols: usize, v: &[f64]) -> ParamMatrix {
        ParamMatrix::from_values("w", rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn linear_zero_and_identity() {
        let w = mat(3, 3, &[0.0; 9]);
        assert_eq!(linear_forward(&w, &[0.0; 3], &[4.0, 5.0, 6.0]).unwrap(), vec![0.0; 3]);
        let eye = mat(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(
            linear_forward(&eye, &[0.0; 3], &[1.0, 2.0, 3.0]).unwrap(),
            vec![1.0, 2.0, 3.0]
        );
    }

    #[test]
    fn linear_hand_example() {
        let w = mat(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(linear_forward(&w, &[1.0, 1.0], &[1.0, 1.0]).unwrap(), vec![4.0, 8.0]);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let w = mat(2, 3, &[0.0; 6]);
        let err = linear_forward(&w, &[0.0; 2], &[1.0, 2.0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("length 2"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        p.iter().for_each(|v| assert!((v - 1.0 / 3.0).abs() < 1e-15));
        for c in [-7.5, 0.0, 3.0, 800.0] {
            let p = softmax(&[c, c + 2f64.ln()]).unwrap();
            assert!((p[0] - 1.0 / 3.0).abs() < 1e-12);
            assert!((p[1] - 2.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(softmax(&[5.0]).unwrap(), vec![1.0]);
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let z = layer_norm(&[0.0; 4], &[1.0; 4], &[0.0; 4], LAYER_NORM_EPS).unwrap();
        assert_eq!(z, vec![0.0; 4]);
        let y = layer_norm(&[1.0, -1.0], &[1.0; 2], &[0.0; 2], 1e-15).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-12 && (y[1] + 1.0).abs() < 1e-12);
        let bias = [0.3, -0.2, 0.9];
        let y = layer_norm(&[2.5; 3], &[1.7; 3], &bias, LAYER_NORM_EPS).unwrap();
        assert_eq!(y, bias.to_vec());
        assert!(layer_norm(&[1.0, 2.0], &[1.0], &[0.0, 0.0], 1e-5).is_err());
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(
            logits in prop::collection::vec(-20.0f64..20.0, 1..12),
            c in -50.0f64..50.0,
        ) {
            let a = softmax(&logits).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|z| z + c).collect();
            let b = softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(a.iter().all(|p| *p > 0.0));
        }

        #[test]
        fn layer_norm_has_zero_mean(x in prop::collection::vec(-10.0f64..10.0, 2..16)) {
            let spread = x.iter().cloned().fold(f64::MIN, f64::max)
                - x.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-3);
            let n = x.len();
            let y = layer_norm(&x, &vec![1.0; n], &vec![0.0; n], LAYER_NORM_EPS).unwrap();
            let mean = y.iter().sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-9);
        }
    }
}
