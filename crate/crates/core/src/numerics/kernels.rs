use super::{Matrix, NumericsError, Scalar};

/// Default epsilon added under the square root of RMS normalization.
pub const DEFAULT_NORM_EPS: f64 = 1e-6;

/// Dot product accumulated in `f64`.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.to_f64() * y.to_f64()).sum()
}

#[inline]
pub fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// Matrix product `a * b`.
///
/// Each output element is accumulated in `f64` over the inner index in
/// ascending order, so the result is independent of how rows are scheduled.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>, NumericsError> {
    if a.cols() != b.rows() {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (n, inner, m) = (a.rows(), a.cols(), b.cols());
    let mut out = Vec::with_capacity(n * m);
    let mut acc = vec![0.0f64; m];
    let bd = b.data();
    for i in 0..n {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = a.row(i);
        for k in 0..inner {
            let aik = arow[k].to_f64();
            let brow = &bd[k * m..(k + 1) * m];
            for (slot, bkj) in acc.iter_mut().zip(brow) {
                *slot += aik * bkj.to_f64();
            }
        }
        out.extend(acc.iter().map(|&v| T::from_f64(v)));
    }
    let out = Matrix::new(n, m, out)?;
    out.check_finite("matmul")?;
    Ok(out)
}

/// `gain_j * x_j / sqrt(mean(x^2) + eps)`.
pub fn rms_norm<T: Scalar>(x: &[T], gain: &[T], eps: f64) -> Result<Vec<T>, NumericsError> {
    if x.len() != gain.len() {
        return Err(NumericsError::LengthMismatch {
            op: "rms_norm",
            expected: gain.len(),
            found: x.len(),
        });
    }
    if x.is_empty() {
        return Ok(Vec::new());
    }
    let mean_sq = dot(x, x) / x.len() as f64;
    let inv = 1.0 / (mean_sq + eps).sqrt();
    let out: Vec<T> = x
        .iter()
        .zip(gain)
        .map(|(v, g)| T::from_f64(g.to_f64() * v.to_f64() * inv))
        .collect();
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(NumericsError::NonFinite { op: "rms_norm" })
    }
}

/// Max-subtracted softmax; the normalizing sum is accumulated in `f64`.
pub fn softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    let max = x
        .iter()
        .map(|v| v.to_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v.to_f64() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| T::from_f64(e / sum)).collect()
}

/// Rotary position embedding applied to every row of `x` at one position.
///
/// Rows are head vectors of width `head_dim = x.cols()`. Adjacent pairs
/// `(2j, 2j+1)` rotate by `position * base^(-2j / head_dim)`.
pub fn rope_rotate<T: Scalar>(
    x: &Matrix<T>,
    position: usize,
    base: f64,
) -> Result<Matrix<T>, NumericsError> {
    let head_dim = x.cols();
    if !head_dim.is_multiple_of(2) {
        return Err(NumericsError::OddHeadDim(head_dim));
    }
    let mut out = x.clone();
    for j in 0..head_dim / 2 {
        let theta = base.powf(-2.0 * j as f64 / head_dim as f64);
        let (sin, cos) = (position as f64 * theta).sin_cos();
        for r in 0..x.rows() {
            let a = x.get(r, 2 * j).to_f64();
            let b = x.get(r, 2 * j + 1).to_f64();
            out.set(r, 2 * j, T::from_f64(a * cos - b * sin));
            out.set(r, 2 * j + 1, T::from_f64(a * sin + b * cos));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    fn naive_product(a: &Matrix<f32>, b: &Matrix<f32>) -> Matrix<f32> {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0f64;
                for k in 0..a.cols() {
                    s += a.get(i, k) as f64 * b.get(k, j) as f64;
                }
                out.set(i, j, s as f32);
            }
        }
        out
    }

    #[test]
    fn scalar_product() {
        let a = Matrix::new(1, 1, vec![2.0f32]).unwrap();
        let b = Matrix::new(1, 1, vec![3.0f32]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn identity_is_neutral() {
        let mut rng = SeededRng::new(3);
        let m = rng.normal_matrix::<f32>(3, 4, 1.0);
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);
    }

    #[test]
    fn matches_triple_loop_exactly() {
        let mut rng = SeededRng::new(11);
        let a = rng.normal_matrix::<f32>(4, 5, 1.0);
        let b = rng.normal_matrix::<f32>(5, 3, 1.0);
        let fast = matmul(&a, &b).unwrap();
        assert_eq!(fast.max_abs_diff(&naive_product(&a, &b)), 0.0);
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let a = Matrix::<f32>::zeros(2, 3);
        let b = Matrix::<f32>::zeros(2, 3);
        assert!(matches!(
            matmul(&a, &b),
            Err(NumericsError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn matmul_flags_overflow() {
        let a = Matrix::new(1, 1, vec![f32::MAX]).unwrap();
        assert!(matches!(
            matmul(&a, &a),
            Err(NumericsError::NonFinite { .. })
        ));
    }

    #[test]
    fn associativity_on_random_chains() {
        let mut rng = SeededRng::new(5);
        for _ in 0..10 {
            let a = rng.normal_matrix::<f32>(8, 8, 0.5);
            let b = rng.normal_matrix::<f32>(8, 8, 0.5);
            let c = rng.normal_matrix::<f32>(8, 8, 0.5);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            assert!(left.max_abs_diff(&right) <= 1e-5);
        }
    }

    #[test]
    fn rms_norm_unit_input() {
        let y = rms_norm(&[1.0f32; 4], &[1.0; 4], 1e-12).unwrap();
        for v in y {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rms_norm_zero_input() {
        let y = rms_norm(&[0.0f32; 5], &[1.0; 5], DEFAULT_NORM_EPS).unwrap();
        assert_eq!(y, vec![0.0; 5]);
    }

    #[test]
    fn rms_norm_matches_f64_formula() {
        let mut rng = SeededRng::new(9);
        let x = rng.normal_matrix::<f32>(1, 16, 2.0).into_vec();
        let g = rng.normal_matrix::<f32>(1, 16, 1.0).into_vec();
        let y = rms_norm(&x, &g, DEFAULT_NORM_EPS).unwrap();
        let ms: f64 = x.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / 16.0;
        for j in 0..16 {
            let want = g[j] as f64 * x[j] as f64 / (ms + DEFAULT_NORM_EPS).sqrt();
            assert!((y[j] as f64 - want).abs() <= 1e-6);
        }
    }

    #[test]
    fn rms_norm_length_mismatch() {
        assert!(rms_norm(&[1.0f32; 3], &[1.0; 4], 1e-6).is_err());
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0f64, 0.0]), vec![0.5, 0.5]);
        let s = softmax(&[1000.0f64, 0.0]);
        assert!((s[0] - 1.0).abs() < 1e-12 && s[1].abs() < 1e-12);
        let mut rng = SeededRng::new(1);
        let x = rng.normal_matrix::<f32>(1, 8, 3.0).into_vec();
        let total: f64 = softmax(&x).iter().map(|v| *v as f64).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let mut rng = SeededRng::new(2);
        let q = rng.normal_matrix::<f32>(3, 8, 1.0);
        assert_eq!(rope_rotate(&q, 0, 10000.0).unwrap(), q);
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let mut rng = SeededRng::new(4);
        let q = rng.normal_matrix::<f32>(2, 8, 1.0);
        let r = rope_rotate(&q, 17, 10000.0).unwrap();
        for row in 0..2 {
            for j in 0..4 {
                let n0 = q.get(row, 2 * j).hypot(q.get(row, 2 * j + 1));
                let n1 = r.get(row, 2 * j).hypot(r.get(row, 2 * j + 1));
                assert!((n0 - n1).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn rope_closed_form_head_dim_4() {
        let q = Matrix::new(1, 4, vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let r = rope_rotate(&q, 1, 10000.0).unwrap();
        // theta_0 = 1, theta_1 = 10000^(-1/2) = 0.01
        let (s0, c0) = 1.0f64.sin_cos();
        let (s1, c1) = 0.01f64.sin_cos();
        let want = [
            1.0 * c0 - 2.0 * s0,
            1.0 * s0 + 2.0 * c0,
            3.0 * c1 - 4.0 * s1,
            3.0 * s1 + 4.0 * c1,
        ];
        for (got, want) in r.data().iter().zip(want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_odd_head_dim() {
        let q = Matrix::<f32>::zeros(1, 3);
        assert_eq!(
            rope_rotate(&q, 1, 10000.0),
            Err(NumericsError::OddHeadDim(3))
        );
    }
}
