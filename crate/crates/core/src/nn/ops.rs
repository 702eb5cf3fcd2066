//! Value-level numerical kernels. The tape ops in `tape.rs` reuse these where
//! the computation is shared.

use super::{fl, NnError, Real, Tensor};

/// `C = op(A) · op(B)` with optional transposes, row-major.
pub(crate) fn gemm<F: Real>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    ta: bool,
    tb: bool,
) -> Result<Tensor<F>, NnError> {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let (m, ka) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    if ka != kb {
        return Err(NnError::ShapeMismatch(format!(
            "matmul inner dims {ka} vs {kb} (a {:?}, b {:?}, ta={ta}, tb={tb})",
            a.shape(),
            b.shape()
        )));
    }
    let k = ka;
    let mut out = vec![F::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    match (ta, tb) {
        (false, false) => {
            // c[i,j] += a[i,l] * b[l,j]; inner loop contiguous over j.
            for i in 0..m {
                let arow = &ad[i * k..(i + 1) * k];
                let crow = &mut out[i * n..(i + 1) * n];
                for (l, &av) in arow.iter().enumerate() {
                    let brow = &bd[l * n..(l + 1) * n];
                    for (c, &bv) in crow.iter_mut().zip(brow) {
                        *c += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            // c[i,j] = dot(a row i, b row j).
            for i in 0..m {
                let arow = &ad[i * k..(i + 1) * k];
                let crow = &mut out[i * n..(i + 1) * n];
                for (j, c) in crow.iter_mut().enumerate() {
                    let brow = &bd[j * k..(j + 1) * k];
                    let mut acc = F::zero();
                    for (&av, &bv) in arow.iter().zip(brow) {
                        acc += av * bv;
                    }
                    *c = acc;
                }
            }
        }
        (true, false) => {
            // c[i,j] += a[l,i] * b[l,j]; inner loop contiguous over j.
            for l in 0..k {
                let arow = &ad[l * m..(l + 1) * m];
                let brow = &bd[l * n..(l + 1) * n];
                for (i, &av) in arow.iter().enumerate() {
                    let crow = &mut out[i * n..(i + 1) * n];
                    for (c, &bv) in crow.iter_mut().zip(brow) {
                        *c += av * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = F::zero();
                    for l in 0..k {
                        acc += ad[l * m + i] * bd[j * k + l];
                    }
                    out[i * n + j] = acc;
                }
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// Numerically stable softmax over a row prefix `[0, valid)`; entries past
/// `valid` are set to exact zero.
pub(crate) fn softmax_row_prefix<F: Real>(row: &mut [F], valid: usize) {
    debug_assert!(valid >= 1 && valid <= row.len());
    let mut max = row[0];
    for &v in &row[1..valid] {
        if v > max {
            max = v;
        }
    }
    let mut sum = F::zero();
    for v in &mut row[..valid] {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in &mut row[..valid] {
        *v = *v / sum;
    }
    for v in &mut row[valid..] {
        *v = F::zero();
    }
}

/// Row-wise softmax with max-subtraction. Errors on NaN input.
pub fn softmax_rows<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>, NnError> {
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(NnError::NaNInput);
    }
    let mut out = x.clone();
    let cols = out.cols();
    for i in 0..out.rows() {
        softmax_row_prefix(out.row_mut(i), cols);
    }
    Ok(out)
}

/// Normalizes each last-axis slice to mean 0 / population variance 1, then
/// applies the affine `gamma * x + beta`.
pub fn layer_norm<F: Real>(
    x: &Tensor<F>,
    gamma: &[F],
    beta: &[F],
    eps: F,
) -> Result<Tensor<F>, NnError> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(NnError::ShapeMismatch(format!(
            "layer_norm affine length {} / {} vs feature dim {d}",
            gamma.len(),
            beta.len()
        )));
    }
    let mut out = x.clone();
    let n_rows = out.len() / d;
    for i in 0..n_rows {
        let row = &mut out.data_mut()[i * d..(i + 1) * d];
        let (mean, inv_std) = row_moments(row, eps);
        for (v, (&g, &b)) in row.iter_mut().zip(gamma.iter().zip(beta)) {
            *v = g * ((*v - mean) * inv_std) + b;
        }
    }
    Ok(out)
}

/// Mean and `1 / sqrt(var + eps)` of one row (population variance).
pub(crate) fn row_moments<F: Real>(row: &[F], eps: F) -> (F, F) {
    let n = fl::<F>(row.len() as f64);
    let mean = row.iter().copied().sum::<F>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    (mean, F::one() / (var + eps).sqrt())
}

/// Single-head scaled dot-product attention: `softmax(Q·Kᵀ/√dk [+ causal]) · V`.
/// With `causal` set, position `i` attends only to positions `0..=i`.
pub fn scaled_dot_attention<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    causal: bool,
) -> Result<Tensor<F>, NnError> {
    if q.cols() != k.cols() {
        return Err(NnError::ShapeMismatch(format!(
            "query dim {} vs key dim {}",
            q.cols(),
            k.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(NnError::ShapeMismatch(format!(
            "key count {} vs value count {}",
            k.rows(),
            v.rows()
        )));
    }
    if causal && q.rows() != k.rows() {
        return Err(NnError::ShapeMismatch(
            "causal mask requires self-attention (|Q| == |K|)".into(),
        ));
    }
    let scale = F::one() / fl::<F>(q.cols() as f64).sqrt();
    let mut scores = gemm(q, k, false, true)?;
    let m = k.rows();
    for i in 0..scores.rows() {
        let row = scores.row_mut(i);
        for s in row.iter_mut() {
            *s = *s * scale;
        }
        let valid = if causal { i + 1 } else { m };
        softmax_row_prefix(row, valid);
    }
    gemm(&scores, v, false, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn softmax_symmetry() {
        let out = softmax_rows(&Tensor::<f64>::matrix(1, 2, vec![0.0, 0.0]).unwrap()).unwrap();
        assert_close(out.data(), &[0.5, 0.5], 1e-12);
    }

    #[test]
    fn softmax_exact_ratio() {
        let x = Tensor::<f64>::matrix(1, 2, vec![0.0, 3f64.ln()]).unwrap();
        let out = softmax_rows(&x).unwrap();
        assert_close(out.data(), &[0.25, 0.75], 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = Tensor::<f64>::matrix(1, 2, vec![1000.0, 1000.0]).unwrap();
        let out = softmax_rows(&x).unwrap();
        assert_close(out.data(), &[0.5, 0.5], 1e-12);
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = Tensor::<f64>::matrix(1, 2, vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(softmax_rows(&x), Err(NnError::NaNInput)));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let data: Vec<f32> = (0..40).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let out = softmax_rows(&Tensor::matrix(5, 8, data).unwrap()).unwrap();
            for i in 0..5 {
                let s: f32 = out.row(i).iter().sum();
                assert!((s - 1.0).abs() <= 1e-6);
                assert!(out.row(i).iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        let x = Tensor::<f64>::matrix(1, 2, vec![1.0, 3.0]).unwrap();
        let out = layer_norm(&x, &[1.0, 1.0], &[0.0, 0.0], 0.0).unwrap();
        assert_close(out.data(), &[-1.0, 1.0], 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::<f64>::matrix(1, 3, vec![4.0, 4.0, 4.0]).unwrap();
        let out = layer_norm(&x, &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        assert_close(out.data(), &[0.0, 0.0, 0.0], 1e-12);
    }

    #[test]
    fn layer_norm_affine_only() {
        let x = Tensor::<f64>::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let out = layer_norm(&x, &[0.0; 3], &[5.0; 3], 1e-5).unwrap();
        assert_close(out.data(), &[5.0, 5.0, 5.0], 1e-12);
    }

    #[test]
    fn attention_hand_computed_value() {
        let q = Tensor::<f64>::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let k = Tensor::<f64>::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = Tensor::<f64>::matrix(2, 2, vec![10.0, 0.0, 0.0, 10.0]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v, false).unwrap();
        // softmax(1/sqrt(2), 0) = (0.66983, 0.33017)
        assert_close(out.data(), &[6.698, 3.302], 1e-3);
    }

    #[test]
    fn attention_orthogonal_query_averages_values() {
        let q = Tensor::<f64>::matrix(1, 3, vec![0.0, 0.0, 1.0]).unwrap();
        let k = Tensor::<f64>::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let v = Tensor::<f64>::matrix(2, 2, vec![2.0, 4.0, 6.0, 8.0]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v, false).unwrap();
        assert_close(out.data(), &[4.0, 6.0], 1e-12);
    }

    #[test]
    fn causal_first_position_sees_only_itself() {
        let q = Tensor::<f64>::matrix(2, 2, vec![0.3, -0.9, 1.0, 0.5]).unwrap();
        let k = q.clone();
        let v = Tensor::<f64>::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v, true).unwrap();
        assert_close(&out.data()[..2], &[1.0, 2.0], 0.0);
    }

    #[test]
    fn attention_shape_mismatch() {
        let q = Tensor::<f64>::matrix(1, 3, vec![0.0; 3]).unwrap();
        let k = Tensor::<f64>::matrix(2, 2, vec![0.0; 4]).unwrap();
        let v = Tensor::<f64>::matrix(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(
            scaled_dot_attention(&q, &k, &v, false),
            Err(NnError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn gemm_transpose_flags_agree_with_explicit_transpose() {
        let a = Tensor::<f64>::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::<f64>::matrix(2, 3, vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let via_flag = gemm(&a, &b, false, true).unwrap();
        let via_transpose = gemm(&a, &b.transpose(), false, false).unwrap();
        assert_eq!(via_flag, via_transpose);

        let via_flag = gemm(&a, &b, true, false).unwrap();
        let via_transpose = gemm(&a.transpose(), &b, false, false).unwrap();
        assert_eq!(via_flag, via_transpose);
    }
}
