//! Finite-difference verification of tape gradients.

use super::{Real, Tape, Tensor, Var};

/// Compares the tape gradient of a scalar-valued program against central
/// finite differences, elementwise over `x`, returning the maximum relative
/// error `|a - b| / max(|a|, |b|, 1e-8)`. Run with `F = f64`.
pub fn grad_check<F: Real>(
    f: impl Fn(&mut Tape<F>, Var) -> Var,
    x: &Tensor<F>,
    h: f64,
) -> f64 {
    let mut tape = Tape::new();
    let x_var = tape.leaf(x.clone());
    let y = f(&mut tape, x_var);
    assert_eq!(tape.value(y).len(), 1, "grad_check needs a scalar output");
    let grads = tape.backward(y);
    let analytic = grads[x_var.index()]
        .as_ref()
        .expect("output must depend on x")
        .clone();

    let eval = |probe: &Tensor<F>| -> f64 {
        let mut tape = Tape::new();
        let v = tape.leaf(probe.clone());
        let y = f(&mut tape, v);
        tape.value(y).scalar().to_f64().expect("finite loss")
    };

    let step = F::from_f64(h).expect("finite step");
    let mut max_rel = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] = plus.data()[i] + step;
        let mut minus = x.clone();
        minus.data_mut()[i] = minus.data()[i] - step;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let a = analytic.data()[i].to_f64().expect("finite gradient");
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::super::fl;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    fn sum_all(tape: &mut Tape<f64>, v: Var) -> Var {
        let cols = tape.value(v).cols();
        let rows = tape.value(v).rows();
        let ones_c = tape.leaf(Tensor::matrix(cols, 1, vec![1.0; cols]).unwrap());
        let summed = tape.matmul(v, ones_c, false, false).unwrap();
        let ones_r = tape.leaf(Tensor::matrix(rows, 1, vec![1.0; rows]).unwrap());
        tape.matmul(summed, ones_r, true, false).unwrap()
    }

    #[test]
    fn linear_sum_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(3, 4, &mut rng);
        let err = grad_check(sum_all, &x, 1e-5);
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn softmax_square_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(3, 5, &mut rng);
        let err = grad_check(
            |tape, v| {
                let y = tape.softmax_rows(v);
                let sq = tape.matmul(y, y, false, true).unwrap();
                // trace of y·yᵀ = sum of squares of each row dotted with itself;
                // sum all entries instead, still a smooth scalar in y.
                sum_all(tape, sq)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn every_primitive_passes_over_five_seeds() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_tensor(4, 6, &mut rng);

            // matmul, both transpose flags
            let w = random_tensor(6, 3, &mut rng);
            let err = grad_check(
                |tape, v| {
                    let wv = tape.leaf(w.clone());
                    let y = tape.matmul(v, wv, false, false).unwrap();
                    sum_all(tape, y)
                },
                &x,
                1e-5,
            );
            assert!(err < 1e-4, "matmul seed {seed}: {err}");

            let wt = random_tensor(3, 6, &mut rng);
            let err = grad_check(
                |tape, v| {
                    let wv = tape.leaf(wt.clone());
                    let y = tape.matmul(v, wv, false, true).unwrap();
                    let z = tape.matmul(y, y, true, false).unwrap();
                    sum_all(tape, z)
                },
                &x,
                1e-5,
            );
            assert!(err < 1e-4, "matmul-t seed {seed}: {err}");

            // add + bias + scale + relu + mul_const
            let bias = random_tensor(1, 6, &mut rng);
            let mask: Vec<f64> = (0..24).map(|_| if rng.gen_bool(0.8) { 1.25 } else { 0.0 }).collect();
            let err = grad_check(
                |tape, v| {
                    let b = tape.leaf(bias.clone());
                    let vb = tape.add_bias(v, b).unwrap();
                    let doubled = tape.add(vb, v).unwrap();
                    let scaled = tape.scale(doubled, fl(0.7));
                    let masked = tape.mul_const(scaled, mask.clone()).unwrap();
                    let r = tape.relu(masked);
                    sum_all(tape, r)
                },
                &x,
                1e-5,
            );
            assert!(err < 1e-4, "elementwise seed {seed}: {err}");

            // layer_norm
            let gamma = random_tensor(1, 6, &mut rng);
            let beta = random_tensor(1, 6, &mut rng);
            let err = grad_check(
                |tape, v| {
                    let g = tape.leaf(gamma.clone());
                    let b = tape.leaf(beta.clone());
                    let y = tape.layer_norm(v, g, b, 1e-5).unwrap();
                    let sq = tape.matmul(y, y, false, true).unwrap();
                    sum_all(tape, sq)
                },
                &x,
                1e-5,
            );
            assert!(err < 1e-4, "layer_norm seed {seed}: {err}");

            // l2 normalize
            let err = grad_check(
                |tape, v| {
                    let y = tape.l2_normalize_rows(v, fl(1e-12));
                    let w = tape.leaf(random_tensor(6, 1, &mut ChaCha8Rng::seed_from_u64(seed + 99)));
                    let z = tape.matmul(y, w, false, false).unwrap();
                    let zz = tape.matmul(z, z, true, false).unwrap();
                    sum_all(tape, zz)
                },
                &x,
                1e-5,
            );
            assert!(err < 1e-4, "l2norm seed {seed}: {err}");

            // embedding mean gather
            let ids = vec![vec![0u32, 2], vec![1], vec![3, 3, 1]];
            let err = grad_check(
                |tape, v| {
                    let pooled = tape.embedding_mean(v, ids.clone()).unwrap();
                    let sq = tape.matmul(pooled, pooled, false, true).unwrap();
                    sum_all(tape, sq)
                },
                &x,
                1e-5,
            );
            assert!(err < 1e-4, "embedding seed {seed}: {err}");

            // concat + slice + gather + transpose
            let err = grad_check(
                |tape, v| {
                    let top = tape.slice_rows(v, 0, 2).unwrap();
                    let bottom = tape.slice_rows(v, 2, 2).unwrap();
                    let swapped = tape.concat_rows(&[bottom, top]).unwrap();
                    let shuffled = tape.gather_rows(swapped, vec![3, 1, 1, 0]).unwrap();
                    let t = tape.transpose(shuffled);
                    let prod = tape.matmul(t, v, false, false).unwrap();
                    sum_all(tape, prod)
                },
                &x,
                1e-5,
            );
            assert!(err < 1e-4, "slice/concat seed {seed}: {err}");

            // multi-head attention, causal and not, gradients through q/k/v
            for causal in [false, true] {
                let kk = random_tensor(4, 6, &mut rng);
                let vv = random_tensor(4, 6, &mut rng);
                let err = grad_check(
                    |tape, q| {
                        let k = tape.leaf(kk.clone());
                        let v = tape.leaf(vv.clone());
                        let o = tape.multi_head_attention(q, k, v, 2, causal).unwrap();
                        let sq = tape.matmul(o, o, false, true).unwrap();
                        sum_all(tape, sq)
                    },
                    &x,
                    1e-5,
                );
                assert!(err < 1e-4, "attention causal={causal} seed {seed}: {err}");

                let qq = random_tensor(4, 6, &mut rng);
                let err = grad_check(
                    |tape, kv| {
                        let q = tape.leaf(qq.clone());
                        let o = tape.multi_head_attention(q, kv, kv, 3, causal).unwrap();
                        let sq = tape.matmul(o, o, false, true).unwrap();
                        sum_all(tape, sq)
                    },
                    &x,
                    1e-5,
                );
                assert!(err < 1e-4, "attention kv causal={causal} seed {seed}: {err}");
            }

            // softmax cross-entropy
            let targets = vec![1usize, 4, 0, 3];
            let err = grad_check(
                |tape, v| tape.softmax_cross_entropy(v, &targets).unwrap(),
                &x,
                1e-5,
            );
            assert!(err < 1e-4, "xent seed {seed}: {err}");
        }
    }

    #[test]
    fn causal_attention_ignores_future_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = random_tensor(5, 4, &mut rng);
        let k = random_tensor(5, 4, &mut rng);
        let v = random_tensor(5, 4, &mut rng);

        let run = |k: &Tensor<f64>, v: &Tensor<f64>| {
            let mut tape = Tape::new();
            let qv = tape.leaf(q.clone());
            let kv = tape.leaf(k.clone());
            let vv = tape.leaf(v.clone());
            let out = tape.multi_head_attention(qv, kv, vv, 2, true).unwrap();
            tape.value(out).clone()
        };

        let base = run(&k, &v);
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        // Perturb position 3; outputs at positions 0..=2 must be bitwise equal.
        for j in 0..4 {
            k2.row_mut(3)[j] += 10.0;
            v2.row_mut(3)[j] -= 5.0;
        }
        let perturbed = run(&k2, &v2);
        for pos in 0..3 {
            assert_eq!(base.row(pos), perturbed.row(pos), "position {pos} leaked");
        }
        assert_ne!(base.row(3), perturbed.row(3));
    }
}
