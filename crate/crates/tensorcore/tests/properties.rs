use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensorcore::{grad_check, conv2d_output_extent, Adam, ParamSet, Tape, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let (a, b) = (random(&[m, k], seed), random(&[k, n], seed ^ 1));
        let tape = Tape::new();
        let c = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap().value();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|t| a.data()[i * k + t] * b.data()[t * n + j]).sum();
                prop_assert!((c.data()[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_transpose_is_the_adjoint_of_conv(
        c in 1usize..3, f in 1usize..3, kh in 1usize..4, stride in 1usize..3, pad in 0usize..2, h in 3usize..7, seed in any::<u64>()
    ) {
        prop_assume!(pad < kh);
        let Some(ho) = conv2d_output_extent(h, kh, stride, pad) else { return Ok(()) };
        // Only sizes the transpose maps back onto exactly.
        prop_assume!((ho - 1) * stride + kh == h + 2 * pad);
        let (x, k, y) = (random(&[2, c, h, h], seed), random(&[f, c, kh, kh], seed ^ 2), random(&[2, f, ho, ho], seed ^ 3));
        let tape = Tape::new();
        let ax = tape.constant(x.clone()).conv2d(tape.constant(k.clone()), stride, pad).unwrap().value();
        let aty = tape.constant(y.clone()).conv_transpose2d(tape.constant(k), stride, pad).unwrap().value();
        prop_assert_eq!(aty.shape(), x.shape());
        prop_assert!((dot(&ax, &y) - dot(&x, &aty)).abs() < 1e-10);
    }

    #[test]
    fn sorted_rows_are_ordered_permutations(rows in 1usize..4, n in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Coarse values so ties occur.
        let x = Tensor::from_fn(vec![rows, n], |_| rng.random_range(0..4) as f64);
        let tape = Tape::new();
        let (sorted, perms) = tape.constant(x.clone()).sort_rows().unwrap();
        let s = sorted.value();
        for r in 0..rows {
            let row = &s.data()[r * n..(r + 1) * n];
            prop_assert!(row.windows(2).all(|w| w[0] <= w[1]));
            let mut seen = perms[r].clone();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            for (j, &p) in perms[r].iter().enumerate() {
                prop_assert_eq!(row[j], x.data()[r * n + p]);
                // Stable: equal values keep their input order.
                if j > 0 && row[j] == row[j - 1] {
                    prop_assert!(perms[r][j - 1] < p);
                }
            }
        }
    }

    #[test]
    fn composed_gradients_match_finite_differences(rows in 1usize..4, cols in 2usize..5, seed in any::<u64>()) {
        let x = random(&[rows, cols], seed);
        let w = random(&[cols, 3], seed ^ 5);
        let report = grad_check(
            |v| {
                let t = v.tape();
                let h = v.matmul(t.constant(w.clone()))?.sigmoid();
                let both = tensorcore::Var::concat(&[h, v.square()], 1)?;
                let (sorted, _) = both.sort_rows()?;
                Ok(sorted.narrow(1, 1, 2)?.transpose()?.sum_axis(0)?.exp().sum())
            },
            &x,
            1e-6,
        );
        prop_assert!(report.max_rel_error < 1e-6, "{:?}", report);
    }

    #[test]
    fn max_pool_gradient_goes_to_the_window_maximum(seed in any::<u64>()) {
        let x = random(&[1, 2, 4, 4], seed);
        let tape = Tape::new();
        let v = tape.param(x.clone());
        let y = v.max_pool2d(2).unwrap();
        let grads = tape.backward(y.sum()).unwrap();
        let g = grads.get(v).unwrap();
        let mut ones = 0;
        for c in 0..2 {
            for by in 0..2 {
                for bx in 0..2 {
                    let idx: Vec<usize> = (0..4).map(|i| c * 16 + (2 * by + i / 2) * 4 + 2 * bx + i % 2).collect();
                    let best = *idx.iter().max_by(|&&a, &&b| x.data()[a].total_cmp(&x.data()[b])).unwrap();
                    for &i in &idx {
                        prop_assert_eq!(g.data()[i], if i == best { 1.0 } else { 0.0 });
                    }
                    ones += 1;
                }
            }
        }
        prop_assert_eq!(ones, 8);
    }

    #[test]
    fn first_adam_step_moves_each_coordinate_by_lr(g in proptest::collection::vec(-5.0f64..5.0, 1..8)) {
        prop_assume!(g.iter().all(|v| v.abs() > 1e-3));
        let mut params = ParamSet::new();
        let id = params.add("p", Tensor::zeros(vec![g.len()]));
        let mut adam = Adam::new(&params, 0.01);
        adam.step(&mut params, &[Tensor::new(vec![g.len()], g.clone()).unwrap()]).unwrap();
        // Bias-corrected moments equal g and g^2 after one step.
        for (p, gi) in params.get(id).data().iter().zip(&g) {
            prop_assert!((p + 0.01 * gi / (gi.abs() + 1e-8)).abs() < 1e-12);
        }
    }
}
