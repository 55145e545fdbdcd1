use counterseg::clustering::{sinkhorn, sinkhorn_kmeans, KMeansConfig};
use counterseg::compositor::alpha_blend;
use counterseg::divergence::{brute_force_wasserstein, ebsw, sample_slices, sliced_wasserstein, weighted_mean, Energy};
use counterseg::evalinfer::{aucroc, average_precision, iou, sliding_window_infer, WindowConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensorcore::{Tape, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-2.0..2.0))
}

fn sw(x: &Tensor<f64>, y: &Tensor<f64>, p: u32, slice_seed: u64) -> f64 {
    let slices = sample_slices(x.shape()[1], 64, slice_seed).unwrap();
    let tape = Tape::new();
    sliced_wasserstein(tape.constant(x.clone()), tape.constant(y.clone()), p, &slices).unwrap().item()
}

/// Largest deviation of any row or column sum from its uniform target.
fn marginal_error(plan: &Tensor<f64>) -> f64 {
    let (n, k) = (plan.shape()[0], plan.shape()[1]);
    let rows = (0..n).map(|i| (plan.data()[i * k..(i + 1) * k].iter().sum::<f64>() - 1.0 / n as f64).abs());
    let cols = (0..k).map(|j| ((0..n).map(|i| plan.data()[i * k + j]).sum::<f64>() - 1.0 / k as f64).abs());
    rows.chain(cols).fold(0.0, f64::max)
}

fn permute_rows(x: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let (b, d) = (x.shape()[0], x.shape()[1]);
    let mut order: Vec<usize> = (0..b).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..b).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_fn(vec![b, d], |i| x.data()[order[i / d] * d + i % d])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sliced_wasserstein_is_a_symmetric_permutation_invariant_lower_bound(
        b in 1usize..6, d in 1usize..5, p in 1u32..3, seed in any::<u64>()
    ) {
        let (x, y) = (random(&[b, d], seed), random(&[b, d], seed ^ 7));
        let v = sw(&x, &y, p, seed);
        prop_assert!(v >= 0.0);
        prop_assert_eq!(sw(&x, &x, p, seed), 0.0);
        prop_assert!((v - sw(&y, &x, p, seed)).abs() <= 1e-12 * v.max(1.0));
        prop_assert!((v - sw(&permute_rows(&x, seed), &permute_rows(&y, seed ^ 3), p, seed)).abs() <= 1e-12 * v.max(1.0));
        // Projection onto a unit direction never increases transport cost.
        prop_assert!(v <= brute_force_wasserstein(&x, &y, p).unwrap() + 1e-12);
    }

    #[test]
    fn energy_weighting_sits_between_mean_and_max(v in proptest::collection::vec(0.0f64..5.0, 1..20)) {
        let t = Tensor::new(vec![v.len()], v.clone()).unwrap();
        let tape = Tape::new();
        let mean = weighted_mean(tape.constant(t.clone()), Energy::Identity, false).unwrap().item();
        let e = weighted_mean(tape.constant(t), Energy::Exponential, false).unwrap().item();
        let max = v.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert!(e >= mean * (1.0 - 1e-12) && e <= max * (1.0 + 1e-12));
    }

    #[test]
    fn ebsw_with_identity_energy_is_sliced_wasserstein(b in 1usize..6, d in 1usize..6, seed in any::<u64>()) {
        let (x, y) = (random(&[b, d], seed), random(&[b, d], !seed));
        let slices = sample_slices(d, 32, seed).unwrap();
        let tape = Tape::new();
        let (cx, cy) = (tape.constant(x), tape.constant(y));
        let a = ebsw(cx, cy, 2, &slices, Energy::Identity, false).unwrap().item();
        prop_assert_eq!(a.to_bits(), sliced_wasserstein(cx, cy, 2, &slices).unwrap().item().to_bits());
    }

    #[test]
    fn alpha_blend_interpolates(c in 1usize..4, hw in 1usize..10, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Tensor::from_fn(vec![1, c, hw, 1], |_| rng.random::<f64>());
        let r = Tensor::from_fn(vec![1, c, hw, 1], |_| rng.random::<f64>());
        let m = Tensor::from_fn(vec![1, 1, hw, 1], |_| rng.random::<f64>());
        prop_assert_eq!(alpha_blend(&f, &Tensor::ones(vec![1, 1, hw, 1]), &r).unwrap(), f.clone());
        prop_assert_eq!(alpha_blend(&f, &Tensor::zeros(vec![1, 1, hw, 1]), &r).unwrap(), r.clone());
        let out = alpha_blend(&f, &m, &r).unwrap();
        for (i, &o) in out.data().iter().enumerate() {
            let (lo, hi) = (f.data()[i].min(r.data()[i]), f.data()[i].max(r.data()[i]));
            prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
        }
    }

    #[test]
    fn metrics_are_bounded_and_reward_perfect_ranking(n in 2usize..40, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt: Vec<f32> = (0..n).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let pred: Vec<f32> = (0..n).map(|_| rng.random()).collect();
        let i = iou(&pred, &gt, 0.5).unwrap();
        prop_assert!((0.0..=1.0).contains(&i));
        prop_assert_eq!(iou(&gt, &gt, 0.5).unwrap(), 1.0);
        let both = gt.contains(&1.0) && gt.contains(&0.0);
        if both {
            let a = aucroc(&pred, &gt).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            let flipped: Vec<f32> = pred.iter().map(|p| 1.0 - p).collect();
            prop_assert!((a + aucroc(&flipped, &gt).unwrap() - 1.0).abs() < 1e-12);
            let perfect: Vec<f32> = gt.iter().zip(&pred).map(|(g, p)| g * 0.5 + p * 0.25).collect();
            prop_assert_eq!(aucroc(&perfect, &gt).unwrap(), 1.0);
            prop_assert_eq!(average_precision(&perfect, &gt).unwrap(), 1.0);
            let ap = average_precision(&pred, &gt).unwrap();
            prop_assert!(ap > 0.0 && ap <= 1.0);
        }
    }

    #[test]
    fn sinkhorn_plans_are_balanced(n in 2usize..30, k in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost = Tensor::from_fn(vec![n, k], |_| rng.random::<f64>());
        let plan = sinkhorn(&cost, 0.5, 5000, 1e-9).unwrap();
        prop_assert!(plan.converged);
        prop_assert!(plan.plan.data().iter().all(|&v| v >= 0.0));
        prop_assert!(marginal_error(&plan.plan) < 1e-8);
    }

    #[test]
    fn sinkhorn_reports_its_residual_honestly(n in 2usize..30, k in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost = Tensor::from_fn(vec![n, k], |_| rng.random::<f64>());
        // Small eps and few iterations: convergence is not guaranteed.
        let plan = sinkhorn(&cost, 0.01, 50, 1e-9).unwrap();
        let err = marginal_error(&plan.plan);
        prop_assert!((err - plan.residual).abs() <= 1e-15);
        prop_assert_eq!(plan.converged, plan.residual <= 1e-9);
    }

    #[test]
    fn kmeans_is_deterministic_and_labels_every_point(n in 4usize..40, k in 1usize..4, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let z = random(&[n, 3], seed);
        let a = sinkhorn_kmeans(&z, k, &KMeansConfig::default(), seed).unwrap();
        prop_assert_eq!(&a, &sinkhorn_kmeans(&z, k, &KMeansConfig::default(), seed).unwrap());
        prop_assert_eq!(a.assignments.len(), n);
        prop_assert!(a.sizes().iter().all(|&s| s > 0));
    }

    #[test]
    fn sliding_window_covers_every_pixel(h in 4usize..20, w in 4usize..20, crop in 2usize..5, overlap in 0.0f64..0.9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = Tensor::from_fn(vec![1, h, w], |_| rng.random::<f32>());
        let cfg = WindowConfig { crop, overlap, input: crop, normalize: false };
        // Each crop predicts 1 at every pixel: any uncovered pixel would be NaN.
        let out = sliding_window_infer(&scene, &|x: &Tensor<f32>| Ok(Tensor::ones(vec![x.shape()[0], 1, crop, crop])), &cfg).unwrap();
        prop_assert_eq!(out.shape(), &[1, h, w]);
        prop_assert!(out.data().iter().all(|&v| v == 1.0));
    }
}

#[test]
fn monte_carlo_spread_halves_at_four_times_the_slices() {
    let (x, y) = (random(&[8, 16], 1), random(&[8, 16], 2));
    let spread = |l: usize| {
        let v: Vec<f64> = (0..200u64)
            .map(|rep| {
                let slices = sample_slices(16, l, 1000 * l as u64 + rep).unwrap();
                let tape = Tape::new();
                sliced_wasserstein(tape.constant(x.clone()), tape.constant(y.clone()), 2, &slices).unwrap().item()
            })
            .collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    };
    let ratio = spread(100) / spread(400);
    assert!((2.0 / 1.5..=2.0 * 1.5).contains(&ratio), "spread ratio {ratio}");
}
