use mpstream_autodiff::{Graph, Mode, Padding, Tensor};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn dropout_preserves_expectation(seed in any::<u64>(), rate in 0.05f64..0.8) {
        let n = 20_000;
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(vec![1, n], 1.0));
        let y = g.dropout(x, rate, Mode::Train, seed).unwrap();
        let mean = g.value(y).data().iter().sum::<f64>() / n as f64;
        let sigma = (rate / (1.0 - rate) / n as f64).sqrt();
        prop_assert!((mean - 1.0).abs() <= 3.0 * sigma, "mean {mean} sigma {sigma}");
    }

    #[test]
    fn conv_output_extent_follows_floor_rule(
        n in 1usize..7, k in 1usize..4, s in 1usize..3, same in any::<bool>()
    ) {
        prop_assume!(n >= k);
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(vec![1, 1, n, n, n]));
        let w = g.param(Tensor::zeros(vec![1, 1, k, k, k]));
        let (padding, p) = if same { (Padding::Same, k / 2) } else { (Padding::Valid, 0) };
        let y = g.conv3d(x, w, None, [s, s, s], padding).unwrap();
        let want = (n + 2 * p - k) / s + 1;
        prop_assert_eq!(g.shape(y), vec![1, 1, want, want, want]);
    }

    #[test]
    fn eval_forward_is_bitwise_repeatable(seed in any::<u64>()) {
        let run = || {
            let g = Graph::<f32>::new();
            let x = g.constant(Tensor::from_fn(vec![2, 3, 2, 3, 3], |i| {
                ((i as u64).wrapping_mul(seed | 1) % 97) as f32 / 97.0
            }));
            let w = g.param(Tensor::from_fn(vec![2, 3, 3, 3, 3], |i| (i % 7) as f32 * 0.1 - 0.3));
            let y = g.conv3d(x, w, None, [1, 1, 1], Padding::Same).unwrap();
            let y = g.dropout(y, 0.5, Mode::Eval, seed).unwrap();
            let v = g.value(y).data().to_vec();
            v
        };
        prop_assert_eq!(run(), run());
    }
}
