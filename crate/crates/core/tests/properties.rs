use dcganet::metrics::{binarize, confusion, iou, roc_sweep};
use dcganet::tensor::{
    broadcast_add, channel_shuffle, concat_channels, conv2d, global_avg_pool, max_pool2x2, read_dump,
    split_channels, upsample_nearest, write_dump,
};
use dcganet::{ConvSpec, Shape, Tensor4};
use proptest::prelude::*;

fn tensor(shape: Shape) -> impl Strategy<Value = Tensor4<f64>> {
    prop::collection::vec(-4.0f64..4.0, shape.numel()).prop_map(move |d| Tensor4::from_vec(shape, d).unwrap())
}

fn small_shape() -> impl Strategy<Value = Shape> {
    (1usize..3, 1usize..5, 1usize..7, 1usize..7).prop_map(|(n, c, h, w)| Shape::new(n, c, h, w))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_linear_in_the_input(
        (x, y) in small_shape().prop_flat_map(|s| (tensor(s), tensor(s))),
        seed in any::<u64>(),
    ) {
        let c = x.shape().dims()[1];
        let mut rng = dcganet::rng::Stream::new(seed, 0);
        let w = Tensor4::from_fn(Shape::new(2, c, 3, 3), |_, _, _, _| rng.uniform() - 0.5);
        let spec = &ConvSpec::same(3);
        let sum = broadcast_add(&x, &y).unwrap();
        let lhs = conv2d(&sum, &w, None, spec).unwrap();
        let rhs = broadcast_add(&conv2d(&x, &w, None, spec).unwrap(), &conv2d(&y, &w, None, spec).unwrap()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn shuffle_round_trips(groups in 1usize..5, per in 1usize..5, seed in any::<u64>()) {
        let c = groups * per;
        let mut rng = dcganet::rng::Stream::new(seed, 1);
        let x = Tensor4::from_fn(Shape::new(1, c, 2, 3), |_, _, _, _| rng.uniform());
        let y = channel_shuffle(&channel_shuffle(&x, groups).unwrap(), per).unwrap();
        prop_assert_eq!(y, x);
    }

    #[test]
    fn split_undoes_concat(a in tensor(Shape::new(2, 3, 4, 2)), b in tensor(Shape::new(2, 1, 4, 2))) {
        let joined = concat_channels(&[&a, &b]).unwrap();
        let parts = split_channels(&joined, &[3, 1]).unwrap();
        prop_assert_eq!(&parts[0], &a);
        prop_assert_eq!(&parts[1], &b);
    }

    #[test]
    fn pooling_an_upsampled_map_is_identity(x in small_shape().prop_flat_map(tensor)) {
        let up = upsample_nearest(&x, 2);
        prop_assert_eq!(max_pool2x2(&up).unwrap(), x.clone());
        prop_assert!(global_avg_pool(&up).max_abs_diff(&global_avg_pool(&x)) < 1e-12);
    }

    #[test]
    fn dump_round_trips(x in small_shape().prop_flat_map(tensor)) {
        let mut buf = Vec::new();
        write_dump(&x, &mut buf).unwrap();
        prop_assert_eq!(read_dump::<f64, _>(&buf[..]).unwrap(), x);
    }

    #[test]
    fn iou_lies_in_unit_interval(
        (p, g) in (1usize..64).prop_flat_map(|n| (prop::collection::vec(0.0f64..1.0, n), prop::collection::vec(0u8..2, n)))
    ) {
        let c = confusion(&binarize(&p, 0.5), &g).unwrap();
        let v = iou(&c);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(c.total(), p.len() as u64);
    }

    #[test]
    fn roc_is_monotone(
        (p, g) in (1usize..64).prop_flat_map(|n| (prop::collection::vec(0.0f64..1.0, n), prop::collection::vec(0u8..2, n)))
    ) {
        let t: Vec<f64> = (0..11).map(|i| 1.0 - i as f64 / 10.0).collect();
        let pts = roc_sweep(&[&p[..]], &[&g[..]], &t).unwrap();
        for w in pts.windows(2) {
            prop_assert!(w[1].pd >= w[0].pd && w[1].fa >= w[0].fa);
        }
    }
}
