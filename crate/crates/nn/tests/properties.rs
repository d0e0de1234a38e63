use proptest::prelude::*;
use steerbo_nn::data::{preprocess, split_sizes, stack_frames, Image, RawFrame, TARGET_HEIGHT, TARGET_WIDTH};
use steerbo_nn::ops::maxpool;
use steerbo_nn::Tensor;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn preprocess_always_yields_target_shape(
        w in 1usize..300,
        h in 3usize..200,
        color in any::<bool>(),
        crop in (0.0f64..0.45, 0.0f64..0.45),
        fill in any::<u8>(),
    ) {
        let c = if color { 3 } else { 1 };
        let top = (crop.0 * h as f64) as usize;
        let bottom = (crop.1 * h as f64) as usize;
        let pixels = (0..w * h * c).map(|i| fill.wrapping_add(i as u8)).collect();
        let frame = RawFrame { width: w, height: h, channels: c, pixels, index: 0, angle: 0.0 };
        let im = preprocess(&frame, top, bottom).unwrap();
        prop_assert_eq!((im.height, im.width, im.channels), (TARGET_HEIGHT, TARGET_WIDTH, c));
        prop_assert!(im.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn stacking_keeps_last_frame_labels(n in 3usize..40) {
        let images: Vec<(Image, f64)> = (0..n)
            .map(|i| (Image { height: 1, width: 2, channels: 1, data: vec![i as f64; 2] }, i as f64))
            .collect();
        let samples = stack_frames(&images).unwrap();
        prop_assert_eq!(samples.len(), n - 2);
        for (k, s) in samples.iter().enumerate() {
            prop_assert_eq!(s.label, (k + 2) as f64);
            prop_assert_eq!(s.frames.data()[4], (k + 2) as f64);
        }
    }

    #[test]
    fn split_sizes_partition_the_samples(n in 1usize..100_000, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (train, val) = (a * 0.999, (1.0 - a) * b);
        let (nt, nv) = split_sizes(n, train, val);
        prop_assert!(nt + nv <= n);
        prop_assert!(nt as f64 <= train * n as f64 + 1e-6);
    }

    #[test]
    fn max_pool_output_bounds_its_window(vals in proptest::collection::vec(-5.0f64..5.0, 16)) {
        let x = Tensor::new(&[1, 1, 4, 4], vals.clone()).unwrap();
        let (y, _) = maxpool(&x, &[2, 2]).unwrap();
        prop_assert_eq!(y.shape(), &[1, 1, 2, 2]);
        let global = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(y.data().contains(&global));
    }
}
