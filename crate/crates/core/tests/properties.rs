use proptest::prelude::*;
use realtalk::engine::Tensor;
use realtalk::face::LANDMARK_DIM;
use realtalk::ldm::apply_deformation;
use realtalk::nerf::composite;

fn seq(frames: usize) -> impl Strategy<Value = Tensor<f32>> {
    prop::collection::vec(-1.0f32..1.0, frames * LANDMARK_DIM).prop_map(move |v| Tensor::new(frames, LANDMARK_DIM, v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn deformation_is_affine_in_delta(neutral in seq(3), disp in seq(3), delta in 0.0f64..2.0) {
        let zero = apply_deformation(&neutral, &disp, 0.0).unwrap();
        prop_assert_eq!(&zero, &neutral);
        let out = apply_deformation(&neutral, &disp, delta).unwrap();
        for ((o, n), d) in out.data().iter().zip(neutral.data()).zip(disp.data()) {
            prop_assert!((o - (n + delta as f32 * d)).abs() <= 1e-6);
        }
    }

    #[test]
    fn compositing_weights_are_a_partition(
        samples in prop::collection::vec((0.0f64..50.0, 0.0f64..1.0, 1e-3f64..0.5), 1..48),
    ) {
        let sig: Vec<f64> = samples.iter().map(|s| s.0).collect();
        let col: Vec<[f64; 3]> = samples.iter().map(|s| [s.1; 3]).collect();
        let del: Vec<f64> = samples.iter().map(|s| s.2).collect();
        let c = composite(&sig, &col, &del, [1.0; 3]);
        prop_assert!(c.weights.iter().all(|&w| w >= 0.0));
        prop_assert!((c.weights.iter().sum::<f64>() + c.t_final - 1.0).abs() < 1e-9);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&c.rgb[0]));
    }
}
