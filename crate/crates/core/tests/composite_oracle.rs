mod oracles;

use fieldseg::model::composite;
use proptest::prelude::*;

#[test]
fn composite_matches_optical_depth_reference() {
    let r = oracles::composite_fuzz(10_000, 1);
    assert!(r.max_error <= 1e-6, "max error {}", r.max_error);
}

#[test]
fn refining_a_constant_segment_changes_nothing() {
    let r = oracles::composite_fuzz(10_000, 2);
    assert!(
        r.max_telescoping_error <= 1e-6,
        "max error {}",
        r.max_telescoping_error
    );
}

#[test]
fn single_opaque_sample_takes_its_colour() {
    let c = composite(&[1e9], &[0.2, 0.4, 0.6], &[1.0], 3).unwrap();
    assert_eq!(c.colour, vec![0.2, 0.4, 0.6]);
    assert_eq!(c.final_transmittance, 0.0);
}

proptest! {
    #[test]
    fn weights_and_residual_transmittance_sum_to_one(
        sd in prop::collection::vec((0.0f64..50.0, 0.0f64..0.5), 1..40)
    ) {
        let (s, d): (Vec<f64>, Vec<f64>) = sd.into_iter().unzip();
        let c = composite(&s, &vec![1.0; s.len()], &d, 1).unwrap();
        let total: f64 = c.weights.iter().sum::<f64>() + c.final_transmittance;
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(c.transmittance.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn white_colour_composites_to_opacity(
        sd in prop::collection::vec((0.0f64..50.0, 0.0f64..0.5), 1..40)
    ) {
        let (s, d): (Vec<f64>, Vec<f64>) = sd.into_iter().unzip();
        let c = composite(&s, &vec![1.0; s.len()], &d, 1).unwrap();
        prop_assert!((c.colour[0] - (1.0 - c.final_transmittance)).abs() < 1e-12);
    }
}
