mod oracles;

use fieldseg::geometry::{bilinear_sample, generate_ray, project, Camera};
use fieldseg::{FeatureImage, Provenance};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn back_projection_round_trips() {
    let r = oracles::geometry_fuzz(10_000, 3);
    assert!(
        r.max_reprojection_px <= 1e-4,
        "max {} px",
        r.max_reprojection_px
    );
}

#[test]
fn bilinear_matches_tent_reference() {
    let r = oracles::geometry_fuzz(10_000, 4);
    assert!(
        r.max_bilinear_error <= 1e-6,
        "max error {}",
        r.max_bilinear_error
    );
}

#[test]
fn quarter_offset_weights() {
    // One-hot channels expose the four tap weights directly.
    let data: Vec<f64> = (0..4)
        .flat_map(|i| (0..4).map(move |c| (i == c) as u8 as f64))
        .collect();
    let grid = FeatureImage::new(2, 2, 4, data, Provenance::Teacher).unwrap();
    let (v, ok) = bilinear_sample(&grid, [0.5 + 0.25, 0.5 + 0.75]);
    assert!(ok);
    for (got, want) in v.iter().zip([0.1875, 0.0625, 0.5625, 0.1875]) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn hand_back_projection() {
    let mut w2c = [0.0; 16];
    for i in 0..4 {
        w2c[i * 5] = 1.0;
    }
    let cam = Camera::new(100.0, 100.0, 50.0, 50.0, 100, 100, w2c, 0.1, 10.0).unwrap();
    let r = generate_ray(&cam, [99.5, 49.5]).unwrap();
    let want = Vector3::new(0.5, 0.0, 1.0).normalize();
    assert!((r.direction - want).norm() < 1e-12);
}

proptest! {
    #[test]
    fn bilinear_is_linear_in_the_grid(
        seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0,
        zx in 0.0f64..6.0, zy in 0.0f64..5.0
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g1: Vec<f64> = (0..6 * 5 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g2: Vec<f64> = (0..6 * 5 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mix: Vec<f64> = g1.iter().zip(&g2).map(|(x, y)| a * x + b * y).collect();
        let f = |d: Vec<f64>| FeatureImage::new(5, 6, 2, d, Provenance::Teacher).unwrap();
        let (s1, _) = bilinear_sample(&f(g1), [zx, zy]);
        let (s2, _) = bilinear_sample(&f(g2), [zx, zy]);
        let (sm, _) = bilinear_sample(&f(mix), [zx, zy]);
        for i in 0..2 {
            prop_assert!((sm[i] - (a * s1[i] + b * s2[i])).abs() <= 1e-6);
        }
    }

    #[test]
    fn points_behind_the_camera_are_invalid(seed in any::<u64>(), t in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cam = oracles::random_camera(&mut rng);
        let r = generate_ray(&cam, [cam.width as f64 / 2.0, cam.height as f64 / 2.0]).unwrap();
        prop_assert!(!project(&cam, &r.at(-t)).valid);
    }
}
