mod oracles;

#[test]
fn reconstruction_error_is_the_trailing_spectrum() {
    let r = oracles::pca_fuzz(50, 5);
    assert!(
        r.max_reconstruction_gap <= 1e-8,
        "gap {}",
        r.max_reconstruction_gap
    );
}

#[test]
fn invert_after_apply_projects_onto_the_subspace() {
    let r = oracles::pca_fuzz(50, 6);
    assert!(
        r.max_projection_error <= 1e-6,
        "error {}",
        r.max_projection_error
    );
}

#[test]
fn jacobi_reference_recovers_a_diagonal_spectrum() {
    let a = [3.0, 0.0, 0.0, 0.0, -2.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0];
    let (mut sv, _) = oracles::jacobi_svd(&a, 4, 3);
    sv.sort_by(|x, y| y.total_cmp(x));
    assert_eq!(sv, vec![3.0, 2.0, 0.5]);
}
