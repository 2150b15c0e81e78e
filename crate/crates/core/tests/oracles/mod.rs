//! Independent reference implementations and fuzz drivers. Shared by the
//! integration tests here and by the acceptance harness of the CLI crate.
#![allow(dead_code)]

use fieldseg::features::{apply_pca, fit_pca, invert_pca};
use fieldseg::geometry::{bilinear_sample, generate_ray, project, Camera};
use fieldseg::model::composite;
use fieldseg::segmentation::{
    eval_masks, kmeans, nnfm_mask, ClusterCenters, EvalView, DEFAULT_MAX_ITERS,
};
use fieldseg::{FeatureImage, Provenance};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- compositing

/// `C = Σ_i exp(-Σ_{j<i} σ_j δ_j) (1 - exp(-σ_i δ_i)) c_i`, with the
/// transmittance taken from the optical depth rather than a running product.
pub fn composite_reference(
    sigmas: &[f64],
    colours: &[f64],
    deltas: &[f64],
    channels: usize,
) -> (Vec<f64>, Vec<f64>, f64) {
    let mut out = vec![0.0; channels];
    let mut weights = Vec::new();
    let mut depth = 0.0f64;
    for i in 0..sigmas.len() {
        let t = (-depth).exp();
        let w = t * -(-sigmas[i] * deltas[i]).exp_m1();
        weights.push(w);
        for c in 0..channels {
            out[c] += w * colours[i * channels + c];
        }
        depth += sigmas[i] * deltas[i];
    }
    (out, weights, (-depth).exp())
}

fn random_ray(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, Vec<f64>, usize) {
    let m = rng.random_range(1..=64);
    let channels = rng.random_range(1..=4);
    let sigmas = (0..m)
        .map(|_| match rng.random_range(0..4) {
            0 => 0.0,
            1 => rng.random_range(0.0..0.1),
            2 => rng.random_range(0.0..5.0),
            _ => rng.random_range(0.0..200.0),
        })
        .collect();
    let deltas = (0..m).map(|_| rng.random_range(0.0..0.5)).collect();
    let colours = (0..m * channels).map(|_| rng.random::<f64>()).collect();
    (sigmas, colours, deltas, channels)
}

pub struct CompositeReport {
    pub cases: usize,
    pub max_error: f64,
    pub max_telescoping_error: f64,
}

/// Fuzzes `composite` against the reference, then splits one constant
/// segment of each ray into equal sub-segments and checks the colour and
/// final transmittance do not move.
pub fn composite_fuzz(cases: usize, seed: u64) -> CompositeReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut max_error, mut max_tel) = (0.0f64, 0.0f64);
    for _ in 0..cases {
        let (s, c, d, ch) = random_ray(&mut rng);
        let got = composite(&s, &c, &d, ch).expect("valid inputs");
        let (colour, weights, t_final) = composite_reference(&s, &c, &d, ch);
        for (a, b) in got
            .colour
            .iter()
            .zip(&colour)
            .chain(got.weights.iter().zip(&weights))
        {
            max_error = max_error.max((a - b).abs());
        }
        max_error = max_error.max((got.final_transmittance - t_final).abs());

        let i = rng.random_range(0..s.len());
        let parts = rng.random_range(2..=8);
        let (mut s2, mut c2, mut d2) = (Vec::new(), Vec::new(), Vec::new());
        for j in 0..s.len() {
            let reps = if j == i { parts } else { 1 };
            for _ in 0..reps {
                s2.push(s[j]);
                d2.push(d[j] / reps as f64);
                c2.extend_from_slice(&c[j * ch..(j + 1) * ch]);
            }
        }
        let fine = composite(&s2, &c2, &d2, ch).expect("valid inputs");
        for (a, b) in fine.colour.iter().zip(&got.colour) {
            max_tel = max_tel.max((a - b).abs());
        }
        max_tel = max_tel.max((fine.final_transmittance - got.final_transmittance).abs());
    }
    CompositeReport {
        cases,
        max_error,
        max_telescoping_error: max_tel,
    }
}

// ------------------------------------------------------------------- geometry

pub fn random_camera(rng: &mut ChaCha8Rng) -> Camera {
    let width = rng.random_range(8..=160);
    let height = rng.random_range(8..=120);
    let f = rng.random_range(20.0..300.0);
    let r = rng.random_range(2.0..10.0);
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let elev: f64 = rng.random_range(-1.2..1.2);
    let eye = Vector3::new(
        r * elev.cos() * theta.cos(),
        r * elev.cos() * theta.sin(),
        r * f64::sin(elev),
    );
    let target = Vector3::new(
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
    );
    Camera::look_at(
        eye,
        target,
        Vector3::z(),
        f * rng.random_range(0.8..1.25),
        f,
        width,
        height,
        0.1,
        30.0,
    )
    .expect("valid random camera")
}

/// Tent-filter reference for `bilinear_sample`: every texel weighs in with
/// `max(0, 1 - |dx|) · max(0, 1 - |dy|)` about the query clamped to the
/// texel-centre hull.
pub fn bilinear_reference(grid: &FeatureImage, z: [f64; 2]) -> (Vec<f64>, bool) {
    let (w, h) = (grid.width as f64, grid.height as f64);
    let mut out = vec![0.0; grid.dim];
    if !(z[0] >= 0.0 && z[1] >= 0.0 && z[0] <= w && z[1] <= h) {
        return (out, false);
    }
    let qx = z[0].clamp(0.5, w - 0.5);
    let qy = z[1].clamp(0.5, h - 0.5);
    for y in 0..grid.height {
        for x in 0..grid.width {
            let wx = (1.0 - (qx - (x as f64 + 0.5)).abs()).max(0.0);
            let wy = (1.0 - (qy - (y as f64 + 0.5)).abs()).max(0.0);
            if wx * wy > 0.0 {
                for (o, v) in out.iter_mut().zip(grid.at(x, y)) {
                    *o += wx * wy * v;
                }
            }
        }
    }
    (out, true)
}

pub struct GeometryReport {
    pub cases: usize,
    pub max_reprojection_px: f64,
    pub max_bilinear_error: f64,
}

/// Back-projects a random pixel to a random depth and projects it again;
/// then compares bilinear reads against the tent-filter reference, including
/// queries on and beyond the grid border.
pub fn geometry_fuzz(cases: usize, seed: u64) -> GeometryReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_px = 0.0f64;
    for _ in 0..cases {
        let cam = random_camera(&mut rng);
        let px = [
            rng.random_range(0.0..cam.width as f64),
            rng.random_range(0.0..cam.height as f64),
        ];
        let ray = generate_ray(&cam, px).expect("pixel inside the image");
        let t = rng.random_range(0.2..25.0);
        let p = project(&cam, &ray.at(t));
        let err = ((p.z[0] - (px[0] + 0.5)).powi(2) + (p.z[1] - (px[1] + 0.5)).powi(2)).sqrt();
        max_px = max_px.max(if err.is_nan() { f64::INFINITY } else { err });
    }
    let mut max_bil = 0.0f64;
    for _ in 0..cases {
        let (w, h, d) = (
            rng.random_range(1..=9),
            rng.random_range(1..=9),
            rng.random_range(1..=4),
        );
        let data = (0..w * h * d)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let grid = FeatureImage::new(h, w, d, data, Provenance::Teacher).unwrap();
        let z = [
            rng.random_range(-1.0..w as f64 + 1.0),
            rng.random_range(-1.0..h as f64 + 1.0),
        ];
        let (got, valid) = bilinear_sample(&grid, z);
        let (want, want_valid) = bilinear_reference(&grid, z);
        if valid != want_valid {
            max_bil = f64::INFINITY;
        }
        for (a, b) in got.iter().zip(&want) {
            max_bil = max_bil.max((a - b).abs());
        }
    }
    GeometryReport {
        cases,
        max_reprojection_px: max_px,
        max_bilinear_error: max_bil,
    }
}

// ------------------------------------------------------------------------ PCA

/// Singular values and right singular vectors (columns of `v`, `n × n`
/// row-major) of an `m × n` row-major matrix by one-sided Jacobi rotations.
pub fn jacobi_svd(a: &[f64], m: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut u = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for r in 0..m {
                    let (x, y) = (u[r * n + p], u[r * n + q]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..m {
                    let (x, y) = (u[r * n + p], u[r * n + q]);
                    u[r * n + p] = c * x - s * y;
                    u[r * n + q] = s * x + c * y;
                }
                for r in 0..n {
                    let (x, y) = (v[r * n + p], v[r * n + q]);
                    v[r * n + p] = c * x - s * y;
                    v[r * n + q] = s * x + c * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let sv = (0..n)
        .map(|j| {
            (0..m)
                .map(|r| u[r * n + j] * u[r * n + j])
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    (sv, v)
}

pub struct PcaReport {
    pub cases: usize,
    /// `|Σ‖x - x̂‖² - Σ_{i>k} s_i²|`, worst case.
    pub max_reconstruction_gap: f64,
    /// Worst entry of `invert(apply(x)) - (μ + V_k V_kᵀ (x - μ))`.
    pub max_projection_error: f64,
}

/// Random 100×8 sample sets with random output dimension.
pub fn pca_fuzz(cases: usize, seed: u64) -> PcaReport {
    let (n, d) = (100, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut gap, mut proj) = (0.0f64, 0.0f64);
    for _ in 0..cases {
        let scales: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..3.0)).collect();
        let data: Vec<f64> = (0..n * d)
            .map(|i| scales[i % d] * rng.random_range(-1.0..1.0) + 0.3)
            .collect();
        let k = rng.random_range(1..d);
        let pca = fit_pca(&data, d, k).unwrap();
        let img = FeatureImage::new(1, n, d, data.clone(), Provenance::Teacher).unwrap();
        let back = invert_pca(&pca, &apply_pca(&pca, &img).unwrap()).unwrap();
        let recon: f64 = data
            .iter()
            .zip(&back.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();

        let mean: Vec<f64> = (0..d)
            .map(|j| (0..n).map(|r| data[r * d + j]).sum::<f64>() / n as f64)
            .collect();
        let centred: Vec<f64> = data
            .iter()
            .enumerate()
            .map(|(i, x)| x - mean[i % d])
            .collect();
        let (sv, v) = jacobi_svd(&centred, n, d);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|a, b| sv[*b].total_cmp(&sv[*a]));
        let trailing: f64 = order[k..].iter().map(|j| sv[*j] * sv[*j]).sum();
        gap = gap.max((recon - trailing).abs());

        for r in 0..n {
            let x = &centred[r * d..(r + 1) * d];
            for i in 0..d {
                let mut want = mean[i];
                for j in &order[..k] {
                    let coef: f64 = (0..d).map(|l| v[l * d + j] * x[l]).sum();
                    want += v[i * d + j] * coef;
                }
                proj = proj.max((back.data[r * d + i] - want).abs());
            }
        }
    }
    PcaReport {
        cases,
        max_reconstruction_gap: gap,
        max_projection_error: proj,
    }
}

// --------------------------------------------------------------- segmentation

/// Smallest within-cluster sum of squares over every assignment of `points`
/// to at most `k` (1 or 2) clusters, each non-empty.
pub fn brute_force_inertia(points: &[Vec<f64>], k: usize) -> f64 {
    let cost = |members: &[&Vec<f64>]| -> f64 {
        if members.is_empty() {
            return 0.0;
        }
        let d = members[0].len();
        let mean: Vec<f64> = (0..d)
            .map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64)
            .collect();
        members
            .iter()
            .map(|p| {
                p.iter()
                    .zip(&mean)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum()
    };
    let all: Vec<&Vec<f64>> = points.iter().collect();
    let mut best = cost(&all);
    if k >= 2 {
        let n = points.len();
        for mask in 1..(1u32 << n) - 1 {
            let (a, b): (Vec<_>, Vec<_>) = (0..n).partition(|i| mask & (1 << i) != 0);
            let a: Vec<&Vec<f64>> = a.iter().map(|i| &points[*i]).collect();
            let b: Vec<&Vec<f64>> = b.iter().map(|i| &points[*i]).collect();
            best = best.min(cost(&a) + cost(&b));
        }
    }
    best
}

pub struct KmeansReport {
    pub cases: usize,
    pub mismatches: usize,
    pub max_gap: f64,
}

/// Every point count 1..=6 with k in {1, 2}, `per_shape` random instances
/// each; the returned centres' inertia (recomputed here) must equal the
/// brute-force optimum.
pub fn kmeans_fuzz(per_shape: usize, seed: u64) -> KmeansReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut cases, mut mismatches, mut max_gap) = (0, 0, 0.0f64);
    for n in 1..=6 {
        for k in 1..=2 {
            for _ in 0..per_shape {
                let d = rng.random_range(1..=3);
                let points: Vec<Vec<f64>> = (0..n)
                    .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect();
                let c = kmeans(&points, k, rng.random(), DEFAULT_MAX_ITERS).unwrap();
                let got: f64 = points
                    .iter()
                    .map(|p| {
                        c.centers
                            .iter()
                            .map(|q| p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                            .fold(f64::INFINITY, f64::min)
                    })
                    .sum();
                let want = brute_force_inertia(&points, k);
                let gap = (got - want).abs();
                max_gap = max_gap.max(gap);
                if gap > 1e-9 * (1.0 + want) {
                    mismatches += 1;
                }
                cases += 1;
            }
        }
    }
    KmeansReport {
        cases,
        mismatches,
        max_gap,
    }
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Exhaustive scan: a pixel is selected when some centre lies within `tau`
/// of it after both are scaled to unit length.
pub fn nnfm_reference(f: &FeatureImage, centers: &[Vec<f64>], tau: f64) -> Vec<bool> {
    (0..f.height)
        .flat_map(|y| (0..f.width).map(move |x| (x, y)))
        .map(|(x, y)| {
            let p = unit(f.at(x, y));
            centers.iter().any(|c| {
                let c = unit(c);
                p.iter()
                    .zip(&c)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
                    <= tau
            })
        })
        .collect()
}

fn random_features(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> FeatureImage {
    let data = (0..h * w * d)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    FeatureImage::new(h, w, d, data, Provenance::Student).unwrap()
}

fn random_centers(rng: &mut ChaCha8Rng, k: usize, d: usize) -> ClusterCenters {
    ClusterCenters {
        centers: (0..k)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect(),
        iterations: 0,
        inertia: 0.0,
        requested_k: None,
    }
}

/// Fuzzed 8×8 images; returns the number of images whose mask differs.
pub fn nnfm_fuzz(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let d = rng.random_range(1..=8);
        let f = random_features(&mut rng, 8, 8, d);
        let k = rng.random_range(1..=4);
        let c = random_centers(&mut rng, k, d);
        let tau = rng.random_range(0.0..2.0);
        if nnfm_mask(&f, &c, tau).unwrap().data != nnfm_reference(&f, &c.centers, tau) {
            bad += 1;
        }
    }
    bad
}

/// Counts violations of `τ₁ ≤ τ₂ ⇒ mask(τ₁) ⊆ mask(τ₂)`.
pub fn tau_monotonicity_fuzz(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let d = rng.random_range(1..=8);
        let f = random_features(&mut rng, 8, 8, d);
        let k = rng.random_range(1..=4);
        let c = random_centers(&mut rng, k, d);
        let a: f64 = rng.random_range(0.0..2.0);
        let b: f64 = rng.random_range(0.0..2.0);
        let (lo, hi) = (a.min(b), a.max(b));
        let (m1, m2) = (
            nnfm_mask(&f, &c, lo).unwrap(),
            nnfm_mask(&f, &c, hi).unwrap(),
        );
        if m1.data.iter().zip(&m2.data).any(|(x, y)| *x && !*y) {
            bad += 1;
        }
    }
    bad
}

/// Counts per-pixel outcomes and derives IoU and accuracy, averaged over
/// views.
pub fn confusion_reference(views: &[(Vec<bool>, Vec<bool>)]) -> (f64, f64, Vec<(f64, f64)>) {
    let mut per = Vec::new();
    for (pred, gt) in views {
        let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
        for i in 0..pred.len() {
            match (pred[i], gt[i]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fneg += 1,
            }
        }
        let iou = if tp + fp + fneg == 0 {
            1.0
        } else {
            tp as f64 / (tp + fp + fneg) as f64
        };
        per.push((iou, (tp + tn) as f64 / pred.len() as f64));
    }
    let n = per.len() as f64;
    (
        per.iter().map(|p| p.0).sum::<f64>() / n,
        per.iter().map(|p| p.1).sum::<f64>() / n,
        per,
    )
}

/// Random 8×8 mask pairs over 1..=4 views, including empty and full masks;
/// returns the number of cases that differ from the reference in any bit.
pub fn eval_masks_fuzz(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let views: Vec<(Vec<bool>, Vec<bool>)> = (0..rng.random_range(1..=4))
            .map(|_| {
                let pp: f64 = [0.0, 1.0, rng.random()][rng.random_range(0..3)];
                let pg: f64 = [0.0, 1.0, rng.random()][rng.random_range(0..3)];
                (
                    (0..64).map(|_| rng.random_bool(pp)).collect(),
                    (0..64).map(|_| rng.random_bool(pg)).collect(),
                )
            })
            .collect();
        let ev: Vec<EvalView<'_>> = views
            .iter()
            .enumerate()
            .map(|(i, (p, g))| EvalView {
                view_id: i,
                pred: p,
                gt: g,
                scores: None,
            })
            .collect();
        let got = eval_masks(&ev).unwrap();
        let (miou, acc, per) = confusion_reference(&views);
        let same_views = got.views.iter().zip(&per).all(|(v, p)| {
            v.iou.to_bits() == p.0.to_bits() && v.accuracy.to_bits() == p.1.to_bits()
        });
        if got.mean_iou.to_bits() != miou.to_bits()
            || got.accuracy.to_bits() != acc.to_bits()
            || !same_views
        {
            bad += 1;
        }
    }
    bad
}
