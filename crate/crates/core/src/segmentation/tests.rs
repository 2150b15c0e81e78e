use std::collections::BTreeMap;

use super::*;
use crate::features::Provenance;
use crate::scene::{make_scene, make_teacher_features, SceneSpec};

fn feat_image(
    w: usize,
    h: usize,
    dim: usize,
    f: impl Fn(usize, usize, usize) -> f64,
) -> FeatureImage {
    let mut data = Vec::with_capacity(w * h * dim);
    for y in 0..h {
        for x in 0..w {
            for c in 0..dim {
                data.push(f(x, y, c));
            }
        }
    }
    FeatureImage::new(h, w, dim, data, Provenance::Student).unwrap()
}

fn one_stroke(points: Vec<[f64; 2]>, r: f64) -> StrokeSet {
    StrokeSet {
        strokes: vec![Stroke {
            view_id: 0,
            points,
            brush_radius: r,
        }],
    }
}

fn size_20x20(v: usize) -> Option<(usize, usize)> {
    (v == 0).then_some((20, 20))
}

#[test]
fn point_stroke_covers_one_pixel() {
    let px = one_stroke(vec![[4.0, 7.0]], 0.0)
        .rasterize(size_20x20)
        .unwrap();
    assert_eq!(px[&0], vec![7 * 20 + 4]);
    let off = one_stroke(vec![[4.3, 6.8]], 0.0)
        .rasterize(size_20x20)
        .unwrap();
    assert_eq!(off[&0], vec![7 * 20 + 4]);
}

#[test]
fn segment_endpoints_are_inclusive() {
    let px = one_stroke(vec![[2.0, 5.0], [12.0, 5.0]], 0.0)
        .rasterize(size_20x20)
        .unwrap();
    assert_eq!(px[&0], (2..=12).map(|x| 5 * 20 + x).collect::<Vec<_>>());
}

#[test]
fn disc_matches_per_pixel_distance_count() {
    for r in [0.5, 1.0, 1.5, 2.0, 2.7, 4.0] {
        let px = one_stroke(vec![[10.0, 10.0]], r)
            .rasterize(size_20x20)
            .unwrap();
        let mut brute = 0;
        for y in 0..20 {
            for x in 0..20 {
                let d2 = (x as f64 - 10.0).powi(2) + (y as f64 - 10.0).powi(2);
                brute += (d2 <= r * r) as usize;
            }
        }
        assert_eq!(px[&0].len(), brute, "radius {r}");
    }
}

#[test]
fn overlapping_strokes_are_deduplicated() {
    let mut s = one_stroke(vec![[3.0, 3.0], [9.0, 3.0]], 1.0);
    s.strokes.push(s.strokes[0].clone());
    let px = s.rasterize(size_20x20).unwrap();
    let single = one_stroke(vec![[3.0, 3.0], [9.0, 3.0]], 1.0)
        .rasterize(size_20x20)
        .unwrap();
    assert_eq!(px, single);
}

#[test]
fn out_of_bounds_points_are_rejected() {
    assert!(one_stroke(vec![[20.0, 3.0]], 0.0)
        .rasterize(size_20x20)
        .is_err());
    assert!(one_stroke(vec![[-0.1, 3.0]], 0.0)
        .rasterize(size_20x20)
        .is_err());
    assert!(StrokeSet::default().rasterize(size_20x20).is_err());
    let other_view = StrokeSet {
        strokes: vec![Stroke {
            view_id: 4,
            points: vec![[1.0, 1.0]],
            brush_radius: 0.0,
        }],
    };
    assert!(matches!(
        other_view.rasterize(size_20x20),
        Err(Error::NotFound(_))
    ));
}

#[test]
fn stroke_file_round_trip() {
    let s = StrokeSet {
        strokes: vec![
            Stroke {
                view_id: 2,
                points: vec![[1.5, 2.25], [3.0, 4.0]],
                brush_radius: 1.5,
            },
            Stroke {
                view_id: 0,
                points: vec![[0.0, 0.0]],
                brush_radius: 0.0,
            },
        ],
    };
    assert_eq!(StrokeSet::from_json(&s.to_json()).unwrap(), s);
    let text = r#"{"strokes":[{"view_id":1,"points":[[3,4]],"brush_radius":2}]}"#;
    let p = StrokeSet::from_json(text).unwrap();
    assert_eq!(p.strokes[0].points, vec![[3.0, 4.0]]);
}

#[test]
fn collected_features_follow_the_stroke() {
    let f = feat_image(6, 5, 2, |x, y, c| (x * 10 + y + c * 100) as f64);
    let feats = BTreeMap::from([(0, f)]);
    let s = one_stroke(vec![[1.0, 2.0], [3.0, 2.0]], 0.0);
    let got = collect_stroke_features(&s, &feats).unwrap();
    assert_eq!(
        got,
        vec![vec![12.0, 112.0], vec![22.0, 122.0], vec![32.0, 132.0]]
    );
}

#[test]
fn single_cluster_is_the_mean() {
    let pts = vec![vec![1.0, 2.0], vec![3.0, -2.0], vec![5.0, 3.0]];
    let c = kmeans(&pts, 1, 0, 50).unwrap();
    assert_eq!(c.k(), 1);
    assert!((c.centers[0][0] - 3.0).abs() < 1e-12);
    assert!((c.centers[0][1] - 1.0).abs() < 1e-12);
    assert!(c.requested_k.is_none());
}

#[test]
fn two_pairs_give_pair_means() {
    let pts = vec![
        vec![0.0, 0.0],
        vec![10.0, 10.0],
        vec![0.0, 1.0],
        vec![10.0, 11.0],
    ];
    let c = kmeans(&pts, 2, 3, 50).unwrap();
    let mut cs = c.centers.clone();
    cs.sort_by(|a, b| a[0].total_cmp(&b[0]));
    assert_eq!(cs, vec![vec![0.0, 0.5], vec![10.0, 10.5]]);
    assert!((c.inertia - 1.0).abs() < 1e-12);
}

#[test]
fn identical_points_collapse_k() {
    let pts = vec![vec![0.5, 0.5]; 4];
    let c = kmeans(&pts, 3, 0, 50).unwrap();
    assert_eq!(c.k(), 1);
    assert_eq!(c.requested_k, Some(3));
    assert_eq!(c.centers[0], vec![0.5, 0.5]);
}

#[test]
fn kmeans_rejects_bad_input() {
    assert!(kmeans(&[], 2, 0, 10).is_err());
    assert!(kmeans(&[vec![1.0]], 0, 0, 10).is_err());
    assert!(kmeans(&[vec![1.0], vec![1.0, 2.0]], 1, 0, 10).is_err());
    assert!(kmeans(&[vec![f64::NAN]], 1, 0, 10).is_err());
}

#[test]
fn empty_cluster_moves_to_the_farthest_point() {
    let pts = vec![vec![0.0], vec![1.0], vec![10.0]];
    // The second centre starts where no point is closest to it.
    let run = lloyd(&pts, vec![vec![5.0], vec![100.0]], 10);
    let mut cs = run.centers.clone();
    cs.sort_by(|a, b| a[0].total_cmp(&b[0]));
    assert_eq!(cs, vec![vec![0.5], vec![10.0]]);
    assert!(run.converged);
}

#[test]
fn kmeans_is_seed_deterministic() {
    let pts: Vec<Vec<f64>> = (0..40)
        .map(|i| vec![(i as f64 * 0.77).sin(), (i as f64 * 1.3).cos()])
        .collect();
    assert_eq!(
        kmeans(&pts, 5, 9, 100).unwrap(),
        kmeans(&pts, 5, 9, 100).unwrap()
    );
}

#[test]
fn nnfm_bounds() {
    let f = feat_image(3, 3, 2, |x, y, c| {
        if c == 0 {
            x as f64 - 1.0
        } else {
            y as f64 + 0.5
        }
    });
    let centers = ClusterCenters {
        centers: vec![vec![1.0, 0.0], vec![0.0, 2.0]],
        iterations: 0,
        inertia: 0.0,
        requested_k: None,
    };
    assert!(nnfm_mask(&f, &centers, MAX_DISTANCE)
        .unwrap()
        .data
        .iter()
        .all(|v| *v));
    let zero = nnfm_mask(&f, &centers, 0.0).unwrap();
    // Pixels whose direction is exactly (0, 1): x = 1.
    let want: Vec<bool> = (0..9).map(|i| i % 3 == 1).collect();
    assert_eq!(zero.data, want);
    assert!(nnfm_mask(&f, &centers, -0.1).is_err());
}

#[test]
fn nnfm_toy_image_matches_a_hand_scan() {
    let vecs = [
        [1.0, 0.0],
        [0.0, 1.0],
        [1.0, 1.0],
        [-1.0, 0.0],
        [0.3, 0.9],
        [0.9, -0.2],
        [0.0, -1.0],
        [-0.5, 0.5],
        [2.0, 0.1],
    ];
    let f = feat_image(3, 3, 2, |x, y, c| vecs[y * 3 + x][c]);
    let centers = ClusterCenters {
        centers: vec![vec![3.0, 0.0], vec![0.0, 0.5]],
        iterations: 0,
        inertia: 0.0,
        requested_k: None,
    };
    let tau = 0.5;
    let m = nnfm_mask(&f, &centers, tau).unwrap();
    for (i, v) in vecs.iter().enumerate() {
        let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
        let u = [v[0] / n, v[1] / n];
        let d1 = ((u[0] - 1.0).powi(2) + u[1].powi(2)).sqrt();
        let d2 = (u[0].powi(2) + (u[1] - 1.0).powi(2)).sqrt();
        assert_eq!(m.data[i], d1.min(d2) <= tau, "pixel {i}");
    }
}

#[test]
fn metrics_identity_and_disjoint() {
    let gt = vec![true, false, true, true, false, false];
    let same = eval_masks(&[EvalView {
        view_id: 0,
        pred: &gt,
        gt: &gt,
        scores: None,
    }])
    .unwrap();
    assert_eq!((same.mean_iou, same.accuracy, same.map), (1.0, 1.0, 1.0));
    let inv: Vec<bool> = gt.iter().map(|v| !v).collect();
    let dis = eval_masks(&[EvalView {
        view_id: 0,
        pred: &inv,
        gt: &gt,
        scores: None,
    }])
    .unwrap();
    assert_eq!(dis.mean_iou, 0.0);
    assert_eq!(dis.accuracy, 0.0);
    let empty = vec![false; 4];
    let e = eval_masks(&[EvalView {
        view_id: 1,
        pred: &empty,
        gt: &empty,
        scores: None,
    }])
    .unwrap();
    assert_eq!(e.mean_iou, 1.0);
    assert!(eval_masks(&[EvalView {
        view_id: 0,
        pred: &gt[..3],
        gt: &gt,
        scores: None
    }])
    .is_err());
}

#[test]
fn four_by_four_confusion() {
    #[rustfmt::skip]
    let pred = [1, 1, 0, 0,
                1, 1, 1, 0,
                0, 0, 0, 0,
                0, 1, 0, 0].map(|v| v == 1);
    #[rustfmt::skip]
    let gt = [1, 1, 1, 0,
              1, 1, 1, 0,
              0, 0, 0, 0,
              0, 0, 0, 1].map(|v| v == 1);
    let c = Confusion::of(&pred, &gt);
    assert_eq!(
        c,
        Confusion {
            tp: 5,
            fp: 1,
            tn: 8,
            fn_: 2
        }
    );
    assert_eq!(c.iou(), 5.0 / 8.0);
    assert_eq!(c.accuracy(), 13.0 / 16.0);
}

#[test]
fn average_precision_hand_case() {
    // Ranked: +, -, +, - . PR points: (0.5, 1), (0.5, 0.5), (1, 2/3), (1, 0.5).
    let scores = [0.1, 0.2, 0.3, 0.4];
    let gt = [true, false, true, false];
    let want = 0.5 * (1.0 + 1.0) / 2.0 + 0.5 * (0.5 + 2.0 / 3.0) / 2.0;
    assert!((average_precision(&scores, &gt) - want).abs() < 1e-15);
    // Tied scores form one threshold.
    let tied = [0.1, 0.1, 0.3, 0.3];
    let want = 0.5 * (1.0 + 0.5) / 2.0 + 0.5 * (0.5 + 0.5) / 2.0;
    assert!((average_precision(&tied, &gt) - want).abs() < 1e-15);
}

#[test]
fn tuned_threshold_maximizes_iou() {
    let scores = [0.1, 0.5, 0.2, 0.9, 0.3, 0.7];
    let gt = [true, false, true, false, true, false];
    assert_eq!(tune_threshold(&scores, &gt), 0.3);
}

#[test]
fn mask_png_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mask = MaskImage {
        width: 5,
        height: 3,
        data: (0..15).map(|i| i % 4 == 0).collect(),
        threshold: 0.2,
        view_id: Some(1),
    };
    let p = dir.path().join("m.png");
    write_mask_png(&mask, &p).unwrap();
    let (w, h, data) = read_mask_png(&p).unwrap();
    assert_eq!((w, h), (5, 3));
    assert_eq!(data, mask.data);
    assert_eq!(std::fs::read(&p).unwrap(), encode_mask_png(&mask));
}

fn teacher_scene() -> Scene {
    let s = SceneSpec {
        seed: 21,
        camera_count: 5,
        width: 32,
        height: 24,
        ..SceneSpec::default()
    };
    make_teacher_features(&make_scene(&s).unwrap(), 8, 0.0, 21).unwrap()
}

#[test]
fn whole_instance_strokes_on_clean_features_recover_the_instance() {
    let scene = teacher_scene();
    let feats = scene.teacher_features.as_ref().unwrap();
    let masks = scene.instance_masks.as_ref().unwrap();
    let id = 1;
    let w = scene.width();
    // Every pixel of the instance in view 0 becomes a radius-0 point stroke.
    let strokes = StrokeSet {
        strokes: masks[0]
            .data
            .iter()
            .enumerate()
            .filter(|(_, v)| **v == id)
            .map(|(i, _)| Stroke {
                view_id: 0,
                points: vec![[(i % w) as f64, (i / w) as f64]],
                brush_radius: 0.0,
            })
            .collect(),
    };
    let views: Vec<usize> = (0..scene.views.len()).collect();
    let seg = segment_multiview(
        &FeatureSource::Precomputed(feats),
        &strokes,
        &views,
        DEFAULT_K,
        1e-9,
        0,
    )
    .unwrap();
    for v in &seg.views {
        assert_eq!(
            v.mask.data,
            masks[v.view_id].mask_of(id),
            "view {}",
            v.view_id
        );
        assert_eq!(v.mask.threshold, seg.threshold);
    }
    let again = segment_multiview(
        &FeatureSource::Precomputed(feats),
        &strokes,
        &views,
        DEFAULT_K,
        1e-9,
        0,
    )
    .unwrap();
    assert_eq!(again, seg);
}

#[test]
fn generated_stroke_stays_inside_its_instance() {
    let scene = teacher_scene();
    let masks = scene.instance_masks.as_ref().unwrap();
    for id in 1..=scene.instance_count() {
        let Ok(stroke) = instance_stroke(&scene, 0, id, 1.0) else {
            continue;
        };
        let set = StrokeSet {
            strokes: vec![stroke],
        };
        let px = set
            .rasterize(|_| Some((scene.width(), scene.height())))
            .unwrap();
        assert!(
            px[&0].iter().all(|i| masks[0].data[*i] == id),
            "instance {id}"
        );
    }
}

#[test]
fn unknown_views_are_not_found() {
    let scene = teacher_scene();
    let feats = scene.teacher_features.as_ref().unwrap();
    let strokes = one_stroke(vec![[3.0, 3.0]], 0.0);
    let r = segment_multiview(
        &FeatureSource::Precomputed(feats),
        &strokes,
        &[99],
        3,
        0.1,
        0,
    );
    assert!(matches!(r, Err(Error::NotFound(_))));
}
