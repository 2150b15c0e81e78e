//! Procedural scenes: spheres and boxes resting on a checkered ground plane,
//! seen from a ring arc of cameras, shaded by one directional light.

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{LabelImage, PosedImage, RgbImage, Scene};
use crate::error::{Error, Result};
use crate::features::{normalized, FeatureImage, Provenance};
use crate::geometry::{generate_ray, Camera, Ray};

const AMBIENT: f64 = 0.2;
const GROUND_HALF_EXTENT: f64 = 14.0;
const GROUND_CHECK: f64 = 0.75;
const SKY: [f64; 3] = [0.15, 0.17, 0.22];
const PLACEMENT_ATTEMPTS: usize = 2000;
const EMBEDDING_ATTEMPTS: usize = 1000;
const MAX_EMBEDDING_COSINE: f64 = 0.5;

const PALETTE: [[f64; 3]; 8] = [
    [0.85, 0.15, 0.12],
    [0.15, 0.70, 0.20],
    [0.15, 0.30, 0.90],
    [0.90, 0.80, 0.10],
    [0.80, 0.20, 0.80],
    [0.10, 0.80, 0.80],
    [0.95, 0.50, 0.05],
    [0.45, 0.15, 0.60],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Sphere,
    Box,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_objects: usize,
    /// Kinds to draw from, uniformly.
    pub kinds: Vec<ObjectKind>,
    /// Objects are placed with their centres inside this radius.
    pub layout_radius: f64,
    pub size_range: (f64, f64),
    pub camera_count: usize,
    pub camera_radius: f64,
    pub elevation_deg: f64,
    /// Angular span of the camera arc.
    pub arc_deg: f64,
    pub horizontal_fov_deg: f64,
    pub width: usize,
    pub height: usize,
    pub light_dir: [f64; 3],
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_objects: 3,
            kinds: vec![ObjectKind::Sphere, ObjectKind::Box],
            layout_radius: 1.6,
            size_range: (0.5, 0.8),
            camera_count: 10,
            camera_radius: 6.5,
            elevation_deg: 40.0,
            arc_deg: 60.0,
            horizontal_fov_deg: 45.0,
            width: 64,
            height: 48,
            light_dir: [0.4, 0.3, 0.85],
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_objects == 0 {
            return Err(Error::domain("a scene needs at least one object"));
        }
        if self.n_objects > PALETTE.len() {
            return Err(Error::domain(format!("at most {} objects", PALETTE.len())));
        }
        if self.camera_count < 4 {
            return Err(Error::domain("a scene needs at least four cameras"));
        }
        if self.kinds.is_empty() {
            return Err(Error::domain("no object kinds to draw from"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::domain("image size must be non-zero"));
        }
        if !(self.size_range.0 > 0.0 && self.size_range.0 <= self.size_range.1) {
            return Err(Error::domain("invalid object size range"));
        }
        if !(self.horizontal_fov_deg > 0.0 && self.horizontal_fov_deg < 170.0) {
            return Err(Error::domain("field of view must be in (0, 170) degrees"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Shape {
    Sphere {
        centre: Vector3<f64>,
        radius: f64,
    },
    Box {
        min: Vector3<f64>,
        max: Vector3<f64>,
    },
}

#[derive(Clone, Debug)]
struct Object {
    shape: Shape,
    albedo: [f64; 3],
    footprint: f64,
    centre_xy: (f64, f64),
}

struct Hit {
    t: f64,
    normal: Vector3<f64>,
    albedo: [f64; 3],
    id: u8,
}

fn intersect_sphere(ray: &Ray, centre: &Vector3<f64>, radius: f64) -> Option<(f64, Vector3<f64>)> {
    let oc = ray.origin - centre;
    let b = oc.dot(&ray.direction);
    let c = oc.dot(&oc) - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let t = if -b - s > 1e-9 { -b - s } else { -b + s };
    if t <= 1e-9 {
        return None;
    }
    let p = ray.at(t);
    Some((t, (p - centre) / radius))
}

fn intersect_box(ray: &Ray, min: &Vector3<f64>, max: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    let mut axis_in = 0;
    for a in 0..3 {
        let d = ray.direction[a];
        if d.abs() < 1e-15 {
            if ray.origin[a] < min[a] || ray.origin[a] > max[a] {
                return None;
            }
            continue;
        }
        let (mut lo, mut hi) = ((min[a] - ray.origin[a]) / d, (max[a] - ray.origin[a]) / d);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        if lo > t0 {
            t0 = lo;
            axis_in = a;
        }
        t1 = t1.min(hi);
    }
    if t0 > t1 || t0 <= 1e-9 {
        return None;
    }
    let mut n = Vector3::zeros();
    n[axis_in] = -ray.direction[axis_in].signum();
    Some((t0, n))
}

fn trace(ray: &Ray, objects: &[Object]) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, o) in objects.iter().enumerate() {
        let hit = match &o.shape {
            Shape::Sphere { centre, radius } => intersect_sphere(ray, centre, *radius),
            Shape::Box { min, max } => intersect_box(ray, min, max),
        };
        if let Some((t, normal)) = hit {
            if best.as_ref().is_none_or(|b| t < b.t) {
                best = Some(Hit {
                    t,
                    normal,
                    albedo: o.albedo,
                    id: (i + 1) as u8,
                });
            }
        }
    }
    if ray.direction.z < -1e-12 {
        let t = -ray.origin.z / ray.direction.z;
        let p = ray.at(t);
        if t > 1e-9
            && p.x.abs() <= GROUND_HALF_EXTENT
            && p.y.abs() <= GROUND_HALF_EXTENT
            && best.as_ref().is_none_or(|b| t < b.t)
        {
            let check = ((p.x / GROUND_CHECK).floor() + (p.y / GROUND_CHECK).floor()) as i64;
            let albedo = if check.rem_euclid(2) == 0 {
                [0.62, 0.60, 0.56]
            } else {
                [0.48, 0.47, 0.45]
            };
            best = Some(Hit {
                t,
                normal: Vector3::z(),
                albedo,
                id: 0,
            });
        }
    }
    best
}

fn shade(hit: &Hit, light: &Vector3<f64>) -> [f64; 3] {
    let lambert = hit.normal.dot(light).max(0.0);
    hit.albedo
        .map(|a| (a * (AMBIENT + (1.0 - AMBIENT) * lambert)).clamp(0.0, 1.0))
}

fn place_objects(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Object>> {
    let mut palette: Vec<[f64; 3]> = PALETTE.to_vec();
    palette.shuffle(rng);
    let mut objects: Vec<Object> = Vec::with_capacity(spec.n_objects);
    let mut attempts = 0;
    while objects.len() < spec.n_objects {
        attempts += 1;
        if attempts > PLACEMENT_ATTEMPTS {
            return Err(Error::Generation(format!(
                "could not place {} non-overlapping objects in radius {}",
                spec.n_objects, spec.layout_radius
            )));
        }
        let kind = spec.kinds[rng.random_range(0..spec.kinds.len())];
        let size = rng.random_range(spec.size_range.0..=spec.size_range.1);
        let r = spec.layout_radius * rng.random::<f64>().sqrt();
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        let (cx, cy) = (r * a.cos(), r * a.sin());
        let (shape, footprint) = match kind {
            ObjectKind::Sphere => {
                let radius = size;
                (
                    Shape::Sphere {
                        centre: Vector3::new(cx, cy, radius),
                        radius,
                    },
                    radius,
                )
            }
            ObjectKind::Box => {
                let hx = size * rng.random_range(0.7..1.0);
                let hy = size * rng.random_range(0.7..1.0);
                let hz = size * rng.random_range(0.8..1.3);
                (
                    Shape::Box {
                        min: Vector3::new(cx - hx, cy - hy, 0.0),
                        max: Vector3::new(cx + hx, cy + hy, 2.0 * hz),
                    },
                    (hx * hx + hy * hy).sqrt(),
                )
            }
        };
        let clear = objects.iter().all(|o| {
            let d = ((o.centre_xy.0 - cx).powi(2) + (o.centre_xy.1 - cy).powi(2)).sqrt();
            d > o.footprint + footprint + 0.1
        });
        if clear {
            let albedo = palette[objects.len()];
            objects.push(Object {
                shape,
                albedo,
                footprint,
                centre_xy: (cx, cy),
            });
        }
    }
    Ok(objects)
}

fn arc_cameras(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Camera>> {
    let start = rng.random_range(0.0..360.0f64).to_radians();
    let arc = spec.arc_deg.to_radians();
    let elev = spec.elevation_deg.to_radians();
    let f = spec.width as f64 / (2.0 * (spec.horizontal_fov_deg.to_radians() / 2.0).tan());
    (0..spec.camera_count)
        .map(|i| {
            let a = start + arc * i as f64 / (spec.camera_count - 1) as f64;
            let eye = Vector3::new(
                spec.camera_radius * elev.cos() * a.cos(),
                spec.camera_radius * elev.cos() * a.sin(),
                spec.camera_radius * elev.sin(),
            );
            // Placeholder depth bounds; replaced once the renders are known.
            Camera::look_at(
                eye,
                Vector3::new(0.0, 0.0, 0.4),
                Vector3::z(),
                f,
                f,
                spec.width,
                spec.height,
                0.01,
                1e3,
            )
        })
        .collect()
}

/// Renders a synthetic scene. Deterministic for a fixed spec.
pub fn make_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let objects = place_objects(spec, &mut rng)?;
    let cameras = arc_cameras(spec, &mut rng)?;
    let light = Vector3::from(spec.light_dir).normalize();
    let (w, h) = (spec.width, spec.height);
    let mut renders = Vec::with_capacity(cameras.len());
    let mut masks = Vec::with_capacity(cameras.len());
    let (mut tmin, mut tmax) = (f64::INFINITY, 0.0f64);
    for cam in &cameras {
        let mut rgb = Vec::with_capacity(w * h * 3);
        let mut ids = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let ray = generate_ray(cam, [x as f64, y as f64])?;
                match trace(&ray, &objects) {
                    Some(hit) => {
                        tmin = tmin.min(hit.t);
                        tmax = tmax.max(hit.t);
                        rgb.extend(shade(&hit, &light));
                        ids.push(hit.id);
                    }
                    None => {
                        rgb.extend(SKY);
                        ids.push(0);
                    }
                }
            }
        }
        let quantized = rgb
            .iter()
            .map(|v| super::quantize(*v) as f64 / 255.0)
            .collect();
        renders.push(RgbImage::new(w, h, quantized));
        masks.push(LabelImage {
            width: w,
            height: h,
            data: ids,
        });
    }
    // Bracket every object, not just what happens to be visible.
    for cam in &cameras {
        let c = cam.centre();
        for o in &objects {
            let (near_d, far_d) = match &o.shape {
                Shape::Sphere { centre, radius } => {
                    let d = (centre - c).norm();
                    (d - radius, d + radius)
                }
                Shape::Box { min, max } => {
                    let mid = (min + max) / 2.0;
                    let r = (max - min).norm() / 2.0;
                    let d = (mid - c).norm();
                    (d - r, d + r)
                }
            };
            tmin = tmin.min(near_d);
            tmax = tmax.max(far_d);
        }
    }
    let near = (tmin * 0.95).max(0.05);
    let far = tmax * 1.02;
    let views = cameras
        .into_iter()
        .zip(renders)
        .map(|(cam, rgb)| {
            let camera = Camera { near, far, ..cam };
            camera.validate().map(|_| PosedImage { camera, rgb })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene {
        id: format!("synth-{:04}", spec.seed),
        views,
        near,
        far,
        instance_masks: Some(masks),
        teacher_features: None,
        pca: None,
    })
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let (u, ok) = normalized(&v);
        if ok {
            return u;
        }
    }
}

/// Instance embeddings for ids `0..=count`: random unit vectors with pairwise
/// cosine below 0.5, redrawn until that holds.
pub fn instance_embeddings(count: usize, dim: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7EAC_4E55);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count + 1);
    let mut attempts = 0;
    while out.len() <= count {
        attempts += 1;
        if attempts > EMBEDDING_ATTEMPTS * (count + 1) {
            return Err(Error::Generation(format!(
                "could not draw {} separated embeddings in {dim} dims",
                count + 1
            )));
        }
        let cand = random_unit(&mut rng, dim);
        let ok = out.iter().all(|e| {
            let c: f64 = e.iter().zip(&cand).map(|(a, b)| a * b).sum();
            c < MAX_EMBEDDING_COSINE
        });
        if ok {
            out.push(cand);
        }
    }
    Ok(out)
}

/// Synthetic teacher: every instance (and the background) owns a random unit
/// embedding; each pixel gets its instance's embedding plus isotropic noise
/// with expected norm `noise_sigma`, renormalized. Values are rounded to
/// `f32` so the scene round-trips through `.feat` files exactly.
pub fn make_teacher_features(
    scene: &Scene,
    dim: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Scene> {
    if dim < 2 {
        return Err(Error::domain(
            "teacher feature dimension must be at least 2",
        ));
    }
    if noise_sigma < 0.0 {
        return Err(Error::domain("noise sigma must be non-negative"));
    }
    let masks = scene
        .instance_masks
        .as_ref()
        .ok_or_else(|| Error::domain("synthetic teacher needs instance masks"))?;
    let embeddings = instance_embeddings(scene.instance_count() as usize, dim, seed)?;
    let per_dim = noise_sigma / (dim as f64).sqrt();
    let mut feats = Vec::with_capacity(masks.len());
    for (v, mask) in masks.iter().enumerate() {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(v as u64));
        let mut data = Vec::with_capacity(mask.data.len() * dim);
        for id in &mask.data {
            let e = &embeddings[*id as usize];
            let noisy: Vec<f64> = if per_dim > 0.0 {
                e.iter()
                    .map(|x| x + per_dim * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            } else {
                e.clone()
            };
            let (u, _) = normalized(&noisy);
            data.extend(u.iter().map(|x| *x as f32 as f64));
        }
        feats.push(FeatureImage::new(
            mask.height,
            mask.width,
            dim,
            data,
            Provenance::Teacher,
        )?);
    }
    Ok(Scene {
        teacher_features: Some(feats),
        ..scene.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{cosine, l2_norm};

    fn small_spec(seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            camera_count: 8,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn zero_objects_is_a_domain_error() {
        let spec = SceneSpec {
            n_objects: 0,
            ..small_spec(1)
        };
        assert!(matches!(make_scene(&spec), Err(Error::Domain(_))));
        let spec = SceneSpec {
            camera_count: 3,
            ..small_spec(1)
        };
        assert!(make_scene(&spec).is_err());
    }

    #[test]
    fn same_seed_same_scene() {
        assert_eq!(
            make_scene(&small_spec(7)).unwrap(),
            make_scene(&small_spec(7)).unwrap()
        );
        assert_ne!(
            make_scene(&small_spec(7)).unwrap(),
            make_scene(&small_spec(8)).unwrap()
        );
    }

    #[test]
    fn every_instance_is_visible_somewhere() {
        for seed in 0..5 {
            let scene = make_scene(&small_spec(seed)).unwrap();
            let masks = scene.instance_masks.as_ref().unwrap();
            for id in 1..=3u8 {
                assert!(
                    masks.iter().any(|m| m.data.contains(&id)),
                    "seed {seed}: instance {id} never visible"
                );
            }
        }
    }

    #[test]
    fn crowded_layout_fails_to_place() {
        let spec = SceneSpec {
            n_objects: 8,
            layout_radius: 0.5,
            ..small_spec(2)
        };
        assert!(matches!(make_scene(&spec), Err(Error::Generation(_))));
    }

    #[test]
    fn instance_pixels_carry_their_albedo_hue() {
        let scene = make_scene(&small_spec(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let objects = place_objects(&small_spec(4), &mut rng).unwrap();
        for (view, mask) in scene
            .views
            .iter()
            .zip(scene.instance_masks.as_ref().unwrap())
        {
            for (i, id) in mask.data.iter().enumerate() {
                if *id == 0 {
                    continue;
                }
                let albedo = objects[*id as usize - 1].albedo;
                let px = view.rgb.pixel(i);
                // shading only scales the albedo, so the chromaticity matches
                let c = cosine(&px, &albedo);
                assert!(c > 0.995, "pixel {i} instance {id}: cos {c}");
            }
        }
    }

    #[test]
    fn depth_bounds_bracket_visible_geometry() {
        let scene = make_scene(&small_spec(3)).unwrap();
        assert!(scene.near > 0.0 && scene.near < scene.far);
        for v in &scene.views {
            assert_eq!(v.camera.near, scene.near);
            assert_eq!(v.camera.far, scene.far);
        }
    }

    #[test]
    fn teacher_without_noise_is_piecewise_constant() {
        let scene = make_scene(&small_spec(5)).unwrap();
        let t = make_teacher_features(&scene, 16, 0.0, 1).unwrap();
        let feats = t.teacher_features.as_ref().unwrap();
        let masks = t.instance_masks.as_ref().unwrap();
        let mut seen: Vec<Option<Vec<f64>>> = vec![None; 4];
        for (f, m) in feats.iter().zip(masks) {
            for (i, id) in m.data.iter().enumerate() {
                let v = f.pixel(i).to_vec();
                match &seen[*id as usize] {
                    None => seen[*id as usize] = Some(v),
                    Some(s) => assert_eq!(*s, v),
                }
            }
        }
        assert!(make_teacher_features(&scene, 1, 0.0, 1).is_err());
        let bare = Scene {
            instance_masks: None,
            ..scene
        };
        assert!(make_teacher_features(&bare, 8, 0.0, 1).is_err());
    }

    #[test]
    fn embeddings_are_separated() {
        let e = instance_embeddings(3, 64, 9).unwrap();
        for i in 0..e.len() {
            for j in 0..i {
                assert!(cosine(&e[i], &e[j]) < 0.5);
            }
        }
    }

    #[test]
    fn noisy_teacher_stays_close_to_embedding() {
        let scene = make_scene(&small_spec(6)).unwrap();
        let t = make_teacher_features(&scene, 64, 0.1, 2).unwrap();
        let e = instance_embeddings(3, 64, 2).unwrap();
        let mut total = 0usize;
        let mut close = 0usize;
        for (f, m) in t
            .teacher_features
            .as_ref()
            .unwrap()
            .iter()
            .zip(t.instance_masks.as_ref().unwrap())
        {
            for (i, id) in m.data.iter().enumerate() {
                let p = f.pixel(i);
                assert!((l2_norm(p) - 1.0).abs() < 1e-6);
                total += 1;
                if cosine(p, &e[*id as usize]) >= 0.9 {
                    close += 1;
                }
            }
        }
        assert!(close as f64 >= 0.99 * total as f64);
    }
}
