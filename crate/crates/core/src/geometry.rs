//! Pinhole cameras, query rays, depth sampling and epipolar reads.
//!
//! Pixel `(i, j)` covers `[i, i+1) × [j, j+1)` and has its centre at
//! `(i + 0.5, j + 0.5)`. Projection, bilinear reads and stroke rasterization
//! all use this one convention.

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Taps;
use crate::error::{Error, Result};
use crate::features::FeatureImage;

/// Minimum camera-space depth for a point to count as in front of a camera.
pub const EPS_Z: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major rigid transform taking world points into camera space
    /// (x right, y down, z forward).
    pub world_to_camera: [f64; 16],
    pub near: f64,
    pub far: f64,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        world_to_camera: [f64; 16],
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            world_to_camera,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::domain("focal lengths must be positive"));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::domain(format!(
                "need 0 < near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::domain("image size must be non-zero"));
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-6 {
            return Err(Error::domain(format!(
                "rotation not orthonormal (error {err:e})"
            )));
        }
        let m = self.pose();
        if m[(3, 0)] != 0.0 || m[(3, 1)] != 0.0 || m[(3, 2)] != 0.0 || m[(3, 3)] != 1.0 {
            return Err(Error::domain(
                "world_to_camera bottom row must be (0, 0, 0, 1)",
            ));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`; `up` fixes the roll.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(Error::domain(
                "look_at: up is parallel to the view direction",
            ));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(rot * eye);
        let mut m = [0.0; 16];
        for r in 0..3 {
            for c in 0..3 {
                m[r * 4 + c] = rot[(r, c)];
            }
            m[r * 4 + 3] = t[r];
        }
        m[15] = 1.0;
        Self::new(
            fx,
            fy,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            m,
            near,
            far,
        )
    }

    /// The same camera after the whole world is moved by the rigid map
    /// `x -> rotation * x + translation`.
    pub fn moved(&self, rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Camera {
        let r = self.rotation() * rotation.transpose();
        let t = self.translation() - r * translation;
        let mut m = [0.0; 16];
        for i in 0..3 {
            for j in 0..3 {
                m[i * 4 + j] = r[(i, j)];
            }
            m[i * 4 + 3] = t[i];
        }
        m[15] = 1.0;
        Camera {
            world_to_camera: m,
            ..self.clone()
        }
    }

    pub fn pose(&self) -> Matrix4<f64> {
        Matrix4::from_row_slice(&self.world_to_camera)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.pose().fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.pose().fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera centre in world coordinates, `-Rᵀt`.
    pub fn centre(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * x + self.translation()
    }

    pub fn same_pose(&self, other: &Camera) -> bool {
        self.world_to_camera == other.world_to_camera
    }

    /// Same intrinsics scaled to a new resolution.
    pub fn resized(&self, width: usize, height: usize) -> Camera {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Camera {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// Ray through the centre of the (continuous) pixel position `pixel`, i.e.
/// through image point `pixel + (0.5, 0.5)`.
pub fn generate_ray(camera: &Camera, pixel: [f64; 2]) -> Result<Ray> {
    let [px, py] = pixel;
    if !(px >= 0.0 && py >= 0.0 && px < camera.width as f64 && py < camera.height as f64) {
        return Err(Error::domain(format!(
            "pixel ({px}, {py}) outside {}x{}",
            camera.width, camera.height
        )));
    }
    let dir_cam = Vector3::new(
        (px + 0.5 - camera.cx) / camera.fx,
        (py + 0.5 - camera.cy) / camera.fy,
        1.0,
    );
    let direction = (camera.rotation().transpose() * dir_cam).normalize();
    Ok(Ray {
        origin: camera.centre(),
        direction,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub positions: Vec<Vector3<f64>>,
    pub deltas: Vec<f64>,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// `t_j = near + j/(M-1) * (far - near)`.
    Uniform,
    /// One uniform draw per bin of width `(far - near)/M`.
    Stratified { seed: u64 },
}

pub fn sample_along_ray(
    ray: &Ray,
    near: f64,
    far: f64,
    count: usize,
    mode: SampleMode,
) -> Result<RaySamples> {
    let t = match mode {
        SampleMode::Uniform => uniform_depths(near, far, count)?,
        SampleMode::Stratified { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            stratified_depths(near, far, count, &mut rng)?
        }
    };
    Ok(samples_from_depths(ray, t, near, far))
}

fn check_range(near: f64, far: f64, count: usize) -> Result<()> {
    if near >= far {
        return Err(Error::domain(format!(
            "near {near} must be below far {far}"
        )));
    }
    if count < 2 {
        return Err(Error::domain("need at least two samples per ray"));
    }
    Ok(())
}

pub fn uniform_depths(near: f64, far: f64, count: usize) -> Result<Vec<f64>> {
    check_range(near, far, count)?;
    let step = (far - near) / (count - 1) as f64;
    Ok((0..count)
        .map(|j| {
            if j + 1 == count {
                far
            } else {
                near + j as f64 * step
            }
        })
        .collect())
}

pub fn stratified_depths<R: Rng>(
    near: f64,
    far: f64,
    count: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_range(near, far, count)?;
    let bin = (far - near) / count as f64;
    Ok((0..count)
        .map(|j| {
            let u: f64 = rng.random();
            (near + (j as f64 + u) * bin).min(far)
        })
        .collect())
}

/// Interval lengths for compositing; the last one is capped at the uniform
/// step `(far - near)/(M - 1)`.
pub fn deltas_for(t: &[f64], near: f64, far: f64) -> Vec<f64> {
    let cap = (far - near) / (t.len().max(2) - 1) as f64;
    (0..t.len())
        .map(|j| {
            if j + 1 < t.len() {
                t[j + 1] - t[j]
            } else {
                cap
            }
        })
        .collect()
}

pub fn samples_from_depths(ray: &Ray, t: Vec<f64>, near: f64, far: f64) -> RaySamples {
    let positions = t.iter().map(|&tj| ray.at(tj)).collect();
    let deltas = deltas_for(&t, near, far);
    RaySamples {
        t,
        positions,
        deltas,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub z: [f64; 2],
    pub depth: f64,
    pub valid: bool,
}

pub fn project(camera: &Camera, x: &Vector3<f64>) -> Projection {
    let p = camera.to_camera(x);
    let depth = p.z;
    if depth <= EPS_Z {
        return Projection {
            z: [f64::NAN, f64::NAN],
            depth,
            valid: false,
        };
    }
    let u = camera.fx * p.x / depth + camera.cx;
    let v = camera.fy * p.y / depth + camera.cy;
    let valid =
        (0.0..=camera.width as f64).contains(&u) && (0.0..=camera.height as f64).contains(&v);
    Projection {
        z: [u, v],
        depth,
        valid,
    }
}

/// Bilinear taps into a `width × height` grid with texel centres at
/// `(i + 0.5, j + 0.5)`. Row indices are `y * width + x + offset`. Points
/// outside `[0, width] × [0, height]` yield `None`; inside that range the
/// outer half-texel border clamps to the edge texels.
pub fn bilinear_taps(width: usize, height: usize, z: [f64; 2], offset: usize) -> Option<Taps> {
    let [zx, zy] = z;
    if !(zx >= 0.0 && zy >= 0.0 && zx <= width as f64 && zy <= height as f64) {
        return None;
    }
    let u = zx - 0.5;
    let v = zy - 0.5;
    let x0f = u.floor();
    let y0f = v.floor();
    let ax = u - x0f;
    let ay = v - y0f;
    let clamp_x = |x: f64| (x.max(0.0) as usize).min(width - 1);
    let clamp_y = |y: f64| (y.max(0.0) as usize).min(height - 1);
    let (x0, x1) = (clamp_x(x0f), clamp_x(x0f + 1.0));
    let (y0, y1) = (clamp_y(y0f), clamp_y(y0f + 1.0));
    let idx = |x: usize, y: usize| (offset + y * width + x) as u32;
    Some([
        (idx(x0, y0), (1.0 - ax) * (1.0 - ay)),
        (idx(x1, y0), ax * (1.0 - ay)),
        (idx(x0, y1), (1.0 - ax) * ay),
        (idx(x1, y1), ax * ay),
    ])
}

/// Bilinear read of a feature grid; zeros and `false` outside the grid.
pub fn bilinear_sample(grid: &FeatureImage, z: [f64; 2]) -> (Vec<f64>, bool) {
    let mut out = vec![0.0; grid.dim];
    match bilinear_taps(grid.width, grid.height, z, 0) {
        None => (out, false),
        Some(taps) => {
            for (row, w) in taps {
                for (o, v) in out.iter_mut().zip(grid.pixel(row as usize)) {
                    *o += w * v;
                }
            }
            (out, true)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DirectionEncoding {
    /// `(d - d_i, d · d_i)`.
    pub values: [f64; 4],
    pub degenerate: bool,
}

/// Relative angle between the query ray and the source camera's ray to `x`.
pub fn relative_direction_encoding(
    ray: &Ray,
    source: &Camera,
    x: &Vector3<f64>,
) -> DirectionEncoding {
    let to_x = x - source.centre();
    let n = to_x.norm();
    if n < 1e-12 {
        return DirectionEncoding {
            values: [0.0; 4],
            degenerate: true,
        };
    }
    let di = to_x / n;
    let d = ray.direction;
    let diff = d - di;
    DirectionEncoding {
        values: [diff.x, diff.y, diff.z, d.dot(&di)],
        degenerate: false,
    }
}
