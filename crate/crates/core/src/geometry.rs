//! Pinhole cameras, rays, projection and circular positional encoding.
//!
//! Pixel centers sit at integer + 0.5, so pixel `(0, 0)` covers
//! `[0, 1) x [0, 1)` and its center projects to `uv = (0.5, 0.5)`.

use nalgebra::{Matrix3, Point3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Projections closer than this to the camera plane count as behind it.
pub const MIN_DEPTH: f64 = 1e-8;

/// Pinhole camera with world-to-camera extrinsics `x_cam = R x + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub k: Matrix3<f64>,
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
    pub width: usize,
    pub height: usize,
    pub t_near: f64,
    pub t_far: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Point3<f64>,
    pub direction: Vector3<f64>,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Point3<f64> {
        self.origin + self.direction * t
    }
}

/// Result of projecting a world point into a camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    InFront { uv: Vector2<f64>, depth: f64 },
    Behind,
}

impl Camera {
    /// Square-pixel intrinsics with the principal point at the image center.
    pub fn intrinsics(focal: f64, width: usize, height: usize) -> Matrix3<f64> {
        Matrix3::new(focal, 0.0, width as f64 / 2.0, 0.0, focal, height as f64 / 2.0, 0.0, 0.0, 1.0)
    }

    /// Camera at `eye` looking at `target`, with world `+z` as up.
    ///
    /// Camera axes follow the image convention: `+x` right, `+y` down, `+z` forward.
    pub fn look_at(
        eye: Point3<f64>,
        target: Point3<f64>,
        k: Matrix3<f64>,
        width: usize,
        height: usize,
        t_near: f64,
        t_far: f64,
    ) -> Result<Self> {
        let forward = (target - eye).try_normalize(1e-12).ok_or_else(|| Error::domain("look_at: eye equals target"))?;
        let up = Vector3::z();
        let right = forward
            .cross(&up)
            .try_normalize(1e-9)
            .ok_or_else(|| Error::domain("look_at: view direction parallel to up"))?;
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * eye.coords);
        let cam = Self { k, r, t, width, height, t_near, t_far };
        cam.validate()?;
        Ok(cam)
    }

    /// Checks the documented invariants.
    pub fn validate(&self) -> Result<()> {
        let rtr = self.r.transpose() * self.r;
        if (rtr - Matrix3::identity()).abs().max() > 1e-6 || (self.r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::domain("camera rotation is not a proper rotation"));
        }
        let k = &self.k;
        let upper = k[(1, 0)] == 0.0 && k[(2, 0)] == 0.0 && k[(2, 1)] == 0.0 && k[(2, 2)] == 1.0;
        if !upper || k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
            return Err(Error::domain("camera intrinsics must be upper-triangular with positive focals"));
        }
        if !(self.t_near > 0.0 && self.t_near < self.t_far) {
            return Err(Error::domain(format!("invalid ray bounds t_near={} t_far={}", self.t_near, self.t_far)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::domain("camera image size must be positive"));
        }
        Ok(())
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Point3<f64> {
        Point3::from(-(self.r.transpose() * self.t))
    }

    /// World point to camera coordinates.
    pub fn to_camera(&self, x: &Point3<f64>) -> Vector3<f64> {
        self.r * x.coords + self.t
    }

    /// World direction to camera coordinates.
    pub fn dir_to_camera(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.r * d
    }

    /// Ray through a continuous pixel position.
    pub fn pixel_to_ray(&self, pixel: Vector2<f64>) -> Result<Ray> {
        let (u, v) = (pixel.x, pixel.y);
        if !(u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64) {
            return Err(Error::domain(format!(
                "pixel ({u}, {v}) outside {}x{} image",
                self.width, self.height
            )));
        }
        Ok(self.ray_unchecked(u, v))
    }

    /// Ray through the center of integer pixel `(col, row)`.
    pub fn pixel_center_ray(&self, col: usize, row: usize) -> Ray {
        self.ray_unchecked(col as f64 + 0.5, row as f64 + 0.5)
    }

    fn ray_unchecked(&self, u: f64, v: f64) -> Ray {
        let k = &self.k;
        // Closed-form inverse of an upper-triangular intrinsic matrix.
        let y = (v - k[(1, 2)]) / k[(1, 1)];
        let x = (u - k[(0, 2)] - k[(0, 1)] * y) / k[(0, 0)];
        let dir = (self.r.transpose() * Vector3::new(x, y, 1.0)).normalize();
        Ray { origin: self.center(), direction: dir, t_near: self.t_near, t_far: self.t_far }
    }

    pub fn project_point(&self, x: &Point3<f64>) -> Projection {
        let c = self.to_camera(x);
        if c.z <= MIN_DEPTH {
            return Projection::Behind;
        }
        let p = self.k * c;
        Projection::InFront { uv: Vector2::new(p.x / p.z, p.y / p.z), depth: c.z }
    }

    pub fn is_visible(&self, x: &Point3<f64>) -> bool {
        match self.project_point(x) {
            Projection::InFront { uv, .. } => {
                uv.x >= 0.0 && uv.x < self.width as f64 && uv.y >= 0.0 && uv.y < self.height as f64
            }
            Projection::Behind => false,
        }
    }
}

/// Free-function form of [`Camera::pixel_to_ray`].
pub fn pixel_to_ray(camera: &Camera, pixel: Vector2<f64>) -> Result<Ray> {
    camera.pixel_to_ray(pixel)
}

/// Free-function form of [`Camera::project_point`].
pub fn project_point(camera: &Camera, x: &Point3<f64>) -> Projection {
    camera.project_point(x)
}

/// Free-function form of [`Camera::is_visible`].
pub fn is_visible(x: &Point3<f64>, camera: &Camera) -> bool {
    camera.is_visible(x)
}

/// `(sin(2^L pi p), cos(2^L pi p))` for `L = l_min..=l_max`.
pub fn circular_encode(p: f64, l_min: i32, l_max: i32) -> Vec<f64> {
    assert!(l_min <= l_max, "circular_encode: l_min {l_min} > l_max {l_max}");
    let mut out = Vec::with_capacity(encoding_width(l_min, l_max));
    for l in l_min..=l_max {
        let a = 2f64.powi(l) * std::f64::consts::PI * p;
        out.push(a.sin());
        out.push(a.cos());
    }
    out
}

/// Output length of [`circular_encode`] per scalar.
pub fn encoding_width(l_min: i32, l_max: i32) -> usize {
    2 * (l_max - l_min + 1) as usize
}

/// Inclusive frequency range of a circular encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingRange {
    pub l_min: i32,
    pub l_max: i32,
}

impl EncodingRange {
    pub const fn new(l_min: i32, l_max: i32) -> Self {
        Self { l_min, l_max }
    }

    /// Encoded width of a 3-vector.
    pub fn width3(&self) -> usize {
        3 * encoding_width(self.l_min, self.l_max)
    }

    /// Angular frequencies `2^L pi`.
    pub fn frequencies(&self) -> Vec<f64> {
        (self.l_min..=self.l_max).map(|l| 2f64.powi(l) * std::f64::consts::PI).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple_camera(focal: f64, cx: f64, cy: f64) -> Camera {
        Camera {
            k: Matrix3::new(focal, 0.0, cx, 0.0, focal, cy, 0.0, 0.0, 1.0),
            r: Matrix3::identity(),
            t: Vector3::zeros(),
            width: 32,
            height: 32,
            t_near: 0.1,
            t_far: 10.0,
        }
    }

    #[test]
    fn principal_point_ray_is_optical_axis() {
        let cam = simple_camera(100.0, 16.0, 16.0);
        let ray = cam.pixel_to_ray(Vector2::new(16.0, 16.0)).unwrap();
        assert!((ray.direction - Vector3::z()).norm() < 1e-15);
        assert_eq!(ray.origin, Point3::origin());
    }

    #[test]
    fn off_axis_ray_direction() {
        let mut cam = simple_camera(100.0, 16.0, 16.0);
        cam.width = 200;
        let ray = cam.pixel_to_ray(Vector2::new(116.0, 16.0)).unwrap();
        let expect = Vector3::new(1.0, 0.0, 1.0) / 2f64.sqrt();
        assert!((ray.direction - expect).norm() < 1e-12);
    }

    #[test]
    fn out_of_bounds_pixel_is_rejected() {
        let cam = simple_camera(100.0, 16.0, 16.0);
        assert!(cam.pixel_to_ray(Vector2::new(32.0, 1.0)).is_err());
        assert!(cam.pixel_to_ray(Vector2::new(-0.1, 1.0)).is_err());
    }

    #[test]
    fn projection_examples() {
        let cam = simple_camera(100.0, 16.0, 16.0);
        match cam.project_point(&Point3::new(0.0, 0.0, 1.0)) {
            Projection::InFront { uv, depth } => {
                assert_eq!(uv, Vector2::new(16.0, 16.0));
                assert_eq!(depth, 1.0);
            }
            Projection::Behind => panic!("in front"),
        }
        let cam = simple_camera(100.0, 0.0, 0.0);
        match cam.project_point(&Point3::new(0.5, 0.0, 2.0)) {
            Projection::InFront { uv, depth } => {
                assert!((uv - Vector2::new(25.0, 0.0)).norm() < 1e-12);
                assert_eq!(depth, 2.0);
            }
            Projection::Behind => panic!("in front"),
        }
        assert_eq!(cam.project_point(&cam.center()), Projection::Behind);
    }

    #[test]
    fn visibility_examples() {
        let cam = simple_camera(100.0, 16.0, 16.0);
        assert!(cam.is_visible(&Point3::new(0.0, 0.0, 1.0)));
        assert!(!cam.is_visible(&Point3::new(0.0, 0.0, -1.0)));
        // u = 16 + 100 * x / z = width + 1
        let x = (32.0 + 1.0 - 16.0) / 100.0;
        assert!(!cam.is_visible(&Point3::new(x, -0.16, 1.0)));
    }

    #[test]
    fn encoding_examples() {
        let e = circular_encode(0.0, -3, 2);
        for pair in e.chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
        let e = circular_encode(0.5, 0, 1);
        let expect = [1.0, 0.0, 0.0, -1.0];
        for (a, b) in e.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(circular_encode(0.3, -8, 8).len(), 34);
        assert_eq!(circular_encode(0.3, 0, 4).len(), 10);
    }

    #[test]
    fn look_at_points_forward() {
        let k = Camera::intrinsics(30.0, 32, 32);
        let cam = Camera::look_at(Point3::new(3.0, 0.0, 1.5), Point3::new(0.0, 0.0, 0.5), k, 32, 32, 0.1, 10.0).unwrap();
        let ray = cam.pixel_to_ray(Vector2::new(16.0, 16.0)).unwrap();
        let expect = (Point3::new(0.0, 0.0, 0.5) - Point3::new(3.0, 0.0, 1.5)).normalize();
        assert!((ray.direction - expect).norm() < 1e-12);
        // Image-up is world-up: a higher point projects to a smaller row.
        let hi = cam.project_point(&Point3::new(0.0, 0.0, 1.5));
        let lo = cam.project_point(&Point3::new(0.0, 0.0, -0.5));
        match (hi, lo) {
            (Projection::InFront { uv: a, .. }, Projection::InFront { uv: b, .. }) => assert!(a.y < b.y),
            _ => panic!("both in front"),
        }
    }
}
