//! Procedural MiniCity scenes, an analytic RGB-D raytracer, and the dataset
//! directory format.
//!
//! A scene is a ground plane with a handful of axis-aligned boxes around a
//! point of interest, under a sky gradient and a directional sun. Cameras
//! circle the point of interest and look at it.
//!
//! On disk:
//!
//! ```text
//! <root>/manifest.json
//! <root>/<scene id>/scene.json
//! <root>/<scene id>/view_XX.png          8-bit RGB
//! <root>/<scene id>/view_XX.depth        u32 width, u32 height (LE), then f32 LE row-major
//! <root>/<scene id>/view_XX.camera.json  K, R (row-major), t, size, ray bounds
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::Camera;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
/// Half-width of the square world footprint, meters.
pub const WORLD_HALF_EXTENT: f64 = 20.0;
/// Boxes near the point of interest stay inside this radius (footprint included).
pub const INNER_RADIUS: f64 = 2.5;
/// Boxes of the outer ring stay outside this radius.
pub const OUTER_RADIUS: f64 = 5.2;
/// Horizontal camera distance range from the point of interest.
pub const CAMERA_RADIUS: (f64, f64) = (3.2, 4.4);
pub const CAMERA_HEIGHT: (f64, f64) = (1.0, 2.5);
const AMBIENT: f64 = 0.35;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub center: [f64; 3],
    pub size: [f64; 3],
    /// Albedo of the faces `-x, +x, -y, +y, -z, +z`.
    pub albedo: [[f64; 3]; 6],
    /// Checker cell size in meters, if textured.
    pub checker: Option<f64>,
}

impl SceneBox {
    pub fn min(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.center[i] - 0.5 * self.size[i])
    }

    pub fn max(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.center[i] + 0.5 * self.size[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiniScene {
    pub seed: u64,
    pub ground_height: f64,
    pub ground_albedo: [f64; 3],
    pub ground_checker: f64,
    pub boxes: Vec<SceneBox>,
    pub sky_zenith: [f64; 3],
    pub sky_horizon: [f64; 3],
    /// Unit direction towards the sun.
    pub sun: [f64; 3],
    pub point_of_interest: [f64; 3],
}

fn color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [0, 1, 2].map(|_| rng.random_range(lo..hi))
}

/// Deterministic scene from `seed`: 3 to 8 boxes, some near the point of
/// interest and some on an outer ring.
pub fn generate_scene(seed: u64) -> MiniScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(3..=8usize);
    let mut boxes = Vec::with_capacity(n);
    for i in 0..n {
        let size: [f64; 3] = [rng.random_range(0.6..2.0), rng.random_range(0.6..2.0), rng.random_range(0.5..2.5)];
        let half_diag = 0.5 * size[0].hypot(size[1]);
        // At least one box near the point of interest so context views see something.
        let inner = i == 0 || rng.random_bool(0.5);
        let radius = if inner {
            rng.random_range(0.0..(INNER_RADIUS - half_diag).max(0.0) + 1e-9)
        } else {
            rng.random_range(OUTER_RADIUS + half_diag..12.0)
        };
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let base = color(&mut rng, 0.15, 0.95);
        let albedo = [0; 6].map(|_| {
            let k = rng.random_range(0.85..1.0);
            base.map(|c| c * k)
        });
        let checker = rng.random_bool(0.4).then(|| rng.random_range(0.25..0.6));
        boxes.push(SceneBox {
            center: [radius * angle.cos(), radius * angle.sin(), 0.5 * size[2]],
            size,
            albedo,
            checker,
        });
    }
    let elevation = rng.random_range(0.4..1.2f64);
    let azimuth = rng.random_range(0.0..std::f64::consts::TAU);
    let sun = [elevation.cos() * azimuth.cos(), elevation.cos() * azimuth.sin(), elevation.sin()];
    MiniScene {
        seed,
        ground_height: 0.0,
        ground_albedo: color(&mut rng, 0.3, 0.6),
        ground_checker: rng.random_range(0.8..1.5),
        boxes,
        sky_zenith: [rng.random_range(0.2..0.45), rng.random_range(0.4..0.65), rng.random_range(0.75..0.95)],
        sky_horizon: color(&mut rng, 0.75, 0.95),
        sun,
        point_of_interest: [0.0, 0.0, rng.random_range(0.3..1.0)],
    }
}

impl MiniScene {
    /// Checks the scene invariants: boxes rest at or above the ground and inside the world.
    pub fn check_bounds(&self) -> bool {
        self.boxes.iter().all(|b| {
            let (lo, hi) = (b.min(), b.max());
            lo[2] >= self.ground_height - 1e-12
                && (0..2).all(|i| lo[i] >= -WORLD_HALF_EXTENT && hi[i] <= WORLD_HALF_EXTENT)
                && b.size.iter().all(|&s| s > 0.0)
        })
    }

    fn sky(&self, d: &Vector3<f64>) -> [f64; 3] {
        let k = d.z.max(0.0).sqrt();
        [0, 1, 2].map(|i| self.sky_horizon[i] + (self.sky_zenith[i] - self.sky_horizon[i]) * k)
    }

    fn shade(&self, albedo: [f64; 3], normal: Vector3<f64>, texture: f64) -> [f64; 3] {
        let sun = Vector3::from(self.sun);
        let light = AMBIENT + (1.0 - AMBIENT) * normal.dot(&sun).max(0.0);
        albedo.map(|a| (a * texture * light).clamp(0.0, 1.0))
    }

    /// Nearest surface hit `(t, rgb)` along a unit ray, if any.
    pub fn intersect(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<(f64, [f64; 3])> {
        let mut best: Option<(f64, [f64; 3])> = None;
        if dir.z < 0.0 {
            let t = (self.ground_height - origin.z) / dir.z;
            if t > 0.0 {
                let p = origin + dir * t;
                let s = self.ground_checker;
                let parity = ((p.x / s).floor() + (p.y / s).floor()).rem_euclid(2.0);
                // The checker fades out with distance so far ground reads as a flat colour.
                let fade = 1.0 - (p.x.hypot(p.y) / 10.0).clamp(0.0, 1.0);
                let texture = 1.0 - 0.3 * parity * fade;
                best = Some((t, self.shade(self.ground_albedo, Vector3::z(), texture)));
            }
        }
        for b in &self.boxes {
            if let Some((t, face)) = ray_box(origin, dir, &b.min(), &b.max()) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    let mut normal = Vector3::zeros();
                    normal[face / 2] = if face % 2 == 0 { -1.0 } else { 1.0 };
                    let texture = match b.checker {
                        Some(s) => {
                            let p = origin + dir * t;
                            // Offset along the normal so the face plane never sits on a cell boundary.
                            let q = p - normal * (0.5 * s);
                            let parity = ((q.x / s).floor() + (q.y / s).floor() + (q.z / s).floor()).rem_euclid(2.0);
                            1.0 - 0.3 * parity
                        }
                        None => 1.0,
                    };
                    best = Some((t, self.shade(b.albedo[face], normal, texture)));
                }
            }
        }
        best
    }
}

/// Slab test: entry distance and entered face (`2 * axis + (0 for min, 1 for max)`).
fn ray_box(o: &Point3<f64>, d: &Vector3<f64>, lo: &[f64; 3], hi: &[f64; 3]) -> Option<(f64, usize)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    let mut face = 0;
    for i in 0..3 {
        if d[i].abs() < 1e-300 {
            if o[i] < lo[i] || o[i] > hi[i] {
                return None;
            }
            continue;
        }
        let (a, b) = ((lo[i] - o[i]) / d[i], (hi[i] - o[i]) / d[i]);
        let (near, near_face) = if a < b { (a, 2 * i) } else { (b, 2 * i + 1) };
        if near > t0 {
            t0 = near;
            face = near_face;
        }
        t1 = t1.min(a.max(b));
    }
    (t0 <= t1 && t0 > 0.0).then_some((t0, face))
}

/// A rendered RGB-D view.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    /// Row-major 8-bit RGB.
    pub image: Vec<u8>,
    /// Distance along each pixel's unit ray; `t_far` where nothing is hit in range.
    pub depth: Vec<f32>,
    pub camera: Camera,
}

impl View {
    /// Image as row-major RGB in `[0, 1]`.
    pub fn image_f32(&self) -> Vec<f32> {
        self.image.iter().map(|&v| v as f32 / 255.0).collect()
    }

    pub fn pixel(&self, col: usize, row: usize) -> [f32; 3] {
        let i = (row * self.camera.width + col) * 3;
        [0, 1, 2].map(|c| self.image[i + c] as f32 / 255.0)
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Ground-truth image and depth through the center of every pixel.
pub fn raytrace_gt(scene: &MiniScene, camera: &Camera) -> (Vec<[f64; 3]>, Vec<f64>) {
    let n = camera.width * camera.height;
    let mut rgb = Vec::with_capacity(n);
    let mut depth = Vec::with_capacity(n);
    for row in 0..camera.height {
        for col in 0..camera.width {
            let ray = camera.pixel_center_ray(col, row);
            match scene.intersect(&ray.origin, &ray.direction) {
                Some((t, c)) => {
                    rgb.push(c);
                    depth.push(if t < camera.t_far { t } else { camera.t_far });
                }
                None => {
                    rgb.push(scene.sky(&ray.direction));
                    depth.push(camera.t_far);
                }
            }
        }
    }
    (rgb, depth)
}

/// Renders one view into its stored form.
pub fn render_view(scene: &MiniScene, camera: &Camera) -> View {
    let (rgb, depth) = raytrace_gt(scene, camera);
    View {
        image: rgb.iter().flat_map(|c| c.map(quantize)).collect(),
        depth: depth.iter().map(|&d| d as f32).collect(),
        camera: camera.clone(),
    }
}

/// Image geometry shared by every view of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view, degrees.
    pub fov_deg: f64,
    pub t_near: f64,
    pub t_far: f64,
}

impl ViewSpec {
    pub fn square(size: usize) -> Self {
        Self { width: size, height: size, fov_deg: 60.0, t_near: 0.5, t_far: 12.0 }
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        let focal = 0.5 * self.width as f64 / (0.5 * self.fov_deg.to_radians()).tan();
        Camera::intrinsics(focal, self.width, self.height)
    }
}

/// `n_views` cameras around the point of interest, looking at it with a
/// jittered target. All share the intrinsics of `spec`.
pub fn sample_views(scene: &MiniScene, seed: u64, n_views: usize, spec: &ViewSpec) -> Result<Vec<Camera>> {
    if n_views == 0 {
        return Err(Error::domain("need at least one view"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let poi = Point3::from(scene.point_of_interest);
    let k = spec.intrinsics();
    // Spread azimuths evenly with jitter so views cover the scene.
    let offset = rng.random_range(0.0..std::f64::consts::TAU);
    (0..n_views)
        .map(|i| {
            let step = std::f64::consts::TAU / n_views as f64;
            let az = offset + step * (i as f64 + rng.random_range(-0.3..0.3));
            let r = rng.random_range(CAMERA_RADIUS.0..CAMERA_RADIUS.1);
            let h = rng.random_range(CAMERA_HEIGHT.0..CAMERA_HEIGHT.1);
            let eye = Point3::new(poi.x + r * az.cos(), poi.y + r * az.sin(), h);
            let jitter = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.2..0.2));
            Camera::look_at(eye, poi + jitter, k, spec.width, spec.height, spec.t_near, spec.t_far)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    pub scene: MiniScene,
    pub views: Vec<View>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub spec: ViewSpec,
    pub scenes: Vec<SceneRecord>,
}

/// Decorrelated seed for item `index` of a stream seeded by `seed`.
pub fn mix_seed(seed: u64, index: usize) -> u64 {
    // SplitMix64 finalizer, so neighbouring indices give unrelated scenes.
    let mut z = seed.wrapping_add((index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_dataset(seed: u64, n_scenes: usize, n_views: usize, spec: ViewSpec) -> Result<SceneDataset> {
    let scenes = (0..n_scenes)
        .map(|i| {
            let s = mix_seed(seed, i);
            let scene = generate_scene(s);
            let cameras = sample_views(&scene, s ^ 0x5EED, n_views, &spec)?;
            let views = cameras.iter().map(|c| render_view(&scene, c)).collect();
            Ok(SceneRecord { id: format!("scene_{i:04}"), scene, views })
        })
        .collect::<Result<_>>()?;
    Ok(SceneDataset { spec, scenes })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    scene_count: usize,
    width: usize,
    height: usize,
    fov_deg: f64,
    t_near: f64,
    t_far: f64,
    scenes: Vec<ManifestScene>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestScene {
    id: String,
    views: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraJson {
    #[serde(rename = "K")]
    k: [f64; 9],
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
    width: usize,
    height: usize,
    t_near: f64,
    t_far: f64,
}

impl From<&Camera> for CameraJson {
    fn from(c: &Camera) -> Self {
        let rows = |m: &Matrix3<f64>| std::array::from_fn(|i| m[(i / 3, i % 3)]);
        Self {
            k: rows(&c.k),
            r: rows(&c.r),
            t: [c.t.x, c.t.y, c.t.z],
            width: c.width,
            height: c.height,
            t_near: c.t_near,
            t_far: c.t_far,
        }
    }
}

impl CameraJson {
    fn camera(&self) -> Camera {
        Camera {
            k: Matrix3::from_row_slice(&self.k),
            r: Matrix3::from_row_slice(&self.r),
            t: Vector3::from(self.t),
            width: self.width,
            height: self.height,
            t_near: self.t_near,
            t_far: self.t_far,
        }
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(value).expect("plain data serializes");
    s.push(b'\n');
    s
}

fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::data(path, format!("invalid JSON: {e}")))
}

pub fn write_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let err = |e: png::EncodingError| Error::data(path, format!("PNG encoding failed: {e}"));
    let mut w = enc.write_header().map_err(err)?;
    w.write_image_data(rgb).map_err(err)?;
    w.finish().map_err(err)
}

/// `(width, height, rgb)`.
pub fn read_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let err = |e: png::DecodingError| Error::data(path, format!("corrupt PNG: {e}"));
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(err)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(err)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::data(path, "expected 8-bit RGB"));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}

pub fn write_depth(path: &Path, width: usize, height: usize, depth: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + depth.len() * 4);
    bytes.extend((width as u32).to_le_bytes());
    bytes.extend((height as u32).to_le_bytes());
    for d in depth {
        bytes.extend(d.to_le_bytes());
    }
    write_bytes(path, &bytes)
}

/// `(width, height, depth)`.
pub fn read_depth(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = read_bytes(path)?;
    if bytes.len() < 8 {
        return Err(Error::data(path, "corrupt depth file: truncated header"));
    }
    let w = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let h = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let expected = w.checked_mul(h).and_then(|n| n.checked_mul(4)).and_then(|n| n.checked_add(8));
    if expected != Some(bytes.len()) {
        return Err(Error::data(
            path,
            format!("corrupt depth file: {} bytes for a {w}x{h} map", bytes.len()),
        ));
    }
    let depth = bytes[8..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok((w, h, depth))
}

/// Writes cameras as a JSON array in the per-view camera format.
pub fn write_cameras(path: &Path, cameras: &[Camera]) -> Result<()> {
    let list: Vec<CameraJson> = cameras.iter().map(CameraJson::from).collect();
    write_bytes(path, &json(&list))
}

pub fn read_cameras(path: &Path) -> Result<Vec<Camera>> {
    let list: Vec<CameraJson> = parse_json(path)?;
    if list.is_empty() {
        return Err(Error::data(path, "camera list is empty"));
    }
    list.iter()
        .enumerate()
        .map(|(i, c)| {
            let cam = c.camera();
            cam.validate().map_err(|e| Error::data(path, format!("camera {i}: {e}")))?;
            Ok(cam)
        })
        .collect()
}

/// `n` cameras on a horizontal circle around the point of interest, at the
/// mean distance and height of `around`, sharing its intrinsics and range.
pub fn orbit(scene: &MiniScene, around: &[Camera], n: usize) -> Result<Vec<Camera>> {
    let first = around.first().ok_or_else(|| Error::domain("orbit needs at least one reference camera"))?;
    if n == 0 {
        return Err(Error::domain("orbit needs at least one frame"));
    }
    let poi = Point3::from(scene.point_of_interest);
    let centers: Vec<Point3<f64>> = around.iter().map(|c| c.center()).collect();
    let radius = centers.iter().map(|c| (c.x - poi.x).hypot(c.y - poi.y)).sum::<f64>() / centers.len() as f64;
    let height = centers.iter().map(|c| c.z).sum::<f64>() / centers.len() as f64;
    let start = (centers[0].y - poi.y).atan2(centers[0].x - poi.x);
    (0..n)
        .map(|i| {
            let az = start + std::f64::consts::TAU * i as f64 / n as f64;
            let eye = Point3::new(poi.x + radius * az.cos(), poi.y + radius * az.sin(), height);
            Camera::look_at(eye, poi, first.k, first.width, first.height, first.t_near, first.t_far)
        })
        .collect()
}

fn view_name(i: usize) -> String {
    format!("view_{i:02}")
}

pub fn write_dataset(root: &Path, data: &SceneDataset) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let spec = data.spec;
    let mut scenes = Vec::with_capacity(data.scenes.len());
    for rec in &data.scenes {
        let dir = root.join(&rec.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_bytes(&dir.join("scene.json"), &json(&rec.scene))?;
        let mut names = Vec::with_capacity(rec.views.len());
        for (i, v) in rec.views.iter().enumerate() {
            let name = view_name(i);
            write_png(&dir.join(format!("{name}.png")), spec.width, spec.height, &v.image)?;
            write_depth(&dir.join(format!("{name}.depth")), spec.width, spec.height, &v.depth)?;
            write_bytes(&dir.join(format!("{name}.camera.json")), &json(&CameraJson::from(&v.camera)))?;
            names.push(name);
        }
        scenes.push(ManifestScene { id: rec.id.clone(), views: names });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        scene_count: scenes.len(),
        width: spec.width,
        height: spec.height,
        fov_deg: spec.fov_deg,
        t_near: spec.t_near,
        t_far: spec.t_far,
        scenes,
    };
    let path = root.join("manifest.json");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(&json(&manifest)).map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(root: &Path) -> Result<SceneDataset> {
    let mpath = root.join("manifest.json");
    let manifest: Manifest = parse_json(&mpath)?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::data(
            &mpath,
            format!("unsupported dataset version {} (expected {FORMAT_VERSION})", manifest.version),
        ));
    }
    if manifest.scene_count != manifest.scenes.len() {
        return Err(Error::data(&mpath, "scene_count does not match the scene list"));
    }
    let spec = ViewSpec {
        width: manifest.width,
        height: manifest.height,
        fov_deg: manifest.fov_deg,
        t_near: manifest.t_near,
        t_far: manifest.t_far,
    };
    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for ms in &manifest.scenes {
        let dir = root.join(&ms.id);
        let scene: MiniScene = parse_json(&dir.join("scene.json"))?;
        let mut views = Vec::with_capacity(ms.views.len());
        for name in &ms.views {
            let file = |ext: &str| -> PathBuf { dir.join(format!("{name}.{ext}")) };
            let cpath = file("camera.json");
            if !cpath.exists() {
                return Err(Error::data(&cpath, format!("missing camera for view {}/{name}", ms.id)));
            }
            let camera = parse_json::<CameraJson>(&cpath)?.camera();
            camera.validate().map_err(|e| Error::data(&cpath, e.to_string()))?;
            let ipath = file("png");
            let (w, h, image) = read_png(&ipath)?;
            let dpath = file("depth");
            let (dw, dh, depth) = read_depth(&dpath)?;
            for (path, (a, b)) in [(&ipath, (w, h)), (&dpath, (dw, dh)), (&cpath, (camera.width, camera.height))] {
                if (a, b) != (spec.width, spec.height) {
                    return Err(Error::data(
                        path,
                        format!("size {a}x{b} does not match the dataset size {}x{}", spec.width, spec.height),
                    ));
                }
            }
            views.push(View { image, depth, camera });
        }
        scenes.push(SceneRecord { id: ms.id.clone(), scene, views });
    }
    Ok(SceneDataset { spec, scenes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_on_box_hit_distance() {
        let b = SceneBox { center: [6.0, 0.0, 1.0], size: [2.0, 2.0, 2.0], albedo: [[0.5; 3]; 6], checker: None };
        let (t, face) = ray_box(&Point3::new(0.0, 0.0, 1.0), &Vector3::x(), &b.min(), &b.max()).unwrap();
        assert_eq!(t, 5.0);
        assert_eq!(face, 0);
    }

    #[test]
    fn ray_starting_inside_box_misses() {
        let lo = [-1.0; 3];
        let hi = [1.0; 3];
        assert!(ray_box(&Point3::origin(), &Vector3::x(), &lo, &hi).is_none());
    }

    #[test]
    fn mix_seed_spreads_indices() {
        let a = mix_seed(7, 0);
        let b = mix_seed(7, 1);
        assert_ne!(a, b);
        assert_eq!(a, mix_seed(7, 0));
        // The top index is used for model init and must not overflow.
        assert_ne!(mix_seed(7, usize::MAX), mix_seed(7, usize::MAX - 1));
    }
}
