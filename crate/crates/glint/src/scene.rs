//! Cameras, analytic test scenes and dataset I/O.
//!
//! Synthetic scenes are built from exact signed-distance primitives with
//! known materials and a known SG environment, so every later stage has an
//! oracle to compare against.  Datasets live on disk as
//! `cameras.json` + `linear/{idx:04}.pfm` + `images/{idx:04}.png` with an
//! optional `gt/` directory carrying the generator's ground truth.

use crate::err::{Error, Result};
use crate::imageio::{read_pfm, FloatImage};
use crate::rng::{stream, tag};
use crate::sg::{BrdfParams, Rgb, SgMixture};
use crate::vec3::{v3, Vec3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Everything happens inside this sphere; ray marching clips against it and
/// scene generators must keep geometry within [`GEOMETRY_RADIUS`].
pub const SCENE_RADIUS: f64 = 1.0;
pub const GEOMETRY_RADIUS: f64 = 0.8;

// ---------------------------------------------------------------------------
// cameras

/// Pinhole camera: OpenCV-style frame (x right, y down, z forward), pose
/// stored as the world-from-camera rigid transform.
#[derive(Clone, Debug)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-from-camera rotation, rows indexed [row][col].
    pub rot: [[f64; 3]; 3],
    /// Camera center in world coordinates.
    pub pos: Vec3,
}

#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub t_near: f64,
    pub t_far: f64,
    /// True when the ray misses the scene bounding sphere entirely.
    pub background: bool,
}

impl Camera {
    pub fn look_at(pos: Vec3, target: Vec3, width: usize, height: usize, focal: f64) -> Camera {
        let forward = (target - pos).normalized();
        let up = if forward.z.abs() > 0.95 { v3(0.0, 1.0, 0.0) } else { v3(0.0, 0.0, 1.0) };
        let right = forward.cross(up).normalized();
        let down = forward.cross(right).normalized();
        let rot = [
            [right.x, down.x, forward.x],
            [right.y, down.y, forward.y],
            [right.z, down.z, forward.z],
        ];
        Camera {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rot,
            pos,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::contract("camera", format!("non-positive focal ({}, {})", self.fx, self.fy)));
        }
        let r = &self.rot;
        let col = |j: usize| v3(r[0][j], r[1][j], r[2][j]);
        for j in 0..3 {
            for k in j..3 {
                let d = col(j).dot(col(k));
                let want = if j == k { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-6 {
                    return Err(Error::contract(
                        "camera",
                        format!("rotation not orthonormal: col{j}·col{k} = {d}"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn cam_to_world(&self, d: Vec3) -> Vec3 {
        let r = &self.rot;
        v3(
            r[0][0] * d.x + r[0][1] * d.y + r[0][2] * d.z,
            r[1][0] * d.x + r[1][1] * d.y + r[1][2] * d.z,
            r[2][0] * d.x + r[2][1] * d.y + r[2][2] * d.z,
        )
    }

    pub fn world_to_cam(&self, p: Vec3) -> Vec3 {
        let d = p - self.pos;
        let r = &self.rot;
        v3(
            r[0][0] * d.x + r[1][0] * d.y + r[2][0] * d.z,
            r[0][1] * d.x + r[1][1] * d.y + r[2][1] * d.z,
            r[0][2] * d.x + r[1][2] * d.y + r[2][2] * d.z,
        )
    }

    /// Ray through continuous pixel coordinates (px, py).  t bounds come from
    /// intersecting the scene bounding sphere; a miss flags a background ray.
    pub fn ray_through(&self, px: f64, py: f64) -> Ray {
        let d_cam = v3((px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0).normalized();
        let dir = self.cam_to_world(d_cam);
        let (t_near, t_far, background) = sphere_bounds(self.pos, dir, SCENE_RADIUS);
        Ray { origin: self.pos, dir, t_near, t_far, background }
    }

    /// Ray through the center of integer pixel (ix, iy).
    pub fn ray_for_pixel(&self, ix: usize, iy: usize) -> Ray {
        self.ray_through(ix as f64 + 0.5, iy as f64 + 0.5)
    }

    /// World point to pixel coordinates; `None` behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        let c = self.world_to_cam(p);
        if c.z <= 1e-9 {
            return None;
        }
        Some((self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy))
    }
}

/// Entry/exit parameters of o + t·d against the sphere ‖x‖ = radius.
pub fn sphere_bounds(o: Vec3, d: Vec3, radius: f64) -> (f64, f64, bool) {
    let b = o.dot(d);
    let c = o.norm2() - radius * radius;
    let disc = b * b - c;
    if disc <= 0.0 {
        return (0.0, 0.0, true);
    }
    let s = disc.sqrt();
    let t0 = (-b - s).max(1e-4);
    let t1 = -b + s;
    if t1 <= t0 {
        return (0.0, 0.0, true);
    }
    (t0, t1, false)
}

pub fn generate_rays(camera: &Camera, pixel_coords: &[(f64, f64)]) -> Vec<Ray> {
    pixel_coords.iter().map(|&(px, py)| camera.ray_through(px, py)).collect()
}

// ---------------------------------------------------------------------------
// analytic scenes

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    Box { center: Vec3, half: Vec3 },
    Torus { center: Vec3, major: f64, minor: f64 },
    SmoothUnion { a: std::boxed::Box<Shape>, b: std::boxed::Box<Shape>, k: f64 },
}

impl Shape {
    /// Exact signed distance for the basic shapes; the smooth union is a
    /// 1-Lipschitz lower bound of the true distance.
    pub fn sdf(&self, x: Vec3) -> f64 {
        match self {
            Shape::Sphere { center, radius } => (x - *center).norm() - radius,
            Shape::Box { center, half } => {
                let q = (x - *center).abs() - *half;
                q.max(Vec3::ZERO).norm() + q.max_elem().min(0.0)
            }
            Shape::Torus { center, major, minor } => {
                let p = x - *center;
                let ring = (p.x * p.x + p.y * p.y).sqrt() - major;
                (ring * ring + p.z * p.z).sqrt() - minor
            }
            Shape::SmoothUnion { a, b, k } => smooth_min(a.sdf(x), b.sdf(x), *k),
        }
    }
}

/// Polynomial smooth min; reduces to min for |a−b| ≥ k and stays 1-Lipschitz.
fn smooth_min(a: f64, b: f64, k: f64) -> f64 {
    let h = (k - (a - b).abs()).max(0.0) / k;
    a.min(b) - h * h * k * 0.25
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub brdf: BrdfParams,
    /// Scales the specular lobe; 0 makes the primitive purely Lambertian.
    pub specular_scale: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub name: String,
    pub primitives: Vec<Primitive>,
    pub env: SgMixture,
}

impl AnalyticScene {
    /// Union of all primitives.
    pub fn sdf(&self, x: Vec3) -> f64 {
        let mut s = f64::INFINITY;
        for p in &self.primitives {
            s = s.min(p.shape.sdf(x));
        }
        s
    }

    /// Index of the primitive whose surface is closest to x; materials at a
    /// hit point come from here.
    pub fn nearest_primitive(&self, x: Vec3) -> usize {
        let mut best = 0;
        let mut best_s = f64::INFINITY;
        for (i, p) in self.primitives.iter().enumerate() {
            let s = p.shape.sdf(x).abs();
            if s < best_s {
                best_s = s;
                best = i;
            }
        }
        best
    }

    /// Central-difference surface normal.
    pub fn normal(&self, x: Vec3) -> Vec3 {
        const H: f64 = 1e-5;
        v3(
            self.sdf(x + v3(H, 0.0, 0.0)) - self.sdf(x - v3(H, 0.0, 0.0)),
            self.sdf(x + v3(0.0, H, 0.0)) - self.sdf(x - v3(0.0, H, 0.0)),
            self.sdf(x + v3(0.0, 0.0, H)) - self.sdf(x - v3(0.0, 0.0, H)),
        )
        .normalized()
    }

    pub fn material_at(&self, x: Vec3) -> (&BrdfParams, f64) {
        let p = &self.primitives[self.nearest_primitive(x)];
        (&p.brdf, p.specular_scale)
    }

    pub fn env_radiance(&self, w: Vec3) -> Rgb {
        self.env.eval(w)
    }
}

/// March o + t·d from t0; `Some(t)` at the first surface crossing.  The hit
/// parameter is polished with a couple of Newton steps so the residual
/// distance is far below the march tolerance.
pub fn sphere_trace(
    scene: &AnalyticScene,
    o: Vec3,
    d: Vec3,
    t0: f64,
    t1: f64,
    max_steps: usize,
    tol: f64,
) -> Option<f64> {
    let mut t = t0;
    for _ in 0..max_steps {
        let s = scene.sdf(o + d * t);
        if s < tol {
            // Newton polish along the ray
            for _ in 0..3 {
                let x = o + d * t;
                let g = self_grad(scene, x);
                let dd = g.dot(d);
                if dd.abs() > 1e-9 {
                    t -= scene.sdf(x) / dd;
                }
            }
            return (t >= t0 - tol && t <= t1).then_some(t);
        }
        t += s;
        if t > t1 {
            return None;
        }
    }
    (scene.sdf(o + d * t) < 10.0 * tol).then_some(t)
}

fn self_grad(scene: &AnalyticScene, x: Vec3) -> Vec3 {
    const H: f64 = 1e-6;
    v3(
        scene.sdf(x + v3(H, 0.0, 0.0)) - scene.sdf(x - v3(H, 0.0, 0.0)),
        scene.sdf(x + v3(0.0, H, 0.0)) - scene.sdf(x - v3(0.0, H, 0.0)),
        scene.sdf(x + v3(0.0, 0.0, H)) - scene.sdf(x - v3(0.0, 0.0, H)),
    ) / (2.0 * H)
}

/// Uniformly-seeded points projected onto the zero level set; serves as the
/// geometry ground truth for chamfer evaluation.
pub fn sample_surface_points(scene: &AnalyticScene, n: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = stream(seed, &[tag("surface-points")]);
    let mut pts = Vec::with_capacity(n);
    let mut tries = 0usize;
    while pts.len() < n {
        tries += 1;
        assert!(tries < 1000 * n, "surface sampling failed to converge");
        let o = crate::rng::unit_sphere(&mut rng) * 1.2;
        let interior = crate::rng::unit_sphere(&mut rng) * (rng.gen::<f64>().cbrt() * 0.6);
        let d = (interior - o).normalized();
        if let Some(t) = sphere_trace(scene, o, d, 0.0, 3.0, 256, 1e-7) {
            let mut x = o + d * t;
            for _ in 0..3 {
                x -= self_grad(scene, x).normalized() * scene.sdf(x);
            }
            if scene.sdf(x).abs() < 1e-6 {
                pts.push(x);
            }
        }
    }
    pts
}

/// Shared four-lobe studio environment: key, fill, rim and a broad ambient.
pub fn default_env() -> SgMixture {
    use crate::sg::SphericalGaussian as Sg;
    SgMixture::new(vec![
        Sg::new(v3(0.5, 0.6, 0.62).normalized(), 12.0, v3(2.2, 2.05, 1.85)),
        Sg::new(v3(-0.7, 0.25, 0.4).normalized(), 4.0, v3(0.35, 0.42, 0.55)),
        Sg::new(v3(0.15, -0.8, 0.55).normalized(), 9.0, v3(0.72, 0.6, 0.5)),
        Sg::new(v3(0.0, 0.0, 1.0), 0.8, v3(0.14, 0.15, 0.17)),
    ])
}

/// Built-in scenes.  `glossy-sphere` exercises the specular path (its true
/// specular scale is 0.5, away from the renderer's default of 1, so the
/// specular-albedo head has something to recover); `lambert-sphere` is purely
/// diffuse; `two-sphere-occlusion` creates real shadowing for visibility
/// training.
pub fn preset(name: &str) -> Result<AnalyticScene> {
    let scene = match name {
        "glossy-sphere" => AnalyticScene {
            name: name.to_string(),
            primitives: vec![Primitive {
                shape: Shape::Sphere { center: Vec3::ZERO, radius: 0.5 },
                brdf: BrdfParams::new(v3(0.62, 0.28, 0.2), 0.3),
                specular_scale: 0.5,
            }],
            env: default_env(),
        },
        "lambert-sphere" => AnalyticScene {
            name: name.to_string(),
            primitives: vec![Primitive {
                shape: Shape::Sphere { center: Vec3::ZERO, radius: 0.5 },
                brdf: BrdfParams::new(v3(0.75, 0.45, 0.22), 0.7),
                specular_scale: 0.0,
            }],
            env: default_env(),
        },
        "two-sphere-occlusion" => AnalyticScene {
            name: name.to_string(),
            primitives: vec![
                Primitive {
                    shape: Shape::Sphere { center: v3(-0.42, 0.0, 0.0), radius: 0.35 },
                    brdf: BrdfParams::new(v3(0.7, 0.32, 0.25), 0.5),
                    specular_scale: 0.2,
                },
                Primitive {
                    shape: Shape::Sphere { center: v3(0.42, 0.0, 0.0), radius: 0.35 },
                    brdf: BrdfParams::new(v3(0.25, 0.45, 0.7), 0.5),
                    specular_scale: 0.2,
                },
            ],
            env: default_env(),
        },
        other => {
            return Err(Error::Config(format!(
                "unknown scene preset {other:?} (have glossy-sphere, lambert-sphere, two-sphere-occlusion)"
            )))
        }
    };
    Ok(scene)
}

// ---------------------------------------------------------------------------
// datasets

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug)]
pub struct View {
    pub name: String,
    pub camera: Camera,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
struct ViewJson {
    image: String,
    split: String,
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    /// 4×4 world-from-camera, row-major.
    world_from_camera: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CamerasJson {
    views: Vec<ViewJson>,
}

fn view_to_json(v: &View) -> ViewJson {
    let c = &v.camera;
    let t = c.pos;
    let r = &c.rot;
    let mut m = Vec::with_capacity(16);
    for i in 0..3 {
        m.extend_from_slice(&[r[i][0], r[i][1], r[i][2], [t.x, t.y, t.z][i]]);
    }
    m.extend_from_slice(&[0.0, 0.0, 0.0, 1.0]);
    ViewJson {
        image: v.name.clone(),
        split: match v.split {
            Split::Train => "train".to_string(),
            Split::Test => "test".to_string(),
        },
        width: c.width,
        height: c.height,
        fx: c.fx,
        fy: c.fy,
        cx: c.cx,
        cy: c.cy,
        world_from_camera: m,
    }
}

fn view_from_json(j: &ViewJson, path: &Path) -> Result<View> {
    let bad = |d: String| Error::parse("cameras.json", path, d);
    if j.world_from_camera.len() != 16 {
        return Err(bad(format!(
            "view {}: world_from_camera must have 16 entries, got {}",
            j.image,
            j.world_from_camera.len()
        )));
    }
    let m = &j.world_from_camera;
    let bottom_ok = m[12] == 0.0 && m[13] == 0.0 && m[14] == 0.0 && m[15] == 1.0;
    if !bottom_ok {
        return Err(bad(format!("view {}: last row must be 0 0 0 1", j.image)));
    }
    let rot = [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]];
    let camera = Camera {
        fx: j.fx,
        fy: j.fy,
        cx: j.cx,
        cy: j.cy,
        width: j.width,
        height: j.height,
        rot,
        pos: v3(m[3], m[7], m[11]),
    };
    camera
        .validate()
        .map_err(|e| bad(format!("view {}: {e}", j.image)))?;
    let split = match j.split.as_str() {
        "train" => Split::Train,
        "test" => Split::Test,
        other => return Err(bad(format!("view {}: unknown split {other:?}", j.image))),
    };
    Ok(View { name: j.image.clone(), camera, split })
}

#[derive(Clone, Debug)]
pub struct GtAssets {
    pub scene: AnalyticScene,
    pub surface_points: Vec<Vec3>,
    /// Per-view diffuse albedo at the primary hit, parallel to the dataset
    /// views; empty when the generator did not emit them.
    pub albedo: Vec<FloatImage>,
}

pub struct SceneDataset {
    pub dir: PathBuf,
    pub views: Vec<View>,
    /// Linear radiance images, parallel to `views`.
    pub linear: Vec<FloatImage>,
    pub gt: Option<GtAssets>,
}

impl SceneDataset {
    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.views.len()).filter(|&i| self.views[i].split == Split::Train).collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.views.len()).filter(|&i| self.views[i].split == Split::Test).collect()
    }

    pub fn load(dir: &Path) -> Result<SceneDataset> {
        let cam_path = dir.join("cameras.json");
        let text = std::fs::read_to_string(&cam_path).map_err(|e| Error::io(&cam_path, e))?;
        let parsed: CamerasJson = serde_json::from_str(&text)
            .map_err(|e| Error::parse("cameras.json", &cam_path, e.to_string()))?;
        let mut views: Vec<View> = parsed
            .views
            .iter()
            .map(|j| view_from_json(j, &cam_path))
            .collect::<Result<_>>()?;
        views.sort_by(|a, b| a.name.cmp(&b.name));

        // every linear image must be listed; every listed view must exist
        let lin_dir = dir.join("linear");
        let mut on_disk: Vec<String> = Vec::new();
        let entries = std::fs::read_dir(&lin_dir).map_err(|e| Error::io(&lin_dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&lin_dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(stem) = name.strip_suffix(".pfm") {
                on_disk.push(stem.to_string());
            }
        }
        on_disk.sort();
        for stem in &on_disk {
            if !views.iter().any(|v| &v.name == stem) {
                return Err(Error::parse(
                    "dataset",
                    &cam_path,
                    format!("image linear/{stem}.pfm has no camera entry"),
                ));
            }
        }

        let mut linear = Vec::with_capacity(views.len());
        for v in &views {
            let p = lin_dir.join(format!("{}.pfm", v.name));
            let img = read_pfm(&p)?;
            if img.width != v.camera.width || img.height != v.camera.height {
                return Err(Error::parse(
                    "dataset",
                    &p,
                    format!(
                        "image is {}x{} but camera says {}x{}",
                        img.width, img.height, v.camera.width, v.camera.height
                    ),
                ));
            }
            linear.push(img);
        }
        if let Some(first) = views.first() {
            let (w, h) = (first.camera.width, first.camera.height);
            if views.iter().any(|v| v.camera.width != w || v.camera.height != h) {
                return Err(Error::parse(
                    "dataset",
                    &cam_path,
                    "mixed resolutions within one dataset".to_string(),
                ));
            }
        }

        let gt = load_gt(dir, &views)?;
        Ok(SceneDataset { dir: dir.to_path_buf(), views, linear, gt })
    }
}

fn load_gt(dir: &Path, views: &[View]) -> Result<Option<GtAssets>> {
    let scene_path = dir.join("gt").join("scene.json");
    if !scene_path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&scene_path).map_err(|e| Error::io(&scene_path, e))?;
    let scene: AnalyticScene = serde_json::from_str(&text)
        .map_err(|e| Error::parse("scene.json", &scene_path, e.to_string()))?;
    let pts_path = dir.join("gt").join("surface_points.txt");
    let mut surface_points = Vec::new();
    if pts_path.exists() {
        let text = std::fs::read_to_string(&pts_path).map_err(|e| Error::io(&pts_path, e))?;
        for (i, line) in text.lines().enumerate() {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse("surface_points", &pts_path, format!("line {}: {e}", i + 1)))?;
            if vals.len() != 3 {
                return Err(Error::parse(
                    "surface_points",
                    &pts_path,
                    format!("line {}: expected 3 fields", i + 1),
                ));
            }
            surface_points.push(v3(vals[0], vals[1], vals[2]));
        }
    }
    let mut albedo = Vec::new();
    let alb_dir = dir.join("gt").join("albedo");
    if alb_dir.is_dir() {
        for v in views {
            let p = alb_dir.join(format!("{}.pfm", v.name));
            albedo.push(read_pfm(&p)?);
        }
    }
    Ok(Some(GtAssets { scene, surface_points, albedo }))
}

// ---------------------------------------------------------------------------
// synthetic generation

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub scene: String,
    pub train_views: usize,
    pub test_views: usize,
    pub width: usize,
    pub height: usize,
    pub spp: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(scene: &str, seed: u64) -> SynthSpec {
        SynthSpec {
            scene: scene.to_string(),
            train_views: 50,
            test_views: 10,
            width: 64,
            height: 64,
            spp: 512,
            seed,
        }
    }
}

/// Cameras on a jittered sphere of radius ≈3 looking at the origin, spread by
/// a Fibonacci spiral with the poles pulled in to keep `look_at` stable.
pub fn camera_rig(count: usize, seed: u64, width: usize, height: usize) -> Vec<Camera> {
    let mut rng = stream(seed, &[tag("camera-rig")]);
    let focal = 105.0 * width as f64 / 64.0;
    crate::sg::fibonacci_sphere(count)
        .map(|d| {
            let dir = v3(d.x, d.y, d.z * 0.82).normalized();
            let radius = 3.0 + rng.gen_range(-0.1..0.1);
            Camera::look_at(dir * radius, Vec3::ZERO, width, height, focal)
        })
        .collect()
}

/// Generate a synthetic dataset directory: Monte-Carlo images, cameras and
/// the ground-truth assets later stages evaluate against.  Byte-identical for
/// a fixed spec.
pub fn make_synthetic(spec: &SynthSpec, out: &Path) -> Result<SceneDataset> {
    let scene = preset(&spec.scene)?;
    let total = spec.train_views + spec.test_views;
    let cams = camera_rig(total, spec.seed, spec.width, spec.height);
    // spread the test views through the rig rather than clustering them
    let stride = (total / spec.test_views.max(1)).max(1);
    let is_test = |i: usize| spec.test_views > 0 && i % stride == stride / 2 && i / stride < spec.test_views;

    for sub in ["images", "linear", "gt", "gt/albedo"] {
        let p = out.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }

    let mut views = Vec::with_capacity(total);
    let mut linears = Vec::with_capacity(total);
    let mut albedos = Vec::with_capacity(total);
    for (i, cam) in cams.iter().enumerate() {
        let name = format!("{i:04}");
        let opts = crate::tracer::TraceOpts {
            spp: spec.spp,
            bounces: 1,
            shadows: true,
            seed: spec.seed,
            view_id: i as u64,
        };
        let (img, _var) = crate::tracer::mc_render(&scene, cam, &opts);
        crate::imageio::write_pfm(&out.join("linear").join(format!("{name}.pfm")), &img)?;
        crate::imageio::write_png_tonemapped(&out.join("images").join(format!("{name}.png")), &img)?;
        let alb = crate::tracer::albedo_map(&scene, cam);
        crate::imageio::write_pfm(&out.join("gt").join("albedo").join(format!("{name}.pfm")), &alb)?;
        views.push(View {
            name,
            camera: cam.clone(),
            split: if is_test(i) { Split::Test } else { Split::Train },
        });
        linears.push(img);
        albedos.push(alb);
    }

    let cam_json = CamerasJson { views: views.iter().map(view_to_json).collect() };
    let cam_path = out.join("cameras.json");
    let text = serde_json::to_string_pretty(&cam_json)
        .map_err(|e| Error::parse("cameras.json", &cam_path, e.to_string()))?;
    std::fs::write(&cam_path, text).map_err(|e| Error::io(&cam_path, e))?;

    let scene_path = out.join("gt").join("scene.json");
    let text = serde_json::to_string_pretty(&scene)
        .map_err(|e| Error::parse("scene.json", &scene_path, e.to_string()))?;
    std::fs::write(&scene_path, text).map_err(|e| Error::io(&scene_path, e))?;

    let env_path = out.join("gt").join("env_sg.txt");
    std::fs::write(&env_path, scene.env.to_text()).map_err(|e| Error::io(&env_path, e))?;

    let pts = sample_surface_points(&scene, 10_000, spec.seed ^ 0x5f5f);
    let mut pts_text = String::with_capacity(pts.len() * 64);
    for p in &pts {
        pts_text.push_str(&format!("{:.12e} {:.12e} {:.12e}\n", p.x, p.y, p.z));
    }
    let pts_path = out.join("gt").join("surface_points.txt");
    std::fs::write(&pts_path, pts_text).map_err(|e| Error::io(&pts_path, e))?;

    Ok(SceneDataset {
        dir: out.to_path_buf(),
        views,
        linear: linears,
        gt: Some(GtAssets { scene, surface_points: pts, albedo: albedos }),
    })
}
