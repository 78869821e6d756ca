//! Synthetic datasets: planar patch sets cut from one photograph, and toy 3D
//! scenes rendered analytically from primitive solids.

use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{apply_homography, Pose};
use crate::raster::{bundled_cat, load_png, Image, RasterError};
use crate::render::Camera;
use crate::warp::lie::sl3_exp;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("patch {patch} left the canvas in all {tries} draws")]
    PatchEscape { patch: usize, tries: usize },
    #[error("unknown toy scene preset `{0}` (expected blocks|sphere)")]
    UnknownPreset(String),
    #[error("invalid dataset parameter: {0}")]
    Invalid(String),
}

pub const MAX_RESAMPLE: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchSetConfig {
    pub patches: usize,
    pub patch_size: usize,
    /// Long side of the source canvas after downscaling; 0 keeps the original.
    pub long_side: usize,
    pub noise_h: f64,
    pub noise_t: f64,
}

impl Default for PatchSetConfig {
    fn default() -> Self {
        Self {
            patches: 5,
            patch_size: 64,
            long_side: 192,
            noise_h: 0.1,
            noise_t: 0.2,
        }
    }
}

/// Square patches cut from a source canvas. Coordinates are normalized by
/// `scale = max(W, H) / 2` pixels per unit; the canvas and every patch are
/// centered at the origin, so homography `t` maps patch coordinates of patch
/// `t` to canvas coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub source: Image,
    pub patch_size: usize,
    pub scale: f64,
    pub homographies: Vec<Matrix3<f64>>,
    pub patches: Vec<Image>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Normalized coordinate of continuous patch pixel position `(x, y)`.
    pub fn patch_coord(&self, x: f64, y: f64) -> Vector2<f64> {
        let h = self.patch_size as f64 / 2.0;
        Vector2::new((x - h) / self.scale, (y - h) / self.scale)
    }

    /// Normalized coordinate of the center of patch pixel `(px, py)`.
    pub fn pixel_coord(&self, px: usize, py: usize) -> Vector2<f64> {
        self.patch_coord(px as f64 + 0.5, py as f64 + 0.5)
    }

    pub fn corners(&self) -> [Vector2<f64>; 4] {
        patch_corners(self.patch_size, self.scale)
    }

    /// `n x n` evenly spaced points spanning the patch (corners included).
    pub fn grid(&self, n: usize) -> Vec<Vector2<f64>> {
        let p = self.patch_size as f64;
        let step = |i: usize| if n > 1 { p * i as f64 / (n - 1) as f64 } else { p / 2.0 };
        (0..n)
            .flat_map(|j| (0..n).map(move |i| (i, j)))
            .map(|(i, j)| self.patch_coord(step(i), step(j)))
            .collect()
    }

    /// Canvas color at normalized canvas coordinate `c`.
    pub fn source_at(&self, c: &Vector2<f64>) -> [f64; 3] {
        sample_canvas(&self.source, self.scale, c)
    }
}

fn patch_corners(size: usize, scale: f64) -> [Vector2<f64>; 4] {
    let h = size as f64 / 2.0 / scale;
    [
        Vector2::new(-h, -h),
        Vector2::new(h, -h),
        Vector2::new(h, h),
        Vector2::new(-h, h),
    ]
}

fn sample_canvas(img: &Image, scale: f64, c: &Vector2<f64>) -> [f64; 3] {
    img.sample(c.x * scale + img.width as f64 / 2.0, c.y * scale + img.height as f64 / 2.0)
}

/// Lie-algebra perturbation: all eight generators ~ N(0, noise_h²), then the
/// two translation generators redrawn ~ N(0, noise_t²).
pub fn perturbation<R: Rng>(rng: &mut R, noise_h: f64, noise_t: f64) -> [f64; 8] {
    let mut h = [0.0; 8];
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    for v in h.iter_mut() {
        *v = std.sample(rng) * noise_h;
    }
    h[0] = std.sample(rng) * noise_t;
    h[1] = std.sample(rng) * noise_t;
    h
}

fn inside_canvas(h: &Matrix3<f64>, corners: &[Vector2<f64>], half_w: f64, half_h: f64) -> bool {
    corners.iter().all(|c| {
        let w = (h * Vector3::new(c.x, c.y, 1.0)).z;
        w > 0.0
            && apply_homography(h, c).is_some_and(|p| p.x.abs() <= half_w && p.y.abs() <= half_h)
    })
}

/// Cut `cfg.patches` patches from `source`. Patch 0 uses the identity
/// homography; the rest are drawn by [`perturbation`] and redrawn while any
/// corner leaves the canvas.
pub fn gen_patchset(source: &Image, cfg: &PatchSetConfig, seed: u64) -> Result<PatchSet, DataError> {
    if cfg.patches < 2 {
        return Err(DataError::Invalid(format!("need at least 2 patches, got {}", cfg.patches)));
    }
    if cfg.noise_h < 0.0 || cfg.noise_t < 0.0 || !cfg.noise_h.is_finite() || !cfg.noise_t.is_finite() {
        return Err(DataError::Invalid(format!("noise ({}, {})", cfg.noise_h, cfg.noise_t)));
    }
    let source = if cfg.long_side > 0 {
        source.downscale(cfg.long_side)
    } else {
        source.clone()
    };
    if cfg.patch_size == 0 || cfg.patch_size > source.width.min(source.height) {
        return Err(DataError::Invalid(format!(
            "patch size {} for a {}x{} canvas",
            cfg.patch_size, source.width, source.height
        )));
    }
    let scale = source.width.max(source.height) as f64 / 2.0;
    let corners = patch_corners(cfg.patch_size, scale);
    let (half_w, half_h) = (source.width as f64 / 2.0 / scale, source.height as f64 / 2.0 / scale);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut homographies = vec![Matrix3::identity()];
    for patch in 1..cfg.patches {
        let h = (0..MAX_RESAMPLE)
            .map(|_| sl3_exp(&perturbation(&mut rng, cfg.noise_h, cfg.noise_t)))
            .find(|h| inside_canvas(h, &corners, half_w, half_h))
            .ok_or(DataError::PatchEscape {
                patch,
                tries: MAX_RESAMPLE,
            })?;
        homographies.push(h);
    }
    let mut set = PatchSet {
        source,
        patch_size: cfg.patch_size,
        scale,
        homographies,
        patches: vec![],
    };
    set.patches = set
        .homographies
        .iter()
        .map(|h| {
            Image::from_fn(cfg.patch_size, cfg.patch_size, |x, y| {
                let c = apply_homography(h, &set.pixel_coord(x, y)).expect("corners checked in front");
                set.source_at(&c)
            })
        })
        .collect();
    Ok(set)
}

/// [`gen_patchset`] on a PNG file, or on the bundled photograph when `path` is `None`.
pub fn gen_patchset_from(path: Option<&Path>, cfg: &PatchSetConfig, seed: u64) -> Result<PatchSet, DataError> {
    let src = match path {
        Some(p) => load_png(p)?,
        None => bundled_cat(),
    };
    gen_patchset(&src, cfg, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySceneConfig {
    pub preset: String,
    pub views: usize,
    pub size: usize,
    pub fov_deg: f64,
    /// Camera distance from the scene center.
    pub radius: f64,
    /// Azimuth span of the camera arc.
    pub arc_deg: f64,
    pub elevation_deg: f64,
}

impl Default for ToySceneConfig {
    fn default() -> Self {
        Self {
            preset: "blocks".into(),
            views: 8,
            size: 32,
            fov_deg: 50.0,
            radius: 4.0,
            arc_deg: 90.0,
            elevation_deg: 25.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Solid {
    Sphere { center: Vector3<f64>, radius: f64 },
    Cuboid { min: Vector3<f64>, max: Vector3<f64> },
    /// Horizontal disc `z = height`.
    Disc { height: f64, radius: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Primitive {
    solid: Solid,
    color: [f64; 3],
    /// Spatial frequency of the albedo modulation.
    texture: f64,
}

const LIGHT: [f64; 3] = [0.45, -0.35, 0.82];

fn preset(name: &str) -> Result<Vec<Primitive>, DataError> {
    let v = Vector3::new;
    match name {
        "sphere" => Ok(vec![Primitive {
            solid: Solid::Sphere {
                center: Vector3::zeros(),
                radius: 1.0,
            },
            color: [0.9, 0.5, 0.2],
            texture: 3.0,
        }]),
        "blocks" => Ok(vec![
            Primitive {
                solid: Solid::Sphere {
                    center: v(0.0, 0.0, 0.0),
                    radius: 0.55,
                },
                color: [0.9, 0.3, 0.2],
                texture: 5.0,
            },
            Primitive {
                solid: Solid::Cuboid {
                    min: v(0.35, -0.95, -0.6),
                    max: v(0.95, -0.35, 0.1),
                },
                color: [0.2, 0.4, 0.9],
                texture: 4.0,
            },
            Primitive {
                solid: Solid::Sphere {
                    center: v(-0.6, 0.65, -0.25),
                    radius: 0.35,
                },
                color: [0.3, 0.85, 0.3],
                texture: 6.0,
            },
            Primitive {
                solid: Solid::Cuboid {
                    min: v(-0.9, -0.8, -0.6),
                    max: v(-0.5, -0.4, 0.5),
                },
                color: [0.95, 0.85, 0.2],
                texture: 4.0,
            },
            Primitive {
                solid: Solid::Disc {
                    height: -0.6,
                    radius: 1.6,
                },
                color: [0.75, 0.75, 0.7],
                texture: 3.0,
            },
        ]),
        other => Err(DataError::UnknownPreset(other.to_string())),
    }
}

/// Nearest positive ray parameter and the surface normal there.
fn intersect(solid: &Solid, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    match *solid {
        Solid::Sphere { center, radius } => {
            let oc = o - center;
            let a = d.dot(d);
            let b = 2.0 * d.dot(&oc);
            let c = oc.dot(&oc) - radius * radius;
            let disc = b * b - 4.0 * a * c;
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            let t = [(-b - s) / (2.0 * a), (-b + s) / (2.0 * a)].into_iter().find(|&t| t > 1e-9)?;
            Some((t, (o + d * t - center) / radius))
        }
        Solid::Cuboid { min, max } => {
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            let mut axis = 0;
            for k in 0..3 {
                if d[k].abs() < 1e-15 {
                    if o[k] < min[k] || o[k] > max[k] {
                        return None;
                    }
                    continue;
                }
                let (a, b) = ((min[k] - o[k]) / d[k], (max[k] - o[k]) / d[k]);
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                if lo > t0 {
                    t0 = lo;
                    axis = k;
                }
                t1 = t1.min(hi);
            }
            if t0 > t1 || t0 <= 1e-9 {
                return None;
            }
            let mut n = Vector3::zeros();
            n[axis] = -d[axis].signum();
            Some((t0, n))
        }
        Solid::Disc { height, radius } => {
            if d.z.abs() < 1e-15 {
                return None;
            }
            let t = (height - o.z) / d.z;
            let p = o + d * t;
            (t > 1e-9 && p.x * p.x + p.y * p.y <= radius * radius).then(|| (t, Vector3::new(0.0, 0.0, -d.z.signum())))
        }
    }
}

fn shade(p: &Primitive, x: &Vector3<f64>, n: &Vector3<f64>) -> [f64; 3] {
    let f = p.texture;
    let m = 0.75 + 0.25 * (f * x.x).sin() * (f * x.y).cos() * (0.5 * f * x.z + 0.3).cos();
    let l = Vector3::from(LIGHT).normalize();
    let light = 0.35 + 0.65 * n.dot(&l).max(0.0);
    p.color.map(|c| (c * m * light).clamp(0.0, 1.0))
}

/// Color and z-depth seen along world ray `o + t d`; `d` has unit camera-frame depth.
fn trace(prims: &[Primitive], o: &Vector3<f64>, d: &Vector3<f64>) -> Option<([f64; 3], f64)> {
    prims
        .iter()
        .filter_map(|p| intersect(&p.solid, o, d).map(|(t, n)| (p, t, n)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(p, t, n)| (shade(p, &(o + d * t), &n), t))
}

/// One view: 2x2 supersampled colors and the center-ray z-depth
/// (`INFINITY` where the ray misses everything).
fn render_view(prims: &[Primitive], camera: &Camera, pose: &Pose, background: [f64; 3]) -> (Image, Vec<f64>) {
    let k_inv = camera.k_inv();
    let o = pose.center();
    let dir = |x: f64, y: f64| pose.rotation * (k_inv * Vector3::new(x, y, 1.0));
    let mut depth = vec![f64::INFINITY; camera.width * camera.height];
    let img = Image::from_fn(camera.width, camera.height, |px, py| {
        let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
        if let Some((_, t)) = trace(prims, &o, &dir(cx, cy)) {
            depth[py * camera.width + px] = t;
        }
        let mut acc = [0.0; 3];
        for (dx, dy) in [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)] {
            let c = trace(prims, &o, &dir(cx + dx, cy + dy)).map_or(background, |(c, _)| c);
            for k in 0..3 {
                acc[k] += c[k] / 4.0;
            }
        }
        acc
    });
    (img, depth)
}

/// Rendered views of a toy scene with exact camera-to-world poses.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyScene {
    pub preset: String,
    pub camera: Camera,
    pub poses: Vec<Pose>,
    pub images: Vec<Image>,
    /// Per-view z-depth maps, row-major.
    pub depths: Vec<Vec<f64>>,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
}

impl ToyScene {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Re-render the scene from an arbitrary pose.
    pub fn render(&self, pose: &Pose) -> Result<(Image, Vec<f64>), DataError> {
        Ok(render_view(&preset(&self.preset)?, &self.camera, pose, self.background))
    }
}

/// Cameras on an arc around the scene center, looking at it with world `+z` up.
/// The seed jitters each azimuth by up to ±2°.
pub fn gen_toyscene(cfg: &ToySceneConfig, seed: u64) -> Result<ToyScene, DataError> {
    let prims = preset(&cfg.preset)?;
    if cfg.views < 3 {
        return Err(DataError::Invalid(format!("need at least 3 views, got {}", cfg.views)));
    }
    if cfg.size == 0 || !(cfg.radius > 1.0) {
        return Err(DataError::Invalid(format!("size {} radius {}", cfg.size, cfg.radius)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let camera = Camera::from_fov(cfg.size, cfg.size, cfg.fov_deg);
    let elev = cfg.elevation_deg.to_radians();
    let poses: Vec<Pose> = (0..cfg.views)
        .map(|i| {
            let frac = i as f64 / (cfg.views - 1) as f64 - 0.5;
            let az = (frac * cfg.arc_deg + rng.gen_range(-2.0..2.0)).to_radians();
            let eye = cfg.radius * Vector3::new(elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin());
            Pose::look_at(eye, Vector3::zeros(), Vector3::z())
        })
        .collect();
    let background = [0.0; 3];
    let (images, depths) = poses.iter().map(|p| render_view(&prims, &camera, p, background)).unzip();
    Ok(ToyScene {
        preset: cfg.preset.clone(),
        camera,
        poses,
        images,
        depths,
        near: (cfg.radius - 2.0).max(0.5),
        far: cfg.radius + 2.0,
        background,
    })
}
