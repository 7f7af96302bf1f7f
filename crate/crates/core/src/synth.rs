//! Procedural stand-ins for the NeRF-synthetic scenes and watermark.
//!
//! [`generate_scene`] ray-casts a textured, Lambert-shaded arrangement of
//! spheres, boxes and a cylinder from cameras on the upper hemisphere and
//! writes RGBA PNGs plus `transforms_{train,val,test}.json` in the
//! NeRF-synthetic layout, so the loader sees exactly what it would see for
//! a downloaded scene.

use std::fs;
use std::path::Path;

use image::{Rgba, RgbaImage};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::camera::{CameraIntrinsics, CameraPose};
use crate::error::{Error, Result};
use crate::imagery::Image;
use crate::par;

/// Horizontal field of view shared by the NeRF-synthetic scenes.
pub const CAMERA_ANGLE_X: f64 = 0.6911112070083618;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub radius: f64,
    pub seed: u64,
    /// Supersampling grid per pixel axis.
    pub supersample: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            size: 256,
            train: 100,
            val: 10,
            test: 20,
            radius: 4.0,
            seed: 0,
            supersample: 2,
        }
    }
}

type V3 = Vector3<f64>;

#[derive(Clone, Copy, Debug)]
enum Shape {
    Sphere { center: V3, radius: f64 },
    Aabb { min: V3, max: V3 },
    /// Vertical capped cylinder.
    Cylinder { center: V3, radius: f64, half_height: f64 },
}

#[derive(Clone, Copy, Debug)]
struct Object {
    shape: Shape,
    base: [f64; 3],
    accent: [f64; 3],
    frequency: f64,
}

fn objects() -> Vec<Object> {
    vec![
        Object {
            shape: Shape::Aabb {
                min: V3::new(-0.9, -0.7, -0.9),
                max: V3::new(0.5, 0.7, -0.3),
            },
            base: [0.85, 0.2, 0.15],
            accent: [0.95, 0.85, 0.2],
            frequency: 4.0,
        },
        Object {
            shape: Shape::Sphere {
                center: V3::new(0.45, 0.1, 0.25),
                radius: 0.55,
            },
            base: [0.15, 0.35, 0.85],
            accent: [0.9, 0.95, 1.0],
            frequency: 5.0,
        },
        Object {
            shape: Shape::Cylinder {
                center: V3::new(-0.5, -0.35, 0.2),
                radius: 0.3,
                half_height: 0.5,
            },
            base: [0.15, 0.7, 0.3],
            accent: [0.05, 0.25, 0.1],
            frequency: 6.0,
        },
        Object {
            shape: Shape::Sphere {
                center: V3::new(-0.35, 0.55, 0.05),
                radius: 0.32,
            },
            base: [0.95, 0.6, 0.1],
            accent: [0.45, 0.1, 0.5],
            frequency: 7.0,
        },
        Object {
            shape: Shape::Aabb {
                min: V3::new(0.55, -0.75, -0.3),
                max: V3::new(0.95, -0.35, 0.5),
            },
            base: [0.6, 0.2, 0.7],
            accent: [0.95, 0.95, 0.95],
            frequency: 3.0,
        },
    ]
}

/// Nearest positive hit distance and outward normal.
fn intersect(shape: &Shape, o: &V3, d: &V3) -> Option<(f64, V3)> {
    match *shape {
        Shape::Sphere { center, radius } => {
            let oc = o - center;
            let b = oc.dot(d);
            let c = oc.norm_squared() - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let t = -b - disc.sqrt();
            (t > 1e-6).then(|| (t, (o + d * t - center) / radius))
        }
        Shape::Aabb { min, max } => {
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            let mut axis = 0;
            for a in 0..3 {
                let inv = 1.0 / d[a];
                let (mut lo, mut hi) = ((min[a] - o[a]) * inv, (max[a] - o[a]) * inv);
                if lo > hi {
                    std::mem::swap(&mut lo, &mut hi);
                }
                if lo > t0 {
                    t0 = lo;
                    axis = a;
                }
                t1 = t1.min(hi);
            }
            if t0 > t1 || t0 <= 1e-6 {
                return None;
            }
            let mut n = V3::zeros();
            n[axis] = -d[axis].signum();
            Some((t0, n))
        }
        Shape::Cylinder {
            center,
            radius,
            half_height,
        } => {
            let mut best: Option<(f64, V3)> = None;
            let oc = o - center;
            let a = d.x * d.x + d.y * d.y;
            if a > 1e-12 {
                let b = oc.x * d.x + oc.y * d.y;
                let c = oc.x * oc.x + oc.y * oc.y - radius * radius;
                let disc = b * b - a * c;
                if disc >= 0.0 {
                    let t = (-b - disc.sqrt()) / a;
                    let z = oc.z + t * d.z;
                    if t > 1e-6 && z.abs() <= half_height {
                        let p = oc + d * t;
                        best = Some((t, V3::new(p.x, p.y, 0.0) / radius));
                    }
                }
            }
            if d.z.abs() > 1e-12 {
                for cap in [-half_height, half_height] {
                    let t = (cap - oc.z) / d.z;
                    let p = oc + d * t;
                    if t > 1e-6 && p.x * p.x + p.y * p.y <= radius * radius && best.is_none_or(|b| t < b.0) {
                        best = Some((t, V3::new(0.0, 0.0, cap.signum())));
                    }
                }
            }
            best
        }
    }
}

fn shade(obj: &Object, p: &V3, n: &V3) -> [f64; 3] {
    let f = obj.frequency;
    let stripes = (f * p.x).sin() * (f * p.y).cos() + 0.6 * (1.7 * f * p.z).sin();
    let mix = 0.5 + 0.5 * stripes.tanh();
    let light = V3::new(0.4, 0.3, 0.85).normalize();
    let lambert = 0.35 + 0.65 * n.dot(&light).max(0.0);
    let mut c = [0.0; 3];
    for k in 0..3 {
        c[k] = ((obj.base[k] * (1.0 - mix) + obj.accent[k] * mix) * lambert).clamp(0.0, 1.0);
    }
    c
}

/// Colour and coverage of one ray.
fn trace(scene: &[Object], o: &V3, d: &V3) -> Option<[f64; 3]> {
    let mut best: Option<(f64, V3, &Object)> = None;
    for obj in scene {
        if let Some((t, n)) = intersect(&obj.shape, o, d) {
            if best.is_none_or(|b| t < b.0) {
                best = Some((t, n, obj));
            }
        }
    }
    best.map(|(t, n, obj)| shade(obj, &(o + d * t), &n))
}

/// Renders the procedural object as premultiplied-free RGBA in [0, 1].
pub fn render_rgba(intr: &CameraIntrinsics, pose: &CameraPose, supersample: usize) -> Vec<[f64; 4]> {
    let scene = objects();
    let r = pose.rotation();
    let o = pose.translation();
    let (cx, cy) = ((intr.width / 2) as f64, (intr.height / 2) as f64);
    let ss = supersample.max(1);
    par::map_range(intr.height * intr.width, |idx| {
        let (j, i) = (idx / intr.width, idx % intr.width);
        let mut acc = [0.0; 3];
        let mut hits = 0usize;
        for sy in 0..ss {
            for sx in 0..ss {
                let px = i as f64 + (sx as f64 + 0.5) / ss as f64 - 0.5;
                let py = j as f64 + (sy as f64 + 0.5) / ss as f64 - 0.5;
                let cam = V3::new((px - cx) / intr.focal, -(py - cy) / intr.focal, -1.0);
                let d = (r * cam).normalize();
                if let Some(c) = trace(&scene, &o, &d) {
                    hits += 1;
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
        }
        if hits == 0 {
            [0.0; 4]
        } else {
            let h = hits as f64;
            [acc[0] / h, acc[1] / h, acc[2] / h, h / (ss * ss) as f64]
        }
    })
}

/// Composites [`render_rgba`] over white.
pub fn render_over_white(intr: &CameraIntrinsics, pose: &CameraPose, supersample: usize) -> Image {
    let px = render_rgba(intr, pose, supersample);
    let data = px
        .iter()
        .flat_map(|p| (0..3).map(move |k| p[k] * p[3] + (1.0 - p[3])))
        .collect();
    Image::new(intr.height, intr.width, 3, data).expect("render shape")
}

/// Camera on a sphere of `radius` looking at the origin, z up.
pub fn orbit_pose(radius: f64, azimuth_deg: f64, elevation_deg: f64) -> Result<CameraPose> {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    let eye = V3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * radius;
    CameraPose::look_at(eye, V3::zeros(), V3::z())
}

fn write_split(root: &Path, split: &str, poses: &[CameraPose], intr: &CameraIntrinsics, ss: usize) -> Result<()> {
    let dir = root.join(split);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut frames = Vec::new();
    for (i, pose) in poses.iter().enumerate() {
        let px = render_rgba(intr, pose, ss);
        let mut img = RgbaImage::new(intr.width as u32, intr.height as u32);
        for (p, v) in img.pixels_mut().zip(&px) {
            *p = Rgba(v.map(|c| (c * 255.0).round().clamp(0.0, 255.0) as u8));
        }
        let path = dir.join(format!("r_{i}.png"));
        img.save(&path).map_err(|e| Error::Decode {
            path: path.clone(),
            message: e.to_string(),
        })?;
        frames.push(json!({
            "file_path": format!("./{split}/r_{i}"),
            "rotation": 0.012566370614359171,
            "transform_matrix": pose.rows(),
        }));
    }
    let doc = json!({ "camera_angle_x": CAMERA_ANGLE_X, "frames": frames });
    let path = root.join(format!("transforms_{split}.json"));
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Writes a complete scene directory.
pub fn generate_scene(root: impl AsRef<Path>, spec: &SceneSpec) -> Result<()> {
    let root = root.as_ref();
    if spec.size < 8 || spec.train < 2 {
        return Err(Error::Config("scene needs size >= 8 and at least 2 training frames".into()));
    }
    let intr = CameraIntrinsics::from_camera_angle_x(spec.size, spec.size, CAMERA_ANGLE_X)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut draw = |n: usize| -> Result<Vec<CameraPose>> {
        (0..n)
            .map(|_| orbit_pose(spec.radius, rng.gen_range(0.0..360.0), rng.gen_range(8.0..65.0)))
            .collect()
    };
    let (train, val, test) = (draw(spec.train)?, draw(spec.val)?, draw(spec.test)?);
    write_split(root, "train", &train, &intr, spec.supersample)?;
    write_split(root, "val", &val, &intr, spec.supersample)?;
    write_split(root, "test", &test, &intr, spec.supersample)
}

/// High-contrast logo-like watermark: a dark field with a bright ring,
/// a cross bar and coloured tiles. About a third of the pixels are lit.
pub fn watermark(height: usize, width: usize) -> Image {
    Image::from_fn(height, width, |y, x| {
        let u = (x as f64 + 0.5) / width as f64 * 2.0 - 1.0;
        let v = (y as f64 + 0.5) / height as f64 * 2.0 - 1.0;
        let r = (u * u + v * v).sqrt();
        if (0.6..0.74).contains(&r) {
            return [1.0, 0.95, 0.2];
        }
        if u.abs() < 0.1 && v.abs() < 0.45 || v.abs() < 0.1 && u.abs() < 0.45 {
            return [0.95, 0.95, 0.95];
        }
        let (tu, tv) = ((u + 1.0) * 4.0, (v + 1.0) * 4.0);
        let corner = r > 1.0;
        if corner && (tu.floor() as i64 + tv.floor() as i64) % 2 == 0 {
            return if u * v > 0.0 { [0.9, 0.15, 0.2] } else { [0.2, 0.4, 1.0] };
        }
        [0.04, 0.04, 0.06]
    })
}
