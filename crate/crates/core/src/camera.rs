//! Pinhole cameras, ray generation and the secret-view key.
//!
//! Poses follow the NeRF-synthetic convention: `c2w` maps camera to world,
//! the camera looks along its local −z axis with +y up.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Default near bound for NeRF-synthetic scenes.
pub const DEFAULT_T_NEAR: f64 = 2.0;
/// Default far bound for NeRF-synthetic scenes.
pub const DEFAULT_T_FAR: f64 = 6.0;

const ORTHONORMAL_TOL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels.
    pub focal: f64,
}

impl CameraIntrinsics {
    pub fn new(width: usize, height: usize, focal: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Validation("camera resolution must be positive".into()));
        }
        if !(focal.is_finite() && focal > 0.0) {
            return Err(Error::Validation(format!("focal length must be positive, got {focal}")));
        }
        Ok(Self {
            width,
            height,
            focal,
        })
    }

    /// `focal = 0.5·width / tan(0.5·camera_angle_x)`.
    pub fn from_camera_angle_x(width: usize, height: usize, camera_angle_x: f64) -> Result<Self> {
        if !(camera_angle_x > 0.0 && camera_angle_x < std::f64::consts::PI) {
            return Err(Error::Validation(format!(
                "camera_angle_x must lie in (0, pi), got {camera_angle_x}"
            )));
        }
        Self::new(width, height, 0.5 * width as f64 / (0.5 * camera_angle_x).tan())
    }

    /// Integer downscale; the focal length shrinks by the same factor.
    pub fn downscaled(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Config("downscale factor must be at least 1".into()));
        }
        Self::new(self.width / factor, self.height / factor, self.focal / factor as f64)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Stable fingerprint of the intrinsics, recorded in key files.
    pub fn fingerprint(&self) -> String {
        let text = format!("{} {} {:.16e}", self.width, self.height, self.focal);
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Camera-to-world rigid transform with an orthonormal, right-handed
/// rotation block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    c2w: Matrix4<f64>,
}

impl CameraPose {
    pub fn new(c2w: Matrix4<f64>) -> Result<Self> {
        if c2w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("pose contains non-finite entries".into()));
        }
        let last = c2w.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(Error::Validation(format!(
                "pose last row must be (0,0,0,1), got ({}, {}, {}, {})",
                last[0], last[1], last[2], last[3]
            )));
        }
        let r: Matrix3<f64> = c2w.fixed_view::<3, 3>(0, 0).into_owned();
        let defect = (r.transpose() * r - Matrix3::identity()).amax();
        if defect > ORTHONORMAL_TOL {
            return Err(Error::Validation(format!(
                "rotation block is not orthonormal (max |RᵀR − I| = {defect:.3e})"
            )));
        }
        if r.determinant() <= 0.0 {
            return Err(Error::Validation("rotation block has negative determinant".into()));
        }
        Ok(Self { c2w })
    }

    pub fn from_rows(rows: [[f64; 4]; 4]) -> Result<Self> {
        Self::new(Matrix4::from_fn(|i, j| rows[i][j]))
    }

    pub fn identity() -> Self {
        Self {
            c2w: Matrix4::identity(),
        }
    }

    /// Camera at `eye` looking at `target`, with world up `up`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let back = (eye - target).normalize();
        let right = up.cross(&back);
        if right.norm() < 1e-9 {
            return Err(Error::Validation("look-at up vector is parallel to view axis".into()));
        }
        let right = right.normalize();
        let cam_up = back.cross(&right);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 1>(0, 0).copy_from(&right);
        m.fixed_view_mut::<3, 1>(0, 1).copy_from(&cam_up);
        m.fixed_view_mut::<3, 1>(0, 2).copy_from(&back);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&eye);
        Self::new(m)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.c2w
    }

    pub fn rows(&self) -> [[f64; 4]; 4] {
        let mut out = [[0.0; 4]; 4];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.c2w[(i, j)];
            }
        }
        out
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.c2w.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.c2w.fixed_view::<3, 1>(0, 3).into_owned()
    }
}

/// Per-pixel rays with shared near/far bounds.
#[derive(Clone, Debug)]
pub struct RayBatch {
    pub origins: Vec<[f64; 3]>,
    pub directions: Vec<[f64; 3]>,
    pub t_near: f64,
    pub t_far: f64,
}

impl RayBatch {
    pub fn new(origins: Vec<[f64; 3]>, directions: Vec<[f64; 3]>, t_near: f64, t_far: f64) -> Result<Self> {
        if origins.len() != directions.len() {
            return Err(Error::Validation("ray origin/direction count mismatch".into()));
        }
        if !(0.0 <= t_near && t_near < t_far && t_far.is_finite()) {
            return Err(Error::Validation(format!(
                "ray bounds must satisfy 0 <= t_near < t_far, got [{t_near}, {t_far}]"
            )));
        }
        for (i, d) in directions.iter().enumerate() {
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Validation(format!("ray {i} direction is not unit length ({n})")));
            }
        }
        Ok(Self {
            origins,
            directions,
            t_near,
            t_far,
        })
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Rays `range` as a new batch sharing the bounds.
    pub fn slice(&self, range: std::ops::Range<usize>) -> RayBatch {
        RayBatch {
            origins: self.origins[range.clone()].to_vec(),
            directions: self.directions[range].to_vec(),
            t_near: self.t_near,
            t_far: self.t_far,
        }
    }
}

/// One unit-length ray per pixel in row-major order. Pixel `(W/2, H/2)`
/// lies on the optical axis.
pub fn rays_for_pose(intr: &CameraIntrinsics, pose: &CameraPose, t_near: f64, t_far: f64) -> Result<RayBatch> {
    // Re-validate: poses can be built from raw matrices by deserialization.
    let pose = CameraPose::new(pose.c2w)?;
    let r = pose.rotation();
    let o = pose.translation();
    let origin = [o.x, o.y, o.z];
    let n = intr.pixel_count();
    let mut origins = Vec::with_capacity(n);
    let mut directions = Vec::with_capacity(n);
    let (cx, cy) = ((intr.width / 2) as f64, (intr.height / 2) as f64);
    for j in 0..intr.height {
        for i in 0..intr.width {
            let cam = Vector3::new(
                (i as f64 - cx) / intr.focal,
                -(j as f64 - cy) / intr.focal,
                -1.0,
            );
            let d = (r * cam).normalize();
            origins.push(origin);
            directions.push([d.x, d.y, d.z]);
        }
    }
    RayBatch::new(origins, directions, t_near, t_far)
}

/// World-frame rotation about the vertical (z) axis: returns `Rz(θ)·c2w`.
pub fn rotate_about_z(pose: &CameraPose, degrees: f64) -> Result<CameraPose> {
    if !degrees.is_finite() {
        return Err(Error::Validation(format!("rotation angle must be finite, got {degrees}")));
    }
    let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), degrees.to_radians());
    CameraPose::new(rz.to_homogeneous() * pose.c2w)
}

/// Geodesic angle between the two rotation blocks, in degrees.
pub fn pose_distance(a: &CameraPose, b: &CameraPose) -> f64 {
    let rel = a.rotation().transpose() * b.rotation();
    let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    cos.acos().to_degrees()
}

/// The ownership credential: the secret pose, the intrinsics it is
/// rendered with, and content hashes of the artifacts it unlocks.
///
/// Text format (one `key = value` per line, `#` comments allowed):
///
/// ```text
/// # marknerf secret view key
/// format = marknerf-key
/// version = 1
/// width = 64
/// height = 64
/// focal = 8.8888888888888886e1
/// t_near = 2.0000000000000000e0
/// t_far = 6.0000000000000000e0
/// c2w.0 = r00 r01 r02 r03
/// c2w.1 = ...
/// c2w.2 = ...
/// c2w.3 = 0.0000000000000000e0 0.0000000000000000e0 0.0000000000000000e0 1.0000000000000000e0
/// intrinsics_sha256 = <hex>
/// record.<name> = <value>          (zero or more, sorted by name)
/// checksum = <sha256 of all preceding lines>
/// ```
///
/// Matrix entries are row-major in `{:.16e}` notation, which round-trips
/// `f64` exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct SecretKey {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
    pub t_near: f64,
    pub t_far: f64,
    pub records: BTreeMap<String, String>,
}

pub const KEY_FORMAT_VERSION: u32 = 1;

impl SecretKey {
    pub fn new(intrinsics: CameraIntrinsics, pose: CameraPose, t_near: f64, t_far: f64) -> Self {
        Self {
            intrinsics,
            pose,
            t_near,
            t_far,
            records: BTreeMap::new(),
        }
    }

    fn body(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# marknerf secret view key");
        let _ = writeln!(s, "format = marknerf-key");
        let _ = writeln!(s, "version = {KEY_FORMAT_VERSION}");
        let _ = writeln!(s, "width = {}", self.intrinsics.width);
        let _ = writeln!(s, "height = {}", self.intrinsics.height);
        let _ = writeln!(s, "focal = {:.16e}", self.intrinsics.focal);
        let _ = writeln!(s, "t_near = {:.16e}", self.t_near);
        let _ = writeln!(s, "t_far = {:.16e}", self.t_far);
        for (i, row) in self.pose.rows().iter().enumerate() {
            let cols: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            let _ = writeln!(s, "c2w.{i} = {}", cols.join(" "));
        }
        let _ = writeln!(s, "intrinsics_sha256 = {}", self.intrinsics.fingerprint());
        for (k, v) in &self.records {
            let _ = writeln!(s, "record.{k} = {v}");
        }
        s
    }

    pub fn to_text(&self) -> String {
        let body = self.body();
        let sum = hex::encode(Sha256::digest(body.as_bytes()));
        format!("{body}checksum = {sum}\n")
    }

    /// Parses a key document. A checksum mismatch is reported as
    /// [`Error::Tamper`].
    pub fn from_text(text: &str) -> Result<Self> {
        let mut fields: BTreeMap<String, String> = BTreeMap::new();
        let mut records = BTreeMap::new();
        let mut body = String::new();
        let mut checksum = None;
        for line in text.lines() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                body.push_str(line);
                body.push('\n');
                continue;
            }
            let (k, v) = trimmed
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("key file line without '=': {trimmed}")))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "checksum" {
                checksum = Some(v.to_string());
                continue;
            }
            if checksum.is_some() {
                return Err(Error::Format("key file has content after the checksum".into()));
            }
            body.push_str(line);
            body.push('\n');
            if let Some(name) = k.strip_prefix("record.") {
                records.insert(name.to_string(), v.to_string());
            } else {
                fields.insert(k.to_string(), v.to_string());
            }
        }
        let checksum = checksum.ok_or_else(|| Error::Format("key file has no checksum".into()))?;
        if hex::encode(Sha256::digest(body.as_bytes())) != checksum {
            return Err(Error::Tamper("key file checksum does not match its contents".into()));
        }
        let get = |k: &str| {
            fields
                .get(k)
                .ok_or_else(|| Error::Format(format!("key file is missing `{k}`")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("key file field `{k}`: {e}")))
        };
        let int = |k: &str| -> Result<usize> {
            get(k)?
                .parse::<usize>()
                .map_err(|e| Error::Format(format!("key file field `{k}`: {e}")))
        };
        if get("format")? != "marknerf-key" {
            return Err(Error::Format("not a marknerf key file".into()));
        }
        let version = int("version")?;
        if version != KEY_FORMAT_VERSION as usize {
            return Err(Error::Format(format!("unsupported key file version {version}")));
        }
        let intrinsics = CameraIntrinsics::new(int("width")?, int("height")?, num("focal")?)?;
        if get("intrinsics_sha256")? != &intrinsics.fingerprint() {
            return Err(Error::Tamper("intrinsics fingerprint mismatch".into()));
        }
        let mut rows = [[0.0; 4]; 4];
        for (i, row) in rows.iter_mut().enumerate() {
            let vals: Vec<f64> = get(&format!("c2w.{i}"))?
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("key file row {i}: {e}")))?;
            if vals.len() != 4 {
                return Err(Error::Format(format!("key file row {i} must have 4 entries")));
            }
            row.copy_from_slice(&vals);
        }
        Ok(Self {
            intrinsics,
            pose: CameraPose::from_rows(rows)?,
            t_near: num("t_near")?,
            t_far: num("t_far")?,
            records,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn orbit_pose(azimuth_deg: f64, elevation_deg: f64, radius: f64) -> CameraPose {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let eye = Vector3::new(radius * el.cos() * az.cos(), radius * el.cos() * az.sin(), radius * el.sin());
        CameraPose::look_at(eye, Vector3::zeros(), Vector3::z()).unwrap()
    }

    fn max_abs_diff(a: &CameraPose, b: &CameraPose) -> f64 {
        (a.matrix() - b.matrix()).amax()
    }

    #[test]
    fn identity_pose_central_ray_looks_down_minus_z() {
        let intr = CameraIntrinsics::new(8, 6, 5.0).unwrap();
        let rays = rays_for_pose(&intr, &CameraPose::identity(), 2.0, 6.0).unwrap();
        let center = 3 * 8 + 4;
        let d = rays.directions[center];
        assert!((d[0]).abs() < 1e-15 && (d[1]).abs() < 1e-15 && (d[2] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn origins_equal_translation() {
        let pose = orbit_pose(33.0, 20.0, 4.0);
        let intr = CameraIntrinsics::new(5, 4, 3.0).unwrap();
        let rays = rays_for_pose(&intr, &pose, 2.0, 6.0).unwrap();
        let t = pose.translation();
        assert!(rays.origins.iter().all(|o| o == &[t.x, t.y, t.z]));
        assert_eq!(rays.len(), 20);
    }

    #[test]
    fn two_by_two_corner_directions() {
        // Hand-evaluated pinhole projection: pixel (i, j) maps to
        // ((i - 1)/f, -(j - 1)/f, -1) before normalization.
        let intr = CameraIntrinsics::new(2, 2, 1.0).unwrap();
        let rays = rays_for_pose(&intr, &CameraPose::identity(), 2.0, 6.0).unwrap();
        let s3 = 1.0 / 3f64.sqrt();
        let s2 = 1.0 / 2f64.sqrt();
        let expected = [
            [-s3, s3, -s3],
            [0.0, s2, -s2],
            [-s2, 0.0, -s2],
            [0.0, 0.0, -1.0],
        ];
        for (got, want) in rays.directions.iter().zip(expected.iter()) {
            for k in 0..3 {
                assert!((got[k] - want[k]).abs() < 1e-6, "{got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn degenerate_rotation_rejected() {
        let mut m = Matrix4::identity();
        m[(0, 0)] = 2.0;
        assert!(matches!(CameraPose::new(m), Err(Error::Validation(_))));
        let mut m = Matrix4::identity();
        m[(3, 2)] = 0.5;
        assert!(CameraPose::new(m).is_err());
        let mut m = Matrix4::identity();
        m[(0, 0)] = -1.0;
        assert!(CameraPose::new(m).is_err(), "reflection must be rejected");
    }

    #[test]
    fn rotation_identities() {
        let p = orbit_pose(10.0, 30.0, 4.0);
        assert!(max_abs_diff(&rotate_about_z(&p, 0.0).unwrap(), &p) < 1e-12);
        assert!(max_abs_diff(&rotate_about_z(&p, 360.0).unwrap(), &p) < 1e-9);
        let twice = rotate_about_z(&rotate_about_z(&p, 180.0).unwrap(), 180.0).unwrap();
        assert!(max_abs_diff(&twice, &p) < 1e-9);
        assert!(rotate_about_z(&p, f64::NAN).is_err());
        let moved = rotate_about_z(&p, 47.0).unwrap();
        assert!((moved.translation().norm() - p.translation().norm()).abs() < 1e-12);
    }

    #[test]
    fn pose_distance_examples() {
        // A camera whose own z axis is world z: the relative rotation of a
        // world-z turn is a pure z rotation by the same angle.
        let a = CameraPose::identity();
        assert_eq!(pose_distance(&a, &a), 0.0);
        let b = rotate_about_z(&a, 30.0).unwrap();
        assert!((pose_distance(&a, &b) - 30.0).abs() < 1e-6);
        let c = rotate_about_z(&a, 180.0).unwrap();
        assert!((pose_distance(&a, &c) - 180.0).abs() < 1e-6);
    }

    #[test]
    fn focal_from_angle() {
        let intr = CameraIntrinsics::from_camera_angle_x(800, 800, 0.6911112070083618).unwrap();
        assert!((intr.focal - 1111.1110311937682).abs() < 1e-6);
        let small = intr.downscaled(8).unwrap();
        assert_eq!((small.width, small.height), (100, 100));
        assert!((small.focal - intr.focal / 8.0).abs() < 1e-12);
    }

    #[test]
    fn key_round_trip_and_tamper() {
        let intr = CameraIntrinsics::new(64, 64, 88.5).unwrap();
        let mut key = SecretKey::new(intr, orbit_pose(12.345, 40.0, 4.03), 2.0, 6.0);
        key.records.insert("field_sha256".into(), "abc".into());
        let text = key.to_text();
        let back = SecretKey::from_text(&text).unwrap();
        assert_eq!(back, key);

        let flipped = text.replacen("c2w.0 = ", "c2w.0 = -", 1);
        assert!(matches!(SecretKey::from_text(&flipped), Err(Error::Tamper(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn z_rotations_compose(az in -180.0f64..180.0, el in -80.0f64..80.0, a in -400.0f64..400.0, b in -400.0f64..400.0) {
            let p = orbit_pose(az, el, 4.0);
            let lhs = rotate_about_z(&rotate_about_z(&p, a).unwrap(), b).unwrap();
            let rhs = rotate_about_z(&p, a + b).unwrap();
            prop_assert!(max_abs_diff(&lhs, &rhs) < 1e-9);
        }

        #[test]
        fn ray_directions_rotate_with_pose(az in -180.0f64..180.0, el in -80.0f64..80.0, turn in -180.0f64..180.0) {
            let p = orbit_pose(az, el, 4.0);
            let q = rotate_about_z(&p, turn).unwrap();
            let intr = CameraIntrinsics::new(6, 5, 4.0).unwrap();
            let rp = rays_for_pose(&intr, &p, 2.0, 6.0).unwrap();
            let rq = rays_for_pose(&intr, &q, 2.0, 6.0).unwrap();
            let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), turn.to_radians());
            for (dp, dq) in rp.directions.iter().zip(&rq.directions) {
                let moved = rot * Vector3::new(dp[0], dp[1], dp[2]);
                prop_assert!((moved - Vector3::new(dq[0], dq[1], dq[2])).amax() < 1e-6);
            }
        }
    }
}
