//! NeRF-synthetic scene ingestion and watermarked training-set assembly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::camera::{pose_distance, CameraIntrinsics, CameraPose};
use crate::embedder::{embed, EmbedderModel};
use crate::error::{Error, Result};
use crate::imagery::{load_image, Image};
use crate::noise::{apply_noise_seeded, frame_seed, NoiseConfig, NoiseKind};
use crate::par;

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub image: Image,
    pub pose: CameraPose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub name: String,
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<Frame>,
}

impl Scene {
    pub fn new(name: impl Into<String>, intrinsics: CameraIntrinsics, frames: Vec<Frame>) -> Result<Self> {
        let scene = Self {
            name: name.into(),
            intrinsics,
            frames,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() < 2 {
            return Err(Error::Validation(format!(
                "scene '{}' needs at least 2 frames, has {}",
                self.name,
                self.frames.len()
            )));
        }
        let (w, h) = (self.intrinsics.width, self.intrinsics.height);
        for (i, f) in self.frames.iter().enumerate() {
            if (f.image.width(), f.image.height()) != (w, h) || f.image.channels() != 3 {
                return Err(Error::Validation(format!(
                    "frame {i} is {}x{}x{}, scene intrinsics are {w}x{h}x3",
                    f.image.width(),
                    f.image.height(),
                    f.image.channels()
                )));
            }
        }
        Ok(())
    }

    pub fn poses(&self) -> Vec<CameraPose> {
        self.frames.iter().map(|f| f.pose).collect()
    }
}

#[derive(Deserialize)]
struct TransformsFile {
    camera_angle_x: f64,
    frames: Vec<FrameEntry>,
}

#[derive(Deserialize)]
struct FrameEntry {
    file_path: String,
    transform_matrix: Vec<Vec<f64>>,
}

fn frame_path(root: &Path, file_path: &str) -> PathBuf {
    let p = root.join(file_path);
    if p.extension().is_some() {
        p
    } else {
        p.with_extension("png")
    }
}

fn parse_pose(index: usize, entry: &FrameEntry) -> Result<CameraPose> {
    let m = &entry.transform_matrix;
    if m.len() != 4 || m.iter().any(|r| r.len() != 4) {
        return Err(Error::Validation(format!(
            "frame {index} ({}): transform_matrix must be 4x4",
            entry.file_path
        )));
    }
    let mut rows = [[0.0; 4]; 4];
    for (dst, src) in rows.iter_mut().zip(m) {
        dst.copy_from_slice(src);
    }
    CameraPose::from_rows(rows).map_err(|e| Error::Validation(format!("frame {index} ({}): {e}", entry.file_path)))
}

/// Loads `transforms_<split>.json` under `root`, composites the RGBA
/// images over white and optionally downscales them by an integer factor.
pub fn load_scene(root: impl AsRef<Path>, split: &str, downscale: usize) -> Result<Scene> {
    let root = root.as_ref();
    if downscale == 0 {
        return Err(Error::Config("downscale factor must be at least 1".into()));
    }
    let path = root.join(format!("transforms_{split}.json"));
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let doc: TransformsFile = serde_json::from_str(&text).map_err(|e| Error::Decode {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let poses: Vec<CameraPose> = doc
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| parse_pose(i, f))
        .collect::<Result<_>>()?;
    let images: Vec<Image> = par::try_map_range(doc.frames.len(), |i| {
        let img = load_image(frame_path(root, &doc.frames[i].file_path), None)?;
        if downscale == 1 {
            Ok(img)
        } else {
            img.resized(img.height() / downscale, img.width() / downscale)
        }
    })?;
    let first = images
        .first()
        .ok_or_else(|| Error::Validation(format!("{} lists no frames", path.display())))?;
    let full_width = first.width() * downscale;
    let full_height = first.height() * downscale;
    let intrinsics =
        CameraIntrinsics::from_camera_angle_x(full_width, full_height, doc.camera_angle_x)?.downscaled(downscale)?;
    let name = root
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scene".into());
    let frames = images
        .into_iter()
        .zip(poses)
        .map(|(image, pose)| Frame { image, pose })
        .collect();
    Scene::new(name, intrinsics, frames)
}

/// Index of the frame whose pose is closest to `pose` by geodesic angle,
/// ties broken by camera-centre distance and then by index.
pub fn nearest_frame(scene: &Scene, pose: &CameraPose) -> usize {
    let key = |f: &Frame| {
        (
            pose_distance(&f.pose, pose),
            (f.pose.translation() - pose.translation()).norm(),
        )
    };
    scene
        .frames
        .iter()
        .enumerate()
        .min_by(|a, b| key(a.1).partial_cmp(&key(b.1)).expect("finite distances"))
        .map(|(i, _)| i)
        .expect("scenes have frames")
}

/// Replaces the frames in `embed_indices` by their watermarked versions
/// and passes the remaining frames through the noise layer. Poses and
/// intrinsics are untouched.
pub fn build_training_set(
    scene: &Scene,
    watermark: &Image,
    embedder: &EmbedderModel,
    noise_cfg: &NoiseConfig,
    embed_indices: &[usize],
) -> Result<Scene> {
    noise_cfg.validate()?;
    if let Some(bad) = embed_indices.iter().find(|&&i| i >= scene.frames.len()) {
        return Err(Error::Config(format!(
            "embed index {bad} out of range for {} frames",
            scene.frames.len()
        )));
    }
    let images = par::try_map_range(scene.frames.len(), |i| {
        let frame = &scene.frames[i];
        let embedded = embed_indices.contains(&i);
        let mut img = if embedded {
            embed(embedder, &frame.image, watermark)?
        } else {
            frame.image.clone()
        };
        if noise_cfg.kind != NoiseKind::None && (!embedded || noise_cfg.include_embedded) {
            img = apply_noise_seeded(&img, noise_cfg, frame_seed(noise_cfg.seed, i))?;
        }
        Ok::<_, Error>(img)
    })?;
    let frames = images
        .into_iter()
        .zip(&scene.frames)
        .map(|(image, f)| Frame { image, pose: f.pose })
        .collect();
    Scene::new(scene.name.clone(), scene.intrinsics, frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, orbit_pose, SceneSpec};

    fn tiny_scene_dir() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec {
            size: 32,
            train: 6,
            val: 2,
            test: 2,
            supersample: 1,
            ..SceneSpec::default()
        };
        generate_scene(dir.path(), &spec).unwrap();
        dir
    }

    #[test]
    fn loads_and_downscales() {
        let dir = tiny_scene_dir();
        let full = load_scene(dir.path(), "train", 1).unwrap();
        assert_eq!(full.frames.len(), 6);
        let half = load_scene(dir.path(), "train", 4).unwrap();
        assert_eq!((half.intrinsics.width, half.intrinsics.height), (8, 8));
        assert!((half.intrinsics.focal - full.intrinsics.focal / 4.0).abs() < 1e-12);
        assert_eq!(half.frames[0].image.shape(), (8, 8, 3));
    }

    #[test]
    fn loading_is_deterministic() {
        let dir = tiny_scene_dir();
        assert_eq!(load_scene(dir.path(), "val", 2).unwrap(), load_scene(dir.path(), "val", 2).unwrap());
    }

    #[test]
    fn missing_transforms_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_scene(dir.path(), "train", 1), Err(Error::Io { .. })));
    }

    #[test]
    fn bad_last_row_names_the_frame() {
        let dir = tiny_scene_dir();
        let path = dir.path().join("transforms_train.json");
        let mut doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        doc["frames"][3]["transform_matrix"][3] = serde_json::json!([0.0, 0.0, 0.5, 1.0]);
        fs::write(&path, doc.to_string()).unwrap();
        match load_scene(dir.path(), "train", 1) {
            Err(Error::Validation(msg)) => assert!(msg.contains("frame 3"), "{msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn identity_path_and_locality() {
        let dir = tiny_scene_dir();
        let scene = load_scene(dir.path(), "train", 2).unwrap();
        let w = crate::synth::watermark(16, 16);
        let emb = EmbedderModel::new(0);
        let same = build_training_set(&scene, &w, &emb, &NoiseConfig::default(), &[]).unwrap();
        assert_eq!(same, scene);
        let one = build_training_set(&scene, &w, &emb, &NoiseConfig::default(), &[0]).unwrap();
        assert_ne!(one.frames[0].image, scene.frames[0].image);
        assert!(one.frames[1..].iter().zip(&scene.frames[1..]).all(|(a, b)| a == b));
        assert_eq!(one.poses(), scene.poses());
        assert_eq!(one.intrinsics, scene.intrinsics);
    }

    #[test]
    fn noise_skips_embedded_frames_by_default() {
        let dir = tiny_scene_dir();
        let scene = load_scene(dir.path(), "train", 2).unwrap();
        let w = crate::synth::watermark(16, 16);
        let emb = EmbedderModel::new(0);
        let cfg = NoiseConfig::of_kind(NoiseKind::Gaussian);
        let noisy = build_training_set(&scene, &w, &emb, &cfg, &[2]).unwrap();
        assert_eq!(noisy.frames[2].image, embed(&emb, &scene.frames[2].image, &w).unwrap());
        assert_ne!(noisy.frames[1].image, scene.frames[1].image);
        assert_eq!(noisy.poses(), scene.poses());
    }

    #[test]
    fn nearest_frame_finds_exact_pose() {
        let dir = tiny_scene_dir();
        let scene = load_scene(dir.path(), "train", 4).unwrap();
        for i in 0..scene.frames.len() {
            assert_eq!(nearest_frame(&scene, &scene.frames[i].pose), i);
        }
        let p = orbit_pose(4.0, 10.0, 30.0).unwrap();
        assert!(nearest_frame(&scene, &p) < scene.frames.len());
    }
}
