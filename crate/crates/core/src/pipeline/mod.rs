//! Stage orchestration, persistence and ownership verification.
//!
//! Every stage reads its inputs from and writes its outputs to one run
//! directory, guarded by an exclusive lock file:
//!
//! | file | written by |
//! |---|---|
//! | `embedder.ckpt`, `joint_extractor.ckpt`, `joint_curve.csv`, `embedding.csv` | train-joint |
//! | `field.ckpt`, `nerf_log.csv`, `nerf_eval.csv` | train-nerf |
//! | `extractor.ckpt`, `finetune_curve.csv`, `key.txt`, `*.png` renders | finetune-extractor |
//! | `verify.json` | verify |
//! | `sweep.csv`, `sweep.png` | sweep-angles |
//! | `attacks.csv`, `attacks_nc.png` | attack-suite |
//! | `report.md`, `report.json` | report |

pub mod checkpoint;
pub mod config;
pub mod report;

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::{rotate_about_z, CameraPose, SecretKey};
use crate::dataset::{build_training_set, load_scene, nearest_frame, Scene};
use crate::embedder::{embed, train_joint, EmbedderModel};
use crate::error::{Error, Result};
use crate::extractor::{extract, finetune_extractor, ExtractorModel};
use crate::imagery::{load_image, save_image, Image};
use crate::metrics::{ber_from_psnr, nc, psnr, ssim, LossWeights};
use crate::nerf::{render_view, train_nerf, FieldConfig, RadianceField, SamplingConfig};
use crate::nn::TrainConfig;
use crate::noise::{NoiseConfig, NoiseKind};
use crate::synth;

pub use checkpoint::{file_sha256, Checkpoint};
pub use config::{EmbedPolicy, PoseSource, RunConfig};
pub use report::{EmbeddingSummary, NerfSummary, RunReport};

pub const EMBEDDER_CKPT: &str = "embedder.ckpt";
pub const JOINT_EXTRACTOR_CKPT: &str = "joint_extractor.ckpt";
pub const FIELD_CKPT: &str = "field.ckpt";
pub const EXTRACTOR_CKPT: &str = "extractor.ckpt";
pub const KEY_FILE: &str = "key.txt";
pub const VERIFY_JSON: &str = "verify.json";
const LOCK_FILE: &str = ".lock";

/// Exclusive handle on a run directory; the lock is released on drop.
pub struct RunDir {
    root: PathBuf,
    _lock: File,
}

impl RunDir {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let lock_path = root.join(LOCK_FILE);
        let lock = File::create(&lock_path).map_err(|e| Error::io(&lock_path, e))?;
        lock.try_lock().map_err(|_| {
            Error::Config(format!("run directory {} is in use by another process", root.display()))
        })?;
        Ok(Self { root, _lock: lock })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn require(&self, name: &str, stage: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            return Err(Error::Config(format!("{} not found; run {stage} first", p.display())));
        }
        Ok(p)
    }
}

fn stage_seed(base: u64, stage: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stage)
}

/// Loads the configured watermark at `height × width`, or draws the
/// built-in pattern.
pub fn load_watermark(path: Option<&Path>, height: usize, width: usize) -> Result<Image> {
    match path {
        Some(p) => load_image(p, Some((height, width))),
        None => Ok(synth::watermark(height, width)),
    }
}

fn watermark_for(cfg: &RunConfig, scene: &Scene) -> Result<Image> {
    load_watermark(cfg.watermark.as_deref(), scene.intrinsics.height, scene.intrinsics.width)
}

pub fn secret_pose(cfg: &RunConfig, scene: &Scene) -> Result<CameraPose> {
    match &cfg.secret.pose {
        PoseSource::Frame(i) => scene.frames.get(*i).map(|f| f.pose).ok_or_else(|| {
            Error::Config(format!(
                "secret.pose frame {i} out of range for {} training frames",
                scene.frames.len()
            ))
        }),
        PoseSource::Matrix(m) => CameraPose::from_rows(*m),
    }
}

pub fn embed_indices(cfg: &RunConfig, scene: &Scene, pose: &CameraPose) -> Vec<usize> {
    match &cfg.secret.embed {
        EmbedPolicy::Nearest => vec![nearest_frame(scene, pose)],
        EmbedPolicy::Indices(v) => v.clone(),
    }
}

fn load_train_scene(cfg: &RunConfig) -> Result<Scene> {
    cfg.check_inputs()?;
    load_scene(&cfg.scene.root, "train", cfg.scene.downscale)
}

pub fn load_embedder(path: &Path) -> Result<EmbedderModel> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind("embedder")?;
    let mut m = EmbedderModel::new(0);
    ck.apply(&mut m)?;
    Ok(m)
}

pub fn load_extractor(path: &Path) -> Result<ExtractorModel> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind("extractor")?;
    let mut m = ExtractorModel::new(0);
    ck.apply(&mut m)?;
    Ok(m)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FieldMeta {
    field: FieldConfig,
    sampling: SamplingConfig,
    t_near: f64,
    t_far: f64,
}

pub fn load_field(path: &Path) -> Result<(RadianceField, SamplingConfig)> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind("field")?;
    let meta: FieldMeta =
        serde_json::from_value(ck.meta.clone()).map_err(|e| Error::Format(format!("field metadata: {e}")))?;
    let mut field = RadianceField::new(meta.field, 0)?;
    ck.apply(&mut field)?;
    Ok((field, meta.sampling))
}

fn save_field(path: &Path, field: &RadianceField, cfg: &RunConfig) -> Result<()> {
    let meta = FieldMeta {
        field: field.config.clone(),
        sampling: cfg.nerf.sampling,
        t_near: cfg.nerf.train.t_near,
        t_far: cfg.nerf.train.t_far,
    };
    Checkpoint::of("field", serde_json::to_value(meta).expect("meta serializes"), field).save(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub stage: String,
    pub step: usize,
    pub loss_e: f64,
    pub loss_d: f64,
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedRow {
    pub frame: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub nc: f64,
}

/// Trains embedder and extractor on the scene's training frames.
pub fn cmd_train_joint(cfg: &RunConfig, dir: &RunDir) -> Result<EmbeddingSummary> {
    cfg.validate()?;
    let scene = load_train_scene(cfg)?;
    let w = watermark_for(cfg, &scene)?;
    let hosts: Vec<Image> = scene.frames.iter().map(|f| f.image.clone()).collect();
    let mut curve = Vec::new();
    let mut init = None;
    if cfg.joint.warmup_steps > 0 {
        let identity = LossWeights {
            beta: 0.0,
            gamma: 0.0,
            mu: 0.0,
            ..cfg.loss
        };
        let warm = TrainConfig {
            steps: cfg.joint.warmup_steps,
            ..cfg.joint.train.clone()
        };
        log::info!("joint warm-up: {} embedder-only steps", warm.steps);
        let out = train_joint(&hosts, &w, &identity, &warm, None)?;
        curve.extend(out.curve.iter().map(|p| CurveRow {
            stage: "warmup".into(),
            step: p.step,
            loss_e: p.loss_e,
            loss_d: p.loss_d,
            psnr: p.psnr,
        }));
        init = Some((out.embedder, out.extractor));
    }
    log::info!("joint training: {} steps over {} hosts", cfg.joint.train.steps, hosts.len());
    let out = train_joint(&hosts, &w, &cfg.loss, &cfg.joint.train, init)?;
    curve.extend(out.curve.iter().map(|p| CurveRow {
        stage: "joint".into(),
        step: p.step,
        loss_e: p.loss_e,
        loss_d: p.loss_d,
        psnr: p.psnr,
    }));
    let rows = crate::par::try_map_range(hosts.len(), |i| {
        let kp = embed(&out.embedder, &hosts[i], &w)?;
        let wp = extract(&out.extractor, &kp)?;
        Ok::<_, Error>(EmbedRow {
            frame: i,
            psnr_db: psnr(&hosts[i], &kp)?,
            ssim: ssim(&hosts[i], &kp)?,
            nc: nc(&w, &wp)?,
        })
    })?;
    let meta = serde_json::json!({ "loss": cfg.loss, "joint": cfg.joint });
    Checkpoint::of("embedder", meta.clone(), &out.embedder).save(dir.path(EMBEDDER_CKPT))?;
    Checkpoint::of("extractor", meta, &out.extractor).save(dir.path(JOINT_EXTRACTOR_CKPT))?;
    report::write_csv(dir.path("joint_curve.csv"), &curve)?;
    report::write_csv(dir.path("embedding.csv"), &rows)?;
    Ok(summarize_embedding(&rows))
}

fn summarize_embedding(rows: &[EmbedRow]) -> EmbeddingSummary {
    let n = rows.len().max(1) as f64;
    EmbeddingSummary {
        hosts: rows.len(),
        mean_psnr: rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
        mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewRow {
    pub split: String,
    pub frame: usize,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Builds the watermarked and noised training set and fits a field to it.
fn fit_field(cfg: &RunConfig, dir: &RunDir, scene: &Scene, noise: &NoiseConfig, steps: usize) -> Result<(RadianceField, Vec<crate::nerf::NerfLogPoint>)> {
    let embedder = load_embedder(&dir.path(EMBEDDER_CKPT))?;
    let w = watermark_for(cfg, scene)?;
    let pose = secret_pose(cfg, scene)?;
    let indices = embed_indices(cfg, scene, &pose);
    let train_set = build_training_set(scene, &w, &embedder, noise, &indices)?;
    let val = load_scene(&cfg.scene.root, "val", cfg.scene.downscale)
        .map(|s| s.frames)
        .unwrap_or_default();
    let field = RadianceField::new(cfg.nerf.field.clone(), stage_seed(cfg.nerf.train.train.seed, 2))?;
    let mut tcfg = cfg.nerf.train.clone();
    tcfg.train.steps = steps;
    let out = train_nerf(&train_set, &val, field, &cfg.nerf.sampling, &tcfg)?;
    Ok((out.field, out.log))
}

/// Trains the radiance field on the watermarked training set and scores
/// held-out test views.
pub fn cmd_train_nerf(cfg: &RunConfig, dir: &RunDir) -> Result<NerfSummary> {
    cfg.validate()?;
    dir.require(EMBEDDER_CKPT, "train-joint")?;
    let scene = load_train_scene(cfg)?;
    let (field, log) = fit_field(cfg, dir, &scene, &cfg.noise, cfg.nerf.train.train.steps)?;
    save_field(&dir.path(FIELD_CKPT), &field, cfg)?;
    report::write_csv(dir.path("nerf_log.csv"), &log)?;
    let test = load_scene(&cfg.scene.root, "test", cfg.scene.downscale)?;
    let n = test.frames.len().min(cfg.nerf.eval_frames.max(1));
    let (t_near, t_far) = (cfg.nerf.train.t_near, cfg.nerf.train.t_far);
    let mut rows = Vec::with_capacity(n);
    for (i, f) in test.frames.iter().take(n).enumerate() {
        let img = render_view(&field, &test.intrinsics, &f.pose, &cfg.nerf.sampling, t_near, t_far)?;
        rows.push(ViewRow {
            split: "test".into(),
            frame: i,
            psnr_db: psnr(&img, &f.image)?,
            ssim: ssim(&img, &f.image)?,
        });
    }
    report::write_csv(dir.path("nerf_eval.csv"), &rows)?;
    Ok(summarize_views(&rows))
}

fn summarize_views(rows: &[ViewRow]) -> NerfSummary {
    let n = rows.len().max(1) as f64;
    NerfSummary {
        views: rows.len(),
        mean_psnr: rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
        mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionMetrics {
    pub nc: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

impl ExtractionMetrics {
    fn of(w: &Image, w_prime: &Image) -> Result<Self> {
        Ok(Self {
            nc: nc(w, w_prime)?,
            psnr_db: psnr(w, w_prime)?,
            ssim: ssim(w, w_prime)?,
        })
    }
}

/// Secret-view render used for fine-tuning plus rotated negatives.
fn finetune_on_field(
    cfg: &RunConfig,
    dir: &RunDir,
    field: &RadianceField,
    scene: &Scene,
    pose: &CameraPose,
    w: &Image,
) -> Result<(ExtractorModel, Image, Vec<crate::extractor::FinetunePoint>)> {
    let (t_near, t_far) = (cfg.nerf.train.t_near, cfg.nerf.train.t_far);
    let sampling = &cfg.nerf.sampling;
    let render = render_view(field, &scene.intrinsics, pose, sampling, t_near, t_far)?;
    let negatives = if cfg.finetune.lambda_neg > 0.0 {
        cfg.secret
            .negative_angles
            .iter()
            .map(|a| render_view(field, &scene.intrinsics, &rotate_about_z(pose, *a)?, sampling, t_near, t_far))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let base = load_extractor(&dir.path(JOINT_EXTRACTOR_CKPT))?;
    let out = finetune_extractor(&base, &render, w, &negatives, &cfg.loss, &cfg.finetune)?;
    Ok((out.model, render, out.curve))
}

/// Fine-tunes the extractor on the secret render and writes the key file.
pub fn cmd_finetune_extractor(cfg: &RunConfig, dir: &RunDir) -> Result<ExtractionMetrics> {
    cfg.validate()?;
    dir.require(JOINT_EXTRACTOR_CKPT, "train-joint")?;
    let field_path = dir.require(FIELD_CKPT, "train-nerf")?;
    let scene = load_train_scene(cfg)?;
    let w = watermark_for(cfg, &scene)?;
    let pose = secret_pose(cfg, &scene)?;
    let (field, _) = load_field(&field_path)?;
    let (model, render, curve) = finetune_on_field(cfg, dir, &field, &scene, &pose, &w)?;
    let w_prime = extract(&model, &render)?;
    let metrics = ExtractionMetrics::of(&w, &w_prime)?;
    Checkpoint::of("extractor", serde_json::json!({ "finetune": cfg.finetune }), &model).save(dir.path(EXTRACTOR_CKPT))?;
    report::write_csv(dir.path("finetune_curve.csv"), &curve)?;
    save_image(&render, dir.path("secret_render.png"))?;
    save_image(&w_prime, dir.path("extracted.png"))?;
    save_image(&w, dir.path("watermark.png"))?;
    let mut key = SecretKey::new(scene.intrinsics, pose, cfg.nerf.train.t_near, cfg.nerf.train.t_far);
    for name in [EMBEDDER_CKPT, JOINT_EXTRACTOR_CKPT, FIELD_CKPT, EXTRACTOR_CKPT] {
        key.records.insert(format!("sha256.{name}"), file_sha256(dir.path(name))?);
    }
    key.records.insert("nc".into(), format!("{:.17e}", metrics.nc));
    let key_path = dir.path(KEY_FILE);
    fs::write(&key_path, key.to_text()).map_err(|e| Error::io(&key_path, e))?;
    Ok(metrics)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Accept,
    Reject,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHashes {
    pub field: String,
    pub extractor: String,
    pub key: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub nc: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub tau: f64,
    pub decision: Decision,
    /// Camera-to-world matrix of the pose used, row-major.
    pub pose: [[f64; 4]; 4],
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub hashes: ArtifactHashes,
}

/// Artifacts consulted by [`cmd_verify`].
#[derive(Clone, Debug)]
pub struct VerifyInputs {
    pub field: PathBuf,
    pub extractor: PathBuf,
    pub key: PathBuf,
    pub watermark: Option<PathBuf>,
    pub tau: f64,
}

impl VerifyInputs {
    pub fn in_dir(dir: &Path, watermark: Option<PathBuf>, tau: f64) -> Self {
        Self {
            field: dir.join(FIELD_CKPT),
            extractor: dir.join(EXTRACTOR_CKPT),
            key: dir.join(KEY_FILE),
            watermark,
            tau,
        }
    }
}

struct Verifier {
    key: SecretKey,
    field: RadianceField,
    sampling: SamplingConfig,
    extractor: ExtractorModel,
    w: Image,
    hashes: ArtifactHashes,
}

fn check_record(key: &SecretKey, name: &str, path: &Path) -> Result<String> {
    let actual = file_sha256(path)?;
    match key.records.get(&format!("sha256.{name}")) {
        Some(expected) if *expected == actual => Ok(actual),
        Some(_) => Err(Error::Tamper(format!("{} does not match the hash recorded in the key", path.display()))),
        None => Err(Error::Tamper(format!("key file records no hash for {name}"))),
    }
}

impl Verifier {
    /// Loads the key and checks every artifact it records before any
    /// checkpoint is decoded.
    fn open(inputs: &VerifyInputs) -> Result<Self> {
        if !(0.0..=1.0).contains(&inputs.tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1], got {}", inputs.tau)));
        }
        let key_text = fs::read_to_string(&inputs.key).map_err(|e| Error::io(&inputs.key, e))?;
        let key = SecretKey::from_text(&key_text)?;
        let key_dir = inputs.key.parent().unwrap_or(Path::new("."));
        for name in [EMBEDDER_CKPT, JOINT_EXTRACTOR_CKPT] {
            let p = key_dir.join(name);
            if p.exists() {
                check_record(&key, name, &p)?;
            }
        }
        let field_hash = check_record(&key, FIELD_CKPT, &inputs.field)?;
        let extractor_hash = check_record(&key, EXTRACTOR_CKPT, &inputs.extractor)?;
        let (field, sampling) = load_field(&inputs.field)?;
        let extractor = load_extractor(&inputs.extractor)?;
        let w = load_watermark(inputs.watermark.as_deref(), key.intrinsics.height, key.intrinsics.width)?;
        Ok(Self {
            hashes: ArtifactHashes {
                field: field_hash,
                extractor: extractor_hash,
                key: hex::encode(<sha2::Sha256 as sha2::Digest>::digest(key_text.as_bytes())),
            },
            key,
            field,
            sampling,
            extractor,
            w,
        })
    }

    fn extract_at(&self, pose: &CameraPose) -> Result<Image> {
        let render = render_view(&self.field, &self.key.intrinsics, pose, &self.sampling, self.key.t_near, self.key.t_far)?;
        extract(&self.extractor, &render)
    }
}

/// Renders the secret view, extracts the watermark and decides ownership.
pub fn cmd_verify(inputs: &VerifyInputs) -> Result<VerificationReport> {
    let v = Verifier::open(inputs)?;
    let m = ExtractionMetrics::of(&v.w, &v.extract_at(&v.key.pose)?)?;
    Ok(VerificationReport {
        decision: if m.nc >= inputs.tau { Decision::Accept } else { Decision::Reject },
        nc: m.nc,
        psnr_db: m.psnr_db,
        ssim: m.ssim,
        tau: inputs.tau,
        pose: v.key.pose.rows(),
        width: v.key.intrinsics.width,
        height: v.key.intrinsics.height,
        focal: v.key.intrinsics.focal,
        hashes: v.hashes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub angle_deg: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub nc: f64,
}

/// Extraction quality as the secret camera is rotated about the world
/// vertical axis.
pub fn cmd_sweep_angles(inputs: &VerifyInputs, angles: &[f64], dir: &RunDir) -> Result<Vec<SweepRow>> {
    let v = Verifier::open(inputs)?;
    let rows = angles
        .iter()
        .map(|&a| {
            let pose = rotate_about_z(&v.key.pose, a)?;
            let m = ExtractionMetrics::of(&v.w, &v.extract_at(&pose)?)?;
            Ok(SweepRow {
                angle_deg: a,
                psnr_db: m.psnr_db,
                ssim: m.ssim,
                nc: m.nc,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    report::write_csv(dir.path("sweep.csv"), &rows)?;
    plot_sweep(dir, &rows)?;
    Ok(rows)
}

fn plot_sweep(dir: &RunDir, rows: &[SweepRow]) -> Result<()> {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| a.angle_deg.total_cmp(&b.angle_deg));
    let psnr: Vec<(f64, f64)> = sorted.iter().map(|r| (r.angle_deg, r.psnr_db)).collect();
    report::line_plot(dir.path("sweep.png"), &[(psnr, report::BLUE)])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub kind: String,
    pub ber: f64,
    pub nc: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Retrains the field on a training set corrupted by each noise kind and
/// measures extraction at the secret pose.
pub fn cmd_attack_suite(cfg: &RunConfig, kinds: &[NoiseKind], dir: &RunDir) -> Result<Vec<AttackRow>> {
    cfg.validate()?;
    dir.require(EMBEDDER_CKPT, "train-joint")?;
    let scene = load_train_scene(cfg)?;
    let w = watermark_for(cfg, &scene)?;
    let pose = secret_pose(cfg, &scene)?;
    let steps = cfg.attack.nerf_steps.unwrap_or(cfg.nerf.train.train.steps);
    let main_extractor = if cfg.attack.refit_extractor {
        None
    } else {
        Some(load_extractor(&dir.require(EXTRACTOR_CKPT, "finetune-extractor")?)?)
    };
    let mut rows = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        log::info!("attack suite: {kind}");
        let noise = NoiseConfig {
            kind,
            ..cfg.noise.clone()
        };
        let (field, _) = fit_field(cfg, dir, &scene, &noise, steps)?;
        let (render, w_prime) = match &main_extractor {
            Some(ext) => {
                let render = render_view(
                    &field,
                    &scene.intrinsics,
                    &pose,
                    &cfg.nerf.sampling,
                    cfg.nerf.train.t_near,
                    cfg.nerf.train.t_far,
                )?;
                let wp = extract(ext, &render)?;
                (render, wp)
            }
            None => {
                let (model, render, _) = finetune_on_field(cfg, dir, &field, &scene, &pose, &w)?;
                let wp = extract(&model, &render)?;
                (render, wp)
            }
        };
        save_image(&render, dir.path(&format!("attack_{}_render.png", kind.name())))?;
        let m = ExtractionMetrics::of(&w, &w_prime)?;
        rows.push(AttackRow {
            kind: kind.name().to_string(),
            ber: ber_from_psnr(m.psnr_db),
            nc: m.nc,
            psnr_db: m.psnr_db,
            ssim: m.ssim,
        });
    }
    report::write_csv(dir.path("attacks.csv"), &rows)?;
    plot_attacks(dir, &rows, cfg.verify.tau)?;
    Ok(rows)
}

fn plot_attacks(dir: &RunDir, rows: &[AttackRow], tau: f64) -> Result<()> {
    let nc: Vec<f64> = rows.iter().map(|r| r.nc).collect();
    report::bar_plot(dir.path("attacks_nc.png"), &nc, Some(tau))
}

/// Aggregates whatever stage outputs exist into `report.md` and
/// `report.json` and redraws the charts.
pub fn cmd_report(dir: &RunDir, tau: f64) -> Result<RunReport> {
    let mut rep = RunReport::default();
    let mut missing = |name: &str| rep.missing.push(name.to_string());
    let embedding = dir.path("embedding.csv");
    let embedding = if embedding.exists() {
        Some(summarize_embedding(&report::read_csv::<EmbedRow>(&embedding)?))
    } else {
        missing("embedding.csv");
        None
    };
    let views = dir.path("nerf_eval.csv");
    let nerf = if views.exists() {
        Some(summarize_views(&report::read_csv::<ViewRow>(&views)?))
    } else {
        missing("nerf_eval.csv");
        None
    };
    let vpath = dir.path(VERIFY_JSON);
    let verification = if vpath.exists() {
        let text = fs::read_to_string(&vpath).map_err(|e| Error::io(&vpath, e))?;
        Some(serde_json::from_str(&text).map_err(|e| Error::Decode {
            path: vpath.clone(),
            message: e.to_string(),
        })?)
    } else {
        missing(VERIFY_JSON);
        None
    };
    let spath = dir.path("sweep.csv");
    let sweep = if spath.exists() {
        let rows = report::read_csv::<SweepRow>(&spath)?;
        plot_sweep(dir, &rows)?;
        Some(rows)
    } else {
        missing("sweep.csv");
        None
    };
    let apath = dir.path("attacks.csv");
    let attacks = if apath.exists() {
        let rows = report::read_csv::<AttackRow>(&apath)?;
        plot_attacks(dir, &rows, tau)?;
        Some(rows)
    } else {
        missing("attacks.csv");
        None
    };
    rep.embedding = embedding;
    rep.nerf = nerf;
    rep.verification = verification;
    rep.sweep = sweep;
    rep.attacks = attacks;
    let md = dir.path("report.md");
    fs::write(&md, rep.to_markdown()).map_err(|e| Error::io(&md, e))?;
    report::write_json(dir.path("report.json"), &rep)?;
    Ok(rep)
}

/// Every stage in order, as the CLI's `all` subcommand runs them.
pub fn run_all(cfg: &RunConfig, with_attacks: bool) -> Result<RunReport> {
    let dir = RunDir::open(&cfg.output)?;
    fs::write(dir.path("config.toml"), cfg.to_toml()).map_err(|e| Error::io(dir.path("config.toml"), e))?;
    cmd_train_joint(cfg, &dir)?;
    cmd_train_nerf(cfg, &dir)?;
    cmd_finetune_extractor(cfg, &dir)?;
    let inputs = VerifyInputs::in_dir(dir.root(), cfg.watermark.clone(), cfg.verify.tau);
    let rep = cmd_verify(&inputs)?;
    report::write_json(dir.path(VERIFY_JSON), &rep)?;
    cmd_sweep_angles(&inputs, &cfg.sweep.angles, &dir)?;
    if with_attacks {
        cmd_attack_suite(cfg, &cfg.attack.kinds, &dir)?;
    }
    cmd_report(&dir, cfg.verify.tau)
}
