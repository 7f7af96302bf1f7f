use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use marknerf::error::{Error, Result};
use marknerf::noise::NoiseKind;
use marknerf::pipeline::{self, report, Decision, RunConfig, RunDir, VerifyInputs};
use marknerf::synth::{generate_scene, SceneSpec};

const EXIT_ERROR: u8 = 1;
const EXIT_REJECT: u8 = 2;
const EXIT_TAMPER: u8 = 3;

#[derive(Parser)]
#[command(name = "marknerf", version, about = "Secret-viewpoint watermarking for radiance fields")]
struct Cli {
    /// Run configuration (TOML). Desk-scale defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured run directory.
    #[arg(short, long, global = true)]
    output: Option<PathBuf>,
    /// Overrides the configured scene directory.
    #[arg(long, global = true)]
    scene: Option<PathBuf>,
    #[arg(long, global = true)]
    downscale: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a procedural scene in the NeRF-synthetic layout.
    MakeScene {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Prints the effective configuration as TOML.
    ShowConfig,
    /// Trains the embedding and extraction networks jointly.
    TrainJoint {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Trains the radiance field on the watermarked training set.
    TrainNerf {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        n_coarse: Option<usize>,
        #[arg(long)]
        n_fine: Option<usize>,
        #[arg(long)]
        noise: Option<NoiseKind>,
    },
    /// Fine-tunes the extractor on the secret view and writes the key file.
    FinetuneExtractor {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Checks ownership: exit 0 accept, 2 reject, 3 tampered artifacts.
    Verify {
        #[arg(long)]
        field: Option<PathBuf>,
        #[arg(long)]
        extractor: Option<PathBuf>,
        #[arg(long)]
        key: Option<PathBuf>,
        #[arg(long)]
        watermark: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
        /// Where to write the JSON report (default: verify.json in the run directory).
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Extraction quality versus rotation of the secret camera.
    SweepAngles {
        #[arg(long, value_delimiter = ',')]
        angles: Option<Vec<f64>>,
    },
    /// Retrains the field under each noise attack and scores extraction.
    AttackSuite {
        #[arg(long, value_delimiter = ',')]
        kinds: Option<Vec<NoiseKind>>,
    },
    /// Summarizes a run directory into Markdown, JSON and PNG charts.
    Report,
    /// Runs every stage in order.
    All {
        #[arg(long)]
        attacks: bool,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    if let Some(o) = &cli.output {
        cfg.output = o.clone();
    }
    if let Some(s) = &cli.scene {
        cfg.scene.root = s.clone();
    }
    if let Some(d) = cli.downscale {
        cfg.scene.downscale = d;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<u8> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::MakeScene { out, size, seed } => {
            generate_scene(&out, &SceneSpec { size, seed, ..SceneSpec::default() })?;
            println!("scene written to {}", out.display());
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()),
        Command::TrainJoint { steps } => {
            if let Some(s) = steps {
                cfg.joint.train.steps = s;
            }
            let dir = RunDir::open(&cfg.output)?;
            let s = pipeline::cmd_train_joint(&cfg, &dir)?;
            println!("embedding: {} hosts, PSNR {:.2} dB, SSIM {:.4}", s.hosts, s.mean_psnr, s.mean_ssim);
        }
        Command::TrainNerf { steps, n_coarse, n_fine, noise } => {
            if let Some(s) = steps {
                cfg.nerf.train.train.steps = s;
            }
            if let Some(n) = n_coarse {
                cfg.nerf.sampling.n_coarse = n;
            }
            if let Some(n) = n_fine {
                cfg.nerf.sampling.n_fine = n;
            }
            if let Some(k) = noise {
                cfg.noise.kind = k;
            }
            let dir = RunDir::open(&cfg.output)?;
            let s = pipeline::cmd_train_nerf(&cfg, &dir)?;
            println!("held-out views: {}, PSNR {:.2} dB, SSIM {:.4}", s.views, s.mean_psnr, s.mean_ssim);
        }
        Command::FinetuneExtractor { steps } => {
            if let Some(s) = steps {
                cfg.finetune.train.steps = s;
            }
            let dir = RunDir::open(&cfg.output)?;
            let m = pipeline::cmd_finetune_extractor(&cfg, &dir)?;
            println!("secret view: NC {:.4}, PSNR {:.2} dB, SSIM {:.4}", m.nc, m.psnr_db, m.ssim);
        }
        Command::Verify { field, extractor, key, watermark, tau, json } => {
            let mut inputs =
                VerifyInputs::in_dir(&cfg.output, watermark.or(cfg.watermark.clone()), tau.unwrap_or(cfg.verify.tau));
            if let Some(f) = field {
                inputs.field = f;
            }
            if let Some(e) = extractor {
                inputs.extractor = e;
            }
            if let Some(k) = key {
                inputs.key = k;
            }
            let rep = pipeline::cmd_verify(&inputs)?;
            let out = json.unwrap_or_else(|| cfg.output.join(pipeline::VERIFY_JSON));
            report::write_json(&out, &rep)?;
            println!(
                "NC {:.4} (tau {:.2}), PSNR {:.2} dB, SSIM {:.4}: {:?}",
                rep.nc, rep.tau, rep.psnr_db, rep.ssim, rep.decision
            );
            if rep.decision == Decision::Reject {
                return Ok(EXIT_REJECT);
            }
        }
        Command::SweepAngles { angles } => {
            let dir = RunDir::open(&cfg.output)?;
            let inputs = VerifyInputs::in_dir(dir.root(), cfg.watermark.clone(), cfg.verify.tau);
            let angles = angles.unwrap_or_else(|| cfg.sweep.angles.clone());
            for r in pipeline::cmd_sweep_angles(&inputs, &angles, &dir)? {
                println!("{:>7.1} deg  PSNR {:6.2}  SSIM {:.4}  NC {:.4}", r.angle_deg, r.psnr_db, r.ssim, r.nc);
            }
        }
        Command::AttackSuite { kinds } => {
            let dir = RunDir::open(&cfg.output)?;
            let kinds = kinds.unwrap_or_else(|| cfg.attack.kinds.clone());
            for r in pipeline::cmd_attack_suite(&cfg, &kinds, &dir)? {
                println!("{:<12} BER {:.5}  NC {:.4}", r.kind, r.ber, r.nc);
            }
        }
        Command::Report => {
            let dir = RunDir::open(&cfg.output)?;
            let rep = pipeline::cmd_report(&dir, cfg.verify.tau)?;
            for m in &rep.missing {
                eprintln!("missing: {m}");
            }
            println!("report written to {}", dir.path("report.md").display());
        }
        Command::All { attacks } => {
            let rep = pipeline::run_all(&cfg, attacks)?;
            print!("{}", rep.to_markdown());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Tamper(_) => EXIT_TAMPER,
                _ => EXIT_ERROR,
            })
        }
    }
}
