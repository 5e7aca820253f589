use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use countocc_core::annotation::CocoDocument;
use countocc_core::config::RunConfig;
use countocc_core::dataset::{
    clean_image_path, evaluate_split, images_dir, load_checked, load_checkpoint, occlude_dataset, scene_mask,
    write_dataset, OccMode,
};
use countocc_core::experiment::{run_to_dir, CONFIG_FILE};
use countocc_core::gradcheck;
use countocc_core::raster::{heatmap_u8, save_gray_u8};
use countocc_core::scene::generate_dataset;

#[derive(Parser)]
#[command(name = "countocc", version, about = "Amodal counting toolkit on synthetic dot scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Train,
    Eval,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic dot scenes as a COCO-style dataset.
    GenToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Run config supplying the scene parameters.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Occlude a dataset, writing occluded images, clean originals and
    /// occluder records.
    GenOcc {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Eval)]
        mode: Mode,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        alpha_min: Option<f64>,
        #[arg(long)]
        alpha_max: Option<f64>,
        #[arg(long)]
        target_lo: Option<f64>,
        #[arg(long)]
        target_hi: Option<f64>,
        #[arg(long)]
        side_min: Option<usize>,
        #[arg(long)]
        side_max: Option<usize>,
        /// Apply an occluder to every training image.
        #[arg(long)]
        always: bool,
    },
    /// Run both curriculum stages and write checkpoint, logs and reports.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        stage1_steps: Option<usize>,
        #[arg(long)]
        stage2_steps: Option<usize>,
        #[arg(long, default_value = "runs/default")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Export teacher and student attention maps for one image.
    Gradcam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        image_id: u64,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 900)]
        top_k: usize,
    },
    /// Run the finite-difference gradient suites.
    Losscheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenToy { out, n, seed, config } => {
            let cfg = RunConfig::resolve(config.as_deref())?;
            let scene_cfg = cfg.scene();
            let scenes = generate_dataset(&scene_cfg, n, seed, 0)?;
            let manifest = write_dataset(&out, &scenes, scene_cfg.categories())?;
            println!("wrote {} scenes to {}", scenes.len(), manifest.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::GenOcc { input, out, mode, seed, alpha_min, alpha_max, target_lo, target_hi, side_min, side_max, always } => {
            let defaults = RunConfig::default();
            let mode = match mode {
                Mode::Train => {
                    let mut c = defaults.train_occ();
                    if always {
                        c.apply_probability = 1.0;
                    }
                    c.alpha_min = alpha_min.unwrap_or(c.alpha_min);
                    c.alpha_max = alpha_max.unwrap_or(c.alpha_max);
                    c.side_min = side_min.unwrap_or(c.side_min);
                    c.side_max = side_max.unwrap_or(c.side_max);
                    c.validate()?;
                    OccMode::Train(c)
                }
                Mode::Eval => {
                    let mut c = defaults.eval_occ();
                    c.target_lo = target_lo.unwrap_or(c.target_lo);
                    c.target_hi = target_hi.unwrap_or(c.target_hi);
                    c.side_min = side_min.unwrap_or(c.side_min);
                    c.side_max = side_max.unwrap_or(c.side_max);
                    c.validate()?;
                    OccMode::Eval(c)
                }
            };
            let summary = occlude_dataset(&input, &out, &mode, seed)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            for e in &summary.skipped {
                eprintln!("skipped image {} ({}): {}", e.id, e.file_name, e.error);
            }
            Ok(exit_for(summary.skipped.is_empty()))
        }
        Command::Train { config, seed, stage1_steps, stage2_steps, out } => {
            let mut cfg = RunConfig::resolve(config.as_deref())?;
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.stage1_steps = stage1_steps.unwrap_or(cfg.stage1_steps);
            cfg.stage2_steps = stage2_steps.unwrap_or(cfg.stage2_steps);
            cfg.validate()?;
            let report = run_to_dir(&cfg, &out, &git_describe(), |msg| eprintln!("{msg}"))?;
            println!("{}", report.to_json());
            eprintln!("config written to {}", out.join(CONFIG_FILE).display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { checkpoint, manifest, report } => {
            let metrics = evaluate_split(&checkpoint, &manifest)?;
            let json = metrics.to_json();
            match report {
                Some(path) => {
                    std::fs::write(&path, &json).with_context(|| format!("writing {}", path.display()))?;
                    println!("MAE {:.4}  RMSE {:.4}  images {}", metrics.mae, metrics.rmse, metrics.n_images);
                }
                None => println!("{json}"),
            }
            for e in &metrics.errors {
                eprintln!("image {} ({}): {}", e.id, e.file_name, e.error);
            }
            Ok(exit_for(metrics.errors.is_empty()))
        }
        Command::Gradcam { checkpoint, manifest, image_id, out_dir, top_k } => {
            gradcam(&checkpoint, &manifest, image_id, &out_dir, top_k)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Losscheck { instances } => {
            let results = gradcheck::run_all(instances)?;
            let mut ok = true;
            for r in &results {
                ok &= r.passed;
                println!(
                    "{} {:<42} worst {:.3e} (tolerance {:.0e}, {} instances)",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.worst,
                    r.tolerance,
                    r.instances
                );
            }
            Ok(exit_for(ok))
        }
    }
}

fn exit_for(ok: bool) -> ExitCode {
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

/// Teacher map from the clean image, student map from the FRM-completed
/// tokens of the occluded one.
fn gradcam(checkpoint: &Path, manifest: &Path, image_id: u64, out_dir: &Path, k: usize) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let scenes = CocoDocument::load(manifest)?.scenes()?;
    let Some(scene) = scenes.iter().find(|s| s.id == image_id) else {
        bail!("image id {image_id} not in {}", manifest.display());
    };
    let occluded = load_checked(&images_dir(manifest).join(&scene.file_name), scene)?;
    let clean = load_checked(&clean_image_path(manifest, &scene.file_name), scene)?;
    let mask = scene_mask(scene);

    let teacher = model.gradcam_autodiff(&model.backbone_tokens(&clean)?, k)?;
    let tokens = model.backbone_tokens(&occluded)?;
    let z_vt = model.fuse(&tokens, scene.class_id, &scene.exemplars)?;
    let student_pred = model.forward_student(&occluded, &mask, &z_vt, false)?;
    let student = model.gradcam_autodiff(&student_pred.tokens, k)?;

    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    for (tag, map) in [("teacher", &teacher), ("student", &student)] {
        let path = out_dir.join(format!("{image_id}_{tag}.png"));
        save_gray_u8(&heatmap_u8(&map.g), &path)?;
        println!("{tag}: {} (betas {:?})", path.display(), map.betas);
    }
    Ok(())
}
