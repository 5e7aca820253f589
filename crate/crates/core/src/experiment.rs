//! End-to-end run on the synthetic dot benchmark: generate data, train both
//! curriculum stages, and measure reconstruction, counting and attention
//! quantities at the stage boundaries.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotation::AnnotatedScene;
use crate::config::RunConfig;
use crate::dataset::{save_checkpoint, ANNOTATIONS, CLEAN_DIR, IMAGES_DIR};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::MetricsReport;
use crate::model::ToyModel;
use crate::scene::{generate_dataset, SyntheticScene};
use crate::train::{attention_distance, build_eval_set, count_records, heldout_reconstruction_loss, LossRecord, Sample, Trainer};

/// First id of evaluation scenes, keeping them apart from training ids.
pub const EVAL_FIRST_ID: u64 = 1_000_000;

/// Derived seeds, one per random consumer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub train_scenes: u64,
    pub eval_scenes: u64,
    pub eval_masks: u64,
    pub backbone: u64,
    pub init: u64,
    pub batches: u64,
}

impl Seeds {
    pub fn derive(master: u64) -> Self {
        let k = |i: u64| master.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i);
        Self { train_scenes: k(1), eval_scenes: k(2), eval_masks: k(3), backbone: k(4), init: k(5), batches: k(6) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seeds: Seeds,
    pub rec_loss_step0: f64,
    pub rec_loss_stage1: f64,
    pub rec_reduction: f64,
    pub mae_stage1: f64,
    pub mae_bypass: f64,
    pub mae_stage2: f64,
    pub attn_stage2_start: f64,
    pub attn_stage2_end: f64,
    pub attn_reduction: f64,
    pub stage1: MetricsReport,
    pub bypass: MetricsReport,
    pub stage2: MetricsReport,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub struct Data {
    pub train: Vec<SyntheticScene>,
    pub eval: Vec<Sample>,
}

pub fn build_data(cfg: &RunConfig) -> Result<Data> {
    let seeds = Seeds::derive(cfg.seed);
    let scene_cfg = cfg.scene();
    let train = generate_dataset(&scene_cfg, cfg.train_scenes, seeds.train_scenes, 0)?;
    let eval_scenes = generate_dataset(&scene_cfg, cfg.eval_scenes, seeds.eval_scenes, EVAL_FIRST_ID)?;
    let eval = build_eval_set(&eval_scenes, &cfg.eval_occ(), seeds.eval_masks)?;
    Ok(Data { train, eval })
}

pub fn new_trainer(cfg: &RunConfig) -> Result<Trainer> {
    let seeds = Seeds::derive(cfg.seed);
    let model = ToyModel::new(cfg.model(), seeds.backbone, seeds.init)?;
    let mut curriculum = cfg.curriculum()?;
    curriculum.seed = seeds.batches;
    Trainer::new(model, curriculum)
}

/// Runs both stages; every training record goes through `log`, and
/// `progress` receives short human-readable milestones.
pub fn run_experiment(
    cfg: &RunConfig,
    data: &Data,
    mut log: impl FnMut(&LossRecord) -> Result<()>,
    mut progress: impl FnMut(&str),
) -> Result<(Trainer, ExperimentReport)> {
    let mut trainer = new_trainer(cfg)?;
    let weights = trainer.cfg.loss;
    let viseq = trainer.cfg.viseq;
    let k = trainer.cfg.top_k;

    let rec_loss_step0 = heldout_reconstruction_loss(&trainer.model, &data.eval, &weights)?;
    progress(&format!("step 0: held-out reconstruction loss {rec_loss_step0:.6}"));

    trainer.run_stage(1, cfg.stage1_steps, &data.train, &mut log)?;
    let rec_loss_stage1 = heldout_reconstruction_loss(&trainer.model, &data.eval, &weights)?;
    let stage1 = MetricsReport::from_records(count_records(&trainer.model, &data.eval, false)?, vec![])?;
    let bypass = MetricsReport::from_records(count_records(&trainer.model, &data.eval, true)?, vec![])?;
    let attn_stage2_start = attention_distance(&trainer.model, &data.eval, &viseq, k)?;
    progress(&format!(
        "stage 1: reconstruction loss {rec_loss_stage1:.6}, MAE {:.4} (bypass {:.4}), attention L2 {attn_stage2_start:.6}",
        stage1.mae, bypass.mae
    ));

    trainer.run_stage(2, cfg.stage2_steps, &data.train, &mut log)?;
    let stage2 = MetricsReport::from_records(count_records(&trainer.model, &data.eval, false)?, vec![])?;
    let attn_stage2_end = attention_distance(&trainer.model, &data.eval, &viseq, k)?;
    progress(&format!("stage 2: MAE {:.4}, attention L2 {attn_stage2_end:.6}", stage2.mae));

    let report = ExperimentReport {
        seeds: Seeds::derive(cfg.seed),
        rec_loss_step0,
        rec_loss_stage1,
        rec_reduction: 1.0 - rec_loss_stage1 / rec_loss_step0,
        mae_stage1: stage1.mae,
        mae_bypass: bypass.mae,
        mae_stage2: stage2.mae,
        attn_stage2_start,
        attn_stage2_end,
        attn_reduction: 1.0 - attn_stage2_end / attn_stage2_start,
        stage1,
        bypass,
        stage2,
    };
    Ok((trainer, report))
}

/// Step ranges (inclusive) of each curriculum stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageBoundaries {
    pub stage1: [u64; 2],
    pub stage2: [u64; 2],
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub seeds: Seeds,
    pub loss_weights: LossWeights,
    pub stages: StageBoundaries,
    pub git_describe: String,
}

pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const REPORT_FILE: &str = "experiment.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const MANIFEST_FILE: &str = "run.json";
pub const CHECKPOINT_STEM: &str = "model";
pub const EVAL_DIR: &str = "eval";

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs the experiment and writes its artifacts into `out`:
/// resolved config, JSON-lines loss log, run manifest, experiment report,
/// final metrics, checkpoint and the evaluation split.
pub fn run_to_dir(cfg: &RunConfig, out: &Path, git_describe: &str, progress: impl FnMut(&str)) -> Result<ExperimentReport> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_json())?;
    let s1 = cfg.stage1_steps as u64;
    let s2 = cfg.stage2_steps as u64;
    let manifest = RunManifest {
        config: cfg.clone(),
        seeds: Seeds::derive(cfg.seed),
        loss_weights: cfg.curriculum()?.loss,
        stages: StageBoundaries { stage1: [1, s1], stage2: [s1 + 1, s1 + s2] },
        git_describe: git_describe.to_string(),
    };
    write_text(&out.join(MANIFEST_FILE), &serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;

    let data = build_data(cfg)?;
    let log_path = out.join(LOG_FILE);
    let file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(file);
    let (trainer, report) = run_experiment(
        cfg,
        &data,
        |rec| writeln!(log, "{}", rec.to_json_line()).map_err(|e| Error::io(&log_path, e)),
        progress,
    )?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    write_text(&out.join(REPORT_FILE), &report.to_json())?;
    write_text(&out.join(METRICS_FILE), &report.stage2.to_json())?;
    save_checkpoint(&trainer.model, &out.join(CHECKPOINT_STEM), serde_json::json!({ "step": trainer.step }))?;
    write_eval_split(&out.join(EVAL_DIR), &data.eval, cfg)?;
    Ok(report)
}

/// Writes evaluation samples as an OCC dataset (occluded images, clean
/// originals, annotations with occluder records).
pub fn write_eval_split(dir: &Path, samples: &[Sample], cfg: &RunConfig) -> Result<()> {
    for sub in [IMAGES_DIR, CLEAN_DIR] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut scenes: Vec<AnnotatedScene> = Vec::with_capacity(samples.len());
    for s in samples {
        s.occluded.save(&dir.join(IMAGES_DIR).join(&s.scene.file_name))?;
        s.clean.save(&dir.join(CLEAN_DIR).join(&s.scene.file_name))?;
        let mut scene = s.scene.clone();
        scene.occlusion = Some(s.mask.to_record(&scene.annotation_ids));
        scenes.push(scene);
    }
    crate::annotation::CocoDocument::from_scenes(&scenes, cfg.scene().categories()).save(&dir.join(ANNOTATIONS))
}
