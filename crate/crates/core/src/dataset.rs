//! On-disk datasets, checkpoints and split evaluation.
//!
//! A dataset directory holds `annotations.json` (COCO-style) and the images
//! under `images/`. Occluded datasets keep the unoccluded originals under
//! `clean/` so teacher views stay available.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotation::{AnnotatedScene, CocoCategory, CocoDocument};
use crate::error::{Error, Result};
use crate::metrics::{ImageError, ImageRecord, MetricsReport};
use crate::model::{ModelConfig, ToyModel};
use crate::occlusion::{
    apply_mask, build_eval_mask, count_occluded_instances, sample_training_mask, EvalOccConfig, OcclusionMask,
    TrainOccConfig,
};
use crate::params::ParamStore;
use crate::raster::Image;
use crate::scene::{scene_rng, SyntheticScene};

pub const ANNOTATIONS: &str = "annotations.json";
pub const IMAGES_DIR: &str = "images";
pub const CLEAN_DIR: &str = "clean";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes scenes (images and annotations) under `dir`.
pub fn write_dataset(dir: &Path, scenes: &[SyntheticScene], categories: Vec<CocoCategory>) -> Result<PathBuf> {
    create_dir(&dir.join(IMAGES_DIR))?;
    scenes.par_iter().try_for_each(|s| s.image.save(&dir.join(IMAGES_DIR).join(&s.scene.file_name)))?;
    let annotated: Vec<AnnotatedScene> = scenes.iter().map(|s| s.scene.clone()).collect();
    let manifest = dir.join(ANNOTATIONS);
    CocoDocument::from_scenes(&annotated, categories).save(&manifest)?;
    Ok(manifest)
}

/// Directory holding a manifest's images.
pub fn images_dir(manifest: &Path) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(IMAGES_DIR)
}

/// Unoccluded image path when the dataset keeps originals, else the image
/// itself.
pub fn clean_image_path(manifest: &Path, file_name: &str) -> PathBuf {
    let root = manifest.parent().unwrap_or(Path::new("."));
    let clean = root.join(CLEAN_DIR).join(file_name);
    if clean.exists() {
        clean
    } else {
        root.join(IMAGES_DIR).join(file_name)
    }
}

/// Occluder sampler for [`occlude_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OccMode {
    Train(TrainOccConfig),
    Eval(EvalOccConfig),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OccSummary {
    pub images: usize,
    pub occluded: usize,
    pub fallback: usize,
    pub window_infeasible: usize,
    pub skipped: Vec<ImageError>,
}

/// Reads a dataset, occludes every image with its own seeded stream (keyed
/// by image id) and writes the OCC dataset to `out`. Images that cannot be
/// read are skipped and listed.
pub fn occlude_dataset(manifest: &Path, out: &Path, mode: &OccMode, seed: u64) -> Result<OccSummary> {
    let doc = CocoDocument::load(manifest)?;
    let scenes = doc.scenes()?;
    let src = images_dir(manifest);
    create_dir(&out.join(IMAGES_DIR))?;
    create_dir(&out.join(CLEAN_DIR))?;
    let results: Vec<std::result::Result<AnnotatedScene, ImageError>> = scenes
        .par_iter()
        .map(|scene| {
            let run = || -> Result<AnnotatedScene> {
                let image = load_checked(&src.join(&scene.file_name), scene)?;
                let mut rng = scene_rng(seed, scene.id);
                let mask = match mode {
                    OccMode::Train(cfg) => sample_training_mask(scene, cfg, &mut rng)?,
                    OccMode::Eval(cfg) => build_eval_mask(scene, cfg, &mut rng)?,
                };
                apply_mask(&image, &mask)?.save(&out.join(IMAGES_DIR).join(&scene.file_name))?;
                image.save(&out.join(CLEAN_DIR).join(&scene.file_name))?;
                let mut scene = scene.clone();
                scene.occlusion = Some(mask.to_record(&scene.annotation_ids));
                Ok(scene)
            };
            run().map_err(|e| ImageError { id: scene.id, file_name: scene.file_name.clone(), error: e.to_string() })
        })
        .collect();
    let mut summary = OccSummary::default();
    let mut kept = Vec::new();
    for r in results {
        match r {
            Ok(s) => {
                let rec = s.occlusion.as_ref().expect("just set");
                summary.images += 1;
                summary.occluded += usize::from(!rec.rectangles.is_empty());
                summary.fallback += usize::from(rec.fallback);
                summary.window_infeasible += usize::from(rec.window_infeasible);
                kept.push(s);
            }
            Err(e) => summary.skipped.push(e),
        }
    }
    CocoDocument::from_scenes(&kept, doc.categories).save(&out.join(ANNOTATIONS))?;
    Ok(summary)
}

/// Loads an image and checks it against the manifest entry.
pub fn load_checked(path: &Path, scene: &AnnotatedScene) -> Result<Image> {
    let image = Image::load(path)?;
    if image.height() != scene.height || image.width() != scene.width {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!(
                "image is {}x{}, manifest says {}x{}",
                image.width(),
                image.height(),
                scene.width,
                scene.height
            ),
        });
    }
    Ok(image)
}

/// The scene's stored occluder, or an empty mask.
pub fn scene_mask(scene: &AnnotatedScene) -> OcclusionMask {
    match &scene.occlusion {
        Some(rec) => OcclusionMask::from_record(rec, scene),
        None => OcclusionMask::empty(scene.height, scene.width),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    #[serde(default)]
    extra: serde_json::Value,
}

pub fn save_checkpoint(model: &ToyModel, stem: &Path, extra: serde_json::Value) -> Result<()> {
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let meta = CheckpointMeta { model: model.cfg.clone(), extra };
    model.params.save(stem, serde_json::to_value(meta).expect("metadata serializes"))
}

pub fn load_checkpoint(stem: &Path) -> Result<ToyModel> {
    let (params, meta) = ParamStore::load(stem)?;
    let meta: CheckpointMeta = serde_json::from_value(meta).map_err(|e| Error::Format {
        path: stem.to_path_buf(),
        detail: format!("checkpoint metadata: {e}"),
    })?;
    ToyModel::with_params(meta.model, params)
}

/// Per-image count record for one manifest entry.
pub fn evaluate_scene(model: &ToyModel, manifest: &Path, scene: &AnnotatedScene) -> Result<ImageRecord> {
    let image = load_checked(&images_dir(manifest).join(&scene.file_name), scene)?;
    let mask = scene_mask(scene);
    let split = model.predict_counts(&image, scene.class_id, &scene.exemplars, &mask, false)?;
    let (vis, occ) = count_occluded_instances(&mask, &scene.boxes);
    Ok(ImageRecord {
        id: scene.id,
        y: scene.count() as f64,
        y_hat: split.total,
        y_vis: vis as f64,
        y_hat_vis: split.visible,
        y_occ: occ as f64,
        y_hat_occ: split.occluded,
    })
}

/// Evaluates every manifest image in parallel. Failing images become error
/// entries; the report is built from the rest (at least one must succeed).
pub fn evaluate_split(checkpoint: &Path, manifest: &Path) -> Result<MetricsReport> {
    let model = load_checkpoint(checkpoint)?;
    evaluate_manifest(&model, manifest)
}

pub fn evaluate_manifest(model: &ToyModel, manifest: &Path) -> Result<MetricsReport> {
    let scenes = CocoDocument::load(manifest)?.scenes()?;
    let results: Vec<std::result::Result<ImageRecord, ImageError>> = scenes
        .par_iter()
        .map(|s| {
            evaluate_scene(model, manifest, s).map_err(|e| ImageError {
                id: s.id,
                file_name: s.file_name.clone(),
                error: e.to_string(),
            })
        })
        .collect();
    let (mut records, mut errors) = (Vec::new(), Vec::new());
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => errors.push(e),
        }
    }
    if records.is_empty() {
        return Err(Error::Config(format!("no image of {} could be evaluated", manifest.display())));
    }
    MetricsReport::from_records(records, errors)
}
