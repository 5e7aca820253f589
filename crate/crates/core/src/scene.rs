//! Synthetic dot scenes: flat gray canvases with `N` colored discs of one
//! class, annotated like a COCO counting dataset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotation::{AnnotatedScene, BoxAnnotation, CocoCategory};
use crate::error::{Error, Result};
use crate::raster::Image;

pub const CLASS_NAMES: [&str; 4] = ["red disc", "green disc", "blue disc", "yellow disc"];
const CLASS_COLORS: [[f32; 3]; 4] = [[0.95, 0.2, 0.15], [0.2, 0.9, 0.3], [0.2, 0.35, 0.95], [0.95, 0.9, 0.2]];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub count_min: usize,
    pub count_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub classes: usize,
    pub exemplars: usize,
    /// Extra clearance between disc rims.
    pub min_gap: f64,
    pub background: f32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 48,
            height: 48,
            count_min: 3,
            count_max: 12,
            radius_min: 2.5,
            radius_max: 3.5,
            classes: 3,
            exemplars: 3,
            min_gap: 1.0,
            background: 0.4,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count_min == 0 || self.count_min > self.count_max {
            return Err(Error::Config(format!("bad count range [{}, {}]", self.count_min, self.count_max)));
        }
        if !(0.0 < self.radius_min && self.radius_min <= self.radius_max) {
            return Err(Error::Config("bad radius range".into()));
        }
        if self.classes == 0 || self.classes > CLASS_NAMES.len() {
            return Err(Error::Config(format!("classes must be in 1..={}", CLASS_NAMES.len())));
        }
        if (self.width as f64) < 2.0 * self.radius_max + 2.0 || (self.height as f64) < 2.0 * self.radius_max + 2.0 {
            return Err(Error::Config("canvas too small for a disc".into()));
        }
        Ok(())
    }

    pub fn categories(&self) -> Vec<CocoCategory> {
        (0..self.classes).map(|id| CocoCategory { id, name: CLASS_NAMES[id].to_string() }).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image: Image,
    pub scene: AnnotatedScene,
}

impl SyntheticScene {
    pub fn count(&self) -> usize {
        self.scene.count()
    }
}

/// One scene; `id` also seeds annotation ids (`id·1000 + k`).
pub fn generate_scene<R: Rng + ?Sized>(cfg: &SceneConfig, id: u64, rng: &mut R) -> Result<SyntheticScene> {
    cfg.validate()?;
    if id.checked_mul(1000).and_then(|v| v.checked_add(999)).is_none() {
        return Err(Error::Config(format!("scene id {id} too large for annotation ids")));
    }
    let n = rng.gen_range(cfg.count_min..=cfg.count_max);
    let class_id = rng.gen_range(0..cfg.classes);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let mut discs: Vec<(f64, f64, f64)> = Vec::with_capacity(n);
    let mut tries = 0;
    while discs.len() < n {
        tries += 1;
        if tries > 10_000 {
            return Err(Error::Config(format!("could not place {n} discs on a {}x{} canvas", cfg.width, cfg.height)));
        }
        let r = rng.gen_range(cfg.radius_min..=cfg.radius_max);
        let cx = rng.gen_range(r + 0.5..w - r - 0.5);
        let cy = rng.gen_range(r + 0.5..h - r - 0.5);
        let clear = discs.iter().all(|&(x, y, q)| {
            let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
            d >= r + q + cfg.min_gap
        });
        if clear {
            discs.push((cx, cy, r));
        }
    }

    let mut image = Image::zeros(cfg.height, cfg.width, 3);
    image.pixels.fill(cfg.background);
    let color = CLASS_COLORS[class_id];
    for &(cx, cy, r) in &discs {
        let (x0, x1) = ((cx - r).floor() as usize, ((cx + r).ceil() as usize).min(cfg.width));
        let (y0, y1) = ((cy - r).floor() as usize, ((cy + r).ceil() as usize).min(cfg.height));
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if (px - cx).powi(2) + (py - cy).powi(2) <= r * r {
                    for (c, &v) in color.iter().enumerate() {
                        image.pixels[[y, x, c]] = v;
                    }
                }
            }
        }
    }

    let boxes = discs
        .iter()
        .map(|&(cx, cy, r)| BoxAnnotation::new(cx - r, cy - r, cx + r, cy + r))
        .collect::<Result<Vec<_>>>()?;
    let scene = AnnotatedScene {
        id,
        file_name: format!("{id:06}.png"),
        width: cfg.width,
        height: cfg.height,
        exemplars: boxes.iter().take(cfg.exemplars).copied().collect(),
        annotation_ids: (0..n as u64).map(|k| id * 1000 + k).collect(),
        boxes,
        class_id,
        label: CLASS_NAMES[class_id].to_string(),
        occlusion: None,
    };
    Ok(SyntheticScene { image, scene })
}

/// Independent stream per scene index derived from the master seed.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `n` scenes with ids `first_id..first_id + n`, generated in parallel.
pub fn generate_dataset(cfg: &SceneConfig, n: usize, seed: u64, first_id: u64) -> Result<Vec<SyntheticScene>> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| generate_scene(cfg, first_id + i, &mut scene_rng(seed, i)))
        .collect()
}
