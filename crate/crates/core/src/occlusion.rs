//! Rectangular occluder synthesis.
//!
//! Two generators share one geometry: occluders are axis-aligned rectangles
//! centered on annotated instances, and an instance counts as occluded when
//! the pixel holding its box center is masked.
//!
//! * [`sample_training_mask`] draws one object-anchored rectangle per image
//!   such that the number of hidden centers lands in
//!   `[ceil(alpha_min·N), floor(alpha_max·N)]` (`[1, 2]` for `N < 4`), falling
//!   back to a randomly placed rectangle after `max_attempts` failures.
//! * [`build_eval_mask`] greedily unions center-anchored rectangles until a
//!   target fraction of instances is hidden.

use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{AnnotatedScene, BoxAnnotation, OcclusionRecord};
use crate::error::{Error, Result};
use crate::raster::Image;

/// Pixel rectangle `[x, x + w) × [y, y + h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn contains(&self, px: usize, py: usize) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }

    fn to_array(self) -> [u32; 4] {
        [self.x as u32, self.y as u32, self.w as u32, self.h as u32]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMask {
    /// `true` = occluded, indexed `[y, x]`.
    pub mask: Array2<bool>,
    pub rectangles: Vec<Rect>,
    /// Indices into the scene's boxes whose center pixel is masked.
    pub occluded_instance_ids: Vec<usize>,
    /// Training mask produced by the random-position fallback.
    pub fallback: bool,
    /// Evaluation mask whose hidden fraction misses the target window.
    pub window_infeasible: bool,
}

impl OcclusionMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            mask: Array2::from_elem((height, width), false),
            rectangles: Vec::new(),
            occluded_instance_ids: Vec::new(),
            fallback: false,
            window_infeasible: false,
        }
    }

    /// Union of `rectangles`, each clipped to the image.
    pub fn from_rectangles(height: usize, width: usize, rectangles: &[Rect], boxes: &[BoxAnnotation]) -> Self {
        let mut out = Self::empty(height, width);
        for r in rectangles {
            out.paint(clip_rect(*r, width, height));
        }
        out.occluded_instance_ids = occluded_ids(&out.mask, boxes);
        out
    }

    /// Rebuilds a mask from a stored record for `scene`.
    pub fn from_record(record: &OcclusionRecord, scene: &AnnotatedScene) -> Self {
        let rects: Vec<Rect> = record
            .rectangles
            .iter()
            .map(|r| Rect { x: r[0] as usize, y: r[1] as usize, w: r[2] as usize, h: r[3] as usize })
            .collect();
        let mut out = Self::from_rectangles(scene.height, scene.width, &rects, &scene.boxes);
        out.fallback = record.fallback;
        out.window_infeasible = record.window_infeasible;
        out
    }

    pub fn height(&self) -> usize {
        self.mask.nrows()
    }

    pub fn width(&self) -> usize {
        self.mask.ncols()
    }

    pub fn is_masked(&self, x: usize, y: usize) -> bool {
        self.mask[[y, x]]
    }

    pub fn masked_pixels(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// 0 = visible, 255 = occluded.
    pub fn to_raster(&self) -> Array2<u8> {
        self.mask.mapv(|m| if m { 255 } else { 0 })
    }

    /// Record keyed by annotation ids (`annotation_ids[i]` names box `i`).
    pub fn to_record(&self, annotation_ids: &[u64]) -> OcclusionRecord {
        OcclusionRecord {
            rectangles: self.rectangles.iter().map(|r| r.to_array()).collect(),
            occluded_ids: self.occluded_instance_ids.iter().map(|&i| annotation_ids[i]).collect(),
            fallback: self.fallback,
            window_infeasible: self.window_infeasible,
        }
    }

    fn paint(&mut self, r: Rect) {
        for y in r.y..r.y + r.h {
            for x in r.x..r.x + r.w {
                self.mask[[y, x]] = true;
            }
        }
        self.rectangles.push(r);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOccConfig {
    pub apply_probability: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub side_min: usize,
    pub side_max: usize,
    pub max_attempts: usize,
    /// Rectangle corners are snapped outward to multiples of this; 1 keeps
    /// them free.
    #[serde(default = "one")]
    pub grid: usize,
}

fn one() -> usize {
    1
}

impl Default for TrainOccConfig {
    fn default() -> Self {
        Self {
            apply_probability: 0.5,
            alpha_min: 0.15,
            alpha_max: 0.50,
            side_min: 128,
            side_max: 256,
            max_attempts: 50,
            grid: 1,
        }
    }
}

impl TrainOccConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(Error::Config(format!("apply_probability {} outside [0, 1]", self.apply_probability)));
        }
        if !(0.0 <= self.alpha_min && self.alpha_min <= self.alpha_max && self.alpha_max <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= alpha_min <= alpha_max <= 1, got [{}, {}]",
                self.alpha_min, self.alpha_max
            )));
        }
        if self.side_min == 0 || self.side_min > self.side_max {
            return Err(Error::Config(format!("bad side range [{}, {}]", self.side_min, self.side_max)));
        }
        if self.max_attempts == 0 || self.grid == 0 {
            return Err(Error::Config("max_attempts and grid must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOccConfig {
    pub target_lo: f64,
    pub target_hi: f64,
    pub side_min: usize,
    pub side_max: usize,
    /// Upper bound on rectangles per image.
    pub max_rectangles: usize,
    /// Random sizes tried per anchor before shrinking.
    pub size_tries: usize,
    /// As [`TrainOccConfig::grid`].
    #[serde(default = "one")]
    pub grid: usize,
}

impl Default for EvalOccConfig {
    fn default() -> Self {
        Self {
            target_lo: 0.25,
            target_hi: 0.35,
            side_min: 32,
            side_max: 256,
            max_rectangles: 64,
            size_tries: 8,
            grid: 1,
        }
    }
}

impl EvalOccConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.target_lo && self.target_lo <= self.target_hi && self.target_hi <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= target_lo <= target_hi <= 1, got [{}, {}]",
                self.target_lo, self.target_hi
            )));
        }
        if self.side_min == 0 || self.side_min > self.side_max {
            return Err(Error::Config(format!("bad side range [{}, {}]", self.side_min, self.side_max)));
        }
        if self.max_rectangles == 0 || self.size_tries == 0 || self.grid == 0 {
            return Err(Error::Config("max_rectangles, size_tries and grid must be positive".into()));
        }
        Ok(())
    }
}

/// Allowed number of hidden centers for a training mask over `n` instances.
pub fn occluded_range(n: usize, alpha_min: f64, alpha_max: f64) -> (usize, usize) {
    if n < 4 {
        return (1, 2);
    }
    let nf = n as f64;
    // Nudge so that e.g. 0.15 * 20 = 3.0000000000000004 does not ceil to 4.
    let lo = (alpha_min * nf - 1e-9).ceil().max(0.0) as usize;
    let hi = (alpha_max * nf + 1e-9).floor() as usize;
    (lo, hi)
}

/// Integer counts inside `[lo·n, hi·n]`.
pub fn window_counts(n: usize, lo: f64, hi: f64) -> (usize, usize) {
    let nf = n as f64;
    ((lo * nf - 1e-9).ceil().max(0.0) as usize, (hi * nf + 1e-9).floor() as usize)
}

fn sample_side<R: Rng + ?Sized>(rng: &mut R, lo: usize, hi: usize, limit: usize) -> usize {
    let lo = lo.min(limit).max(1);
    let hi = hi.min(limit).max(lo);
    rng.gen_range(lo..=hi)
}

/// Rectangle of size `w × h` centered on `(cx, cy)`, shifted to lie inside
/// the image.
fn centered_rect(cx: f64, cy: f64, w: usize, h: usize, width: usize, height: usize) -> Rect {
    let place = |c: f64, side: usize, extent: usize| {
        let start = (c - side as f64 / 2.0).round().max(0.0) as usize;
        start.min(extent - side)
    };
    Rect { x: place(cx, w, width), y: place(cy, h, height), w, h }
}

/// Grows `r` outward to the enclosing multiples of `grid`, clipped to the
/// image.
fn snap_rect(r: Rect, grid: usize, width: usize, height: usize) -> Rect {
    if grid <= 1 {
        return r;
    }
    let lo = |v: usize| v / grid * grid;
    let hi = |v: usize, extent: usize| (v.div_ceil(grid) * grid).min(extent);
    let (x0, y0) = (lo(r.x), lo(r.y));
    let (x1, y1) = (hi(r.x + r.w, width), hi(r.y + r.h, height));
    Rect { x: x0, y: y0, w: x1 - x0, h: y1 - y0 }
}

fn clip_rect(r: Rect, width: usize, height: usize) -> Rect {
    let x = r.x.min(width);
    let y = r.y.min(height);
    Rect { x, y, w: r.w.min(width - x), h: r.h.min(height - y) }
}

fn occluded_ids(mask: &Array2<bool>, boxes: &[BoxAnnotation]) -> Vec<usize> {
    let (h, w) = mask.dim();
    boxes
        .iter()
        .enumerate()
        .filter(|(_, b)| {
            let (px, py) = b.center_pixel(w, h);
            mask[[py, px]]
        })
        .map(|(i, _)| i)
        .collect()
}

/// Object-aware training occluder. With probability `1 - p` the mask is empty.
pub fn sample_training_mask<R: Rng + ?Sized>(
    scene: &AnnotatedScene,
    cfg: &TrainOccConfig,
    rng: &mut R,
) -> Result<OcclusionMask> {
    cfg.validate()?;
    let n = scene.boxes.len();
    if n == 0 {
        return Err(Error::NoInstances);
    }
    let (width, height) = (scene.width, scene.height);
    if rng.gen::<f64>() >= cfg.apply_probability {
        return Ok(OcclusionMask::empty(height, width));
    }

    let (n_min, n_max) = occluded_range(n, cfg.alpha_min, cfg.alpha_max);
    for _ in 0..cfg.max_attempts {
        let anchor = &scene.boxes[rng.gen_range(0..n)];
        let w = sample_side(rng, cfg.side_min, cfg.side_max, width);
        let h = sample_side(rng, cfg.side_min, cfg.side_max, height);
        let (cx, cy) = anchor.center();
        let rect = snap_rect(centered_rect(cx, cy, w, h, width, height), cfg.grid, width, height);
        let hidden = scene
            .boxes
            .iter()
            .filter(|b| {
                let (px, py) = b.center_pixel(width, height);
                rect.contains(px, py)
            })
            .count();
        if (n_min..=n_max).contains(&hidden) {
            return Ok(OcclusionMask::from_rectangles(height, width, &[rect], &scene.boxes));
        }
    }

    let w = sample_side(rng, cfg.side_min, cfg.side_max, width);
    let h = sample_side(rng, cfg.side_min, cfg.side_max, height);
    let rect = Rect { x: rng.gen_range(0..=width - w), y: rng.gen_range(0..=height - h), w, h };
    let rect = snap_rect(rect, cfg.grid, width, height);
    let mut out = OcclusionMask::from_rectangles(height, width, &[rect], &scene.boxes);
    out.fallback = true;
    Ok(out)
}

/// Benchmark occluder hiding a target fraction of instance centers.
///
/// The target count is drawn uniformly from the integer counts inside
/// `[target_lo·N, target_hi·N]`. When no count of at least one fits the
/// window, the achievable count closest to it is used and the mask is
/// flagged `window_infeasible`.
pub fn build_eval_mask<R: Rng + ?Sized>(
    scene: &AnnotatedScene,
    cfg: &EvalOccConfig,
    rng: &mut R,
) -> Result<OcclusionMask> {
    cfg.validate()?;
    let n = scene.boxes.len();
    if n == 0 {
        return Err(Error::NoInstances);
    }
    let (width, height) = (scene.width, scene.height);
    let (k_lo, k_hi) = window_counts(n, cfg.target_lo, cfg.target_hi);
    let feasible = k_lo.max(1) <= k_hi;
    let (target, upper) = if feasible {
        let t = rng.gen_range(k_lo.max(1)..=k_hi);
        (t, k_hi)
    } else {
        let nf = n as f64;
        let distance = |c: usize| {
            let f = c as f64 / nf;
            (cfg.target_lo - f).max(f - cfg.target_hi).max(0.0)
        };
        let t = (1..=n)
            .min_by(|&a, &b| distance(a).partial_cmp(&distance(b)).expect("finite distance"))
            .expect("n >= 1");
        (t, t)
    };

    let centers: Vec<(usize, usize)> = scene.boxes.iter().map(|b| b.center_pixel(width, height)).collect();
    let mut mask = Array2::from_elem((height, width), false);
    let mut hidden = vec![false; n];
    let mut hidden_count = 0;
    let mut rects = Vec::new();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);

    'anchors: for &anchor in &order {
        if hidden_count >= target || rects.len() >= cfg.max_rectangles {
            break;
        }
        if hidden[anchor] {
            continue;
        }
        let (cx, cy) = scene.boxes[anchor].center();
        let mut sizes: Vec<(usize, usize)> = (0..cfg.size_tries)
            .map(|_| {
                (
                    sample_side(rng, cfg.side_min, cfg.side_max, width),
                    sample_side(rng, cfg.side_min, cfg.side_max, height),
                )
            })
            .collect();
        let mut side = cfg.side_min.min(width).min(height);
        loop {
            side /= 2;
            sizes.push((side.max(1), side.max(1)));
            if side <= 1 {
                break;
            }
        }
        for (w, h) in sizes {
            let rect = snap_rect(centered_rect(cx, cy, w, h, width, height), cfg.grid, width, height);
            if !rect.contains(centers[anchor].0, centers[anchor].1) {
                continue;
            }
            let newly: Vec<usize> = (0..n)
                .filter(|&i| !hidden[i] && rect.contains(centers[i].0, centers[i].1))
                .collect();
            if hidden_count + newly.len() <= upper {
                for i in newly {
                    hidden[i] = true;
                    hidden_count += 1;
                }
                Zip::indexed(&mut mask).for_each(|(y, x), m| {
                    if rect.contains(x, y) {
                        *m = true;
                    }
                });
                rects.push(rect);
                continue 'anchors;
            }
        }
    }

    let mut out = OcclusionMask::from_rectangles(height, width, &rects, &scene.boxes);
    debug_assert_eq!(out.mask, mask);
    let achieved = out.occluded_instance_ids.len();
    out.window_infeasible = !feasible || achieved < k_lo || achieved > k_hi;
    Ok(out)
}

/// Zeroes every channel of masked pixels; other pixels are copied unchanged.
pub fn apply_mask(image: &Image, mask: &OcclusionMask) -> Result<Image> {
    if (image.height(), image.width()) != mask.mask.dim() {
        return Err(Error::shape(format!(
            "image {}x{} vs mask {}x{}",
            image.height(),
            image.width(),
            mask.height(),
            mask.width()
        )));
    }
    let mut out = image.clone();
    for ((y, x, _), v) in out.pixels.indexed_iter_mut() {
        if mask.mask[[y, x]] {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// `(visible, occluded)` by center-pixel membership in the mask.
pub fn count_occluded_instances(mask: &OcclusionMask, boxes: &[BoxAnnotation]) -> (usize, usize) {
    let occluded = occluded_ids(&mask.mask, boxes).len();
    (boxes.len() - occluded, occluded)
}
