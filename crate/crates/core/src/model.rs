//! Toy counting model around the FRM.
//!
//! * Backbone (frozen): each level cell of stride `s` is average-pooled into
//!   a `g × g` sub-grid per color channel, then `tanh(x·W_ℓ + b_ℓ)`.
//! * Fusion: every exemplar box gives one token
//!   `[class embedding, mean level-0 feature under the box]·W_f + b_f`.
//! * Head: `H = Σ_ℓ P_ℓ Z_ℓ W_ℓ + b` on the level-0 grid (`P_ℓ` is nearest
//!   upsampling), logits `Y = H (E W_cls)ᵀ` against the class embeddings
//!   `E`, and count density `softplus(max_j Y_ij + b_d)` per cell, so the
//!   matching score and the count read the same evidence.

use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::BoxAnnotation;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::frm::{Frm, FrmConfig};
use crate::gradcam::{
    gradcam_tokens, matching_score, top_k_selection, AttentionMap, AutodiffOracle, GradientOracle, LogitHead,
};
use crate::occlusion::{apply_mask, OcclusionMask};
use crate::params::{uniform, xavier, Bound, ParamStore};
use crate::pyramid::{downsample_mask, FeaturePyramid};
use crate::raster::Image;

pub const BACKBONE_PREFIX: &str = "backbone.";
pub const HEAD_PREFIX: &str = "head.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Pixel stride per level; level `ℓ` is `H/s_ℓ × W/s_ℓ`.
    pub strides: Vec<usize>,
    /// Pooling sub-grid per cell side.
    pub patch_grid: usize,
    pub classes: usize,
    pub class_dim: usize,
    pub head_dim: usize,
    /// Scale of the random backbone projection.
    pub backbone_gain: f64,
    pub frm: FrmConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 48,
            image_width: 48,
            strides: vec![4, 8, 16],
            patch_grid: 4,
            classes: 3,
            class_dim: 8,
            head_dim: 32,
            backbone_gain: 1.5,
            frm: FrmConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.frm.validate()?;
        if self.strides.len() != self.frm.channels.len() {
            return Err(Error::Config(format!(
                "{} strides for {} channel widths",
                self.strides.len(),
                self.frm.channels.len()
            )));
        }
        for &s in &self.strides {
            if s == 0 || self.image_height % s != 0 || self.image_width % s != 0 || s % self.patch_grid != 0 {
                return Err(Error::Config(format!(
                    "stride {s} must divide the image and be a multiple of patch_grid {}",
                    self.patch_grid
                )));
            }
        }
        if self.strides.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("strides must increase".into()));
        }
        if self.classes == 0 || self.class_dim == 0 || self.head_dim == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        Ok(())
    }

    pub fn level_dims(&self) -> Vec<(usize, usize)> {
        self.strides.iter().map(|s| (self.image_height / s, self.image_width / s)).collect()
    }

    fn patch_inputs(&self) -> usize {
        self.patch_grid * self.patch_grid * 3
    }
}

/// Visible/occluded decomposition of a predicted count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountSplit {
    pub total: f64,
    pub visible: f64,
    pub occluded: f64,
}

/// Spreads each cell's mass evenly over its `cell × cell` pixels and
/// integrates inside and outside the mask. `total = visible + occluded`.
pub fn split_density(density: &Array2<f64>, cell: usize, mask: &OcclusionMask) -> Result<CountSplit> {
    let (h, w) = density.dim();
    if mask.height() != h * cell || mask.width() != w * cell {
        return Err(Error::shape(format!(
            "density {h}x{w} at cell {cell} vs mask {}x{}",
            mask.height(),
            mask.width()
        )));
    }
    let area = (cell * cell) as f64;
    let (mut visible, mut occluded) = (0.0, 0.0);
    for ((y, x), &d) in density.indexed_iter() {
        let hidden = (0..cell)
            .flat_map(|dy| (0..cell).map(move |dx| (dy, dx)))
            .filter(|&(dy, dx)| mask.mask[[y * cell + dy, x * cell + dx]])
            .count() as f64;
        occluded += d * hidden / area;
        visible += d * (area - hidden) / area;
    }
    Ok(CountSplit { total: visible + occluded, visible, occluded })
}

/// Outputs of one forward pass on one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Per-level tokens fed to the head (completed for the student).
    pub tokens: Vec<Array2<f64>>,
    pub logits: Array2<f64>,
    /// Count density on the level-0 grid.
    pub density: Array2<f64>,
}

impl Prediction {
    pub fn count(&self) -> f64 {
        self.density.sum()
    }
}

pub struct ForwardVars<'t> {
    pub levels: Vec<Var<'t>>,
    /// Reconstructed rows per level (`None` where nothing was rebuilt).
    pub reconstructed: Vec<Option<Var<'t>>>,
    pub occluded: Vec<Vec<usize>>,
    pub logits: Var<'t>,
    /// `Q × 1`.
    pub density: Var<'t>,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    pub cfg: ModelConfig,
    pub frm: Frm,
    pub params: ParamStore,
    upsample: Vec<Array2<f64>>,
}

impl ToyModel {
    /// Backbone from `backbone_seed`, everything trainable from `seed`.
    pub fn new(cfg: ModelConfig, backbone_seed: u64, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let dims = cfg.level_dims();
        let frm = Frm::new(cfg.frm.clone(), dims.clone())?;
        let mut params = ParamStore::new();

        let mut rng = ChaCha8Rng::seed_from_u64(backbone_seed);
        let fan_in = cfg.patch_inputs();
        let bound = cfg.backbone_gain * (3.0 / fan_in as f64).sqrt();
        for (l, &c) in cfg.frm.channels.iter().enumerate() {
            params.insert(format!("backbone.l{l}.w"), uniform(&mut rng, fan_in, c, bound));
            params.insert(format!("backbone.l{l}.b"), uniform(&mut rng, 1, c, 0.5));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c0 = cfg.frm.channels[0];
        params.insert("fusion.class_embed", uniform(&mut rng, cfg.classes, cfg.class_dim, 1.0));
        params.insert("fusion.w", xavier(&mut rng, cfg.class_dim + c0, cfg.frm.fusion_dim));
        params.insert("fusion.b", Array2::zeros((1, cfg.frm.fusion_dim)));
        for (l, &c) in cfg.frm.channels.iter().enumerate() {
            params.insert(format!("head.l{l}.w"), xavier(&mut rng, c, cfg.head_dim));
        }
        params.insert("head.b", Array2::zeros((1, cfg.head_dim)));
        params.insert("head.cls", xavier(&mut rng, cfg.class_dim, cfg.head_dim));
        params.insert("head.count_bias", Array2::from_elem((1, 1), -3.0));
        params.extend(frm.init_params(&mut rng));

        Ok(Self::from_parts(cfg, frm, params))
    }

    /// Rebuilds a model around existing parameters (e.g. a checkpoint).
    pub fn with_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let frm = Frm::new(cfg.frm.clone(), cfg.level_dims())?;
        let fresh = Self::new(cfg.clone(), 0, 0)?;
        for name in fresh.params.names() {
            let expected = fresh.params.get(name)?.dim();
            let got = params.get(name)?.dim();
            if got != expected {
                return Err(Error::shape(format!("`{name}` is {got:?}, expected {expected:?}")));
            }
        }
        Ok(Self::from_parts(cfg, frm, params))
    }

    fn from_parts(cfg: ModelConfig, frm: Frm, params: ParamStore) -> Self {
        let dims = cfg.level_dims();
        let (h0, w0) = dims[0];
        let upsample = dims
            .iter()
            .map(|&(h, w)| {
                Array2::from_shape_fn((h0 * w0, h * w), |(q, j)| {
                    let (y, x) = (q / w0, q % w0);
                    if (y * h / h0) * w + x * w / w0 == j {
                        1.0
                    } else {
                        0.0
                    }
                })
            })
            .collect();
        Self { cfg, frm, params, upsample }
    }

    pub fn level_dims(&self) -> Vec<(usize, usize)> {
        self.cfg.level_dims()
    }

    pub fn num_levels(&self) -> usize {
        self.cfg.strides.len()
    }

    pub fn backbone_params(&self) -> ParamStore {
        self.params.subset(BACKBONE_PREFIX)
    }

    /// Frozen backbone: per-level `(H_ℓ·W_ℓ) × C_ℓ` tokens.
    pub fn backbone_tokens(&self, image: &Image) -> Result<Vec<Array2<f64>>> {
        if image.height() != self.cfg.image_height || image.width() != self.cfg.image_width || image.channels() != 3 {
            return Err(Error::shape(format!(
                "image {}x{}x{}, model expects {}x{}x3",
                image.height(),
                image.width(),
                image.channels(),
                self.cfg.image_height,
                self.cfg.image_width
            )));
        }
        let g = self.cfg.patch_grid;
        let mut out = Vec::with_capacity(self.num_levels());
        for (l, (&s, &(h, w))) in self.cfg.strides.iter().zip(&self.level_dims()).enumerate() {
            let sub = s / g;
            let norm = 1.0 / (sub * sub) as f64;
            let mut x = Array2::zeros((h * w, self.cfg.patch_inputs()));
            for ((py, px, c), &v) in image.pixels.indexed_iter() {
                let cell = (py / s) * w + px / s;
                let slot = ((py % s) / sub * g + (px % s) / sub) * 3 + c;
                x[[cell, slot]] += v as f64 * norm;
            }
            let mut z = x.dot(self.params.get(&format!("backbone.l{l}.w"))?);
            z += self.params.get(&format!("backbone.l{l}.b"))?;
            z.mapv_inplace(f64::tanh);
            out.push(z);
        }
        Ok(out)
    }

    /// Mean level-0 token under each exemplar box, `N_t × C_0`. Cells whose
    /// center falls in the box are pooled; tiny boxes use the cell holding
    /// their center.
    pub fn exemplar_features(&self, level0: &Array2<f64>, exemplars: &[BoxAnnotation]) -> Array2<f64> {
        let s = self.cfg.strides[0] as f64;
        let (h, w) = self.level_dims()[0];
        let mut out = Array2::zeros((exemplars.len(), level0.ncols()));
        for (row, b) in exemplars.iter().enumerate() {
            let mut cells: Vec<usize> = (0..h * w)
                .filter(|&q| {
                    let (cx, cy) = (((q % w) as f64 + 0.5) * s, ((q / w) as f64 + 0.5) * s);
                    cx >= b.x_min && cx < b.x_max && cy >= b.y_min && cy < b.y_max
                })
                .collect();
            if cells.is_empty() {
                let (cx, cy) = b.center();
                let x = ((cx / s).floor().max(0.0) as usize).min(w - 1);
                let y = ((cy / s).floor().max(0.0) as usize).min(h - 1);
                cells.push(y * w + x);
            }
            let n = cells.len() as f64;
            for q in cells {
                let mut dst = out.row_mut(row);
                dst.scaled_add(1.0 / n, &level0.row(q));
            }
        }
        out
    }

    /// Fused text-visual tokens `Z_vt` (`N_t × D`) on the tape.
    pub fn fuse_var<'t>(&self, bound: &Bound<'t>, class_id: usize, pooled: &Array2<f64>) -> Result<Var<'t>> {
        if pooled.nrows() == 0 {
            return Err(Error::MissingSemanticGuidance);
        }
        if class_id >= self.cfg.classes {
            return Err(Error::Config(format!("class {class_id} outside vocabulary of {}", self.cfg.classes)));
        }
        let embed = bound.get("fusion.class_embed").gather_rows(&vec![class_id; pooled.nrows()]);
        let tape = embed.tape();
        let input = tape.concat_cols(&[embed, tape.var(pooled.clone())]);
        Ok(input.matmul(bound.get("fusion.w")).add_row(bound.get("fusion.b")))
    }

    /// Value-level `Z_vt` from the tokens of the image the model sees.
    pub fn fuse(&self, tokens: &[Array2<f64>], class_id: usize, exemplars: &[BoxAnnotation]) -> Result<Array2<f64>> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let pooled = self.exemplar_features(&tokens[0], exemplars);
        Ok(self.fuse_var(&bound, class_id, &pooled)?.value())
    }

    /// Head outputs `(logits, density)` from per-level tokens.
    pub fn head_var<'t>(&self, bound: &Bound<'t>, levels: &[Var<'t>]) -> (Var<'t>, Var<'t>) {
        let hidden = self.hidden_var(bound, levels);
        let logits = hidden.matmul(self.class_keys_var(bound).t());
        let y = logits.value();
        let best: Vec<(usize, usize)> = y
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, row)| {
                let j = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                (i, j)
            })
            .collect();
        let density = logits.pick(&best).add_row(bound.get("head.count_bias")).softplus();
        (logits, density)
    }

    fn hidden_var<'t>(&self, bound: &Bound<'t>, levels: &[Var<'t>]) -> Var<'t> {
        let tape = levels[0].tape();
        let mut hidden: Option<Var<'t>> = None;
        for (l, z) in levels.iter().enumerate() {
            let term = tape.var(self.upsample[l].clone()).matmul(z.matmul(bound.get(&format!("head.l{l}.w"))));
            hidden = Some(match hidden {
                Some(h) => h.add(term),
                None => term,
            });
        }
        hidden.expect("at least one level").add_row(bound.get("head.b"))
    }

    /// `E W_cls`, `V × D_h`.
    fn class_keys_var<'t>(&self, bound: &Bound<'t>) -> Var<'t> {
        bound.get("fusion.class_embed").matmul(bound.get("head.cls"))
    }

    /// `∂s/∂Z_ℓ` of the matching score, built from parameters on the tape.
    /// The logits are linear in the tokens, so only the top-k selection
    /// depends on the features.
    pub fn score_gradients_var<'t>(&self, bound: &Bound<'t>, logits: &Array2<f64>, k: usize) -> Vec<Var<'t>> {
        let picked = top_k_selection(logits, k);
        let mut sel = Array2::zeros(logits.dim());
        for &ij in &picked {
            sel[ij] += 1.0 / picked.len() as f64;
        }
        let tape = bound.get("head.b").tape();
        let ds_dh = tape.var(sel).matmul(self.class_keys_var(bound));
        (0..self.num_levels())
            .map(|l| {
                let pt = tape.var(self.upsample[l].t().to_owned());
                pt.matmul(ds_dh).matmul(bound.get(&format!("head.l{l}.w")).t())
            })
            .collect()
    }

    /// Level masks from a full-resolution occlusion mask, as occluded and
    /// visible index lists per level.
    pub fn level_indices(&self, mask: &OcclusionMask) -> Vec<(Vec<usize>, Vec<usize>)> {
        self.level_dims()
            .into_iter()
            .map(|dims| {
                let grid = downsample_mask(mask, dims);
                let mut occ = Vec::new();
                let mut vis = Vec::new();
                for (i, &m) in grid.iter().enumerate() {
                    if m {
                        occ.push(i)
                    } else {
                        vis.push(i)
                    }
                }
                (occ, vis)
            })
            .collect()
    }

    /// Full pass on the tape. Without a mask (teacher) or with `bypass`,
    /// the FRM is skipped.
    pub fn forward_var<'t>(
        &self,
        bound: &Bound<'t>,
        tokens: &[Array2<f64>],
        mask: Option<&OcclusionMask>,
        fused: Var<'t>,
        bypass: bool,
    ) -> Result<ForwardVars<'t>> {
        let tape = fused.tape();
        let indices = match (mask, bypass) {
            (Some(m), false) => self.level_indices(m),
            _ => vec![(Vec::new(), Vec::new()); self.num_levels()],
        };
        let mut levels = Vec::with_capacity(tokens.len());
        let mut reconstructed = Vec::with_capacity(tokens.len());
        let mut occluded = Vec::with_capacity(tokens.len());
        for (l, (z, (occ, vis))) in tokens.iter().zip(indices).enumerate() {
            let z = tape.var(z.clone());
            let (done, rec) = self.frm.complete_level_var(bound, l, z, &occ, &vis, fused)?;
            levels.push(done);
            occluded.push(if rec.is_some() { occ } else { Vec::new() });
            reconstructed.push(rec);
        }
        let (logits, density) = self.head_var(bound, &levels);
        Ok(ForwardVars { levels, reconstructed, occluded, logits, density })
    }

    fn predict(&self, tokens: &[Array2<f64>], mask: Option<&OcclusionMask>, z_vt: &Array2<f64>, bypass: bool) -> Result<Prediction> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let out = self.forward_var(&bound, tokens, mask, tape.var(z_vt.clone()), bypass)?;
        let (h0, w0) = self.level_dims()[0];
        let density = out.density.value().into_shape_with_order((h0, w0)).expect("level-0 grid");
        Ok(Prediction { tokens: out.levels.iter().map(|v| v.value()).collect(), logits: out.logits.value(), density })
    }

    /// Teacher pass on the clean image; no reconstruction.
    pub fn forward_teacher(&self, image: &Image, z_vt: &Array2<f64>) -> Result<Prediction> {
        self.predict(&self.backbone_tokens(image)?, None, z_vt, false)
    }

    /// Student pass on the occluded image with FRM completion (unless
    /// `bypass_frm`).
    pub fn forward_student(
        &self,
        occluded: &Image,
        mask: &OcclusionMask,
        z_vt: &Array2<f64>,
        bypass_frm: bool,
    ) -> Result<Prediction> {
        self.predict(&self.backbone_tokens(occluded)?, Some(mask), z_vt, bypass_frm)
    }

    /// Occludes `image`, fuses from what stays visible and splits the
    /// predicted count by the mask.
    pub fn predict_counts(
        &self,
        image: &Image,
        class_id: usize,
        exemplars: &[BoxAnnotation],
        mask: &OcclusionMask,
        bypass_frm: bool,
    ) -> Result<CountSplit> {
        let occluded = apply_mask(image, mask)?;
        let tokens = self.backbone_tokens(&occluded)?;
        let z_vt = self.fuse(&tokens, class_id, exemplars)?;
        let pred = self.predict(&tokens, Some(mask), &z_vt, bypass_frm)?;
        split_density(&pred.density, self.cfg.strides[0], mask)
    }

    /// Stacks per-level tokens of several predictions into a pyramid.
    pub fn pyramid(&self, preds: &[&Prediction]) -> Result<FeaturePyramid> {
        let dims = self.level_dims();
        let levels = (0..self.num_levels())
            .map(|l| {
                let (h, w) = dims[l];
                let c = self.cfg.frm.channels[l];
                Array4::from_shape_fn((preds.len(), c, h, w), |(b, ch, y, x)| preds[b].tokens[l][[y * w + x, ch]])
            })
            .collect();
        FeaturePyramid::new(levels)
    }

    pub fn head(&self) -> ModelHead<'_> {
        ModelHead { model: self }
    }

    /// GradCAM of one image's head tokens at input resolution.
    pub fn gradcam(&self, tokens: &[Array2<f64>], k: usize, oracle: &dyn GradientOracle) -> Result<AttentionMap> {
        gradcam_tokens(
            tokens,
            &self.level_dims(),
            &self.head(),
            oracle,
            k,
            (self.cfg.image_height, self.cfg.image_width),
        )
    }

    pub fn gradcam_autodiff(&self, tokens: &[Array2<f64>], k: usize) -> Result<AttentionMap> {
        self.gradcam(tokens, k, &AutodiffOracle)
    }

    pub fn matching_score(&self, pred: &Prediction, k: usize) -> f64 {
        matching_score(&pred.logits, k)
    }

    /// Whether a parameter is updated by training.
    pub fn is_trainable(name: &str, freeze_head: bool) -> bool {
        !name.starts_with(BACKBONE_PREFIX) && !(freeze_head && (name.starts_with(HEAD_PREFIX) || name.starts_with("fusion.")))
    }
}

/// The model head with its current parameters held constant.
pub struct ModelHead<'m> {
    model: &'m ToyModel,
}

impl LogitHead for ModelHead<'_> {
    fn logits<'t>(&self, tape: &'t Tape, levels: &[Var<'t>]) -> Var<'t> {
        let bound = self.model.params.subset(HEAD_PREFIX);
        let mut store = bound;
        store.insert("fusion.class_embed", self.model.params.get("fusion.class_embed").expect("class table").clone());
        let bound = store.bind(tape);
        self.model.head_var(&bound, levels).0
    }
}
