//! Teacher-student training.
//!
//! Stage 1 optimizes reconstruction + counting; stage 2 adds the attention
//! similarity and RoI consistency losses on GradCAM maps. The teacher sees
//! the clean image, the student the occluded one, and both share the frozen
//! backbone and the head.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotation::{AnnotatedScene, BoxAnnotation};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gradcam::{attention_map_var, detached_attention_map_var, weights_from_gradients_var};
use crate::losses::{
    attention_similarity_loss, attention_similarity_loss_var, consistency_loss_var, reconstruction_loss,
    reconstruction_loss_var, LossWeights, RecLossVars, SimLossVars, VisEqConfig,
};
use crate::metrics::ImageRecord;
use crate::model::{ToyModel, BACKBONE_PREFIX};
use crate::occlusion::{
    apply_mask, build_eval_mask, count_occluded_instances, sample_training_mask, EvalOccConfig, OcclusionMask,
    TrainOccConfig,
};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::params::{Bound, ParamStore};
use crate::raster::Image;
use crate::scene::{scene_rng, SyntheticScene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Learning rate from the first stage-2 step on.
    pub stage2_lr: f64,
    pub seed: u64,
    pub loss: LossWeights,
    pub viseq: VisEqConfig,
    pub rec_weight: f64,
    pub count_weight: f64,
    pub viseq_weight: f64,
    pub top_k: usize,
    pub freeze_head: bool,
    /// Freeze the head (and fusion) from the first stage-2 step on.
    #[serde(default)]
    pub stage2_freeze_head: bool,
    /// Differentiate the VisEQ losses through the GradCAM weights too.
    pub second_order: bool,
    /// Global gradient-norm cap; `None` disables.
    pub grad_clip: Option<f64>,
    pub train_occ: TrainOccConfig,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            stage1_steps: 1500,
            stage2_steps: 300,
            batch_size: 8,
            optimizer: OptimizerConfig::Sgd { lr: 1e-3 },
            stage2_lr: 1e-4,
            seed: 0,
            loss: LossWeights::default(),
            viseq: VisEqConfig::default(),
            rec_weight: 1.0,
            count_weight: 1.0,
            viseq_weight: 1.0,
            top_k: 900,
            freeze_head: false,
            stage2_freeze_head: false,
            second_order: false,
            grad_clip: Some(20.0),
            train_occ: TrainOccConfig::default(),
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.train_occ.validate()?;
        if self.batch_size == 0 || self.top_k == 0 {
            return Err(Error::Config("batch_size and top_k must be positive".into()));
        }
        if self.rec_weight < 0.0 || self.count_weight < 0.0 || self.viseq_weight < 0.0 {
            return Err(Error::Config("objective weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// One JSON-lines row of the training log. VisEQ fields are absent in
/// stage 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub stage: u8,
    pub l2: f64,
    pub charb: f64,
    pub cos: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim_l2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim_cos: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cst: Option<f64>,
    pub count: f64,
    pub total: f64,
}

impl LossRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// A scene paired with one occlusion draw.
#[derive(Debug, Clone)]
pub struct Sample {
    pub scene: AnnotatedScene,
    pub clean: Image,
    pub occluded: Image,
    pub mask: OcclusionMask,
}

impl Sample {
    pub fn new(scene: &SyntheticScene, mask: OcclusionMask) -> Result<Self> {
        Ok(Self {
            occluded: apply_mask(&scene.image, &mask)?,
            clean: scene.image.clone(),
            scene: scene.scene.clone(),
            mask,
        })
    }

    pub fn count(&self) -> f64 {
        self.scene.count() as f64
    }

    pub fn class_id(&self) -> usize {
        self.scene.class_id
    }

    pub fn exemplars(&self) -> &[BoxAnnotation] {
        &self.scene.exemplars
    }
}

/// Evaluation split: every scene with a benchmark occluder from its own
/// seeded stream.
pub fn build_eval_set(scenes: &[SyntheticScene], cfg: &EvalOccConfig, seed: u64) -> Result<Vec<Sample>> {
    scenes
        .par_iter()
        .map(|s| {
            let mask = build_eval_mask(&s.scene, cfg, &mut scene_rng(seed, s.scene.id))?;
            Sample::new(s, mask)
        })
        .collect()
}

/// The per-sample objective and its parts, all on one tape.
pub struct Objective<'t> {
    pub total: Var<'t>,
    pub rec: RecLossVars<'t>,
    pub count: Var<'t>,
    pub sim: Option<SimLossVars<'t>>,
    pub cst: Option<Var<'t>>,
}

/// Normalized (if configured) teacher GradCAM map as a constant.
pub fn teacher_map(model: &ToyModel, tokens: &[Array2<f64>], viseq: &VisEqConfig, k: usize) -> Result<Array2<f64>> {
    let map = model.gradcam_autodiff(tokens, k)?;
    Ok(if viseq.normalize_maps { map.normalized() } else { map.g })
}

pub fn objective<'t>(
    model: &ToyModel,
    bound: &Bound<'t>,
    sample: &Sample,
    stage: u8,
    cfg: &CurriculumConfig,
) -> Result<Objective<'t>> {
    if stage != 1 && stage != 2 {
        return Err(Error::Config(format!("stage must be 1 or 2, got {stage}")));
    }
    let tape = bound.get("head.b").tape();
    let teacher = model.backbone_tokens(&sample.clean)?;
    let student = model.backbone_tokens(&sample.occluded)?;
    let pooled = model.exemplar_features(&student[0], sample.exemplars());
    let fused = model.fuse_var(bound, sample.class_id(), &pooled)?;
    let fwd = model.forward_var(bound, &student, Some(&sample.mask), fused, false)?;

    let mut rec_s = Vec::new();
    let mut rec_t = Vec::new();
    for (l, rec) in fwd.reconstructed.iter().enumerate() {
        if let Some(r) = rec {
            rec_s.push(*r);
            rec_t.push(teacher[l].select(Axis(0), &fwd.occluded[l]));
        }
    }
    let rec = reconstruction_loss_var(tape, &rec_s, &rec_t, &cfg.loss)?;
    let count = fwd.density.sum().add_scalar(-sample.count()).square();
    let mut total = rec.total.scale(cfg.rec_weight).add(count.scale(cfg.count_weight));

    let (mut sim, mut cst) = (None, None);
    if stage == 2 {
        let dims = model.level_dims();
        let out = (model.cfg.image_height, model.cfg.image_width);
        let g_t = teacher_map(model, &teacher, &cfg.viseq, cfg.top_k)?;
        let normalize = cfg.viseq.normalize_maps;
        let g_s = if cfg.second_order {
            let grads = model.score_gradients_var(bound, &fwd.logits.value(), cfg.top_k);
            let (alphas, betas) = weights_from_gradients_var(&grads);
            attention_map_var(&fwd.levels, &dims, &alphas, betas, out, normalize)
        } else {
            let values: Vec<_> = fwd.levels.iter().map(|v| v.value()).collect();
            let map = model.gradcam_autodiff(&values, cfg.top_k)?;
            detached_attention_map_var(&fwd.levels, &dims, &map, out, normalize)
        };
        let s = attention_similarity_loss_var(tape, std::slice::from_ref(&g_t), &[g_s], cfg.viseq.sim_l2, cfg.viseq.sim_cos)?;
        let c = consistency_loss_var(tape, &[g_t], &[g_s], cfg.viseq.tau)?;
        total = total.add(s.total.add(c.scale(cfg.viseq.cst)).scale(cfg.viseq_weight));
        sim = Some(s);
        cst = Some(c);
    }
    Ok(Objective { total, rec, count, sim, cst })
}

/// Gradient of the averaged batch objective and the averaged record.
pub fn batch_gradients(
    model: &ToyModel,
    batch: &[Sample],
    stage: u8,
    cfg: &CurriculumConfig,
    step: u64,
) -> Result<(ParamStore, LossRecord)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut sum: Option<ParamStore> = None;
    let mut rec = LossRecord {
        step,
        stage,
        l2: 0.0,
        charb: 0.0,
        cos: 0.0,
        sim_l2: (stage == 2).then_some(0.0),
        sim_cos: (stage == 2).then_some(0.0),
        cst: (stage == 2).then_some(0.0),
        count: 0.0,
        total: 0.0,
    };
    for sample in batch {
        let tape = Tape::new();
        let bound = model.params.bind(&tape);
        let obj = objective(model, &bound, sample, stage, cfg)?;
        let b = obj.rec.breakdown();
        rec.l2 += b.l2;
        rec.charb += b.charb;
        rec.cos += b.cos;
        rec.count += obj.count.scalar_value();
        rec.total += obj.total.scalar_value();
        if let (Some(s), Some(c)) = (obj.sim, obj.cst) {
            let sb = s.breakdown();
            *rec.sim_l2.as_mut().unwrap() += sb.l2;
            *rec.sim_cos.as_mut().unwrap() += sb.cos;
            *rec.cst.as_mut().unwrap() += c.scalar_value();
        }
        let grads = bound.grads(&tape.backward(obj.total));
        match &mut sum {
            None => sum = Some(grads),
            Some(acc) => {
                for (name, g) in acc.iter_mut() {
                    *g += grads.get(name)?;
                }
            }
        }
    }
    let n = batch.len() as f64;
    let mut grads = sum.expect("nonempty batch");
    for (_, g) in grads.iter_mut() {
        *g /= n;
    }
    for v in [&mut rec.l2, &mut rec.charb, &mut rec.cos, &mut rec.count, &mut rec.total] {
        *v /= n;
    }
    for v in [&mut rec.sim_l2, &mut rec.sim_cos, &mut rec.cst].into_iter().flatten() {
        *v /= n;
    }
    Ok((grads, rec))
}

pub struct Trainer {
    pub model: ToyModel,
    pub cfg: CurriculumConfig,
    pub step: u64,
    optimizer: Optimizer,
    rng: ChaCha8Rng,
    stage: u8,
}

impl Trainer {
    pub fn new(model: ToyModel, cfg: CurriculumConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::MAX);
        Ok(Self { model, optimizer: Optimizer::new(cfg.optimizer), cfg, step: 0, rng, stage: 1 })
    }

    /// Random scenes, each with a fresh training occluder.
    pub fn sample_batch(&mut self, data: &[SyntheticScene]) -> Result<Vec<Sample>> {
        if data.is_empty() {
            return Err(Error::Config("no training scenes".into()));
        }
        (0..self.cfg.batch_size)
            .map(|_| {
                let scene = &data[self.rng.gen_range(0..data.len())];
                let mask = sample_training_mask(&scene.scene, &self.cfg.train_occ, &mut self.rng)?;
                Sample::new(scene, mask)
            })
            .collect()
    }

    /// One optimizer step. Only non-backbone parameters move (and not the
    /// head when frozen).
    pub fn train_step(&mut self, batch: &[Sample], stage: u8) -> Result<LossRecord> {
        if stage == 2 && self.stage == 1 {
            self.stage = 2;
            let cfg = match self.cfg.optimizer {
                OptimizerConfig::Sgd { .. } => OptimizerConfig::Sgd { lr: self.cfg.stage2_lr },
                OptimizerConfig::Adam { beta1, beta2, eps, .. } => {
                    OptimizerConfig::Adam { lr: self.cfg.stage2_lr, beta1, beta2, eps }
                }
            };
            self.optimizer = Optimizer::new(cfg);
        }
        self.step += 1;
        let (mut grads, record) = batch_gradients(&self.model, batch, stage, &self.cfg, self.step)?;
        if !record.total.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step, detail: record.to_json_line() });
        }
        for (name, g) in grads.iter() {
            if name.starts_with(BACKBONE_PREFIX) {
                assert!(g.iter().all(|&v| v == 0.0), "backbone parameter `{name}` received a gradient");
            }
        }
        let freeze_head = self.cfg.freeze_head || (stage == 2 && self.cfg.stage2_freeze_head);
        let trainable = |name: &str| ToyModel::is_trainable(name, freeze_head);
        if let Some(cap) = self.cfg.grad_clip {
            let norm = grads
                .iter()
                .filter(|(n, _)| trainable(n))
                .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > cap {
                for (_, g) in grads.iter_mut() {
                    *g *= cap / norm;
                }
            }
        }
        self.optimizer.step(&mut self.model.params, &grads, trainable);
        Ok(record)
    }

    /// Runs `steps` steps of `stage`, handing each record to `log`.
    pub fn run_stage(
        &mut self,
        stage: u8,
        steps: usize,
        data: &[SyntheticScene],
        mut log: impl FnMut(&LossRecord) -> Result<()>,
    ) -> Result<()> {
        for _ in 0..steps {
            let batch = self.sample_batch(data)?;
            let record = self.train_step(&batch, stage)?;
            log(&record)?;
        }
        Ok(())
    }
}

/// Mean per-image reconstruction loss of the student against the teacher.
pub fn heldout_reconstruction_loss(model: &ToyModel, set: &[Sample], weights: &LossWeights) -> Result<f64> {
    let losses: Vec<f64> = set
        .par_iter()
        .map(|s| {
            let teacher = model.backbone_tokens(&s.clean)?;
            let student = model.backbone_tokens(&s.occluded)?;
            let z_vt = model.fuse(&student, s.class_id(), s.exemplars())?;
            let tape = Tape::new();
            let bound = model.params.bind(&tape);
            let fwd = model.forward_var(&bound, &student, Some(&s.mask), tape.var(z_vt), false)?;
            let mut rec_s = Vec::new();
            let mut rec_t = Vec::new();
            for (l, rec) in fwd.reconstructed.iter().enumerate() {
                if let Some(r) = rec {
                    rec_s.push(r.value());
                    rec_t.push(teacher[l].select(Axis(0), &fwd.occluded[l]));
                }
            }
            Ok(reconstruction_loss(&rec_s, &rec_t, weights)?.total)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Mean per-image `Σ(G_T − G_S)²` between teacher and student GradCAM maps.
pub fn attention_distance(model: &ToyModel, set: &[Sample], viseq: &VisEqConfig, k: usize) -> Result<f64> {
    let d: Vec<f64> = set
        .par_iter()
        .map(|s| {
            let teacher = model.backbone_tokens(&s.clean)?;
            let g_t = teacher_map(model, &teacher, viseq, k)?;
            let student_tokens = model.backbone_tokens(&s.occluded)?;
            let z_vt = model.fuse(&student_tokens, s.class_id(), s.exemplars())?;
            let pred = model.forward_student(&s.occluded, &s.mask, &z_vt, false)?;
            let map = model.gradcam_autodiff(&pred.tokens, k)?;
            let g_s = if viseq.normalize_maps { map.normalized() } else { map.g };
            Ok(attention_similarity_loss(&[g_t], &[g_s], 1.0, 0.0)?.l2)
        })
        .collect::<Result<_>>()?;
    Ok(d.iter().sum::<f64>() / d.len().max(1) as f64)
}

/// Per-image count records under each sample's occluder.
pub fn count_records(model: &ToyModel, set: &[Sample], bypass_frm: bool) -> Result<Vec<ImageRecord>> {
    set.par_iter()
        .map(|s| {
            let split = model.predict_counts(&s.clean, s.class_id(), s.exemplars(), &s.mask, bypass_frm)?;
            let (vis, occ) = count_occluded_instances(&s.mask, &s.scene.boxes);
            Ok(ImageRecord {
                id: s.scene.id,
                y: s.count(),
                y_hat: split.total,
                y_vis: vis as f64,
                y_hat_vis: split.visible,
                y_occ: occ as f64,
                y_hat_occ: split.occluded,
            })
        })
        .collect()
}
