//! Flat run configuration: one JSON object of scalars, overridable per key
//! through `COUNTOCC_<KEY>` environment variables.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::frm::FrmConfig;
use crate::losses::{LossWeights, VisEqConfig};
use crate::model::ModelConfig;
use crate::occlusion::{EvalOccConfig, TrainOccConfig};
use crate::optim::OptimizerConfig;
use crate::scene::SceneConfig;
use crate::train::CurriculumConfig;

pub const ENV_PREFIX: &str = "COUNTOCC_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub image_size: usize,
    pub count_min: usize,
    pub count_max: usize,
    pub classes: usize,

    /// `all` or `one` (level 0 only).
    pub frm_levels: String,
    pub frm_depth: usize,
    pub frm_heads: usize,
    pub pre_norm: bool,

    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_size: usize,
    /// `sgd` or `adam`.
    pub optimizer: String,
    pub lr: f64,
    pub stage2_lr: f64,
    /// Global gradient-norm cap; 0 disables.
    pub grad_clip: f64,

    pub lambda_l2: f64,
    pub lambda_cos: f64,
    pub lambda_char: f64,
    pub eps_char: f64,
    pub sim_l2: f64,
    pub sim_cos: f64,
    pub cst_weight: f64,
    pub tau: f64,
    pub normalize_maps: bool,
    pub rec_weight: f64,
    pub count_weight: f64,
    pub viseq_weight: f64,
    pub top_k: usize,
    pub freeze_head: bool,
    pub stage2_freeze_head: bool,
    pub second_order: bool,

    pub occ_p: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub train_side_min: usize,
    pub train_side_max: usize,
    pub max_attempts: usize,
    /// Occluder corner snapping for both samplers; 1 disables.
    pub occ_grid: usize,

    pub target_lo: f64,
    pub target_hi: f64,
    pub eval_side_min: usize,
    pub eval_side_max: usize,
    pub max_rectangles: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            train_scenes: 2000,
            eval_scenes: 200,
            image_size: 48,
            count_min: 3,
            count_max: 12,
            classes: 3,
            frm_levels: "all".into(),
            frm_depth: 1,
            frm_heads: 4,
            pre_norm: false,
            stage1_steps: 1500,
            stage2_steps: 300,
            batch_size: 8,
            optimizer: "sgd".into(),
            lr: 1e-3,
            stage2_lr: 1e-4,
            grad_clip: 20.0,
            lambda_l2: 1.0,
            lambda_cos: 1.0,
            lambda_char: 1.0,
            eps_char: 1e-3,
            sim_l2: 1.0,
            sim_cos: 1.0,
            cst_weight: 1.0,
            tau: 0.5,
            normalize_maps: true,
            rec_weight: 1.0,
            count_weight: 1.0,
            viseq_weight: 1.0,
            top_k: 900,
            freeze_head: false,
            stage2_freeze_head: false,
            second_order: false,
            occ_p: 0.5,
            alpha_min: 0.15,
            alpha_max: 0.5,
            train_side_min: 8,
            train_side_max: 20,
            max_attempts: 50,
            occ_grid: 1,
            target_lo: 0.25,
            target_hi: 0.35,
            eval_side_min: 4,
            eval_side_max: 24,
            max_rectangles: 16,
        }
    }
}

impl RunConfig {
    /// Defaults, then the file (if any), then environment overrides.
    pub fn resolve(file: Option<&Path>) -> Result<Self> {
        let text = match file {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::resolve_with(text.as_deref(), |k| std::env::var(k).ok())
    }

    /// [`RunConfig::resolve`] with an explicit JSON text and variable lookup.
    pub fn resolve_with(text: Option<&str>, env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let Value::Object(mut map) = serde_json::to_value(Self::default()).expect("defaults serialize") else {
            unreachable!("config is an object")
        };
        if let Some(text) = text {
            let file: Map<String, Value> =
                serde_json::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
            for (k, v) in file {
                if !map.contains_key(&k) {
                    return Err(Error::Config(format!("unknown config key `{k}`")));
                }
                map.insert(k, v);
            }
        }
        let keys: Vec<String> = map.keys().cloned().collect();
        for k in keys {
            if let Some(raw) = env(&format!("{ENV_PREFIX}{}", k.to_uppercase())) {
                let v = match serde_json::from_str::<Value>(&raw) {
                    Ok(v) if !map[&k].is_string() => v,
                    _ => Value::String(raw),
                };
                map.insert(k, v);
            }
        }
        let cfg: Self = serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.scene().validate()?;
        self.model().validate()?;
        self.curriculum()?.validate()?;
        self.eval_occ().validate()
    }

    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            width: self.image_size,
            height: self.image_size,
            count_min: self.count_min,
            count_max: self.count_max,
            classes: self.classes,
            ..SceneConfig::default()
        }
    }

    pub fn model(&self) -> ModelConfig {
        let channels = vec![16, 32, 64];
        let active_levels = if self.frm_levels == "one" { vec![0] } else { vec![0, 1, 2] };
        ModelConfig {
            image_height: self.image_size,
            image_width: self.image_size,
            classes: self.classes,
            frm: FrmConfig {
                channels,
                heads: self.frm_heads,
                depth: self.frm_depth,
                pre_norm: self.pre_norm,
                active_levels,
                ..FrmConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    pub fn optimizer(&self) -> Result<OptimizerConfig> {
        match self.optimizer.as_str() {
            "sgd" => Ok(OptimizerConfig::Sgd { lr: self.lr }),
            "adam" => Ok(OptimizerConfig::Adam { lr: self.lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }

    pub fn curriculum(&self) -> Result<CurriculumConfig> {
        if self.frm_levels != "all" && self.frm_levels != "one" {
            return Err(Error::Config(format!("frm_levels must be `all` or `one`, got `{}`", self.frm_levels)));
        }
        Ok(CurriculumConfig {
            stage1_steps: self.stage1_steps,
            stage2_steps: self.stage2_steps,
            batch_size: self.batch_size,
            optimizer: self.optimizer()?,
            stage2_lr: self.stage2_lr,
            seed: self.seed,
            loss: LossWeights { l2: self.lambda_l2, cos: self.lambda_cos, char: self.lambda_char, eps_char: self.eps_char },
            viseq: VisEqConfig {
                sim_l2: self.sim_l2,
                sim_cos: self.sim_cos,
                cst: self.cst_weight,
                tau: self.tau,
                normalize_maps: self.normalize_maps,
            },
            rec_weight: self.rec_weight,
            count_weight: self.count_weight,
            viseq_weight: self.viseq_weight,
            top_k: self.top_k,
            freeze_head: self.freeze_head,
            stage2_freeze_head: self.stage2_freeze_head,
            second_order: self.second_order,
            grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
            train_occ: self.train_occ(),
        })
    }

    pub fn train_occ(&self) -> TrainOccConfig {
        TrainOccConfig {
            apply_probability: self.occ_p,
            alpha_min: self.alpha_min,
            alpha_max: self.alpha_max,
            side_min: self.train_side_min,
            side_max: self.train_side_max,
            max_attempts: self.max_attempts,
            grid: self.occ_grid,
        }
    }

    pub fn eval_occ(&self) -> EvalOccConfig {
        EvalOccConfig {
            target_lo: self.target_lo,
            target_hi: self.target_hi,
            side_min: self.eval_side_min,
            side_max: self.eval_side_max,
            max_rectangles: self.max_rectangles,
            grid: self.occ_grid,
            ..EvalOccConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_env_precedence() {
        let cfg = RunConfig::resolve_with(Some(r#"{"seed": 3, "lr": 0.5}"#), |k| match k {
            "COUNTOCC_LR" => Some("0.25".into()),
            "COUNTOCC_OPTIMIZER" => Some("adam".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.lr, 0.25);
        assert_eq!(cfg.optimizer, "adam");
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::resolve_with(Some(r#"{"sed": 3}"#), |_| None).is_err());
        assert!(RunConfig::resolve_with(None, |k| (k == "COUNTOCC_OPTIMIZER").then(|| "lbfgs".into())).is_err());
        assert!(RunConfig::resolve_with(None, |k| (k == "COUNTOCC_SEED").then(|| "x".into())).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::default();
        let back = RunConfig::resolve_with(Some(&cfg.to_json()), |_| None).unwrap();
        assert_eq!(back, cfg);
    }
}
