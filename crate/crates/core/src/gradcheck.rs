//! Central-difference checks of the analytic gradients used in training.
//!
//! Relative error per tensor is `‖a − n‖ / max(‖a‖, ‖n‖, 1e-12)`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::Result;
use crate::frm::FrmConfig;
use crate::gradcam::{AutodiffOracle, FiniteDifferenceOracle};
use crate::losses::{attention_similarity_loss_var, consistency_loss_var, VisEqConfig};
use crate::model::{ModelConfig, ToyModel, BACKBONE_PREFIX};
use crate::occlusion::{OcclusionMask, Rect};
use crate::scene::{generate_scene, scene_rng, SceneConfig};
use crate::train::{batch_gradients, objective, CurriculumConfig, Sample};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRADCAM_TOLERANCE: f64 = 1e-3;

/// Below this norm both gradients count as zero. Key biases have an
/// identically zero gradient (softmax is shift invariant), and there the
/// finite-difference noise alone would make the relative error 1.
pub const ZERO_GRAD: f64 = 1e-6;

fn norm(x: &Array2<f64>) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn relative_error(a: &Array2<f64>, n: &Array2<f64>) -> f64 {
    norm(&(a - n)) / norm(a).max(norm(n)).max(1e-12)
}

/// [`relative_error`], or 0 when both gradients are below [`ZERO_GRAD`].
pub fn gradient_error(a: &Array2<f64>, n: &Array2<f64>) -> f64 {
    if norm(a).max(norm(n)) < ZERO_GRAD {
        0.0
    } else {
        relative_error(a, n)
    }
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn central_difference(x: &Array2<f64>, h: f64, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut work = x.clone();
    let mut out = Array2::zeros(x.dim());
    for idx in 0..x.len() {
        let at = (idx / x.ncols(), idx % x.ncols());
        let x0 = x[at];
        work[at] = x0 + h;
        let up = f(&work);
        work[at] = x0 - h;
        let down = f(&work);
        work[at] = x0;
        out[at] = (up - down) / (2.0 * h);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, instances: usize, worst: f64, tolerance: f64) -> Self {
        Self { name: name.to_string(), instances, worst, tolerance, passed: worst.is_finite() && worst < tolerance }
    }
}

/// Two-level 16×16 model small enough for exhaustive finite differences.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        image_height: 16,
        image_width: 16,
        strides: vec![4, 8],
        patch_grid: 4,
        classes: 2,
        class_dim: 4,
        head_dim: 8,
        frm: FrmConfig { channels: vec![4, 8], fusion_dim: 8, heads: 2, active_levels: vec![0, 1], ..FrmConfig::default() },
        ..ModelConfig::default()
    }
}

pub fn tiny_scene_config() -> SceneConfig {
    SceneConfig {
        width: 16,
        height: 16,
        count_min: 3,
        count_max: 5,
        radius_min: 1.5,
        radius_max: 2.0,
        classes: 2,
        min_gap: 0.5,
        ..SceneConfig::default()
    }
}

/// A tiny model and an occluded sample, both from `seed`. The occluder
/// always covers one full level-1 cell so every level has occluded tokens.
pub fn tiny_instance(seed: u64) -> Result<(ToyModel, Sample)> {
    let model = ToyModel::new(tiny_model_config(), seed ^ 0xB0B, seed)?;
    let mut rng = scene_rng(seed, 0);
    let scene = generate_scene(&tiny_scene_config(), seed, &mut rng)?;
    let x = rng.gen_range(0..2) * 8;
    let y = rng.gen_range(0..2) * 8;
    let w = 8 + rng.gen_range(0..=4);
    let h = 8 + rng.gen_range(0..=4);
    let mask = OcclusionMask::from_rectangles(16, 16, &[Rect { x, y, w, h }], &scene.scene.boxes);
    Ok((model, Sample::new(&scene, mask)?))
}

fn stage1_value(model: &ToyModel, sample: &Sample, cfg: &CurriculumConfig) -> Result<f64> {
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    Ok(objective(model, &bound, sample, 1, cfg)?.total.scalar_value())
}

/// Worst relative error over all FRM tensors of one instance.
pub fn frm_gradient_error(seed: u64) -> Result<f64> {
    let (mut model, sample) = tiny_instance(seed)?;
    let cfg = CurriculumConfig::default();
    let (grads, _) = batch_gradients(&model, std::slice::from_ref(&sample), 1, &cfg, 0)?;
    let names: Vec<String> = model.params.names().filter(|n| n.starts_with("frm.")).map(str::to_string).collect();
    let mut worst: f64 = 0.0;
    for name in names {
        let x = model.params.get(&name)?.clone();
        let numeric = central_difference(&x, FD_STEP, |v| {
            *model.params.get_mut(&name).expect("exists") = v.clone();
            stage1_value(&model, &sample, &cfg).expect("objective evaluates")
        });
        *model.params.get_mut(&name)? = x;
        worst = worst.max(gradient_error(grads.get(&name)?, &numeric));
    }
    Ok(worst)
}

/// Random maps in `[0, 1]` kept at least `margin` away from the RoI
/// threshold and the hinge kink so central differences stay on one side.
pub fn random_map_pair<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, tau: f64, margin: f64) -> (Array2<f64>, Array2<f64>) {
    let t = Array2::from_shape_fn((h, w), |_| rng.gen_range(0.0..1.0));
    let s = Array2::from_shape_fn((h, w), |(y, x)| loop {
        let v: f64 = rng.gen_range(0.0..1.0);
        if (t[[y, x]] + v - tau).abs() > margin {
            break v;
        }
    });
    (t, s)
}

/// Worst relative error of `∂(L_sim + L_cst)/∂G_S` over a batch of maps.
pub fn viseq_gradient_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = VisEqConfig::default();
    let batch = 2;
    let (mut g_t, mut g_s) = (Vec::new(), Vec::new());
    for _ in 0..batch {
        let (t, s) = random_map_pair(&mut rng, 6, 5, cfg.tau, 1e-3);
        g_t.push(t);
        g_s.push(s);
    }
    let eval = |maps: &[Array2<f64>]| -> Result<(f64, Vec<Array2<f64>>)> {
        let tape = Tape::new();
        let vars: Vec<_> = maps.iter().map(|m| tape.var(m.clone())).collect();
        let sim = attention_similarity_loss_var(&tape, &g_t, &vars, cfg.sim_l2, cfg.sim_cos)?;
        let cst = consistency_loss_var(&tape, &g_t, &vars, cfg.tau)?;
        let total = sim.total.add(cst);
        let grads = tape.backward(total);
        Ok((total.scalar_value(), vars.iter().map(|v| grads.wrt(*v)).collect()))
    };
    let (_, analytic) = eval(&g_s)?;
    let mut worst: f64 = 0.0;
    for b in 0..batch {
        let numeric = central_difference(&g_s[b].clone(), FD_STEP, |v| {
            let mut maps = g_s.clone();
            maps[b] = v.clone();
            eval(&maps).expect("losses evaluate").0
        });
        worst = worst.max(gradient_error(&analytic[b], &numeric));
    }
    Ok(worst)
}

/// Largest absolute backbone gradient entry after a stage-1 and a stage-2
/// batch.
pub fn backbone_gradient_max(seed: u64) -> Result<f64> {
    let (model, sample) = tiny_instance(seed)?;
    let cfg = CurriculumConfig::default();
    let mut worst: f64 = 0.0;
    for stage in [1, 2] {
        let (grads, _) = batch_gradients(&model, std::slice::from_ref(&sample), stage, &cfg, 0)?;
        for (name, g) in grads.iter() {
            if name.starts_with(BACKBONE_PREFIX) {
                worst = worst.max(g.iter().fold(0.0, |m, v| m.max(v.abs())));
            }
        }
    }
    Ok(worst)
}

/// Largest elementwise gap between autodiff and finite-difference GradCAM
/// outputs (map, α, β) on the tiny two-level model.
pub fn gradcam_dual_oracle_gap(seed: u64) -> Result<f64> {
    let (model, sample) = tiny_instance(seed)?;
    let tokens = model.backbone_tokens(&sample.clean)?;
    let a = model.gradcam(&tokens, 900, &AutodiffOracle)?;
    let n = model.gradcam(&tokens, 900, &FiniteDifferenceOracle { step: FD_STEP })?;
    let gap = |x: f64, y: f64| (x - y).abs();
    let mut worst = a.g.iter().zip(n.g.iter()).fold(0.0f64, |m, (x, y)| m.max(gap(*x, *y)));
    // The map alone can be identically zero after the ReLU, so the channel
    // and level weights are compared as well.
    for (x, y) in a.alphas.iter().zip(&n.alphas) {
        worst = x.iter().zip(y.iter()).fold(worst, |m, (x, y)| m.max(gap(*x, *y)));
    }
    Ok(a.betas.iter().zip(&n.betas).fold(worst, |m, (x, y)| m.max(gap(*x, *y))))
}

/// Runs every suite over `instances` seeds.
pub fn run_all(instances: usize) -> Result<Vec<CheckResult>> {
    let seeds = 0..instances as u64;
    let fold = |f: &dyn Fn(u64) -> Result<f64>| -> Result<f64> {
        seeds.clone().map(f).try_fold(0.0f64, |m, v| Ok(m.max(v?)))
    };
    Ok(vec![
        CheckResult::new("stage-1 loss wrt FRM parameters", instances, fold(&frm_gradient_error)?, GRAD_TOLERANCE),
        CheckResult::new("L_sim + L_cst wrt student maps", instances, fold(&viseq_gradient_error)?, GRAD_TOLERANCE),
        CheckResult::new("backbone gradient magnitude", instances, fold(&backbone_gradient_max)?, f64::MIN_POSITIVE),
        CheckResult::new("GradCAM autodiff vs finite differences", instances, fold(&gradcam_dual_oracle_gap)?, GRADCAM_TOLERANCE),
    ])
}
