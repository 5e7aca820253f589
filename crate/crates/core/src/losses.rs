//! Training objectives: the multi-scale reconstruction loss between student
//! reconstructions and teacher features, and the two attention-map losses
//! (similarity and RoI consistency).
//!
//! Every loss exists twice: on the tape (student side differentiable,
//! teacher side constant) and as a plain value function built on the same
//! code path.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l2: f64,
    pub cos: f64,
    pub char: f64,
    pub eps_char: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l2: 1.0, cos: 1.0, char: 1.0, eps_char: 1e-3 }
    }
}

impl LossWeights {
    /// Ablation presets: "l2", "l2+cos", "l2+cos+charb".
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        match name {
            "l2" => Ok(Self { cos: 0.0, char: 0.0, ..base }),
            "l2+cos" => Ok(Self { char: 0.0, ..base }),
            "l2+cos+charb" => Ok(base),
            other => Err(Error::Config(format!("unknown loss preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_char > 0.0) {
            return Err(Error::Config("eps_char must be positive".into()));
        }
        if self.l2 < 0.0 || self.cos < 0.0 || self.char < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Weighted terms; `total` is their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RecBreakdown {
    pub l2: f64,
    pub charb: f64,
    pub cos: f64,
    pub total: f64,
    pub positions: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct RecLossVars<'t> {
    pub l2: Var<'t>,
    pub charb: Var<'t>,
    pub cos: Var<'t>,
    pub total: Var<'t>,
    pub positions: usize,
}

impl RecLossVars<'_> {
    pub fn breakdown(&self) -> RecBreakdown {
        let (l2, charb, cos) = (self.l2.scalar_value(), self.charb.scalar_value(), self.cos.scalar_value());
        RecBreakdown { l2, charb, cos, total: l2 + charb + cos, positions: self.positions }
    }
}

/// Sum over levels and occluded positions of
/// `λ_l2·‖Δ‖² + λ_char·√(‖Δ‖² + ε²) + λ_cos·(1 − cos)`, with `Δ = S − T`
/// per position. Each `student[i]`/`teacher[i]` pair is `P_i × C`.
pub fn reconstruction_loss_var<'t>(
    tape: &'t Tape,
    student: &[Var<'t>],
    teacher: &[Array2<f64>],
    w: &LossWeights,
) -> Result<RecLossVars<'t>> {
    if student.len() != teacher.len() {
        return Err(Error::shape(format!("{} student vs {} teacher sets", student.len(), teacher.len())));
    }
    let mut l2 = tape.scalar(0.0);
    let mut charb = tape.scalar(0.0);
    let mut cos = tape.scalar(0.0);
    let mut positions = 0;
    for (s, t) in student.iter().zip(teacher) {
        if s.shape() != t.dim() {
            return Err(Error::shape(format!("student {:?} vs teacher {:?}", s.shape(), t.dim())));
        }
        let n = t.nrows();
        if n == 0 {
            continue;
        }
        positions += n;
        let t = tape.var(t.clone());
        let sq = s.sub(t).square().sum_rows();
        l2 = l2.add(sq.sum().scale(w.l2));
        charb = charb.add(sq.add_scalar(w.eps_char * w.eps_char).sqrt().sum().scale(w.char));
        cos = cos.add(s.row_cosine(t).neg().add_scalar(1.0).sum().scale(w.cos));
    }
    let total = l2.add(charb).add(cos);
    Ok(RecLossVars { l2, charb, cos, total, positions })
}

pub fn reconstruction_loss(student: &[Array2<f64>], teacher: &[Array2<f64>], w: &LossWeights) -> Result<RecBreakdown> {
    let tape = Tape::new();
    let s: Vec<_> = student.iter().map(|a| tape.var(a.clone())).collect();
    Ok(reconstruction_loss_var(&tape, &s, teacher, w)?.breakdown())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisEqConfig {
    pub sim_l2: f64,
    pub sim_cos: f64,
    /// Weight of the consistency loss in the stage-2 objective.
    pub cst: f64,
    /// RoI threshold on `G_T + G_S`.
    pub tau: f64,
    /// Max-normalize each map to `[0, 1]` before the losses.
    pub normalize_maps: bool,
}

impl Default for VisEqConfig {
    fn default() -> Self {
        Self { sim_l2: 1.0, sim_cos: 1.0, cst: 1.0, tau: 0.5, normalize_maps: true }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SimBreakdown {
    pub l2: f64,
    pub cos: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SimLossVars<'t> {
    pub l2: Var<'t>,
    pub cos: Var<'t>,
    pub total: Var<'t>,
}

impl SimLossVars<'_> {
    pub fn breakdown(&self) -> SimBreakdown {
        let (l2, cos) = (self.l2.scalar_value(), self.cos.scalar_value());
        SimBreakdown { l2, cos, total: l2 + cos }
    }
}

/// `λ_l2·Σ(G_T − G_S)² + λ_cos·(1 − cos(G_T, G_S))`, the cosine taken over
/// each flattened map and summed over the batch. A zero map has cosine 0.
pub fn attention_similarity_loss_var<'t>(
    tape: &'t Tape,
    g_t: &[Array2<f64>],
    g_s: &[Var<'t>],
    sim_l2: f64,
    sim_cos: f64,
) -> Result<SimLossVars<'t>> {
    if g_t.len() != g_s.len() {
        return Err(Error::shape(format!("{} teacher vs {} student maps", g_t.len(), g_s.len())));
    }
    let mut l2 = tape.scalar(0.0);
    let mut cos = tape.scalar(0.0);
    for (t, s) in g_t.iter().zip(g_s) {
        if s.shape() != t.dim() {
            return Err(Error::shape(format!("student map {:?} vs teacher {:?}", s.shape(), t.dim())));
        }
        let n = t.len();
        let t = tape.var(t.clone());
        l2 = l2.add(t.sub(*s).square().sum().scale(sim_l2));
        let c = t.reshape(1, n).row_cosine(s.reshape(1, n));
        cos = cos.add(c.neg().add_scalar(1.0).scale(sim_cos));
    }
    Ok(SimLossVars { l2, cos, total: l2.add(cos) })
}

pub fn attention_similarity_loss(
    g_t: &[Array2<f64>],
    g_s: &[Array2<f64>],
    sim_l2: f64,
    sim_cos: f64,
) -> Result<SimBreakdown> {
    let tape = Tape::new();
    let s: Vec<_> = g_s.iter().map(|a| tape.var(a.clone())).collect();
    Ok(attention_similarity_loss_var(&tape, g_t, &s, sim_l2, sim_cos)?.breakdown())
}

/// `G_T + G_S ≥ τ`.
pub fn roi_mask(g_t: &Array2<f64>, g_s: &Array2<f64>, tau: f64) -> Result<Array2<bool>> {
    if g_t.dim() != g_s.dim() {
        return Err(Error::shape(format!("maps {:?} vs {:?}", g_t.dim(), g_s.dim())));
    }
    Ok(ndarray::Zip::from(g_t).and(g_s).map_collect(|&a, &b| a + b >= tau))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub size: usize,
}

impl RoiStats {
    pub fn is_empty(&self) -> bool {
        self.size == 0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RoiStatsVars<'t> {
    pub mean: Var<'t>,
    pub std: Var<'t>,
    pub size: usize,
}

/// Masked mean and population std; `None` for an empty RoI.
pub fn roi_stats_var<'t>(g: Var<'t>, roi: &Array2<bool>) -> Option<RoiStatsVars<'t>> {
    let size = roi.iter().filter(|&&m| m).count();
    if size == 0 {
        return None;
    }
    let tape = g.tape();
    let m = tape.var(roi.mapv(|b| if b { 1.0 } else { 0.0 }));
    let inv = 1.0 / size as f64;
    let mean = g.mul(m).sum().scale(inv);
    let centered = g.sub(mean.broadcast(roi.nrows(), roi.ncols()));
    let var = centered.square().mul(m).sum().scale(inv);
    Some(RoiStatsVars { mean, std: var.sqrt(), size })
}

pub fn roi_stats(g: &Array2<f64>, roi: &Array2<bool>) -> Result<RoiStats> {
    if g.dim() != roi.dim() {
        return Err(Error::shape(format!("map {:?} vs roi {:?}", g.dim(), roi.dim())));
    }
    let tape = Tape::new();
    Ok(match roi_stats_var(tape.var(g.clone()), roi) {
        Some(s) => RoiStats { mean: s.mean.scalar_value(), std: s.std.scalar_value(), size: s.size },
        None => RoiStats { mean: 0.0, std: 0.0, size: 0 },
    })
}

fn hinge(tau: f64, mean: f64) -> f64 {
    (tau / 2.0 - mean).max(0.0)
}

/// Batch mean of `σ_T + σ_S + max(0, τ/2 − μ_T) + max(0, τ/2 − μ_S)`.
/// Elements with an empty RoI add 0 but still count in the denominator.
pub fn consistency_loss(stats_t: &[RoiStats], stats_s: &[RoiStats], tau: f64) -> Result<f64> {
    if stats_t.len() != stats_s.len() || stats_t.is_empty() {
        return Err(Error::shape(format!("{} teacher vs {} student stats", stats_t.len(), stats_s.len())));
    }
    let total: f64 = stats_t
        .iter()
        .zip(stats_s)
        .filter(|(t, s)| !t.is_empty() && !s.is_empty())
        .map(|(t, s)| t.std + s.std + hinge(tau, t.mean) + hinge(tau, s.mean))
        .sum();
    Ok(total / stats_t.len() as f64)
}

/// [`consistency_loss`] with the RoI built from both maps; the teacher side
/// enters as a constant.
pub fn consistency_loss_var<'t>(tape: &'t Tape, g_t: &[Array2<f64>], g_s: &[Var<'t>], tau: f64) -> Result<Var<'t>> {
    if g_t.len() != g_s.len() || g_t.is_empty() {
        return Err(Error::shape(format!("{} teacher vs {} student maps", g_t.len(), g_s.len())));
    }
    let mut total = tape.scalar(0.0);
    for (t, s) in g_t.iter().zip(g_s) {
        let roi = s.with_value(|sv| roi_mask(t, sv, tau))?;
        let st = roi_stats(t, &roi)?;
        let Some(ss) = roi_stats_var(*s, &roi) else { continue };
        let hinge_s = ss.mean.neg().add_scalar(tau / 2.0).relu();
        let constant = st.std + hinge(tau, st.mean);
        total = total.add(ss.std.add(hinge_s).add_scalar(constant));
    }
    Ok(total.scale(1.0 / g_t.len() as f64))
}
