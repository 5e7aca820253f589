//! Language-conditioned GradCAM.
//!
//! The matching score `s` averages the `k` most confident per-query maxima
//! of the logits. Channel weights are spatial means of `∂s/∂Z`, each level
//! map is `ReLU(Σ_c α_c Z_c)`, and the levels are upsampled to the output
//! size and mixed with a softmax over their summed absolute gradients.
//!
//! Gradients come from a [`GradientOracle`]: reverse mode on the tape, or
//! central differences for cross-checking.

use ndarray::{Array1, Array2, Array3, ArrayView3, Axis};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::pyramid::{level_tokens, FeaturePyramid};

/// A head mapping one image's per-level tokens (`H_ℓ·W_ℓ × C_ℓ`) to
/// logits (`Q × V`).
pub trait LogitHead {
    fn logits<'t>(&self, tape: &'t Tape, levels: &[Var<'t>]) -> Var<'t>;
}

/// Entries averaged by the matching score: the argmax of each of the `k`
/// best queries (`k` clamped to `Q`). Ties go to the lower index.
pub fn top_k_selection(y: &Array2<f64>, k: usize) -> Vec<(usize, usize)> {
    let mut best: Vec<(usize, usize, f64)> = y
        .rows()
        .into_iter()
        .enumerate()
        .map(|(q, row)| {
            let (c, v) = row.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (c, &v)| {
                if v > acc.1 {
                    (c, v)
                } else {
                    acc
                }
            });
            (q, c, v)
        })
        .collect();
    best.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    best.truncate(k.clamp(1, y.nrows().max(1)));
    best.into_iter().map(|(q, c, _)| (q, c)).collect()
}

pub fn matching_score(y: &Array2<f64>, k: usize) -> f64 {
    let picked = top_k_selection(y, k);
    picked.iter().map(|&ij| y[ij]).sum::<f64>() / picked.len() as f64
}

pub fn matching_score_var<'t>(y: Var<'t>, k: usize) -> Var<'t> {
    let picked = y.with_value(|v| top_k_selection(v, k));
    let n = picked.len() as f64;
    y.pick(&picked).sum().scale(1.0 / n)
}

/// Produces `s` and `∂s/∂Z` for every level of one image.
pub trait GradientOracle {
    fn score_and_gradients(
        &self,
        head: &dyn LogitHead,
        levels: &[Array2<f64>],
        k: usize,
    ) -> Result<(f64, Vec<Array2<f64>>)>;
}

/// Reverse-mode gradients from the tape.
#[derive(Debug, Clone, Copy, Default)]
pub struct AutodiffOracle;

impl GradientOracle for AutodiffOracle {
    fn score_and_gradients(
        &self,
        head: &dyn LogitHead,
        levels: &[Array2<f64>],
        k: usize,
    ) -> Result<(f64, Vec<Array2<f64>>)> {
        let tape = Tape::new();
        let vars: Vec<_> = levels.iter().map(|z| tape.var(z.clone())).collect();
        let s = matching_score_var(head.logits(&tape, &vars), k);
        let grads = tape.backward(s);
        Ok((s.scalar_value(), vars.iter().map(|v| grads.wrt(*v)).collect()))
    }
}

/// Central differences, one entry at a time.
#[derive(Debug, Clone, Copy)]
pub struct FiniteDifferenceOracle {
    pub step: f64,
}

impl Default for FiniteDifferenceOracle {
    fn default() -> Self {
        Self { step: 1e-5 }
    }
}

impl FiniteDifferenceOracle {
    fn score(head: &dyn LogitHead, levels: &[Array2<f64>], k: usize) -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = levels.iter().map(|z| tape.var(z.clone())).collect();
        head.logits(&tape, &vars).with_value(|y| matching_score(y, k))
    }
}

impl GradientOracle for FiniteDifferenceOracle {
    fn score_and_gradients(
        &self,
        head: &dyn LogitHead,
        levels: &[Array2<f64>],
        k: usize,
    ) -> Result<(f64, Vec<Array2<f64>>)> {
        let s = Self::score(head, levels, k);
        let mut work = levels.to_vec();
        let mut grads = Vec::with_capacity(levels.len());
        for l in 0..levels.len() {
            let mut g = Array2::zeros(levels[l].dim());
            for idx in 0..levels[l].len() {
                let at = (idx / levels[l].ncols(), idx % levels[l].ncols());
                let x0 = levels[l][at];
                work[l][at] = x0 + self.step;
                let up = Self::score(head, &work, k);
                work[l][at] = x0 - self.step;
                let down = Self::score(head, &work, k);
                work[l][at] = x0;
                g[at] = (up - down) / (2.0 * self.step);
            }
            grads.push(g);
        }
        Ok((s, grads))
    }
}

/// `α_c`: spatial mean of the gradient of channel `c` (`C × H × W` input).
pub fn channel_weights(gradient: ArrayView3<f64>) -> Array1<f64> {
    let (_, h, w) = gradient.dim();
    gradient.sum_axis(Axis(2)).sum_axis(Axis(1)) / (h * w) as f64
}

/// `Ω = ReLU(Σ_c α_c Z_c)` for a `C × H × W` level.
pub fn level_attention(alpha: &Array1<f64>, features: ArrayView3<f64>) -> Array2<f64> {
    let (_, h, w) = features.dim();
    let mut omega = Array2::zeros((h, w));
    for (a, z) in alpha.iter().zip(features.outer_iter()) {
        omega.scaled_add(*a, &z);
    }
    omega.mapv_inplace(|v| v.max(0.0));
    omega
}

/// Softmax over per-level gradient energies.
pub fn level_weights(energies: &[f64]) -> Vec<f64> {
    let top = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = energies.iter().map(|e| (e - top).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.iter().map(|e| e / z).collect()
}

/// Bilinear interpolation weights (`out × in`), half-pixel centers, edges
/// clamped.
pub fn bilinear_matrix(out: usize, input: usize) -> Array2<f64> {
    let mut m = Array2::zeros((out, input));
    let scale = input as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[[o, i0]] += 1.0 - frac;
        m[[o, i1]] += frac;
    }
    m
}

pub fn upsample_bilinear(map: &Array2<f64>, (h, w): (usize, usize)) -> Array2<f64> {
    let uh = bilinear_matrix(h, map.nrows());
    let uw = bilinear_matrix(w, map.ncols());
    uh.dot(map).dot(&uw.t())
}

/// Divides by the maximum when it is positive.
pub fn normalize_max(g: &Array2<f64>) -> Array2<f64> {
    let top = g.iter().copied().fold(0.0, f64::max);
    if top > 0.0 {
        g / top
    } else {
        g.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// `G` at output resolution.
    pub g: Array2<f64>,
    pub omegas: Vec<Array2<f64>>,
    pub betas: Vec<f64>,
    /// `Σ|∂s/∂Z^(ℓ)|` per level.
    pub energies: Vec<f64>,
    pub alphas: Vec<Array1<f64>>,
    pub score: f64,
}

impl AttentionMap {
    pub fn normalized(&self) -> Array2<f64> {
        normalize_max(&self.g)
    }
}

/// Upsamples each `Ω`, weights levels by gradient energy and sums.
/// `gradients[ℓ]` is `C_ℓ × H_ℓ × W_ℓ`.
pub fn aggregate_levels(
    omegas: &[Array2<f64>],
    gradients: &[ArrayView3<f64>],
    output_dims: (usize, usize),
) -> Result<(Array2<f64>, Vec<f64>, Vec<f64>)> {
    if omegas.len() != gradients.len() || omegas.is_empty() {
        return Err(Error::shape(format!("{} maps vs {} gradients", omegas.len(), gradients.len())));
    }
    let energies: Vec<f64> = gradients.iter().map(|g| g.iter().map(|v| v.abs()).sum()).collect();
    let betas = level_weights(&energies);
    let mut g = Array2::zeros(output_dims);
    for (omega, &beta) in omegas.iter().zip(&betas) {
        g.scaled_add(beta, &upsample_bilinear(omega, output_dims));
    }
    Ok((g, betas, energies))
}

fn tokens_to_chw(tokens: &Array2<f64>, h: usize, w: usize) -> Array3<f64> {
    let c = tokens.ncols();
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| tokens[[y * w + x, ch]])
}

/// Full GradCAM for one image given its per-level tokens.
pub fn gradcam_tokens(
    levels: &[Array2<f64>],
    level_dims: &[(usize, usize)],
    head: &dyn LogitHead,
    oracle: &dyn GradientOracle,
    k: usize,
    output_dims: (usize, usize),
) -> Result<AttentionMap> {
    let (score, grads) = oracle.score_and_gradients(head, levels, k)?;
    if grads.len() != levels.len() {
        return Err(Error::shape(format!("oracle returned {} levels, expected {}", grads.len(), levels.len())));
    }
    let mut omegas = Vec::with_capacity(levels.len());
    let mut alphas = Vec::with_capacity(levels.len());
    let mut grad_maps = Vec::with_capacity(levels.len());
    for ((z, g), &(h, w)) in levels.iter().zip(&grads).zip(level_dims) {
        if g.dim() != z.dim() || z.nrows() != h * w {
            return Err(Error::shape(format!("gradient {:?} vs features {:?} at {h}x{w}", g.dim(), z.dim())));
        }
        let g = tokens_to_chw(g, h, w);
        let alpha = channel_weights(g.view());
        omegas.push(level_attention(&alpha, tokens_to_chw(z, h, w).view()));
        alphas.push(alpha);
        grad_maps.push(g);
    }
    let views: Vec<_> = grad_maps.iter().map(|g| g.view()).collect();
    let (g, betas, energies) = aggregate_levels(&omegas, &views, output_dims)?;
    Ok(AttentionMap { g, omegas, betas, energies, alphas, score })
}

/// GradCAM for every image of a pyramid.
pub fn gradcam(
    pyramid: &FeaturePyramid,
    head: &dyn LogitHead,
    oracle: &dyn GradientOracle,
    k: usize,
    output_dims: (usize, usize),
) -> Result<Vec<AttentionMap>> {
    let dims: Vec<_> = (0..pyramid.num_levels()).map(|l| {
        let (_, h, w) = pyramid.level_dims(l);
        (h, w)
    }).collect();
    (0..pyramid.batch())
        .map(|b| {
            let levels: Vec<_> = pyramid.levels.iter().map(|z| level_tokens(z, b)).collect();
            gradcam_tokens(&levels, &dims, head, oracle, k, output_dims)
        })
        .collect()
}

/// Channel weights (`C × 1`) and level weights (`1 × L`) on the tape from
/// token-layout gradients, so they can be differentiated in turn.
pub fn weights_from_gradients_var<'t>(grads: &[Var<'t>]) -> (Vec<Var<'t>>, Var<'t>) {
    let tape = grads[0].tape();
    let alphas = grads.iter().map(|g| g.sum_cols().scale(1.0 / g.shape().0 as f64).t()).collect();
    let energies: Vec<_> = grads.iter().map(|g| g.abs().sum()).collect();
    (alphas, tape.concat_cols(&energies).softmax_rows())
}

/// `G` on the tape from token-layout levels. `alphas[ℓ]` is `C_ℓ × 1`,
/// `betas` is `1 × L`; pass constants to keep them out of the gradient.
pub fn attention_map_var<'t>(
    levels: &[Var<'t>],
    level_dims: &[(usize, usize)],
    alphas: &[Var<'t>],
    betas: Var<'t>,
    output_dims: (usize, usize),
    normalize: bool,
) -> Var<'t> {
    let tape = betas.tape();
    let (oh, ow) = output_dims;
    let mut g = tape.zeros(oh, ow);
    for (l, ((z, alpha), &(h, w))) in levels.iter().zip(alphas).zip(level_dims).enumerate() {
        let omega = z.matmul(*alpha).relu().reshape(h, w);
        let uh = tape.var(bilinear_matrix(oh, h));
        let uw = tape.var(bilinear_matrix(ow, w).t().to_owned());
        let up = uh.matmul(omega).matmul(uw);
        g = g.add(up.mul(betas.slice_cols(l, 1).broadcast(oh, ow)));
    }
    if normalize && g.with_value(|v| v.iter().any(|&x| x > 0.0)) {
        g.div(g.max_all().broadcast(oh, ow))
    } else {
        g
    }
}

/// [`attention_map_var`] with weights taken from a finished [`AttentionMap`].
pub fn detached_attention_map_var<'t>(
    levels: &[Var<'t>],
    level_dims: &[(usize, usize)],
    map: &AttentionMap,
    output_dims: (usize, usize),
    normalize: bool,
) -> Var<'t> {
    let tape = levels[0].tape();
    let alphas: Vec<_> = map.alphas.iter().map(|a| tape.var(a.clone().insert_axis(Axis(1)))).collect();
    let betas = tape.var(Array1::from(map.betas.clone()).insert_axis(Axis(0)));
    attention_map_var(levels, level_dims, &alphas, betas, output_dims, normalize)
}
