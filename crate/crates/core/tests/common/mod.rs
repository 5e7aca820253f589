//! Independent oracles shared by the integration tests. Nothing here calls
//! into the code paths being checked; everything is spelled out with plain
//! loops.

#![allow(dead_code)]

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use countocc_core::annotation::BoxAnnotation;
use countocc_core::frm::{Frm, FrmConfig};
use countocc_core::occlusion::Rect;
use countocc_core::params::ParamStore;
use countocc_core::pyramid::{FeaturePyramid, LevelMask};

pub fn random_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
}

/// Replaces every parameter with fresh uniform values so biases and
/// embeddings are exercised too.
pub fn randomize<R: Rng + ?Sized>(params: &mut ParamStore, rng: &mut R, scale: f64) {
    for (_, v) in params.iter_mut() {
        v.mapv_inplace(|_| rng.gen_range(-scale..scale));
    }
}

// ---- pyramids ---------------------------------------------------------

/// Random `B × C × H × W` levels with halving grids and a random mask each.
pub fn random_pyramid(seed: u64) -> (FeaturePyramid, Vec<LevelMask>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = rng.gen_range(1..=3);
    let levels = rng.gen_range(1..=3);
    let mut side = rng.gen_range(4..=9);
    let (mut feats, mut masks) = (Vec::new(), Vec::new());
    for _ in 0..levels {
        let c = rng.gen_range(1..=5);
        feats.push(Array4::from_shape_fn((batch, c, side, side + 1), |_| rng.gen_range(-3.0..3.0)));
        let p: f64 = rng.gen();
        masks.push(LevelMask { mask: Array3::from_shape_fn((batch, side, side + 1), |_| rng.gen_bool(p)) });
        side = (side / 2).max(1);
        if side == 1 {
            break;
        }
    }
    (FeaturePyramid::new(feats).unwrap(), masks)
}

// ---- straight-line FRM -------------------------------------------------

fn affine(x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (n, k) = x.dim();
    let m = w.ncols();
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let mut acc = b[[0, j]];
            for t in 0..k {
                acc += x[[i, t]] * w[[t, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    let u = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3));
    0.5 * x * (1.0 + u.tanh())
}

/// `MHA(q, k, v)` with per-head scaled dot products, no residual.
pub fn mha(p: &ParamStore, prefix: &str, q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, heads: usize) -> Array2<f64> {
    let g = |s: &str| p.get(&format!("{prefix}.{s}")).unwrap().clone();
    let qp = affine(q, &g("wq"), &g("bq"));
    let kp = affine(k, &g("wk"), &g("bk"));
    let vp = affine(v, &g("wv"), &g("bv"));
    let c = q.ncols();
    let dh = c / heads;
    let mut joined = Array2::zeros((q.nrows(), c));
    for h in 0..heads {
        for i in 0..q.nrows() {
            let mut scores = vec![0.0; k.nrows()];
            for (j, s) in scores.iter_mut().enumerate() {
                for d in 0..dh {
                    *s += qp[[i, h * dh + d]] * kp[[j, h * dh + d]];
                }
                *s /= (dh as f64).sqrt();
            }
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - top).exp()).sum();
            for (j, s) in scores.iter().enumerate() {
                let a = (s - top).exp() / z;
                for d in 0..dh {
                    joined[[i, h * dh + d]] += a * vp[[j, h * dh + d]];
                }
            }
        }
    }
    affine(&joined, &g("wo"), &g("bo"))
}

/// Reconstructed occluded tokens of one level written out step by step.
#[allow(clippy::too_many_arguments)]
pub fn frm_reference(
    p: &ParamStore,
    level: usize,
    depth: usize,
    heads: usize,
    tokens: &Array2<f64>,
    pos: &Array2<f64>,
    occluded: &[usize],
    visible: &[usize],
    z_vt: &Array2<f64>,
) -> Array2<f64> {
    let c = tokens.ncols();
    let pre = format!("frm.l{level}");
    let mu = p.get(&format!("{pre}.mask_embed")).unwrap();
    let mut q = Array2::zeros((occluded.len(), c));
    for (r, &i) in occluded.iter().enumerate() {
        for ch in 0..c {
            q[[r, ch]] = mu[[0, ch]] + pos[[i, ch]];
        }
    }
    let mut z_vis = Array2::zeros((visible.len(), c));
    let mut keys = Array2::zeros((visible.len(), c));
    for (r, &i) in visible.iter().enumerate() {
        for ch in 0..c {
            z_vis[[r, ch]] = tokens[[i, ch]];
            keys[[r, ch]] = tokens[[i, ch]] + pos[[i, ch]];
        }
    }
    for k in 0..depth {
        let b = format!("{pre}.b{k}");
        let s = &q + &mha(p, &format!("{b}.sa"), &q, &q, &q, heads);
        let q_vis = if visible.is_empty() { s } else { &s + &mha(p, &format!("{b}.ca_vis"), &s, &keys, &z_vis, heads) };
        let z_cond = &q_vis + &mha(p, &format!("{b}.ca_sem"), &q_vis, z_vt, z_vt, heads);
        let w = |s: &str| p.get(&format!("{b}.mlp.{s}")).unwrap().clone();
        let hidden = affine(&z_cond, &w("w1"), &w("b1")).mapv(gelu);
        q = &z_cond + &affine(&hidden, &w("w2"), &w("b2"));
    }
    q
}

/// One seeded float64 FRM problem: a single level, a random mask with at
/// least one occluded cell, fully random parameters and semantic tokens.
pub struct FrmInstance {
    pub frm: Frm,
    pub params: ParamStore,
    pub features: Array4<f64>,
    pub mask: LevelMask,
    pub z_vt: Vec<Array2<f64>>,
}

pub fn frm_instance(seed: u64) -> FrmInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = [1, 2][rng.gen_range(0..2)];
    let c = heads * rng.gen_range(1..=3) * 2;
    let (h, w) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
    let cfg = FrmConfig {
        channels: vec![c],
        fusion_dim: 3,
        heads,
        depth: rng.gen_range(1..=2),
        mlp_ratio: 2,
        pre_norm: false,
        active_levels: vec![0],
    };
    let frm = Frm::new(cfg, vec![(h, w)]).unwrap();
    let mut params = frm.init_params(&mut rng);
    randomize(&mut params, &mut rng, 0.6);
    let batch = rng.gen_range(1..=2);
    let features = Array4::from_shape_fn((batch, c, h, w), |_| rng.gen_range(-1.0..1.0));
    // Every few seeds the whole level is hidden.
    let p = if seed % 5 == 0 { 1.0 } else { 0.4 };
    let mut mask = LevelMask { mask: Array3::from_shape_fn((batch, h, w), |_| rng.gen_bool(p)) };
    for b in 0..batch {
        mask.mask[[b, 0, 0]] = true;
    }
    let z_vt = (0..batch)
        .map(|_| {
            let n = rng.gen_range(1..=4);
            random_matrix(&mut rng, n, c, 1.0)
        })
        .collect();
    FrmInstance { frm, params, features, mask, z_vt }
}

// ---- scalar losses -----------------------------------------------------

/// `(l2, charb, cos)` term sums over position pairs.
pub fn rec_terms(student: &[Vec<Vec<f64>>], teacher: &[Vec<Vec<f64>>], l2: f64, cos: f64, char: f64, eps: f64) -> (f64, f64, f64) {
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for (sl, tl) in student.iter().zip(teacher) {
        for (s, t) in sl.iter().zip(tl) {
            let d2: f64 = s.iter().zip(t).map(|(x, y)| (x - y) * (x - y)).sum();
            let dot: f64 = s.iter().zip(t).map(|(x, y)| x * y).sum();
            let ns = s.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nt = t.iter().map(|x| x * x).sum::<f64>().sqrt();
            let cosine = if ns > 0.0 && nt > 0.0 { dot / (ns * nt) } else { 0.0 };
            a += l2 * d2;
            b += char * (d2 + eps * eps).sqrt();
            c += cos * (1.0 - cosine);
        }
    }
    (a, b, c)
}

pub fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// `(l2, cos)` parts of the similarity loss for one map pair.
pub fn sim_terms(t: &[f64], s: &[f64], sim_l2: f64, sim_cos: f64) -> (f64, f64) {
    let l2: f64 = t.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum();
    let dot: f64 = t.iter().zip(s).map(|(a, b)| a * b).sum();
    let nt = t.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ns = s.iter().map(|a| a * a).sum::<f64>().sqrt();
    let cos = if nt > 0.0 && ns > 0.0 { dot / (nt * ns) } else { 0.0 };
    (sim_l2 * l2, sim_cos * (1.0 - cos))
}

/// Consistency loss for one map pair from the definitions.
pub fn cst_term(t: &[f64], s: &[f64], tau: f64) -> f64 {
    let roi: Vec<usize> = (0..t.len()).filter(|&i| t[i] + s[i] >= tau).collect();
    if roi.is_empty() {
        return 0.0;
    }
    let stats = |g: &[f64]| {
        let n = roi.len() as f64;
        let mean = roi.iter().map(|&i| g[i]).sum::<f64>() / n;
        let var = roi.iter().map(|&i| (g[i] - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let (mt, st) = stats(t);
    let (ms, ss) = stats(s);
    st + ss + (tau / 2.0 - mt).max(0.0) + (tau / 2.0 - ms).max(0.0)
}

// ---- metrics -----------------------------------------------------------

pub fn brute_mae(p: &[f64], g: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..p.len() {
        acc += (p[i] - g[i]).abs();
    }
    acc / p.len() as f64
}

pub fn brute_rmse(p: &[f64], g: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..p.len() {
        acc += (p[i] - g[i]) * (p[i] - g[i]);
    }
    (acc / p.len() as f64).sqrt()
}

// ---- occlusion ---------------------------------------------------------

/// Instance centers inside any rectangle, by direct geometry.
pub fn hidden_centers(boxes: &[BoxAnnotation], rects: &[Rect], width: usize, height: usize) -> usize {
    boxes
        .iter()
        .filter(|b| {
            let cx = ((b.x_min + b.x_max) / 2.0).floor().clamp(0.0, (width - 1) as f64) as usize;
            let cy = ((b.y_min + b.y_max) / 2.0).floor().clamp(0.0, (height - 1) as f64) as usize;
            rects.iter().any(|r| cx >= r.x && cx < r.x + r.w && cy >= r.y && cy < r.y + r.h)
        })
        .count()
}

pub fn ceil_frac(a: f64, n: usize) -> usize {
    // Exact rational ceil for two-decimal fractions.
    let num = (a * 100.0).round() as usize * n;
    num.div_ceil(100)
}

pub fn floor_frac(a: f64, n: usize) -> usize {
    (a * 100.0).round() as usize * n / 100
}
