//! Feature Reconstruction Module.
//!
//! Per pyramid level, occluded positions start as copies of a learned mask
//! embedding plus the positional encoding of their cell. Each decoder block
//! then applies
//!
//! ```text
//! S      = Q + MHA_sa(Q, Q, Q)
//! Q_vis  = S + MHA_vis(S, Z_vis + pos, Z_vis)        (skipped when N_v = 0)
//! Z_cond = Q_vis + MHA_sem(Q_vis, Z_vt, Z_vt)
//! Ẑ      = Z_cond + W2 · gelu(W1 · Z_cond + b1) + b2
//! ```
//!
//! and the last block's output replaces the features at occluded positions.
//! Visible positions are never touched.

use ndarray::{Array2, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{uniform, xavier, Bound, ParamStore};
use crate::pyramid::{level_tokens, reassemble, FeaturePyramid, LevelMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrmConfig {
    /// `C_ℓ` per level.
    pub channels: Vec<usize>,
    /// Width of the shared text-visual fusion tokens.
    pub fusion_dim: usize,
    pub heads: usize,
    /// Decoder blocks per level.
    pub depth: usize,
    /// MLP hidden width as a multiple of `C_ℓ`.
    pub mlp_ratio: usize,
    /// Standardize attention/MLP inputs. Off reproduces the bare equations.
    pub pre_norm: bool,
    /// Levels that get reconstructed; the rest pass through unchanged.
    pub active_levels: Vec<usize>,
}

impl Default for FrmConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64],
            fusion_dim: 32,
            heads: 4,
            depth: 1,
            mlp_ratio: 4,
            pre_norm: false,
            active_levels: vec![0, 1, 2],
        }
    }
}

impl FrmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("FRM needs at least one level".into()));
        }
        if self.heads == 0 || self.depth == 0 || self.mlp_ratio == 0 || self.fusion_dim == 0 {
            return Err(Error::Config("heads, depth, mlp_ratio and fusion_dim must be positive".into()));
        }
        for (l, &c) in self.channels.iter().enumerate() {
            if c % self.heads != 0 {
                return Err(Error::Config(format!("{} heads do not divide C_{l} = {c}", self.heads)));
            }
        }
        if let Some(&l) = self.active_levels.iter().find(|&&l| l >= self.channels.len()) {
            return Err(Error::Config(format!("active level {l} does not exist")));
        }
        Ok(())
    }
}

/// Fixed 2-D sinusoidal table, `(H·W) × C`. The first half of the channels
/// encodes the row, the second half the column.
pub fn positional_encoding(h: usize, w: usize, channels: usize) -> Array2<f64> {
    let half = channels / 2;
    let mut table = Array2::zeros((h * w, channels));
    let encode = |pos: f64, dim: usize, width: usize| {
        let pair = (dim / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * pair / width.max(1) as f64);
        if dim % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    };
    for y in 0..h {
        for x in 0..w {
            let row = y * w + x;
            for d in 0..half {
                table[[row, d]] = encode(y as f64, d, half);
            }
            for d in half..channels {
                table[[row, d]] = encode(x as f64, d - half, channels - half);
            }
        }
    }
    table
}

/// Projection weights of one multi-head attention block (values).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bq: Array2<f64>,
    pub bk: Array2<f64>,
    pub bv: Array2<f64>,
    pub bo: Array2<f64>,
}

impl AttentionParams {
    pub fn identity(c: usize) -> Self {
        let eye = Array2::eye(c);
        let zero = Array2::zeros((1, c));
        Self {
            wq: eye.clone(),
            wk: eye.clone(),
            wv: eye.clone(),
            wo: eye,
            bq: zero.clone(),
            bk: zero.clone(),
            bv: zero.clone(),
            bo: zero,
        }
    }

    fn bind<'t>(&self, tape: &'t Tape) -> AttentionVars<'t> {
        AttentionVars {
            wq: tape.var(self.wq.clone()),
            wk: tape.var(self.wk.clone()),
            wv: tape.var(self.wv.clone()),
            wo: tape.var(self.wo.clone()),
            bq: tape.var(self.bq.clone()),
            bk: tape.var(self.bk.clone()),
            bv: tape.var(self.bv.clone()),
            bo: tape.var(self.bo.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars<'t> {
    pub wq: Var<'t>,
    pub wk: Var<'t>,
    pub wv: Var<'t>,
    pub wo: Var<'t>,
    pub bq: Var<'t>,
    pub bk: Var<'t>,
    pub bv: Var<'t>,
    pub bo: Var<'t>,
}

impl<'t> AttentionVars<'t> {
    fn from_bound(bound: &Bound<'t>, prefix: &str) -> Self {
        let p = |s: &str| bound.get(&format!("{prefix}.{s}"));
        Self { wq: p("wq"), wk: p("wk"), wv: p("wv"), wo: p("wo"), bq: p("bq"), bk: p("bk"), bv: p("bv"), bo: p("bo") }
    }
}

/// Multi-head scaled dot-product attention without residual; also returns
/// each head's attention matrix (rows sum to one).
pub fn multi_head_attention<'t>(
    queries: Var<'t>,
    keys: Var<'t>,
    values: Var<'t>,
    w: &AttentionVars<'t>,
    heads: usize,
) -> (Var<'t>, Vec<Var<'t>>) {
    let c = queries.shape().1;
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = queries.matmul(w.wq).add_row(w.bq);
    let k = keys.matmul(w.wk).add_row(w.bk);
    let v = values.matmul(w.wv).add_row(w.bv);
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_cols(h * dh, dh);
        let kh = k.slice_cols(h * dh, dh);
        let vh = v.slice_cols(h * dh, dh);
        let p = qh.matmul(kh.t()).scale(scale).softmax_rows();
        outs.push(p.matmul(vh));
        probs.push(p);
    }
    let joined = if heads == 1 { outs[0] } else { queries.tape().concat_cols(&outs) };
    (joined.matmul(w.wo).add_row(w.bo), probs)
}

/// `queries + MHA(queries, keys, values)`; with `pre_norm` the attention
/// inputs are standardized first while the residual keeps the raw queries.
pub fn attend_var<'t>(
    queries: Var<'t>,
    keys: Var<'t>,
    values: Var<'t>,
    w: &AttentionVars<'t>,
    heads: usize,
    pre_norm: bool,
) -> Var<'t> {
    let (q, k, v) = if pre_norm {
        (queries.layer_norm_rows(), keys.layer_norm_rows(), values.layer_norm_rows())
    } else {
        (queries, keys, values)
    };
    let (out, _) = multi_head_attention(q, k, v, w, heads);
    queries.add(out)
}

/// Value-level [`attend_var`].
pub fn attend(
    queries: &Array2<f64>,
    keys: &Array2<f64>,
    values: &Array2<f64>,
    weights: &AttentionParams,
    heads: usize,
) -> Result<Array2<f64>> {
    if keys.nrows() == 0 {
        return Err(Error::shape("attention needs at least one key"));
    }
    if keys.nrows() != values.nrows() {
        return Err(Error::shape(format!("{} keys but {} values", keys.nrows(), values.nrows())));
    }
    if queries.ncols() % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide {}", queries.ncols())));
    }
    let tape = Tape::new();
    let w = weights.bind(&tape);
    let out = attend_var(tape.var(queries.clone()), tape.var(keys.clone()), tape.var(values.clone()), &w, heads, false);
    Ok(out.value())
}

/// Per-head attention matrices for inspection.
pub fn attention_probabilities(
    queries: &Array2<f64>,
    keys: &Array2<f64>,
    weights: &AttentionParams,
    heads: usize,
) -> Vec<Array2<f64>> {
    let tape = Tape::new();
    let w = weights.bind(&tape);
    let k = tape.var(keys.clone());
    let (_, probs) = multi_head_attention(tape.var(queries.clone()), k, k, &w, heads);
    probs.iter().map(|p| p.value()).collect()
}

/// Level-specific reconstructors over a fixed pyramid geometry.
#[derive(Debug, Clone)]
pub struct Frm {
    pub cfg: FrmConfig,
    /// `(H_ℓ, W_ℓ)` per level.
    pub level_dims: Vec<(usize, usize)>,
    pos: Vec<Array2<f64>>,
}

impl Frm {
    pub fn new(cfg: FrmConfig, level_dims: Vec<(usize, usize)>) -> Result<Self> {
        cfg.validate()?;
        if level_dims.len() != cfg.channels.len() {
            return Err(Error::Config(format!(
                "{} level sizes for {} channel widths",
                level_dims.len(),
                cfg.channels.len()
            )));
        }
        let pos = level_dims
            .iter()
            .zip(&cfg.channels)
            .map(|(&(h, w), &c)| positional_encoding(h, w, c))
            .collect();
        Ok(Self { cfg, level_dims, pos })
    }

    pub fn num_levels(&self) -> usize {
        self.cfg.channels.len()
    }

    pub fn positional_table(&self, level: usize) -> &Array2<f64> {
        &self.pos[level]
    }

    /// Replaces the positional tables (e.g. with zeros, for isolation tests).
    pub fn set_positional_table(&mut self, level: usize, table: Array2<f64>) -> Result<()> {
        if table.dim() != self.pos[level].dim() {
            return Err(Error::shape(format!("table {:?} vs {:?}", table.dim(), self.pos[level].dim())));
        }
        self.pos[level] = table;
        Ok(())
    }

    pub fn is_active(&self, level: usize) -> bool {
        self.cfg.active_levels.contains(&level)
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut p = ParamStore::new();
        for (l, &c) in self.cfg.channels.iter().enumerate() {
            let pre = format!("frm.l{l}");
            p.insert(format!("{pre}.mask_embed"), uniform(rng, 1, c, 0.1));
            p.insert(format!("{pre}.sem_proj.w"), xavier(rng, self.cfg.fusion_dim, c));
            p.insert(format!("{pre}.sem_proj.b"), Array2::zeros((1, c)));
            for k in 0..self.cfg.depth {
                for block in ["sa", "ca_vis", "ca_sem"] {
                    let bp = format!("{pre}.b{k}.{block}");
                    for m in ["wq", "wk", "wv", "wo"] {
                        p.insert(format!("{bp}.{m}"), xavier(rng, c, c));
                    }
                    for m in ["bq", "bk", "bv", "bo"] {
                        p.insert(format!("{bp}.{m}"), Array2::zeros((1, c)));
                    }
                }
                let hidden = self.cfg.mlp_ratio * c;
                p.insert(format!("{pre}.b{k}.mlp.w1"), xavier(rng, c, hidden));
                p.insert(format!("{pre}.b{k}.mlp.b1"), Array2::zeros((1, hidden)));
                p.insert(format!("{pre}.b{k}.mlp.w2"), xavier(rng, hidden, c));
                p.insert(format!("{pre}.b{k}.mlp.b2"), Array2::zeros((1, c)));
            }
        }
        p
    }

    /// `Q_0`: the mask embedding replicated over occluded positions plus
    /// each position's encoding.
    pub fn init_queries_var<'t>(&self, bound: &Bound<'t>, level: usize, occluded: &[usize]) -> Var<'t> {
        let mu = bound.get(&format!("frm.l{level}.mask_embed"));
        let tape = mu.tape();
        let ones = tape.var(Array2::ones((occluded.len(), 1)));
        let pos = tape.var(self.pos[level].select(Axis(0), occluded));
        ones.matmul(mu).add(pos)
    }

    pub fn init_queries(&self, params: &ParamStore, level: usize, occluded: &[usize]) -> Result<Array2<f64>> {
        let mu = params.get(&format!("frm.l{level}.mask_embed"))?;
        let mut q = self.pos[level].select(Axis(0), occluded);
        q += mu;
        Ok(q)
    }

    /// Projects shared fusion tokens (`N_t × D`) to level width.
    pub fn semantic_tokens_var<'t>(&self, bound: &Bound<'t>, level: usize, fused: Var<'t>) -> Var<'t> {
        fused
            .matmul(bound.get(&format!("frm.l{level}.sem_proj.w")))
            .add_row(bound.get(&format!("frm.l{level}.sem_proj.b")))
    }

    /// Reconstructed tokens (`N_o × C`) for one batch element, or `None`
    /// when nothing is occluded.
    ///
    /// `tokens` is the full `(H·W) × C` level, `z_vt` the level-width
    /// semantic tokens.
    pub fn reconstruct_tokens_var<'t>(
        &self,
        bound: &Bound<'t>,
        level: usize,
        tokens: Var<'t>,
        occluded: &[usize],
        visible: &[usize],
        z_vt: Var<'t>,
    ) -> Result<Option<Var<'t>>> {
        if z_vt.shape().0 == 0 {
            return Err(Error::MissingSemanticGuidance);
        }
        if occluded.is_empty() {
            return Ok(None);
        }
        let tape = tokens.tape();
        let heads = self.cfg.heads;
        let pre_norm = self.cfg.pre_norm;
        let pre = format!("frm.l{level}");

        let (z_vis, keys_vis) = if visible.is_empty() {
            (None, None)
        } else {
            let z = tokens.gather_rows(visible);
            let pos = tape.var(self.pos[level].select(Axis(0), visible));
            (Some(z), Some(z.add(pos)))
        };

        let mut q = self.init_queries_var(bound, level, occluded);
        for k in 0..self.cfg.depth {
            let sa = AttentionVars::from_bound(bound, &format!("{pre}.b{k}.sa"));
            let ca_vis = AttentionVars::from_bound(bound, &format!("{pre}.b{k}.ca_vis"));
            let ca_sem = AttentionVars::from_bound(bound, &format!("{pre}.b{k}.ca_sem"));

            let s = attend_var(q, q, q, &sa, heads, pre_norm);
            let q_vis = match (keys_vis, z_vis) {
                (Some(keys), Some(values)) => attend_var(s, keys, values, &ca_vis, heads, pre_norm),
                _ => s,
            };
            let z_cond = attend_var(q_vis, z_vt, z_vt, &ca_sem, heads, pre_norm);
            let mlp_in = if pre_norm { z_cond.layer_norm_rows() } else { z_cond };
            let hidden = mlp_in
                .matmul(bound.get(&format!("{pre}.b{k}.mlp.w1")))
                .add_row(bound.get(&format!("{pre}.b{k}.mlp.b1")))
                .gelu();
            let mlp = hidden
                .matmul(bound.get(&format!("{pre}.b{k}.mlp.w2")))
                .add_row(bound.get(&format!("{pre}.b{k}.mlp.b2")));
            q = mlp.add(z_cond);
        }
        Ok(Some(q))
    }

    /// Completed `(H·W) × C` tokens plus the reconstructed rows, if any.
    /// Inactive levels and levels without occlusion pass through.
    pub fn complete_level_var<'t>(
        &self,
        bound: &Bound<'t>,
        level: usize,
        tokens: Var<'t>,
        occluded: &[usize],
        visible: &[usize],
        fused: Var<'t>,
    ) -> Result<(Var<'t>, Option<Var<'t>>)> {
        if fused.shape().0 == 0 {
            return Err(Error::MissingSemanticGuidance);
        }
        if !self.is_active(level) || occluded.is_empty() {
            return Ok((tokens, None));
        }
        let z_vt = self.semantic_tokens_var(bound, level, fused);
        let rec = self
            .reconstruct_tokens_var(bound, level, tokens, occluded, visible, z_vt)?
            .expect("occluded set is nonempty");
        Ok((tokens.scatter_rows(rec, occluded), Some(rec)))
    }

    /// Value-level reconstruction of one level for every batch element;
    /// `z_vt[b]` are level-width semantic tokens.
    pub fn reconstruct_level(
        &self,
        params: &ParamStore,
        level: usize,
        features: &Array4<f64>,
        mask: &LevelMask,
        z_vt: &[Array2<f64>],
    ) -> Result<Vec<Array2<f64>>> {
        let (batch, c, h, w) = features.dim();
        self.check_level(level, c, h, w, mask)?;
        if z_vt.len() != batch {
            return Err(Error::shape(format!("{} semantic sets for batch {batch}", z_vt.len())));
        }
        let mut out = Vec::with_capacity(batch);
        for (b, z) in z_vt.iter().enumerate() {
            if z.nrows() == 0 {
                return Err(Error::MissingSemanticGuidance);
            }
            let occluded = mask.occluded_indices(b);
            if occluded.is_empty() {
                out.push(Array2::zeros((0, c)));
                continue;
            }
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let tokens = tape.var(level_tokens(features, b));
            let rec = self
                .reconstruct_tokens_var(&bound, level, tokens, &occluded, &mask.visible_indices(b), tape.var(z.clone()))?
                .expect("occluded set is nonempty");
            out.push(rec.value());
        }
        Ok(out)
    }

    /// Reconstructs every active level and reassembles the pyramid.
    /// `fused[b]` holds the shared `N_t × D` fusion tokens.
    pub fn reconstruct_pyramid(
        &self,
        params: &ParamStore,
        pyramid: &FeaturePyramid,
        masks: &[LevelMask],
        fused: &[Array2<f64>],
    ) -> Result<FeaturePyramid> {
        if masks.len() != pyramid.num_levels() || pyramid.num_levels() != self.num_levels() {
            return Err(Error::shape(format!(
                "{} masks, {} levels, FRM built for {}",
                masks.len(),
                pyramid.num_levels(),
                self.num_levels()
            )));
        }
        let mut levels = Vec::with_capacity(self.num_levels());
        for (l, (features, mask)) in pyramid.levels.iter().zip(masks).enumerate() {
            if !self.is_active(l) || mask.occluded_count() == 0 {
                levels.push(features.clone());
                continue;
            }
            let z_vt = fused
                .iter()
                .map(|f| self.project_semantic(params, l, f))
                .collect::<Result<Vec<_>>>()?;
            let rec = self.reconstruct_level(params, l, features, mask, &z_vt)?;
            levels.push(reassemble(features, mask, &rec)?);
        }
        FeaturePyramid::new(levels)
    }

    pub fn project_semantic(&self, params: &ParamStore, level: usize, fused: &Array2<f64>) -> Result<Array2<f64>> {
        if fused.nrows() == 0 {
            return Err(Error::MissingSemanticGuidance);
        }
        let w = params.get(&format!("frm.l{level}.sem_proj.w"))?;
        let b = params.get(&format!("frm.l{level}.sem_proj.b"))?;
        if fused.ncols() != w.nrows() {
            return Err(Error::shape(format!("fusion width {} vs projection {}", fused.ncols(), w.nrows())));
        }
        Ok(fused.dot(w) + b)
    }

    fn check_level(&self, level: usize, c: usize, h: usize, w: usize, mask: &LevelMask) -> Result<()> {
        if level >= self.num_levels() {
            return Err(Error::shape(format!("level {level} does not exist")));
        }
        if c != self.cfg.channels[level] || (h, w) != self.level_dims[level] {
            return Err(Error::shape(format!(
                "level {level} is {c}x{h}x{w}, FRM expects {}x{}x{}",
                self.cfg.channels[level], self.level_dims[level].0, self.level_dims[level].1
            )));
        }
        if mask.dims() != (h, w) {
            return Err(Error::shape(format!("mask {:?} vs level {:?}", mask.dims(), (h, w))));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (Frm, ParamStore) {
        let cfg = FrmConfig { channels: vec![8, 8], fusion_dim: 6, heads: 2, active_levels: vec![0, 1], ..Default::default() };
        let frm = Frm::new(cfg, vec![(4, 4), (2, 2)]).unwrap();
        let params = frm.init_params(&mut ChaCha8Rng::seed_from_u64(3));
        (frm, params)
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn config_validation() {
        assert!(FrmConfig { heads: 3, ..Default::default() }.validate().is_err());
        assert!(FrmConfig { active_levels: vec![5], ..Default::default() }.validate().is_err());
        assert!(FrmConfig::default().validate().is_ok());
    }

    #[test]
    fn attention_single_key_identity_projections() {
        let q = array![[0.5, -1.0]];
        let kv = array![[2.0, 3.0]];
        let out = attend(&q, &kv, &kv, &AttentionParams::identity(2), 1).unwrap();
        assert_eq!(out, array![[2.5, 2.0]]);
    }

    #[test]
    fn attention_equal_scores_average_values() {
        // Zero query projection makes every score equal.
        let mut w = AttentionParams::identity(2);
        w.wq = Array2::zeros((2, 2));
        let q = array![[1.0, 1.0]];
        let keys = array![[1.0, 0.0], [0.0, 1.0]];
        let values = array![[2.0, 0.0], [0.0, 4.0]];
        let out = attend(&q, &keys, &values, &w, 2).unwrap();
        assert!((out[[0, 0]] - 2.0).abs() < 1e-15 && (out[[0, 1]] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn attention_rejects_empty_keys() {
        let q = array![[1.0, 1.0]];
        let empty = Array2::zeros((0, 2));
        assert!(attend(&q, &empty, &empty, &AttentionParams::identity(2), 1).is_err());
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = AttentionParams {
            wq: random(&mut rng, 8, 8),
            wk: random(&mut rng, 8, 8),
            wv: random(&mut rng, 8, 8),
            wo: random(&mut rng, 8, 8),
            bq: random(&mut rng, 1, 8),
            bk: random(&mut rng, 1, 8),
            bv: random(&mut rng, 1, 8),
            bo: random(&mut rng, 1, 8),
        };
        for p in attention_probabilities(&random(&mut rng, 5, 8), &random(&mut rng, 7, 8), &w, 4) {
            for row in p.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn queries_are_mask_embedding_plus_position() {
        let (mut frm, params) = tiny();
        let mu = params.get("frm.l0.mask_embed").unwrap().clone();
        let q = frm.init_queries(&params, 0, &[5]).unwrap();
        let expected = &mu.row(0) + &frm.positional_table(0).row(5);
        assert_eq!(q.row(0), expected);

        frm.set_positional_table(0, Array2::zeros((16, 8))).unwrap();
        let q = frm.init_queries(&params, 0, &[1, 7, 9]).unwrap();
        for row in q.rows() {
            assert_eq!(row, mu.row(0));
        }
        assert_eq!(frm.init_queries(&params, 0, &[]).unwrap().nrows(), 0);
    }

    #[test]
    fn pure_residual_path_returns_initial_queries() {
        let (frm, mut params) = tiny();
        for (name, v) in params.iter_mut() {
            if name.ends_with(".wo") || name.ends_with(".bo") || name.contains(".mlp.") {
                v.fill(0.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let features = Array4::from_shape_fn((1, 8, 4, 4), |_| rng.gen_range(-1.0..1.0));
        let grid = Array2::from_shape_fn((4, 4), |(y, x)| y < 2 && x < 3);
        let mask = LevelMask::from_grids(&[grid]).unwrap();
        let z_vt = vec![random(&mut rng, 3, 8)];
        let rec = frm.reconstruct_level(&params, 0, &features, &mask, &z_vt).unwrap();
        let q0 = frm.init_queries(&params, 0, &mask.occluded_indices(0)).unwrap();
        assert_eq!(rec[0], q0);
    }

    #[test]
    fn empty_semantic_guidance_is_an_error() {
        let (frm, params) = tiny();
        let features = Array4::zeros((1, 8, 4, 4));
        let mask = LevelMask::from_grids(&[Array2::from_elem((4, 4), true)]).unwrap();
        let err = frm.reconstruct_level(&params, 0, &features, &mask, &[Array2::zeros((0, 8))]).unwrap_err();
        assert_eq!(err.to_string(), "semantic guidance required");
    }

    #[test]
    fn fully_occluded_level_skips_visible_attention() {
        let (frm, params) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let features = Array4::from_shape_fn((1, 8, 4, 4), |_| rng.gen_range(-1.0..1.0));
        let mask = LevelMask::from_grids(&[Array2::from_elem((4, 4), true)]).unwrap();
        let rec = frm.reconstruct_level(&params, 0, &features, &mask, &[random(&mut rng, 2, 8)]).unwrap();
        assert_eq!(rec[0].dim(), (16, 8));
        assert!(rec[0].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn pyramid_passes_through_unmasked_and_inactive_levels() {
        let (mut frm, params) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l0 = Array4::from_shape_fn((1, 8, 4, 4), |_| rng.gen_range(-1.0..1.0));
        let l1 = Array4::from_shape_fn((1, 8, 2, 2), |_| rng.gen_range(-1.0..1.0));
        let pyramid = FeaturePyramid::new(vec![l0, l1]).unwrap();
        let fused = vec![random(&mut rng, 2, 6)];
        let zeros = [LevelMask::zeros(1, 4, 4), LevelMask::zeros(1, 2, 2)];
        assert_eq!(frm.reconstruct_pyramid(&params, &pyramid, &zeros, &fused).unwrap(), pyramid);

        let masks = [
            LevelMask::from_grids(&[Array2::from_shape_fn((4, 4), |(y, _)| y == 0)]).unwrap(),
            LevelMask::from_grids(&[array![[true, false], [false, false]]]).unwrap(),
        ];
        frm.cfg.active_levels = vec![0];
        let out = frm.reconstruct_pyramid(&params, &pyramid, &masks, &fused).unwrap();
        assert_ne!(out.levels[0], pyramid.levels[0]);
        assert_eq!(out.levels[1], pyramid.levels[1]);
        assert_eq!(out.levels[0].slice(ndarray::s![.., .., 1.., ..]), pyramid.levels[0].slice(ndarray::s![.., .., 1.., ..]));
    }
}
