//! Multi-level feature maps and the visible/occluded token split.
//!
//! Level `ℓ` is stored `B × C_ℓ × H_ℓ × W_ℓ`. Tokens are the channel vectors
//! at each spatial position, enumerated in row-major order (`y · W + x`);
//! the same order is used by [`separate_tokens`] and [`reassemble`].

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, Array4, Axis};

use crate::error::{Error, Result};
use crate::occlusion::OcclusionMask;

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Array4<f64>>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Array4<f64>>) -> Result<Self> {
        let Some(first) = levels.first() else {
            return Err(Error::shape("pyramid needs at least one level"));
        };
        let batch = first.dim().0;
        for (l, pair) in levels.windows(2).enumerate() {
            let (_, _, h0, w0) = pair[0].dim();
            let (b1, _, h1, w1) = pair[1].dim();
            if b1 != batch {
                return Err(Error::shape(format!("level {} has batch {b1}, expected {batch}", l + 1)));
            }
            if h1 >= h0 || w1 >= w0 {
                return Err(Error::shape(format!(
                    "level {} is {h1}x{w1}, not smaller than {h0}x{w0}",
                    l + 1
                )));
            }
        }
        Ok(Self { levels })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn batch(&self) -> usize {
        self.levels[0].dim().0
    }

    /// `(C, H, W)` of a level.
    pub fn level_dims(&self, level: usize) -> (usize, usize, usize) {
        let (_, c, h, w) = self.levels[level].dim();
        (c, h, w)
    }

    /// Token matrix `(H·W) × C` of batch element `b`.
    pub fn tokens(&self, level: usize, b: usize) -> Array2<f64> {
        level_tokens(&self.levels[level], b)
    }

    /// Writes the binary dump: per level a header of five little-endian
    /// `i32` (`ℓ, B, C, H, W`) followed by the values as row-major `f32`.
    pub fn write_dump<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (l, level) in self.levels.iter().enumerate() {
            let (b, c, h, w) = level.dim();
            for v in [l, b, c, h, w] {
                out.write_all(&(v as i32).to_le_bytes())?;
            }
            for &v in level.iter() {
                out.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_dump<R: Read>(mut input: R) -> std::io::Result<Self> {
        let mut levels = Vec::new();
        let mut header = [0u8; 20];
        loop {
            match input.read_exact(&mut header) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof && !levels.is_empty() => break,
                Err(e) => return Err(e),
            }
            let field = |k: usize| i32::from_le_bytes(header[4 * k..4 * k + 4].try_into().unwrap());
            let invalid = |msg: String| std::io::Error::new(std::io::ErrorKind::InvalidData, msg);
            if field(0) as usize != levels.len() {
                return Err(invalid(format!("level index {} out of order", field(0))));
            }
            let dims: Vec<usize> = (1..5)
                .map(|k| usize::try_from(field(k)).map_err(|_| invalid(format!("negative dimension {}", field(k)))))
                .collect::<std::io::Result<_>>()?;
            let count = dims.iter().product::<usize>();
            let mut bytes = vec![0u8; count * 4];
            input.read_exact(&mut bytes)?;
            let values: Vec<f64> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let arr = Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), values)
                .map_err(|e| invalid(e.to_string()))?;
            levels.push(arr);
        }
        FeaturePyramid::new(levels).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
    }

    pub fn save_dump(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_dump(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load_dump(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_dump(std::io::BufReader::new(file)).map_err(|e| Error::io(path, e))
    }
}

pub fn level_tokens(level: &Array4<f64>, b: usize) -> Array2<f64> {
    let (_, c, h, w) = level.dim();
    let chw = level.index_axis(Axis(0), b);
    let mut out = Array2::zeros((h * w, c));
    for ((ch, y, x), &v) in chw.indexed_iter() {
        out[[y * w + x, ch]] = v;
    }
    out
}

/// Inverse of [`level_tokens`] into `(C, H, W)`.
pub fn tokens_to_map(tokens: &Array2<f64>, h: usize, w: usize) -> Array3<f64> {
    let c = tokens.ncols();
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| tokens[[y * w + x, ch]])
}

/// Binary per-level occlusion, `B × H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelMask {
    pub mask: Array3<bool>,
}

impl LevelMask {
    pub fn zeros(batch: usize, h: usize, w: usize) -> Self {
        Self { mask: Array3::from_elem((batch, h, w), false) }
    }

    pub fn from_grids(grids: &[Array2<bool>]) -> Result<Self> {
        let Some(first) = grids.first() else {
            return Err(Error::shape("level mask needs at least one batch element"));
        };
        let (h, w) = first.dim();
        let mut mask = Array3::from_elem((grids.len(), h, w), false);
        for (b, g) in grids.iter().enumerate() {
            if g.dim() != (h, w) {
                return Err(Error::shape(format!("batch element {b} mask is {:?}, expected {:?}", g.dim(), (h, w))));
            }
            mask.index_axis_mut(Axis(0), b).assign(g);
        }
        Ok(Self { mask })
    }

    /// Downsamples one full-resolution mask per batch element.
    pub fn from_masks(masks: &[&OcclusionMask], dims: (usize, usize)) -> Result<Self> {
        let grids: Vec<_> = masks.iter().map(|m| downsample_mask(m, dims)).collect();
        Self::from_grids(&grids)
    }

    pub fn batch(&self) -> usize {
        self.mask.dim().0
    }

    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.mask.dim();
        (h, w)
    }

    /// Row-major occluded positions of batch element `b`.
    pub fn occluded_indices(&self, b: usize) -> Vec<usize> {
        let (_, _, w) = self.mask.dim();
        self.mask
            .index_axis(Axis(0), b)
            .indexed_iter()
            .filter(|(_, &m)| m)
            .map(|((y, x), _)| y * w + x)
            .collect()
    }

    pub fn visible_indices(&self, b: usize) -> Vec<usize> {
        let (_, _, w) = self.mask.dim();
        self.mask
            .index_axis(Axis(0), b)
            .indexed_iter()
            .filter(|(_, &m)| !m)
            .map(|((y, x), _)| y * w + x)
            .collect()
    }

    pub fn occluded_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Area-pools the full-resolution mask onto an `h × w` grid and marks cells
/// whose covered-pixel mean is at least 0.5.
pub fn downsample_mask(mask: &OcclusionMask, dims: (usize, usize)) -> Array2<bool> {
    downsample_mask_with_threshold(&mask.mask, dims, 0.5)
}

pub fn downsample_mask_with_threshold(mask: &Array2<bool>, (h, w): (usize, usize), threshold: f64) -> Array2<bool> {
    let (full_h, full_w) = mask.dim();
    let sy = full_h as f64 / h as f64;
    let sx = full_w as f64 / w as f64;
    let overlap = |p: usize, lo: f64, hi: f64| ((p + 1) as f64).min(hi) - (p as f64).max(lo);
    Array2::from_shape_fn((h, w), |(i, j)| {
        let (y0, y1) = (i as f64 * sy, (i + 1) as f64 * sy);
        let (x0, x1) = (j as f64 * sx, (j + 1) as f64 * sx);
        let mut covered = 0.0;
        for py in (y0.floor() as usize)..(y1.ceil() as usize).min(full_h) {
            let wy = overlap(py, y0, y1);
            if wy <= 0.0 {
                continue;
            }
            for px in (x0.floor() as usize)..(x1.ceil() as usize).min(full_w) {
                if mask[[py, px]] {
                    covered += wy * overlap(px, x0, x1).max(0.0);
                }
            }
        }
        covered / ((y1 - y0) * (x1 - x0)) >= threshold - 1e-12
    })
}

/// Visible tokens and occluded positions of one level.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSplit {
    /// Per batch element, `N_v × C`.
    pub visible_tokens: Vec<Array2<f64>>,
    pub visible_indices: Vec<Vec<usize>>,
    pub occluded_indices: Vec<Vec<usize>>,
}

impl TokenSplit {
    pub fn n_visible(&self, b: usize) -> usize {
        self.visible_indices[b].len()
    }

    pub fn n_occluded(&self, b: usize) -> usize {
        self.occluded_indices[b].len()
    }
}

fn check_mask(level: &Array4<f64>, mask: &LevelMask) -> Result<()> {
    let (b, _, h, w) = level.dim();
    if mask.mask.dim() != (b, h, w) {
        return Err(Error::shape(format!(
            "level is {:?} but mask is {:?}",
            (b, h, w),
            mask.mask.dim()
        )));
    }
    Ok(())
}

pub fn separate_tokens(level: &Array4<f64>, mask: &LevelMask) -> Result<TokenSplit> {
    check_mask(level, mask)?;
    let batch = level.dim().0;
    let mut split = TokenSplit { visible_tokens: vec![], visible_indices: vec![], occluded_indices: vec![] };
    for b in 0..batch {
        let tokens = level_tokens(level, b);
        let vis = mask.visible_indices(b);
        split.visible_tokens.push(tokens.select(Axis(0), &vis));
        split.visible_indices.push(vis);
        split.occluded_indices.push(mask.occluded_indices(b));
    }
    Ok(split)
}

/// Feature vectors at occluded positions, per batch element (`N_o × C`).
pub fn occluded_tokens(level: &Array4<f64>, mask: &LevelMask) -> Result<Vec<Array2<f64>>> {
    check_mask(level, mask)?;
    Ok((0..level.dim().0)
        .map(|b| level_tokens(level, b).select(Axis(0), &mask.occluded_indices(b)))
        .collect())
}

/// Writes `reconstructed[b]` (row `k` → `k`-th occluded position) into a
/// copy of `level`; unmasked positions are left untouched.
pub fn reassemble(level: &Array4<f64>, mask: &LevelMask, reconstructed: &[Array2<f64>]) -> Result<Array4<f64>> {
    check_mask(level, mask)?;
    let (batch, c, _, w) = level.dim();
    if reconstructed.len() != batch {
        return Err(Error::shape(format!("{} reconstructed sets for batch {batch}", reconstructed.len())));
    }
    let mut out = level.clone();
    for (b, rec) in reconstructed.iter().enumerate() {
        let occ = mask.occluded_indices(b);
        if rec.dim() != (occ.len(), c) {
            return Err(Error::shape(format!(
                "batch element {b}: {} reconstructed tokens of width {} for {} occluded positions of width {c}",
                rec.nrows(),
                rec.ncols(),
                occ.len()
            )));
        }
        for (k, &idx) in occ.iter().enumerate() {
            let (y, x) = (idx / w, idx % w);
            for ch in 0..c {
                out[[b, ch, y, x]] = rec[[k, ch]];
            }
        }
    }
    Ok(out)
}
