//! Chunked causal visibility for the history + target token sequence.
//!
//! History tokens are split into chunks of `chunk` actions. A history token
//! sees exactly its own chunk. Target tokens form one large chunk that sees
//! every history token and every other target. Rows of the inference mask are
//! the rows of the training mask for the tokens that still need computing,
//! which is what lets cached keys and values be reused unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{CdpError, Result};
use crate::tensor::{Real, Tensor, MASK_NEG};

/// Length and chunk bookkeeping shared by training, caching and rollout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyGeometry {
    /// Number of history actions (L).
    pub history_len: usize,
    /// Number of denoised target actions (M).
    pub target_len: usize,
    /// Executed prefix of the targets per AR step.
    pub valid_len: usize,
    /// History chunk size (C).
    pub chunk: usize,
    /// Cached history length (l); only meaningful at inference.
    #[serde(default)]
    pub cached_len: usize,
}

impl PolicyGeometry {
    pub fn new(history_len: usize, target_len: usize, chunk: usize) -> Result<Self> {
        let g = Self {
            history_len,
            target_len,
            valid_len: chunk,
            chunk,
            cached_len: 0,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn with_cached(mut self, cached_len: usize) -> Result<Self> {
        self.cached_len = cached_len;
        self.validate()?;
        Ok(self)
    }

    pub fn total_len(&self) -> usize {
        self.history_len + self.target_len
    }

    pub fn num_history_chunks(&self) -> usize {
        self.history_len / self.chunk
    }

    pub fn redundant_len(&self) -> usize {
        self.target_len - self.valid_len
    }

    pub fn validate(&self) -> Result<()> {
        let geo = |m: String| Err(CdpError::Geometry(m));
        if self.chunk == 0 {
            return geo("chunk must be positive".into());
        }
        if self.target_len == 0 {
            return geo("target_len must be positive".into());
        }
        if self.history_len % self.chunk != 0 {
            return geo(format!(
                "chunk {} does not divide history_len {}",
                self.chunk, self.history_len
            ));
        }
        if self.valid_len > self.target_len {
            return geo(format!(
                "valid_len {} exceeds target_len {}",
                self.valid_len, self.target_len
            ));
        }
        if self.valid_len != self.chunk {
            return geo(format!(
                "valid_len {} must equal chunk {} (one chunk executed per AR step)",
                self.valid_len, self.chunk
            ));
        }
        if self.cached_len > self.history_len {
            return geo(format!(
                "cached_len {} exceeds history_len {}",
                self.cached_len, self.history_len
            ));
        }
        if self.cached_len % self.chunk != 0 {
            return geo(format!(
                "chunk {} does not divide cached_len {}",
                self.chunk, self.cached_len
            ));
        }
        Ok(())
    }
}

/// Boolean visibility matrix; converted to an additive mask at use.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    visible: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut visible = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                visible.push(f(i, j));
            }
        }
        Self { rows, cols, visible }
    }

    pub fn all_visible(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            visible: vec![true; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_visible(&self, r: usize, c: usize) -> bool {
        self.visible[r * self.cols + c]
    }

    pub fn row_has_visible(&self, r: usize) -> bool {
        self.visible[r * self.cols..(r + 1) * self.cols].iter().any(|v| *v)
    }

    pub fn visible_cols(&self, r: usize) -> Vec<usize> {
        (0..self.cols).filter(|&c| self.is_visible(r, c)).collect()
    }

    /// Rectangular sub-block.
    pub fn sub(&self, row_start: usize, n_rows: usize, col_start: usize, n_cols: usize) -> Result<Self> {
        if row_start + n_rows > self.rows || col_start + n_cols > self.cols {
            return Err(CdpError::Index {
                index: (row_start + n_rows).max(col_start + n_cols),
                len: self.rows.max(self.cols),
            });
        }
        Ok(Self::from_fn(n_rows, n_cols, |i, j| {
            self.is_visible(row_start + i, col_start + j)
        }))
    }

    /// Drop the first `n` rows.
    pub fn drop_rows(&self, n: usize) -> Result<Self> {
        self.sub(n, self.rows.saturating_sub(n), 0, self.cols)
    }

    /// Additive form: 0 where visible, [`MASK_NEG`] where blocked.
    pub fn additive<T: Real>(&self) -> Tensor<T> {
        let neg = T::lit(MASK_NEG);
        Tensor::new(
            vec![self.rows, self.cols],
            self.visible.iter().map(|&v| if v { T::zero() } else { neg }).collect(),
        )
        .expect("mask dims consistent")
    }

    /// Each row sees exactly the `tokens_per_group` columns of its group.
    pub fn grouped(row_groups: &[usize], n_groups: usize, tokens_per_group: usize) -> Self {
        Self::from_fn(row_groups.len(), n_groups * tokens_per_group, |i, j| {
            j / tokens_per_group == row_groups[i]
        })
    }
}

/// Visibility rule for global query position `i` and key position `j` in a
/// window of `history_len` history tokens followed by targets.
fn visible(i: usize, j: usize, history_len: usize, chunk: usize) -> bool {
    if i >= history_len {
        true
    } else {
        j < history_len && i / chunk == j / chunk
    }
}

/// Full `(L+M)×(L+M)` mask used during training.
pub fn build_training_mask(geom: &PolicyGeometry) -> Result<AttentionMask> {
    if geom.chunk == 0 || geom.history_len % geom.chunk != 0 {
        return Err(CdpError::Geometry(format!(
            "chunk {} does not divide history_len {}",
            geom.chunk, geom.history_len
        )));
    }
    let n = geom.total_len();
    Ok(AttentionMask::from_fn(n, n, |i, j| {
        visible(i, j, geom.history_len, geom.chunk)
    }))
}

/// `(L−l+M)×(L+M)` mask: rows are the uncached history tokens followed by
/// the targets, columns the full window.
pub fn build_inference_mask(geom: &PolicyGeometry) -> Result<AttentionMask> {
    if geom.chunk == 0 || geom.cached_len % geom.chunk != 0 {
        return Err(CdpError::Geometry(format!(
            "chunk {} does not divide cached_len {}",
            geom.chunk, geom.cached_len
        )));
    }
    if geom.history_len % geom.chunk != 0 {
        return Err(CdpError::Geometry(format!(
            "chunk {} does not divide history_len {}",
            geom.chunk, geom.history_len
        )));
    }
    if geom.cached_len > geom.history_len {
        return Err(CdpError::Geometry("cached_len exceeds history_len".into()));
    }
    let l = geom.cached_len;
    let n = geom.total_len();
    Ok(AttentionMask::from_fn(n - l, n, |r, j| {
        visible(l + r, j, geom.history_len, geom.chunk)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(l: usize, m: usize, c: usize) -> PolicyGeometry {
        PolicyGeometry::new(l, m, c).unwrap()
    }

    #[test]
    fn training_mask_small_case() {
        let m = build_training_mask(&geom(4, 3, 2)).unwrap();
        assert_eq!(m.visible_cols(0), vec![0, 1]);
        assert_eq!(m.visible_cols(2), vec![2, 3]);
        assert_eq!(m.visible_cols(4), (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn no_history_is_all_visible() {
        let m = build_training_mask(&geom(0, 2, 2)).unwrap();
        assert_eq!(m, AttentionMask::all_visible(2, 2));
    }

    #[test]
    fn inference_mask_partial_cache() {
        let g = geom(4, 2, 2).with_cached(2).unwrap();
        let m = build_inference_mask(&g).unwrap();
        assert_eq!((m.rows(), m.cols()), (4, 6));
        assert_eq!(m.visible_cols(0), vec![2, 3]);
        assert_eq!(m.visible_cols(2), (0..6).collect::<Vec<_>>());
        assert_eq!(m.visible_cols(3), (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn inference_mask_extremes() {
        let g = geom(8, 4, 4);
        assert_eq!(
            build_inference_mask(&g).unwrap(),
            build_training_mask(&g).unwrap()
        );
        let full = g.with_cached(8).unwrap();
        assert_eq!(
            build_inference_mask(&full).unwrap(),
            AttentionMask::all_visible(4, 12)
        );
    }

    #[test]
    fn geometry_rejects_bad_chunking() {
        assert!(matches!(PolicyGeometry::new(20, 12, 8), Err(CdpError::Geometry(_))));
        let mut g = geom(8, 4, 4);
        g.cached_len = 2;
        assert!(build_inference_mask(&g).is_err());
        g.cached_len = 0;
        g.history_len = 6;
        assert!(build_training_mask(&g).is_err());
    }

    #[test]
    fn grouped_mask_rows_see_only_their_group() {
        let m = AttentionMask::grouped(&[0, 1, 1], 2, 2);
        assert_eq!(m.visible_cols(0), vec![0, 1]);
        assert_eq!(m.visible_cols(2), vec![2, 3]);
    }
}
