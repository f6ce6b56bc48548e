//! Per-block key/value store for executed history actions.
//!
//! Entries are the keys and values each block computes for history tokens.
//! They do not depend on the denoising timestep, so one extraction serves
//! every step of the reverse chain and, once frozen, every later AR step
//! until the token slides out of the window.

use crate::error::{shape_err, CdpError, Result};
use crate::model::{BlockKv, Model};
use crate::tensor::{Real, Tensor};

/// Keys and values per block, stored row-major as `[l, d_model]` with head
/// `h` in columns `h*d_head..(h+1)*d_head`.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
    chunk: usize,
    capacity: usize,
    d_model: usize,
}

impl<T: Real> KvCache<T> {
    pub fn new(n_blocks: usize, capacity: usize, chunk: usize, d_model: usize) -> Self {
        Self {
            keys: vec![Vec::with_capacity(capacity * d_model); n_blocks],
            values: vec![Vec::with_capacity(capacity * d_model); n_blocks],
            len: 0,
            chunk,
            capacity,
            d_model,
        }
    }

    pub fn for_model(model: &Model<T>) -> Self {
        let c = model.config();
        Self::new(c.n_blocks, c.geom.history_len, c.geom.chunk, c.d_model)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn chunk(&self) -> usize {
        self.chunk
    }

    pub fn n_blocks(&self) -> usize {
        self.keys.len()
    }

    /// Total scalars held: `P · 2 · l · d_model`.
    pub fn scalar_count(&self) -> usize {
        self.keys.iter().chain(&self.values).map(Vec::len).sum()
    }

    pub fn clear(&mut self) {
        for v in self.keys.iter_mut().chain(self.values.iter_mut()) {
            v.clear();
        }
        self.len = 0;
    }

    /// The newest `n` entries of every block.
    pub fn trailing(&self, n: usize) -> Result<Vec<BlockKv<T>>> {
        if n > self.len {
            return Err(CdpError::Index {
                index: n,
                len: self.len,
            });
        }
        let d = self.d_model;
        let start = (self.len - n) * d;
        Ok(self
            .keys
            .iter()
            .zip(&self.values)
            .map(|(k, v)| BlockKv {
                keys: Tensor::new(vec![n, d], k[start..].to_vec()).expect("cache rows"),
                values: Tensor::new(vec![n, d], v[start..].to_vec()).expect("cache rows"),
            })
            .collect())
    }

    pub fn block(&self, p: usize) -> Result<BlockKv<T>> {
        if p >= self.n_blocks() {
            return Err(CdpError::Index {
                index: p,
                len: self.n_blocks(),
            });
        }
        let shape = vec![self.len, self.d_model];
        Ok(BlockKv {
            keys: Tensor::new(shape.clone(), self.keys[p].clone())?,
            values: Tensor::new(shape, self.values[p].clone())?,
        })
    }

    fn check_rows(&self, kv: &[BlockKv<T>]) -> Result<usize> {
        if kv.len() != self.n_blocks() {
            return Err(CdpError::Contract(format!(
                "expected {} blocks of keys/values, got {}",
                self.n_blocks(),
                kv.len()
            )));
        }
        let rows = kv.first().map_or(0, |b| b.keys.rows());
        for b in kv {
            if b.keys.shape() != [rows, self.d_model] || b.values.shape() != [rows, self.d_model] {
                return Err(shape_err("kv cache rows", b.keys.shape(), &[rows, self.d_model]));
            }
        }
        Ok(rows)
    }

    /// Append whole chunks without evicting; overflow is a contract error.
    pub fn append(&mut self, kv: &[BlockKv<T>]) -> Result<()> {
        let rows = self.check_rows(kv)?;
        if rows % self.chunk != 0 {
            return Err(CdpError::Contract(format!(
                "appending {rows} rows, not a multiple of chunk {}",
                self.chunk
            )));
        }
        if self.len + rows > self.capacity {
            return Err(CdpError::Contract(format!(
                "cache overflow: {} + {rows} > capacity {}",
                self.len, self.capacity
            )));
        }
        for (p, b) in kv.iter().enumerate() {
            self.keys[p].extend_from_slice(b.keys.data());
            self.values[p].extend_from_slice(b.values.data());
        }
        self.len += rows;
        Ok(())
    }

    /// Append exactly one chunk, first dropping the oldest chunk if full.
    pub fn evict_and_append(&mut self, kv: &[BlockKv<T>]) -> Result<()> {
        let rows = self.check_rows(kv)?;
        if rows != self.chunk {
            return Err(CdpError::Contract(format!(
                "chunk of {rows} rows, expected {}",
                self.chunk
            )));
        }
        if self.capacity == 0 {
            return Err(CdpError::Contract("cache has zero capacity".into()));
        }
        if self.len == self.capacity {
            let drop = self.chunk * self.d_model;
            for v in self.keys.iter_mut().chain(self.values.iter_mut()) {
                v.drain(..drop);
            }
            self.len -= self.chunk;
        }
        self.append(kv)
    }
}

/// Keys/values of the `L−l` uncached history tokens. They occupy window
/// positions `l..L`, where `l` cached entries are used as the prefix.
pub fn extract_uncached_kv<T: Real>(
    model: &Model<T>,
    cache: &KvCache<T>,
    uncached_history: &Tensor<T>,
    offset: usize,
    obs_tokens: &Tensor<T>,
) -> Result<Vec<BlockKv<T>>> {
    let g = model.config().geom;
    let u = uncached_history.numel() / model.config().action_dim;
    if u > g.history_len {
        return Err(CdpError::Contract(format!(
            "{u} uncached tokens exceed history length {}",
            g.history_len
        )));
    }
    let l = g.history_len - u;
    let prefix = if l > 0 { cache.trailing(l)? } else { Vec::new() };
    model.extract_history_kv(uncached_history, l, offset, obs_tokens, &prefix)
}

/// Extract the uncached chunks and commit them one chunk at a time.
pub fn extract_and_commit<T: Real>(
    model: &Model<T>,
    cache: &mut KvCache<T>,
    uncached_history: &Tensor<T>,
    offset: usize,
    obs_tokens: &Tensor<T>,
) -> Result<()> {
    let kv = extract_uncached_kv(model, cache, uncached_history, offset, obs_tokens)?;
    let c = cache.chunk();
    let rows = kv.first().map_or(0, |b| b.keys.rows());
    for start in (0..rows).step_by(c.max(1)) {
        let piece: Vec<BlockKv<T>> = kv
            .iter()
            .map(|b| -> Result<BlockKv<T>> {
                Ok(BlockKv {
                    keys: crate::tensor::slice_rows(&b.keys, start, c)?,
                    values: crate::tensor::slice_rows(&b.values, start, c)?,
                })
            })
            .collect::<Result<_>>()?;
        cache.evict_and_append(&piece)?;
    }
    Ok(())
}

/// History keys/values for the whole window: the newest `L−u` cached entries
/// followed by the `u` uncached ones. Rows must total `history_len`.
pub fn assemble_kv<T: Real>(
    cached: &[BlockKv<T>],
    uncached: &[BlockKv<T>],
    history_len: usize,
) -> Result<Vec<BlockKv<T>>> {
    if cached.len() != uncached.len() {
        return Err(CdpError::Contract("block counts differ".into()));
    }
    cached
        .iter()
        .zip(uncached)
        .map(|(c, u)| {
            if c.keys.rows() + u.keys.rows() != history_len {
                return Err(shape_err(
                    "assemble_kv",
                    &[c.keys.rows(), u.keys.rows()],
                    &[history_len],
                ));
            }
            Ok(BlockKv {
                keys: crate::tensor::concat_rows(&[&c.keys, &u.keys])?,
                values: crate::tensor::concat_rows(&[&c.values, &u.values])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(rows: usize, d: usize, tag: f64) -> Vec<BlockKv<f64>> {
        (0..2)
            .map(|p| BlockKv {
                keys: Tensor::from_fn(&[rows, d], |i| tag + (i / d) as f64 + 100.0 * p as f64),
                values: Tensor::from_fn(&[rows, d], |i| -tag - (i / d) as f64),
            })
            .collect()
    }

    #[test]
    fn empty_plus_chunk() {
        let mut c = KvCache::<f64>::new(2, 8, 2, 3);
        c.evict_and_append(&kv(2, 3, 0.0)).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.scalar_count(), 2 * 2 * 2 * 3);
    }

    #[test]
    fn full_cache_slides_one_chunk() {
        let mut c = KvCache::<f64>::new(2, 4, 2, 3);
        c.evict_and_append(&kv(2, 3, 10.0)).unwrap();
        c.evict_and_append(&kv(2, 3, 20.0)).unwrap();
        c.evict_and_append(&kv(2, 3, 30.0)).unwrap();
        assert_eq!(c.len(), 4);
        let b = c.block(0).unwrap();
        assert_eq!(b.keys.get2(0, 0), 20.0);
        assert_eq!(b.keys.get2(2, 0), 30.0);
        assert_eq!(c.trailing(2).unwrap()[1].keys.get2(0, 0), 130.0);
    }

    #[test]
    fn wrong_chunk_and_overflow_rejected() {
        let mut c = KvCache::<f64>::new(2, 4, 2, 3);
        assert!(matches!(c.evict_and_append(&kv(3, 3, 0.0)), Err(CdpError::Contract(_))));
        c.append(&kv(4, 3, 0.0)).unwrap();
        assert!(matches!(c.append(&kv(2, 3, 0.0)), Err(CdpError::Contract(_))));
    }

    #[test]
    fn assemble_respects_order_and_length() {
        let a = assemble_kv(&kv(2, 3, 1.0), &kv(2, 3, 5.0), 4).unwrap();
        assert_eq!(a[0].keys.get2(1, 0), 2.0);
        assert_eq!(a[0].keys.get2(2, 0), 5.0);
        assert!(assemble_kv(&kv(2, 3, 1.0), &kv(2, 3, 5.0), 6).is_err());
        let only_uncached = assemble_kv(&kv(0, 3, 0.0), &kv(4, 3, 7.0), 4).unwrap();
        assert_eq!(only_uncached[1].keys, kv(4, 3, 7.0)[1].keys);
    }
}
