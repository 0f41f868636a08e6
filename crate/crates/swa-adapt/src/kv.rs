//! Per-layer append-only key/value store with chunked-prefill appends and
//! footprint accounting. No eviction: length never decreases within a
//! sequence, and the footprint report quantifies what an evicting cache
//! would save instead.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{AttentionPolicy, Window};
use crate::tensor::{MatView, Scalar, Tensor2D};

#[derive(Debug, Clone)]
struct LayerKv<T> {
    k: Vec<T>,
    v: Vec<T>,
    len: usize,
}

/// Append-only K/V buffers for every layer of one sequence, preallocated to a
/// fixed row capacity.
#[derive(Debug, Clone)]
pub struct KvCache<T> {
    layers: Vec<LayerKv<T>>,
    capacity_rows: usize,
    kv_dim: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(num_layers: usize, capacity_rows: usize, kv_dim: usize) -> Self {
        let layers = (0..num_layers)
            .map(|_| LayerKv {
                k: Vec::with_capacity(capacity_rows * kv_dim),
                v: Vec::with_capacity(capacity_rows * kv_dim),
                len: 0,
            })
            .collect();
        Self { layers, capacity_rows, kv_dim }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn capacity_rows(&self) -> usize {
        self.capacity_rows
    }

    pub fn kv_dim(&self) -> usize {
        self.kv_dim
    }

    pub fn len(&self, layer: usize) -> usize {
        self.layers[layer].len
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(|l| l.len == 0)
    }

    pub fn bytes_per_entry() -> usize {
        std::mem::size_of::<T>()
    }

    /// Append `k_rows`/`v_rows` to one layer; returns the layer's new length.
    pub fn append(
        &mut self,
        layer: usize,
        k_rows: &Tensor2D<T>,
        v_rows: &Tensor2D<T>,
    ) -> Result<usize> {
        if layer >= self.layers.len() {
            return Err(Error::Bounds { detail: format!("layer {layer}") });
        }
        if k_rows.cols() != self.kv_dim || v_rows.cols() != self.kv_dim {
            return Err(Error::Dimension {
                op: "KvCache::append",
                detail: format!(
                    "kv_dim {} vs k cols {} / v cols {}",
                    self.kv_dim,
                    k_rows.cols(),
                    v_rows.cols()
                ),
            });
        }
        if k_rows.rows() != v_rows.rows() {
            return Err(Error::Dimension {
                op: "KvCache::append",
                detail: format!("k rows {} != v rows {}", k_rows.rows(), v_rows.rows()),
            });
        }
        let slot = &mut self.layers[layer];
        let new_len = slot.len + k_rows.rows();
        if new_len > self.capacity_rows {
            return Err(Error::Capacity {
                detail: format!(
                    "layer {layer}: {new_len} rows exceeds capacity {}",
                    self.capacity_rows
                ),
            });
        }
        slot.k.extend_from_slice(k_rows.data());
        slot.v.extend_from_slice(v_rows.data());
        slot.len = new_len;
        Ok(new_len)
    }

    pub fn keys(&self, layer: usize) -> MatView<'_, T> {
        let l = &self.layers[layer];
        MatView { rows: l.len, cols: self.kv_dim, data: &l.k }
    }

    pub fn values(&self, layer: usize) -> MatView<'_, T> {
        let l = &self.layers[layer];
        MatView { rows: l.len, cols: self.kv_dim, data: &l.v }
    }

    /// Reset to empty for a new sequence, keeping the allocations.
    pub fn clear(&mut self) {
        for l in &mut self.layers {
            l.k.clear();
            l.v.clear();
            l.len = 0;
        }
    }

    /// Stored bytes versus what a hypothetical evicting cache would need
    /// under `policy`: per SWA layer `window + keep_first` rows (the full
    /// length when fa_decode requires retention), per FA layer the full
    /// length.
    pub fn footprint_report(&self, policy: &AttentionPolicy) -> FootprintReport {
        let row_bytes = (self.kv_dim * Self::bytes_per_entry() * 2) as u64; // K and V
        let mut per_layer = Vec::with_capacity(self.layers.len());
        let mut actual = 0u64;
        let mut minimal = 0u64;
        for (idx, l) in self.layers.iter().enumerate() {
            let len = l.len as u64;
            let min_rows = match policy.window {
                Window::Unbounded => len,
                Window::Bounded(w) => {
                    if policy.fa_layers.contains(&idx) || policy.fa_decode {
                        len
                    } else {
                        len.min((w + policy.keep_first) as u64)
                    }
                }
            };
            let layer_actual = len * row_bytes;
            let layer_min = min_rows * row_bytes;
            actual += layer_actual;
            minimal += layer_min;
            per_layer.push(LayerFootprint {
                layer: idx,
                actual_bytes: layer_actual,
                swa_minimal_bytes: layer_min,
            });
        }
        FootprintReport { actual_bytes: actual, swa_minimal_bytes: minimal, per_layer }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFootprint {
    pub layer: usize,
    pub actual_bytes: u64,
    pub swa_minimal_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FootprintReport {
    pub actual_bytes: u64,
    pub swa_minimal_bytes: u64,
    pub per_layer: Vec<LayerFootprint>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::AttentionPolicy;

    fn rows(n: usize, dim: usize, base: f32) -> Tensor2D<f32> {
        Tensor2D::from_fn(n, dim, |r, c| base + (r * dim + c) as f32)
    }

    #[test]
    fn append_to_empty() {
        let mut cache = KvCache::<f32>::new(2, 16, 4);
        let len = cache.append(0, &rows(4, 4, 0.0), &rows(4, 4, 100.0)).unwrap();
        assert_eq!(len, 4);
        assert_eq!(cache.len(0), 4);
        assert_eq!(cache.len(1), 0);
    }

    #[test]
    fn chunked_appends_equal_monolithic() {
        let k = rows(8, 4, 0.0);
        let v = rows(8, 4, 50.0);

        let mut mono = KvCache::<f32>::new(1, 16, 4);
        mono.append(0, &k, &v).unwrap();

        let mut chunked = KvCache::<f32>::new(1, 16, 4);
        let k3 = Tensor2D::from_vec(3, 4, k.data()[..12].to_vec()).unwrap();
        let v3 = Tensor2D::from_vec(3, 4, v.data()[..12].to_vec()).unwrap();
        let k5 = Tensor2D::from_vec(5, 4, k.data()[12..].to_vec()).unwrap();
        let v5 = Tensor2D::from_vec(5, 4, v.data()[12..].to_vec()).unwrap();
        assert_eq!(chunked.append(0, &k3, &v3).unwrap(), 3);
        assert_eq!(chunked.append(0, &k5, &v5).unwrap(), 8);

        assert_eq!(mono.keys(0).data, chunked.keys(0).data);
        assert_eq!(mono.values(0).data, chunked.values(0).data);
    }

    #[test]
    fn per_layer_lengths_stay_independent() {
        let mut cache = KvCache::<f32>::new(3, 16, 4);
        cache.append(1, &rows(2, 4, 0.0), &rows(2, 4, 0.0)).unwrap();
        cache.append(0, &rows(5, 4, 0.0), &rows(5, 4, 0.0)).unwrap();
        assert_eq!(cache.len(0), 5);
        assert_eq!(cache.len(1), 2);
        assert_eq!(cache.len(2), 0);
        cache.append(2, &rows(5, 4, 0.0), &rows(5, 4, 0.0)).unwrap();
        cache.append(1, &rows(3, 4, 0.0), &rows(3, 4, 0.0)).unwrap();
        assert_eq!(cache.len(1), 5);
        assert_eq!(cache.len(2), 5);
    }

    #[test]
    fn capacity_error() {
        let mut cache = KvCache::<f32>::new(1, 4, 4);
        cache.append(0, &rows(3, 4, 0.0), &rows(3, 4, 0.0)).unwrap();
        let r = cache.append(0, &rows(2, 4, 0.0), &rows(2, 4, 0.0));
        assert!(matches!(r, Err(Error::Capacity { .. })));
        // Failed append must not change state.
        assert_eq!(cache.len(0), 3);
    }

    #[test]
    fn footprint_pure_swa_bounded_by_window() {
        let mut cache = KvCache::<f32>::new(4, 1024, 8);
        for layer in 0..4 {
            cache.append(layer, &rows(1024, 8, 0.0), &rows(1024, 8, 0.0)).unwrap();
        }
        let policy = AttentionPolicy::pure_swa(64);
        let report = cache.footprint_report(&policy);
        let row_bytes = (8 * 4 * 2) as u64;
        assert_eq!(report.actual_bytes, 4 * 1024 * row_bytes);
        assert_eq!(report.swa_minimal_bytes, 4 * 64 * row_bytes);
        for lf in &report.per_layer {
            assert_eq!(lf.swa_minimal_bytes, 64 * row_bytes);
        }
    }

    #[test]
    fn footprint_fa_decode_requires_full_retention() {
        let mut cache = KvCache::<f32>::new(2, 256, 8);
        for layer in 0..2 {
            cache.append(layer, &rows(200, 8, 0.0), &rows(200, 8, 0.0)).unwrap();
        }
        let policy = AttentionPolicy::pure_swa(64).with_fa_decode(true);
        let report = cache.footprint_report(&policy);
        assert_eq!(report.swa_minimal_bytes, report.actual_bytes);
    }

    #[test]
    fn footprint_half_fa_layers_ratio() {
        let n = 1024usize;
        let w = 64usize;
        let mut cache = KvCache::<f32>::new(2, n, 8);
        for layer in 0..2 {
            cache.append(layer, &rows(n, 8, 0.0), &rows(n, 8, 0.0)).unwrap();
        }
        let policy = AttentionPolicy::pure_swa(w).with_fa_layers([0]);
        let report = cache.footprint_report(&policy);
        // FA layer keeps everything, SWA layer keeps only the window:
        // average rows per layer = (N + W) / 2.
        let row_bytes = (8 * 4 * 2) as u64;
        assert_eq!(report.swa_minimal_bytes, ((n + w) as u64) * row_bytes);
        assert_eq!(report.actual_bytes, (2 * n) as u64 * row_bytes);
    }

    #[test]
    fn footprint_minimal_never_exceeds_actual() {
        let lens = [0usize, 10, 64, 67, 68, 200];
        for &len in &lens {
            let mut cache = KvCache::<f32>::new(2, 256, 4);
            for layer in 0..2 {
                cache.append(layer, &rows(len, 4, 0.0), &rows(len, 4, 0.0)).unwrap();
            }
            for policy in [
                AttentionPolicy::pure_swa(64),
                AttentionPolicy::pure_swa(64).with_keep_first(4),
                AttentionPolicy::pure_swa(64).with_fa_decode(true),
                AttentionPolicy::pure_swa(64).with_fa_layers([0, 1]),
                AttentionPolicy::full(),
            ] {
                let report = cache.footprint_report(&policy);
                assert!(report.swa_minimal_bytes <= report.actual_bytes);
                let all_fa = policy.fa_layers.len() == 2;
                let within = len <= 64 + policy.keep_first;
                let expect_equal = policy.fa_decode
                    || all_fa
                    || within
                    || policy.window == Window::Unbounded;
                assert_eq!(
                    report.swa_minimal_bytes == report.actual_bytes,
                    expect_equal,
                    "len={len} policy={policy:?}"
                );
            }
        }
    }

    #[test]
    fn clear_resets_for_new_sequence() {
        let mut cache = KvCache::<f32>::new(1, 8, 4);
        cache.append(0, &rows(8, 4, 0.0), &rows(8, 4, 0.0)).unwrap();
        cache.clear();
        assert!(cache.is_empty());
        assert_eq!(cache.append(0, &rows(2, 4, 0.0), &rows(2, 4, 0.0)).unwrap(), 2);
    }
}
