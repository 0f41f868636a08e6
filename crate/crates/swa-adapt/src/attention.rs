//! Masked multi-head attention forward in two interchangeable forms: a dense
//! naive reference, and a blocked kernel with online softmax that skips tiles
//! containing no attendable pair.
//!
//! Both implement exclusion masking (disallowed entries never enter the
//! softmax) over the same [`MaskView`] predicate, so the blocked kernel can be
//! checked against the naive one to floating-point tolerance.

use crate::error::{Error, Result};
use crate::mask::MaskView;
use crate::tensor::{axpy, dot, MatView, Scalar, Tensor2D};

/// Queries plus cache views for one layer. `q` holds the newest `q_rows`
/// positions; keys/values cover the whole sequence so far.
#[derive(Debug, Clone, Copy)]
pub struct AttentionInputs<'a, T> {
    pub q: &'a Tensor2D<T>,
    pub keys: MatView<'a, T>,
    pub values: MatView<'a, T>,
    pub num_heads: usize,
    pub head_dim: usize,
    pub mask: MaskView<'a>,
    pub scale: T,
}

impl<'a, T: Scalar> AttentionInputs<'a, T> {
    pub fn new(
        q: &'a Tensor2D<T>,
        keys: MatView<'a, T>,
        values: MatView<'a, T>,
        num_heads: usize,
        head_dim: usize,
        mask: MaskView<'a>,
    ) -> Result<Self> {
        let dim = num_heads * head_dim;
        if q.cols() != dim || keys.cols != dim || values.cols != dim {
            return Err(Error::Dimension {
                op: "AttentionInputs",
                detail: format!(
                    "q cols {}, k cols {}, v cols {} vs heads*dim {}",
                    q.cols(),
                    keys.cols,
                    values.cols,
                    dim
                ),
            });
        }
        if keys.rows != values.rows || keys.rows != mask.total_len() {
            return Err(Error::Dimension {
                op: "AttentionInputs",
                detail: format!(
                    "k rows {}, v rows {}, mask total_len {}",
                    keys.rows,
                    values.rows,
                    mask.total_len()
                ),
            });
        }
        if q.rows() > keys.rows {
            return Err(Error::Dimension {
                op: "AttentionInputs",
                detail: format!("{} query rows > {} total rows", q.rows(), keys.rows),
            });
        }
        let scale = T::of_f64(1.0 / (head_dim as f64).sqrt());
        Ok(Self { q, keys, values, num_heads, head_dim, mask, scale })
    }

    /// Absolute position of query row 0 (queries are the trailing positions).
    pub fn q_start(&self) -> usize {
        self.keys.rows - self.q.rows()
    }
}

/// Attention work counters. `score_flops` and `weighted_sum_flops` count 2
/// FLOPs per multiply-accumulate; tile counts are mask-level (shared across
/// heads).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopLedger {
    pub score_flops: u64,
    pub weighted_sum_flops: u64,
    pub skipped_tile_count: u64,
    pub evaluated_tile_count: u64,
}

impl FlopLedger {
    pub fn merge(&mut self, other: &FlopLedger) {
        self.score_flops += other.score_flops;
        self.weighted_sum_flops += other.weighted_sum_flops;
        self.skipped_tile_count += other.skipped_tile_count;
        self.evaluated_tile_count += other.evaluated_tile_count;
    }

    /// Score entries evaluated, assuming every entry cost `2 * head_dim`
    /// FLOPs across `num_heads` heads.
    pub fn evaluated_score_entries(&self, num_heads: usize, head_dim: usize) -> u64 {
        self.score_flops / (2 * num_heads as u64 * head_dim as u64)
    }
}

/// Dense reference attention: per head, scaled scores, exclusion-masked row
/// softmax, weighted value sum; heads concatenated.
pub fn attend_naive<T: Scalar>(inputs: &AttentionInputs<'_, T>) -> Result<Tensor2D<T>> {
    let mut out = Tensor2D::zeros(inputs.q.rows(), inputs.num_heads * inputs.head_dim);
    for head in 0..inputs.num_heads {
        let head_out = attend_one_head_naive(inputs, head)?;
        let lo = head * inputs.head_dim;
        for r in 0..out.rows() {
            out.row_mut(r)[lo..lo + inputs.head_dim].copy_from_slice(head_out.row(r));
        }
    }
    Ok(out)
}

/// One head of the naive path; safe to run for distinct heads in parallel
/// (inputs are read-only and outputs are disjoint).
pub fn attend_one_head_naive<T: Scalar>(
    inputs: &AttentionInputs<'_, T>,
    head: usize,
) -> Result<Tensor2D<T>> {
    let d = inputs.head_dim;
    let lo = head * d;
    let q_rows = inputs.q.rows();
    let total = inputs.keys.rows;
    let q_start = inputs.q_start();

    let mut scores = Tensor2D::zeros(q_rows, total);
    for r in 0..q_rows {
        let i = q_start + r;
        let q_head = &inputs.q.row(r)[lo..lo + d];
        let row = scores.row_mut(r);
        for (j, s) in row.iter_mut().enumerate().take(i + 1) {
            *s = inputs.scale * dot(q_head, &inputs.keys.row(j)[lo..lo + d]);
        }
    }
    let probs = crate::tensor::masked_row_softmax(&scores, |r, j| {
        inputs.mask.allows(q_start + r, j)
    })?;

    let mut out = Tensor2D::zeros(q_rows, d);
    for r in 0..q_rows {
        let out_row = out.row_mut(r);
        for (j, &p) in probs.row(r).iter().enumerate() {
            if p != T::zero() {
                axpy(p, &inputs.values.row(j)[lo..lo + d], out_row);
            }
        }
    }
    Ok(out)
}

/// Blocked attention with per-row online softmax over `tile`-sized key
/// blocks, skipping tiles with no attendable pair. Returns the output plus a
/// [`FlopLedger`].
pub fn attend_blocked<T: Scalar>(
    inputs: &AttentionInputs<'_, T>,
    tile: usize,
) -> Result<(Tensor2D<T>, FlopLedger)> {
    attend_blocked_with_opts(inputs, tile, true)
}

/// `attend_blocked` with the tile-skip optimization toggleable, for asserting
/// that skipping never changes the output.
pub fn attend_blocked_with_opts<T: Scalar>(
    inputs: &AttentionInputs<'_, T>,
    tile: usize,
    skip_empty_tiles: bool,
) -> Result<(Tensor2D<T>, FlopLedger)> {
    if tile == 0 {
        return Err(Error::Config("tile must be >= 1".into()));
    }
    let d = inputs.head_dim;
    let heads = inputs.num_heads;
    let q_rows = inputs.q.rows();
    let total = inputs.keys.rows;
    let q_start = inputs.q_start();
    let mut ledger = FlopLedger::default();

    // Online-softmax state per (query row, head).
    let mut run_max = vec![T::neg_infinity(); q_rows * heads];
    let mut denom = vec![T::zero(); q_rows * heads];
    let mut acc = Tensor2D::<T>::zeros(q_rows, heads * d);
    let mut scores = vec![T::zero(); tile];

    let mut qb = 0;
    while qb < q_rows {
        let qb_end = (qb + tile).min(q_rows);
        let i_hi = q_start + qb_end - 1;
        let mut kb = 0;
        while kb < total {
            let kb_end = (kb + tile).min(total);
            if kb > i_hi {
                break; // entirely in the future: not a causal tile
            }
            if skip_empty_tiles
                && !tile_attendable(&inputs.mask, q_start + qb, i_hi, kb, kb_end - 1)
            {
                ledger.skipped_tile_count += 1;
                kb = kb_end;
                continue;
            }
            ledger.evaluated_tile_count += 1;

            for r in qb..qb_end {
                let i = q_start + r;
                let j_hi = kb_end.min(i + 1);
                if kb >= j_hi {
                    continue;
                }
                for head in 0..heads {
                    let lo = head * d;
                    let q_head = &inputs.q.row(r)[lo..lo + d];
                    let mut tile_max = T::neg_infinity();
                    for j in kb..j_hi {
                        let s = inputs.scale * dot(q_head, &inputs.keys.row(j)[lo..lo + d]);
                        scores[j - kb] = s;
                        ledger.score_flops += 2 * d as u64;
                        if inputs.mask.allows(i, j) && s > tile_max {
                            tile_max = s;
                        }
                    }
                    if tile_max == T::neg_infinity() {
                        continue; // nothing attendable for this row in this tile
                    }
                    let slot = r * heads + head;
                    let new_max = if run_max[slot] > tile_max { run_max[slot] } else { tile_max };
                    let rescale = (run_max[slot] - new_max).exp();
                    denom[slot] = denom[slot] * rescale;
                    let acc_row = &mut acc.row_mut(r)[lo..lo + d];
                    for a in acc_row.iter_mut() {
                        *a = *a * rescale;
                    }
                    for j in kb..j_hi {
                        if inputs.mask.allows(i, j) {
                            let e = (scores[j - kb] - new_max).exp();
                            denom[slot] = denom[slot] + e;
                            axpy(e, &inputs.values.row(j)[lo..lo + d], acc_row);
                            ledger.weighted_sum_flops += 2 * d as u64;
                        }
                    }
                    run_max[slot] = new_max;
                }
            }
            kb = kb_end;
        }
        qb = qb_end;
    }

    for r in 0..q_rows {
        for head in 0..heads {
            let slot = r * heads + head;
            debug_assert!(denom[slot] > T::zero(), "row {r} head {head} saw no allowed key");
            let inv = denom[slot].recip();
            let lo = head * d;
            for a in &mut acc.row_mut(r)[lo..lo + d] {
                *a = *a * inv;
            }
        }
    }
    Ok((acc, ledger))
}

/// O(1) geometric test for whether the tile spanning absolute query rows
/// `[i_lo, i_hi]` and key columns `[j_lo, j_hi]` (inclusive) contains any
/// attendable pair. The enumeration in [`tile_attendable_enum`] is the oracle
/// this is tested against.
pub fn tile_attendable(
    mask: &MaskView<'_>,
    i_lo: usize,
    i_hi: usize,
    j_lo: usize,
    j_hi: usize,
) -> bool {
    if j_lo > i_hi {
        return false; // no causal pair at all
    }
    // Full rows reach any causal column: (i_hi, j_lo) is such a pair.
    if mask.is_full_row(i_hi) {
        return true;
    }
    let policy = mask.policy();
    if j_lo < policy.keep_first {
        return true; // sink column reachable from row i_hi
    }
    match policy.window.bound() {
        None => true,
        Some(w) => {
            // Diagonal overlap gives distance zero; otherwise the closest
            // pair is (i_lo, j_hi).
            if i_lo.max(j_lo) <= i_hi.min(j_hi) {
                true
            } else {
                i_lo > j_hi && i_lo - j_hi < w
            }
        }
    }
}

/// Brute-force tile attendability, used as the oracle for the geometry.
pub fn tile_attendable_enum(
    mask: &MaskView<'_>,
    i_lo: usize,
    i_hi: usize,
    j_lo: usize,
    j_hi: usize,
) -> bool {
    for i in i_lo..=i_hi {
        for j in j_lo..=j_hi {
            if j < mask.total_len() && i < mask.total_len() && mask.allows(i, j) {
                return true;
            }
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::AttentionPolicy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rayon::prelude::*;

    fn random_mat<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2D<T> {
        Tensor2D::from_fn(rows, cols, |_, _| T::of_f64(rng.gen_range(-1.0..1.0)))
    }

    fn random_policy(rng: &mut ChaCha8Rng, n: usize, num_layers: usize) -> AttentionPolicy {
        let window = match rng.gen_range(0..4) {
            0 => crate::mask::Window::Unbounded,
            _ => crate::mask::Window::Bounded(rng.gen_range(1..=n.max(1))),
        };
        let mut fa_layers = std::collections::BTreeSet::new();
        if rng.gen_bool(0.4) {
            let offset = rng.gen_range(0..2usize);
            fa_layers.extend((offset..num_layers).step_by(2));
        }
        AttentionPolicy {
            window,
            keep_first: if rng.gen_bool(0.5) { rng.gen_range(0..=8) } else { 0 },
            fa_layers,
            fa_decode: rng.gen_bool(0.5),
        }
    }

    #[test]
    fn single_token_output_is_value_row() {
        let q = Tensor2D::from_vec(1, 4, vec![0.3f64, -0.2, 0.9, 0.1]).unwrap();
        let k = Tensor2D::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = Tensor2D::from_vec(1, 4, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let policy = AttentionPolicy::full();
        let mask = MaskView::new(&policy, 0, 1, 1).unwrap();
        let inputs = AttentionInputs::new(&q, k.view(), v.view(), 2, 2, mask).unwrap();
        let out = attend_naive(&inputs).unwrap();
        assert_eq!(out.row(0), v.row(0));
    }

    #[test]
    fn hand_computed_single_head_case() {
        // N=4, one head, d=2, full causal: verify row 2 against by-hand math.
        let q = Tensor2D::from_vec(4, 2, vec![1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0, 0.5, -0.5])
            .unwrap();
        let k = Tensor2D::from_vec(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, -1.0, -1.0, 1.0])
            .unwrap();
        let v = Tensor2D::from_vec(4, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let policy = AttentionPolicy::full();
        let mask = MaskView::new(&policy, 0, 4, 4).unwrap();
        let inputs = AttentionInputs::new(&q, k.view(), v.view(), 1, 2, mask).unwrap();
        let out = attend_naive(&inputs).unwrap();

        let scale = 1.0 / 2.0f64.sqrt();
        // Row 2: q = (1,1); scores = scale * [1, 1, 0].
        let s = [scale, scale, 0.0];
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|x| x / z).collect();
        let want = [
            p[0] * 1.0 + p[1] * 3.0 + p[2] * 5.0,
            p[0] * 2.0 + p[1] * 4.0 + p[2] * 6.0,
        ];
        assert!((out.get(2, 0) - want[0]).abs() < 1e-12);
        assert!((out.get(2, 1) - want[1]).abs() < 1e-12);
    }

    #[test]
    fn window_equals_full_when_sequence_fits() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = random_mat::<f64>(&mut rng, 2, 4);
        let k = random_mat::<f64>(&mut rng, 2, 4);
        let v = random_mat::<f64>(&mut rng, 2, 4);
        let swa = AttentionPolicy::pure_swa(2);
        let full = AttentionPolicy::full();
        let m1 = MaskView::new(&swa, 0, 2, 2).unwrap();
        let m2 = MaskView::new(&full, 0, 2, 2).unwrap();
        let o1 =
            attend_naive(&AttentionInputs::new(&q, k.view(), v.view(), 2, 2, m1).unwrap())
                .unwrap();
        let o2 =
            attend_naive(&AttentionInputs::new(&q, k.view(), v.view(), 2, 2, m2).unwrap())
                .unwrap();
        assert_eq!(o1, o2);
    }

    #[test]
    fn blocked_matches_naive_randomized_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for case in 0..40 {
            let n = rng.gen_range(1..=96);
            let heads = rng.gen_range(1..=4);
            let d = [2usize, 4, 8][rng.gen_range(0..3)];
            let q_rows = if rng.gen_bool(0.3) { rng.gen_range(1..=n) } else { n };
            let prompt_len = rng.gen_range(0..=n);
            let policy = random_policy(&mut rng, n, 4);
            let layer = rng.gen_range(0..4);
            let mask = MaskView::new(&policy, layer, prompt_len, n).unwrap();
            let q = random_mat::<f64>(&mut rng, q_rows, heads * d);
            let k = random_mat::<f64>(&mut rng, n, heads * d);
            let v = random_mat::<f64>(&mut rng, n, heads * d);
            let inputs =
                AttentionInputs::new(&q, k.view(), v.view(), heads, d, mask).unwrap();
            let naive = attend_naive(&inputs).unwrap();
            let tile = rng.gen_range(1..=n + 3);
            let (blocked, _) = attend_blocked(&inputs, tile).unwrap();
            let diff = naive.max_abs_diff(&blocked);
            assert!(diff < 1e-10, "case {case}: diff {diff} (tile {tile}, policy {policy:?})");
        }
    }

    #[test]
    fn blocked_matches_naive_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..15 {
            let n = rng.gen_range(1..=128);
            let policy = random_policy(&mut rng, n, 2);
            let mask = MaskView::new(&policy, 0, n, n).unwrap();
            let q = random_mat::<f32>(&mut rng, n, 8);
            let k = random_mat::<f32>(&mut rng, n, 8);
            let v = random_mat::<f32>(&mut rng, n, 8);
            let inputs = AttentionInputs::new(&q, k.view(), v.view(), 2, 4, mask).unwrap();
            let naive = attend_naive(&inputs).unwrap();
            let (blocked, _) = attend_blocked(&inputs, 16).unwrap();
            assert!(naive.max_abs_diff(&blocked) < 1e-5);
        }
    }

    #[test]
    fn skip_toggle_does_not_change_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..10 {
            let n = rng.gen_range(8..=64);
            let policy = random_policy(&mut rng, n, 2);
            let mask = MaskView::new(&policy, 1, n / 2, n).unwrap();
            let q = random_mat::<f64>(&mut rng, n, 4);
            let k = random_mat::<f64>(&mut rng, n, 4);
            let v = random_mat::<f64>(&mut rng, n, 4);
            let inputs = AttentionInputs::new(&q, k.view(), v.view(), 1, 4, mask).unwrap();
            let (with_skip, l1) = attend_blocked_with_opts(&inputs, 8, true).unwrap();
            let (without, l2) = attend_blocked_with_opts(&inputs, 8, false).unwrap();
            assert!(with_skip.max_abs_diff(&without) < 1e-12);
            assert_eq!(l2.skipped_tile_count, 0);
            assert_eq!(
                l1.skipped_tile_count + l1.evaluated_tile_count,
                l2.evaluated_tile_count
            );
        }
    }

    #[test]
    fn swa_skips_at_least_half_the_causal_tiles() {
        let n = 256;
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let policy = AttentionPolicy::pure_swa(32);
        let mask = MaskView::new(&policy, 0, n, n).unwrap();
        let q = random_mat::<f32>(&mut rng, n, 8);
        let k = random_mat::<f32>(&mut rng, n, 8);
        let v = random_mat::<f32>(&mut rng, n, 8);
        let inputs = AttentionInputs::new(&q, k.view(), v.view(), 2, 4, mask).unwrap();
        let (_, ledger) = attend_blocked(&inputs, 32).unwrap();
        let causal = ledger.skipped_tile_count + ledger.evaluated_tile_count;
        assert!(
            ledger.skipped_tile_count * 2 >= causal,
            "skipped {} of {causal}",
            ledger.skipped_tile_count
        );
    }

    #[test]
    fn tile_one_evaluates_exactly_allowed_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..10 {
            let n = rng.gen_range(1..=32);
            let policy = random_policy(&mut rng, n, 2);
            let mask = MaskView::new(&policy, 0, n / 2, n).unwrap();
            let q = random_mat::<f64>(&mut rng, n, 4);
            let k = random_mat::<f64>(&mut rng, n, 4);
            let v = random_mat::<f64>(&mut rng, n, 4);
            let inputs = AttentionInputs::new(&q, k.view(), v.view(), 2, 2, mask).unwrap();
            let (_, ledger) = attend_blocked(&inputs, 1).unwrap();
            let allowed = mask.allowed_pair_count();
            assert_eq!(ledger.evaluated_score_entries(2, 2), allowed);
            assert_eq!(ledger.evaluated_tile_count, allowed);
            // weighted-sum work equals score work at tile=1.
            assert_eq!(ledger.weighted_sum_flops, ledger.score_flops);
        }
    }

    #[test]
    fn full_tile_evaluates_only_causal_region() {
        let n = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let policy = AttentionPolicy::full();
        let mask = MaskView::new(&policy, 0, n, n).unwrap();
        let q = random_mat::<f64>(&mut rng, n, 4);
        let k = random_mat::<f64>(&mut rng, n, 4);
        let v = random_mat::<f64>(&mut rng, n, 4);
        let inputs = AttentionInputs::new(&q, k.view(), v.view(), 1, 4, mask).unwrap();
        let (_, ledger) = attend_blocked(&inputs, n).unwrap();
        assert_eq!(ledger.evaluated_tile_count, 1);
        assert_eq!(ledger.skipped_tile_count, 0);
        assert_eq!(ledger.evaluated_score_entries(1, 4), (n * (n + 1) / 2) as u64);
    }

    #[test]
    fn tile_geometry_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for _ in 0..300 {
            let n = rng.gen_range(1..=48);
            let policy = random_policy(&mut rng, n, 3);
            let layer = rng.gen_range(0..3);
            let prompt_len = rng.gen_range(0..=n);
            let mask = MaskView::new(&policy, layer, prompt_len, n).unwrap();
            let i_lo = rng.gen_range(0..n);
            let i_hi = rng.gen_range(i_lo..n);
            let j_lo = rng.gen_range(0..n);
            let j_hi = rng.gen_range(j_lo..n);
            assert_eq!(
                tile_attendable(&mask, i_lo, i_hi, j_lo, j_hi),
                tile_attendable_enum(&mask, i_lo, i_hi, j_lo, j_hi),
                "n={n} tile=({i_lo},{i_hi})x({j_lo},{j_hi}) policy={policy:?} pl={prompt_len}"
            );
        }
    }

    #[test]
    fn parallel_map_over_heads_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let n = 48;
        let heads = 4;
        let d = 4;
        let policy = AttentionPolicy::pure_swa(8).with_keep_first(2).with_fa_decode(true);
        let mask = MaskView::new(&policy, 0, 24, n).unwrap();
        let q = random_mat::<f64>(&mut rng, n, heads * d);
        let k = random_mat::<f64>(&mut rng, n, heads * d);
        let v = random_mat::<f64>(&mut rng, n, heads * d);
        let inputs = AttentionInputs::new(&q, k.view(), v.view(), heads, d, mask).unwrap();

        let sequential = attend_naive(&inputs).unwrap();
        let per_head: Vec<Tensor2D<f64>> = (0..heads)
            .into_par_iter()
            .map(|h| attend_one_head_naive(&inputs, h).unwrap())
            .collect();
        for r in 0..n {
            for (h, head_out) in per_head.iter().enumerate() {
                assert_eq!(&sequential.row(r)[h * d..(h + 1) * d], head_out.row(r));
            }
        }
    }

    #[test]
    fn decode_query_attends_full_context_under_fa_decode() {
        // One decode row with fa_decode: the blocked kernel must not skip any
        // in-context tile even though the window is tiny.
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let n = 40;
        let policy = AttentionPolicy::pure_swa(2).with_fa_decode(true);
        let mask = MaskView::new(&policy, 0, n - 1, n).unwrap();
        let q = random_mat::<f64>(&mut rng, 1, 4);
        let k = random_mat::<f64>(&mut rng, n, 4);
        let v = random_mat::<f64>(&mut rng, n, 4);
        let inputs = AttentionInputs::new(&q, k.view(), v.view(), 1, 4, mask).unwrap();
        let (_, ledger) = attend_blocked(&inputs, 8).unwrap();
        assert_eq!(ledger.skipped_tile_count, 0);
        assert_eq!(ledger.evaluated_score_entries(1, 4), n as u64);
    }
}
