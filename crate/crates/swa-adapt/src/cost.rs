//! Analytic complexity and memory accounting per attention policy: prefill
//! FLOPs from exact attendable-pair counts, and a cache-reusability
//! classification. FLOPs count 2 per multiply-accumulate.

use serde::{Deserialize, Serialize};

use crate::mask::{AttentionPolicy, MaskView, Window};
use crate::model::ModelConfig;

/// Causal pair count `N(N+1)/2`.
pub fn causal_pairs(n: u64) -> u64 {
    n * (n + 1) / 2
}

/// Pure sliding-window pair count: `W(W+1)/2 + (N-W)W` for `N >= W`, causal
/// otherwise.
pub fn swa_pairs(n: u64, w: u64) -> u64 {
    if n <= w {
        causal_pairs(n)
    } else {
        w * (w + 1) / 2 + (n - w) * w
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopBreakdown {
    /// Q.K score FLOPs summed over layers and heads.
    pub attention_score: u64,
    /// Probability-times-value FLOPs summed over layers and heads.
    pub attention_weighted_sum: u64,
    /// Per-layer attendable pair counts behind the attention numbers.
    pub per_layer_pairs: Vec<u64>,
    /// Dense q/k/v/o projection FLOPs (policy-independent).
    pub dense_projection: u64,
    /// Dense MLP FLOPs (policy-independent).
    pub dense_mlp: u64,
    /// Output-vocabulary projection FLOPs (policy-independent).
    pub dense_unembed: u64,
}

impl FlopBreakdown {
    pub fn attention_total(&self) -> u64 {
        self.attention_score + self.attention_weighted_sum
    }

    pub fn dense_total(&self) -> u64 {
        self.dense_projection + self.dense_mlp + self.dense_unembed
    }

    pub fn total(&self) -> u64 {
        self.attention_total() + self.dense_total()
    }
}

/// Prefill FLOPs for a prompt of `n` tokens under `policy`. Attention costs
/// use the exact attendable-pair count per layer; dense projection and MLP
/// costs are reported separately since every policy pays them equally.
pub fn prefill_flops(policy: &AttentionPolicy, config: &ModelConfig, n: usize) -> FlopBreakdown {
    let dim = config.model_dim as u64;
    let per_layer_pairs: Vec<u64> = (0..config.num_layers)
        .map(|layer| {
            let view = MaskView::new(policy, layer, n, n).expect("prompt-only view");
            view.allowed_pair_count()
        })
        .collect();
    let pair_total: u64 = per_layer_pairs.iter().sum();
    // Per attendable pair and head: head_dim MACs for the score and head_dim
    // MACs for the value sum; heads * head_dim = model_dim.
    let attention_score = 2 * dim * pair_total;
    let attention_weighted_sum = 2 * dim * pair_total;

    let nt = n as u64;
    let layers = config.num_layers as u64;
    let dense_projection = layers * nt * 4 * 2 * dim * dim;
    let dense_mlp = layers * nt * 2 * 2 * dim * config.mlp_dim as u64;
    let dense_unembed = nt * 2 * dim * config.vocab_size as u64;

    FlopBreakdown {
        attention_score,
        attention_weighted_sum,
        per_layer_pairs,
        dense_projection,
        dense_mlp,
        dense_unembed,
    }
}

/// How reusable a KV cache built under this policy is across requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReusabilityClass {
    /// A token's KV state depends only on its local window: cache chunks can
    /// be reused beyond shared prefixes.
    WindowLocal,
    /// Only traditional shared-prefix reuse applies.
    PrefixOnly,
    /// No reuse (not produced by the current policy space; reserved for
    /// eviction-style extensions).
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReusabilityReport {
    pub class: ReusabilityClass,
    pub notes: Vec<String>,
}

/// Classify `policy`: window-local iff no FA layers, no sink tokens and no
/// FA decode; FA layers or FA decode force prefix-only; sink tokens alone
/// also force prefix-only, with a positional-dependency note.
pub fn reusability_class(policy: &AttentionPolicy) -> ReusabilityReport {
    let mut notes = Vec::new();
    if policy.window == Window::Unbounded {
        return ReusabilityReport { class: ReusabilityClass::PrefixOnly, notes };
    }
    if !policy.fa_layers.is_empty() {
        notes.push("full-attention layers break KV independence beyond the window".into());
    }
    if policy.fa_decode {
        notes.push("full-attention decode reads the whole cache".into());
    }
    if policy.keep_first > 0 {
        notes.push(
            "keep-first: a token's KV state depends on its position relative to the sink \
             tokens, so chunk reuse needs position offsetting"
                .into(),
        );
    }
    let class = if notes.is_empty() {
        ReusabilityClass::WindowLocal
    } else {
        ReusabilityClass::PrefixOnly
    };
    ReusabilityReport { class, notes }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk() -> ModelConfig {
        ModelConfig::desk_default()
    }

    #[test]
    fn full_vs_swa_attention_ratio_closed_form() {
        let n = 4096;
        let w = 256;
        let full = prefill_flops(&AttentionPolicy::full(), &desk(), n);
        let swa = prefill_flops(&AttentionPolicy::pure_swa(w), &desk(), n);
        let ratio = full.attention_total() as f64 / swa.attention_total() as f64;
        let want = causal_pairs(n as u64) as f64 / swa_pairs(n as u64, w as u64) as f64;
        assert!((ratio - want).abs() < 1e-12);
        // Frozen from the closed-form pair counts: 8390656 / 1015936.
        assert!((want - 8.259).abs() < 1e-3, "ratio {want}");
    }

    #[test]
    fn window_at_least_n_equals_full_count() {
        let n = 777;
        let full = prefill_flops(&AttentionPolicy::full(), &desk(), n);
        let wide = prefill_flops(&AttentionPolicy::pure_swa(n), &desk(), n);
        assert_eq!(full, wide);
    }

    #[test]
    fn half_fa_layers_average_the_counts() {
        let n = 512;
        let w = 64;
        let cfg = desk();
        let full = prefill_flops(&AttentionPolicy::full(), &cfg, n);
        let swa = prefill_flops(&AttentionPolicy::pure_swa(w), &cfg, n);
        let half = prefill_flops(&AttentionPolicy::pure_swa(w).with_fa_layers([0, 2]), &cfg, n);
        assert_eq!(
            half.attention_total() * 2,
            full.attention_total() + swa.attention_total()
        );
    }

    #[test]
    fn monotone_in_window_sink_and_fa_layers() {
        let n = 300;
        let cfg = desk();
        let base = prefill_flops(&AttentionPolicy::pure_swa(32), &cfg, n);
        for bigger in [
            AttentionPolicy::pure_swa(64),
            AttentionPolicy::pure_swa(32).with_keep_first(8),
            AttentionPolicy::pure_swa(32).with_fa_layers([1]),
        ] {
            let flops = prefill_flops(&bigger, &cfg, n);
            assert!(flops.attention_total() >= base.attention_total(), "{bigger:?}");
        }
    }

    #[test]
    fn analytic_score_count_matches_kernel_ledger_at_tile_one() {
        use crate::attention::{attend_blocked, AttentionInputs};
        use crate::mask::MaskView;
        use crate::tensor::Tensor2D;
        use rand::{Rng, SeedableRng};

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let cfg = ModelConfig {
            num_layers: 2,
            num_heads: 2,
            model_dim: 8,
            head_dim: 4,
            mlp_dim: 16,
            vocab_size: 16,
            max_seq_len: 64,
            theta_base: 10_000.0,
        };
        let n = 24;
        let policy = AttentionPolicy::pure_swa(5).with_keep_first(2).with_fa_layers([1]);
        let analytic = prefill_flops(&policy, &cfg, n);
        let mut measured_score = 0u64;
        for layer in 0..cfg.num_layers {
            let q = Tensor2D::from_fn(n, 8, |_, _| rng.gen_range(-1.0f32..1.0));
            let k = Tensor2D::from_fn(n, 8, |_, _| rng.gen_range(-1.0f32..1.0));
            let v = Tensor2D::from_fn(n, 8, |_, _| rng.gen_range(-1.0f32..1.0));
            let mask = MaskView::new(&policy, layer, n, n).unwrap();
            let inputs = AttentionInputs::new(&q, k.view(), v.view(), 2, 4, mask).unwrap();
            let (_, ledger) = attend_blocked(&inputs, 1).unwrap();
            measured_score += ledger.score_flops;
        }
        assert_eq!(measured_score, analytic.attention_score);
    }

    #[test]
    fn reusability_classes() {
        let pure = reusability_class(&AttentionPolicy::pure_swa(64));
        assert_eq!(pure.class, ReusabilityClass::WindowLocal);
        assert!(pure.notes.is_empty());

        let interleaved = reusability_class(&AttentionPolicy::pure_swa(64).with_fa_layers([1]));
        assert_eq!(interleaved.class, ReusabilityClass::PrefixOnly);

        let decode = reusability_class(&AttentionPolicy::pure_swa(64).with_fa_decode(true));
        assert_eq!(decode.class, ReusabilityClass::PrefixOnly);

        let sink = reusability_class(&AttentionPolicy::pure_swa(64).with_keep_first(100));
        assert_eq!(sink.class, ReusabilityClass::PrefixOnly);
        assert!(sink.notes.iter().any(|n| n.contains("position")));

        let full = reusability_class(&AttentionPolicy::full());
        assert_eq!(full.class, ReusabilityClass::PrefixOnly);
    }
}
