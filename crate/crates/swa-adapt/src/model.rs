//! Tiny decoder-only transformer: embedding, [RMSNorm, multi-head attention
//! with a per-layer mask view, RMSNorm, MLP] x L, output projection. Supports
//! per-layer attention policies, chunked prefill, greedy/temperature
//! sampling, and optional low-rank adapters on the q/k/v projections.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{attend_blocked, AttentionInputs, FlopLedger};
use crate::error::{Error, Result};
use crate::kv::KvCache;
use crate::mask::{AttentionPolicy, MaskView};
use crate::tensor::{dot, rms_norm, rope_rotate_row, Scalar, Tensor2D};

pub const NORM_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;
/// Key-block width used by the blocked attention kernel in forward passes.
pub const DEFAULT_TILE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub mlp_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_theta")]
    pub theta_base: f64,
}

fn default_theta() -> f64 {
    10_000.0
}

impl ModelConfig {
    /// Trainable on a laptop CPU in minutes while leaving room for sequences
    /// much longer than the attention window.
    pub fn desk_default() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            model_dim: 64,
            head_dim: 16,
            mlp_dim: 256,
            vocab_size: 128,
            max_seq_len: 1024,
            theta_base: 10_000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim != self.num_heads * self.head_dim {
            return Err(Error::Config(format!(
                "model_dim {} != num_heads {} * head_dim {}",
                self.model_dim, self.num_heads, self.head_dim
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::Config("head_dim must be even for rotary embedding".into()));
        }
        if self.num_layers == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("layers, vocab and max_seq_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub attn_norm: Tensor2D<T>, // 1 x model_dim
    pub wq: Tensor2D<T>,        // model_dim x model_dim
    pub wk: Tensor2D<T>,
    pub wv: Tensor2D<T>,
    pub wo: Tensor2D<T>,
    pub mlp_norm: Tensor2D<T>, // 1 x model_dim
    pub w_up: Tensor2D<T>,     // model_dim x mlp_dim
    pub w_down: Tensor2D<T>,   // mlp_dim x model_dim
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub embed: Tensor2D<T>, // vocab x model_dim
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Tensor2D<T>, // 1 x model_dim
    pub unembed: Tensor2D<T>,    // model_dim x vocab
}

impl<T: Scalar> Weights<T> {
    /// Named parameter blocks in a fixed order (shared by the optimizer,
    /// gradient checks, and the checkpoint container).
    pub fn block_names(num_layers: usize) -> Vec<String> {
        let mut names = vec!["embed".to_string()];
        for l in 0..num_layers {
            for part in ["attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_up", "w_down"] {
                names.push(format!("layer{l}.{part}"));
            }
        }
        names.push("final_norm".to_string());
        names.push("unembed".to_string());
        names
    }

    pub fn blocks(&self) -> Vec<&Tensor2D<T>> {
        let mut out: Vec<&Tensor2D<T>> = vec![&self.embed];
        for l in &self.layers {
            out.extend([
                &l.attn_norm,
                &l.wq,
                &l.wk,
                &l.wv,
                &l.wo,
                &l.mlp_norm,
                &l.w_up,
                &l.w_down,
            ]);
        }
        out.push(&self.final_norm);
        out.push(&self.unembed);
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Tensor2D<T>> {
        let mut out: Vec<&mut Tensor2D<T>> = vec![&mut self.embed];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.mlp_norm,
                &mut l.w_up,
                &mut l.w_down,
            ]);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.unembed);
        out
    }

    pub fn zeros_like(&self) -> Weights<T> {
        Weights {
            embed: Tensor2D::zeros(self.embed.rows(), self.embed.cols()),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: Tensor2D::zeros(1, l.attn_norm.cols()),
                    wq: Tensor2D::zeros(l.wq.rows(), l.wq.cols()),
                    wk: Tensor2D::zeros(l.wk.rows(), l.wk.cols()),
                    wv: Tensor2D::zeros(l.wv.rows(), l.wv.cols()),
                    wo: Tensor2D::zeros(l.wo.rows(), l.wo.cols()),
                    mlp_norm: Tensor2D::zeros(1, l.mlp_norm.cols()),
                    w_up: Tensor2D::zeros(l.w_up.rows(), l.w_up.cols()),
                    w_down: Tensor2D::zeros(l.w_down.rows(), l.w_down.cols()),
                })
                .collect(),
            final_norm: Tensor2D::zeros(1, self.final_norm.cols()),
            unembed: Tensor2D::zeros(self.unembed.rows(), self.unembed.cols()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Weights<U> {
        Weights {
            embed: self.embed.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: l.attn_norm.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    mlp_norm: l.mlp_norm.cast(),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            unembed: self.unembed.cast(),
        }
    }
}

/// One low-rank adapter: effective weight = base + (alpha/rank) * a @ b with
/// `a: in x rank`, `b: rank x out`. `b` starts at zero so a fresh adapter is
/// an exact no-op.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<T> {
    pub a: Tensor2D<T>,
    pub b: Tensor2D<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer<T> {
    pub q: LoraPair<T>,
    pub k: LoraPair<T>,
    pub v: LoraPair<T>,
}

/// Which layers receive adapters (interaction with FA/SWA interleaving is
/// configurable; all layers by default).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LoraTargets {
    #[default]
    AllLayers,
    SwaLayersOnly,
    FaLayersOnly,
}

impl LoraTargets {
    pub fn selects(&self, layer: usize, policy: &AttentionPolicy) -> bool {
        match self {
            LoraTargets::AllLayers => true,
            LoraTargets::SwaLayersOnly => !policy.fa_layers.contains(&layer),
            LoraTargets::FaLayersOnly => policy.fa_layers.contains(&layer),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapters<T> {
    pub rank: usize,
    pub alpha: f64,
    pub enabled: bool,
    /// One entry per model layer; `None` where the adapter is not attached.
    pub layers: Vec<Option<LoraLayer<T>>>,
}

impl<T: Scalar> LoraAdapters<T> {
    pub fn init(
        config: &ModelConfig,
        rank: usize,
        alpha: f64,
        active_layers: &BTreeSet<usize>,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let dim = config.model_dim;
        let mut pair = |rng: &mut ChaCha8Rng| LoraPair {
            a: Tensor2D::from_fn(dim, rank, |_, _| T::of_f64(normal.sample(rng))),
            b: Tensor2D::zeros(rank, dim),
        };
        let layers = (0..config.num_layers)
            .map(|l| {
                active_layers.contains(&l).then(|| LoraLayer {
                    q: pair(&mut rng),
                    k: pair(&mut rng),
                    v: pair(&mut rng),
                })
            })
            .collect();
        Self { rank, alpha, enabled: true, layers }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn block_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.is_some() {
                for target in ["q", "k", "v"] {
                    names.push(format!("layer{l}.lora_{target}.a"));
                    names.push(format!("layer{l}.lora_{target}.b"));
                }
            }
        }
        names
    }

    pub fn blocks(&self) -> Vec<&Tensor2D<T>> {
        let mut out = Vec::new();
        for layer in self.layers.iter().flatten() {
            out.extend([&layer.q.a, &layer.q.b, &layer.k.a, &layer.k.b, &layer.v.a, &layer.v.b]);
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Tensor2D<T>> {
        let mut out = Vec::new();
        for layer in self.layers.iter_mut().flatten() {
            out.extend([
                &mut layer.q.a,
                &mut layer.q.b,
                &mut layer.k.a,
                &mut layer.k.b,
                &mut layer.v.a,
                &mut layer.v.b,
            ]);
        }
        out
    }

    pub fn zeros_like(&self) -> LoraAdapters<T> {
        LoraAdapters {
            rank: self.rank,
            alpha: self.alpha,
            enabled: self.enabled,
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.as_ref().map(|layer| {
                        let z = |p: &LoraPair<T>| LoraPair {
                            a: Tensor2D::zeros(p.a.rows(), p.a.cols()),
                            b: Tensor2D::zeros(p.b.rows(), p.b.cols()),
                        };
                        LoraLayer { q: z(&layer.q), k: z(&layer.k), v: z(&layer.v) }
                    })
                })
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> LoraAdapters<U> {
        LoraAdapters {
            rank: self.rank,
            alpha: self.alpha,
            enabled: self.enabled,
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.as_ref().map(|layer| {
                        let c = |p: &LoraPair<T>| LoraPair { a: p.a.cast(), b: p.b.cast() };
                        LoraLayer { q: c(&layer.q), k: c(&layer.k), v: c(&layer.v) }
                    })
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTransformer<T> {
    pub config: ModelConfig,
    pub weights: Weights<T>,
    pub adapters: Option<LoraAdapters<T>>,
}

/// Per-layer attention-probability mass accumulators for the lazy-ratio
/// calibration: `recent` and `total` are summed over heads and probed rows.
#[derive(Debug, Clone, Copy, Default)]
pub struct LayerMass {
    pub recent: f64,
    pub total: f64,
    pub rows: u64,
}

impl<T: Scalar> ToyTransformer<T> {
    /// Seeded Gaussian init (std 0.02) for all dense weights, ones for norm
    /// gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut gauss = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            Tensor2D::from_fn(rows, cols, |_, _| T::of_f64(normal.sample(rng)))
        };
        let ones = |cols: usize| Tensor2D::from_fn(1, cols, |_, _| T::one());
        let dim = config.model_dim;
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                attn_norm: ones(dim),
                wq: gauss(dim, dim, &mut rng),
                wk: gauss(dim, dim, &mut rng),
                wv: gauss(dim, dim, &mut rng),
                wo: gauss(dim, dim, &mut rng),
                mlp_norm: ones(dim),
                w_up: gauss(dim, config.mlp_dim, &mut rng),
                w_down: gauss(config.mlp_dim, dim, &mut rng),
            })
            .collect();
        let weights = Weights {
            embed: gauss(config.vocab_size, dim, &mut rng),
            layers,
            final_norm: ones(dim),
            unembed: gauss(dim, config.vocab_size, &mut rng),
        };
        Ok(Self { config, weights, adapters: None })
    }

    pub fn attach_lora(
        &mut self,
        rank: usize,
        alpha: f64,
        targets: LoraTargets,
        policy: &AttentionPolicy,
        seed: u64,
    ) {
        let active: BTreeSet<usize> = (0..self.config.num_layers)
            .filter(|&l| targets.selects(l, policy))
            .collect();
        self.adapters = Some(LoraAdapters::init(&self.config, rank, alpha, &active, seed));
    }

    pub fn set_lora_enabled(&mut self, enabled: bool) {
        if let Some(a) = &mut self.adapters {
            a.enabled = enabled;
        }
    }

    pub fn cast<U: Scalar>(&self) -> ToyTransformer<U> {
        ToyTransformer {
            config: self.config.clone(),
            weights: self.weights.cast(),
            adapters: self.adapters.as_ref().map(|a| a.cast()),
        }
    }

    pub fn new_cache(&self) -> KvCache<T> {
        KvCache::new(self.config.num_layers, self.config.max_seq_len, self.config.model_dim)
    }

    /// Cache sized for a specific run (prompt + decode budget), still capped
    /// by `max_seq_len` at forward time.
    pub fn cache_for(&self, rows: usize) -> KvCache<T> {
        KvCache::new(self.config.num_layers, rows, self.config.model_dim)
    }

    fn project(
        &self,
        x: &Tensor2D<T>,
        w: &Tensor2D<T>,
        lora: Option<&LoraPair<T>>,
    ) -> Result<Tensor2D<T>> {
        let mut out = x.matmul(w)?;
        if let (Some(pair), Some(adapters)) = (lora, self.adapters.as_ref()) {
            let scaling = T::of_f64(adapters.scaling());
            let mut delta = x.matmul(&pair.a)?.matmul(&pair.b)?;
            delta.scale(scaling);
            out.add_assign(&delta)?;
        }
        Ok(out)
    }

    fn lora_for(&self, layer: usize) -> [Option<&LoraPair<T>>; 3] {
        match self.adapters.as_ref() {
            Some(a) if a.enabled => match &a.layers[layer] {
                Some(l) => [Some(&l.q), Some(&l.k), Some(&l.v)],
                None => [None, None, None],
            },
            _ => [None, None, None],
        }
    }

    /// Forward pass over `tokens` (the newest positions), appending K/V to
    /// `cache` and returning logits for each input position. `prompt_len`
    /// fixes the prefill/decode boundary used by fa_decode masks.
    pub fn forward(
        &self,
        tokens: &[u32],
        policy: &AttentionPolicy,
        prompt_len: usize,
        cache: &mut KvCache<T>,
    ) -> Result<Tensor2D<T>> {
        Ok(self.forward_with_ledger(tokens, policy, prompt_len, cache)?.0)
    }

    /// `forward` plus the attention kernel's work ledger summed over layers.
    pub fn forward_with_ledger(
        &self,
        tokens: &[u32],
        policy: &AttentionPolicy,
        prompt_len: usize,
        cache: &mut KvCache<T>,
    ) -> Result<(Tensor2D<T>, FlopLedger)> {
        policy.validate(self.config.num_layers)?;
        if tokens.is_empty() {
            return Err(Error::Dimension { op: "forward", detail: "empty token slice".into() });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Bounds {
                detail: format!("token id {bad} >= vocab_size {}", self.config.vocab_size),
            });
        }
        let total_before = cache.len(0);
        if (1..self.config.num_layers).any(|l| cache.len(l) != total_before) {
            return Err(Error::Dimension {
                op: "forward",
                detail: "cache layers out of sync".into(),
            });
        }
        let total_after = total_before + tokens.len();
        if total_after > self.config.max_seq_len {
            return Err(Error::Capacity {
                detail: format!(
                    "sequence length {total_after} exceeds max_seq_len {}",
                    self.config.max_seq_len
                ),
            });
        }

        let dim = self.config.model_dim;
        let mut x = Tensor2D::zeros(tokens.len(), dim);
        for (r, &tok) in tokens.iter().enumerate() {
            x.row_mut(r).copy_from_slice(self.weights.embed.row(tok as usize));
        }

        let eps = T::of_f64(NORM_EPS);
        let mut ledger = FlopLedger::default();
        for (layer_idx, layer) in self.weights.layers.iter().enumerate() {
            let [lq, lk, lv] = self.lora_for(layer_idx);
            let a = rms_norm(&x, layer.attn_norm.row(0), eps)?;
            let mut q = self.project(&a, &layer.wq, lq)?;
            let mut k = self.project(&a, &layer.wk, lk)?;
            let v = self.project(&a, &layer.wv, lv)?;
            for r in 0..q.rows() {
                let pos = total_before + r;
                rope_rotate_row(q.row_mut(r), pos, self.config.theta_base, self.config.head_dim, false);
                rope_rotate_row(k.row_mut(r), pos, self.config.theta_base, self.config.head_dim, false);
            }
            cache.append(layer_idx, &k, &v)?;
            // During chunked prefill the prompt extends past the positions
            // seen so far; every existing row is then a prefill row.
            let mask = MaskView::new(policy, layer_idx, prompt_len.min(total_after), total_after)?;
            let inputs = AttentionInputs::new(
                &q,
                cache.keys(layer_idx),
                cache.values(layer_idx),
                self.config.num_heads,
                self.config.head_dim,
                mask,
            )?;
            let (attn, layer_ledger) = attend_blocked(&inputs, DEFAULT_TILE)?;
            ledger.merge(&layer_ledger);
            let o = attn.matmul(&layer.wo)?;
            x.add_assign(&o)?;

            let b = rms_norm(&x, layer.mlp_norm.row(0), eps)?;
            let mut u = b.matmul(&layer.w_up)?;
            for val in u.data_mut() {
                *val = silu(*val);
            }
            let m = u.matmul(&layer.w_down)?;
            x.add_assign(&m)?;
        }

        let f = rms_norm(&x, self.weights.final_norm.row(0), eps)?;
        let logits = f.matmul(&self.weights.unembed)?;
        Ok((logits, ledger))
    }

    /// Prefill in `chunk`-sized pieces, appending K/V as it goes. Logits are
    /// identical to a monolithic prefill up to the kernel tolerance (exactly
    /// so in practice: the arithmetic path per position is unchanged).
    pub fn prefill_chunked(
        &self,
        tokens: &[u32],
        policy: &AttentionPolicy,
        chunk: usize,
        cache: &mut KvCache<T>,
    ) -> Result<Tensor2D<T>> {
        if chunk == 0 {
            return Err(Error::Config("chunk must be >= 1".into()));
        }
        let mut logits = Tensor2D::zeros(tokens.len(), self.config.vocab_size);
        let prompt_len = cache.len(0) + tokens.len();
        let mut row = 0;
        for piece in tokens.chunks(chunk) {
            let part = self.forward(piece, policy, prompt_len, cache)?;
            for r in 0..part.rows() {
                logits.row_mut(row + r).copy_from_slice(part.row(r));
            }
            row += part.rows();
        }
        Ok(logits)
    }

    /// Autoregressive decoding. Temperature 0 is greedy argmax with
    /// lowest-index tie-break; otherwise seeded categorical sampling.
    /// Returns the generated tokens, excluding `stop_token` if it fires.
    pub fn generate(
        &self,
        prompt: &[u32],
        policy: &AttentionPolicy,
        max_new: usize,
        temperature: f64,
        seed: u64,
        stop_token: Option<u32>,
    ) -> Result<Vec<u32>> {
        if max_new == 0 {
            return Err(Error::Config("max_new must be >= 1".into()));
        }
        let mut cache = self.cache_for((prompt.len() + max_new).min(self.config.max_seq_len));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompt_len = prompt.len();
        let logits = self.forward(prompt, policy, prompt_len, &mut cache)?;
        let mut next = sample_token(logits.row(logits.rows() - 1), temperature, &mut rng);
        let mut out = Vec::with_capacity(max_new);
        for _ in 0..max_new {
            if Some(next) == stop_token {
                break;
            }
            out.push(next);
            if out.len() == max_new {
                break;
            }
            let step = self.forward(&[next], policy, prompt_len, &mut cache)?;
            next = sample_token(step.row(0), temperature, &mut rng);
        }
        Ok(out)
    }

    /// Attention-mass statistics for the lazy-ratio ranker: per layer, the
    /// probability mass the last `n_last` query rows place on keys within
    /// `recent_window`, under full causal attention, summed over heads.
    /// Probabilities are formed in f64 so each row mass is exactly in [0, 1].
    pub fn lazy_recent_mass(
        &self,
        tokens: &[u32],
        n_last: usize,
        recent_window: usize,
    ) -> Result<Vec<LayerMass>> {
        let policy = AttentionPolicy::full();
        let n = tokens.len();
        if n <= recent_window + n_last {
            return Err(Error::Config(format!(
                "sequence of {n} tokens too short for recent_window {recent_window} + n_last {n_last}"
            )));
        }
        let dim = self.config.model_dim;
        let d = self.config.head_dim;
        let eps = T::of_f64(NORM_EPS);
        let scale = 1.0 / (d as f64).sqrt();
        let mut cache = self.cache_for(n);
        let mut masses = vec![LayerMass::default(); self.config.num_layers];

        // Re-run the layer stack, capturing per-head probability rows for the
        // probed queries.
        let mut x = Tensor2D::<T>::zeros(n, dim);
        for (r, &tok) in tokens.iter().enumerate() {
            x.row_mut(r).copy_from_slice(self.weights.embed.row(tok as usize));
        }
        for (layer_idx, layer) in self.weights.layers.iter().enumerate() {
            let [lq, lk, lv] = self.lora_for(layer_idx);
            let a = rms_norm(&x, layer.attn_norm.row(0), eps)?;
            let mut q = self.project(&a, &layer.wq, lq)?;
            let mut k = self.project(&a, &layer.wk, lk)?;
            let v = self.project(&a, &layer.wv, lv)?;
            for r in 0..n {
                rope_rotate_row(q.row_mut(r), r, self.config.theta_base, d, false);
                rope_rotate_row(k.row_mut(r), r, self.config.theta_base, d, false);
            }
            cache.append(layer_idx, &k, &v)?;
            let mask = MaskView::new(&policy, layer_idx, n, n)?;
            let inputs = AttentionInputs::new(
                &q,
                cache.keys(layer_idx),
                cache.values(layer_idx),
                self.config.num_heads,
                d,
                mask,
            )?;

            let mass = &mut masses[layer_idx];
            for i in n - n_last..n {
                for head in 0..self.config.num_heads {
                    let lo = head * d;
                    let q_head = &q.row(i)[lo..lo + d];
                    let mut max = f64::NEG_INFINITY;
                    let mut scores = Vec::with_capacity(i + 1);
                    for j in 0..=i {
                        let s = scale * dot_f64(q_head, &k.row(j)[lo..lo + d]);
                        if s > max {
                            max = s;
                        }
                        scores.push(s);
                    }
                    let mut total = 0.0;
                    let mut recent = 0.0;
                    for (j, &s) in scores.iter().enumerate() {
                        let e = (s - max).exp();
                        total += e;
                        if i - j < recent_window {
                            recent += e;
                        }
                    }
                    mass.recent += recent / total;
                    mass.total += 1.0;
                    mass.rows += 1;
                }
            }

            let (attn, _) = attend_blocked(&inputs, DEFAULT_TILE)?;
            let o = attn.matmul(&layer.wo)?;
            x.add_assign(&o)?;
            let b = rms_norm(&x, layer.mlp_norm.row(0), eps)?;
            let mut u = b.matmul(&layer.w_up)?;
            for val in u.data_mut() {
                *val = silu(*val);
            }
            let m = u.matmul(&layer.w_down)?;
            x.add_assign(&m)?;
        }
        Ok(masses)
    }
}

fn dot_f64<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let mut acc = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        acc += x.to_f64() * y.to_f64();
    }
    acc
}

pub(crate) fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

/// Greedy argmax (lowest index wins ties) at temperature 0, else categorical
/// sampling over softmax(logits / temperature) computed in f64.
pub fn sample_token<T: Scalar>(logits: &[T], temperature: f64, rng: &mut ChaCha8Rng) -> u32 {
    if temperature == 0.0 {
        let mut best = 0usize;
        let mut best_val = logits[0];
        for (i, &v) in logits.iter().enumerate().skip(1) {
            if v > best_val {
                best_val = v;
                best = i;
            }
        }
        return best as u32;
    }
    let scaled: Vec<f64> = logits.iter().map(|&v| v.to_f64() / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let mut dart = rng.gen::<f64>() * sum;
    for (i, &e) in exps.iter().enumerate() {
        dart -= e;
        if dart <= 0.0 {
            return i as u32;
        }
    }
    (exps.len() - 1) as u32
}
