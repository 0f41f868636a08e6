//! Phase-aware attention masks: causal sliding window, retained sink tokens,
//! per-layer full-attention overrides, and full-attention decode.
//!
//! A query at position `i` may attend a key at position `j` iff `j <= i` and
//! at least one of the following holds:
//!   (a) the layer is a full-attention layer;
//!   (b) full-attention decode is on and `i` is a decode position
//!       (`i >= prompt_len`);
//!   (c) `j` is a sink position (`j < keep_first`);
//!   (d) `j` is inside the window (`i - j < window`, self included).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sliding-window width. `Bounded(w)` keeps the most recent `w` keys
/// including self; `Unbounded` is full causal attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Bounded(usize),
    Unbounded,
}

impl Window {
    pub fn covers(self, distance: usize) -> bool {
        match self {
            Window::Bounded(w) => distance < w,
            Window::Unbounded => true,
        }
    }

    pub fn bound(self) -> Option<usize> {
        match self {
            Window::Bounded(w) => Some(w),
            Window::Unbounded => None,
        }
    }
}

impl Serialize for Window {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Window::Bounded(w) => s.serialize_u64(*w as u64),
            Window::Unbounded => s.serialize_str("full"),
        }
    }
}

impl<'de> Deserialize<'de> for Window {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(w) => Ok(Window::Bounded(w as usize)),
            Raw::Text(t) if t.eq_ignore_ascii_case("full") => Ok(Window::Unbounded),
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "window_size must be a number or \"full\", got {t:?}"
            ))),
        }
    }
}

/// Full specification of one attention configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionPolicy {
    /// Sliding-window width (`"full"` disables windowing).
    #[serde(rename = "window_size")]
    pub window: Window,
    /// The first `keep_first` absolute positions stay attendable everywhere.
    #[serde(default)]
    pub keep_first: usize,
    /// Layers that use full causal attention instead of the window.
    #[serde(default)]
    pub fa_layers: BTreeSet<usize>,
    /// Prompt tokens use the window; generated tokens attend everything.
    #[serde(default)]
    pub fa_decode: bool,
}

impl AttentionPolicy {
    /// Full causal attention everywhere (the baseline policy).
    pub fn full() -> Self {
        Self {
            window: Window::Unbounded,
            keep_first: 0,
            fa_layers: BTreeSet::new(),
            fa_decode: false,
        }
    }

    /// Plain sliding window with no auxiliary mechanism.
    pub fn pure_swa(window: usize) -> Self {
        Self {
            window: Window::Bounded(window),
            keep_first: 0,
            fa_layers: BTreeSet::new(),
            fa_decode: false,
        }
    }

    pub fn with_keep_first(mut self, k: usize) -> Self {
        self.keep_first = k;
        self
    }

    pub fn with_fa_layers(mut self, layers: impl IntoIterator<Item = usize>) -> Self {
        self.fa_layers = layers.into_iter().collect();
        self
    }

    pub fn with_fa_decode(mut self, on: bool) -> Self {
        self.fa_decode = on;
        self
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if let Window::Bounded(w) = self.window {
            if w == 0 {
                return Err(Error::Config("window_size must be >= 1".into()));
            }
        }
        if let Some(&bad) = self.fa_layers.iter().find(|&&l| l >= num_layers) {
            return Err(Error::Config(format!(
                "fa_layers index {bad} out of range for {num_layers} layers"
            )));
        }
        Ok(())
    }

    pub fn is_full_attention(&self) -> bool {
        self.window == Window::Unbounded
    }

    /// How many auxiliary mechanisms are active on top of the plain window
    /// (used to group result tables).
    pub fn mechanism_count(&self, num_layers: usize) -> usize {
        let mut n = 0;
        if self.fa_decode {
            n += 1;
        }
        if self.keep_first > 0 {
            n += 1;
        }
        if !self.fa_layers.is_empty() && self.fa_layers.len() < num_layers {
            n += 1;
        }
        n
    }

    /// Compact human-readable label, e.g. `w64,k4,fa[1,3],dec`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        match self.window {
            Window::Bounded(w) => parts.push(format!("w{w}")),
            Window::Unbounded => parts.push("full".to_string()),
        }
        if self.keep_first > 0 {
            parts.push(format!("k{}", self.keep_first));
        }
        if !self.fa_layers.is_empty() {
            let ids: Vec<String> = self.fa_layers.iter().map(|l| l.to_string()).collect();
            parts.push(format!("fa[{}]", ids.join(",")));
        }
        if self.fa_decode {
            parts.push("dec".to_string());
        }
        parts.join(",")
    }
}

/// Lazy, queryable view of which (query, key) pairs are attendable for one
/// layer and one split of the sequence into prompt and generated positions.
#[derive(Debug, Clone, Copy)]
pub struct MaskView<'a> {
    policy: &'a AttentionPolicy,
    layer: usize,
    prompt_len: usize,
    total_len: usize,
}

impl<'a> MaskView<'a> {
    pub fn new(
        policy: &'a AttentionPolicy,
        layer: usize,
        prompt_len: usize,
        total_len: usize,
    ) -> Result<Self> {
        if prompt_len > total_len {
            return Err(Error::Bounds {
                detail: format!("prompt_len {prompt_len} > total_len {total_len}"),
            });
        }
        Ok(Self { policy, layer, prompt_len, total_len })
    }

    pub fn policy(&self) -> &AttentionPolicy {
        self.policy
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    /// Bounds-checked attendability predicate.
    pub fn attendable(&self, i: usize, j: usize) -> Result<bool> {
        if i >= self.total_len || j >= self.total_len {
            return Err(Error::Bounds {
                detail: format!("(i={i}, j={j}) outside total_len {}", self.total_len),
            });
        }
        Ok(self.allows(i, j))
    }

    /// Unchecked predicate; callers keep `i, j < total_len`.
    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        if j > i {
            return false;
        }
        if self.is_full_row(i) {
            return true;
        }
        j < self.policy.keep_first || self.policy.window.covers(i - j)
    }

    /// Rows that attend everything causal: full-attention layers and, under
    /// fa_decode, generated positions.
    #[inline]
    pub fn is_full_row(&self, i: usize) -> bool {
        self.policy.window == Window::Unbounded
            || self.policy.fa_layers.contains(&self.layer)
            || (self.policy.fa_decode && i >= self.prompt_len)
    }

    /// Number of keys attendable from row `i`.
    pub fn row_allowed_count(&self, i: usize) -> u64 {
        if self.is_full_row(i) {
            return (i + 1) as u64;
        }
        let w = match self.policy.window {
            Window::Bounded(w) => w,
            Window::Unbounded => return (i + 1) as u64,
        };
        // Window covers [win_lo, i]; sinks add positions below win_lo.
        let win_lo = (i + 1).saturating_sub(w);
        let window_count = i + 1 - win_lo;
        let sink_extra = self.policy.keep_first.min(win_lo);
        (window_count + sink_extra) as u64
    }

    /// Exact number of attendable (i, j) pairs. Uses the closed form
    /// `W(W+1)/2 + (N-W)W` for the pure sliding window and per-row arithmetic
    /// otherwise.
    pub fn allowed_pair_count(&self) -> u64 {
        let n = self.total_len as u64;
        if let Window::Bounded(w) = self.policy.window {
            let pure_swa = self.policy.keep_first == 0
                && !self.policy.fa_layers.contains(&self.layer)
                && !(self.policy.fa_decode && self.prompt_len < self.total_len);
            if pure_swa {
                let w = w as u64;
                return if n <= w {
                    n * (n + 1) / 2
                } else {
                    w * (w + 1) / 2 + (n - w) * w
                };
            }
            (0..self.total_len).map(|i| self.row_allowed_count(i)).sum()
        } else {
            n * (n + 1) / 2
        }
    }
}

/// True iff the policy's mask equals full causal attention for every layer
/// and every prompt/decode split of a sequence of `total_len` tokens.
pub fn equivalent_to_full(
    policy: &AttentionPolicy,
    num_layers: usize,
    total_len: usize,
) -> bool {
    if (0..num_layers).all(|l| policy.fa_layers.contains(&l)) {
        return true;
    }
    match policy.window {
        Window::Unbounded => true,
        // A gap position exists iff some row i has j with keep_first <= j <= i - W,
        // i.e. iff total_len > W + keep_first. fa_decode cannot close the gap
        // for prefill rows, which exist for every prompt_len split.
        Window::Bounded(w) => total_len <= w.saturating_add(policy.keep_first),
    }
}
