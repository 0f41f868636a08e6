//! FA-layer-set construction: fixed-interval schedules plus a lazy-ratio
//! ranker that measures, per layer, how much attention mass late queries
//! place on recent keys. Layers with low recent mass ("non-lazy") retain full
//! attention by default; an inverted mode reproduces the counter-experiment
//! where the laziest layers keep full attention instead.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerMass, ToyTransformer};
use crate::tensor::Scalar;

/// How the set of full-attention layers is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSchedule {
    /// Explicit layer indices.
    Explicit(Vec<usize>),
    /// Layers `offset, offset+n, offset+2n, ...`; `n = 1` selects all layers.
    EveryN { n: usize, offset: usize },
    /// Rank layers by measured lazy ratio and keep a fraction on full
    /// attention (resolved via [`rank_layers_by_laziness`]).
    LazyRank { fa_fraction: f64, #[serde(default)] invert: bool },
}

impl LayerSchedule {
    /// Parse the `every:n:offset` shorthand or a comma list of indices.
    pub fn parse(text: &str) -> Result<Self> {
        let t = text.trim();
        if let Some(rest) = t.strip_prefix("every:") {
            let parts: Vec<&str> = rest.split(':').collect();
            let bad = || Error::Config(format!("bad schedule shorthand {text:?}"));
            if parts.len() > 2 || parts.is_empty() {
                return Err(bad());
            }
            let n: usize = parts[0].parse().map_err(|_| bad())?;
            let offset: usize =
                if parts.len() == 2 { parts[1].parse().map_err(|_| bad())? } else { 0 };
            return Ok(LayerSchedule::EveryN { n, offset });
        }
        if t.is_empty() || t == "none" {
            return Ok(LayerSchedule::Explicit(Vec::new()));
        }
        let indices: Vec<usize> = t
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad layer index in {text:?}")))
            })
            .collect::<Result<_>>()?;
        Ok(LayerSchedule::Explicit(indices))
    }
}

/// Resolve a fixed schedule to concrete indices. Lazy-rank schedules need
/// measured ratios and resolve through [`rank_layers_by_laziness`].
pub fn resolve(schedule: &LayerSchedule, num_layers: usize) -> Result<BTreeSet<usize>> {
    if num_layers == 0 {
        return Err(Error::Config("num_layers must be >= 1".into()));
    }
    match schedule {
        LayerSchedule::Explicit(indices) => {
            let set: BTreeSet<usize> = indices.iter().copied().collect();
            if let Some(&bad) = set.iter().find(|&&l| l >= num_layers) {
                return Err(Error::Config(format!(
                    "layer index {bad} out of range for {num_layers} layers"
                )));
            }
            Ok(set)
        }
        LayerSchedule::EveryN { n, offset } => {
            if *n == 0 {
                return Err(Error::Config("every_n requires n >= 1".into()));
            }
            Ok((*offset..num_layers).step_by(*n).collect())
        }
        LayerSchedule::LazyRank { .. } => Err(Error::Config(
            "lazy_rank schedules resolve against measured ratios (run the lazy-rank pass)".into(),
        )),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LazyRatioReport {
    pub per_layer: Vec<f64>,
    pub n_last: usize,
    pub recent_window: usize,
    pub sequences_used: usize,
    pub sequences_skipped: usize,
}

/// Mean recent-attention mass per layer over a calibration corpus, under full
/// causal attention. Sequences shorter than `recent_window + n_last` are
/// skipped and counted. Each ratio is a mean of per-row probability masses,
/// so it lies in [0, 1] exactly.
pub fn lazy_ratio<T: Scalar>(
    model: &ToyTransformer<T>,
    corpus: &[Vec<u32>],
    n_last: usize,
    recent_window: usize,
) -> Result<LazyRatioReport> {
    if corpus.is_empty() {
        return Err(Error::Config("calibration corpus is empty".into()));
    }
    let layers = model.config.num_layers;
    let mut acc = vec![LayerMass::default(); layers];
    let mut used = 0;
    let mut skipped = 0;
    for seq in corpus {
        if seq.len() <= recent_window + n_last {
            skipped += 1;
            continue;
        }
        let masses = model.lazy_recent_mass(seq, n_last, recent_window)?;
        for (a, m) in acc.iter_mut().zip(masses) {
            a.recent += m.recent;
            a.total += m.total;
            a.rows += m.rows;
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::Config(format!(
            "every calibration sequence was shorter than recent_window {recent_window} + n_last {n_last}"
        )));
    }
    let per_layer = acc.iter().map(|a| a.recent / a.total).collect();
    Ok(LazyRatioReport {
        per_layer,
        n_last,
        recent_window,
        sequences_used: used,
        sequences_skipped: skipped,
    })
}

/// Keep the `ceil(fa_fraction * L)` layers with the LOWEST lazy ratio on full
/// attention (ties broken toward the lower index). With `invert`, the
/// laziest layers keep full attention instead.
pub fn rank_layers_by_laziness(
    ratios: &[f64],
    fa_fraction: f64,
    invert: bool,
) -> Result<BTreeSet<usize>> {
    if !(0.0..=1.0).contains(&fa_fraction) || fa_fraction == 0.0 {
        return Err(Error::Config(format!("fa_fraction {fa_fraction} must be in (0, 1]")));
    }
    let count = ((fa_fraction * ratios.len() as f64).ceil() as usize).min(ratios.len());
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (ratios[a], ratios[b]);
        let primary = if invert {
            rb.partial_cmp(&ra).expect("ratios are finite")
        } else {
            ra.partial_cmp(&rb).expect("ratios are finite")
        };
        primary.then(a.cmp(&b))
    });
    Ok(order[..count].iter().copied().collect())
}

/// Pure statistic unit used by the ranker: probability mass of `probs_row`
/// (attention row for query position `i`, length `i + 1`) on keys within the
/// recent window.
pub fn recent_mass(probs_row: &[f64], i: usize, recent_window: usize) -> f64 {
    debug_assert_eq!(probs_row.len(), i + 1);
    let total: f64 = probs_row.iter().sum();
    let start = (i + 1).saturating_sub(recent_window);
    let recent: f64 = probs_row[start..].iter().sum();
    recent / total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn every_n_resolution() {
        let s = LayerSchedule::EveryN { n: 2, offset: 1 };
        assert_eq!(resolve(&s, 6).unwrap(), BTreeSet::from([1, 3, 5]));
        let all = LayerSchedule::EveryN { n: 1, offset: 0 };
        assert_eq!(resolve(&all, 4).unwrap(), BTreeSet::from([0, 1, 2, 3]));
        let sparse = LayerSchedule::EveryN { n: 4, offset: 1 };
        assert_eq!(resolve(&sparse, 8).unwrap(), BTreeSet::from([1, 5]));
    }

    #[test]
    fn explicit_out_of_range_is_config_error() {
        let s = LayerSchedule::Explicit(vec![0, 9]);
        assert!(resolve(&s, 4).is_err());
        assert_eq!(
            resolve(&LayerSchedule::Explicit(vec![2, 0]), 4).unwrap(),
            BTreeSet::from([0, 2])
        );
    }

    #[test]
    fn shorthand_parsing() {
        assert_eq!(
            LayerSchedule::parse("every:2:1").unwrap(),
            LayerSchedule::EveryN { n: 2, offset: 1 }
        );
        assert_eq!(
            LayerSchedule::parse("every:3").unwrap(),
            LayerSchedule::EveryN { n: 3, offset: 0 }
        );
        assert_eq!(
            LayerSchedule::parse("1, 3,5").unwrap(),
            LayerSchedule::Explicit(vec![1, 3, 5])
        );
        assert_eq!(LayerSchedule::parse("none").unwrap(), LayerSchedule::Explicit(vec![]));
        assert!(LayerSchedule::parse("every:x").is_err());
    }

    #[test]
    fn recent_mass_closed_forms() {
        // Uniform attention over i+1 causal keys: mass = min(W, i+1)/(i+1).
        let n = 128;
        let recent = 64;
        for i in [4usize, 63, 64, 100, 127] {
            let row = vec![1.0 / (i + 1) as f64; i + 1];
            let got = recent_mass(&row, i, recent);
            let want = recent.min(i + 1) as f64 / (i + 1) as f64;
            assert!((got - want).abs() < 1e-12, "i={i}: {got} vs {want}");
        }
        let _ = n;

        // Attention only on self: always within any recent window.
        let mut row = vec![0.0; 101];
        row[100] = 1.0;
        assert_eq!(recent_mass(&row, 100, 1), 1.0);

        // Attention only on position 0 with i beyond the window: zero.
        let mut row = vec![0.0; 101];
        row[0] = 1.0;
        assert_eq!(recent_mass(&row, 100, 64), 0.0);
    }

    #[test]
    fn ranking_picks_lowest_ratios_for_full_attention() {
        let ratios = [0.9, 0.1, 0.8, 0.2];
        let fa = rank_layers_by_laziness(&ratios, 0.5, false).unwrap();
        assert_eq!(fa, BTreeSet::from([1, 3]));
        let inverted = rank_layers_by_laziness(&ratios, 0.5, true).unwrap();
        assert_eq!(inverted, BTreeSet::from([0, 2]));
    }

    #[test]
    fn ranking_tie_break_prefers_lower_index() {
        let ratios = [0.5, 0.5, 0.5, 0.5];
        let fa = rank_layers_by_laziness(&ratios, 0.5, false).unwrap();
        assert_eq!(fa, BTreeSet::from([0, 1]));
        let inv = rank_layers_by_laziness(&ratios, 0.5, true).unwrap();
        assert_eq!(inv, BTreeSet::from([0, 1]));
    }

    #[test]
    fn lazy_ratio_bounds_and_determinism() {
        let cfg = ModelConfig {
            num_layers: 3,
            num_heads: 2,
            model_dim: 8,
            head_dim: 4,
            mlp_dim: 16,
            vocab_size: 32,
            max_seq_len: 128,
            theta_base: 10_000.0,
        };
        let model = ToyTransformer::<f32>::init(cfg, 3).unwrap();
        let mut corpus = Vec::new();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..4 {
            corpus.push((0..60).map(|_| rng.gen_range(0..32)).collect());
        }
        corpus.push((0..10).map(|_| rng.gen_range(0..32)).collect()); // too short
        let r1 = lazy_ratio(&model, &corpus, 4, 16).unwrap();
        let r2 = lazy_ratio(&model, &corpus, 4, 16).unwrap();
        assert_eq!(r1.per_layer, r2.per_layer);
        assert_eq!(r1.sequences_used, 4);
        assert_eq!(r1.sequences_skipped, 1);
        for &r in &r1.per_layer {
            assert!((0.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn lazy_rank_schedule_requires_measurement() {
        let s = LayerSchedule::LazyRank { fa_fraction: 0.5, invert: false };
        assert!(resolve(&s, 4).is_err());
    }
}
