//! Deterministic generators for desk-scale long-context tasks over a small
//! integer alphabet: multi-query key-value retrieval, and concatenated
//! sessions with distractors. Ground truth is always recoverable from the
//! prompt by exact search, so scoring needs no external judge.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::train::derive_seed;

// Reserved token ids. The remaining vocabulary is split into disjoint value,
// key, and filler alphabets so a key sequence can never occur by accident.
pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const NEEDLE_MARK: u32 = 3;
pub const VALUE_MARK: u32 = 4;
pub const QUERY_MARK: u32 = 5;
pub const ANSWER_MARK: u32 = 6;
pub const SEP: u32 = 7;
pub const SESSION_MARK: u32 = 8;
pub const TASK_RETRIEVAL: u32 = 9;
pub const TASK_SESSION: u32 = 10;

pub const VALUE_ALPHABET: std::ops::Range<u32> = 16..48;
pub const KEY_ALPHABET: std::ops::Range<u32> = 48..96;
pub const FILLER_ALPHABET: std::ops::Range<u32> = 96..128;

/// Fixed 4-token prompt header; with `keep_first = 4` these are exactly the
/// retained sink positions.
pub const HEADER_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    MultiQueryRetrieval,
    SessionQa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub ctx_len_min: usize,
    pub ctx_len_max: usize,
    /// Needle count for retrieval; session count for session QA.
    pub num_needles: usize,
    pub num_queries: usize,
    pub key_len: usize,
    pub answer_len: usize,
    pub seed: u64,
    /// When set, the queried needle's depth is stratified over this many
    /// bands by instance index instead of drawn uniformly.
    #[serde(default)]
    pub depth_strata: Option<usize>,
}

impl TaskSpec {
    pub fn retrieval_default(seed: u64) -> Self {
        Self {
            kind: TaskKind::MultiQueryRetrieval,
            ctx_len_min: 256,
            ctx_len_max: 1000,
            num_needles: 8,
            num_queries: 1,
            key_len: 2,
            answer_len: 4,
            seed,
            depth_strata: None,
        }
    }

    pub fn session_default(seed: u64) -> Self {
        Self {
            kind: TaskKind::SessionQa,
            ctx_len_min: 256,
            ctx_len_max: 1000,
            num_needles: 10,
            num_queries: 1,
            key_len: 2,
            answer_len: 4,
            seed,
            depth_strata: None,
        }
    }

    fn needle_len(&self) -> usize {
        1 + self.key_len + 1 + self.answer_len // NEEDLE_MARK key VALUE_MARK value
    }

    fn query_section_len(&self) -> usize {
        self.num_queries * (1 + self.key_len) + 1 // [QUERY_MARK key]* ANSWER_MARK
    }

    fn session_overhead(&self) -> usize {
        match self.kind {
            TaskKind::MultiQueryRetrieval => 0,
            TaskKind::SessionQa => self.num_needles, // one SESSION_MARK each
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_needles == 0 || self.num_queries == 0 {
            return Err(Error::TaskSpec("need at least one needle and one query".into()));
        }
        if self.num_queries > self.num_needles {
            return Err(Error::TaskSpec(format!(
                "{} queries but only {} needles",
                self.num_queries, self.num_needles
            )));
        }
        if self.key_len == 0 || self.answer_len == 0 {
            return Err(Error::TaskSpec("key_len and answer_len must be >= 1".into()));
        }
        let key_space = (KEY_ALPHABET.len() as f64).powi(self.key_len as i32);
        if (self.num_needles as f64) > key_space / 2.0 {
            return Err(Error::TaskSpec(format!(
                "alphabet too small: {} needles need distinct keys from a space of {}",
                self.num_needles, key_space
            )));
        }
        let overhead = HEADER_LEN
            + self.num_needles * self.needle_len()
            + self.session_overhead()
            + self.query_section_len();
        if self.ctx_len_min < overhead + self.num_needles {
            return Err(Error::TaskSpec(format!(
                "ctx_len_min {} too small for fixed content of {overhead} tokens",
                self.ctx_len_min
            )));
        }
        if self.ctx_len_max < self.ctx_len_min {
            return Err(Error::TaskSpec("ctx_len_max < ctx_len_min".into()));
        }
        Ok(())
    }

    /// Hash identifying the task distribution (recorded in run reports).
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(self).expect("spec serializes"));
        crate::checkpoint::hex_string(&hasher.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub prompt: Vec<u32>,
    /// Queried key sequences, in question order.
    pub queries: Vec<Vec<u32>>,
    /// Canonical answer values aligned with `queries`.
    pub answers: Vec<Vec<u32>>,
    /// Start offset of every needle within the prompt.
    pub needle_positions: Vec<usize>,
    /// Depth in [0, 1] of the needle answering each query.
    pub query_depths: Vec<f64>,
    pub context_len: usize,
}

impl TaskInstance {
    /// Canonical answer token sequence: values joined by SEP.
    pub fn canonical_answer(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for (i, ans) in self.answers.iter().enumerate() {
            if i > 0 {
                out.push(SEP);
            }
            out.extend_from_slice(ans);
        }
        out
    }

    /// Decode budget: the canonical answer plus the closing EOS.
    pub fn answer_budget(&self) -> usize {
        self.canonical_answer().len() + 1
    }

    /// Full supervised sequence (prompt, canonical answer, EOS).
    pub fn train_item(&self) -> crate::train::TrainItem {
        let mut tokens = self.prompt.clone();
        let prompt_len = tokens.len();
        tokens.extend(self.canonical_answer());
        tokens.push(EOS);
        crate::train::TrainItem { tokens, prompt_len }
    }

    /// Depth of the first queried needle (used for accuracy breakdowns).
    pub fn primary_depth(&self) -> f64 {
        self.query_depths.first().copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreResult {
    pub correct: bool,
    pub exact_match: bool,
}

/// Exact match against the canonical answer after token normalization
/// (trailing PAD/EOS stripped). The judge is the task itself.
pub fn score(instance: &TaskInstance, answer_tokens: &[u32]) -> ScoreResult {
    let mut end = answer_tokens.len();
    while end > 0 && (answer_tokens[end - 1] == PAD || answer_tokens[end - 1] == EOS) {
        end -= 1;
    }
    let exact = answer_tokens[..end] == instance.canonical_answer()[..];
    ScoreResult { correct: exact, exact_match: exact }
}

fn sample_distinct_keys(rng: &mut ChaCha8Rng, count: usize, key_len: usize) -> Vec<Vec<u32>> {
    let mut seen = std::collections::HashSet::new();
    let mut keys = Vec::with_capacity(count);
    while keys.len() < count {
        let key: Vec<u32> =
            (0..key_len).map(|_| rng.gen_range(KEY_ALPHABET.start..KEY_ALPHABET.end)).collect();
        if seen.insert(key.clone()) {
            keys.push(key);
        }
    }
    keys
}

fn filler(rng: &mut ChaCha8Rng, len: usize) -> impl Iterator<Item = u32> + '_ {
    (0..len).map(|_| rng.gen_range(FILLER_ALPHABET.start..FILLER_ALPHABET.end))
}

/// Generate `count` instances; instance `i` is a pure function of
/// `(spec, i)`, so corpora are reproducible and trivially parallel.
pub fn generate(spec: &TaskSpec, count: usize) -> Result<Vec<TaskInstance>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::TaskSpec("count must be >= 1".into()));
    }
    (0..count).map(|i| generate_one(spec, i)).collect()
}

pub fn generate_one(spec: &TaskSpec, index: usize) -> Result<TaskInstance> {
    let kind_tag = match spec.kind {
        TaskKind::MultiQueryRetrieval => 0,
        TaskKind::SessionQa => 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, index as u64, kind_tag));
    let ctx_len = rng.gen_range(spec.ctx_len_min..=spec.ctx_len_max);

    let keys = sample_distinct_keys(&mut rng, spec.num_needles, spec.key_len);
    let values: Vec<Vec<u32>> = (0..spec.num_needles)
        .map(|_| {
            (0..spec.answer_len)
                .map(|_| rng.gen_range(VALUE_ALPHABET.start..VALUE_ALPHABET.end))
                .collect()
        })
        .collect();

    // Pick which needles the questions target.
    let mut order: Vec<usize> = (0..spec.num_needles).collect();
    order.shuffle(&mut rng);
    let queried: Vec<usize> = order[..spec.num_queries].to_vec();

    let task_tag = match spec.kind {
        TaskKind::MultiQueryRetrieval => TASK_RETRIEVAL,
        TaskKind::SessionQa => TASK_SESSION,
    };
    let mut prompt = vec![BOS, task_tag, SEP, SEP];
    debug_assert_eq!(prompt.len(), HEADER_LEN);

    let needle_len = spec.needle_len();
    let body_len = ctx_len - HEADER_LEN - spec.query_section_len();
    let mut needle_positions = vec![0usize; spec.num_needles];

    match spec.kind {
        TaskKind::MultiQueryRetrieval => {
            let filler_len = body_len - spec.num_needles * needle_len;
            // Sorted insertion offsets into the filler stream; the queried
            // needle's offset may be stratified by instance index.
            let mut offsets: Vec<usize> =
                (0..spec.num_needles).map(|_| rng.gen_range(0..=filler_len)).collect();
            if let Some(strata) = spec.depth_strata {
                let band = index % strata;
                let lo = filler_len * band / strata;
                let hi = (filler_len * (band + 1) / strata).max(lo + 1).min(filler_len);
                offsets[queried[0]] = rng.gen_range(lo..=hi);
            }
            let mut with_id: Vec<(usize, usize)> =
                offsets.iter().copied().zip(0..spec.num_needles).collect();
            with_id.sort();
            let mut consumed = 0;
            for (offset, id) in with_id {
                let gap = offset - consumed;
                prompt.extend(filler(&mut rng, gap));
                consumed = offset;
                needle_positions[id] = prompt.len();
                prompt.push(NEEDLE_MARK);
                prompt.extend_from_slice(&keys[id]);
                prompt.push(VALUE_MARK);
                prompt.extend_from_slice(&values[id]);
            }
            prompt.extend(filler(&mut rng, filler_len - consumed));
        }
        TaskKind::SessionQa => {
            // One session per needle: SESSION_MARK, leading chatter, the
            // needle fact, trailing chatter. Sessions with unqueried keys are
            // the distractors.
            let per_session = body_len / spec.num_needles;
            let mut remainder = body_len - per_session * spec.num_needles;
            for id in 0..spec.num_needles {
                let mut session_len = per_session;
                if remainder > 0 {
                    session_len += 1;
                    remainder -= 1;
                }
                let chatter = session_len - 1 - needle_len;
                let lead = rng.gen_range(0..=chatter);
                prompt.push(SESSION_MARK);
                prompt.extend(filler(&mut rng, lead));
                needle_positions[id] = prompt.len();
                prompt.push(NEEDLE_MARK);
                prompt.extend_from_slice(&keys[id]);
                prompt.push(VALUE_MARK);
                prompt.extend_from_slice(&values[id]);
                prompt.extend(filler(&mut rng, chatter - lead));
            }
        }
    }

    for &id in &queried {
        prompt.push(QUERY_MARK);
        prompt.extend_from_slice(&keys[id]);
    }
    prompt.push(ANSWER_MARK);
    debug_assert_eq!(prompt.len(), ctx_len);

    let body_span = (body_len.saturating_sub(needle_len)).max(1) as f64;
    let query_depths = queried
        .iter()
        .map(|&id| ((needle_positions[id] - HEADER_LEN) as f64 / body_span).clamp(0.0, 1.0))
        .collect();

    Ok(TaskInstance {
        queries: queried.iter().map(|&id| keys[id].clone()).collect(),
        answers: queried.iter().map(|&id| values[id].clone()).collect(),
        needle_positions,
        query_depths,
        context_len: prompt.len(),
        prompt,
    })
}

/// SHA-256 over the canonical JSON of the corpus.
pub fn corpus_hash(instances: &[TaskInstance]) -> String {
    let mut hasher = Sha256::new();
    for inst in instances {
        hasher.update(serde_json::to_vec(inst).expect("instance serializes"));
        hasher.update(b"\n");
    }
    crate::checkpoint::hex_string(&hasher.finalize())
}

pub fn write_jsonl(instances: &[TaskInstance], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for inst in instances {
        writeln!(f, "{}", serde_json::to_string(inst)?)?;
    }
    Ok(())
}

pub fn read_jsonl(path: &std::path::Path) -> Result<Vec<TaskInstance>> {
    std::fs::read_to_string(path)?
        .lines()
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_reproducible() {
        let spec = TaskSpec::retrieval_default(7);
        let a = generate(&spec, 50).unwrap();
        let b = generate(&spec, 50).unwrap();
        assert_eq!(corpus_hash(&a), corpus_hash(&b));
        let other = TaskSpec::retrieval_default(8);
        let c = generate(&other, 50).unwrap();
        assert_ne!(corpus_hash(&a), corpus_hash(&c));
    }

    #[test]
    fn ground_truth_recoverable_from_prompt() {
        for spec in [TaskSpec::retrieval_default(3), TaskSpec::session_default(4)] {
            for inst in generate(&spec, 20).unwrap() {
                for (q, ans) in inst.queries.iter().zip(inst.answers.iter()) {
                    // Find NEEDLE_MARK followed by the key; the value follows.
                    let mut found = None;
                    for start in 0..inst.prompt.len() - spec.key_len - 1 {
                        if inst.prompt[start] == NEEDLE_MARK
                            && &inst.prompt[start + 1..start + 1 + spec.key_len] == q.as_slice()
                        {
                            let vstart = start + spec.key_len + 2;
                            found = Some(inst.prompt[vstart..vstart + spec.answer_len].to_vec());
                            break;
                        }
                    }
                    assert_eq!(found.as_ref(), Some(ans), "needle not searchable");
                }
            }
        }
    }

    #[test]
    fn keys_are_unique_within_instance() {
        let mut spec = TaskSpec::retrieval_default(5);
        spec.num_needles = 16;
        for inst in generate(&spec, 10).unwrap() {
            let mut marks = 0;
            for (p, &t) in inst.prompt.iter().enumerate() {
                if t == NEEDLE_MARK && p >= HEADER_LEN {
                    marks += 1;
                }
            }
            assert_eq!(marks, 16);
            let keyset: std::collections::HashSet<_> = inst
                .needle_positions
                .iter()
                .map(|&p| inst.prompt[p + 1..p + 3].to_vec())
                .collect();
            assert_eq!(keyset.len(), 16);
        }
    }

    #[test]
    fn context_length_within_band() {
        let spec = TaskSpec::retrieval_default(6);
        for inst in generate(&spec, 100).unwrap() {
            assert!(inst.context_len >= spec.ctx_len_min);
            assert!(inst.context_len <= spec.ctx_len_max);
            assert_eq!(inst.prompt.len(), inst.context_len);
            assert_eq!(*inst.prompt.last().unwrap(), ANSWER_MARK);
        }
    }

    #[test]
    fn score_exact_and_off_by_one() {
        let spec = TaskSpec::retrieval_default(9);
        let inst = &generate(&spec, 1).unwrap()[0];
        let canonical = inst.canonical_answer();
        assert!(score(inst, &canonical).correct);
        // Trailing EOS is normalized away.
        let mut with_eos = canonical.clone();
        with_eos.push(EOS);
        assert!(score(inst, &with_eos).correct);
        // One wrong symbol fails.
        let mut wrong = canonical.clone();
        wrong[0] = if wrong[0] == VALUE_ALPHABET.start {
            VALUE_ALPHABET.start + 1
        } else {
            VALUE_ALPHABET.start
        };
        assert!(!score(inst, &wrong).correct);
        // Truncated answer fails.
        assert!(!score(inst, &canonical[..canonical.len() - 1]).correct);
    }

    #[test]
    fn random_guess_accuracy_matches_alphabet_power() {
        // Uniform guesses over the value alphabet: P(correct) = A^-len.
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let a = VALUE_ALPHABET.len() as f64;
        for (answer_len, trials) in [(1usize, 40_000usize), (2, 400_000)] {
            let mut spec = TaskSpec::retrieval_default(10);
            spec.answer_len = answer_len;
            let inst = &generate(&spec, 1).unwrap()[0];
            let mut hits = 0usize;
            for _ in 0..trials {
                let guess: Vec<u32> = (0..answer_len)
                    .map(|_| rng.gen_range(VALUE_ALPHABET.start..VALUE_ALPHABET.end))
                    .collect();
                if score(inst, &guess).correct {
                    hits += 1;
                }
            }
            let p = a.powi(-(answer_len as i32));
            let expect = trials as f64 * p;
            let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
            let diff = (hits as f64 - expect).abs();
            assert!(diff <= 4.0 * sigma + 1.0, "len {answer_len}: {hits} hits vs {expect:.1}");
        }
    }

    #[test]
    fn needle_depth_uniform_chi_square() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let spec = TaskSpec::retrieval_default(11);
        let instances = generate(&spec, 10_000).unwrap();
        let buckets = 16;
        let mut counts = vec![0usize; buckets];
        for inst in &instances {
            let d = inst.primary_depth();
            let b = ((d * buckets as f64) as usize).min(buckets - 1);
            counts[b] += 1;
        }
        let expected = instances.len() as f64 / buckets as f64;
        let chi2: f64 =
            counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let dist = ChiSquared::new((buckets - 1) as f64).unwrap();
        let threshold = dist.inverse_cdf(0.99);
        assert!(chi2 < threshold, "chi2 {chi2:.1} >= {threshold:.1}: depths not uniform");
    }

    #[test]
    fn depth_stratification_places_needles_in_bands() {
        let mut spec = TaskSpec::retrieval_default(12);
        spec.depth_strata = Some(4);
        let instances = generate(&spec, 64).unwrap();
        for (i, inst) in instances.iter().enumerate() {
            let band = i % 4;
            let d = inst.primary_depth();
            let lo = band as f64 * 0.25;
            let hi = lo + 0.25;
            // Small tolerance at band edges: depth uses the needle-start offset.
            assert!(
                d >= lo - 0.05 && d <= hi + 0.05,
                "instance {i}: depth {d} outside band [{lo},{hi}]"
            );
        }
    }

    #[test]
    fn alphabet_too_small_is_spec_error() {
        let mut spec = TaskSpec::retrieval_default(13);
        spec.key_len = 1;
        spec.num_needles = 40; // key space of 48 symbols, needs <= 24
        assert!(matches!(generate(&spec, 1), Err(Error::TaskSpec(_))));
    }

    #[test]
    fn session_task_has_session_structure() {
        let spec = TaskSpec::session_default(14);
        for inst in generate(&spec, 10).unwrap() {
            let sessions =
                inst.prompt.iter().filter(|&&t| t == SESSION_MARK).count();
            assert_eq!(sessions, spec.num_needles);
        }
    }

    #[test]
    fn corpus_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let spec = TaskSpec::retrieval_default(15);
        let instances = generate(&spec, 8).unwrap();
        write_jsonl(&instances, &path).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(instances, back);
    }

    #[test]
    fn multi_query_canonical_answer_joins_values() {
        let mut spec = TaskSpec::retrieval_default(16);
        spec.num_queries = 2;
        let inst = &generate(&spec, 1).unwrap()[0];
        let canonical = inst.canonical_answer();
        assert_eq!(canonical.len(), 2 * spec.answer_len + 1);
        assert_eq!(canonical[spec.answer_len], SEP);
    }
}
