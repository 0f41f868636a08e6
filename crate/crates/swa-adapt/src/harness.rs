//! End-to-end experiment harness: teacher pretraining on the synthetic task,
//! self-distillation, window-aware fine-tuning, policy-grid evaluation,
//! wall-clock benchmarking, trade-off emission, and lazy-ratio ranking.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{FaLayersSpec, HarnessConfig, PolicySpec};
use crate::cost::prefill_flops;
use crate::error::{Error, Result};
use crate::kv::FootprintReport;
use crate::layer_select;
use crate::mask::AttentionPolicy;
use crate::model::{sample_token, ToyTransformer};
use crate::report::{
    DepthBucket, FlopTotals, RunReport, TradeoffData, DEPTH_BUCKETS,
};
use crate::tasks::{self, TaskInstance, TaskSpec};
use crate::train::{
    self, build_distillation_set, cosine_lr, derive_seed, Adam, DistillationSet, LossMask,
    Trainable, TrainItem,
};
use crate::tensor::Scalar;

// Seed-stream tags so the training, held-out, distillation, and benchmark
// corpora never collide.
const TAG_TRAIN: u64 = 0x7121;
const TAG_HELDOUT: u64 = 0x7EAC;
const TAG_EVAL: u64 = 0xE7A1;
const TAG_DISTILL: u64 = 0xD157;
const TAG_BENCH: u64 = 0xBE2C;
const TAG_LAZY: u64 = 0x1A27;

// ---------------------------------------------------------------------------
// Policy evaluation
// ---------------------------------------------------------------------------

struct InstanceOutcome {
    correct: bool,
    depth: f64,
    ttft: f64,
    decode_seconds: f64,
    decode_steps: usize,
    total_tokens: usize,
    prompt_len: usize,
    footprint: Option<FootprintReport>,
}

fn run_instance<T: Scalar>(
    model: &ToyTransformer<T>,
    policy: &AttentionPolicy,
    inst: &TaskInstance,
    cot_budget: usize,
    want_footprint: bool,
) -> Result<InstanceOutcome> {
    let budget = inst.answer_budget();
    let capacity = inst.prompt.len() + cot_budget + 1 + budget;
    let mut cache = model.cache_for(capacity);
    let prompt_len = inst.prompt.len();

    let t0 = Instant::now();
    let logits = model.forward(&inst.prompt, policy, prompt_len, &mut cache)?;
    let ttft = t0.elapsed().as_secs_f64();

    let mut rng = ChaCha8Rng::seed_from_u64(0); // greedy decoding; rng unused
    let mut decode_steps = 0usize;
    let t1 = Instant::now();
    let mut next = sample_token(logits.row(logits.rows() - 1), 0.0, &mut rng);

    // Optional scratchpad phase: free decode, then a forced answer delimiter.
    if cot_budget > 0 {
        for _ in 0..cot_budget {
            let step = model.forward(&[next], policy, prompt_len, &mut cache)?;
            decode_steps += 1;
            next = sample_token(step.row(0), 0.0, &mut rng);
        }
        let step = model.forward(&[tasks::ANSWER_MARK], policy, prompt_len, &mut cache)?;
        decode_steps += 1;
        next = sample_token(step.row(0), 0.0, &mut rng);
    }

    let mut answer = Vec::with_capacity(budget);
    for _ in 0..budget {
        if next == tasks::EOS {
            break;
        }
        answer.push(next);
        if answer.len() == budget {
            break;
        }
        let step = model.forward(&[next], policy, prompt_len, &mut cache)?;
        decode_steps += 1;
        next = sample_token(step.row(0), 0.0, &mut rng);
    }
    let decode_seconds = t1.elapsed().as_secs_f64();

    Ok(InstanceOutcome {
        correct: tasks::score(inst, &answer).correct,
        depth: inst.primary_depth(),
        ttft,
        decode_seconds,
        decode_steps: decode_steps.max(1),
        total_tokens: prompt_len + decode_steps + 1,
        prompt_len,
        footprint: want_footprint.then(|| cache.footprint_report(policy)),
    })
}

fn median_of(mut values: Vec<f64>) -> f64 {
    crate::report::median(&mut values)
}

/// Evaluate one policy over a corpus with greedy decoding. Timing fields are
/// medians over instances; FLOPs are the analytic prefill counts summed over
/// prompts; the footprint comes from the longest prompt.
pub fn evaluate_policy<T: Scalar>(
    model: &ToyTransformer<T>,
    policy: &AttentionPolicy,
    instances: &[TaskInstance],
    cot_budget: usize,
    seed: u64,
    parallel: bool,
) -> Result<RunReport> {
    if instances.is_empty() {
        return Err(Error::Config("evaluation corpus is empty".into()));
    }
    policy.validate(model.config.num_layers)?;
    let started_unix = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let t0 = Instant::now();
    let longest = instances
        .iter()
        .enumerate()
        .max_by_key(|(_, i)| i.prompt.len())
        .map(|(idx, _)| idx)
        .unwrap();

    let outcomes: Vec<Result<InstanceOutcome>> = if parallel {
        instances
            .par_iter()
            .enumerate()
            .map(|(i, inst)| run_instance(model, policy, inst, cot_budget, i == longest))
            .collect()
    } else {
        instances
            .iter()
            .enumerate()
            .map(|(i, inst)| run_instance(model, policy, inst, cot_budget, i == longest))
            .collect()
    };

    let mut correct = 0usize;
    let mut ttfts = Vec::with_capacity(instances.len());
    let mut tpots = Vec::with_capacity(instances.len());
    let mut throughputs = Vec::with_capacity(instances.len());
    let mut request_sum = 0.0;
    let mut footprint = None;
    let mut buckets: Vec<(usize, usize)> = vec![(0, 0); DEPTH_BUCKETS];
    let mut flops = FlopTotals::default();
    for outcome in outcomes {
        let o = outcome?;
        if o.correct {
            correct += 1;
        }
        let b = ((o.depth * DEPTH_BUCKETS as f64) as usize).min(DEPTH_BUCKETS - 1);
        buckets[b].0 += 1;
        buckets[b].1 += o.correct as usize;
        ttfts.push(o.ttft);
        tpots.push(o.decode_seconds / o.decode_steps as f64);
        let request = o.ttft + o.decode_seconds;
        throughputs.push(o.total_tokens as f64 / request);
        request_sum += request;
        if let Some(f) = o.footprint {
            footprint = Some(f);
        }
        let breakdown = prefill_flops(policy, &model.config, o.prompt_len);
        flops.attention += breakdown.attention_total();
        flops.dense += breakdown.dense_total();
    }

    let per_depth = buckets
        .iter()
        .enumerate()
        .map(|(i, &(n, c))| DepthBucket {
            depth_lo: i as f64 / DEPTH_BUCKETS as f64,
            depth_hi: (i + 1) as f64 / DEPTH_BUCKETS as f64,
            instances: n,
            correct: c,
            accuracy: if n == 0 { 0.0 } else { c as f64 / n as f64 },
        })
        .collect();

    let spec_for_hash = TaskSpec { seed, ..instances_spec_guess(instances) };
    let report = RunReport {
        policy_label: policy.label(),
        mechanism_count: policy.mechanism_count(model.config.num_layers),
        policy: policy.clone(),
        model_checksum: checkpoint::checksum(model),
        task_spec_hash: spec_for_hash.hash(),
        task_spec: spec_for_hash,
        corpus_hash: tasks::corpus_hash(instances),
        seed,
        cot_budget,
        instances: instances.len(),
        correct,
        accuracy: correct as f64 / instances.len() as f64,
        per_depth,
        ttft_seconds: median_of(ttfts),
        tpot_seconds: median_of(tpots),
        throughput_tokens_per_second: median_of(throughputs),
        mean_request_seconds: request_sum / instances.len() as f64,
        flops,
        footprint: footprint.expect("longest instance produced a footprint"),
        started_unix,
        duration_seconds: t0.elapsed().as_secs_f64(),
    };
    report.validate()?;
    Ok(report)
}

// The evaluation corpus is generated elsewhere; reports carry the spec used.
// This placeholder keeps the report self-describing when instances arrive
// without their spec (CLI paths always pass the real one via eval_corpus).
fn instances_spec_guess(instances: &[TaskInstance]) -> TaskSpec {
    let mut spec = TaskSpec::retrieval_default(0);
    if let Some(first) = instances.first() {
        spec.num_queries = first.queries.len();
        if let Some(q) = first.queries.first() {
            spec.key_len = q.len();
        }
        if let Some(a) = first.answers.first() {
            spec.answer_len = a.len();
        }
    }
    spec
}

/// Evaluate with the exact spec recorded in the report.
pub fn evaluate_policy_with_spec<T: Scalar>(
    model: &ToyTransformer<T>,
    policy: &AttentionPolicy,
    spec: &TaskSpec,
    instances: &[TaskInstance],
    cot_budget: usize,
    parallel: bool,
) -> Result<RunReport> {
    let mut report =
        evaluate_policy(model, policy, instances, cot_budget, spec.seed, parallel)?;
    report.task_spec = spec.clone();
    report.task_spec_hash = spec.hash();
    Ok(report)
}

/// Held-out evaluation corpus for a given row seed.
pub fn eval_corpus(cfg: &HarnessConfig, row_seed: u64) -> Result<(TaskSpec, Vec<TaskInstance>)> {
    let mut spec = cfg.task.clone();
    spec.seed = derive_seed(cfg.eval.corpus_seed, TAG_EVAL, row_seed);
    let instances = tasks::generate(&spec, cfg.eval.instances)?;
    Ok((spec, instances))
}

// ---------------------------------------------------------------------------
// Teacher training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherManifest {
    pub seed: u64,
    pub steps_run: usize,
    pub stopped_early: bool,
    pub final_accuracy: f64,
    pub accuracy_curve: Vec<(usize, f64)>,
    pub loss_curve: Vec<f64>,
    pub weight_checksum: String,
    pub model: crate::model::ModelConfig,
    pub teacher: crate::config::TeacherConfig,
    pub task: TaskSpec,
}

pub struct TeacherOutcome {
    pub model: ToyTransformer<f32>,
    pub manifest: TeacherManifest,
}

fn teacher_batch_spec(cfg: &HarnessConfig, short: bool, seed: u64) -> TaskSpec {
    let mut spec = cfg.task.clone();
    if short {
        spec.ctx_len_min = cfg.teacher.short_ctx_min;
        spec.ctx_len_max = cfg.teacher.short_ctx_max;
        spec.num_needles = cfg.teacher.short_needles.min(spec.num_needles);
        spec.num_queries = spec.num_queries.min(spec.num_needles);
    }
    spec.seed = seed;
    spec
}

/// Pretrain a full-attention teacher on freshly sampled task batches until
/// the held-out accuracy target or the step budget is reached.
pub fn train_teacher(cfg: &HarnessConfig, seed: u64) -> Result<TeacherOutcome> {
    cfg.validate()?;
    let tc = &cfg.teacher;
    let mut model = ToyTransformer::<f32>::init(cfg.model.clone(), seed)?;
    let policy = AttentionPolicy::full();
    let train_config = crate::train::TrainConfig {
        learning_rate: tc.learning_rate,
        warmup_frac: tc.warmup_frac,
        epochs: 1,
        batch_size: tc.batch_size,
        seed,
        trainable: Trainable::Full,
        loss_mask: LossMask::AnswerOnly,
    };
    train_config.validate()?;

    let mut heldout_spec = cfg.task.clone();
    heldout_spec.seed = derive_seed(seed, TAG_HELDOUT, 0);
    let heldout = tasks::generate(&heldout_spec, tc.eval_instances)?;

    let mut opt = Adam::new(&model, Trainable::Full);
    let mut band_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_TRAIN, u64::MAX));
    let mut guard = train::DivergenceGuard::new();
    let mut loss_curve = Vec::with_capacity(tc.steps);
    let mut accuracy_curve = Vec::new();
    let mut final_accuracy = 0.0;
    let mut stopped_early = false;
    let mut steps_run = 0;

    for step in 0..tc.steps {
        let short = band_rng.gen_bool(tc.short_fraction);
        let spec = teacher_batch_spec(cfg, short, derive_seed(seed, TAG_TRAIN, step as u64));
        let batch: Vec<TrainItem> = (0..tc.batch_size)
            .map(|i| tasks::generate_one(&spec, i).map(|inst| inst.train_item()))
            .collect::<Result<_>>()?;
        let (loss, grads) = train::loss_and_grads(
            &model,
            &batch,
            &policy,
            train_config.loss_mask,
            train_config.trainable,
        )?;
        let lr = cosine_lr(tc.learning_rate, step, tc.steps, tc.warmup_frac);
        opt.apply(&mut model, &grads, lr);
        loss_curve.push(loss);
        guard.observe(step, loss)?;
        steps_run = step + 1;

        if (step + 1) % tc.eval_every == 0 || step + 1 == tc.steps {
            let report = evaluate_policy(&model, &policy, &heldout, 0, heldout_spec.seed, true)?;
            accuracy_curve.push((step + 1, report.accuracy));
            final_accuracy = report.accuracy;
            if report.accuracy >= tc.target_accuracy {
                stopped_early = step + 1 < tc.steps;
                break;
            }
        }
    }

    let manifest = TeacherManifest {
        seed,
        steps_run,
        stopped_early,
        final_accuracy,
        accuracy_curve,
        loss_curve,
        weight_checksum: checkpoint::checksum(&model),
        model: cfg.model.clone(),
        teacher: cfg.teacher.clone(),
        task: cfg.task.clone(),
    };
    Ok(TeacherOutcome { model, manifest })
}

/// `train_teacher` plus checkpoint/manifest files under `out_dir`.
pub fn train_teacher_cmd(cfg: &HarnessConfig, seed: u64, out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let outcome = train_teacher(cfg, seed)?;
    let ckpt = out_dir.join(format!("teacher_seed{seed}.ckpt"));
    checkpoint::save(&outcome.model, &ckpt)?;
    let manifest = out_dir.join(format!("teacher_seed{seed}.manifest.json"));
    std::fs::write(&manifest, serde_json::to_string_pretty(&outcome.manifest)?)?;
    Ok(ckpt)
}

// ---------------------------------------------------------------------------
// Distillation and fine-tuning
// ---------------------------------------------------------------------------

pub fn distill_questions(cfg: &HarnessConfig, seed: u64) -> Result<Vec<TaskInstance>> {
    let mut spec = cfg.task.clone();
    spec.seed = derive_seed(seed, TAG_DISTILL, 0);
    tasks::generate(&spec, cfg.distill.questions)
}

/// Sample the full-attention teacher on fresh questions and keep the
/// exact-match-correct answers.
pub fn distill(cfg: &HarnessConfig, teacher: &ToyTransformer<f32>, seed: u64) -> Result<DistillationSet> {
    let questions = distill_questions(cfg, seed)?;
    build_distillation_set(
        teacher,
        &questions,
        cfg.distill.samples_per_question,
        cfg.distill.temperature,
        derive_seed(seed, TAG_DISTILL, 1),
    )
}

pub fn distill_cmd(
    cfg: &HarnessConfig,
    ckpt: &Path,
    seed: u64,
    out_dir: &Path,
) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let teacher = checkpoint::load::<f32>(ckpt)?;
    let set = distill(cfg, &teacher, seed)?;
    let path = out_dir.join(format!("distill_seed{seed}.jsonl"));
    set.write_jsonl(&path)?;
    let stats = serde_json::json!({
        "questions": cfg.distill.questions,
        "samples_per_question": set.samples_per_question,
        "temperature": set.temperature,
        "kept_items": set.items.len(),
        "kept_fraction": set.kept_fraction(),
        "dropped_questions": set.dropped_questions,
    });
    std::fs::write(
        out_dir.join(format!("distill_seed{seed}.stats.json")),
        serde_json::to_string_pretty(&stats)?,
    )?;
    Ok(path)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneManifest {
    pub seed: u64,
    pub policy_label: String,
    pub steps: usize,
    pub final_loss: f64,
    pub loss_curve: Vec<f64>,
    pub weight_checksum: String,
    pub finetune: crate::config::FinetuneConfig,
}

/// Attach adapters to the teacher and fine-tune under the target policy's
/// masks on the distillation set.
pub fn finetune_student(
    cfg: &HarnessConfig,
    teacher: &ToyTransformer<f32>,
    set: &DistillationSet,
    policy: &AttentionPolicy,
    seed: u64,
) -> Result<(ToyTransformer<f32>, FinetuneManifest)> {
    let mut student = teacher.clone();
    student.attach_lora(
        cfg.finetune.lora_rank,
        cfg.finetune.lora_alpha,
        cfg.finetune.lora_targets,
        policy,
        derive_seed(seed, 0x10A, 0),
    );
    let run = train::finetune(&mut student, set, policy, &cfg.finetune.train_config(seed))?;
    let manifest = FinetuneManifest {
        seed,
        policy_label: policy.label(),
        steps: run.steps,
        final_loss: run.final_loss,
        loss_curve: run.loss_curve,
        weight_checksum: run.final_checksum,
        finetune: cfg.finetune.clone(),
    };
    Ok((student, manifest))
}

pub fn finetune_cmd(
    cfg: &HarnessConfig,
    ckpt: &Path,
    set_path: &Path,
    seed: u64,
    out_dir: &Path,
) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let teacher = checkpoint::load::<f32>(ckpt)?;
    let set = DistillationSet::read_jsonl(set_path)?;
    let policy = cfg.policy.resolve(cfg.model.num_layers)?;
    let (student, manifest) = finetune_student(cfg, &teacher, &set, &policy, seed)?;
    let path = out_dir.join(format!("student_seed{seed}.ckpt"));
    checkpoint::save(&student, &path)?;
    std::fs::write(
        out_dir.join(format!("finetune_seed{seed}.manifest.json")),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// Grid evaluation
// ---------------------------------------------------------------------------

/// The canonical mechanism ladder used when no explicit grid is configured:
/// full attention, the naive window, each single mechanism, each pair, and
/// the full combination.
pub fn default_trend_grid(window: usize, keep_first: usize) -> Vec<PolicySpec> {
    let every2 = FaLayersSpec::Shorthand("every:2:1".into());
    let mk = |w: Option<usize>, k: usize, fa: Option<FaLayersSpec>, dec: bool| PolicySpec {
        window_size: match w {
            Some(w) => crate::mask::Window::Bounded(w),
            None => crate::mask::Window::Unbounded,
        },
        keep_first: k,
        fa_layers: fa.unwrap_or_default(),
        fa_decode: dec,
    };
    vec![
        mk(None, 0, None, false),
        mk(Some(window), 0, None, false),
        mk(Some(window), keep_first, None, false),
        mk(Some(window), 0, None, true),
        mk(Some(window), 0, Some(every2.clone()), false),
        mk(Some(window), keep_first, None, true),
        mk(Some(window), 0, Some(every2.clone()), true),
        mk(Some(window), keep_first, Some(every2), true),
    ]
}

/// One report per (policy, seed), rows grouped by the number of active
/// mechanisms, evaluated on per-seed held-out corpora.
pub fn eval_grid(
    cfg: &HarnessConfig,
    model: &ToyTransformer<f32>,
    policies: &[PolicySpec],
) -> Result<Vec<RunReport>> {
    let mut reports = Vec::new();
    for &seed in &cfg.eval.seeds {
        let (spec, instances) = eval_corpus(cfg, seed)?;
        for pspec in policies {
            let policy = pspec.resolve(cfg.model.num_layers)?;
            let report = evaluate_policy_with_spec(
                model,
                &policy,
                &spec,
                &instances,
                cfg.eval.cot_budget,
                true,
            )?;
            reports.push(report);
        }
    }
    reports.sort_by(|a, b| {
        (a.mechanism_count, &a.policy_label, a.seed).cmp(&(
            b.mechanism_count,
            &b.policy_label,
            b.seed,
        ))
    });
    Ok(reports)
}

pub fn grid_policies(cfg: &HarnessConfig) -> Vec<PolicySpec> {
    if !cfg.grid.policies.is_empty() {
        return cfg.grid.policies.clone();
    }
    let window = match cfg.policy.window_size {
        crate::mask::Window::Bounded(w) => w,
        crate::mask::Window::Unbounded => 64,
    };
    let keep = if cfg.policy.keep_first > 0 { cfg.policy.keep_first } else { 4 };
    default_trend_grid(window, keep)
}

pub fn eval_grid_cmd(
    cfg: &HarnessConfig,
    ckpt: &Path,
    out_dir: &Path,
    format: OutputFormat,
) -> Result<Vec<RunReport>> {
    std::fs::create_dir_all(out_dir)?;
    let model = checkpoint::load::<f32>(ckpt)?;
    let reports = eval_grid(cfg, &model, &grid_policies(cfg))?;
    emit_reports(&reports, out_dir, "eval_grid", format)?;
    Ok(reports)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
    Both,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            "both" => Ok(OutputFormat::Both),
            other => Err(Error::Config(format!("unknown format {other:?}"))),
        }
    }
}

pub fn emit_reports(
    reports: &[RunReport],
    out_dir: &Path,
    stem: &str,
    format: OutputFormat,
) -> Result<()> {
    if matches!(format, OutputFormat::Csv | OutputFormat::Both) {
        crate::report::write_reports_csv(reports, &out_dir.join(format!("{stem}.csv")))?;
    }
    if matches!(format, OutputFormat::Json | OutputFormat::Both) {
        crate::report::write_reports_json(reports, &out_dir.join(format!("{stem}.json")))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Wall-clock benchmark
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub policy_label: String,
    pub n: usize,
    pub output_budget: usize,
    pub repetitions: usize,
    pub ttft_seconds: f64,
    pub tpot_seconds: f64,
    pub throughput_tokens_per_second: f64,
    pub attention_flops: u64,
    pub dense_flops: u64,
    pub actual_bytes: u64,
    pub swa_minimal_bytes: u64,
}

/// Single-threaded wall-clock benchmark over synthetic prompts: medians of
/// TTFT (prefill), TPOT (mean decode step), and end-to-end throughput over
/// `repetitions` runs, next to the analytic FLOP counts.
pub fn bench_policy<T: Scalar>(
    model: &ToyTransformer<T>,
    policy: &AttentionPolicy,
    n_list: &[usize],
    output_budget: usize,
    repetitions: usize,
) -> Result<Vec<BenchRow>> {
    if repetitions == 0 {
        return Err(Error::Config("repetitions must be >= 1".into()));
    }
    // Sequences may exceed the configured maximum by the decode budget.
    let mut bench_model = model.clone();
    let max_n = n_list.iter().copied().max().unwrap_or(0);
    bench_model.config.max_seq_len = bench_model.config.max_seq_len.max(max_n + output_budget + 1);

    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(TAG_BENCH, n as u64, 0));
        let prompt: Vec<u32> = (0..n)
            .map(|_| {
                rng.gen_range(tasks::FILLER_ALPHABET.start..tasks::FILLER_ALPHABET.end)
                    .min(bench_model.config.vocab_size as u32 - 1)
            })
            .collect();
        let mut ttfts = Vec::with_capacity(repetitions);
        let mut tpots = Vec::with_capacity(repetitions);
        let mut throughputs = Vec::with_capacity(repetitions);
        let mut footprint = None;
        for _ in 0..repetitions {
            let mut cache = bench_model.cache_for(n + output_budget + 1);
            let t0 = Instant::now();
            let logits = bench_model.forward(&prompt, policy, n, &mut cache)?;
            let ttft = t0.elapsed().as_secs_f64();
            let mut sampler = ChaCha8Rng::seed_from_u64(0);
            let mut next = sample_token(logits.row(logits.rows() - 1), 0.0, &mut sampler);
            let t1 = Instant::now();
            for _ in 0..output_budget {
                let step = bench_model.forward(&[next], policy, n, &mut cache)?;
                next = sample_token(step.row(0), 0.0, &mut sampler);
            }
            let decode = t1.elapsed().as_secs_f64();
            ttfts.push(ttft);
            if output_budget > 0 {
                tpots.push(decode / output_budget as f64);
            }
            throughputs.push((n + output_budget) as f64 / (ttft + decode));
            footprint = Some(cache.footprint_report(policy));
        }
        let breakdown = prefill_flops(policy, &bench_model.config, n);
        let footprint = footprint.unwrap();
        rows.push(BenchRow {
            policy_label: policy.label(),
            n,
            output_budget,
            repetitions,
            ttft_seconds: median_of(ttfts),
            tpot_seconds: if tpots.is_empty() { 0.0 } else { median_of(tpots) },
            throughput_tokens_per_second: median_of(throughputs),
            attention_flops: breakdown.attention_total(),
            dense_flops: breakdown.dense_total(),
            actual_bytes: footprint.actual_bytes,
            swa_minimal_bytes: footprint.swa_minimal_bytes,
        });
    }
    Ok(rows)
}

pub fn bench_cmd(
    cfg: &HarnessConfig,
    ckpt: &Path,
    out_dir: &Path,
    format: OutputFormat,
) -> Result<Vec<BenchRow>> {
    std::fs::create_dir_all(out_dir)?;
    let model = checkpoint::load::<f32>(ckpt)?;
    let policy = cfg.policy.resolve(cfg.model.num_layers)?;
    let rows = bench_policy(
        &model,
        &policy,
        &cfg.bench.n_list,
        cfg.bench.output_budget,
        cfg.bench.repetitions,
    )?;
    if matches!(format, OutputFormat::Json | OutputFormat::Both) {
        std::fs::write(out_dir.join("bench.json"), serde_json::to_string_pretty(&rows)?)?;
    }
    if matches!(format, OutputFormat::Csv | OutputFormat::Both) {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(out_dir.join("bench.csv"))?);
        writeln!(
            f,
            "policy_label,n,output_budget,repetitions,ttft_seconds,tpot_seconds,throughput_tokens_per_second,attention_flops,dense_flops,actual_bytes,swa_minimal_bytes"
        )?;
        for r in &rows {
            writeln!(
                f,
                "{},{},{},{},{:.9},{:.9},{:.3},{},{},{},{}",
                r.policy_label,
                r.n,
                r.output_budget,
                r.repetitions,
                r.ttft_seconds,
                r.tpot_seconds,
                r.throughput_tokens_per_second,
                r.attention_flops,
                r.dense_flops,
                r.actual_bytes,
                r.swa_minimal_bytes
            )?;
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Trade-off and lazy-rank commands
// ---------------------------------------------------------------------------

pub fn tradeoff_cmd(report_paths: &[PathBuf], out_dir: &Path) -> Result<TradeoffData> {
    std::fs::create_dir_all(out_dir)?;
    let mut reports = Vec::new();
    for p in report_paths {
        reports.extend(crate::report::read_reports_json(p)?);
    }
    let data = crate::report::tradeoff(&reports)?;
    std::fs::write(out_dir.join("tradeoff.json"), serde_json::to_string_pretty(&data)?)?;
    Ok(data)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LazyRankOutcome {
    pub report: layer_select::LazyRatioReport,
    pub fa_fraction: f64,
    pub invert: bool,
    pub fa_layers: Vec<usize>,
}

pub fn lazy_rank(cfg: &HarnessConfig, model: &ToyTransformer<f32>, seed: u64) -> Result<LazyRankOutcome> {
    let lr = &cfg.lazy_rank;
    let mut spec = cfg.task.clone();
    spec.seed = derive_seed(seed, TAG_LAZY, 0);
    let corpus: Vec<Vec<u32>> = tasks::generate(&spec, lr.calibration_sequences)?
        .into_iter()
        .map(|i| i.prompt)
        .collect();
    let report = layer_select::lazy_ratio(model, &corpus, lr.n_last, lr.recent_window)?;
    let fa = layer_select::rank_layers_by_laziness(&report.per_layer, lr.fa_fraction, lr.invert)?;
    Ok(LazyRankOutcome {
        report,
        fa_fraction: lr.fa_fraction,
        invert: lr.invert,
        fa_layers: fa.into_iter().collect(),
    })
}

pub fn lazy_rank_cmd(
    cfg: &HarnessConfig,
    ckpt: &Path,
    seed: u64,
    out_dir: &Path,
) -> Result<LazyRankOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let model = checkpoint::load::<f32>(ckpt)?;
    let outcome = lazy_rank(cfg, &model, seed)?;
    std::fs::write(out_dir.join("lazy_rank.json"), serde_json::to_string_pretty(&outcome)?)?;
    Ok(outcome)
}
