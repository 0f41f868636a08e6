//! Run reports: accuracy with per-depth breakdown, wall-clock timing
//! (TTFT/TPOT/throughput), analytic FLOP counts, and KV footprint, emitted as
//! JSON and CSV with identical values. Also the accuracy-versus-time
//! trade-off data with the full-attention-to-naive-window baseline line.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::FootprintReport;
use crate::mask::AttentionPolicy;
use crate::tasks::TaskSpec;

pub const DEPTH_BUCKETS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthBucket {
    pub depth_lo: f64,
    pub depth_hi: f64,
    pub instances: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct FlopTotals {
    /// Attention score + weighted-sum FLOPs summed over evaluated prompts.
    pub attention: u64,
    /// Dense projection/MLP/unembed FLOPs summed over evaluated prompts.
    pub dense: u64,
}

impl FlopTotals {
    pub fn total(&self) -> u64 {
        self.attention + self.dense
    }
}

/// Everything needed to reconstruct and compare one (model, policy, task)
/// evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub policy: AttentionPolicy,
    pub policy_label: String,
    pub mechanism_count: usize,
    pub model_checksum: String,
    pub task_spec: TaskSpec,
    pub task_spec_hash: String,
    pub corpus_hash: String,
    pub seed: u64,
    pub cot_budget: usize,
    pub instances: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub per_depth: Vec<DepthBucket>,
    pub ttft_seconds: f64,
    pub tpot_seconds: f64,
    pub throughput_tokens_per_second: f64,
    pub mean_request_seconds: f64,
    pub flops: FlopTotals,
    pub footprint: FootprintReport,
    pub started_unix: u64,
    pub duration_seconds: f64,
}

impl RunReport {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.accuracy) {
            return Err(Error::Config(format!("accuracy {} outside [0,1]", self.accuracy)));
        }
        for v in [
            self.ttft_seconds,
            self.tpot_seconds,
            self.throughput_tokens_per_second,
            self.mean_request_seconds,
            self.duration_seconds,
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("negative or non-finite timing {v}")));
            }
        }
        Ok(())
    }

    pub fn csv_header() -> String {
        [
            "policy_label",
            "window_size",
            "keep_first",
            "fa_layers",
            "fa_decode",
            "mechanism_count",
            "seed",
            "cot_budget",
            "instances",
            "correct",
            "accuracy",
            "acc_depth_q1",
            "acc_depth_q2",
            "acc_depth_q3",
            "acc_depth_q4",
            "ttft_seconds",
            "tpot_seconds",
            "throughput_tokens_per_second",
            "mean_request_seconds",
            "attention_flops",
            "dense_flops",
            "total_flops",
            "footprint_actual_bytes",
            "footprint_swa_minimal_bytes",
            "model_checksum",
            "task_spec_hash",
            "corpus_hash",
        ]
        .join(",")
    }

    pub fn csv_row(&self) -> String {
        let window = match self.policy.window {
            crate::mask::Window::Bounded(w) => w.to_string(),
            crate::mask::Window::Unbounded => "full".to_string(),
        };
        let fa_layers = self
            .policy
            .fa_layers
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join("|");
        let depth_cell = |i: usize| {
            self.per_depth
                .get(i)
                .map(|b| format!("{:.6}", b.accuracy))
                .unwrap_or_else(|| "".to_string())
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{:.6},{},{},{},{},{:.9},{:.9},{:.3},{:.9},{},{},{},{},{},{},{},{}",
            self.policy_label,
            window,
            self.policy.keep_first,
            fa_layers,
            self.policy.fa_decode,
            self.mechanism_count,
            self.seed,
            self.cot_budget,
            self.instances,
            self.correct,
            self.accuracy,
            depth_cell(0),
            depth_cell(1),
            depth_cell(2),
            depth_cell(3),
            self.ttft_seconds,
            self.tpot_seconds,
            self.throughput_tokens_per_second,
            self.mean_request_seconds,
            self.flops.attention,
            self.flops.dense,
            self.flops.total(),
            self.footprint.actual_bytes,
            self.footprint.swa_minimal_bytes,
            self.model_checksum,
            self.task_spec_hash,
            self.corpus_hash,
        )
    }
}

pub fn write_reports_csv(reports: &[RunReport], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{}", RunReport::csv_header())?;
    for r in reports {
        writeln!(f, "{}", r.csv_row())?;
    }
    Ok(())
}

pub fn write_reports_json(reports: &[RunReport], path: &std::path::Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(reports)?)?;
    Ok(())
}

pub fn read_reports_json(path: &std::path::Path) -> Result<Vec<RunReport>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Median of accuracy across same-policy reports (the multi-seed summary).
pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

// ---------------------------------------------------------------------------
// Accuracy-versus-time trade-off
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub policy_label: String,
    pub mechanism_count: usize,
    pub mean_request_seconds: f64,
    pub accuracy: f64,
    /// Accuracy of the baseline line at this point's time.
    pub baseline_accuracy: f64,
    pub above_line: bool,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineLine {
    pub full_label: String,
    pub full_time: f64,
    pub full_accuracy: f64,
    pub swa_label: String,
    pub swa_time: f64,
    pub swa_accuracy: f64,
    pub slope: f64,
    pub intercept: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffData {
    pub baseline: BaselineLine,
    pub points: Vec<TradeoffPoint>,
}

/// Build the trade-off data: a straight line between the full-attention
/// point and the naive-window point, plus an above/below flag per report.
/// Needs at least those two baseline reports.
pub fn tradeoff(reports: &[RunReport]) -> Result<TradeoffData> {
    let full = reports
        .iter()
        .find(|r| r.policy.is_full_attention())
        .ok_or_else(|| Error::MissingBaseline("no full-attention report".into()))?;
    let naive = reports
        .iter()
        .find(|r| !r.policy.is_full_attention() && r.mechanism_count == 0)
        .ok_or_else(|| Error::MissingBaseline("no naive sliding-window report".into()))?;
    let dt = full.mean_request_seconds - naive.mean_request_seconds;
    if dt.abs() < 1e-12 {
        return Err(Error::Config(
            "baseline points have identical mean request time; line undefined".into(),
        ));
    }
    let slope = (full.accuracy - naive.accuracy) / dt;
    let intercept = full.accuracy - slope * full.mean_request_seconds;
    let line = |t: f64| slope * t + intercept;

    let points = reports
        .iter()
        .map(|r| {
            let base = line(r.mean_request_seconds);
            TradeoffPoint {
                policy_label: r.policy_label.clone(),
                mechanism_count: r.mechanism_count,
                mean_request_seconds: r.mean_request_seconds,
                accuracy: r.accuracy,
                baseline_accuracy: base,
                above_line: r.accuracy > base + 1e-12,
                margin: r.accuracy - base,
            }
        })
        .collect();

    Ok(TradeoffData {
        baseline: BaselineLine {
            full_label: full.policy_label.clone(),
            full_time: full.mean_request_seconds,
            full_accuracy: full.accuracy,
            swa_label: naive.policy_label.clone(),
            swa_time: naive.mean_request_seconds,
            swa_accuracy: naive.accuracy,
            slope,
            intercept,
        },
        points,
    })
}
