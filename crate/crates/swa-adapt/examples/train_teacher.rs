//! Pretrain a full-attention teacher on the synthetic retrieval task and
//! report held-out accuracy.
//!
//! ```bash
//! cargo run --release --example train_teacher -- [steps] [seed]
//! ```

use swa_adapt::config::HarnessConfig;
use swa_adapt::harness;

fn main() -> swa_adapt::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = HarnessConfig::default();
    if let Some(steps) = args.get(1).and_then(|s| s.parse().ok()) {
        cfg.teacher.steps = steps;
    }
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);

    println!(
        "teacher: {} layers, dim {}, task ctx [{}, {}], {} needles, step budget {}",
        cfg.model.num_layers,
        cfg.model.model_dim,
        cfg.task.ctx_len_min,
        cfg.task.ctx_len_max,
        cfg.task.num_needles,
        cfg.teacher.steps
    );
    let t0 = std::time::Instant::now();
    let outcome = harness::train_teacher(&cfg, seed)?;
    let m = &outcome.manifest;
    println!(
        "done in {:.1}s: {} steps, final held-out accuracy {:.3} (early stop: {})",
        t0.elapsed().as_secs_f64(),
        m.steps_run,
        m.final_accuracy,
        m.stopped_early
    );
    for (step, acc) in &m.accuracy_curve {
        println!("  step {step:>5}  accuracy {acc:.3}");
    }
    let losses: Vec<String> = m
        .loss_curve
        .iter()
        .step_by((m.loss_curve.len() / 12).max(1))
        .map(|l| format!("{l:.3}"))
        .collect();
    println!("loss curve (sampled): {}", losses.join(" "));
    println!("weight checksum: {}", &m.weight_checksum[..16]);
    Ok(())
}
