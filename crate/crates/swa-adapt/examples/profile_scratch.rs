//! Scratch profiling harness (not part of the example gallery).

use std::time::Instant;
use swa_adapt::mask::AttentionPolicy;
use swa_adapt::model::{ModelConfig, ToyTransformer};
use swa_adapt::tensor::Tensor2D;
use swa_adapt::train::{loss_and_grads, LossMask, Trainable, TrainItem};

fn main() {
    let cfg = ModelConfig::desk_default();
    let model = ToyTransformer::<f32>::init(cfg.clone(), 1).unwrap();
    let n = 628usize;
    let tokens: Vec<u32> = (0..n).map(|i| (i % 120) as u32).collect();
    let item = TrainItem { tokens: tokens.clone(), prompt_len: n - 8 };
    let policy = AttentionPolicy::full();

    // Raw matmul calibration: [n,64]@[64,64]
    let a = Tensor2D::<f32>::from_fn(n, 64, |r, c| ((r * c) % 13) as f32 * 0.01);
    let b = Tensor2D::<f32>::from_fn(64, 64, |r, c| ((r + c) % 7) as f32 * 0.01);
    let t0 = Instant::now();
    let reps = 200;
    for _ in 0..reps {
        std::hint::black_box(a.matmul(&b).unwrap());
    }
    let dt = t0.elapsed().as_secs_f64();
    let gf = (reps * 2 * n * 64 * 64) as f64 / dt / 1e9;
    println!("matmul [628x64]@[64x64]: {gf:.2} GF/s");

    // matmul_nt calibration (dot-based path)
    let bt = Tensor2D::<f32>::from_fn(64, 64, |r, c| ((r + 2 * c) % 9) as f32 * 0.01);
    let t0 = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(a.matmul_nt(&bt).unwrap());
    }
    let dt = t0.elapsed().as_secs_f64();
    let gf = (reps * 2 * n * 64 * 64) as f64 / dt / 1e9;
    println!("matmul_nt [628x64]@[64x64]T: {gf:.2} GF/s");

    // forward only (inference path, blocked kernel)
    let t0 = Instant::now();
    for _ in 0..5 {
        let mut cache = model.cache_for(n);
        std::hint::black_box(model.forward(&tokens, &policy, n, &mut cache).unwrap());
    }
    println!("inference forward N={n}: {:.1} ms", t0.elapsed().as_secs_f64() / 5.0 * 1e3);

    // forward+backward (training path)
    let batch = vec![item];
    let t0 = Instant::now();
    for _ in 0..5 {
        std::hint::black_box(
            loss_and_grads(&model, &batch, &policy, LossMask::AnswerOnly, Trainable::Full)
                .unwrap(),
        );
    }
    println!("loss_and_grads N={n}: {:.1} ms", t0.elapsed().as_secs_f64() / 5.0 * 1e3);
}
