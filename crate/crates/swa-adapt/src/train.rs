//! Training: manual reverse-mode gradients for the full model, cross-entropy
//! on answer spans, Adam with cosine-decay schedule, the SWA-aware
//! fine-tuning loop, and the self-distillation data pipeline.
//!
//! The gradient path mirrors the inference forward exactly — the active
//! attention mask participates in backward, and masked positions receive
//! zero attention-probability gradient.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::mask::{AttentionPolicy, MaskView};
use crate::model::{silu, LoraAdapters, ModelConfig, ToyTransformer, Weights, NORM_EPS};
use crate::tasks::{score, TaskInstance};
use crate::tensor::{axpy, dot, Scalar, Tensor2D};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_WINDOW: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    #[default]
    LoraOnly,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMask {
    /// Only positions whose target token lies in the answer span.
    #[default]
    AnswerOnly,
    AllPositions,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Fraction of total steps spent in linear warmup before cosine decay.
    #[serde(default = "default_warmup")]
    pub warmup_frac: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub trainable: Trainable,
    #[serde(default)]
    pub loss_mask: LossMask,
}

fn default_warmup() -> f64 {
    0.03
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One supervised sequence: `tokens[..prompt_len]` is the prompt, the rest is
/// the answer span.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainItem {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
}

impl TrainItem {
    /// Positions contributing to the loss (position p predicts token p+1).
    fn masked_positions(&self, mask: LossMask) -> usize {
        if self.tokens.len() < 2 {
            return 0;
        }
        match mask {
            LossMask::AllPositions => self.tokens.len() - 1,
            LossMask::AnswerOnly => {
                (0..self.tokens.len() - 1).filter(|&p| p + 1 >= self.prompt_len).count()
            }
        }
    }
}

/// Gradients for whichever parameter sets are trainable. Shapes mirror the
/// parameters.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub weights: Option<Weights<T>>,
    pub lora: Option<LoraAdapters<T>>,
}

impl<T: Scalar> Gradients<T> {
    fn zeros_for(model: &ToyTransformer<T>, trainable: Trainable) -> Self {
        let weights = match trainable {
            Trainable::Full => Some(model.weights.zeros_like()),
            Trainable::LoraOnly => None,
        };
        let lora = model
            .adapters
            .as_ref()
            .filter(|a| a.enabled)
            .map(|a| a.zeros_like());
        Self { weights, lora }
    }

    fn add_assign(&mut self, other: &Gradients<T>) {
        if let (Some(a), Some(b)) = (self.weights.as_mut(), other.weights.as_ref()) {
            for (x, y) in a.blocks_mut().into_iter().zip(b.blocks()) {
                x.add_assign(y).expect("same shapes");
            }
        }
        if let (Some(a), Some(b)) = (self.lora.as_mut(), other.lora.as_ref()) {
            for (x, y) in a.blocks_mut().into_iter().zip(b.blocks()) {
                x.add_assign(y).expect("same shapes");
            }
        }
    }

    /// Max over blocks of the max absolute entry (divergence diagnostics).
    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        if let Some(w) = &self.weights {
            for b in w.blocks() {
                for &v in b.data() {
                    m = m.max(v.to_f64().abs());
                }
            }
        }
        if let Some(l) = &self.lora {
            for b in l.blocks() {
                for &v in b.data() {
                    m = m.max(v.to_f64().abs());
                }
            }
        }
        m
    }
}

// ---------------------------------------------------------------------------
// Forward with tape + backward
// ---------------------------------------------------------------------------

struct LayerTape<T> {
    a: Tensor2D<T>,      // attn-norm output
    q: Tensor2D<T>,      // post-rope
    k: Tensor2D<T>,      // post-rope
    v: Tensor2D<T>,
    o: Tensor2D<T>,      // concatenated head outputs, pre-Wo
    x1: Tensor2D<T>,     // after attention residual
    u: Tensor2D<T>,      // MLP pre-activation
}

struct Tape<T> {
    inputs: Vec<Tensor2D<T>>, // layer inputs; inputs[L] is the final hidden state
    layers: Vec<LayerTape<T>>,
    f: Tensor2D<T>, // final-norm output
    logits: Tensor2D<T>,
}

/// Per-row RMS-norm backward. Returns dx and accumulates the gain gradient.
fn rms_norm_backward<T: Scalar>(
    dy: &Tensor2D<T>,
    x: &Tensor2D<T>,
    gain: &[T],
    dgain: Option<&mut [T]>,
) -> Tensor2D<T> {
    let dcols = x.cols();
    let n = T::of_f64(dcols as f64);
    let eps = T::of_f64(NORM_EPS);
    let mut dx = Tensor2D::zeros(x.rows(), dcols);
    let mut dgain_acc = vec![T::zero(); dcols];
    for r in 0..x.rows() {
        let xr = x.row(r);
        let dyr = dy.row(r);
        let ms = dot(xr, xr) / n;
        let inv = (ms + eps).sqrt().recip();
        let inv3 = inv * inv * inv;
        let mut proj = T::zero();
        for c in 0..dcols {
            proj = proj + dyr[c] * gain[c] * xr[c];
        }
        let factor = inv3 * proj / n;
        let dxr = dx.row_mut(r);
        for c in 0..dcols {
            dxr[c] = inv * gain[c] * dyr[c] - factor * xr[c];
            dgain_acc[c] = dgain_acc[c] + dyr[c] * xr[c] * inv;
        }
    }
    if let Some(dg) = dgain {
        for (g, &acc) in dg.iter_mut().zip(dgain_acc.iter()) {
            *g = *g + acc;
        }
    }
    dx
}

/// Rotation table: `(sin, cos)` per (position, frequency pair), shared by the
/// rotary forward and its adjoint.
fn rope_table<T: Scalar>(n: usize, head_dim: usize, theta_base: f64) -> Vec<(T, T)> {
    let half = head_dim / 2;
    let mut tab = Vec::with_capacity(n * half);
    for pos in 0..n {
        for t in 0..half {
            let exponent = (2 * t) as f64 / head_dim as f64;
            let angle = pos as f64 / theta_base.powf(exponent);
            tab.push((T::of_f64(angle.sin()), T::of_f64(angle.cos())));
        }
    }
    tab
}

fn rope_row_cached<T: Scalar>(row: &mut [T], tab: &[(T, T)], pos: usize, head_dim: usize, inverse: bool) {
    let half = head_dim / 2;
    for seg in row.chunks_mut(head_dim) {
        for t in 0..half {
            let (mut sin, cos) = tab[pos * half + t];
            if inverse {
                sin = -sin;
            }
            let (x0, x1) = (seg[2 * t], seg[2 * t + 1]);
            seg[2 * t] = x0 * cos - x1 * sin;
            seg[2 * t + 1] = x0 * sin + x1 * cos;
        }
    }
}

fn forward_tape<T: Scalar>(
    model: &ToyTransformer<T>,
    tokens: &[u32],
    policy: &AttentionPolicy,
    prompt_len: usize,
) -> Result<Tape<T>> {
    let cfg = &model.config;
    let n = tokens.len();
    let dim = cfg.model_dim;
    let d = cfg.head_dim;
    let eps = T::of_f64(NORM_EPS);
    let scale = T::of_f64(1.0 / (d as f64).sqrt());
    let lora_scaling = model.adapters.as_ref().map(|a| T::of_f64(a.scaling()));
    let rope_tab = rope_table::<T>(n, d, cfg.theta_base);
    let mut idx_scratch: Vec<usize> = Vec::with_capacity(n);
    let mut val_scratch: Vec<T> = Vec::with_capacity(n);

    let mut x = Tensor2D::zeros(n, dim);
    for (r, &tok) in tokens.iter().enumerate() {
        x.row_mut(r).copy_from_slice(model.weights.embed.row(tok as usize));
    }

    let mut inputs = Vec::with_capacity(cfg.num_layers + 1);
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for (li, layer) in model.weights.layers.iter().enumerate() {
        inputs.push(x.clone());
        let lora = active_lora(model, li);
        let a = crate::tensor::rms_norm(&x, layer.attn_norm.row(0), eps)?;
        let mut q = a.matmul(&layer.wq)?;
        let mut k = a.matmul(&layer.wk)?;
        let mut v = a.matmul(&layer.wv)?;
        if let Some(pairs) = lora {
            let s = lora_scaling.unwrap();
            for (target, out) in [(&pairs.q, &mut q), (&pairs.k, &mut k), (&pairs.v, &mut v)] {
                let mut delta = a.matmul(&target.a)?.matmul(&target.b)?;
                delta.scale(s);
                out.add_assign(&delta)?;
            }
        }
        for r in 0..n {
            rope_row_cached(q.row_mut(r), &rope_tab, r, d, false);
            rope_row_cached(k.row_mut(r), &rope_tab, r, d, false);
        }
        let mask = MaskView::new(policy, li, prompt_len.min(n), n)?;
        let mut o = Tensor2D::zeros(n, dim);
        for i in 0..n {
            for h in 0..cfg.num_heads {
                let lo = h * d;
                let q_head = &q.row(i)[lo..lo + d];
                let mut max = T::neg_infinity();
                idx_scratch.clear();
                val_scratch.clear();
                for j in 0..=i {
                    if mask.allows(i, j) {
                        let s = scale * dot(q_head, &k.row(j)[lo..lo + d]);
                        if s > max {
                            max = s;
                        }
                        idx_scratch.push(j);
                        val_scratch.push(s);
                    }
                }
                let mut denom = T::zero();
                for s in val_scratch.iter_mut() {
                    *s = (*s - max).exp();
                    denom = denom + *s;
                }
                let out_row = &mut o.row_mut(i)[lo..lo + d];
                for (&j, &e) in idx_scratch.iter().zip(val_scratch.iter()) {
                    axpy(e / denom, &v.row(j)[lo..lo + d], out_row);
                }
            }
        }
        let t = o.matmul(&layer.wo)?;
        x.add_assign(&t)?;
        let x1 = x.clone();

        let b = crate::tensor::rms_norm(&x, layer.mlp_norm.row(0), eps)?;
        let u = b.matmul(&layer.w_up)?;
        let mut hg = u.clone();
        for val in hg.data_mut() {
            *val = silu(*val);
        }
        let m = hg.matmul(&layer.w_down)?;
        x.add_assign(&m)?;

        layers.push(LayerTape { a, q, k, v, o, x1, u });
    }
    inputs.push(x.clone());
    let f = crate::tensor::rms_norm(&x, model.weights.final_norm.row(0), eps)?;
    let logits = f.matmul(&model.weights.unembed)?;
    Ok(Tape { inputs, layers, f, logits })
}

fn active_lora<T: Scalar>(
    model: &ToyTransformer<T>,
    layer: usize,
) -> Option<&crate::model::LoraLayer<T>> {
    model
        .adapters
        .as_ref()
        .filter(|a| a.enabled)
        .and_then(|a| a.layers[layer].as_ref())
}

/// Backward for one item; `dlogits` already carries the 1/M scaling.
#[allow(clippy::too_many_lines)]
fn backward_item<T: Scalar>(
    model: &ToyTransformer<T>,
    tokens: &[u32],
    policy: &AttentionPolicy,
    prompt_len: usize,
    tape: &Tape<T>,
    dlogits: &Tensor2D<T>,
    grads: &mut Gradients<T>,
) -> Result<()> {
    let cfg = &model.config;
    let n = tokens.len();
    let dim = cfg.model_dim;
    let d = cfg.head_dim;
    let scale = T::of_f64(1.0 / (d as f64).sqrt());
    let lora_scaling = model.adapters.as_ref().map(|a| T::of_f64(a.scaling()));
    let full = grads.weights.is_some();
    let rope_tab = rope_table::<T>(n, d, cfg.theta_base);
    let mut idx_scratch: Vec<usize> = Vec::with_capacity(n);
    let mut val_scratch: Vec<T> = Vec::with_capacity(n);
    let mut dp_scratch: Vec<T> = Vec::with_capacity(n);

    // logits = f @ unembed
    let df = dlogits.matmul_nt(&model.weights.unembed)?;
    if let Some(w) = grads.weights.as_mut() {
        w.unembed.add_assign(&tape.f.matmul_tn(dlogits)?)?;
    }
    let x_last = &tape.inputs[cfg.num_layers];
    let mut dx = {
        let mut dgain_holder = grads
            .weights
            .as_mut()
            .map(|w| w.final_norm.row_mut(0).to_vec());
        let dx = rms_norm_backward(
            &df,
            x_last,
            model.weights.final_norm.row(0),
            dgain_holder.as_deref_mut(),
        );
        if let (Some(w), Some(dg)) = (grads.weights.as_mut(), dgain_holder) {
            w.final_norm.row_mut(0).copy_from_slice(&dg);
        }
        dx
    };

    for li in (0..cfg.num_layers).rev() {
        let layer = &model.weights.layers[li];
        let tape_l = &tape.layers[li];
        let x_in = &tape.inputs[li];
        let lora = active_lora(model, li);

        // MLP block: x2 = x1 + silu(rms(x1) @ w_up) @ w_down
        let dx2 = dx;
        let mut hg = tape_l.u.clone();
        for val in hg.data_mut() {
            *val = silu(*val);
        }
        let dhg = dx2.matmul_nt(&layer.w_down)?;
        let mut du = dhg;
        for (dv, &uv) in du.data_mut().iter_mut().zip(tape_l.u.data()) {
            let sig = T::one() / (T::one() + (-uv).exp());
            *dv = *dv * sig * (T::one() + uv * (T::one() - sig));
        }
        let b = crate::tensor::rms_norm(&tape_l.x1, layer.mlp_norm.row(0), T::of_f64(NORM_EPS))?;
        let db = du.matmul_nt(&layer.w_up)?;
        if let Some(w) = grads.weights.as_mut() {
            w.layers[li].w_down.add_assign(&hg.matmul_tn(&dx2)?)?;
            w.layers[li].w_up.add_assign(&b.matmul_tn(&du)?)?;
        }
        let mut dx1 = {
            let mut dgain_holder = grads
                .weights
                .as_mut()
                .map(|w| w.layers[li].mlp_norm.row_mut(0).to_vec());
            let d = rms_norm_backward(
                &db,
                &tape_l.x1,
                layer.mlp_norm.row(0),
                dgain_holder.as_deref_mut(),
            );
            if let (Some(w), Some(dg)) = (grads.weights.as_mut(), dgain_holder) {
                w.layers[li].mlp_norm.row_mut(0).copy_from_slice(&dg);
            }
            d
        };
        dx1.add_assign(&dx2)?;

        // Attention block: x1 = x_in + (heads(rms(x_in))) @ wo
        let do_cat = dx1.matmul_nt(&layer.wo)?;
        if let Some(w) = grads.weights.as_mut() {
            w.layers[li].wo.add_assign(&tape_l.o.matmul_tn(&dx1)?)?;
        }

        let mask = MaskView::new(policy, li, prompt_len.min(n), n)?;
        let mut dq = Tensor2D::<T>::zeros(n, dim);
        let mut dk = Tensor2D::<T>::zeros(n, dim);
        let mut dv = Tensor2D::<T>::zeros(n, dim);
        for i in 0..n {
            for h in 0..cfg.num_heads {
                let lo = h * d;
                let q_head = &tape_l.q.row(i)[lo..lo + d];
                let do_head = &do_cat.row(i)[lo..lo + d];
                // Recompute the probability row (memory-light backward).
                idx_scratch.clear();
                val_scratch.clear();
                dp_scratch.clear();
                let mut max = T::neg_infinity();
                for j in 0..=i {
                    if mask.allows(i, j) {
                        let s = scale * dot(q_head, &tape_l.k.row(j)[lo..lo + d]);
                        if s > max {
                            max = s;
                        }
                        idx_scratch.push(j);
                        val_scratch.push(s);
                    }
                }
                let mut denom = T::zero();
                for s in val_scratch.iter_mut() {
                    *s = (*s - max).exp();
                    denom = denom + *s;
                }
                // dP_j, then dS_j = P_j (dP_j - sum_m P_m dP_m).
                let mut pd_sum = T::zero();
                for (&j, &e) in idx_scratch.iter().zip(val_scratch.iter()) {
                    let p = e / denom;
                    let g = dot(do_head, &tape_l.v.row(j)[lo..lo + d]);
                    dp_scratch.push(g);
                    pd_sum = pd_sum + p * g;
                }
                let dq_head = &mut dq.row_mut(i)[lo..lo + d];
                for ((&j, &e), &g) in
                    idx_scratch.iter().zip(val_scratch.iter()).zip(dp_scratch.iter())
                {
                    let p = e / denom;
                    let ds = p * (g - pd_sum) * scale;
                    axpy(ds, &tape_l.k.row(j)[lo..lo + d], dq_head);
                    axpy(ds, q_head, &mut dk.row_mut(j)[lo..lo + d]);
                    axpy(p, do_head, &mut dv.row_mut(j)[lo..lo + d]);
                }
            }
        }
        // Un-rotate q/k gradients back through the rotary embedding.
        for r in 0..n {
            rope_row_cached(dq.row_mut(r), &rope_tab, r, d, true);
            rope_row_cached(dk.row_mut(r), &rope_tab, r, d, true);
        }

        // Projections (base + low-rank branches).
        let mut da = dq.matmul_nt(&layer.wq)?;
        da.add_assign(&dk.matmul_nt(&layer.wk)?)?;
        da.add_assign(&dv.matmul_nt(&layer.wv)?)?;
        if full {
            let w = grads.weights.as_mut().unwrap();
            w.layers[li].wq.add_assign(&tape_l.a.matmul_tn(&dq)?)?;
            w.layers[li].wk.add_assign(&tape_l.a.matmul_tn(&dk)?)?;
            w.layers[li].wv.add_assign(&tape_l.a.matmul_tn(&dv)?)?;
        }
        if let (Some(pairs), Some(glora)) = (lora, grads.lora.as_mut()) {
            let s = lora_scaling.unwrap();
            let gl = glora.layers[li].as_mut().expect("grad adapter present");
            for (pair, gpair, dout) in [
                (&pairs.q, &mut gl.q, &dq),
                (&pairs.k, &mut gl.k, &dk),
                (&pairs.v, &mut gl.v, &dv),
            ] {
                // y += s * (a @ A) @ B
                let u_l = tape_l.a.matmul(&pair.a)?;
                let mut du_l = dout.matmul_nt(&pair.b)?;
                du_l.scale(s);
                gpair.a.add_assign(&tape_l.a.matmul_tn(&du_l)?)?;
                let mut db_l = u_l.matmul_tn(dout)?;
                db_l.scale(s);
                gpair.b.add_assign(&db_l)?;
                da.add_assign(&du_l.matmul_nt(&pair.a)?)?;
            }
        }

        let mut dx_in = {
            let mut dgain_holder = grads
                .weights
                .as_mut()
                .map(|w| w.layers[li].attn_norm.row_mut(0).to_vec());
            let dxn = rms_norm_backward(
                &da,
                x_in,
                layer.attn_norm.row(0),
                dgain_holder.as_deref_mut(),
            );
            if let (Some(w), Some(dg)) = (grads.weights.as_mut(), dgain_holder) {
                w.layers[li].attn_norm.row_mut(0).copy_from_slice(&dg);
            }
            dxn
        };
        dx_in.add_assign(&dx1)?;
        dx = dx_in;
    }

    if let Some(w) = grads.weights.as_mut() {
        for (r, &tok) in tokens.iter().enumerate() {
            axpy(T::one(), dx.row(r), w.embed.row_mut(tok as usize));
        }
    }
    Ok(())
}

/// Mean cross-entropy over loss-masked positions plus gradients for every
/// trainable parameter. The training policy's masks are active in both the
/// forward and backward passes.
pub fn loss_and_grads<T: Scalar>(
    model: &ToyTransformer<T>,
    batch: &[TrainItem],
    policy: &AttentionPolicy,
    loss_mask: LossMask,
    trainable: Trainable,
) -> Result<(f64, Gradients<T>)> {
    policy.validate(model.config.num_layers)?;
    if trainable == Trainable::LoraOnly
        && !model.adapters.as_ref().is_some_and(|a| a.enabled)
    {
        return Err(Error::Config("lora_only training requires enabled adapters".into()));
    }
    for item in batch {
        if item.tokens.len() > model.config.max_seq_len {
            return Err(Error::Capacity {
                detail: format!(
                    "item of {} tokens exceeds max_seq_len {}",
                    item.tokens.len(),
                    model.config.max_seq_len
                ),
            });
        }
    }
    let m_total: usize = batch.iter().map(|it| it.masked_positions(loss_mask)).sum();
    if m_total == 0 {
        return Err(Error::DegenerateBatch);
    }
    let inv_m = 1.0 / m_total as f64;

    let results: Vec<Result<(f64, Gradients<T>)>> = batch
        .par_iter()
        .map(|item| {
            let tape = forward_tape(model, &item.tokens, policy, item.prompt_len)?;
            let mut grads = Gradients::zeros_for(model, trainable);
            let n = item.tokens.len();
            let vocab = model.config.vocab_size;
            let mut dlogits = Tensor2D::<T>::zeros(n, vocab);
            let mut ce_sum = 0.0;
            for p in 0..n.saturating_sub(1) {
                let in_mask = match loss_mask {
                    LossMask::AllPositions => true,
                    LossMask::AnswerOnly => p + 1 >= item.prompt_len,
                };
                if !in_mask {
                    continue;
                }
                let target = item.tokens[p + 1] as usize;
                let row = tape.logits.row(p);
                let max = row.iter().cloned().fold(T::neg_infinity(), T::max).to_f64();
                let mut denom = 0.0;
                for &v in row {
                    denom += (v.to_f64() - max).exp();
                }
                let log_z = max + denom.ln();
                ce_sum += log_z - row[target].to_f64();
                let drow = dlogits.row_mut(p);
                for (c, &v) in row.iter().enumerate() {
                    let softmax = ((v.to_f64() - max).exp() / denom) * inv_m;
                    let grad = if c == target { softmax - inv_m } else { softmax };
                    drow[c] = T::of_f64(grad);
                }
            }
            backward_item(model, &item.tokens, policy, item.prompt_len, &tape, &dlogits, &mut grads)?;
            Ok((ce_sum, grads))
        })
        .collect();

    let mut total = Gradients::zeros_for(model, trainable);
    let mut loss_sum = 0.0;
    for r in results {
        let (ce, g) = r?;
        loss_sum += ce;
        total.add_assign(&g);
    }
    Ok((loss_sum * inv_m, total))
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

/// Cosine decay to zero with a linear warmup prefix.
pub fn cosine_lr(base_lr: f64, step: usize, total_steps: usize, warmup_frac: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let warmup = ((total_steps as f64 * warmup_frac).ceil() as usize).min(total_steps);
    if step < warmup {
        return base_lr * (step + 1) as f64 / warmup as f64;
    }
    let span = (total_steps - warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam with bias correction. State shapes mirror the trainable parameters.
pub struct Adam<T> {
    m: Gradients<T>,
    v: Gradients<T>,
    step: usize,
}

impl<T: Scalar> Adam<T> {
    pub fn new(model: &ToyTransformer<T>, trainable: Trainable) -> Self {
        Self {
            m: Gradients::zeros_for(model, trainable),
            v: Gradients::zeros_for(model, trainable),
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn apply(&mut self, model: &mut ToyTransformer<T>, grads: &Gradients<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let update = |param: &mut Tensor2D<T>,
                      g: &Tensor2D<T>,
                      m: &mut Tensor2D<T>,
                      v: &mut Tensor2D<T>| {
            let b1 = T::of_f64(ADAM_BETA1);
            let b2 = T::of_f64(ADAM_BETA2);
            let one = T::one();
            for (((p, &gi), mi), vi) in param
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = mi.to_f64() / bc1;
                let vhat = vi.to_f64() / bc2;
                *p = *p - T::of_f64(lr * mhat / (vhat.sqrt() + ADAM_EPS));
            }
        };
        if let (Some(gw), Some(mw), Some(vw)) =
            (grads.weights.as_ref(), self.m.weights.as_mut(), self.v.weights.as_mut())
        {
            let mut mb = mw.blocks_mut();
            let mut vb = vw.blocks_mut();
            for ((param, g), i) in model.weights.blocks_mut().into_iter().zip(gw.blocks()).zip(0..)
            {
                update(param, g, mb[i], vb[i]);
            }
        }
        if let (Some(gl), Some(ml), Some(vl)) = (
            grads.lora.as_ref(),
            self.m.lora.as_mut(),
            self.v.lora.as_mut(),
        ) {
            if let Some(adapters) = model.adapters.as_mut() {
                let mut mb = ml.blocks_mut();
                let mut vb = vl.blocks_mut();
                for ((param, g), i) in
                    adapters.blocks_mut().into_iter().zip(gl.blocks()).zip(0..)
                {
                    update(param, g, mb[i], vb[i]);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Distillation pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillItem {
    pub prompt: Vec<u32>,
    pub answer: Vec<u32>,
    pub correct: bool,
}

/// Teacher-sampled training set, filtered for correctness.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillationSet {
    pub items: Vec<DistillItem>,
    pub samples_per_question: usize,
    pub temperature: f64,
    /// Questions where no sample was correct (dropped entirely).
    pub dropped_questions: usize,
    pub total_samples: usize,
}

impl DistillationSet {
    pub fn kept_fraction(&self) -> f64 {
        if self.total_samples == 0 {
            0.0
        } else {
            self.items.len() as f64 / self.total_samples as f64
        }
    }

    pub fn train_items(&self) -> Vec<TrainItem> {
        self.items
            .iter()
            .filter(|it| it.correct)
            .map(|it| {
                let mut tokens = it.prompt.clone();
                let prompt_len = tokens.len();
                tokens.extend_from_slice(&it.answer);
                TrainItem { tokens, prompt_len }
            })
            .collect()
    }

    pub fn write_jsonl(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let meta = serde_json::json!({
            "samples_per_question": self.samples_per_question,
            "temperature": self.temperature,
            "dropped_questions": self.dropped_questions,
            "total_samples": self.total_samples,
        });
        writeln!(f, "{meta}")?;
        for item in &self.items {
            writeln!(f, "{}", serde_json::to_string(item)?)?;
        }
        Ok(())
    }

    pub fn read_jsonl(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let meta: serde_json::Value = serde_json::from_str(
            lines.next().ok_or_else(|| Error::Serde("empty distillation file".into()))?,
        )?;
        let items: Vec<DistillItem> =
            lines.map(serde_json::from_str).collect::<std::result::Result<_, _>>()?;
        Ok(Self {
            samples_per_question: meta["samples_per_question"].as_u64().unwrap_or(0) as usize,
            temperature: meta["temperature"].as_f64().unwrap_or(0.0),
            dropped_questions: meta["dropped_questions"].as_u64().unwrap_or(0) as usize,
            total_samples: meta["total_samples"].as_u64().unwrap_or(0) as usize,
            items,
        })
    }
}

/// Sample `samples_per_question` answers per question from the full-attention
/// teacher, keep the ones that exactly match the canonical answer
/// (duplicates allowed), and report the drop count.
pub fn build_distillation_set<T: Scalar>(
    teacher: &ToyTransformer<T>,
    questions: &[TaskInstance],
    samples_per_question: usize,
    temperature: f64,
    seed: u64,
) -> Result<DistillationSet> {
    let policy = AttentionPolicy::full();
    let results: Vec<Result<Vec<DistillItem>>> = questions
        .par_iter()
        .enumerate()
        .map(|(qi, inst)| {
            let mut kept = Vec::new();
            for s in 0..samples_per_question {
                let sample_seed = derive_seed(seed, qi as u64, s as u64);
                let max_new = inst.answer_budget();
                let generated = teacher.generate(
                    &inst.prompt,
                    &policy,
                    max_new,
                    temperature,
                    sample_seed,
                    Some(crate::tasks::EOS),
                )?;
                let verdict = score(inst, &generated);
                if verdict.correct {
                    let mut answer = generated;
                    answer.push(crate::tasks::EOS);
                    kept.push(DistillItem { prompt: inst.prompt.clone(), answer, correct: true });
                }
            }
            Ok(kept)
        })
        .collect();

    let mut items = Vec::new();
    let mut dropped = 0;
    for r in results {
        let kept = r?;
        if kept.is_empty() {
            dropped += 1;
        }
        items.extend(kept);
    }
    Ok(DistillationSet {
        items,
        samples_per_question,
        temperature,
        dropped_questions: dropped,
        total_samples: questions.len() * samples_per_question,
    })
}

pub(crate) fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    // splitmix-style mixing, stable across platforms
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRun {
    pub steps: usize,
    pub loss_curve: Vec<f64>,
    pub final_loss: f64,
    pub final_checksum: String,
}

/// Fine-tune on a distillation set for `config.epochs` epochs under the given
/// attention policy. Aborts with a divergence error if the loss stays above
/// 10x the initial loss for 50 consecutive steps.
pub fn finetune<T: Scalar>(
    model: &mut ToyTransformer<T>,
    set: &DistillationSet,
    policy: &AttentionPolicy,
    config: &TrainConfig,
) -> Result<TrainRun> {
    let items = set.train_items();
    if items.is_empty() {
        return Err(Error::Config("distillation set has no correct items".into()));
    }
    train_epochs(model, &items, policy, config)
}

/// Epoch-based supervised loop over a fixed item set (shuffled per epoch).
pub fn train_epochs<T: Scalar>(
    model: &mut ToyTransformer<T>,
    items: &[TrainItem],
    policy: &AttentionPolicy,
    config: &TrainConfig,
) -> Result<TrainRun> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let steps_per_epoch = items.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut opt = Adam::new(model, config.trainable);
    let mut curve = Vec::with_capacity(total_steps);
    let mut guard = DivergenceGuard::new();

    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut step = 0;
    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<TrainItem> = chunk.iter().map(|&i| items[i].clone()).collect();
            let (loss, grads) =
                loss_and_grads(model, &batch, policy, config.loss_mask, config.trainable)?;
            let lr = cosine_lr(config.learning_rate, step, total_steps, config.warmup_frac);
            opt.apply(model, &grads, lr);
            curve.push(loss);
            guard.observe(step, loss)?;
            step += 1;
        }
    }
    Ok(TrainRun {
        steps: step,
        final_loss: curve.last().copied().unwrap_or(f64::NAN),
        loss_curve: curve,
        final_checksum: checkpoint::checksum(model),
    })
}

pub(crate) struct DivergenceGuard {
    initial: Option<f64>,
    consecutive: usize,
}

impl DivergenceGuard {
    pub(crate) fn new() -> Self {
        Self { initial: None, consecutive: 0 }
    }

    pub(crate) fn observe(&mut self, step: usize, loss: f64) -> Result<()> {
        let initial = *self.initial.get_or_insert(loss);
        let limit = DIVERGENCE_FACTOR * initial;
        if !loss.is_finite() || loss > limit {
            self.consecutive += 1;
        } else {
            self.consecutive = 0;
        }
        if self.consecutive >= DIVERGENCE_WINDOW {
            return Err(Error::Diverged { step, loss, limit, window: DIVERGENCE_WINDOW });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LoraTargets;

    fn cfg() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            num_heads: 2,
            model_dim: 16,
            head_dim: 8,
            mlp_dim: 24,
            vocab_size: 20,
            max_seq_len: 32,
            theta_base: 10_000.0,
        }
    }

    fn item(seed: u64, len: usize, prompt_len: usize) -> TrainItem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TrainItem {
            tokens: (0..len).map(|_| rng.gen_range(0..20)).collect(),
            prompt_len,
        }
    }

    #[test]
    fn uniform_logits_give_ln_vocab_loss() {
        // Near-zero init makes logits nearly uniform over the vocabulary.
        let model = ToyTransformer::<f64>::init(cfg(), 1).unwrap();
        let batch = vec![item(2, 16, 4), item(3, 12, 4)];
        let (loss, _) = loss_and_grads(
            &model,
            &batch,
            &AttentionPolicy::full(),
            LossMask::AnswerOnly,
            Trainable::Full,
        )
        .unwrap();
        let want = (20.0f64).ln();
        assert!((loss - want).abs() / want < 0.05, "loss {loss} vs ln V {want}");
    }

    #[test]
    fn empty_loss_mask_is_degenerate_batch() {
        let model = ToyTransformer::<f64>::init(cfg(), 1).unwrap();
        let batch = vec![item(2, 8, 8)]; // prompt covers everything
        let r = loss_and_grads(
            &model,
            &batch,
            &AttentionPolicy::full(),
            LossMask::AnswerOnly,
            Trainable::Full,
        );
        assert!(matches!(r, Err(Error::DegenerateBatch)));
    }

    /// Central finite differences over every entry of every parameter block.
    fn finite_diff_check(policy: &AttentionPolicy, with_lora: bool, tol: f64) {
        let mut model = ToyTransformer::<f64>::init(cfg(), 11).unwrap();
        if with_lora {
            model.attach_lora(2, 8.0, LoraTargets::AllLayers, policy, 5);
            // Move B off zero so its gradient path is exercised.
            if let Some(ad) = &mut model.adapters {
                let mut rng = ChaCha8Rng::seed_from_u64(99);
                for layer in ad.layers.iter_mut().flatten() {
                    for pair in [&mut layer.q, &mut layer.k, &mut layer.v] {
                        for v in pair.b.data_mut() {
                            *v = rng.gen_range(-0.02..0.02);
                        }
                    }
                }
            }
        }
        let batch = vec![item(7, 12, 5)];
        let loss_of = |m: &ToyTransformer<f64>| -> f64 {
            loss_and_grads(m, &batch, policy, LossMask::AnswerOnly, Trainable::Full)
                .unwrap()
                .0
        };
        let (_, grads) =
            loss_and_grads(&model, &batch, policy, LossMask::AnswerOnly, Trainable::Full)
                .unwrap();

        let h = 1e-5;
        let names = Weights::<f64>::block_names(model.config.num_layers);
        let gw = grads.weights.as_ref().unwrap();
        for (bi, name) in names.iter().enumerate() {
            let block_len = gw.blocks()[bi].data().len();
            // Probe a subset of entries per block to keep unit tests fast;
            // the acceptance suite sweeps every entry.
            let probe: Vec<usize> = (0..block_len).step_by((block_len / 6).max(1)).collect();
            for &e in &probe {
                let analytic = gw.blocks()[bi].data()[e];
                let mut plus = model.clone();
                plus.weights.blocks_mut()[bi].data_mut()[e] += h;
                let mut minus = model.clone();
                minus.weights.blocks_mut()[bi].data_mut()[e] -= h;
                let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let denom = analytic.abs().max(numeric.abs()).max(1e-6);
                let rel = (analytic - numeric).abs() / denom;
                assert!(
                    rel < tol,
                    "{name}[{e}]: analytic {analytic:.3e} vs numeric {numeric:.3e} (rel {rel:.3e})"
                );
            }
        }
        if with_lora {
            let gl = grads.lora.as_ref().unwrap();
            let lnames = model.adapters.as_ref().unwrap().block_names();
            for (bi, name) in lnames.iter().enumerate() {
                let block_len = gl.blocks()[bi].data().len();
                let probe: Vec<usize> = (0..block_len).step_by((block_len / 4).max(1)).collect();
                for &e in &probe {
                    let analytic = gl.blocks()[bi].data()[e];
                    let mut plus = model.clone();
                    plus.adapters.as_mut().unwrap().blocks_mut()[bi].data_mut()[e] += h;
                    let mut minus = model.clone();
                    minus.adapters.as_mut().unwrap().blocks_mut()[bi].data_mut()[e] -= h;
                    let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
                    let rel = (analytic - numeric).abs() / denom;
                    assert!(rel < tol, "{name}[{e}]: rel {rel:.3e}");
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_full_attention() {
        finite_diff_check(&AttentionPolicy::full(), false, 1e-4);
    }

    #[test]
    fn gradients_match_finite_differences_windowed() {
        finite_diff_check(&AttentionPolicy::pure_swa(3), false, 1e-4);
    }

    #[test]
    fn gradients_match_finite_differences_all_mechanisms() {
        let policy = AttentionPolicy::pure_swa(3)
            .with_keep_first(2)
            .with_fa_layers([1])
            .with_fa_decode(true);
        finite_diff_check(&policy, false, 1e-4);
    }

    #[test]
    fn gradients_match_finite_differences_with_lora() {
        let policy = AttentionPolicy::pure_swa(4).with_fa_decode(true);
        finite_diff_check(&policy, true, 1e-4);
    }

    #[test]
    fn lora_only_training_never_touches_base_weights() {
        let mut model = ToyTransformer::<f32>::init(cfg(), 13).unwrap();
        let policy = AttentionPolicy::pure_swa(4);
        model.attach_lora(2, 8.0, LoraTargets::AllLayers, &policy, 3);
        let base_before = model.weights.clone();
        let items: Vec<TrainItem> = (0..6).map(|i| item(i, 14, 6)).collect();
        let config = TrainConfig {
            learning_rate: 1e-2,
            warmup_frac: 0.0,
            epochs: 2,
            batch_size: 3,
            seed: 4,
            trainable: Trainable::LoraOnly,
            loss_mask: LossMask::AnswerOnly,
        };
        train_epochs(&mut model, &items, &policy, &config).unwrap();
        assert_eq!(model.weights, base_before);
        // Adapters must have moved.
        let moved = model
            .adapters
            .as_ref()
            .unwrap()
            .blocks()
            .iter()
            .any(|b| b.data().iter().any(|&v| v != 0.0 && v.abs() > 1e-9));
        assert!(moved);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut model = ToyTransformer::<f32>::init(cfg(), 17).unwrap();
        let before = model.clone();
        let batch = vec![item(1, 12, 4)];
        let (loss1, grads) = loss_and_grads(
            &model,
            &batch,
            &AttentionPolicy::full(),
            LossMask::AnswerOnly,
            Trainable::Full,
        )
        .unwrap();
        let mut opt = Adam::new(&model, Trainable::Full);
        opt.apply(&mut model, &grads, 0.0);
        assert_eq!(model.weights, before.weights);
        let (loss2, _) = loss_and_grads(
            &model,
            &batch,
            &AttentionPolicy::full(),
            LossMask::AnswerOnly,
            Trainable::Full,
        )
        .unwrap();
        assert_eq!(loss1, loss2);
    }

    #[test]
    fn cosine_schedule_shape() {
        let base = 1e-3;
        let total = 100;
        // Warmup ramps up.
        assert!(cosine_lr(base, 0, total, 0.03) < base);
        // Peak right after warmup.
        let peak = cosine_lr(base, 3, total, 0.03);
        assert!((peak - base).abs() < 1e-9);
        // Decays toward zero.
        let end = cosine_lr(base, total - 1, total, 0.03);
        assert!(end < 0.01 * base);
        let mid = cosine_lr(base, total / 2, total, 0.03);
        assert!(end < mid && mid < peak);
    }

    #[test]
    fn train_epochs_reproducible() {
        let items: Vec<TrainItem> = (0..8).map(|i| item(i + 100, 14, 6)).collect();
        let config = TrainConfig {
            learning_rate: 3e-3,
            warmup_frac: 0.03,
            epochs: 1,
            batch_size: 4,
            seed: 42,
            trainable: Trainable::Full,
            loss_mask: LossMask::AnswerOnly,
        };
        let policy = AttentionPolicy::pure_swa(4);
        let mut m1 = ToyTransformer::<f32>::init(cfg(), 5).unwrap();
        let r1 = train_epochs(&mut m1, &items, &policy, &config).unwrap();
        let mut m2 = ToyTransformer::<f32>::init(cfg(), 5).unwrap();
        let r2 = train_epochs(&mut m2, &items, &policy, &config).unwrap();
        assert_eq!(r1.final_checksum, r2.final_checksum);
        assert!((r1.final_loss - r2.final_loss).abs() < 1e-6);
    }

    #[test]
    fn divergence_guard_trips() {
        let mut guard = DivergenceGuard::new();
        guard.observe(0, 1.0).unwrap();
        for step in 1..DIVERGENCE_WINDOW {
            guard.observe(step, 100.0).unwrap();
        }
        let r = guard.observe(DIVERGENCE_WINDOW, 100.0);
        assert!(matches!(r, Err(Error::Diverged { .. })));
    }

    #[test]
    fn masked_positions_respect_answer_span() {
        let it = TrainItem { tokens: vec![1, 2, 3, 4, 5], prompt_len: 3 };
        assert_eq!(it.masked_positions(LossMask::AnswerOnly), 2); // predicts tokens[3], tokens[4]
        assert_eq!(it.masked_positions(LossMask::AllPositions), 4);
    }
}
