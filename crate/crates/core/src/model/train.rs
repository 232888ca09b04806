//! Memorization training: batched forward with cached activations, manual
//! backward pass, AdamW.
//!
//! Sequences of different lengths are stacked row-wise so every projection is
//! one large matrix product; only attention runs per sequence. The loss is
//! next-token cross-entropy at the last position (the object slot).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{argmax, LayerLayout, Model, Parameters, TensorRange};
use crate::error::{Error, Result};
use crate::kb::{
    render_prompt, KnowledgeBase, PromptItem, RelationId, TemplateKind, TemplateRegistry, TokenId, MAIN_TEMPLATE,
};
use crate::tensor::{gelu, gelu_grad, gemm, linear, moments, softmax_in_place};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup: usize,
    /// Final learning rate as a fraction of `lr` (cosine decay).
    pub min_lr_ratio: f32,
    pub weight_decay: f32,
    pub grad_clip: f32,
    pub seed: u64,
    /// Templates rendered into the training corpus.
    pub templates: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr: 1e-3,
            warmup: 100,
            min_lr_ratio: 0.1,
            weight_decay: 0.3,
            grad_clip: 1.0,
            seed: 1,
            templates: vec![MAIN_TEMPLATE.to_string()],
        }
    }
}

impl TrainConfig {
    fn lr_at(&self, step: usize) -> f32 {
        if step < self.warmup {
            return self.lr * (step + 1) as f32 / self.warmup as f32;
        }
        let span = (self.steps - self.warmup).max(1) as f32;
        let t = ((step - self.warmup) as f32 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f32::consts::PI * t).cos());
        self.lr * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cos)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingExample {
    pub tokens: Vec<TokenId>,
    pub target: TokenId,
    pub relation: RelationId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub steps: usize,
    /// Mean batch loss per step.
    pub loss: Vec<f32>,
    /// Full-prompt (main template) top-1 accuracy per relation label.
    pub per_relation_accuracy: Vec<(String, f64)>,
    pub accuracy: f64,
}

/// Every fact of `kb` rendered with each listed template (full or inquiry
/// kinds; zero-shot templates carry no relation and are rejected).
pub fn training_examples(
    kb: &KnowledgeBase,
    registry: &TemplateRegistry,
    templates: &[String],
) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::new();
    for id in templates {
        let t = registry.get(id)?;
        if t.kind == TemplateKind::ZeroShot {
            return Err(Error::Config(format!("cannot train on zero-shot template {id}")));
        }
        for f in kb.all_facts() {
            let seq = render_prompt(kb, PromptItem::Fact { subject: f.subject, relation: f.relation }, t)?;
            out.push(TrainingExample { tokens: seq.tokens, target: f.object, relation: f.relation });
        }
    }
    Ok(out)
}

/// Train `params` to memorize `kb`. Deterministic in `cfg.seed`.
pub fn train(
    params: Parameters,
    kb: &KnowledgeBase,
    registry: &TemplateRegistry,
    cfg: &TrainConfig,
) -> Result<(Parameters, TrainMetrics)> {
    let examples = training_examples(kb, registry, &cfg.templates)?;
    if examples.is_empty() || cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(Error::Config("training needs examples, steps and a positive batch size".into()));
    }
    let longest = examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
    if longest > params.cfg.max_context {
        return Err(Error::ContextOverflow { needed: longest, max: params.cfg.max_context });
    }
    if let Some(e) = examples.iter().find(|e| e.target as usize >= params.cfg.vocab_size) {
        return Err(Error::Config(format!("object token {} outside model vocabulary", e.target)));
    }
    let mut params = params;
    let n = params.data.len();
    let mut grad = vec![0.0f32; n];
    let mut adam_m = vec![0.0f32; n];
    let mut adam_v = vec![0.0f32; n];
    let decay_mask = decay_mask(&params);
    let (b1, b2, eps) = (0.9f32, 0.98f32, 1e-8f32);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(examples.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&examples[order[cursor]]);
            cursor += 1;
        }
        grad.fill(0.0);
        let loss = loss_and_grad(&params, &batch, Some(&mut grad));
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite loss {loss} at step {step}")));
        }
        history.push(loss);

        let norm = grad.iter().map(|g| (*g as f64).powi(2)).sum::<f64>().sqrt() as f32;
        let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
        let lr = cfg.lr_at(step);
        let t = (step + 1) as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for i in 0..n {
            let g = grad[i] * clip;
            adam_m[i] = b1 * adam_m[i] + (1.0 - b1) * g;
            adam_v[i] = b2 * adam_v[i] + (1.0 - b2) * g * g;
            let update = (adam_m[i] / c1) / ((adam_v[i] / c2).sqrt() + eps);
            let wd = if decay_mask[i] { cfg.weight_decay * params.data[i] } else { 0.0 };
            params.data[i] -= lr * (update + wd);
        }
        if !params.all_finite() {
            return Err(Error::Training(format!("parameters diverged at step {step}")));
        }
    }

    let model = Model::new(params)?;
    let (per_relation_accuracy, accuracy) = full_prompt_accuracy(&model, kb, registry)?;
    let metrics = TrainMetrics { steps: cfg.steps, loss: history, per_relation_accuracy, accuracy };
    Ok((model.into_params(), metrics))
}

/// Per-relation and overall top-1 accuracy on the main template.
pub(crate) fn full_prompt_accuracy(
    model: &Model,
    kb: &KnowledgeBase,
    registry: &TemplateRegistry,
) -> Result<(Vec<(String, f64)>, f64)> {
    let t = registry.get(MAIN_TEMPLATE)?;
    let mut hits = vec![(0usize, 0usize); kb.relations().len()];
    for f in kb.all_facts() {
        let seq = render_prompt(kb, PromptItem::Fact { subject: f.subject, relation: f.relation }, t)?;
        let pred = argmax(&model.last_logits(&seq.tokens)?);
        let h = &mut hits[f.relation.0];
        h.1 += 1;
        if pred == f.object {
            h.0 += 1;
        }
    }
    let per =
        kb.relation_ids().map(|r| (kb.relation_label(r), hits[r.0].0 as f64 / hits[r.0].1.max(1) as f64)).collect();
    let (c, n) = hits.iter().fold((0, 0), |(c, n), h| (c + h.0, n + h.1));
    Ok((per, c as f64 / n.max(1) as f64))
}

fn decay_mask(params: &Parameters) -> Vec<bool> {
    let mut mask = vec![false; params.data.len()];
    for (_, t) in params.layout.named_tensors() {
        if t.is_matrix() {
            mask[t.range()].fill(true);
        }
    }
    mask
}

// ---------------------------------------------------------------------------
// Forward with caches
// ---------------------------------------------------------------------------

struct LayerCache {
    xhat1: Vec<f32>,
    rstd1: Vec<f32>,
    h1: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    /// Per sequence, per head, a `T×T` lower-triangular probability block.
    probs: Vec<f32>,
    attn: Vec<f32>,
    xhat2: Vec<f32>,
    rstd2: Vec<f32>,
    h2: Vec<f32>,
    u: Vec<f32>,
    g: Vec<f32>,
}

struct Batch {
    tokens: Vec<TokenId>,
    positions: Vec<usize>,
    /// `(row offset, length)` per sequence.
    seqs: Vec<(usize, usize)>,
    prob_offsets: Vec<usize>,
    targets: Vec<TokenId>,
}

impl Batch {
    fn new(examples: &[&TrainingExample], n_heads: usize) -> Self {
        let mut b = Batch { tokens: vec![], positions: vec![], seqs: vec![], prob_offsets: vec![], targets: vec![] };
        let mut prob_off = 0;
        for e in examples {
            b.seqs.push((b.tokens.len(), e.tokens.len()));
            b.prob_offsets.push(prob_off);
            prob_off += n_heads * e.tokens.len() * e.tokens.len();
            b.tokens.extend_from_slice(&e.tokens);
            b.positions.extend(0..e.tokens.len());
            b.targets.push(e.target);
        }
        b
    }

    fn rows(&self) -> usize {
        self.tokens.len()
    }

    fn prob_len(&self, n_heads: usize) -> usize {
        self.seqs.iter().map(|&(_, t)| n_heads * t * t).sum()
    }
}

fn ln_forward(x: &[f32], gain: &[f32], bias: &[f32], xhat: &mut [f32], rstd: &mut [f32], out: &mut [f32]) {
    let d = gain.len();
    for (r, xr) in x.chunks_exact(d).enumerate() {
        let (mean, rs) = moments(xr);
        rstd[r] = rs;
        for c in 0..d {
            let h = (xr[c] - mean) * rs;
            xhat[r * d + c] = h;
            out[r * d + c] = h * gain[c] + bias[c];
        }
    }
}

/// Accumulates into `dx`, `dgain`, `dbias`.
fn ln_backward(
    dy: &[f32],
    xhat: &[f32],
    rstd: &[f32],
    gain: &[f32],
    dgain: &mut [f32],
    dbias: &mut [f32],
    dx: &mut [f32],
) {
    let d = gain.len();
    let mut dxhat = vec![0.0f32; d];
    for r in 0..rstd.len() {
        let (dyr, xr) = (&dy[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_x = 0.0;
        for c in 0..d {
            dgain[c] += dyr[c] * xr[c];
            dbias[c] += dyr[c];
            dxhat[c] = dyr[c] * gain[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_x += dxhat[c] * xr[c];
        }
        mean_dxhat /= d as f32;
        mean_dxhat_x /= d as f32;
        for c in 0..d {
            dx[r * d + c] += rstd[r] * (dxhat[c] - mean_dxhat - xr[c] * mean_dxhat_x);
        }
    }
}

fn col_sum_into(x: &[f32], cols: usize, out: &mut [f32]) {
    for row in x.chunks_exact(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

struct Split<'a> {
    data: &'a mut [f32],
}

impl Split<'_> {
    fn get(&mut self, t: TensorRange) -> &mut [f32] {
        &mut self.data[t.range()]
    }
}

/// Mean cross-entropy of the batch at each sequence's last position; when
/// `grad` is given, accumulates the gradient of that mean into it.
pub(crate) fn loss_and_grad(params: &Parameters, examples: &[&TrainingExample], grad: Option<&mut [f32]>) -> f32 {
    let (loss, _) = loss_grad_logits(params, examples, grad);
    loss
}

#[allow(clippy::needless_range_loop)]
fn loss_grad_logits(params: &Parameters, examples: &[&TrainingExample], grad: Option<&mut [f32]>) -> (f32, Vec<f32>) {
    let cfg = params.cfg;
    let lay = &params.layout;
    let (d, f, v, nh, hd) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.n_heads, cfg.head_dim());
    let scale = 1.0 / (hd as f32).sqrt();
    let batch = Batch::new(examples, nh);
    let n = batch.rows();
    let bsz = batch.seqs.len();

    // embeddings
    let mut x = vec![0.0f32; n * d];
    {
        let (emb, pos) = (params.get(lay.tok_emb), params.get(lay.pos_emb));
        for r in 0..n {
            let (t, p) = (batch.tokens[r] as usize, batch.positions[r]);
            for c in 0..d {
                x[r * d + c] = emb[t * d + c] + pos[p * d + c];
            }
        }
    }

    let mut caches: Vec<LayerCache> = Vec::with_capacity(cfg.n_layers);
    for w in &lay.layers {
        let mut c = LayerCache {
            xhat1: vec![0.0; n * d],
            rstd1: vec![0.0; n],
            h1: vec![0.0; n * d],
            q: vec![0.0; n * d],
            k: vec![0.0; n * d],
            v: vec![0.0; n * d],
            probs: vec![0.0; batch.prob_len(nh)],
            attn: vec![0.0; n * d],
            xhat2: vec![0.0; n * d],
            rstd2: vec![0.0; n],
            h2: vec![0.0; n * d],
            u: vec![0.0; n * f],
            g: vec![0.0; n * f],
        };
        ln_forward(&x, params.get(w.ln1_g), params.get(w.ln1_b), &mut c.xhat1, &mut c.rstd1, &mut c.h1);
        linear(&c.h1, n, params.get(w.wq), params.get(w.bq), d, d, &mut c.q);
        linear(&c.h1, n, params.get(w.wk), params.get(w.bk), d, d, &mut c.k);
        linear(&c.h1, n, params.get(w.wv), params.get(w.bv), d, d, &mut c.v);
        for (s, &(o, t)) in batch.seqs.iter().enumerate() {
            for head in 0..nh {
                let off = head * hd;
                let pbase = batch.prob_offsets[s] + head * t * t;
                for i in 0..t {
                    let qi = &c.q[(o + i) * d + off..(o + i) * d + off + hd];
                    let row = &mut c.probs[pbase + i * t..pbase + i * t + i + 1];
                    for (j, pj) in row.iter_mut().enumerate() {
                        let kj = &c.k[(o + j) * d + off..(o + j) * d + off + hd];
                        *pj = crate::tensor::dot(qi, kj) * scale;
                    }
                    softmax_in_place(row);
                    for j in 0..=i {
                        let a = c.probs[pbase + i * t + j];
                        for e in 0..hd {
                            c.attn[(o + i) * d + off + e] += a * c.v[(o + j) * d + off + e];
                        }
                    }
                }
            }
        }
        let mut proj = vec![0.0; n * d];
        linear(&c.attn, n, params.get(w.wo), params.get(w.bo), d, d, &mut proj);
        x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);
        ln_forward(&x, params.get(w.ln2_g), params.get(w.ln2_b), &mut c.xhat2, &mut c.rstd2, &mut c.h2);
        linear(&c.h2, n, params.get(w.w1), params.get(w.b1), d, f, &mut c.u);
        for (g, u) in c.g.iter_mut().zip(&c.u) {
            *g = gelu(*u);
        }
        linear(&c.g, n, params.get(w.w2), params.get(w.b2), f, d, &mut proj);
        x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);
        caches.push(c);
    }

    // head on last rows
    let last_rows: Vec<usize> = batch.seqs.iter().map(|&(o, t)| o + t - 1).collect();
    let mut xl = vec![0.0f32; bsz * d];
    for (b, &r) in last_rows.iter().enumerate() {
        xl[b * d..(b + 1) * d].copy_from_slice(&x[r * d..(r + 1) * d]);
    }
    let mut zhat = vec![0.0; bsz * d];
    let mut zr = vec![0.0; bsz];
    let mut z = vec![0.0; bsz * d];
    ln_forward(&xl, params.get(lay.lnf_g), params.get(lay.lnf_b), &mut zhat, &mut zr, &mut z);
    let mut logits = vec![0.0; bsz * v];
    gemm(bsz, d, v, &z, false, params.get(lay.head), false, &mut logits, false);
    let raw_logits = logits.clone();
    let mut loss = 0.0f64;
    for (b, row) in logits.chunks_exact_mut(v).enumerate() {
        softmax_in_place(row);
        loss -= (row[batch.targets[b] as usize].max(f32::MIN_POSITIVE) as f64).ln();
    }
    let loss = (loss / bsz as f64) as f32;

    let Some(grad) = grad else {
        return (loss, raw_logits);
    };
    let mut gs = Split { data: grad };

    // dlogits = (p - onehot) / B, reusing the probability buffer
    let mut dlogits = logits;
    for (b, row) in dlogits.chunks_exact_mut(v).enumerate() {
        row[batch.targets[b] as usize] -= 1.0;
        row.iter_mut().for_each(|x| *x /= bsz as f32);
    }
    gemm(d, bsz, v, &z, true, &dlogits, false, gs.get(lay.head), true);
    let mut dz = vec![0.0; bsz * d];
    gemm(bsz, v, d, &dlogits, false, params.get(lay.head), true, &mut dz, false);
    let mut dxl = vec![0.0; bsz * d];
    {
        let mut dg = vec![0.0; d];
        let mut db = vec![0.0; d];
        ln_backward(&dz, &zhat, &zr, params.get(lay.lnf_g), &mut dg, &mut db, &mut dxl);
        add_into(gs.get(lay.lnf_g), &dg);
        add_into(gs.get(lay.lnf_b), &db);
    }
    let mut dx = vec![0.0f32; n * d];
    for (b, &r) in last_rows.iter().enumerate() {
        dx[r * d..(r + 1) * d].copy_from_slice(&dxl[b * d..(b + 1) * d]);
    }

    for (w, c) in lay.layers.iter().zip(&caches).rev() {
        backward_block(params, w, c, &batch, &mut dx, &mut gs, scale);
    }

    {
        let (te, pe) = (lay.tok_emb, lay.pos_emb);
        for r in 0..n {
            let (t, p) = (batch.tokens[r] as usize, batch.positions[r]);
            let row = &dx[r * d..(r + 1) * d];
            add_into(&mut gs.get(te)[t * d..(t + 1) * d], row);
            add_into(&mut gs.get(pe)[p * d..(p + 1) * d], row);
        }
    }
    (loss, raw_logits)
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

#[allow(clippy::needless_range_loop)]
fn backward_block(
    params: &Parameters,
    w: &LayerLayout,
    c: &LayerCache,
    batch: &Batch,
    dx: &mut [f32],
    gs: &mut Split<'_>,
    scale: f32,
) {
    let cfg = params.cfg;
    let (d, f, nh, hd) = (cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.head_dim());
    let n = batch.rows();

    // MLP: x_out = x_mid + W2·gelu(W1·LN2(x_mid))
    gemm(f, n, d, &c.g, true, dx, false, gs.get(w.w2), true);
    col_sum_into(dx, d, gs.get(w.b2));
    let mut du = vec![0.0; n * f];
    gemm(n, d, f, dx, false, params.get(w.w2), true, &mut du, false);
    for (g, u) in du.iter_mut().zip(&c.u) {
        *g *= gelu_grad(*u);
    }
    gemm(d, n, f, &c.h2, true, &du, false, gs.get(w.w1), true);
    col_sum_into(&du, f, gs.get(w.b1));
    let mut dh = vec![0.0; n * d];
    gemm(n, f, d, &du, false, params.get(w.w1), true, &mut dh, false);
    {
        let mut dg = vec![0.0; d];
        let mut db = vec![0.0; d];
        ln_backward(&dh, &c.xhat2, &c.rstd2, params.get(w.ln2_g), &mut dg, &mut db, dx);
        add_into(gs.get(w.ln2_g), &dg);
        add_into(gs.get(w.ln2_b), &db);
    }
    // dx now holds d(x_mid)

    gemm(d, n, d, &c.attn, true, dx, false, gs.get(w.wo), true);
    col_sum_into(dx, d, gs.get(w.bo));
    let mut dattn = vec![0.0; n * d];
    gemm(n, d, d, dx, false, params.get(w.wo), true, &mut dattn, false);

    let mut dq = vec![0.0f32; n * d];
    let mut dk = vec![0.0f32; n * d];
    let mut dv = vec![0.0f32; n * d];
    let mut dp = Vec::new();
    for (s, &(o, t)) in batch.seqs.iter().enumerate() {
        for head in 0..nh {
            let off = head * hd;
            let pbase = batch.prob_offsets[s] + head * t * t;
            for i in 0..t {
                let da = &dattn[(o + i) * d + off..(o + i) * d + off + hd];
                let p = &c.probs[pbase + i * t..pbase + i * t + i + 1];
                dp.clear();
                for j in 0..=i {
                    let vj = &c.v[(o + j) * d + off..(o + j) * d + off + hd];
                    dp.push(crate::tensor::dot(da, vj));
                    for e in 0..hd {
                        dv[(o + j) * d + off + e] += p[j] * da[e];
                    }
                }
                let inner: f32 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for e in 0..hd {
                        dq[(o + i) * d + off + e] += ds * c.k[(o + j) * d + off + e];
                        dk[(o + j) * d + off + e] += ds * c.q[(o + i) * d + off + e];
                    }
                }
            }
        }
    }

    let mut dh1 = vec![0.0f32; n * d];
    for (dm, wt, bt) in [(&dq, w.wq, w.bq), (&dk, w.wk, w.bk), (&dv, w.wv, w.bv)] {
        gemm(d, n, d, &c.h1, true, dm, false, gs.get(wt), true);
        col_sum_into(dm, d, gs.get(bt));
        gemm(n, d, d, dm, false, params.get(wt), true, &mut dh1, true);
    }
    let mut dg = vec![0.0; d];
    let mut db = vec![0.0; d];
    ln_backward(&dh1, &c.xhat1, &c.rstd1, params.get(w.ln1_g), &mut dg, &mut db, dx);
    add_into(gs.get(w.ln1_g), &dg);
    add_into(gs.get(w.ln1_b), &db);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::{generate_kb, KbConfig};
    use crate::model::{init_model, ModelConfig};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig { n_layers: 2, d_model: 8, n_heads: 2, vocab_size: 20, max_context: 8, d_ff: 12, seed: 3 }
    }

    fn examples() -> Vec<TrainingExample> {
        vec![
            TrainingExample { tokens: vec![1, 2, 3, 4], target: 7, relation: RelationId(0) },
            TrainingExample { tokens: vec![5, 2, 9], target: 11, relation: RelationId(0) },
            TrainingExample { tokens: vec![3, 3, 3, 1, 0, 6], target: 2, relation: RelationId(0) },
        ]
    }

    #[test]
    fn batched_logits_match_inference() {
        let p = init_model(&tiny_cfg()).unwrap();
        let ex = examples();
        let refs: Vec<&TrainingExample> = ex.iter().collect();
        let (_, logits) = loss_grad_logits(&p, &refs, None);
        let m = Model::new(p).unwrap();
        for (b, e) in ex.iter().enumerate() {
            let want = m.last_logits(&e.tokens).unwrap();
            for (x, y) in logits[b * 20..(b + 1) * 20].iter().zip(&want) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut p = init_model(&tiny_cfg()).unwrap();
        // larger weights so every path carries signal
        for x in p.data.iter_mut() {
            *x *= 5.0;
        }
        for (_, t) in p.layout.named_tensors() {
            if t.rows == 1 && t.cols == 8 {
                for (k, x) in p.data[t.range()].iter_mut().enumerate() {
                    *x += 0.1 * (k as f32).sin();
                }
            }
        }
        let ex = examples();
        let refs: Vec<&TrainingExample> = ex.iter().collect();
        let mut grad = vec![0.0; p.data.len()];
        loss_and_grad(&p, &refs, Some(&mut grad));
        let eps = 3e-3f32;
        let mut checked = 0;
        for (name, t) in p.layout.named_tensors() {
            for k in [0, t.len() / 2, t.len() - 1] {
                let i = t.offset + k;
                let orig = p.data[i];
                p.data[i] = orig + eps;
                let up = loss_and_grad(&p, &refs, None) as f64;
                p.data[i] = orig - eps;
                let down = loss_and_grad(&p, &refs, None) as f64;
                p.data[i] = orig;
                let fd = (up - down) / (2.0 * eps as f64);
                let an = grad[i] as f64;
                assert!(
                    (fd - an).abs() <= 2e-3 + 2e-2 * an.abs().max(fd.abs()),
                    "{name}[{k}]: analytic {an} vs fd {fd}"
                );
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn memorizes_a_single_fact() {
        let kb = generate_kb(&KbConfig {
            n_subjects: 1,
            n_relations: 1,
            pool_size: 4,
            vocab_budget: 2048,
            ..Default::default()
        })
        .unwrap();
        let reg = TemplateRegistry::builtin();
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            vocab_size: kb.vocab().len(),
            max_context: 16,
            d_ff: 32,
            seed: 1,
        };
        let tc = TrainConfig { steps: 500, batch_size: 1, lr: 3e-3, warmup: 10, ..Default::default() };
        let (p, metrics) = train(init_model(&cfg).unwrap(), &kb, &reg, &tc).unwrap();
        assert_eq!(metrics.accuracy, 1.0);
        assert!(p.all_finite());
    }

    #[test]
    fn training_is_deterministic() {
        let kb = generate_kb(&KbConfig { n_subjects: 4, n_relations: 2, pool_size: 4, ..Default::default() }).unwrap();
        let reg = TemplateRegistry::builtin();
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            vocab_size: kb.vocab().len(),
            max_context: 16,
            d_ff: 32,
            seed: 1,
        };
        let tc = TrainConfig { steps: 20, batch_size: 3, warmup: 2, ..Default::default() };
        let a = train(init_model(&cfg).unwrap(), &kb, &reg, &tc).unwrap();
        let b = train(init_model(&cfg).unwrap(), &kb, &reg, &tc).unwrap();
        assert_eq!(a.0.data, b.0.data);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn divergence_is_reported() {
        let kb = generate_kb(&KbConfig { n_subjects: 4, n_relations: 2, pool_size: 4, ..Default::default() }).unwrap();
        let reg = TemplateRegistry::builtin();
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            vocab_size: kb.vocab().len(),
            max_context: 16,
            d_ff: 32,
            seed: 1,
        };
        let tc = TrainConfig { steps: 50, lr: f32::INFINITY, warmup: 1, grad_clip: 0.0, ..Default::default() };
        assert!(matches!(train(init_model(&cfg).unwrap(), &kb, &reg, &tc), Err(Error::Training(_))));
    }

    #[test]
    fn zero_shot_templates_are_not_trainable() {
        let kb = generate_kb(&KbConfig { n_subjects: 2, n_relations: 2, pool_size: 4, ..Default::default() }).unwrap();
        let reg = TemplateRegistry::builtin();
        assert!(training_examples(&kb, &reg, &["zs_given".to_string()]).is_err());
        assert_eq!(training_examples(&kb, &reg, &["main".into(), "inq_what".into()]).unwrap().len(), 8);
    }
}
