//! Inference forward pass with residual-stream recording and plan
//! application.

use super::{LayerLayout, Model};
use crate::error::{Error, Result};
use crate::intervene::InterventionPlan;
use crate::kb::TokenId;
use crate::tensor::{gelu, gemm, layer_norm, linear, softmax_in_place};

/// Residual values `v[i][j]` for positions `i ∈ [0, H)` and layers
/// `j ∈ [0, L]`, stored layer-major so each layer is one contiguous `H×d`
/// block.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceGrid {
    positions: usize,
    layers: usize,
    dim: usize,
    data: Vec<f32>,
}

impl TraceGrid {
    fn zeros(positions: usize, layers: usize, dim: usize) -> Self {
        Self { positions, layers, dim, data: vec![0.0; positions * layers * dim] }
    }

    /// `(H, L + 1, d)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.positions, self.layers, self.dim)
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    /// Number of recorded layers, `L + 1`.
    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn state(&self, position: usize, layer: usize) -> &[f32] {
        let o = (layer * self.positions + position) * self.dim;
        &self.data[o..o + self.dim]
    }

    fn layer_rows(&self, layer: usize, from: usize) -> &[f32] {
        let o = (layer * self.positions + from) * self.dim;
        &self.data[o..(layer + 1) * self.positions * self.dim]
    }

    fn layer_rows_mut(&mut self, layer: usize, from: usize) -> &mut [f32] {
        let o = (layer * self.positions + from) * self.dim;
        &mut self.data[o..(layer + 1) * self.positions * self.dim]
    }

    /// Flat `[layer][position][d]` buffer.
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

/// One forward pass: the plan it ran under, every residual value, the
/// attention keys/values (so later reruns can reuse an unchanged prefix) and
/// the last-position logits.
#[derive(Clone, Debug)]
pub struct Run {
    pub tokens: Vec<TokenId>,
    pub plan: InterventionPlan,
    pub trace: TraceGrid,
    keys: Vec<f32>,
    values: Vec<f32>,
    pub last_logits: Vec<f32>,
}

impl Run {
    pub fn last_index(&self) -> usize {
        self.tokens.len() - 1
    }
}

impl Model {
    /// Run the model, applying `plan` (if any) at each listed node.
    pub fn forward(&self, tokens: &[TokenId], plan: Option<&InterventionPlan>) -> Result<Run> {
        self.check_tokens(tokens)?;
        let cfg = self.cfg();
        let plan = plan.cloned().unwrap_or_default();
        plan.validate(tokens.len(), cfg.n_layers, cfg.d_model)?;
        let h = tokens.len();
        let mut run = Run {
            tokens: tokens.to_vec(),
            plan,
            trace: TraceGrid::zeros(h, cfg.n_layers + 1, cfg.d_model),
            keys: vec![0.0; cfg.n_layers * h * cfg.d_model],
            values: vec![0.0; cfg.n_layers * h * cfg.d_model],
            last_logits: Vec::new(),
        };
        self.compute(&mut run, 0, 0);
        Ok(run)
    }

    /// Logits at the last position of an unmodified run.
    pub fn last_logits(&self, tokens: &[TokenId]) -> Result<Vec<f32>> {
        Ok(self.forward(tokens, None)?.last_logits)
    }

    /// The run `base` would have produced under `base.plan ∪ extra`
    /// (`extra` wins on shared nodes). Only positions and layers at or after
    /// `extra`'s earliest node are recomputed; everything upstream is reused.
    pub fn rerun(&self, base: &Run, extra: &InterventionPlan) -> Result<Run> {
        let cfg = self.cfg();
        extra.validate(base.tokens.len(), cfg.n_layers, cfg.d_model)?;
        let Some((pos, layer)) = extra.frontier() else {
            return Ok(base.clone());
        };
        let mut run = base.clone();
        run.plan = base.plan.merged(extra);
        self.compute(&mut run, pos, layer);
        Ok(run)
    }

    /// Logits at any position of a finished run.
    pub fn logits_at(&self, run: &Run, position: usize) -> Result<Vec<f32>> {
        if position >= run.tokens.len() {
            return Err(Error::Intervention(format!("position {position} outside run of {}", run.tokens.len())));
        }
        Ok(self.head_logits(run.trace.state(position, self.n_layers())))
    }

    /// Logits at every position.
    pub fn all_logits(&self, run: &Run) -> Vec<Vec<f32>> {
        (0..run.tokens.len()).map(|p| self.head_logits(run.trace.state(p, self.n_layers()))).collect()
    }

    /// φ: final layer norm then the head matrix.
    pub fn head_logits(&self, state: &[f32]) -> Vec<f32> {
        let p = self.params();
        let l = &p.layout;
        let d = p.cfg.d_model;
        let mut z = vec![0.0; d];
        layer_norm(state, p.get(l.lnf_g), p.get(l.lnf_b), &mut z);
        let mut logits = vec![0.0; p.cfg.vocab_size];
        gemm(1, d, p.cfg.vocab_size, &z, false, p.get(l.head), false, &mut logits, false);
        logits
    }

    /// Recompute positions `from..H` for layers `start_layer..=L`. Requires
    /// the trace, keys and values of positions `< from` (all layers) and of
    /// layer `start_layer − 1` (all positions) to be current.
    fn compute(&self, run: &mut Run, from: usize, start_layer: usize) {
        let p = self.params();
        let cfg = p.cfg;
        let (d, h) = (cfg.d_model, run.tokens.len());
        let n = h - from;
        let mut x = vec![0.0f32; n * d];

        for layer in start_layer..=cfg.n_layers {
            if layer == 0 {
                let emb = p.get(p.layout.tok_emb);
                let pos = p.get(p.layout.pos_emb);
                for (r, row) in x.chunks_exact_mut(d).enumerate() {
                    let t = run.tokens[from + r] as usize;
                    let i = from + r;
                    for c in 0..d {
                        row[c] = emb[t * d + c] + pos[i * d + c];
                    }
                }
            } else {
                x.copy_from_slice(run.trace.layer_rows(layer - 1, from));
                let kv = (layer - 1) * h * d;
                let (keys, values) = (&mut run.keys[kv..kv + h * d], &mut run.values[kv..kv + h * d]);
                self.block(&p.layout.layers[layer - 1], &mut x, from, keys, values);
            }
            for (i, j, action) in run.plan.iter() {
                if j == layer && i >= from {
                    action.apply(&mut x[(i - from) * d..(i - from + 1) * d]);
                }
            }
            run.trace.layer_rows_mut(layer, from).copy_from_slice(&x);
        }
        run.last_logits = self.head_logits(run.trace.state(h - 1, cfg.n_layers));
    }

    /// One pre-norm block over rows `from..H`, updating `x` in place. Keys and
    /// values for rows `< from` are read from the caches; rows `≥ from` are
    /// written there.
    fn block(&self, w: &LayerLayout, x: &mut [f32], from: usize, keys: &mut [f32], values: &mut [f32]) {
        let p = self.params();
        let cfg = p.cfg;
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let n = x.len() / d;
        let (nh, hd) = (cfg.n_heads, cfg.head_dim());
        let scale = 1.0 / (hd as f32).sqrt();

        let mut hbuf = vec![0.0; n * d];
        layer_norm(x, p.get(w.ln1_g), p.get(w.ln1_b), &mut hbuf);
        let mut q = vec![0.0; n * d];
        linear(&hbuf, n, p.get(w.wq), p.get(w.bq), d, d, &mut q);
        linear(&hbuf, n, p.get(w.wk), p.get(w.bk), d, d, &mut keys[from * d..]);
        linear(&hbuf, n, p.get(w.wv), p.get(w.bv), d, d, &mut values[from * d..]);

        let mut attn = vec![0.0; n * d];
        let mut scores = Vec::with_capacity(from + n);
        for r in 0..n {
            let i = from + r;
            for head in 0..nh {
                let off = head * hd;
                let qh = &q[r * d + off..r * d + off + hd];
                scores.clear();
                for t in 0..=i {
                    let kh = &keys[t * d + off..t * d + off + hd];
                    scores.push(crate::tensor::dot(qh, kh) * scale);
                }
                softmax_in_place(&mut scores);
                let out = &mut attn[r * d + off..r * d + off + hd];
                for (t, &a) in scores.iter().enumerate() {
                    let vh = &values[t * d + off..t * d + off + hd];
                    for c in 0..hd {
                        out[c] += a * vh[c];
                    }
                }
            }
        }
        let mut proj = vec![0.0; n * d];
        linear(&attn, n, p.get(w.wo), p.get(w.bo), d, d, &mut proj);
        x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);

        layer_norm(x, p.get(w.ln2_g), p.get(w.ln2_b), &mut hbuf);
        let mut u = vec![0.0; n * f];
        linear(&hbuf, n, p.get(w.w1), p.get(w.b1), d, f, &mut u);
        u.iter_mut().for_each(|v| *v = gelu(*v));
        linear(&u, n, p.get(w.w2), p.get(w.b2), f, d, &mut proj);
        x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);
    }
}
