//! Reading predictions out of logits: probabilities, ranks, greedy decoding
//! and early decoding of intermediate states.

use serde::{Deserialize, Serialize};

use super::{Model, TraceGrid};
use crate::error::{Error, Result};
use crate::intervene::InterventionPlan;
use crate::kb::{TokenId, TokenSequence};
use crate::tensor::{softmax, LN_EPS};

/// `softmax(logits)[id]`.
pub fn object_prob(logits: &[f32], id: TokenId) -> f32 {
    softmax(logits)[id as usize]
}

/// 1-based rank of `id`: one plus the number of tokens scoring strictly
/// higher, plus the number of equal-scoring tokens with a smaller id.
/// Softmax is monotone, so ranking by logit ranks by probability.
pub fn rank_of(logits: &[f32], id: TokenId) -> usize {
    let x = logits[id as usize];
    let above = logits.iter().filter(|&&v| v > x).count();
    let tied_before = logits[..id as usize].iter().filter(|&&v| v == x).count();
    1 + above + tied_before
}

pub fn reciprocal_rank(logits: &[f32], id: TokenId) -> f64 {
    1.0 / rank_of(logits, id) as f64
}

/// The rank-1 token (highest logit, lowest id on ties).
pub fn argmax(logits: &[f32]) -> TokenId {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

/// `k` most probable tokens, descending, ties by ascending id.
pub fn top_k(logits: &[f32], k: usize) -> Vec<(TokenId, f32)> {
    let probs = softmax(logits);
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| (i as TokenId, probs[i])).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LensResult {
    pub layer: usize,
    pub top: Vec<(TokenId, f32)>,
}

impl Model {
    /// Early decoding: `softmax(φ(v[H−1][layer]))`, top-k.
    pub fn early_decode(&self, trace: &TraceGrid, layer: usize, k: usize) -> Result<LensResult> {
        if layer >= trace.layers() {
            return Err(Error::Analysis(format!("layer {layer} outside 0..={}", trace.layers() - 1)));
        }
        let logits = self.head_logits_f64(trace.state(trace.positions() - 1, layer));
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|x| (x - max).exp()).sum();
        let mut idx: Vec<usize> = (0..logits.len()).collect();
        idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        let top = idx.into_iter().take(k).map(|i| (i as TokenId, ((logits[i] - max).exp() / sum) as f32)).collect();
        Ok(LensResult { layer, top })
    }

    /// φ in f64. Lens probabilities are compared at 1e-6; f32 rounding in
    /// the final norm and the head alone reaches ~5e-6 in the logits.
    fn head_logits_f64(&self, state: &[f32]) -> Vec<f64> {
        let p = self.params();
        let l = &p.layout;
        let (d, v) = (p.cfg.d_model, p.cfg.vocab_size);
        let x: Vec<f64> = state.iter().map(|&x| x as f64).collect();
        let mean = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS as f64).sqrt();
        let (g, b, w) = (p.get(l.lnf_g), p.get(l.lnf_b), p.get(l.head));
        let mut logits = vec![0.0f64; v];
        for c in 0..d {
            let z = (x[c] - mean) * rstd * g[c] as f64 + b[c] as f64;
            for (o, &wv) in logits.iter_mut().zip(&w[c * v..(c + 1) * v]) {
                *o += z * wv as f64;
            }
        }
        logits
    }

    /// Greedy continuation of `prompt`. Without `persist_plan` the plan acts
    /// on the prompt only (later tokens see its effect through attention);
    /// with it, the plan's last-position actions are repeated at every
    /// generated position.
    pub fn greedy_decode(
        &self,
        prompt: &TokenSequence,
        plan: Option<&InterventionPlan>,
        max_new: usize,
        persist_plan: bool,
    ) -> Result<TokenSequence> {
        let needed = prompt.len() + max_new;
        if needed > self.cfg().max_context {
            return Err(Error::ContextOverflow { needed, max: self.cfg().max_context });
        }
        let base_plan = plan.cloned().unwrap_or_default();
        let anchor = prompt.last_index();
        let mut out = prompt.clone();
        for _ in 0..max_new {
            let step_plan = if persist_plan {
                (anchor + 1..out.len()).fold(base_plan.clone(), |p, pos| p.replicated_at(anchor, pos))
            } else {
                base_plan.clone()
            };
            let run = self.forward(&out.tokens, Some(&step_plan))?;
            out.tokens.push(argmax(&run.last_logits));
        }
        Ok(out)
    }
}
