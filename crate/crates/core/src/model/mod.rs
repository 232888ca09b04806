//! A small pre-norm decoder-only transformer with a fully observable residual
//! stream.
//!
//! All parameters live in one flat `f32` buffer; [`ParamLayout`] names the
//! tensors and fixes their order, which is also the checkpoint payload order:
//!
//! ```text
//! tok_emb[V,d] pos_emb[C,d]
//! per layer: ln1.g[d] ln1.b[d] wq[d,d] bq[d] wk[d,d] bk[d] wv[d,d] bv[d]
//!            wo[d,d] bo[d] ln2.g[d] ln2.b[d] w1[d,f] b1[f] w2[f,d] b2[d]
//! lnf.g[d] lnf.b[d] head[d,V]
//! ```
//!
//! Weight matrices are stored `[in, out]` so a row vector maps as `x · W`.
//! The output head φ is `LN_f` followed by `head`; it is the only path from a
//! hidden state to logits.

mod checkpoint;
mod decode;
mod forward;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kb::TokenId;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use decode::{argmax, object_prob, rank_of, reciprocal_rank, top_k, LensResult};
pub use forward::{Run, TraceGrid};
pub use train::{train, training_examples, TrainConfig, TrainMetrics, TrainingExample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub d_ff: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { n_layers: 12, d_model: 128, n_heads: 4, vocab_size: 2048, max_context: 32, d_ff: 512, seed: 1 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("model dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.vocab_size < 2 || self.max_context < 2 {
            return bad("vocab_size and max_context must be at least 2".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Location of one tensor inside the flat parameter buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorRange {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TensorRange {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    fn is_matrix(&self) -> bool {
        self.rows > 1 && self.cols > 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    pub ln1_g: TensorRange,
    pub ln1_b: TensorRange,
    pub wq: TensorRange,
    pub bq: TensorRange,
    pub wk: TensorRange,
    pub bk: TensorRange,
    pub wv: TensorRange,
    pub bv: TensorRange,
    pub wo: TensorRange,
    pub bo: TensorRange,
    pub ln2_g: TensorRange,
    pub ln2_b: TensorRange,
    pub w1: TensorRange,
    pub b1: TensorRange,
    pub w2: TensorRange,
    pub b2: TensorRange,
}

impl LayerLayout {
    fn named(&self) -> [(&'static str, TensorRange); 16] {
        [
            ("ln1.g", self.ln1_g),
            ("ln1.b", self.ln1_b),
            ("wq", self.wq),
            ("bq", self.bq),
            ("wk", self.wk),
            ("bk", self.bk),
            ("wv", self.wv),
            ("bv", self.bv),
            ("wo", self.wo),
            ("bo", self.bo),
            ("ln2.g", self.ln2_g),
            ("ln2.b", self.ln2_b),
            ("w1", self.w1),
            ("b1", self.b1),
            ("w2", self.w2),
            ("b2", self.b2),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub tok_emb: TensorRange,
    pub pos_emb: TensorRange,
    pub layers: Vec<LayerLayout>,
    pub lnf_g: TensorRange,
    pub lnf_b: TensorRange,
    pub head: TensorRange,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let mut offset = 0;
        let mut take = |rows: usize, cols: usize| {
            let t = TensorRange { offset, rows, cols };
            offset += rows * cols;
            t
        };
        let tok_emb = take(v, d);
        let pos_emb = take(cfg.max_context, d);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerLayout {
                ln1_g: take(1, d),
                ln1_b: take(1, d),
                wq: take(d, d),
                bq: take(1, d),
                wk: take(d, d),
                bk: take(1, d),
                wv: take(d, d),
                bv: take(1, d),
                wo: take(d, d),
                bo: take(1, d),
                ln2_g: take(1, d),
                ln2_b: take(1, d),
                w1: take(d, f),
                b1: take(1, f),
                w2: take(f, d),
                b2: take(1, d),
            })
            .collect();
        let lnf_g = take(1, d);
        let lnf_b = take(1, d);
        let head = take(d, v);
        Self { tok_emb, pos_emb, layers, lnf_g, lnf_b, head, total: offset }
    }

    /// Every tensor in payload order with its dotted name.
    pub fn named_tensors(&self) -> Vec<(String, TensorRange)> {
        let mut out = vec![("tok_emb".to_string(), self.tok_emb), ("pos_emb".to_string(), self.pos_emb)];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.named().iter().map(|(n, t)| (format!("layers.{i}.{n}"), *t)));
        }
        out.push(("lnf.g".into(), self.lnf_g));
        out.push(("lnf.b".into(), self.lnf_b));
        out.push(("head".into(), self.head));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub cfg: ModelConfig,
    pub layout: ParamLayout,
    pub data: Vec<f32>,
}

impl Parameters {
    pub fn get(&self, t: TensorRange) -> &[f32] {
        &self.data[t.range()]
    }

    pub fn n_params(&self) -> usize {
        self.data.len()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Gaussian init (std 0.02, residual output projections scaled by
/// `1/sqrt(2L)`), unit layer-norm gains, zero biases.
pub fn init_model(cfg: &ModelConfig) -> Result<Parameters> {
    cfg.validate()?;
    let layout = ParamLayout::new(cfg);
    let mut data = vec![0.0f32; layout.total];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std = 0.02f32;
    let resid_std = std / (2.0 * cfg.n_layers as f32).sqrt();
    let mut fill = |t: TensorRange, s: f32, data: &mut [f32]| {
        let normal = Normal::new(0.0f32, s).expect("positive std");
        for x in &mut data[t.range()] {
            *x = normal.sample(&mut rng);
        }
    };
    fill(layout.tok_emb, std, &mut data);
    fill(layout.pos_emb, std, &mut data);
    for l in &layout.layers {
        for t in [l.wq, l.wk, l.wv, l.w1] {
            fill(t, std, &mut data);
        }
        for t in [l.wo, l.w2] {
            fill(t, resid_std, &mut data);
        }
        data[l.ln1_g.range()].fill(1.0);
        data[l.ln2_g.range()].fill(1.0);
    }
    data[layout.lnf_g.range()].fill(1.0);
    fill(layout.head, std, &mut data);
    Ok(Parameters { cfg: *cfg, layout, data })
}

/// Trained (or initialized) parameters plus derived, immutable facts about
/// them. Shared read-only by every analysis.
#[derive(Clone, Debug)]
pub struct Model {
    params: Parameters,
    fingerprint: String,
    embedding_std: f32,
}

impl Model {
    pub fn new(params: Parameters) -> Result<Self> {
        params.cfg.validate()?;
        if params.data.len() != params.layout.total || params.layout != ParamLayout::new(&params.cfg) {
            return Err(Error::Config("parameter buffer does not match its configuration".into()));
        }
        let fingerprint = fingerprint(&params);
        let emb = params.get(params.layout.tok_emb);
        let n = emb.len() as f64;
        let mean = emb.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = emb.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        Ok(Self { params, fingerprint, embedding_std: var.sqrt() as f32 })
    }

    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        Self::new(init_model(cfg)?)
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn into_params(self) -> Parameters {
        self.params
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.params.cfg
    }

    /// Short content hash identifying these exact parameters.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Population standard deviation over every token-embedding entry.
    pub fn embedding_std(&self) -> f32 {
        self.embedding_std
    }

    pub fn n_layers(&self) -> usize {
        self.params.cfg.n_layers
    }

    pub fn d_model(&self) -> usize {
        self.params.cfg.d_model
    }

    pub fn vocab_size(&self) -> usize {
        self.params.cfg.vocab_size
    }

    pub(crate) fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Intervention("empty token sequence".into()));
        }
        if tokens.len() > self.params.cfg.max_context {
            return Err(Error::ContextOverflow { needed: tokens.len(), max: self.params.cfg.max_context });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.params.cfg.vocab_size) {
            return Err(Error::Config(format!("token {t} outside vocabulary of {}", self.params.cfg.vocab_size)));
        }
        Ok(())
    }
}

fn fingerprint(params: &Parameters) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&params.cfg).expect("config serializes"));
    for x in &params.data {
        h.update(x.to_le_bytes());
    }
    let digest = h.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
