//! Declarative intervention plans: embedding corruption, clean-state
//! restoration and scaled overwrites, plus clean-run recording.
//!
//! A plan maps residual-stream nodes `(position, layer)` to at most one
//! action. Layer 0 is the post-embedding value; layer `j ≥ 1` is the output of
//! block `j`. An action rewrites the node's value before anything downstream
//! (later blocks, the output head) reads it.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kb::{Span, TokenId};
use crate::model::{argmax, Model, Run};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    /// `v ← v + noise`; embedding layer only.
    AddNoise { vector: Vec<f32> },
    /// `v ← clean`.
    Restore { vector: Vec<f32> },
    /// `v ← γ · vector` (replacement, the original value is discarded).
    Overwrite { vector: Vec<f32>, gamma: f32 },
    /// `v ← v + γ · vector`; experimental additive steering.
    Add { vector: Vec<f32>, gamma: f32 },
}

impl Action {
    pub fn vector(&self) -> &[f32] {
        match self {
            Action::AddNoise { vector }
            | Action::Restore { vector }
            | Action::Overwrite { vector, .. }
            | Action::Add { vector, .. } => vector,
        }
    }

    pub fn gamma(&self) -> Option<f32> {
        match self {
            Action::Overwrite { gamma, .. } | Action::Add { gamma, .. } => Some(*gamma),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Action::AddNoise { .. } => "add_noise",
            Action::Restore { .. } => "restore",
            Action::Overwrite { .. } => "overwrite",
            Action::Add { .. } => "add",
        }
    }

    #[inline]
    pub(crate) fn apply(&self, state: &mut [f32]) {
        match self {
            Action::AddNoise { vector } => state.iter_mut().zip(vector).for_each(|(s, n)| *s += n),
            Action::Restore { vector } => state.copy_from_slice(vector),
            Action::Overwrite { vector, gamma } => {
                state.iter_mut().zip(vector).for_each(|(s, v)| *s = gamma * v);
            }
            Action::Add { vector, gamma } => state.iter_mut().zip(vector).for_each(|(s, v)| *s += gamma * v),
        }
    }
}

/// At most one action per `(position, layer)` node.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InterventionPlan {
    actions: BTreeMap<(usize, usize), Action>,
}

impl InterventionPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_actions(actions: impl IntoIterator<Item = (usize, usize, Action)>) -> Result<Self> {
        let mut plan = Self::new();
        for (i, j, a) in actions {
            plan.insert(i, j, a)?;
        }
        Ok(plan)
    }

    pub fn insert(&mut self, position: usize, layer: usize, action: Action) -> Result<()> {
        match (&action, layer) {
            (Action::AddNoise { .. }, 0) => {}
            (Action::AddNoise { .. }, _) => {
                return Err(Error::Intervention(format!("noise acts on embeddings only, got layer {layer}")))
            }
            (_, 0) => return Err(Error::Intervention(format!("{} needs layer >= 1", action.kind()))),
            _ => {}
        }
        if let Some(g) = action.gamma() {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::Intervention(format!("gamma must be positive, got {g}")));
            }
        }
        if self.actions.contains_key(&(position, layer)) {
            return Err(Error::Intervention(format!("node ({position}, {layer}) already has an action")));
        }
        self.actions.insert((position, layer), action);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn get(&self, position: usize, layer: usize) -> Option<&Action> {
        self.actions.get(&(position, layer))
    }

    /// `(position, layer, action)` in position-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &Action)> {
        self.actions.iter().map(|(&(i, j), a)| (i, j, a))
    }

    /// Union of two plans; on a shared node `other` wins.
    pub fn merged(&self, other: &InterventionPlan) -> InterventionPlan {
        let mut actions = self.actions.clone();
        for (k, a) in &other.actions {
            actions.insert(*k, a.clone());
        }
        InterventionPlan { actions }
    }

    /// Earliest `(position, layer)` any action touches.
    pub fn frontier(&self) -> Option<(usize, usize)> {
        let pos = self.actions.keys().map(|k| k.0).min()?;
        let layer = self.actions.keys().map(|k| k.1).min()?;
        Some((pos, layer))
    }

    pub fn validate(&self, n_positions: usize, n_layers: usize, dim: usize) -> Result<()> {
        for (&(i, j), a) in &self.actions {
            if i >= n_positions || j > n_layers {
                return Err(Error::Intervention(format!(
                    "node ({i}, {j}) outside {n_positions} positions × {} layers",
                    n_layers + 1
                )));
            }
            if a.vector().len() != dim {
                return Err(Error::Intervention(format!(
                    "vector of dim {} at ({i}, {j}), model dim {dim}",
                    a.vector().len()
                )));
            }
        }
        Ok(())
    }

    /// Copy every action at `from` onto position `to` (skipping nodes that
    /// already carry one).
    pub fn replicated_at(&self, from: usize, to: usize) -> InterventionPlan {
        let mut out = self.clone();
        for (&(i, j), a) in &self.actions {
            if i == from {
                out.actions.entry((to, j)).or_insert_with(|| a.clone());
            }
        }
        out
    }

    /// Serializable manifest: vectors are recorded by checksum and an optional
    /// reference into a trace file rather than inline.
    pub fn manifest(&self, vector_ref: Option<&str>) -> PlanManifest {
        PlanManifest {
            schema_version: PLAN_SCHEMA_VERSION,
            entries: self
                .actions
                .iter()
                .map(|(&(position, layer), a)| PlanEntry {
                    position,
                    layer,
                    action: a.kind().to_string(),
                    gamma: a.gamma(),
                    vector_sha256: vector_checksum(a.vector()),
                    vector_ref: vector_ref.map(|r| format!("{r}#{position}:{layer}")),
                })
                .collect(),
        }
    }
}

pub const PLAN_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub position: usize,
    pub layer: usize,
    pub action: String,
    pub gamma: Option<f32>,
    pub vector_sha256: String,
    pub vector_ref: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanManifest {
    pub schema_version: u32,
    pub entries: Vec<PlanEntry>,
}

pub fn vector_checksum(v: &[f32]) -> String {
    let mut h = Sha256::new();
    for x in v {
        h.update(x.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Corruption
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub span: Span,
    /// Noise std as a multiple of the embedding-table std.
    pub noise_scale: f32,
    pub n_samples: usize,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config(format!("noise scale must be >= 0, got {}", self.noise_scale)));
        }
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be >= 1".into()));
        }
        if self.span.is_empty() {
            return Err(Error::Analysis("corruption span is empty".into()));
        }
        Ok(())
    }
}

/// One Gaussian noise vector per token of the span, std `ν · σ_emb`.
/// Sample `k` draws from its own ChaCha stream so samples are independent of
/// evaluation order.
pub fn sample_noise(
    spec: &CorruptionSpec,
    sample_index: usize,
    dim: usize,
    embedding_std: f32,
) -> Result<Vec<Vec<f32>>> {
    if sample_index >= spec.n_samples {
        return Err(Error::Analysis(format!("sample {sample_index} >= n_samples {}", spec.n_samples)));
    }
    let std = spec.noise_scale * embedding_std;
    if std == 0.0 {
        return Ok(vec![vec![0.0; dim]; spec.span.len()]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(sample_index as u64);
    let normal = Normal::new(0.0f32, std).map_err(|e| Error::Config(e.to_string()))?;
    Ok((0..spec.span.len()).map(|_| (0..dim).map(|_| normal.sample(&mut rng)).collect()).collect())
}

/// Noise plan corrupting the span's embeddings.
pub fn corruption_plan(spec: &CorruptionSpec, noise: Vec<Vec<f32>>) -> Result<InterventionPlan> {
    if noise.len() != spec.span.len() {
        return Err(Error::Intervention(format!("{} noise vectors for a span of {}", noise.len(), spec.span.len())));
    }
    InterventionPlan::from_actions(
        spec.span.positions().zip(noise).map(|(p, v)| (p, 0, Action::AddNoise { vector: v })),
    )
}

// ---------------------------------------------------------------------------
// Clean runs, restoration, overwrites
// ---------------------------------------------------------------------------

/// An unmodified run with everything later restorations need.
#[derive(Clone, Debug)]
pub struct CleanRun {
    pub run: Run,
    pub top1: TokenId,
}

impl CleanRun {
    pub fn tokens(&self) -> &[TokenId] {
        &self.run.tokens
    }

    pub fn last_logits(&self) -> &[f32] {
        &self.run.last_logits
    }

    pub fn state(&self, position: usize, layer: usize) -> &[f32] {
        self.run.trace.state(position, layer)
    }

    pub fn last_index(&self) -> usize {
        self.run.tokens.len() - 1
    }
}

pub fn record_clean(model: &Model, tokens: &[TokenId]) -> Result<CleanRun> {
    let run = model.forward(tokens, None)?;
    let top1 = argmax(&run.last_logits);
    Ok(CleanRun { run, top1 })
}

/// Single restore of `node = (position, layer)` to its clean value.
pub fn restore_plan(clean: &CleanRun, node: (usize, usize)) -> Result<InterventionPlan> {
    let (i, j) = node;
    let grid = &clean.run.trace;
    if i >= grid.positions() || j == 0 || j >= grid.layers() {
        return Err(Error::Intervention(format!("restore node ({i}, {j}) out of range")));
    }
    InterventionPlan::from_actions([(i, j, Action::Restore { vector: clean.state(i, j).to_vec() })])
}

/// Overwrite `v[position][j] ← γ · vectors[j − a]` for `j ∈ [a, b]`.
pub fn range_overwrite_plan(
    vectors: &[Vec<f32>],
    interval: (usize, usize),
    position: usize,
    gamma: f32,
) -> Result<InterventionPlan> {
    scaled_range_plan(vectors, interval, position, gamma, false)
}

/// Range plan in either replacement (`additive = false`) or additive mode.
pub fn scaled_range_plan(
    vectors: &[Vec<f32>],
    interval: (usize, usize),
    position: usize,
    gamma: f32,
    additive: bool,
) -> Result<InterventionPlan> {
    let (a, b) = interval;
    if a == 0 || b < a {
        return Err(Error::Intervention(format!("invalid layer interval [{a}, {b}]")));
    }
    if vectors.len() != b - a + 1 {
        return Err(Error::Intervention(format!("{} vectors for interval [{a}, {b}]", vectors.len())));
    }
    if let Some(v) = vectors.iter().find(|v| v.len() != vectors[0].len()) {
        return Err(Error::Intervention(format!("ragged vectors ({} vs {})", v.len(), vectors[0].len())));
    }
    InterventionPlan::from_actions(vectors.iter().enumerate().map(|(k, v)| {
        let vector = v.clone();
        let action = if additive { Action::Add { vector, gamma } } else { Action::Overwrite { vector, gamma } };
        (position, a + k, action)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> Model {
        Model::init(&ModelConfig {
            n_layers: 3,
            d_model: 16,
            n_heads: 2,
            vocab_size: 40,
            max_context: 16,
            d_ff: 32,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn plan_rejects_duplicates_and_bad_layers() {
        let v = vec![0.0; 4];
        let mut p = InterventionPlan::new();
        p.insert(1, 2, Action::Restore { vector: v.clone() }).unwrap();
        assert!(p.insert(1, 2, Action::Restore { vector: v.clone() }).is_err());
        assert!(p.insert(0, 0, Action::Restore { vector: v.clone() }).is_err());
        assert!(p.insert(0, 1, Action::AddNoise { vector: v.clone() }).is_err());
        assert!(p.insert(0, 1, Action::Overwrite { vector: v.clone(), gamma: 0.0 }).is_err());
        assert!(p.validate(4, 3, 5).is_err());
        assert!(p.validate(1, 3, 4).is_err());
        p.validate(2, 3, 4).unwrap();
    }

    #[test]
    fn zero_noise_scale_gives_zero_vectors() {
        let spec = CorruptionSpec { span: Span { start: 1, end: 3 }, noise_scale: 0.0, n_samples: 2, seed: 1 };
        let n = sample_noise(&spec, 1, 8, 0.02).unwrap();
        assert_eq!(n, vec![vec![0.0; 8]; 2]);
        assert!(sample_noise(&spec, 2, 8, 0.02).is_err());
    }

    #[test]
    fn noise_norm_monte_carlo() {
        let (d, sigma, nu) = (128usize, 0.02f32, 3.0f32);
        let spec = CorruptionSpec { span: Span { start: 0, end: 1 }, noise_scale: nu, n_samples: 1000, seed: 9 };
        let mean_norm: f64 = (0..1000)
            .map(|k| {
                let v = &sample_noise(&spec, k, d, sigma).unwrap()[0];
                v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt()
            })
            .sum::<f64>()
            / 1000.0;
        let expected = (nu * sigma) as f64 * (d as f64).sqrt();
        assert!((mean_norm / expected - 1.0).abs() < 0.10, "{mean_norm} vs {expected}");
    }

    #[test]
    fn sample_streams_are_distinct_and_reproducible() {
        let spec = CorruptionSpec { span: Span { start: 0, end: 2 }, noise_scale: 3.0, n_samples: 3, seed: 4 };
        let a = sample_noise(&spec, 0, 8, 0.1).unwrap();
        let b = sample_noise(&spec, 1, 8, 0.1).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, sample_noise(&spec, 0, 8, 0.1).unwrap());
    }

    #[test]
    fn full_restore_reproduces_clean_logits() {
        let m = tiny();
        let toks = [3, 7, 9, 11, 2, 5];
        let clean = record_clean(&m, &toks).unwrap();
        assert_eq!(clean.run.trace.shape(), (6, 4, 16));
        let plan = InterventionPlan::from_actions((0..6).flat_map(|i| {
            let c = &clean;
            (1..=3).map(move |j| (i, j, Action::Restore { vector: c.state(i, j).to_vec() }))
        }))
        .unwrap();
        let run = m.forward(&toks, Some(&plan)).unwrap();
        for (a, b) in run.last_logits.iter().zip(clean.last_logits()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn last_node_restore_recovers_clean_distribution_under_corruption() {
        let m = tiny();
        let toks = [3, 7, 9, 11, 2, 5];
        let clean = record_clean(&m, &toks).unwrap();
        let spec = CorruptionSpec { span: Span { start: 1, end: 3 }, noise_scale: 3.0, n_samples: 1, seed: 2 };
        let noise = sample_noise(&spec, 0, 16, m.embedding_std()).unwrap();
        let corrupt = corruption_plan(&spec, noise).unwrap();
        let plan = corrupt.merged(&restore_plan(&clean, (5, 3)).unwrap());
        let run = m.forward(&toks, Some(&plan)).unwrap();
        assert_eq!(run.last_logits, clean.run.last_logits);
    }

    #[test]
    fn restoring_upstream_node_changes_nothing() {
        let m = tiny();
        let toks = [3, 7, 9, 11, 2, 5];
        let clean = record_clean(&m, &toks).unwrap();
        let spec = CorruptionSpec { span: Span { start: 3, end: 5 }, noise_scale: 3.0, n_samples: 1, seed: 2 };
        let corrupt = corruption_plan(&spec, sample_noise(&spec, 0, 16, m.embedding_std()).unwrap()).unwrap();
        let corrupted = m.forward(&toks, Some(&corrupt)).unwrap();
        let restored = m.forward(&toks, Some(&corrupt.merged(&restore_plan(&clean, (1, 2)).unwrap()))).unwrap();
        assert_eq!(corrupted.last_logits, restored.last_logits);
    }

    #[test]
    fn per_node_restores_compose_to_layer_restore() {
        let m = tiny();
        let toks = [3, 7, 9, 11, 2, 5];
        let clean = record_clean(&m, &toks).unwrap();
        let spec = CorruptionSpec { span: Span { start: 0, end: 2 }, noise_scale: 3.0, n_samples: 1, seed: 8 };
        let corrupt = corruption_plan(&spec, sample_noise(&spec, 0, 16, m.embedding_std()).unwrap()).unwrap();
        let mut composed = corrupt.clone();
        for i in 0..toks.len() {
            composed = composed.merged(&restore_plan(&clean, (i, 2)).unwrap());
        }
        // restoring layer 2 wholesale makes every later state clean
        let a = m.forward(&toks, Some(&composed)).unwrap();
        for (x, y) in a.last_logits.iter().zip(clean.last_logits()) {
            assert!((x - y).abs() < 1e-6);
        }
        for i in 0..toks.len() {
            for (x, y) in a.trace.state(i, 3).iter().zip(clean.state(i, 3)) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn overwrite_semantics() {
        let m = tiny();
        let toks = [3, 7, 9, 11];
        let clean = record_clean(&m, &toks).unwrap();
        let own: Vec<Vec<f32>> = (1..=2).map(|j| clean.state(3, j).to_vec()).collect();
        let same = m.forward(&toks, Some(&range_overwrite_plan(&own, (1, 2), 3, 1.0).unwrap())).unwrap();
        for (x, y) in same.last_logits.iter().zip(clean.last_logits()) {
            assert!((x - y).abs() < 1e-6);
        }
        let other = record_clean(&m, &[4, 4, 8]).unwrap();
        let vecs: Vec<Vec<f32>> = (1..=3).map(|j| other.state(2, j).to_vec()).collect();
        let copied = m.forward(&toks, Some(&range_overwrite_plan(&vecs, (1, 3), 3, 1.0).unwrap())).unwrap();
        assert_eq!(argmax(&copied.last_logits), other.top1);

        let doubled = m.forward(&toks, Some(&range_overwrite_plan(&own[..1], (1, 1), 3, 2.0).unwrap())).unwrap();
        let want: Vec<f32> = own[0].iter().map(|x| 2.0 * x).collect();
        assert_eq!(doubled.trace.state(3, 1), want.as_slice());
        assert!(range_overwrite_plan(&own, (1, 3), 3, 1.0).is_err());
    }

    #[test]
    fn plan_application_is_order_independent() {
        let m = tiny();
        let toks = [1, 2, 3, 4, 5];
        let v = |s: f32| (0..16).map(|k| (k as f32 * s).sin()).collect::<Vec<f32>>();
        let mut actions = vec![
            (4, 1, Action::Overwrite { vector: v(0.3), gamma: 1.5 }),
            (2, 2, Action::Restore { vector: v(0.7) }),
            (0, 0, Action::AddNoise { vector: v(0.1) }),
            (4, 3, Action::Add { vector: v(0.2), gamma: 0.5 }),
        ];
        let a = m.forward(&toks, Some(&InterventionPlan::from_actions(actions.clone()).unwrap())).unwrap();
        actions.reverse();
        actions.swap(0, 2);
        let b = m.forward(&toks, Some(&InterventionPlan::from_actions(actions).unwrap())).unwrap();
        assert_eq!(a.last_logits, b.last_logits);
    }

    #[test]
    fn manifest_serializes_checksums() {
        let plan = range_overwrite_plan(&[vec![1.0, 2.0]], (2, 2), 5, 1.5).unwrap();
        let m = plan.manifest(Some("trace.bin"));
        let json = serde_json::to_string(&m).unwrap();
        let back: PlanManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
        assert_eq!(m.entries[0].gamma, Some(1.5));
        assert_eq!(m.entries[0].vector_sha256.len(), 64);
    }
}
