//! Destruction-then-recovery causal mediation, last-position stage curves and
//! three-stage segmentation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervene::{corruption_plan, record_clean, restore_plan, sample_noise, CorruptionSpec};
use crate::kb::{
    render_prompt, FactTriple, KnowledgeBase, PromptItem, PromptTemplate, RelationId, Span, TokenId, TokenSequence,
};
use crate::model::{object_prob, Model};
use crate::par::try_par_map;

pub const HEATMAP_SCHEMA_VERSION: u32 = 1;
pub const STAGES_SCHEMA_VERSION: u32 = 1;

/// Which span is corrupted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Subject,
    Relation,
}

impl Target {
    pub fn span(self, seq: &TokenSequence) -> Option<Span> {
        match self {
            Target::Subject => seq.subject_span,
            Target::Relation => seq.relation_span,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Target::Subject => "subject",
            Target::Relation => "relation",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MediationConfig {
    /// ν: noise std in units of the embedding std.
    pub noise_scale: f32,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for MediationConfig {
    fn default() -> Self {
        Self { noise_scale: 3.0, n_samples: 10, seed: 1 }
    }
}

impl MediationConfig {
    pub fn corruption(&self, span: Span) -> CorruptionSpec {
        CorruptionSpec { span, noise_scale: self.noise_scale, n_samples: self.n_samples, seed: self.seed }
    }
}

/// ME values for positions `first_position..first_position + rows` and
/// layers `1..=L`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MediationResult {
    pub target: Target,
    pub object: TokenId,
    pub tokens: Vec<TokenId>,
    pub first_position: usize,
    pub rows: usize,
    pub n_layers: usize,
    /// Row-major `rows × L`; column `j − 1` holds layer `j`.
    pub me: Vec<f64>,
    pub clean_prob: f64,
    pub corrupted_prob: f64,
}

impl MediationResult {
    /// ME at `(position, layer)`, `layer ∈ 1..=L`.
    pub fn at(&self, position: usize, layer: usize) -> Option<f64> {
        let r = position.checked_sub(self.first_position)?;
        (r < self.rows && (1..=self.n_layers).contains(&layer)).then(|| self.me[r * self.n_layers + layer - 1])
    }

    pub fn row(&self, position: usize) -> Option<&[f64]> {
        let r = position.checked_sub(self.first_position)?;
        (r < self.rows).then(|| &self.me[r * self.n_layers..(r + 1) * self.n_layers])
    }

    pub fn last_row(&self) -> &[f64] {
        &self.me[(self.rows - 1) * self.n_layers..]
    }

    pub fn heatmap(&self, kb: &KnowledgeBase) -> Heatmap {
        Heatmap {
            schema_version: HEATMAP_SCHEMA_VERSION,
            target: self.target,
            positions: (self.first_position..self.first_position + self.rows).collect(),
            layers: (1..=self.n_layers).collect(),
            tokens: self.tokens.iter().map(|&t| kb.vocab().token(t)).collect(),
            object: kb.vocab().token(self.object),
            me: self.me.chunks(self.n_layers).map(|r| r.to_vec()).collect(),
            clean_prob: self.clean_prob,
            corrupted_prob: self.corrupted_prob,
        }
    }
}

/// Plotting-friendly export of one grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub schema_version: u32,
    pub target: Target,
    pub positions: Vec<usize>,
    pub layers: Vec<usize>,
    pub tokens: Vec<String>,
    pub object: String,
    pub me: Vec<Vec<f64>>,
    pub clean_prob: f64,
    pub corrupted_prob: f64,
}

/// Full `H × L` grid: every node restored in turn under every noise sample.
pub fn mediation_grid(
    model: &Model,
    prompt: &TokenSequence,
    object: TokenId,
    target: Target,
    cfg: &MediationConfig,
) -> Result<MediationResult> {
    mediate_rows(model, prompt, object, target, cfg, 0, 1)
}

/// Only the last-position row of [`mediation_grid`] (what the stage analysis
/// reads); each restore recomputes a single position.
pub fn mediation_last_position(
    model: &Model,
    prompt: &TokenSequence,
    object: TokenId,
    target: Target,
    cfg: &MediationConfig,
) -> Result<MediationResult> {
    mediate_rows(model, prompt, object, target, cfg, prompt.last_index(), 1)
}

/// [`mediation_grid`] with noise samples spread over `jobs` threads.
pub fn mediation_grid_par(
    model: &Model,
    prompt: &TokenSequence,
    object: TokenId,
    target: Target,
    cfg: &MediationConfig,
    jobs: usize,
) -> Result<MediationResult> {
    mediate_rows(model, prompt, object, target, cfg, 0, jobs)
}

fn mediate_rows(
    model: &Model,
    prompt: &TokenSequence,
    object: TokenId,
    target: Target,
    cfg: &MediationConfig,
    first: usize,
    jobs: usize,
) -> Result<MediationResult> {
    let span = target
        .span(prompt)
        .ok_or_else(|| Error::Analysis(format!("prompt has no {} span to corrupt", target.as_str())))?;
    if object as usize >= model.vocab_size() {
        return Err(Error::Analysis(format!("object token {object} outside vocabulary")));
    }
    let spec = cfg.corruption(span);
    spec.validate()?;
    let clean = record_clean(model, &prompt.tokens)?;
    let (h, l) = (prompt.len(), model.n_layers());
    let rows = h - first;

    let samples: Vec<usize> = (0..cfg.n_samples).collect();
    // per sample: corrupted prob followed by restored probs
    let per_sample = try_par_map(&samples, jobs, |&k| -> Result<Vec<f64>> {
        let noise = sample_noise(&spec, k, model.d_model(), model.embedding_std())?;
        let corrupted = model.forward(&prompt.tokens, Some(&corruption_plan(&spec, noise)?))?;
        let mut out = Vec::with_capacity(1 + rows * l);
        out.push(object_prob(&corrupted.last_logits, object) as f64);
        for i in first..h {
            for j in 1..=l {
                let restored = model.rerun(&corrupted, &restore_plan(&clean, (i, j))?)?;
                out.push(object_prob(&restored.last_logits, object) as f64);
            }
        }
        Ok(out)
    })?;

    let n = cfg.n_samples as f64;
    let mut sums = vec![0.0f64; 1 + rows * l];
    for s in &per_sample {
        sums.iter_mut().zip(s).for_each(|(a, b)| *a += b);
    }
    let corrupted_prob = sums[0] / n;
    let me = sums[1..].iter().map(|s| s / n - corrupted_prob).collect();
    Ok(MediationResult {
        target,
        object,
        tokens: prompt.tokens.clone(),
        first_position: first,
        rows,
        n_layers: l,
        me,
        clean_prob: object_prob(clean.last_logits(), object) as f64,
        corrupted_prob,
    })
}

/// Subject and relation mediation of one fact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactMediation {
    pub fact: FactTriple,
    pub subject: MediationResult,
    pub relation: MediationResult,
}

/// Last-position mediation for each fact under `template`. Fact `k` uses
/// noise seed `cfg.seed + k` so facts draw independent noise.
pub fn mediate_facts(
    model: &Model,
    kb: &KnowledgeBase,
    template: &PromptTemplate,
    facts: &[FactTriple],
    cfg: &MediationConfig,
    jobs: usize,
) -> Result<Vec<FactMediation>> {
    let indexed: Vec<(usize, FactTriple)> = facts.iter().copied().enumerate().collect();
    try_par_map(&indexed, jobs, |&(k, fact)| {
        let prompt = render_prompt(kb, PromptItem::Fact { subject: fact.subject, relation: fact.relation }, template)?;
        let c = MediationConfig { seed: cfg.seed.wrapping_add(k as u64), ..*cfg };
        Ok(FactMediation {
            fact,
            subject: mediation_last_position(model, &prompt, fact.object, Target::Subject, &c)?,
            relation: mediation_last_position(model, &prompt, fact.object, Target::Relation, &c)?,
        })
    })
}

// ---------------------------------------------------------------------------
// Curves and stages
// ---------------------------------------------------------------------------

/// Per-layer mean and population variance of last-position ME; index
/// `j − 1` holds layer `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageCurves {
    pub n_prompts: usize,
    pub mean_rel: Vec<f64>,
    pub var_rel: Vec<f64>,
    pub mean_subj: Vec<f64>,
    pub var_subj: Vec<f64>,
}

impl StageCurves {
    pub fn n_layers(&self) -> usize {
        self.mean_rel.len()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,mean_rel,var_rel,mean_subj,var_subj\n");
        for j in 0..self.n_layers() {
            s += &format!(
                "{},{:.9},{:.9},{:.9},{:.9}\n",
                j + 1,
                self.mean_rel[j],
                self.var_rel[j],
                self.mean_subj[j],
                self.var_subj[j]
            );
        }
        s
    }
}

fn mean_var(rows: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let l = rows[0].len();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..l).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let var = (0..l).map(|j| rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).collect();
    (mean, var)
}

/// Aggregate `(subject, relation)` result pairs at the last position.
pub fn aggregate_last_position(results: &[(&MediationResult, &MediationResult)]) -> Result<StageCurves> {
    let Some(first) = results.first() else {
        return Err(Error::Analysis("no mediation results to aggregate".into()));
    };
    let l = first.0.n_layers;
    for (s, r) in results {
        if s.target != Target::Subject || r.target != Target::Relation {
            return Err(Error::Analysis("expected (subject, relation) result pairs".into()));
        }
        if s.n_layers != l || r.n_layers != l {
            return Err(Error::Analysis("results come from models of different depth".into()));
        }
    }
    let subj: Vec<&[f64]> = results.iter().map(|(s, _)| s.last_row()).collect();
    let rel: Vec<&[f64]> = results.iter().map(|(_, r)| r.last_row()).collect();
    let (mean_subj, var_subj) = mean_var(&subj);
    let (mean_rel, var_rel) = mean_var(&rel);
    Ok(StageCurves { n_prompts: results.len(), mean_rel, var_rel, mean_subj, var_subj })
}

/// Curves over every fact plus one per relation.
pub fn aggregate_by_relation(facts: &[FactMediation]) -> Result<(StageCurves, Vec<(RelationId, StageCurves)>)> {
    let pairs = |f: &dyn Fn(&FactMediation) -> bool| -> Vec<(&MediationResult, &MediationResult)> {
        facts.iter().filter(|m| f(m)).map(|m| (&m.subject, &m.relation)).collect()
    };
    let global = aggregate_last_position(&pairs(&|_| true))?;
    let mut rels: Vec<RelationId> = facts.iter().map(|m| m.fact.relation).collect();
    rels.sort();
    rels.dedup();
    let per = rels
        .into_iter()
        .map(|r| Ok((r, aggregate_last_position(&pairs(&|m| m.fact.relation == r))?)))
        .collect::<Result<_>>()?;
    Ok((global, per))
}

/// First layer (1-based) where `curve` reaches half its maximum; `None` when
/// the maximum is not positive.
pub fn half_max_layer(curve: &[f64]) -> Option<usize> {
    first_at_fraction(curve, 0.5)
}

fn first_at_fraction(curve: &[f64], tau: f64) -> Option<usize> {
    let max = curve.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_nan() || max <= 0.0 {
        return None;
    }
    curve.iter().position(|&v| v >= tau * max).map(|k| k + 1)
}

/// Half-open layer interval `start..end`; displayed inclusively.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRange {
    pub start: usize,
    pub end: usize,
}

impl LayerRange {
    pub fn inclusive(first: usize, last: usize) -> Self {
        Self { start: first, end: last + 1 }
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn first(&self) -> Option<usize> {
        (!self.is_empty()).then_some(self.start)
    }

    pub fn last(&self) -> Option<usize> {
        (!self.is_empty()).then(|| self.end - 1)
    }

    pub fn contains(&self, layer: usize) -> bool {
        (self.start..self.end).contains(&layer)
    }

    pub fn layers(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

impl fmt::Display for LayerRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.first(), self.last()) {
            (Some(a), Some(b)) => write!(f, "{a}-{b}"),
            _ => write!(f, "empty"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSegmentation {
    pub n_layers: usize,
    pub initial: LayerRange,
    pub emergence: LayerRange,
    pub conjoint: LayerRange,
    pub tau_rel: f64,
    pub tau_subj: f64,
    /// Why detection failed; `None` when the emergence stage is non-empty.
    pub failure: Option<String>,
}

impl StageSegmentation {
    pub fn detected(&self) -> bool {
        self.failure.is_none()
    }

    /// The emergence interval as `(a, b)`, or an error naming the failure.
    pub fn emergence_interval(&self) -> Result<(usize, usize)> {
        match (&self.failure, self.emergence.first(), self.emergence.last()) {
            (None, Some(a), Some(b)) => Ok((a, b)),
            (Some(why), _, _) => Err(Error::Extraction(format!("no emergence stage: {why}"))),
            _ => Err(Error::Extraction("no emergence stage".into())),
        }
    }
}

pub const DEFAULT_TAU_REL: f64 = 0.2;
pub const DEFAULT_TAU_SUBJ: f64 = 0.1;

/// Split layers `0..=L` into initial / emergence / conjoint stages.
///
/// `a` is the first layer whose relation mean ME reaches `τ_rel` of its
/// maximum; `b` is the layer just before the subject mean ME first reaches
/// `τ_subj` of its maximum. When `b < a` (or a curve never rises) the
/// emergence stage is empty and `failure` says why; the three ranges still
/// partition `0..=L`.
pub fn segment_stages(curves: &StageCurves, tau_rel: f64, tau_subj: f64) -> Result<StageSegmentation> {
    let l = curves.n_layers();
    if l == 0 || curves.mean_subj.len() != l {
        return Err(Error::Analysis("stage curves are empty or ragged".into()));
    }
    let mut seg = StageSegmentation {
        n_layers: l,
        initial: LayerRange { start: 0, end: l + 1 },
        emergence: LayerRange { start: l + 1, end: l + 1 },
        conjoint: LayerRange { start: l + 1, end: l + 1 },
        tau_rel,
        tau_subj,
        failure: None,
    };
    let Some(a) = first_at_fraction(&curves.mean_rel, tau_rel) else {
        seg.failure = Some("relation curve never rises above zero".into());
        return Ok(seg);
    };
    seg.initial = LayerRange { start: 0, end: a };
    seg.emergence = LayerRange { start: a, end: a };
    seg.conjoint = LayerRange { start: a, end: l + 1 };
    let Some(s) = first_at_fraction(&curves.mean_subj, tau_subj) else {
        seg.failure = Some("subject curve never rises above zero".into());
        return Ok(seg);
    };
    let b = s - 1;
    if b < a {
        seg.failure = Some(format!("subject effect (layer {s}) does not follow relation effect (layer {a})"));
        return Ok(seg);
    }
    seg.emergence = LayerRange::inclusive(a, b);
    seg.conjoint = LayerRange { start: b + 1, end: l + 1 };
    Ok(seg)
}
