//! Relational representations E(r): extraction from the emergence interval,
//! zero-shot reasoning by insertion, and representation geometry.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervene::{record_clean, scaled_range_plan, InterventionPlan};
use crate::kb::{
    render_prompt, KnowledgeBase, PromptItem, PromptTemplate, RelationId, SubjectId, TemplateKind, TokenId,
    TokenSequence,
};
use crate::mediate::StageSegmentation;
use crate::model::{argmax, Model};
use crate::par::try_par_map;

pub const REPRESENTATION_SCHEMA_VERSION: u32 = 1;

/// Last-position states over `[a, b]` of a clean full-prompt run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationRepresentation {
    pub relation: RelationId,
    pub donor: SubjectId,
    /// Inclusive layer interval `[a, b]`, `a ≥ 1`.
    pub interval: (usize, usize),
    pub vectors: Vec<Vec<f32>>,
    pub fingerprint: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RepHeader {
    schema_version: u32,
    relation: RelationId,
    donor: SubjectId,
    interval: (usize, usize),
    dim: usize,
    fingerprint: String,
}

impl RelationRepresentation {
    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    /// Interval vectors concatenated in layer order.
    pub fn flattened(&self) -> Vec<f32> {
        self.vectors.concat()
    }

    pub fn check_model(&self, model: &Model) -> Result<()> {
        if self.fingerprint != model.fingerprint() {
            return Err(Error::Fingerprint {
                expected: self.fingerprint.clone(),
                found: model.fingerprint().to_string(),
            });
        }
        Ok(())
    }

    /// Plan inserting `γ · E(r)` at `position` over the interval.
    pub fn plan(&self, position: usize, gamma: f32, mode: InsertMode) -> Result<InterventionPlan> {
        scaled_range_plan(&self.vectors, self.interval, position, gamma, mode == InsertMode::Add)
    }

    /// JSON header line, then the little-endian f32 payload.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = RepHeader {
            schema_version: REPRESENTATION_SCHEMA_VERSION,
            relation: self.relation,
            donor: self.donor,
            interval: self.interval,
            dim: self.dim(),
            fingerprint: self.fingerprint.clone(),
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut f, &header)?;
        f.write_all(b"\n")?;
        for x in self.flattened() {
            f.write_all(&x.to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let h: RepHeader = serde_json::from_str(line.trim_end())?;
        if h.schema_version != REPRESENTATION_SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported representation schema {}", h.schema_version)));
        }
        let (a, b) = h.interval;
        if a == 0 || b < a {
            return Err(Error::Format(format!("invalid interval [{a}, {b}]")));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let n = (b - a + 1) * h.dim;
        if payload.len() != n * 4 {
            return Err(Error::Format(format!("payload has {} bytes, expected {}", payload.len(), n * 4)));
        }
        let flat: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Self {
            relation: h.relation,
            donor: h.donor,
            interval: h.interval,
            vectors: flat.chunks(h.dim.max(1)).map(|c| c.to_vec()).collect(),
            fingerprint: h.fingerprint,
        })
    }
}

/// Replacement (default) or additive insertion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertMode {
    #[default]
    Replace,
    Add,
}

/// Copy the clean last-position states of `prompt` over `interval`.
pub fn extract_from_prompt(
    model: &Model,
    prompt: &TokenSequence,
    relation: RelationId,
    donor: SubjectId,
    interval: (usize, usize),
) -> Result<RelationRepresentation> {
    let (a, b) = interval;
    if a == 0 || b < a || b > model.n_layers() {
        return Err(Error::Extraction(format!("interval [{a}, {b}] outside 1..={}", model.n_layers())));
    }
    let clean = record_clean(model, &prompt.tokens)?;
    let last = clean.last_index();
    Ok(RelationRepresentation {
        relation,
        donor,
        interval,
        vectors: (a..=b).map(|j| clean.state(last, j).to_vec()).collect(),
        fingerprint: model.fingerprint().to_string(),
    })
}

/// E(r) from the donor's full prompt `I(donor, relation)` over the detected
/// emergence interval.
pub fn extract_relation(
    model: &Model,
    kb: &KnowledgeBase,
    template: &PromptTemplate,
    donor: SubjectId,
    relation: RelationId,
    segmentation: &StageSegmentation,
) -> Result<RelationRepresentation> {
    let interval = segmentation.emergence_interval()?;
    let prompt = render_prompt(kb, PromptItem::Fact { subject: donor, relation }, template)?;
    extract_from_prompt(model, &prompt, relation, donor, interval)
}

/// ô = T(I(s), E(r)): insert E(r) at the subject-only prompt's last position.
pub fn zero_shot_reason(
    model: &Model,
    subject_prompt: &TokenSequence,
    rep: &RelationRepresentation,
) -> Result<TokenId> {
    zero_shot_reason_with(model, subject_prompt, rep, InsertMode::Replace)
}

pub fn zero_shot_reason_with(
    model: &Model,
    subject_prompt: &TokenSequence,
    rep: &RelationRepresentation,
    mode: InsertMode,
) -> Result<TokenId> {
    rep.check_model(model)?;
    if subject_prompt.relation_span.is_some() {
        return Err(Error::Analysis("zero-shot prompt must not contain a relation span".into()));
    }
    let plan = rep.plan(subject_prompt.last_index(), 1.0, mode)?;
    Ok(argmax(&model.forward(&subject_prompt.tokens, Some(&plan))?.last_logits))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DonorAccuracy {
    pub donor: SubjectId,
    pub accuracy: f64,
    pub n_evaluated: usize,
    /// Fraction of predictions inside the relation's object pool.
    pub in_pool: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub relation: RelationId,
    pub mean_accuracy: f64,
    /// Population standard deviation across donors.
    pub std_accuracy: f64,
    pub donors: Vec<DonorAccuracy>,
}

impl ZeroShotReport {
    pub fn in_pool_fraction(&self) -> f64 {
        let n: usize = self.donors.iter().map(|d| d.n_evaluated).sum();
        let k: f64 = self.donors.iter().map(|d| d.in_pool * d.n_evaluated as f64).sum();
        k / n.max(1) as f64
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (mean, (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// For each donor `d`, extract E(r) from `I(d, r)` and score zero-shot
/// predictions over every other subject retained for `r`.
#[allow(clippy::too_many_arguments)]
pub fn zero_shot_eval(
    model: &Model,
    kb: &KnowledgeBase,
    relation: RelationId,
    segmentation: &StageSegmentation,
    donors: &[SubjectId],
    full_template: &PromptTemplate,
    zero_shot_template: &PromptTemplate,
    mode: InsertMode,
    jobs: usize,
) -> Result<ZeroShotReport> {
    if zero_shot_template.kind != TemplateKind::ZeroShot {
        return Err(Error::Config(format!("template {} is not a zero-shot template", zero_shot_template.id)));
    }
    let interval = segmentation.emergence_interval()?;
    let subjects = kb.retained_subjects(relation);
    if donors.len() < 2 || subjects.len() < 2 {
        return Err(Error::Analysis(format!(
            "zero-shot evaluation needs at least two donors and two subjects (have {} and {})",
            donors.len(),
            subjects.len()
        )));
    }
    // clean subject-only runs are shared by every donor; only the last
    // position is recomputed per insertion
    let runs = try_par_map(&subjects, jobs, |&s| {
        let prompt = render_prompt(kb, PromptItem::Subject(s), zero_shot_template)?;
        Ok::<_, Error>((s, model.forward(&prompt.tokens, None)?))
    })?;
    let pool = &kb.relation(relation).pool;
    let per_donor = try_par_map(donors, jobs, |&d| -> Result<DonorAccuracy> {
        let prompt = render_prompt(kb, PromptItem::Fact { subject: d, relation }, full_template)?;
        let rep = extract_from_prompt(model, &prompt, relation, d, interval)?;
        let (mut hits, mut in_pool, mut n) = (0usize, 0usize, 0usize);
        for (s, run) in runs.iter().filter(|(s, _)| *s != d) {
            let plan = rep.plan(run.last_index(), 1.0, mode)?;
            let pred = argmax(&model.rerun(run, &plan)?.last_logits);
            n += 1;
            hits += usize::from(Some(pred) == kb.object(*s, relation));
            in_pool += usize::from(pool.contains(&pred));
        }
        Ok(DonorAccuracy {
            donor: d,
            accuracy: hits as f64 / n.max(1) as f64,
            n_evaluated: n,
            in_pool: in_pool as f64 / n.max(1) as f64,
        })
    })?;
    let (mean_accuracy, std_accuracy) = mean_std(&per_donor.iter().map(|d| d.accuracy).collect::<Vec<_>>());
    Ok(ZeroShotReport { relation, mean_accuracy, std_accuracy, donors: per_donor })
}

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

/// What each representation contributes to the geometry.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryView {
    /// All interval vectors concatenated.
    #[default]
    Concatenated,
    /// A single layer of the interval.
    Layer(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub labels: Vec<RelationId>,
    pub donors: Vec<SubjectId>,
    pub distances: Vec<Vec<f64>>,
    /// `None` when undefined (a single cluster, or all points coincide).
    pub silhouette: Option<f64>,
    pub vectors: Vec<Vec<f32>>,
}

impl GeometryReport {
    pub fn distances_csv(&self, kb: &KnowledgeBase) -> String {
        let names: Vec<String> =
            self.labels.iter().zip(&self.donors).map(|(r, d)| format!("{}/{}", kb.relation_label(*r), d)).collect();
        let mut s = format!("point,{}\n", names.join(","));
        for (name, row) in names.iter().zip(&self.distances) {
            s += name;
            for v in row {
                s += &format!(",{v:.6}");
            }
            s.push('\n');
        }
        s
    }

    /// One row per representation: relation, donor, then the coordinates.
    pub fn vectors_csv(&self, kb: &KnowledgeBase) -> String {
        let mut s = String::from("relation,donor,values\n");
        for ((r, d), v) in self.labels.iter().zip(&self.donors).zip(&self.vectors) {
            let vals: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
            s += &format!("{},{},{}\n", kb.relation_label(*r), d, vals.join(" "));
        }
        s
    }
}

pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt()
}

/// Mean silhouette of a labelled point set from its distance matrix.
/// Points in singleton clusters score 0. `None` with fewer than two
/// clusters or when every distance is zero.
pub fn silhouette<L: PartialEq>(distances: &[Vec<f64>], labels: &[L]) -> Option<f64> {
    let n = labels.len();
    let mut clusters: Vec<&L> = Vec::new();
    for l in labels {
        if !clusters.contains(&l) {
            clusters.push(l);
        }
    }
    if clusters.len() < 2 || distances.iter().flatten().all(|d| *d == 0.0) {
        return None;
    }
    let mut total = 0.0;
    for i in 0..n {
        let mean_to = |c: &L, skip_self: bool| {
            let (mut sum, mut k) = (0.0, 0usize);
            for j in 0..n {
                if labels[j] == *c && !(skip_self && j == i) {
                    sum += distances[i][j];
                    k += 1;
                }
            }
            (k > 0).then(|| sum / k as f64)
        };
        let Some(a) = mean_to(&labels[i], true) else {
            continue; // singleton cluster
        };
        let b = clusters
            .iter()
            .filter(|c| ***c != labels[i])
            .filter_map(|c| mean_to(c, false))
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Some(total / n as f64)
}

pub fn geometry_report(reps: &[RelationRepresentation]) -> Result<GeometryReport> {
    geometry_report_with(reps, GeometryView::Concatenated)
}

pub fn geometry_report_with(reps: &[RelationRepresentation], view: GeometryView) -> Result<GeometryReport> {
    let Some(first) = reps.first() else {
        return Err(Error::Comparison("no representations".into()));
    };
    if let Some(r) = reps.iter().find(|r| r.interval != first.interval || r.dim() != first.dim()) {
        return Err(Error::Comparison(format!(
            "representation intervals differ: [{}, {}] vs [{}, {}]",
            r.interval.0, r.interval.1, first.interval.0, first.interval.1
        )));
    }
    let mut counts: std::collections::BTreeMap<RelationId, usize> = Default::default();
    for r in reps {
        *counts.entry(r.relation).or_default() += 1;
    }
    if counts.len() < 2 || counts.values().any(|&c| c < 2) {
        return Err(Error::Comparison("geometry needs at least two relations with two donors each".into()));
    }
    let vectors: Vec<Vec<f32>> = match view {
        GeometryView::Concatenated => reps.iter().map(|r| r.flattened()).collect(),
        GeometryView::Layer(j) => {
            let (a, b) = first.interval;
            if !(a..=b).contains(&j) {
                return Err(Error::Comparison(format!("layer {j} outside interval [{a}, {b}]")));
            }
            reps.iter().map(|r| r.vectors[j - a].clone()).collect()
        }
    };
    let distances: Vec<Vec<f64>> = vectors.iter().map(|a| vectors.iter().map(|b| euclidean(a, b)).collect()).collect();
    let labels: Vec<RelationId> = reps.iter().map(|r| r.relation).collect();
    Ok(GeometryReport {
        silhouette: silhouette(&distances, &labels),
        donors: reps.iter().map(|r| r.donor).collect(),
        labels,
        distances,
        vectors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::{generate_kb, KbConfig, TemplateRegistry, MAIN_TEMPLATE, ZERO_SHOT_TEMPLATE};
    use crate::mediate::LayerRange;
    use crate::model::ModelConfig;

    fn rep(relation: usize, donor: usize, v: Vec<f32>) -> RelationRepresentation {
        RelationRepresentation {
            relation: RelationId(relation),
            donor: SubjectId(donor),
            interval: (2, 2),
            vectors: vec![v],
            fingerprint: "x".into(),
        }
    }

    #[test]
    fn separated_clusters_score_high() {
        let mut reps = Vec::new();
        for k in 0..5 {
            let e = 0.01 * k as f32;
            reps.push(rep(0, k, vec![e, -e, 0.0]));
            reps.push(rep(1, k, vec![10.0 + e, 10.0, e]));
        }
        let g = geometry_report(&reps).unwrap();
        assert!(g.silhouette.unwrap() > 0.9);
        assert_eq!(g.distances[0][0], 0.0);
        assert!((g.distances[0][1] - g.distances[1][0]).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_silhouette() {
        // points 0, 1 | 4: a(0)=1, b(0)=4 → 0.75; a(1)=1, b(1)=3 → 2/3; singleton → 0
        let pts = [0.0f64, 1.0, 4.0];
        let d: Vec<Vec<f64>> = pts.iter().map(|a| pts.iter().map(|b| (a - b).abs()).collect()).collect();
        let s = silhouette(&d, &[0, 0, 1]).unwrap();
        assert!((s - (0.75 + 2.0 / 3.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_geometry() {
        let reps: Vec<_> = (0..4).map(|k| rep(k % 2, k, vec![1.0, 2.0])).collect();
        assert_eq!(geometry_report(&reps).unwrap().silhouette, None);
        assert!(matches!(geometry_report(&reps[..3]), Err(Error::Comparison(_))));
        let mut bad = reps.clone();
        bad[1].interval = (3, 3);
        assert!(matches!(geometry_report(&bad), Err(Error::Comparison(_))));
        assert_eq!(silhouette(&[vec![0.0, 1.0], vec![1.0, 0.0]], &[0, 0]), None);
    }

    fn toy() -> (KnowledgeBase, Model, TemplateRegistry) {
        let kb = generate_kb(&KbConfig { n_subjects: 5, n_relations: 2, pool_size: 4, ..Default::default() }).unwrap();
        let m = Model::init(&ModelConfig {
            n_layers: 3,
            d_model: 16,
            n_heads: 2,
            vocab_size: kb.vocab().len(),
            max_context: 16,
            d_ff: 32,
            seed: 2,
        })
        .unwrap();
        (kb, m, TemplateRegistry::builtin())
    }

    fn seg(a: usize, b: usize, l: usize) -> StageSegmentation {
        StageSegmentation {
            n_layers: l,
            initial: LayerRange { start: 0, end: a },
            emergence: LayerRange::inclusive(a, b),
            conjoint: LayerRange { start: b + 1, end: l + 1 },
            tau_rel: 0.2,
            tau_subj: 0.1,
            failure: None,
        }
    }

    #[test]
    fn extraction_shape_determinism_and_identity() {
        let (kb, m, reg) = toy();
        let main = reg.get(MAIN_TEMPLATE).unwrap();
        let s = seg(1, 2, 3);
        let a = extract_relation(&m, &kb, main, SubjectId(1), RelationId(0), &s).unwrap();
        let b = extract_relation(&m, &kb, main, SubjectId(1), RelationId(0), &s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.vectors.len(), 2);

        // insertion into the prompt it came from is a no-op
        let prompt =
            render_prompt(&kb, PromptItem::Fact { subject: SubjectId(1), relation: RelationId(0) }, main).unwrap();
        let clean = m.last_logits(&prompt.tokens).unwrap();
        let patched =
            m.forward(&prompt.tokens, Some(&a.plan(prompt.last_index(), 1.0, InsertMode::Replace).unwrap())).unwrap();
        for (x, y) in clean.iter().zip(&patched.last_logits) {
            assert!((x - y).abs() < 1e-6);
        }

        let mut failed = s.clone();
        failed.failure = Some("flat".into());
        assert!(matches!(
            extract_relation(&m, &kb, main, SubjectId(1), RelationId(0), &failed),
            Err(Error::Extraction(_))
        ));
    }

    #[test]
    fn zero_shot_guards() {
        let (kb, m, reg) = toy();
        let zs = reg.get(ZERO_SHOT_TEMPLATE).unwrap();
        let main = reg.get(MAIN_TEMPLATE).unwrap();
        let prompt = render_prompt(&kb, PromptItem::Subject(SubjectId(2)), zs).unwrap();
        // vectors recorded from the zero-shot run itself change nothing
        let own = extract_from_prompt(&m, &prompt, RelationId(0), SubjectId(2), (1, 3)).unwrap();
        assert_eq!(zero_shot_reason(&m, &prompt, &own).unwrap(), argmax(&m.last_logits(&prompt.tokens).unwrap()));

        let full =
            render_prompt(&kb, PromptItem::Fact { subject: SubjectId(2), relation: RelationId(0) }, main).unwrap();
        assert!(matches!(zero_shot_reason(&m, &full, &own), Err(Error::Analysis(_))));
        let mut foreign = own.clone();
        foreign.fingerprint = "deadbeef".into();
        assert!(matches!(zero_shot_reason(&m, &prompt, &foreign), Err(Error::Fingerprint { .. })));
    }

    #[test]
    fn zero_shot_eval_needs_donors() {
        let (kb, m, reg) = toy();
        let (main, zs) = (reg.get(MAIN_TEMPLATE).unwrap(), reg.get(ZERO_SHOT_TEMPLATE).unwrap());
        let s = seg(1, 2, 3);
        let one = zero_shot_eval(&m, &kb, RelationId(0), &s, &[SubjectId(0)], main, zs, InsertMode::Replace, 1);
        assert!(one.is_err());
        let r =
            zero_shot_eval(&m, &kb, RelationId(0), &s, &[SubjectId(0), SubjectId(1)], main, zs, InsertMode::Replace, 2)
                .unwrap();
        assert_eq!(r.donors.len(), 2);
        assert!(r.donors.iter().all(|d| d.n_evaluated == 4));
        assert!((0.0..=1.0).contains(&r.mean_accuracy));
    }

    #[test]
    fn rep_file_round_trip() {
        let (kb, m, reg) = toy();
        let r = extract_relation(&m, &kb, reg.get(MAIN_TEMPLATE).unwrap(), SubjectId(0), RelationId(1), &seg(1, 3, 3))
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.rep");
        r.save(&path).unwrap();
        assert_eq!(RelationRepresentation::load(&path).unwrap(), r);
    }
}
