//! Hidden-state transplantation with a sliding end cursor at the last
//! position, reciprocal-rank tracking and range-accuracy tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervene::{range_overwrite_plan, record_clean};
use crate::kb::{KnowledgeBase, RelationId, TokenId, TransplantPair};
use crate::mediate::LayerRange;
use crate::model::{argmax, reciprocal_rank, Model};
use crate::par::try_par_map;

/// Ranks at the source's last position with layers `1..=cursor` transplanted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CursorRanks {
    pub cursor: usize,
    /// Reciprocal rank of `o3 = facts(s2, r1)`.
    pub rr_target: f64,
    /// Reciprocal rank of `o1`.
    pub rr_reference: f64,
    pub top1: TokenId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub pair: TransplantPair,
    /// One row per cursor `0..=L`; row 0 is the untouched source run.
    pub rows: Vec<CursorRanks>,
    pub reference_top1: TokenId,
}

/// Slide the cursor from 0 to L, overwriting the source run's last-position
/// states at layers `1..=p` with the reference run's (γ = 1).
pub fn sweep_cursor(model: &Model, pair: &TransplantPair) -> Result<RankReport> {
    if pair.target_object == pair.reference_object {
        return Err(Error::Comparison("pair has identical target and reference objects".into()));
    }
    let reference = record_clean(model, &pair.reference.tokens)?;
    let source = model.forward(&pair.source.tokens, None)?;
    let (rl, sl) = (reference.last_index(), pair.source.last_index());
    let l = model.n_layers();
    let row = |cursor: usize, logits: &[f32]| CursorRanks {
        cursor,
        rr_target: reciprocal_rank(logits, pair.target_object),
        rr_reference: reciprocal_rank(logits, pair.reference_object),
        top1: argmax(logits),
    };
    let mut rows = vec![row(0, &source.last_logits)];
    for p in 1..=l {
        let vectors: Vec<Vec<f32>> = (1..=p).map(|j| reference.state(rl, j).to_vec()).collect();
        let plan = range_overwrite_plan(&vectors, (1, p), sl, 1.0)?;
        let run = model.rerun(&source, &plan)?;
        rows.push(row(p, &run.last_logits));
    }
    Ok(RankReport { pair: pair.clone(), rows, reference_top1: reference.top1 })
}

pub fn sweep_all(model: &Model, pairs: &[TransplantPair], jobs: usize) -> Result<Vec<RankReport>> {
    try_par_map(pairs, jobs, |p| sweep_cursor(model, p))
}

/// `pair_id,cursor,rr_target,rr_reference` rows; pair ids index `reports`.
pub fn ranks_csv(reports: &[RankReport]) -> String {
    let mut s = String::from("pair_id,cursor,rr_target,rr_reference\n");
    for (id, r) in reports.iter().enumerate() {
        for c in &r.rows {
            s += &format!("{id},{},{:.9},{:.9}\n", c.cursor, c.rr_target, c.rr_reference);
        }
    }
    s
}

/// How a pair is scored within a layer range.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeScoring {
    /// Success if any cursor in the range reaches rank 1.
    #[default]
    Any,
    /// Success only at the range's right edge.
    Strict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeAccuracyRow {
    pub relation: RelationId,
    pub n_pairs: usize,
    /// `(target accuracy, reference accuracy)` per range.
    pub cells: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeAccuracyTable {
    pub ranges: Vec<LayerRange>,
    pub scoring: RangeScoring,
    pub rows: Vec<RangeAccuracyRow>,
}

impl RangeAccuracyTable {
    pub fn row(&self, r: RelationId) -> Option<&RangeAccuracyRow> {
        self.rows.iter().find(|row| row.relation == r)
    }

    /// One row per relation, a `target/reference` column pair per range.
    pub fn to_csv(&self, kb: &KnowledgeBase) -> String {
        let mut s = String::from("relation,n_pairs");
        for r in &self.ranges {
            s += &format!(",target_{r},reference_{r}");
        }
        s.push('\n');
        for row in &self.rows {
            s += &format!("{},{}", kb.relation_label(row.relation), row.n_pairs);
            for (t, r) in &row.cells {
                s += &format!(",{t:.6},{r:.6}");
            }
            s.push('\n');
        }
        s
    }
}

fn success(report: &RankReport, range: LayerRange, scoring: RangeScoring, pick: fn(&CursorRanks) -> f64) -> bool {
    let rows = &report.rows;
    match scoring {
        RangeScoring::Any => range.layers().filter_map(|p| rows.get(p)).any(|c| pick(c) == 1.0),
        RangeScoring::Strict => range.last().and_then(|p| rows.get(p)).is_some_and(|c| pick(c) == 1.0),
    }
}

/// Per reference relation and range, the fraction of pairs whose target
/// (resp. reference) object reaches rank 1 under `scoring`.
pub fn range_accuracy(
    reports: &[RankReport],
    ranges: &[LayerRange],
    scoring: RangeScoring,
) -> Result<RangeAccuracyTable> {
    if reports.is_empty() {
        return Err(Error::Analysis("no rank reports".into()));
    }
    let mut by_rel: BTreeMap<RelationId, Vec<&RankReport>> = BTreeMap::new();
    for r in reports {
        if r.pair.target_object == r.pair.reference_object {
            return Err(Error::Comparison("pair has identical target and reference objects".into()));
        }
        by_rel.entry(r.pair.reference_relation).or_default().push(r);
    }
    let rows = by_rel
        .into_iter()
        .map(|(relation, reps)| {
            let n = reps.len() as f64;
            let cells = ranges
                .iter()
                .map(|&range| {
                    let t = reps.iter().filter(|r| success(r, range, scoring, |c| c.rr_target)).count();
                    let f = reps.iter().filter(|r| success(r, range, scoring, |c| c.rr_reference)).count();
                    (t as f64 / n, f as f64 / n)
                })
                .collect();
            RangeAccuracyRow { relation, n_pairs: reps.len(), cells }
        })
        .collect();
    Ok(RangeAccuracyTable { ranges: ranges.to_vec(), scoring, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::{build_transplant_pairs, generate_kb, KbConfig, TemplateRegistry};
    use crate::model::ModelConfig;

    fn setup() -> (KnowledgeBase, Model, Vec<TransplantPair>) {
        let kb =
            generate_kb(&KbConfig { n_subjects: 12, n_relations: 3, pool_size: 12, ..Default::default() }).unwrap();
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
        let reg = TemplateRegistry::builtin();
        let pairs = build_transplant_pairs(&kb, reg.get("main").unwrap(), RelationId(0), 3, 1).unwrap();
        (kb, m, pairs)
    }

    #[test]
    fn cursor_endpoints() {
        let (_, m, pairs) = setup();
        for pair in &pairs {
            let rep = sweep_cursor(&m, pair).unwrap();
            assert_eq!(rep.rows.len(), 4);
            let untouched = m.last_logits(&pair.source.tokens).unwrap();
            assert_eq!(rep.rows[0].top1, argmax(&untouched));
            assert_eq!(rep.rows[3].top1, rep.reference_top1);
            assert!(rep.rows.iter().all(|c| c.rr_target > 0.0 && c.rr_target <= 1.0));
        }
    }

    fn fake(relation: usize, target: &[f64], reference: &[f64]) -> RankReport {
        let (_, _, pairs) = setup();
        let mut pair = pairs[0].clone();
        pair.reference_relation = RelationId(relation);
        let rows = target
            .iter()
            .zip(reference)
            .enumerate()
            .map(|(cursor, (&t, &r))| CursorRanks { cursor, rr_target: t, rr_reference: r, top1: 0 })
            .collect();
        RankReport { pair, rows, reference_top1: 0 }
    }

    #[test]
    fn range_scoring_rules() {
        let reports = vec![
            fake(0, &[0.5, 1.0, 0.5, 0.2], &[0.1, 0.2, 0.5, 1.0]),
            fake(0, &[0.5, 0.5, 1.0, 0.5], &[0.1, 0.2, 0.5, 1.0]),
        ];
        let ranges = [LayerRange::inclusive(0, 0), LayerRange::inclusive(1, 2), LayerRange::inclusive(3, 3)];
        let any = range_accuracy(&reports, &ranges, RangeScoring::Any).unwrap();
        assert_eq!(any.rows[0].cells, vec![(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]);
        let strict = range_accuracy(&reports, &ranges, RangeScoring::Strict).unwrap();
        assert_eq!(strict.rows[0].cells[1], (0.5, 0.0));

        let fails = vec![fake(1, &[0.5; 4], &[0.5; 4])];
        let t = range_accuracy(&fails, &ranges, RangeScoring::Any).unwrap();
        assert!(t.rows[0].cells.iter().all(|c| *c == (0.0, 0.0)));
        assert!(range_accuracy(&[], &ranges, RangeScoring::Any).is_err());
    }

    #[test]
    fn csv_layouts() {
        let (kb, m, pairs) = setup();
        let reps = sweep_all(&m, &pairs[..2], 2).unwrap();
        let csv = ranks_csv(&reps);
        assert!(csv.starts_with("pair_id,cursor,rr_target,rr_reference\n0,0,"));
        assert_eq!(csv.lines().count(), 1 + 2 * 4);
        let t = range_accuracy(&reps, &[LayerRange::inclusive(1, 2)], RangeScoring::Any).unwrap();
        let csv = t.to_csv(&kb);
        assert_eq!(csv.lines().next().unwrap(), "relation,n_pairs,target_1-2,reference_1-2");
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(ranks_csv(&[]), "pair_id,cursor,rr_target,rr_reference\n");
    }
}
