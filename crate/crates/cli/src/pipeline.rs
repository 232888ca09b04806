//! The staged experiment pipeline with checksummed caching.
//!
//! Every stage writes its artifacts under the output directory and later
//! stages read them back from disk, so a cache hit and a recomputation feed
//! downstream stages identical inputs.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use factscope_core::kb::{
    build_transplant_pairs, filter_predictable, generate_kb, render_prompt, FactTriple, FilterReport, KnowledgeBase,
    PromptItem, RelationId, SubjectId, TemplateRegistry, TokenSequence,
};
use factscope_core::mediate::{
    aggregate_by_relation, half_max_layer, mediate_facts, mediation_grid_par, segment_stages, StageCurves,
    StageSegmentation, Target, HEATMAP_SCHEMA_VERSION, STAGES_SCHEMA_VERSION,
};
use factscope_core::model::{argmax, init_model, load_checkpoint, save_checkpoint, train, Model, TrainMetrics};
use factscope_core::relation::{extract_relation, geometry_report, zero_shot_eval, RelationRepresentation};
use factscope_core::rewrite::{build_rewrite_cases, choose_donor, rewrite_eval, steer_generation, steer_transcript};
use factscope_core::transplant::{range_accuracy, ranks_csv, sweep_all};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::manifest::{file_sha256, sha256_hex, Artifact, ExperimentManifest, StageRecord};
use crate::{CliError, SCHEMA_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    KbGen,
    Train,
    Filter,
    Trace,
    Stages,
    Transplant,
    Extract,
    ZeroShot,
    Rewrite,
    Lens,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 11] = [
        Stage::KbGen,
        Stage::Train,
        Stage::Filter,
        Stage::Trace,
        Stage::Stages,
        Stage::Transplant,
        Stage::Extract,
        Stage::ZeroShot,
        Stage::Rewrite,
        Stage::Lens,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::KbGen => "kb-gen",
            Stage::Train => "train",
            Stage::Filter => "filter",
            Stage::Trace => "trace",
            Stage::Stages => "stages",
            Stage::Transplant => "transplant",
            Stage::Extract => "extract",
            Stage::ZeroShot => "zeroshot",
            Stage::Rewrite => "rewrite",
            Stage::Lens => "lens",
            Stage::Report => "report",
        }
    }

    pub fn deps(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            KbGen => &[],
            Train => &[KbGen],
            Filter => &[Train],
            Trace => &[Filter],
            Stages => &[Trace],
            Transplant | Extract | ZeroShot | Rewrite => &[Stages],
            Lens => &[Filter],
            Report => &[Transplant, Extract, ZeroShot, Rewrite, Lens],
        }
    }

    /// `self` and everything it transitively needs, in pipeline order.
    pub fn closure(self) -> Vec<Stage> {
        let mut need = vec![self];
        let mut i = 0;
        while i < need.len() {
            for d in need[i].deps() {
                if !need.contains(d) {
                    need.push(*d);
                }
            }
            i += 1;
        }
        need.sort();
        need
    }

    /// The slice of the configuration a stage's outputs depend on directly.
    fn config_fragment(self, c: &ExperimentConfig) -> Value {
        match self {
            Stage::KbGen => json!(c.kb),
            Stage::Train => json!({ "model": c.model, "train": c.train }),
            Stage::Filter => json!(c.filter),
            Stage::Trace => json!(c.mediate),
            Stage::Stages => json!(c.stages),
            Stage::Transplant => json!(c.transplant),
            Stage::Extract | Stage::ZeroShot => json!(c.relation),
            Stage::Rewrite => json!({ "rewrite": c.rewrite, "insert": c.relation.insert }),
            Stage::Lens => json!(c.lens),
            Stage::Report => json!(null),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out: PathBuf,
    pub jobs: usize,
    /// Recompute cached stages and fail if their checksums differ.
    pub verify: bool,
    /// Print per-stage progress to stderr.
    pub verbose: bool,
}

impl RunOptions {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self { out: out.into(), jobs: 1, verify: false, verbose: false }
    }
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub stage: Stage,
    pub cached: bool,
    pub elapsed: Duration,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub manifest: ExperimentManifest,
    pub stages: Vec<StageOutcome>,
}

/// Run every stage up to and including `target`, reusing cached stages whose
/// key and artifact checksums still match.
pub fn run_pipeline(cfg: &ExperimentConfig, target: Stage, opts: &RunOptions) -> Result<RunSummary, CliError> {
    cfg.validate()?;
    std::fs::create_dir_all(&opts.out).map_err(|e| CliError::Stage {
        stage: "setup",
        message: format!("cannot create {}: {e}", opts.out.display()),
    })?;
    let order: Vec<&str> = Stage::ALL.iter().map(|s| s.name()).collect();
    // stages of an earlier run stay reusable when their own key still matches
    let mut manifest = match ExperimentManifest::load(&opts.out) {
        Some(mut m) if m.schema_version == SCHEMA_VERSION => {
            m.config = cfg.clone();
            m
        }
        _ => ExperimentManifest::new(cfg.clone()),
    };
    std::fs::write(opts.out.join("config.ini"), cfg.to_ini())
        .map_err(|e| CliError::Stage { stage: "setup", message: format!("cannot write config.ini: {e}") })?;

    let mut ctx = Ctx::new(cfg, opts);
    let mut outcomes = Vec::new();
    for stage in target.closure() {
        let t = Instant::now();
        let key = stage_key(stage, cfg, &manifest);
        let hit = manifest
            .stage(stage.name())
            .filter(|r| {
                r.key == key
                    && r.artifacts.iter().all(|a| file_sha256(&opts.out.join(&a.path)).as_deref() == Some(&a.sha256))
            })
            .cloned();
        if opts.verbose {
            eprintln!("[{}] {}", stage.name(), if hit.is_some() { "cached" } else { "running" });
        }
        let cached = match hit {
            Some(_) if !opts.verify => {
                // detection must still halt the pipeline on a cache hit
                if stage == Stage::Stages {
                    ctx.stages()?.require_detection()?;
                }
                true
            }
            hit => {
                ctx.written.clear();
                run_stage(stage, &mut ctx).map_err(|e| match e {
                    CliError::Stage { message, .. } => CliError::Stage { stage: stage.name(), message },
                    other => other,
                })?;
                let artifacts = std::mem::take(&mut ctx.written);
                if let Some(old) = hit {
                    if old.artifacts != artifacts {
                        let diff: Vec<&str> =
                            artifacts.iter().filter(|a| !old.artifacts.contains(a)).map(|a| a.path.as_str()).collect();
                        return Err(CliError::Stage {
                            stage: stage.name(),
                            message: format!(
                                "cache verification failed: recomputed outputs differ ({})",
                                diff.join(", ")
                            ),
                        });
                    }
                }
                manifest.record(StageRecord { name: stage.name().into(), key, artifacts }, &order);
                manifest.save(&opts.out)?;
                false
            }
        };
        outcomes.push(StageOutcome { stage, cached, elapsed: t.elapsed() });
    }
    // drop records that no longer match the configuration or their inputs
    for stage in Stage::ALL {
        let key = stage_key(stage, cfg, &manifest);
        if manifest.stage(stage.name()).is_some_and(|r| r.key != key) {
            manifest.stages.retain(|r| r.name != stage.name());
        }
    }
    manifest.save(&opts.out)?;
    Ok(RunSummary { manifest, stages: outcomes })
}

fn stage_key(stage: Stage, cfg: &ExperimentConfig, manifest: &ExperimentManifest) -> String {
    let inputs: Vec<Value> = stage
        .deps()
        .iter()
        .map(|d| {
            let arts = manifest.stage(d.name()).map(|r| json!(r.artifacts)).unwrap_or(Value::Null);
            json!({ "stage": d.name(), "artifacts": arts })
        })
        .collect();
    let blob = json!({
        "stage": stage.name(),
        "tool_version": env!("CARGO_PKG_VERSION"),
        "config": stage.config_fragment(cfg),
        "inputs": inputs,
    });
    sha256_hex(blob.to_string().as_bytes())
}

// ---------------------------------------------------------------------------
// Stage context: artifact writing and lazily loaded upstream outputs
// ---------------------------------------------------------------------------

pub const KB_FILE: &str = "kb/kb.txt";
pub const FILTERED_KB_FILE: &str = "kb/filtered.txt";
pub const FILTER_FILE: &str = "kb/filter.json";
pub const CHECKPOINT_FILE: &str = "model/model.ckpt";
pub const TRAIN_FILE: &str = "model/train.json";
pub const LOSS_FILE: &str = "model/loss.csv";
pub const CURVES_CSV: &str = "trace/curves.csv";
pub const CURVES_FILE: &str = "trace/curves.json";
pub const HEATMAP_SUBJECT_FILE: &str = "trace/heatmap_subject.json";
pub const HEATMAP_RELATION_FILE: &str = "trace/heatmap_relation.json";
pub const STAGES_FILE: &str = "trace/stages.json";
pub const RANKS_FILE: &str = "transplant/ranks.csv";
pub const RANGE_TABLE_CSV: &str = "transplant/table.csv";
pub const RANGE_TABLE_FILE: &str = "transplant/table.json";
pub const GEOMETRY_FILE: &str = "relation/geometry.json";
pub const DISTANCES_FILE: &str = "relation/distances.csv";
pub const VECTORS_FILE: &str = "relation/vectors.csv";
pub const ZEROSHOT_CSV: &str = "relation/zeroshot.csv";
pub const ZEROSHOT_FILE: &str = "relation/zeroshot.json";
pub const REWRITE_CSV: &str = "rewrite/table.csv";
pub const REWRITE_FILE: &str = "rewrite/table.json";
pub const STEER_FILE: &str = "rewrite/steer.json";
pub const LENS_FILE: &str = "lens/lens.json";
pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.txt";

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a Path,
    jobs: usize,
    registry: TemplateRegistry,
    written: Vec<Artifact>,
    kb: Option<KnowledgeBase>,
    filtered: Option<KnowledgeBase>,
    model: Option<Model>,
    stages: Option<StagesFile>,
}

fn stage_err(e: impl std::fmt::Display) -> CliError {
    // the stage name is filled in by the runner
    CliError::Stage { stage: "", message: e.to_string() }
}

fn core_err(stage: Stage) -> impl Fn(factscope_core::Error) -> CliError {
    move |e| CliError::from_core(stage.name(), e)
}

impl<'a> Ctx<'a> {
    fn new(cfg: &'a ExperimentConfig, opts: &'a RunOptions) -> Self {
        Self {
            cfg,
            out: &opts.out,
            jobs: opts.jobs.max(1),
            registry: TemplateRegistry::builtin(),
            written: Vec::new(),
            kb: None,
            filtered: None,
            model: None,
            stages: None,
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(stage_err)?;
        }
        std::fs::write(&path, bytes).map_err(|e| stage_err(format!("cannot write {}: {e}", path.display())))?;
        self.record(rel)
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, v: &T) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(v).map_err(stage_err)? + "\n";
        self.write(rel, text.as_bytes())
    }

    /// Register a file some other writer produced.
    fn record(&mut self, rel: &str) -> Result<(), CliError> {
        let sha = file_sha256(&self.path(rel)).ok_or_else(|| stage_err(format!("cannot read back {rel}")))?;
        self.written.retain(|a| a.path != rel);
        self.written.push(Artifact { path: rel.into(), sha256: sha });
        Ok(())
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, rel: &str) -> Result<T, CliError> {
        let text = std::fs::read_to_string(self.path(rel)).map_err(|e| stage_err(format!("cannot read {rel}: {e}")))?;
        serde_json::from_str(&text).map_err(|e| stage_err(format!("{rel}: {e}")))
    }

    fn kb(&mut self) -> Result<&KnowledgeBase, CliError> {
        if self.kb.is_none() {
            self.kb = Some(KnowledgeBase::load(&self.path(KB_FILE)).map_err(stage_err)?);
        }
        Ok(self.kb.as_ref().expect("loaded"))
    }

    fn filtered(&mut self) -> Result<&KnowledgeBase, CliError> {
        if self.filtered.is_none() {
            self.filtered = Some(KnowledgeBase::load(&self.path(FILTERED_KB_FILE)).map_err(stage_err)?);
        }
        Ok(self.filtered.as_ref().expect("loaded"))
    }

    fn model(&mut self) -> Result<&Model, CliError> {
        if self.model.is_none() {
            let params = load_checkpoint(&self.path(CHECKPOINT_FILE)).map_err(stage_err)?;
            self.model = Some(Model::new(params).map_err(stage_err)?);
        }
        Ok(self.model.as_ref().expect("loaded"))
    }

    fn stages(&mut self) -> Result<&StagesFile, CliError> {
        if self.stages.is_none() {
            self.stages = Some(self.read_json(STAGES_FILE)?);
        }
        Ok(self.stages.as_ref().expect("loaded"))
    }

    /// Filtered KB, model and global segmentation, all loaded.
    fn analysis_inputs(&mut self) -> Result<(KnowledgeBase, Model, StageSegmentation), CliError> {
        let seg = self.stages()?.global.clone();
        let kb = self.filtered()?.clone();
        let model = self.model()?.clone();
        Ok((kb, model, seg))
    }
}

fn run_stage(stage: Stage, ctx: &mut Ctx) -> Result<(), CliError> {
    match stage {
        Stage::KbGen => kb_gen(ctx),
        Stage::Train => train_stage(ctx),
        Stage::Filter => filter_stage(ctx),
        Stage::Trace => trace_stage(ctx),
        Stage::Stages => stages_stage(ctx),
        Stage::Transplant => transplant_stage(ctx),
        Stage::Extract => extract_stage(ctx),
        Stage::ZeroShot => zeroshot_stage(ctx),
        Stage::Rewrite => rewrite_stage(ctx),
        Stage::Lens => lens_stage(ctx),
        Stage::Report => report_stage(ctx),
    }
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

fn kb_gen(ctx: &mut Ctx) -> Result<(), CliError> {
    let kb = generate_kb(&ctx.cfg.kb).map_err(core_err(Stage::KbGen))?;
    ctx.write(KB_FILE, kb.to_text().as_bytes())?;
    ctx.kb = Some(kb);
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TrainFile {
    schema_version: u32,
    steps: usize,
    final_loss: f32,
    accuracy: f64,
    per_relation_accuracy: Vec<(String, f64)>,
    n_params: usize,
    fingerprint: String,
}

fn train_stage(ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let mut model_cfg = cfg.model;
    let kb = ctx.kb()?.clone();
    if kb.vocab().len() > model_cfg.vocab_size {
        return Err(CliError::Config(format!(
            "KB vocabulary has {} tokens but model.vocab_size is {}",
            kb.vocab().len(),
            model_cfg.vocab_size
        )));
    }
    model_cfg.seed = cfg.model.seed;
    let params = init_model(&model_cfg).map_err(core_err(Stage::Train))?;
    let (params, metrics): (_, TrainMetrics) =
        train(params, &kb, &ctx.registry, &cfg.train).map_err(core_err(Stage::Train))?;
    let path = ctx.path(CHECKPOINT_FILE);
    std::fs::create_dir_all(path.parent().expect("has parent")).map_err(stage_err)?;
    save_checkpoint(&params, &path).map_err(stage_err)?;
    ctx.record(CHECKPOINT_FILE)?;
    let model = Model::new(params).map_err(stage_err)?;
    let mut loss = String::from("step,loss\n");
    for (i, l) in metrics.loss.iter().enumerate() {
        loss += &format!("{},{l:.6}\n", i + 1);
    }
    ctx.write(LOSS_FILE, loss.as_bytes())?;
    ctx.write_json(
        TRAIN_FILE,
        &TrainFile {
            schema_version: SCHEMA_VERSION,
            steps: metrics.steps,
            final_loss: metrics.loss.last().copied().unwrap_or(f32::NAN),
            accuracy: metrics.accuracy,
            per_relation_accuracy: metrics.per_relation_accuracy.clone(),
            n_params: model.params().n_params(),
            fingerprint: model.fingerprint().to_string(),
        },
    )?;
    ctx.model = Some(model);
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct FilterFile {
    schema_version: u32,
    template: String,
    retained_fraction: f64,
    report: FilterReport,
}

fn filter_stage(ctx: &mut Ctx) -> Result<(), CliError> {
    let template = ctx.registry.get(&ctx.cfg.filter.template).map_err(core_err(Stage::Filter))?.clone();
    let kb = ctx.kb()?.clone();
    let model = ctx.model()?.clone();
    let (filtered, report) = filter_predictable(&kb, &model, &template).map_err(core_err(Stage::Filter))?;
    ctx.write(FILTERED_KB_FILE, filtered.to_text().as_bytes())?;
    ctx.write_json(
        FILTER_FILE,
        &FilterFile {
            schema_version: SCHEMA_VERSION,
            template: template.id.clone(),
            retained_fraction: report.retained_fraction(),
            report,
        },
    )?;
    ctx.filtered = Some(filtered);
    Ok(())
}

/// The first `k` retained facts of every relation, in relation order.
fn facts_per_relation(kb: &KnowledgeBase, k: usize) -> Vec<FactTriple> {
    kb.relation_ids().flat_map(|r| kb.retained_facts().filter(move |f| f.relation == r).take(k)).collect()
}

#[derive(Serialize, Deserialize)]
struct CurvesFile {
    schema_version: u32,
    global: StageCurves,
    relations: Vec<(String, StageCurves)>,
}

fn trace_stage(ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let kb = ctx.filtered()?.clone();
    let model = ctx.model()?.clone();
    let template = ctx.registry.get(&cfg.filter.template).map_err(core_err(Stage::Trace))?.clone();
    let facts = facts_per_relation(&kb, cfg.mediate.facts_per_relation);
    if facts.is_empty() {
        return Err(stage_err("no retained facts to mediate"));
    }
    let med =
        mediate_facts(&model, &kb, &template, &facts, &cfg.mediate.noise, ctx.jobs).map_err(core_err(Stage::Trace))?;
    let (global, per) = aggregate_by_relation(&med).map_err(core_err(Stage::Trace))?;
    ctx.write(CURVES_CSV, global.to_csv().as_bytes())?;
    let relations = per.into_iter().map(|(r, c)| (kb.relation_label(r), c)).collect();
    ctx.write_json(CURVES_FILE, &CurvesFile { schema_version: STAGES_SCHEMA_VERSION, global, relations })?;

    // full-grid heatmaps for the first fact
    let f = facts[0];
    let prompt = render_prompt(&kb, PromptItem::Fact { subject: f.subject, relation: f.relation }, &template)
        .map_err(core_err(Stage::Trace))?;
    for (target, file) in [(Target::Subject, HEATMAP_SUBJECT_FILE), (Target::Relation, HEATMAP_RELATION_FILE)] {
        let grid = mediation_grid_par(&model, &prompt, f.object, target, &cfg.mediate.noise, ctx.jobs)
            .map_err(core_err(Stage::Trace))?;
        let heat = grid.heatmap(&kb);
        debug_assert_eq!(heat.schema_version, HEATMAP_SCHEMA_VERSION);
        ctx.write_json(file, &heat)?;
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RelationStages {
    pub relation: String,
    pub n_prompts: usize,
    pub half_max_rel: Option<usize>,
    pub half_max_subj: Option<usize>,
    /// Relation half-max strictly before subject half-max.
    pub ordered: bool,
    pub segmentation: StageSegmentation,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StagesFile {
    pub schema_version: u32,
    pub global: StageSegmentation,
    pub global_half_max_rel: Option<usize>,
    pub global_half_max_subj: Option<usize>,
    pub relations: Vec<RelationStages>,
}

impl StagesFile {
    fn require_detection(&self) -> Result<(), CliError> {
        match &self.global.failure {
            None => Ok(()),
            Some(why) => Err(CliError::Detection {
                stage: Stage::Stages.name(),
                message: format!(
                    "no relational-emergence stage in the aggregate curves ({why}); halting before transplant"
                ),
            }),
        }
    }
}

fn stages_stage(ctx: &mut Ctx) -> Result<(), CliError> {
    let (tr, ts) = (ctx.cfg.stages.tau_rel, ctx.cfg.stages.tau_subj);
    let curves: CurvesFile = ctx.read_json(CURVES_FILE)?;
    let seg = |c: &StageCurves| segment_stages(c, tr, ts).map_err(core_err(Stage::Stages));
    let relations = curves
        .relations
        .iter()
        .map(|(name, c)| {
            let (hr, hs) = (half_max_layer(&c.mean_rel), half_max_layer(&c.mean_subj));
            Ok(RelationStages {
                relation: name.clone(),
                n_prompts: c.n_prompts,
                half_max_rel: hr,
                half_max_subj: hs,
                ordered: matches!((hr, hs), (Some(a), Some(b)) if a < b),
                segmentation: seg(c)?,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let file = StagesFile {
        schema_version: STAGES_SCHEMA_VERSION,
        global: seg(&curves.global)?,
        global_half_max_rel: half_max_layer(&curves.global.mean_rel),
        global_half_max_subj: half_max_layer(&curves.global.mean_subj),
        relations,
    };
    ctx.write_json(STAGES_FILE, &file)?;
    let res = file.require_detection();
    ctx.stages = Some(file);
    res
}

fn transplant_stage(ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let (kb, model, seg) = ctx.analysis_inputs()?;
    seg.emergence_interval().map_err(core_err(Stage::Transplant))?;
    let template = ctx.registry.get(&cfg.filter.template).map_err(core_err(Stage::Transplant))?.clone();
    let mut pairs = Vec::new();
    for r in kb.relation_ids() {
        pairs.extend(
            build_transplant_pairs(&kb, &template, r, cfg.transplant.n_sources, cfg.transplant.seed)
                .map_err(core_err(Stage::Transplant))?,
        );
    }
    let reports = sweep_all(&model, &pairs, ctx.jobs).map_err(core_err(Stage::Transplant))?;
    ctx.write(RANKS_FILE, ranks_csv(&reports).as_bytes())?;
    let table = range_accuracy(&reports, &[seg.initial, seg.emergence, seg.conjoint], cfg.transplant.scoring)
        .map_err(core_err(Stage::Transplant))?;
    ctx.write(RANGE_TABLE_CSV, table.to_csv(&kb).as_bytes())?;
    let l = model.n_layers();
    let exact = reports.iter().filter(|r| r.rows[l].top1 == r.reference_top1).count();
    let relations: Vec<String> = table.rows.iter().map(|r| kb.relation_label(r.relation)).collect();
    ctx.write_json(
        RANGE_TABLE_FILE,
        &json!({
            "schema_version": SCHEMA_VERSION,
            "ranges": table.ranges.iter().map(|r| r.to_string()).collect::<Vec<_>>(),
            "scoring": table.scoring,
            "relations": relations,
            "table": table,
            "n_pairs": reports.len(),
            "cursor_at_l_matches": exact,
        }),
    )?;
    Ok(())
}

fn rep_file(kb: &KnowledgeBase, rep: &RelationRepresentation) -> String {
    format!("relation/reps/{}-{}.rep", kb.relation_label(rep.relation), kb.subject(rep.donor).name)
}

fn extract_stage(ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let (kb, model, seg) = ctx.analysis_inputs()?;
    let template = ctx.registry.get(&cfg.filter.template).map_err(core_err(Stage::Extract))?.clone();
    let mut reps = Vec::new();
    for r in kb.relation_ids().take(cfg.relation.geometry_relations) {
        for d in kb.retained_subjects(r).into_iter().take(cfg.relation.geometry_donors) {
            reps.push(extract_relation(&model, &kb, &template, d, r, &seg).map_err(core_err(Stage::Extract))?);
        }
    }
    for rep in &reps {
        let rel = rep_file(&kb, rep);
        let path = ctx.path(&rel);
        std::fs::create_dir_all(path.parent().expect("has parent")).map_err(stage_err)?;
        rep.save(&path).map_err(stage_err)?;
        ctx.record(&rel)?;
    }
    let geo = geometry_report(&reps).map_err(core_err(Stage::Extract))?;
    ctx.write(DISTANCES_FILE, geo.distances_csv(&kb).as_bytes())?;
    ctx.write(VECTORS_FILE, geo.vectors_csv(&kb).as_bytes())?;
    let n_relations = {
        let mut l = geo.labels.clone();
        l.dedup();
        l.len()
    };
    ctx.write_json(
        GEOMETRY_FILE,
        &json!({
            "schema_version": SCHEMA_VERSION,
            "interval": seg.emergence.to_string(),
            "n_relations": n_relations,
            "n_points": reps.len(),
            "silhouette": geo.silhouette,
            "labels": geo.labels.iter().map(|r| kb.relation_label(*r)).collect::<Vec<_>>(),
            "donors": geo.donors.iter().map(|d| kb.subject(*d).name.clone()).collect::<Vec<_>>(),
        }),
    )?;
    Ok(())
}

fn zeroshot_stage(ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let (kb, model, seg) = ctx.analysis_inputs()?;
    let filter: FilterFile = ctx.read_json(FILTER_FILE)?;
    let full = ctx.registry.get(&cfg.filter.template).map_err(core_err(Stage::ZeroShot))?.clone();
    let zs = ctx.registry.get(&cfg.relation.zero_shot_template).map_err(core_err(Stage::ZeroShot))?.clone();
    let mut csv = String::from("relation,mean_accuracy,std_accuracy,full_prompt_accuracy,in_pool,n_donors\n");
    let mut rows = Vec::new();
    for r in kb.relation_ids() {
        let donors: Vec<SubjectId> = kb.retained_subjects(r).into_iter().take(cfg.relation.zero_shot_donors).collect();
        let rep = zero_shot_eval(&model, &kb, r, &seg, &donors, &full, &zs, cfg.relation.insert, ctx.jobs)
            .map_err(core_err(Stage::ZeroShot))?;
        let row = &filter.report.rows[r.0];
        let full_acc = row.retained as f64 / row.initial.max(1) as f64;
        csv += &format!(
            "{},{:.6},{:.6},{:.6},{:.6},{}\n",
            kb.relation_label(r),
            rep.mean_accuracy,
            rep.std_accuracy,
            full_acc,
            rep.in_pool_fraction(),
            rep.donors.len()
        );
        rows.push(json!({ "relation": kb.relation_label(r), "full_prompt_accuracy": full_acc, "report": rep }));
    }
    ctx.write(ZEROSHOT_CSV, csv.as_bytes())?;
    ctx.write_json(
        ZEROSHOT_FILE,
        &json!({ "schema_version": SCHEMA_VERSION, "template": zs.id, "interval": seg.emergence.to_string(), "relations": rows }),
    )?;
    Ok(())
}

fn rewrite_stage(ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let (kb, model, seg) = ctx.analysis_inputs()?;
    let full = ctx.registry.get(&cfg.filter.template).map_err(core_err(Stage::Rewrite))?.clone();
    let err = core_err(Stage::Rewrite);
    let table = rewrite_eval(
        &model,
        &kb,
        &ctx.registry,
        &full,
        &cfg.rewrite.gammas,
        &seg,
        cfg.rewrite.seed,
        cfg.relation.insert,
        ctx.jobs,
    )
    .map_err(&err)?;
    ctx.write(REWRITE_CSV, table.to_csv(&kb).as_bytes())?;
    let relations: Vec<String> = table.rows.iter().map(|r| kb.relation_label(r.relation)).collect();
    ctx.write_json(REWRITE_FILE, &json!({ "schema_version": SCHEMA_VERSION, "relations": relations, "table": table }))?;

    // one steered generation per relation, on its first rewrite case
    let gamma = cfg.rewrite.gammas[0];
    let mut transcripts = Vec::new();
    for row in &table.rows {
        let r: RelationId = row.relation;
        let donor = choose_donor(&kb, r, cfg.rewrite.seed).map_err(&err)?;
        let rep = extract_relation(&model, &kb, &full, donor, r, &seg).map_err(&err)?;
        let cases = build_rewrite_cases(&kb, &ctx.registry, r, donor, cfg.rewrite.seed).map_err(&err)?;
        let Some(case) = cases.first() else { continue };
        let out: TokenSequence =
            steer_generation(&model, &case.inquiry, &rep, gamma, cfg.rewrite.steer_tokens, cfg.rewrite.steer_persist)
                .map_err(&err)?;
        transcripts.push(
            steer_transcript(&kb, &case.inquiry, &rep, gamma, cfg.rewrite.steer_persist, &out, None).map_err(&err)?,
        );
    }
    ctx.write_json(STEER_FILE, &json!({ "schema_version": SCHEMA_VERSION, "transcripts": transcripts }))?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct LensEntry {
    prompt: String,
    object: String,
    output: String,
    layers: Vec<Vec<(String, f32)>>,
}

fn lens_stage(ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let kb = ctx.filtered()?.clone();
    let model = ctx.model()?.clone();
    let template = ctx.registry.get(&cfg.filter.template).map_err(core_err(Stage::Lens))?.clone();
    let err = core_err(Stage::Lens);
    let mut entries = Vec::new();
    let mut consistent = 0;
    let facts = facts_per_relation(&kb, cfg.lens.facts_per_relation);
    for f in &facts {
        let prompt = render_prompt(&kb, PromptItem::Fact { subject: f.subject, relation: f.relation }, &template)
            .map_err(&err)?;
        let run = model.forward(&prompt.tokens, None).map_err(&err)?;
        let output = argmax(&run.last_logits);
        let mut layers = Vec::new();
        for j in 0..=model.n_layers() {
            let lens = model.early_decode(&run.trace, j, cfg.lens.top_k).map_err(&err)?;
            layers.push(lens.top.iter().map(|(t, p)| (kb.vocab().token(*t), *p)).collect::<Vec<_>>());
            if j == model.n_layers() && lens.top.first().map(|t| t.0) == Some(output) {
                consistent += 1;
            }
        }
        entries.push(LensEntry {
            prompt: kb.vocab().decode(&prompt.tokens),
            object: kb.vocab().token(f.object),
            output: kb.vocab().token(output),
            layers,
        });
    }
    ctx.write_json(
        LENS_FILE,
        &json!({
            "schema_version": SCHEMA_VERSION,
            "top_k": cfg.lens.top_k,
            "n_prompts": entries.len(),
            "final_layer_consistent": consistent,
            "prompts": entries,
        }),
    )?;
    Ok(())
}

fn report_stage(ctx: &mut Ctx) -> Result<(), CliError> {
    let train: Value = ctx.read_json(TRAIN_FILE)?;
    let filter: Value = ctx.read_json(FILTER_FILE)?;
    let stages: StagesFile = ctx.read_json(STAGES_FILE)?;
    let transplant: Value = ctx.read_json(RANGE_TABLE_FILE)?;
    let geometry: Value = ctx.read_json(GEOMETRY_FILE)?;
    let zeroshot: Value = ctx.read_json(ZEROSHOT_FILE)?;
    let rewrite: Value = ctx.read_json(REWRITE_FILE)?;
    let lens: Value = ctx.read_json(LENS_FILE)?;

    let ordered = stages.relations.iter().filter(|r| r.ordered && r.segmentation.detected()).count();
    let zs_rows = zeroshot["relations"].as_array().cloned().unwrap_or_default();
    let mean = |key: &dyn Fn(&Value) -> f64| zs_rows.iter().map(key).sum::<f64>() / zs_rows.len().max(1) as f64;
    let zs_mean = mean(&|r| r["report"]["mean_accuracy"].as_f64().unwrap_or(0.0));
    let full_mean = mean(&|r| r["full_prompt_accuracy"].as_f64().unwrap_or(0.0));

    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "training": { "accuracy": train["accuracy"], "final_loss": train["final_loss"], "steps": train["steps"] },
        "filter": { "retained_fraction": filter["retained_fraction"] },
        "stages": {
            "initial": stages.global.initial.to_string(),
            "emergence": stages.global.emergence.to_string(),
            "conjoint": stages.global.conjoint.to_string(),
            "relations_ordered_and_detected": ordered,
            "n_relations": stages.relations.len(),
        },
        "transplant": {
            "ranges": transplant["ranges"],
            "n_pairs": transplant["n_pairs"],
            "cursor_at_l_matches": transplant["cursor_at_l_matches"],
        },
        "zeroshot": { "mean_accuracy": zs_mean, "mean_full_prompt_accuracy": full_mean },
        "rewrite": { "gammas": rewrite["table"]["gammas"] },
        "geometry": { "silhouette": geometry["silhouette"], "n_points": geometry["n_points"] },
        "lens": { "final_layer_consistent": lens["final_layer_consistent"], "n_prompts": lens["n_prompts"] },
    });
    ctx.write_json(REPORT_FILE, &report)?;

    let mut s = String::new();
    s += &format!(
        "training accuracy {:.4}, filter retained {:.4}\n",
        train["accuracy"].as_f64().unwrap_or(0.0),
        filter["retained_fraction"].as_f64().unwrap_or(0.0)
    );
    s += &format!(
        "stages: initial {} | emergence {} | conjoint {}  ({} of {} relations ordered with a detected emergence stage)\n",
        stages.global.initial,
        stages.global.emergence,
        stages.global.conjoint,
        ordered,
        stages.relations.len()
    );
    s += &format!(
        "transplant: cursor at L reproduces the reference top-1 in {} of {} pairs\n",
        transplant["cursor_at_l_matches"], transplant["n_pairs"]
    );
    s += &format!("zero-shot accuracy {zs_mean:.4} (full prompt {full_mean:.4})\n");
    s += &format!("geometry silhouette {}\n", geometry["silhouette"]);
    s += &format!(
        "lens: final layer agrees with output in {} of {} prompts\n",
        lens["final_layer_consistent"], lens["n_prompts"]
    );
    s += "\ntransplant range accuracy (target/reference):\n";
    s += &std::fs::read_to_string(ctx.path(RANGE_TABLE_CSV)).map_err(stage_err)?;
    s += "\nrewrite accuracy:\n";
    s += &std::fs::read_to_string(ctx.path(REWRITE_CSV)).map_err(stage_err)?;
    s += "\nzero-shot accuracy:\n";
    s += &std::fs::read_to_string(ctx.path(ZEROSHOT_CSV)).map_err(stage_err)?;
    ctx.write(SUMMARY_FILE, s.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closure_is_ordered_and_complete() {
        assert_eq!(Stage::KbGen.closure(), vec![Stage::KbGen]);
        assert_eq!(
            Stage::Stages.closure(),
            vec![Stage::KbGen, Stage::Train, Stage::Filter, Stage::Trace, Stage::Stages]
        );
        assert_eq!(Stage::Report.closure(), Stage::ALL.to_vec());
        assert_eq!(Stage::Lens.closure(), vec![Stage::KbGen, Stage::Train, Stage::Filter, Stage::Lens]);
    }

    #[test]
    fn key_depends_on_config_and_inputs() {
        let c = ExperimentConfig::default();
        let m = ExperimentManifest::new(c.clone());
        let k = stage_key(Stage::Train, &c, &m);
        assert_eq!(k, stage_key(Stage::Train, &c, &m));
        let mut c2 = c.clone();
        c2.train.steps += 1;
        assert_ne!(k, stage_key(Stage::Train, &c2, &m));
        c2 = c.clone();
        c2.lens.top_k += 1;
        assert_eq!(k, stage_key(Stage::Train, &c2, &m));
        let mut m2 = m.clone();
        let art = Artifact { path: KB_FILE.into(), sha256: "x".into() };
        m2.record(StageRecord { name: "kb-gen".into(), key: "k".into(), artifacts: vec![art] }, &["kb-gen"]);
        assert_ne!(k, stage_key(Stage::Train, &c, &m2));
    }
}
