use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use factscope_cli::pipeline::{self, SUMMARY_FILE};
use factscope_cli::{run_pipeline, CliError, ExperimentConfig, RunOptions, Stage};
use factscope_core::kb::{render_prompt, KnowledgeBase, PromptItem, TemplateRegistry};
use factscope_core::mediate::{mediation_grid_par, Target};
use factscope_core::model::{load_checkpoint, Model};
use factscope_core::relation::extract_relation;

/// Fact-recall interpretability workbench on a small synthetic-knowledge
/// transformer.
#[derive(Parser)]
#[command(name = "factscope", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Base seed for every stage whose seed is not set in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// INI-style config file with per-module sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory holding artifacts and the manifest.
    #[arg(long, global = true, default_value = "factscope-out")]
    out: PathBuf,
    /// Worker threads for parallel stages.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Recompute cached stages and fail if their outputs differ.
    #[arg(long, global = true)]
    verify: bool,
    /// Suppress per-stage progress on stderr.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic knowledge base.
    KbGen,
    /// Train the model on the knowledge base.
    Train,
    /// Keep only facts the model predicts.
    Filter,
    /// Causal mediation curves (and heatmaps, optionally for one fact).
    Trace(FactArgs),
    /// Segment layers into initial / emergence / conjoint stages.
    Stages,
    /// Sliding-cursor hidden-state transplantation.
    Transplant,
    /// Extract relation representations and their geometry.
    Extract(ExtractArgs),
    /// Zero-shot reasoning with transplanted relation representations.
    Zeroshot,
    /// Relation rewriting against the prompt-modification baseline.
    Rewrite,
    /// Early decoding at every layer (optionally for a free-form prompt).
    Lens(LensArgs),
    /// Assemble the summary report.
    Report,
    /// Run every stage.
    Pipeline,
    /// Print the default configuration.
    DefaultConfig,
}

#[derive(Args)]
struct FactArgs {
    /// Subject name for an extra full-grid heatmap.
    #[arg(long, requires = "relation")]
    subject: Option<String>,
    /// Relation name (e.g. `capital`) for an extra heatmap.
    #[arg(long, requires = "subject")]
    relation: Option<String>,
}

#[derive(Args)]
struct ExtractArgs {
    #[command(flatten)]
    fact: FactArgs,
    /// Where to write the representation of `--subject`/`--relation`.
    #[arg(long, requires = "subject")]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct LensArgs {
    /// Whitespace-separated prompt drawn from the KB vocabulary.
    #[arg(long)]
    prompt: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    let cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p, g.seed)?,
        None => ExperimentConfig::parse("", g.seed)?,
    };
    if let Command::DefaultConfig = cli.command {
        print!("{}", cfg.to_ini());
        return Ok(());
    }
    if g.jobs == 0 {
        return Err(CliError::Config("--jobs must be >= 1".into()));
    }
    let stage = match &cli.command {
        Command::KbGen => Stage::KbGen,
        Command::Train => Stage::Train,
        Command::Filter => Stage::Filter,
        Command::Trace(_) => Stage::Trace,
        Command::Stages => Stage::Stages,
        Command::Transplant => Stage::Transplant,
        Command::Extract(_) => Stage::Extract,
        Command::Zeroshot => Stage::ZeroShot,
        Command::Rewrite => Stage::Rewrite,
        Command::Lens(_) => Stage::Lens,
        Command::Report | Command::Pipeline => Stage::Report,
        Command::DefaultConfig => unreachable!(),
    };
    let opts = RunOptions { out: g.out.clone(), jobs: g.jobs, verify: g.verify, verbose: !g.quiet };
    let summary = run_pipeline(&cfg, stage, &opts)?;
    if !g.quiet {
        for s in &summary.stages {
            let how = if s.cached { "cached" } else { "done" };
            eprintln!("{:>11}  {how:<6} {:>8.1}s", s.stage.name(), s.elapsed.as_secs_f64());
        }
    }

    let adhoc = |stage: &'static str| move |e: factscope_core::Error| CliError::from_core(stage, e);
    match &cli.command {
        Command::Report | Command::Pipeline => {
            let text = std::fs::read_to_string(g.out.join(SUMMARY_FILE))
                .map_err(|e| CliError::Stage { stage: "report", message: e.to_string() })?;
            print!("{text}");
        }
        Command::Trace(FactArgs { subject: Some(s), relation: Some(r) }) => {
            let (kb, model) = load(&g.out)?;
            let reg = TemplateRegistry::builtin();
            let template = reg.get(&cfg.filter.template).map_err(adhoc("trace"))?;
            let (sid, rid) = fact_ids(&kb, s, r)?;
            let prompt = render_prompt(&kb, PromptItem::Fact { subject: sid, relation: rid }, template)
                .map_err(adhoc("trace"))?;
            let object = kb.object(sid, rid).expect("total table");
            for target in [Target::Subject, Target::Relation] {
                let grid = mediation_grid_par(&model, &prompt, object, target, &cfg.mediate.noise, g.jobs)
                    .map_err(adhoc("trace"))?;
                let path = g.out.join(format!("trace/heatmap_{s}_{r}_{}.json", target.as_str()));
                write(&path, &(serde_json::to_string_pretty(&grid.heatmap(&kb)).expect("serializes") + "\n"))?;
                println!("{}", path.display());
            }
        }
        Command::Extract(ExtractArgs { fact: FactArgs { subject: Some(s), relation: Some(r) }, output }) => {
            let (kb, model) = load(&g.out)?;
            let reg = TemplateRegistry::builtin();
            let template = reg.get(&cfg.filter.template).map_err(adhoc("extract"))?;
            let (sid, rid) = fact_ids(&kb, s, r)?;
            let stages: pipeline::StagesFile = serde_json::from_str(
                &std::fs::read_to_string(g.out.join(pipeline::STAGES_FILE))
                    .map_err(|e| CliError::Stage { stage: "extract", message: e.to_string() })?,
            )
            .map_err(|e| CliError::Stage { stage: "extract", message: e.to_string() })?;
            let rep = extract_relation(&model, &kb, template, sid, rid, &stages.global).map_err(adhoc("extract"))?;
            let path = output.clone().unwrap_or_else(|| g.out.join(format!("relation/{r}-{s}.rep")));
            rep.save(&path).map_err(adhoc("extract"))?;
            println!("{}", path.display());
        }
        Command::Lens(LensArgs { prompt: Some(text) }) => {
            let (kb, model) = load(&g.out)?;
            let tokens = text
                .split_whitespace()
                .map(|w| kb.word(w))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::Config(e.to_string()))?;
            let run = model.forward(&tokens, None).map_err(adhoc("lens"))?;
            for j in 0..=model.n_layers() {
                let lens = model.early_decode(&run.trace, j, cfg.lens.top_k).map_err(adhoc("lens"))?;
                let top: Vec<String> =
                    lens.top.iter().map(|(t, p)| format!("{}:{p:.4}", kb.vocab().token(*t))).collect();
                println!("layer {j:>2}  {}", top.join("  "));
            }
        }
        _ => {}
    }
    Ok(())
}

fn load(out: &std::path::Path) -> Result<(KnowledgeBase, Model), CliError> {
    let err = |e: factscope_core::Error| CliError::Stage { stage: "load", message: e.to_string() };
    let kb = KnowledgeBase::load(&out.join(pipeline::FILTERED_KB_FILE)).map_err(err)?;
    let model = Model::new(load_checkpoint(&out.join(pipeline::CHECKPOINT_FILE)).map_err(err)?).map_err(err)?;
    Ok((kb, model))
}

fn fact_ids(
    kb: &KnowledgeBase,
    subject: &str,
    relation: &str,
) -> Result<(factscope_core::SubjectId, factscope_core::RelationId), CliError> {
    let s = kb.subject_by_name(subject).ok_or_else(|| CliError::Config(format!("unknown subject {subject:?}")))?;
    let r = kb.relation_by_name(relation).ok_or_else(|| CliError::Config(format!("unknown relation {relation:?}")))?;
    Ok((s, r))
}

fn write(path: &std::path::Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| CliError::Stage { stage: "write", message: format!("{}: {e}", path.display()) })
}
