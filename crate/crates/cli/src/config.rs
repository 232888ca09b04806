//! Experiment configuration: INI-style `[section]` / `key = value` text.
//!
//! Every key is optional; unknown sections or keys are rejected so typos do
//! not silently fall back to defaults. Section seeds default to the
//! `[pipeline] seed`, which `--seed` overrides.

use std::path::Path;

use factscope_core::kb::KbConfig;
use factscope_core::mediate::{MediationConfig, DEFAULT_TAU_REL, DEFAULT_TAU_SUBJ};
use factscope_core::model::{ModelConfig, TrainConfig};
use factscope_core::relation::InsertMode;
use factscope_core::rewrite::DEFAULT_GAMMAS;
use factscope_core::transplant::RangeScoring;
use ini::Ini;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSection {
    pub template: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MediateSection {
    pub noise: MediationConfig,
    pub facts_per_relation: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagesSection {
    pub tau_rel: f64,
    pub tau_subj: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransplantSection {
    pub n_sources: usize,
    pub scoring: RangeScoring,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationSection {
    pub insert: InsertMode,
    pub zero_shot_template: String,
    pub zero_shot_donors: usize,
    pub geometry_relations: usize,
    pub geometry_donors: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewriteSection {
    pub gammas: Vec<f32>,
    pub seed: u64,
    pub steer_tokens: usize,
    pub steer_persist: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LensSection {
    pub top_k: usize,
    pub facts_per_relation: usize,
}

/// Fully resolved configuration; its JSON form is recorded in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub kb: KbConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub filter: FilterSection,
    pub mediate: MediateSection,
    pub stages: StagesSection,
    pub transplant: TransplantSection,
    pub relation: RelationSection,
    pub rewrite: RewriteSection,
    pub lens: LensSection,
}

/// Pipeline default noise scale; see [`ExperimentConfig::default`].
pub const PIPELINE_NOISE_SCALE: f32 = 12.0;

impl ExperimentConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            kb: KbConfig { seed, ..Default::default() },
            model: ModelConfig { seed, ..Default::default() },
            train: TrainConfig { seed, ..Default::default() },
            filter: FilterSection { template: "main".into() },
            mediate: MediateSection {
                // 3σ barely dents the toy model's confidence; see README
                noise: MediationConfig { noise_scale: PIPELINE_NOISE_SCALE, seed, ..Default::default() },
                facts_per_relation: 10,
            },
            stages: StagesSection { tau_rel: DEFAULT_TAU_REL, tau_subj: DEFAULT_TAU_SUBJ },
            transplant: TransplantSection { n_sources: 7, scoring: RangeScoring::Any, seed },
            relation: RelationSection {
                insert: InsertMode::Replace,
                zero_shot_template: "zs_given".into(),
                zero_shot_donors: 10,
                geometry_relations: 8,
                geometry_donors: 10,
            },
            rewrite: RewriteSection { gammas: DEFAULT_GAMMAS.to_vec(), seed, steer_tokens: 3, steer_persist: false },
            lens: LensSection { top_k: 5, facts_per_relation: 2 },
        }
    }

    /// Defaults, overridden by `text`, with `seed_override` replacing the
    /// pipeline seed (and every section seed not set explicitly).
    pub fn parse(text: &str, seed_override: Option<u64>) -> Result<Self, CliError> {
        let ini = Ini::load_from_str(text).map_err(|e| CliError::Config(format!("config parse error: {e}")))?;
        let mut r = Reader { ini: &ini, used: Vec::new() };
        let seed = seed_override.map(Ok).unwrap_or_else(|| r.get("pipeline", "seed", 1u64))?;
        let mut c = Self::with_seed(seed);

        c.kb.n_subjects = r.get("kb", "n_subjects", c.kb.n_subjects)?;
        c.kb.n_relations = r.get("kb", "n_relations", c.kb.n_relations)?;
        c.kb.pool_size = r.get("kb", "pool_size", c.kb.pool_size)?;
        c.kb.n_pieces = r.get("kb", "n_pieces", c.kb.n_pieces)?;
        c.kb.vocab_budget = r.get("kb", "vocab_budget", c.kb.vocab_budget)?;
        c.kb.seed = r.get("kb", "seed", seed)?;

        c.model.n_layers = r.get("model", "n_layers", c.model.n_layers)?;
        c.model.d_model = r.get("model", "d_model", c.model.d_model)?;
        c.model.n_heads = r.get("model", "n_heads", c.model.n_heads)?;
        c.model.vocab_size = r.get("model", "vocab_size", c.model.vocab_size)?;
        c.model.max_context = r.get("model", "max_context", c.model.max_context)?;
        c.model.d_ff = r.get("model", "d_ff", c.model.d_ff)?;
        c.model.seed = r.get("model", "seed", seed)?;

        c.train.steps = r.get("train", "steps", c.train.steps)?;
        c.train.batch_size = r.get("train", "batch_size", c.train.batch_size)?;
        c.train.lr = r.get("train", "lr", c.train.lr)?;
        c.train.warmup = r.get("train", "warmup", c.train.warmup)?;
        c.train.min_lr_ratio = r.get("train", "min_lr_ratio", c.train.min_lr_ratio)?;
        c.train.weight_decay = r.get("train", "weight_decay", c.train.weight_decay)?;
        c.train.grad_clip = r.get("train", "grad_clip", c.train.grad_clip)?;
        c.train.seed = r.get("train", "seed", seed)?;
        if let Some(t) = r.raw("train", "templates") {
            c.train.templates = list(t).into_iter().map(String::from).collect();
        }

        c.filter.template = r.get("filter", "template", c.filter.template)?;

        c.mediate.noise.noise_scale = r.get("mediate", "noise_scale", c.mediate.noise.noise_scale)?;
        c.mediate.noise.n_samples = r.get("mediate", "n_samples", c.mediate.noise.n_samples)?;
        c.mediate.noise.seed = r.get("mediate", "seed", seed)?;
        c.mediate.facts_per_relation = r.get("mediate", "facts_per_relation", c.mediate.facts_per_relation)?;

        c.stages.tau_rel = r.get("stages", "tau_rel", c.stages.tau_rel)?;
        c.stages.tau_subj = r.get("stages", "tau_subj", c.stages.tau_subj)?;

        c.transplant.n_sources = r.get("transplant", "n_sources", c.transplant.n_sources)?;
        c.transplant.seed = r.get("transplant", "seed", seed)?;
        if let Some(s) = r.raw("transplant", "scoring") {
            c.transplant.scoring = match s {
                "any" => RangeScoring::Any,
                "strict" => RangeScoring::Strict,
                other => {
                    return Err(CliError::Config(format!("transplant.scoring: expected any|strict, got {other:?}")))
                }
            };
        }

        if let Some(s) = r.raw("relation", "insert") {
            c.relation.insert = match s {
                "replace" => InsertMode::Replace,
                "add" => InsertMode::Add,
                other => return Err(CliError::Config(format!("relation.insert: expected replace|add, got {other:?}"))),
            };
        }
        c.relation.zero_shot_template = r.get("relation", "zero_shot_template", c.relation.zero_shot_template)?;
        c.relation.zero_shot_donors = r.get("relation", "zero_shot_donors", c.relation.zero_shot_donors)?;
        c.relation.geometry_relations = r.get("relation", "geometry_relations", c.relation.geometry_relations)?;
        c.relation.geometry_donors = r.get("relation", "geometry_donors", c.relation.geometry_donors)?;

        if let Some(g) = r.raw("rewrite", "gammas") {
            c.rewrite.gammas = list(g)
                .into_iter()
                .map(|v| v.parse().map_err(|_| CliError::Config(format!("rewrite.gammas: bad value {v:?}"))))
                .collect::<Result<_, _>>()?;
        }
        c.rewrite.seed = r.get("rewrite", "seed", seed)?;
        c.rewrite.steer_tokens = r.get("rewrite", "steer_tokens", c.rewrite.steer_tokens)?;
        c.rewrite.steer_persist = r.get("rewrite", "steer_persist", c.rewrite.steer_persist)?;

        c.lens.top_k = r.get("lens", "top_k", c.lens.top_k)?;
        c.lens.facts_per_relation = r.get("lens", "facts_per_relation", c.lens.facts_per_relation)?;

        r.reject_unknown()?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, seed_override)
    }

    /// Checks that do not need the KB or a model.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.train.templates.is_empty() {
            return bad("train.templates is empty".into());
        }
        if self.mediate.facts_per_relation == 0 {
            return bad("mediate.facts_per_relation must be >= 1".into());
        }
        if self.mediate.noise.noise_scale.is_nan()
            || self.mediate.noise.noise_scale < 0.0
            || self.mediate.noise.n_samples == 0
        {
            return bad("mediate.noise_scale must be >= 0 and n_samples >= 1".into());
        }
        for (k, v) in [("tau_rel", self.stages.tau_rel), ("tau_subj", self.stages.tau_subj)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("stages.{k} must lie in [0, 1], got {v}"));
            }
        }
        if self.transplant.n_sources == 0 {
            return bad("transplant.n_sources must be >= 1".into());
        }
        if self.relation.zero_shot_donors < 2 || self.relation.geometry_donors == 0 {
            return bad("relation.zero_shot_donors must be >= 2 and geometry_donors >= 1".into());
        }
        if self.rewrite.gammas.is_empty() || self.rewrite.gammas.iter().any(|g| g.is_nan() || *g <= 0.0) {
            return bad("rewrite.gammas must be a non-empty list of positive values".into());
        }
        if self.lens.top_k == 0 {
            return bad("lens.top_k must be >= 1".into());
        }
        Ok(())
    }

    /// INI text reproducing this configuration.
    pub fn to_ini(&self) -> String {
        let c = self;
        let join = |v: &[String]| v.join(",");
        let gammas: Vec<String> = c.rewrite.gammas.iter().map(|g| g.to_string()).collect();
        format!(
            "[pipeline]\nseed = {}\n\n\
             [kb]\nn_subjects = {}\nn_relations = {}\npool_size = {}\nn_pieces = {}\nvocab_budget = {}\nseed = {}\n\n\
             [model]\nn_layers = {}\nd_model = {}\nn_heads = {}\nvocab_size = {}\nmax_context = {}\nd_ff = {}\nseed = {}\n\n\
             [train]\nsteps = {}\nbatch_size = {}\nlr = {}\nwarmup = {}\nmin_lr_ratio = {}\nweight_decay = {}\ngrad_clip = {}\nseed = {}\ntemplates = {}\n\n\
             [filter]\ntemplate = {}\n\n\
             [mediate]\nnoise_scale = {}\nn_samples = {}\nseed = {}\nfacts_per_relation = {}\n\n\
             [stages]\ntau_rel = {}\ntau_subj = {}\n\n\
             [transplant]\nn_sources = {}\nscoring = {}\nseed = {}\n\n\
             [relation]\ninsert = {}\nzero_shot_template = {}\nzero_shot_donors = {}\ngeometry_relations = {}\ngeometry_donors = {}\n\n\
             [rewrite]\ngammas = {}\nseed = {}\nsteer_tokens = {}\nsteer_persist = {}\n\n\
             [lens]\ntop_k = {}\nfacts_per_relation = {}\n",
            c.seed,
            c.kb.n_subjects, c.kb.n_relations, c.kb.pool_size, c.kb.n_pieces, c.kb.vocab_budget, c.kb.seed,
            c.model.n_layers, c.model.d_model, c.model.n_heads, c.model.vocab_size, c.model.max_context, c.model.d_ff, c.model.seed,
            c.train.steps, c.train.batch_size, c.train.lr, c.train.warmup, c.train.min_lr_ratio, c.train.weight_decay,
            c.train.grad_clip, c.train.seed, join(&c.train.templates),
            c.filter.template,
            c.mediate.noise.noise_scale, c.mediate.noise.n_samples, c.mediate.noise.seed, c.mediate.facts_per_relation,
            c.stages.tau_rel, c.stages.tau_subj,
            c.transplant.n_sources, match c.transplant.scoring { RangeScoring::Any => "any", RangeScoring::Strict => "strict" },
            c.transplant.seed,
            match c.relation.insert { InsertMode::Replace => "replace", InsertMode::Add => "add" },
            c.relation.zero_shot_template, c.relation.zero_shot_donors, c.relation.geometry_relations, c.relation.geometry_donors,
            gammas.join(","), c.rewrite.seed, c.rewrite.steer_tokens, c.rewrite.steer_persist,
            c.lens.top_k, c.lens.facts_per_relation,
        )
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::with_seed(1)
    }
}

fn list(s: &str) -> Vec<&str> {
    s.split(',').map(str::trim).filter(|v| !v.is_empty()).collect()
}

struct Reader<'a> {
    ini: &'a Ini,
    used: Vec<(String, String)>,
}

impl Reader<'_> {
    fn raw(&mut self, section: &str, key: &str) -> Option<&str> {
        self.used.push((section.into(), key.into()));
        self.ini.section(Some(section)).and_then(|s| s.get(key)).map(str::trim)
    }

    fn get<T: std::str::FromStr>(&mut self, section: &str, key: &str, default: T) -> Result<T, CliError> {
        match self.raw(section, key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| CliError::Config(format!("{section}.{key}: cannot parse {v:?}"))),
        }
    }

    fn reject_unknown(&self) -> Result<(), CliError> {
        let mut seen = Vec::new();
        for (section, props) in self.ini.iter() {
            if seen.contains(&section) {
                return Err(CliError::Config(format!("duplicate section [{}]", section.unwrap_or(""))));
            }
            seen.push(section);
            for (k, _) in props.iter() {
                if props.get_all(k).count() > 1 {
                    return Err(CliError::Config(format!("duplicate key {k:?} in [{}]", section.unwrap_or(""))));
                }
            }
            let Some(section) = section else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(CliError::Config(format!("key {k:?} outside any section")));
                }
                continue;
            };
            for (k, _) in props.iter() {
                if !self.used.iter().any(|(s, key)| s == section && key == k) {
                    return Err(CliError::Config(format!("unknown config key {section}.{k}")));
                }
            }
        }
        Ok(())
    }
}
