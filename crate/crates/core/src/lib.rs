//! Fact-recall interpretability on a small, fully observable transformer.
//!
//! The pipeline: generate a synthetic knowledge base ([`kb`]), train a model
//! to memorize it ([`model`]), then probe it with declarative interventions
//! ([`intervene`]): causal mediation ([`mediate`]), hidden-state
//! transplantation ([`transplant`]), relational representations and
//! zero-shot reasoning ([`relation`]) and relation rewriting ([`rewrite`]).

pub mod error;
pub mod intervene;
pub mod kb;
pub mod mediate;
pub mod model;
pub mod par;
pub mod relation;
pub mod rewrite;
pub mod tensor;
pub mod transplant;

pub use error::{Error, Result};
pub use intervene::{Action, CleanRun, CorruptionSpec, InterventionPlan};
pub use kb::{
    FactTriple, KnowledgeBase, PromptTemplate, RelationId, Span, SubjectId, TemplateKind, TemplateRegistry, TokenId,
    TokenSequence, TransplantPair,
};
pub use mediate::{LayerRange, MediationResult, StageCurves, StageSegmentation};
pub use model::{LensResult, Model, ModelConfig, Parameters, TraceGrid};
pub use relation::RelationRepresentation;
pub use rewrite::RewriteCase;
pub use transplant::{RangeAccuracyTable, RankReport};
