//! Synthetic relational knowledge base, prompt templates and prompt corpora.
//!
//! Every subject is a short sequence of name pieces drawn from a shared pool
//! (so a subject is usually a genuine multi-token span), every relation owns a
//! disjoint pool of single-token objects, and the fact table is total over
//! `subjects × relations`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;

pub type TokenId = u32;

pub const KB_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubjectId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationId(pub usize);

impl fmt::Display for SubjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "subj_{:02}", self.0)
    }
}

/// Words used by the built-in templates and the prompt-modification clause.
const WORDS: &[&str] = &[
    "Given", ",", "the", "of", "this", "one", "is", "If", "I", "want", "to", "know", "answer", "Tell", "me", "that",
    "Can", "you", "tell", "What", "?", ".", "→", "Actually", "am", "asking",
];

const RELATION_NAMES: &[&str] = &[
    "capital",
    "language",
    "band",
    "country",
    "currency",
    "instrument",
    "evolution",
    "company",
    "location",
    "constellation",
    "religion",
    "headquarters",
    "origin",
    "color",
    "phase",
    "ceo",
    "alias",
    "enemy",
    "tongue",
    "sport",
    "nation",
    "antonym",
];

const CONSONANTS: &[&str] = &["k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "b", "d", "g", "h", "f"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(['\t', '\n', ' ']) {
                return Err(Error::Format(format!("invalid token text {t:?}")));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Format(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Token text; ids outside the table (the model vocabulary may be wider
    /// than the KB's) render as `<unused_N>`.
    pub fn token(&self, id: TokenId) -> String {
        self.tokens.get(id as usize).cloned().unwrap_or_else(|| format!("<unused_{id}>"))
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&t| self.token(t)).collect::<Vec<_>>().join(" ")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

// ---------------------------------------------------------------------------
// Knowledge base
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Subject {
    pub name: String,
    pub tokens: Vec<TokenId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Relation {
    pub name: String,
    pub token: TokenId,
    pub pool: Vec<TokenId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactTriple {
    pub subject: SubjectId,
    pub relation: RelationId,
    pub object: TokenId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbConfig {
    pub n_subjects: usize,
    pub n_relations: usize,
    pub pool_size: usize,
    /// Size of the shared pool of subject name pieces.
    pub n_pieces: usize,
    pub vocab_budget: usize,
    pub seed: u64,
}

impl Default for KbConfig {
    fn default() -> Self {
        Self { n_subjects: 60, n_relations: 10, pool_size: 20, n_pieces: 40, vocab_budget: 2048, seed: 1 }
    }
}

/// A total `(subject, relation) → object` table plus the set of facts the
/// predictability filter has excluded so far.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnowledgeBase {
    vocab: Vocab,
    subjects: Vec<Subject>,
    relations: Vec<Relation>,
    facts: BTreeMap<(SubjectId, RelationId), TokenId>,
    excluded: BTreeSet<(SubjectId, RelationId)>,
}

impl KnowledgeBase {
    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn subject(&self, id: SubjectId) -> &Subject {
        &self.subjects[id.0]
    }

    pub fn relation(&self, id: RelationId) -> &Relation {
        &self.relations[id.0]
    }

    pub fn subject_ids(&self) -> impl Iterator<Item = SubjectId> {
        (0..self.subjects.len()).map(SubjectId)
    }

    pub fn relation_ids(&self) -> impl Iterator<Item = RelationId> {
        (0..self.relations.len()).map(RelationId)
    }

    pub fn relation_by_name(&self, name: &str) -> Option<RelationId> {
        let bare = name.strip_prefix("rel_").unwrap_or(name);
        self.relations.iter().position(|r| r.name == bare).map(RelationId)
    }

    pub fn subject_by_name(&self, name: &str) -> Option<SubjectId> {
        self.subjects.iter().position(|s| s.name == name).map(SubjectId)
    }

    /// Object of `(s, r)` from the total table (ignores the filter).
    pub fn object(&self, s: SubjectId, r: RelationId) -> Option<TokenId> {
        self.facts.get(&(s, r)).copied()
    }

    pub fn is_retained(&self, s: SubjectId, r: RelationId) -> bool {
        self.facts.contains_key(&(s, r)) && !self.excluded.contains(&(s, r))
    }

    /// Every fact in the total table, subject-major.
    pub fn all_facts(&self) -> impl Iterator<Item = FactTriple> + '_ {
        self.facts.iter().map(|(&(subject, relation), &object)| FactTriple { subject, relation, object })
    }

    pub fn retained_facts(&self) -> impl Iterator<Item = FactTriple> + '_ {
        self.all_facts().filter(|f| !self.excluded.contains(&(f.subject, f.relation)))
    }

    pub fn retained_subjects(&self, r: RelationId) -> Vec<SubjectId> {
        self.subject_ids().filter(|&s| self.is_retained(s, r)).collect()
    }

    pub fn n_facts(&self) -> usize {
        self.facts.len()
    }

    pub fn n_retained(&self) -> usize {
        self.facts.len() - self.excluded.len()
    }

    /// Which relation's pool a token belongs to, if any.
    pub fn pool_owner(&self, token: TokenId) -> Option<RelationId> {
        self.relations.iter().position(|r| r.pool.contains(&token)).map(RelationId)
    }

    pub fn relation_label(&self, r: RelationId) -> String {
        self.vocab.token(self.relations[r.0].token)
    }

    pub fn word(&self, w: &str) -> Result<TokenId> {
        self.vocab.id(w).ok_or_else(|| Error::Render(format!("word {w:?} not in vocabulary")))
    }

    fn check_invariants(&self) -> Result<()> {
        let mut owner: HashMap<TokenId, usize> = HashMap::new();
        for (ri, rel) in self.relations.iter().enumerate() {
            for &t in &rel.pool {
                if let Some(prev) = owner.insert(t, ri) {
                    return Err(Error::Format(format!("object token {t} in pools of relations {prev} and {ri}")));
                }
            }
        }
        for s in &self.subjects {
            if !(1..=3).contains(&s.tokens.len()) {
                return Err(Error::Format(format!("subject {} has {} tokens", s.name, s.tokens.len())));
            }
        }
        for (&(s, r), &o) in &self.facts {
            if s.0 >= self.subjects.len() || r.0 >= self.relations.len() {
                return Err(Error::Format(format!("fact ({s}, {}) out of range", r.0)));
            }
            if owner.get(&o) != Some(&r.0) {
                return Err(Error::Format(format!("object {o} of ({s}, {}) outside its pool", r.0)));
            }
        }
        Ok(())
    }

    // -- persistence -------------------------------------------------------

    /// Line-delimited text: `@`-prefixed header records (schema, vocab,
    /// relations with pools, subjects, exclusions) then one
    /// `subject_id \t relation_id \t object_token` record per fact.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("@schema_version\t{KB_SCHEMA_VERSION}\n"));
        out.push_str("@vocab");
        for t in self.vocab.tokens() {
            out.push('\t');
            out.push_str(t);
        }
        out.push('\n');
        for r in &self.relations {
            let pool: Vec<String> = r.pool.iter().map(|&t| self.vocab.token(t)).collect();
            out.push_str(&format!("@relation\t{}\t{}\t{}\n", self.vocab.token(r.token), r.name, pool.join(",")));
        }
        for s in &self.subjects {
            let pieces: Vec<String> = s.tokens.iter().map(|&t| self.vocab.token(t)).collect();
            out.push_str(&format!("@subject\t{}\t{}\n", s.name, pieces.join(",")));
        }
        for &(s, r) in &self.excluded {
            out.push_str(&format!("@excluded\t{}\t{}\n", self.subjects[s.0].name, self.relation_label(r)));
        }
        for (&(s, r), &o) in &self.facts {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                self.subjects[s.0].name,
                self.relation_label(r),
                self.vocab.token(o)
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut vocab: Option<Vocab> = None;
        let mut relations = Vec::new();
        let mut subjects = Vec::new();
        let mut excluded_names = Vec::new();
        let mut fact_lines = Vec::new();
        let mut version = None;
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Format(format!("kb line {}: malformed record", lineno + 1));
            match fields[0] {
                "@schema_version" => version = Some(fields.get(1).ok_or_else(bad)?.parse::<u32>().map_err(|_| bad())?),
                "@vocab" => vocab = Some(Vocab::from_tokens(fields[1..].iter().map(|s| s.to_string()).collect())?),
                "@relation" | "@subject" | "@excluded" => {
                    let v = vocab.as_ref().ok_or_else(|| Error::Format("kb: vocab record must come first".into()))?;
                    let lookup = |t: &str| v.id(t).ok_or_else(|| Error::Format(format!("kb: unknown token {t:?}")));
                    match fields[0] {
                        "@relation" if fields.len() == 4 => {
                            let pool = fields[3].split(',').map(lookup).collect::<Result<Vec<_>>>()?;
                            relations.push(Relation { name: fields[2].to_string(), token: lookup(fields[1])?, pool });
                        }
                        "@subject" if fields.len() == 3 => {
                            let tokens = fields[2].split(',').map(lookup).collect::<Result<Vec<_>>>()?;
                            subjects.push(Subject { name: fields[1].to_string(), tokens });
                        }
                        "@excluded" if fields.len() == 3 => excluded_names.push((fields[1], fields[2])),
                        _ => return Err(bad()),
                    }
                }
                _ if fields.len() == 3 && !fields[0].starts_with('@') => fact_lines.push((lineno, fields)),
                _ => return Err(bad()),
            }
        }
        if version != Some(KB_SCHEMA_VERSION) {
            return Err(Error::Format(format!("kb: unsupported schema version {version:?}")));
        }
        let vocab = vocab.ok_or_else(|| Error::Format("kb: missing vocab record".into()))?;
        let mut kb = KnowledgeBase { vocab, subjects, relations, facts: BTreeMap::new(), excluded: BTreeSet::new() };
        let resolve = |kb: &KnowledgeBase, s: &str, r: &str| -> Result<(SubjectId, RelationId)> {
            let sid = kb.subject_by_name(s).ok_or_else(|| Error::Format(format!("kb: unknown subject {s}")))?;
            let rid = kb
                .relations
                .iter()
                .position(|rel| kb.vocab.token(rel.token) == r)
                .map(RelationId)
                .ok_or_else(|| Error::Format(format!("kb: unknown relation {r}")))?;
            Ok((sid, rid))
        };
        for (lineno, f) in fact_lines {
            let key = resolve(&kb, f[0], f[1])?;
            let obj =
                kb.vocab.id(f[2]).ok_or_else(|| Error::Format(format!("kb line {}: unknown object", lineno + 1)))?;
            if kb.facts.insert(key, obj).is_some() {
                return Err(Error::Format(format!("kb line {}: duplicate fact", lineno + 1)));
            }
        }
        for (s, r) in excluded_names {
            let key = resolve(&kb, s, r)?;
            kb.excluded.insert(key);
        }
        kb.check_invariants()?;
        Ok(kb)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn piece_names(n: usize) -> Vec<String> {
    CONSONANTS.iter().flat_map(|c| VOWELS.iter().map(move |v| format!("{}{v}", c.to_uppercase()))).take(n).collect()
}

/// Build a deterministic synthetic knowledge base.
pub fn generate_kb(cfg: &KbConfig) -> Result<KnowledgeBase> {
    if cfg.n_subjects == 0 || cfg.n_relations == 0 {
        return Err(Error::Config("need at least one subject and one relation".into()));
    }
    if cfg.pool_size < 2 {
        return Err(Error::Config("pool_size must be at least 2".into()));
    }
    let max_pieces = CONSONANTS.len() * VOWELS.len();
    if cfg.n_pieces == 0 || cfg.n_pieces > max_pieces {
        return Err(Error::Config(format!("n_pieces must be in 1..={max_pieces}")));
    }
    let needed = WORDS.len() + cfg.n_relations + cfg.n_pieces + cfg.n_relations * cfg.pool_size;
    if needed > cfg.vocab_budget {
        return Err(Error::Config(format!("vocabulary needs {needed} tokens, budget is {}", cfg.vocab_budget)));
    }
    let capacity = cfg.n_pieces + cfg.n_pieces.pow(2) + cfg.n_pieces.pow(3);
    if cfg.n_subjects > capacity / 2 {
        return Err(Error::Config(format!("{} subjects is too many for {} name pieces", cfg.n_subjects, cfg.n_pieces)));
    }

    let rel_names: Vec<String> = (0..cfg.n_relations)
        .map(|i| RELATION_NAMES.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("r{i:02}")))
        .collect();

    let mut tokens: Vec<String> = WORDS.iter().map(|s| s.to_string()).collect();
    let rel_base = tokens.len();
    tokens.extend(rel_names.iter().map(|n| format!("rel_{n}")));
    let piece_base = tokens.len();
    tokens.extend(piece_names(cfg.n_pieces));
    let obj_base = tokens.len();
    for n in &rel_names {
        tokens.extend((0..cfg.pool_size).map(|k| format!("{n}_{k:02}")));
    }
    let vocab = Vocab::from_tokens(tokens)?;

    let relations: Vec<Relation> = rel_names
        .iter()
        .enumerate()
        .map(|(i, n)| Relation {
            name: n.clone(),
            token: (rel_base + i) as TokenId,
            pool: (0..cfg.pool_size).map(|k| (obj_base + i * cfg.pool_size + k) as TokenId).collect(),
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seen = BTreeSet::new();
    let mut subjects = Vec::with_capacity(cfg.n_subjects);
    while subjects.len() < cfg.n_subjects {
        let len = rng.random_range(1..=3usize);
        let pieces: Vec<TokenId> =
            (0..len).map(|_| (piece_base + rng.random_range(0..cfg.n_pieces)) as TokenId).collect();
        if seen.insert(pieces.clone()) {
            subjects.push(Subject { name: format!("subj_{:02}", subjects.len()), tokens: pieces });
        }
    }

    let mut facts = BTreeMap::new();
    for s in 0..cfg.n_subjects {
        for (r, rel) in relations.iter().enumerate() {
            let o = rel.pool[rng.random_range(0..cfg.pool_size)];
            facts.insert((SubjectId(s), RelationId(r)), o);
        }
    }
    let kb = KnowledgeBase { vocab, subjects, relations, facts, excluded: BTreeSet::new() };
    kb.check_invariants()?;
    Ok(kb)
}

// ---------------------------------------------------------------------------
// Templates and rendering
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Full,
    ZeroShot,
    Inquiry,
}

impl TemplateKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TemplateKind::Full => "full",
            TemplateKind::ZeroShot => "zero_shot",
            TemplateKind::Inquiry => "inquiry",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(TemplateKind::Full),
            "zero_shot" => Ok(TemplateKind::ZeroShot),
            "inquiry" => Ok(TemplateKind::Inquiry),
            other => Err(Error::Format(format!("unknown template kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Slot {
    Word(String),
    Subject,
    Relation,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: String,
    pub kind: TemplateKind,
    slots: Vec<Slot>,
}

impl PromptTemplate {
    /// Parse a whitespace-separated pattern with `{subject}` / `{relation}`
    /// slot markers.
    pub fn new(id: &str, kind: TemplateKind, pattern: &str) -> Result<Self> {
        let slots: Vec<Slot> = pattern
            .split_whitespace()
            .map(|w| match w {
                "{subject}" => Slot::Subject,
                "{relation}" => Slot::Relation,
                _ => Slot::Word(w.to_string()),
            })
            .collect();
        let n_subj = slots.iter().filter(|s| **s == Slot::Subject).count();
        let n_rel = slots.iter().filter(|s| **s == Slot::Relation).count();
        let ok = match kind {
            TemplateKind::Full | TemplateKind::Inquiry => n_subj == 1 && n_rel == 1,
            TemplateKind::ZeroShot => n_subj == 1 && n_rel == 0,
        };
        if !ok {
            return Err(Error::Config(format!(
                "template {id}: {} template has {n_subj} subject and {n_rel} relation slots",
                kind.as_str()
            )));
        }
        Ok(Self { id: id.to_string(), kind, slots })
    }

    pub fn pattern(&self) -> String {
        self.slots
            .iter()
            .map(|s| match s {
                Slot::Word(w) => w.as_str(),
                Slot::Subject => "{subject}",
                Slot::Relation => "{relation}",
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn has_relation_slot(&self) -> bool {
        self.slots.contains(&Slot::Relation)
    }
}

pub const MAIN_TEMPLATE: &str = "main";
pub const ZERO_SHOT_TEMPLATE: &str = "zs_given";

/// Template registry keyed by id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateRegistry {
    templates: Vec<PromptTemplate>,
}

impl TemplateRegistry {
    pub fn builtin() -> Self {
        let spec: &[(&str, TemplateKind, &str)] = &[
            (MAIN_TEMPLATE, TemplateKind::Full, "Given {subject} , the {relation} of this one is"),
            ("order_if", TemplateKind::Full, "If I want to know the {relation} of {subject} , the answer is"),
            ("order_tell", TemplateKind::Full, "Tell me that the {relation} of {subject} is"),
            (ZERO_SHOT_TEMPLATE, TemplateKind::ZeroShot, "Given {subject} ,"),
            ("zs_arrow", TemplateKind::ZeroShot, "{subject} →"),
            ("inq_can", TemplateKind::Inquiry, "Can you tell me the {relation} of {subject} ?"),
            ("inq_what", TemplateKind::Inquiry, "What is the {relation} of {subject} ?"),
            ("inq_tell", TemplateKind::Inquiry, "Tell me the {relation} of {subject} ?"),
            ("inq_want", TemplateKind::Inquiry, "I want to know the {relation} of {subject} ."),
        ];
        let templates =
            spec.iter().map(|(id, kind, pat)| PromptTemplate::new(id, *kind, pat).expect("builtin template")).collect();
        Self { templates }
    }

    pub fn get(&self, id: &str) -> Result<&PromptTemplate> {
        self.templates.iter().find(|t| t.id == id).ok_or_else(|| Error::Config(format!("unknown template {id:?}")))
    }

    pub fn of_kind(&self, kind: TemplateKind) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.iter().filter(move |t| t.kind == kind)
    }

    pub fn iter(&self) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.iter()
    }

    /// `template_id \t kind \t pattern`, one per line.
    pub fn to_text(&self) -> String {
        self.templates.iter().map(|t| format!("{}\t{}\t{}\n", t.id, t.kind.as_str(), t.pattern())).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut templates: Vec<PromptTemplate> = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(Error::Format(format!("template record {line:?} needs 3 fields")));
            }
            if templates.iter().any(|t| t.id == f[0]) {
                return Err(Error::Format(format!("duplicate template id {}", f[0])));
            }
            templates.push(PromptTemplate::new(f[0], TemplateKind::parse(f[1])?, f[2])?);
        }
        Ok(Self { templates })
    }
}

/// Half-open token index interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn positions(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<TokenId>,
    pub subject_span: Option<Span>,
    pub relation_span: Option<Span>,
}

impl TokenSequence {
    pub fn plain(tokens: Vec<TokenId>) -> Self {
        Self { tokens, subject_span: None, relation_span: None }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn last_index(&self) -> usize {
        self.tokens.len() - 1
    }

    /// Append tokens, keeping spans.
    pub fn extended(&self, extra: &[TokenId]) -> Self {
        let mut out = self.clone();
        out.tokens.extend_from_slice(extra);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptItem {
    Fact { subject: SubjectId, relation: RelationId },
    Subject(SubjectId),
}

pub fn render_prompt(kb: &KnowledgeBase, item: PromptItem, template: &PromptTemplate) -> Result<TokenSequence> {
    let (subject, relation) = match item {
        PromptItem::Fact { subject, relation } => (subject, Some(relation)),
        PromptItem::Subject(s) => (s, None),
    };
    if subject.0 >= kb.subjects.len() {
        return Err(Error::Render(format!("unknown subject {subject}")));
    }
    match (template.has_relation_slot(), relation) {
        (true, None) => return Err(Error::Render(format!("template {} needs a relation filler", template.id))),
        (false, Some(_)) => return Err(Error::Render(format!("template {} has no relation slot", template.id))),
        (_, Some(r)) if r.0 >= kb.relations.len() => return Err(Error::Render(format!("unknown relation {}", r.0))),
        _ => {}
    }
    let mut tokens = Vec::new();
    let mut subject_span = None;
    let mut relation_span = None;
    for slot in &template.slots {
        match slot {
            Slot::Word(w) => tokens.push(kb.word(w)?),
            Slot::Subject => {
                let start = tokens.len();
                tokens.extend_from_slice(&kb.subject(subject).tokens);
                subject_span = Some(Span { start, end: tokens.len() });
            }
            Slot::Relation => {
                let start = tokens.len();
                tokens.push(kb.relation(relation.expect("checked above")).token);
                relation_span = Some(Span { start, end: tokens.len() });
            }
        }
    }
    Ok(TokenSequence { tokens, subject_span, relation_span })
}

// ---------------------------------------------------------------------------
// Predictability filter
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterRow {
    pub relation: String,
    pub initial: usize,
    pub retained: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub rows: Vec<FilterRow>,
}

impl FilterReport {
    pub fn retained_fraction(&self) -> f64 {
        let (i, r) = self.rows.iter().fold((0, 0), |(i, r), row| (i + row.initial, r + row.retained));
        if i == 0 {
            0.0
        } else {
            r as f64 / i as f64
        }
    }
}

/// Keep only the facts whose greedy next token after the rendered full prompt
/// is the object. Counts are relative to the facts retained on input.
pub fn filter_predictable(
    kb: &KnowledgeBase,
    model: &Model,
    template: &PromptTemplate,
) -> Result<(KnowledgeBase, FilterReport)> {
    let mut out = kb.clone();
    let mut rows: Vec<FilterRow> = kb
        .relations
        .iter()
        .enumerate()
        .map(|(i, _)| FilterRow { relation: kb.relation_label(RelationId(i)), initial: 0, retained: 0 })
        .collect();
    for fact in kb.retained_facts() {
        let prompt = render_prompt(kb, PromptItem::Fact { subject: fact.subject, relation: fact.relation }, template)?;
        let logits = model.last_logits(&prompt.tokens)?;
        let row = &mut rows[fact.relation.0];
        row.initial += 1;
        if crate::model::argmax(&logits) == fact.object {
            row.retained += 1;
        } else {
            out.excluded.insert((fact.subject, fact.relation));
        }
    }
    Ok((out, FilterReport { rows }))
}

// ---------------------------------------------------------------------------
// Transplantation pairs
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransplantPair {
    /// Which rotation (reference subject turn) produced this pair.
    pub rotation: usize,
    pub reference_subject: SubjectId,
    pub source_subject: SubjectId,
    pub reference_relation: RelationId,
    pub source_relation: RelationId,
    pub reference: TokenSequence,
    pub source: TokenSequence,
    pub reference_object: TokenId,
    pub source_object: TokenId,
    /// `facts(source_subject, reference_relation)`.
    pub target_object: TokenId,
}

/// Rotation scheme: pick `n_sources + 1` subjects that know
/// `reference_relation`; each takes a turn as the reference while the others
/// serve as sources, each source paired with a random other relation.
///
/// Chosen subjects have pairwise distinct objects under the reference relation
/// (so target and reference objects never coincide), and every
/// `(source, reference_relation)` fact is itself retained.
pub fn build_transplant_pairs(
    kb: &KnowledgeBase,
    template: &PromptTemplate,
    reference_relation: RelationId,
    n_sources: usize,
    seed: u64,
) -> Result<Vec<TransplantPair>> {
    if template.kind != TemplateKind::Full {
        return Err(Error::Construction(format!("template {} is not a full template", template.id)));
    }
    let r1 = reference_relation;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (r1.0 as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut candidates = kb.retained_subjects(r1);
    candidates.shuffle(&mut rng);

    let other_relations =
        |s: SubjectId| -> Vec<RelationId> { kb.relation_ids().filter(|&r| r != r1 && kb.is_retained(s, r)).collect() };
    let mut chosen: Vec<SubjectId> = Vec::new();
    let mut used_objects = BTreeSet::new();
    for s in candidates {
        if chosen.len() == n_sources + 1 {
            break;
        }
        let o = kb.object(s, r1).expect("total table");
        if !used_objects.contains(&o) && !other_relations(s).is_empty() {
            used_objects.insert(o);
            chosen.push(s);
        }
    }
    if chosen.len() < n_sources + 1 {
        return Err(Error::Construction(format!(
            "relation {}: only {} usable subjects, need {}",
            kb.relation_label(r1),
            chosen.len(),
            n_sources + 1
        )));
    }

    let mut pairs = Vec::with_capacity(chosen.len() * n_sources);
    for (rotation, &s1) in chosen.iter().enumerate() {
        let reference = render_prompt(kb, PromptItem::Fact { subject: s1, relation: r1 }, template)?;
        let o1 = kb.object(s1, r1).expect("total table");
        for &s2 in chosen.iter().filter(|&&s| s != s1) {
            let options = other_relations(s2);
            let r2 = options[rng.random_range(0..options.len())];
            pairs.push(TransplantPair {
                rotation,
                reference_subject: s1,
                source_subject: s2,
                reference_relation: r1,
                source_relation: r2,
                reference: reference.clone(),
                source: render_prompt(kb, PromptItem::Fact { subject: s2, relation: r2 }, template)?,
                reference_object: o1,
                source_object: kb.object(s2, r2).expect("total table"),
                target_object: kb.object(s2, r1).expect("total table"),
            });
        }
    }
    Ok(pairs)
}
