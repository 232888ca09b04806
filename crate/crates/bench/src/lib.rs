//! Shared fixtures for the criterion benchmarks: an untrained default-size
//! model and a rendered fact prompt (cost does not depend on the weights).

use factscope_core::kb::{
    generate_kb, render_prompt, KbConfig, KnowledgeBase, PromptItem, TemplateRegistry, TokenSequence,
};
use factscope_core::model::{Model, ModelConfig};

pub struct Fixture {
    pub kb: KnowledgeBase,
    pub model: Model,
    pub prompt: TokenSequence,
    pub object: u32,
}

pub fn fixture(n_layers: usize) -> Fixture {
    let kb = generate_kb(&KbConfig::default()).expect("default KB");
    let model = Model::init(&ModelConfig { n_layers, ..Default::default() }).expect("default model");
    let fact = kb.all_facts().next().expect("non-empty KB");
    let template = TemplateRegistry::builtin().get("main").expect("builtin").clone();
    let prompt = render_prompt(&kb, PromptItem::Fact { subject: fact.subject, relation: fact.relation }, &template)
        .expect("renders");
    Fixture { kb, model, prompt, object: fact.object }
}
