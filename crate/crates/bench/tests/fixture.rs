use factscope_bench::fixture;

#[test]
fn fixture_prompt_fits_the_model() {
    let f = fixture(2);
    assert_eq!(f.model.n_layers(), 2);
    assert!(f.prompt.tokens.len() <= f.model.cfg().max_context);
    assert!(f.kb.vocab().len() <= f.model.vocab_size());
    let run = f.model.forward(&f.prompt.tokens, None).unwrap();
    assert_eq!(run.last_logits.len(), f.model.vocab_size());
}
