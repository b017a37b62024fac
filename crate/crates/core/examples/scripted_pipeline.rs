//! Runs CAPITAL, CoT-SC and ICL over the bundled scripted corpus, offline.
//!
//! `cargo run --example scripted_pipeline [-- <dir>]` also writes the corpus
//! files (dataset, store, script, config) to `<dir>` for use with the CLI.

use capital::backend::ScriptedBackend;
use capital::encoder::LocalEncoder;
use capital::estimator::Pipeline;
use capital::eval::{run_evaluation, EvalOptions, Method};
use capital::prompting::{Prompter, Templates};
use capital::retrieval::DemoStore;
use capital::synthetic::SyntheticCorpus;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = SyntheticCorpus::build();
    if let Some(dir) = std::env::args().nth(1) {
        let files = corpus.write_to(dir.as_ref())?;
        println!("wrote corpus to {}", files.config.parent().unwrap().display());
    }
    let encoder = LocalEncoder::default();
    let store = DemoStore::index(corpus.store.clone(), &encoder)?;
    let prompter = Prompter::new(Templates::builtin(), corpus.config.label_scheme);
    let backend = ScriptedBackend::new(corpus.script.clone());
    let pipeline = Pipeline {
        config: &corpus.config,
        prompter: &prompter,
        store: &store,
        backend: &backend,
        encoder: &encoder,
    };

    let mut reports = Vec::new();
    for method in [Method::Icl, Method::CotSc, Method::Capital] {
        let report = run_evaluation(&corpus.dataset, method, &pipeline, &EvalOptions::default())?;
        println!("{}", report.text_table());
        reports.push(report);
    }

    println!("{:<8} {:>9} {:>9} {:>9} {:>9}", "item", "gold", "icl", "cot-sc", "capital");
    for (i, item) in corpus.dataset.iter().enumerate() {
        let label = |r: usize| reports[r].items[i].predicted.map_or("-", |p| p.as_str());
        println!("{:<8} {:>9} {:>9} {:>9} {:>9}", item.id, item.gold.as_str(), label(0), label(1), label(2));
    }
    Ok(())
}
