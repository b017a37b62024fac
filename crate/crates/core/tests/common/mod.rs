#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use capital::backend::ScriptedBackend;
use capital::encoder::LocalEncoder;
use capital::estimator::Pipeline;
use capital::eval::{run_evaluation, EvalOptions, EvalReport, Method};
use capital::model::{Ablation, PipelineConfig};
use capital::prompting::{Prompter, Templates};
use capital::retrieval::DemoStore;
use capital::synthetic::SyntheticCorpus;

/// Evaluates the synthetic corpus in-process.
pub fn evaluate_corpus(method: Method, ablations: &[Ablation]) -> EvalReport {
    let corpus = SyntheticCorpus::build();
    let config = PipelineConfig {
        ablations: ablations.to_vec(),
        ..corpus.config.clone()
    };
    let encoder = LocalEncoder::default();
    let store = DemoStore::index(corpus.store.clone(), &encoder).unwrap();
    let prompter = Prompter::new(Templates::builtin(), config.label_scheme);
    let backend = ScriptedBackend::new(corpus.script.clone());
    let pipeline = Pipeline {
        config: &config,
        prompter: &prompter,
        store: &store,
        backend: &backend,
        encoder: &encoder,
    };
    run_evaluation(&corpus.dataset, method, &pipeline, &EvalOptions::default()).unwrap()
}

/// Runs the CLI binary inside `dir`.
pub fn capital(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capital"))
        .args(args)
        .current_dir(dir)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}
