//! Wraps a scripted backend in the on-disk response cache and shows that a
//! repeated request is served without touching the backend.
//!
//! `cargo run --example response_cache`

use capital::backend::{CachedBackend, GenerationBackend, GenerationRequest, ResponseCache, Script, ScriptedBackend};
use capital::prompting::PromptText;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join(format!("capital-cache-example-{}", std::process::id()));
    let mut script = Script::default();
    script.insert("demo/cot", vec!["the polarity is positive".into(), "the polarity is neutral".into()]);
    let backend = CachedBackend::new(ScriptedBackend::new(script), ResponseCache::open(&dir)?);

    let request = GenerationRequest {
        prompt: PromptText::raw("How does the sentence feel about the screen?"),
        temperature: 0.7,
        count: 2,
        max_tokens: 64,
        request_tag: "demo/cot".into(),
    };
    for round in 1..=2 {
        let completions = backend.sample_completions(&request)?;
        println!(
            "round {round}: cached={} backend calls so far={}",
            completions[0].cached,
            backend.stats().calls
        );
    }
    let stats = backend.cache().stats()?;
    println!("{} entries, {} bytes in {}", stats.entries, stats.bytes, dir.display());
    backend.cache().clear()?;
    std::fs::remove_dir(&dir)?;
    Ok(())
}
