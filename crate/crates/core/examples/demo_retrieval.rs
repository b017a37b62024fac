//! Ranks the bundled demonstration store by similarity to a mistaken
//! reasoning chain, and by sentence similarity for stage-1 prompts.
//!
//! `cargo run --example demo_retrieval`

use capital::encoder::{Encoder, LocalEncoder};
use capital::retrieval::DemoStore;
use capital::synthetic::SyntheticCorpus;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let encoder = LocalEncoder::default();
    let store = DemoStore::index(SyntheticCorpus::build().store, &encoder)?;

    let mistaken = "The waiter was quick with the bill, so the service is positive.";
    println!("demonstrations whose wrong reasoning resembles:\n  {mistaken}");
    for row in store.rank_by_wrong_cot(&encoder.embed(mistaken)?)? {
        println!("  {:.3}  {}", row.similarity, row.demo.sentence().text());
    }

    let sentence = "We waited an hour for a table.";
    println!("\nstage-1 demonstrations for:\n  {sentence}");
    for demo in store.select_stage1_demos(&encoder.embed(sentence)?, 2, None)? {
        println!("  [{}] {}", demo.gold().as_str(), demo.sentence().text());
    }
    Ok(())
}
