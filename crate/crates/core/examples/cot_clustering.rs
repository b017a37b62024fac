//! Embeds a handful of reasoning chains with the local encoder and groups
//! them with seeded k-means, printing masses and representatives.
//!
//! `cargo run --example cot_clustering`

use capital::clustering::cluster_cots;
use capital::encoder::{Encoder, LocalEncoder};
use capital::model::{ChainOfThought, LabelScheme};

const CHAINS: [&str; 6] = [
    "The battery dies before lunch, so the polarity towards the battery is negative.",
    "Needing the charger all day means the battery is weak; the polarity is negative.",
    "The battery barely lasts a morning, which makes the polarity negative.",
    "The laptop is light and the battery is mentioned neutrally; the polarity is neutral.",
    "Carrying a charger is normal for laptops, so the polarity is neutral.",
    "Bringing the charger is a minor detail; the polarity towards the battery is neutral.",
];

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let encoder = LocalEncoder::default();
    let cots = CHAINS
        .iter()
        .enumerate()
        .map(|(i, text)| {
            let cot = ChainOfThought::parsed(*text, i + 1, LabelScheme::ThreeClass);
            Ok(cot.with_embedding(encoder.embed(text)?))
        })
        .collect::<Result<Vec<_>, Box<dyn std::error::Error>>>()?;

    let (clusters, result) = cluster_cots(&cots, 2, 42)?;
    println!("assignments {:?}, SSE {:.4}", result.assignments, result.sse);
    for (k, cluster) in clusters.iter().enumerate() {
        println!(
            "cluster {k}: mass {:.3}, {} members, representative #{}",
            cluster.mass,
            cluster.members.len(),
            cluster.representative.sample_index
        );
        println!("  {}", cluster.representative.text);
    }
    Ok(())
}
