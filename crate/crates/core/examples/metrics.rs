//! Scores a small set of predictions with accuracy, per-label F1 and
//! macro-F1, as the evaluation report does.
//!
//! `cargo run --example metrics`

use capital::eval::slice_metrics;
use capital::model::{LabelScheme, Polarity};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    use Polarity::{Negative as N, Neutral as U, Positive as P};
    let golds = [P, P, N, N, N, U, U, P];
    let preds = [P, N, N, N, U, U, P, P];
    let m = slice_metrics(&preds, &golds, LabelScheme::ThreeClass.labels())?;
    println!("items {}  accuracy {:.3}  macro-F1 {:.3}", m.items, m.accuracy, m.macro_f1);
    for (label, lm) in &m.per_label {
        println!(
            "  {:<8} P {:.3}  R {:.3}  F1 {:.3}  support {}",
            label.as_str(),
            lm.precision,
            lm.recall,
            lm.f1,
            lm.support
        );
    }
    println!("confusion (rows gold, columns predicted): {:?}", m.confusion);
    Ok(())
}
