//! Compares naive conditioning, the front-door formula and a finite-sample
//! front-door estimate against the true interventional distribution.
//!
//! `cargo run --example scm_oracle`

use capital::scm::{
    finite_sample_frontdoor, frontdoor_estimate, generate_scm, naive_conditional, tiny_fixture,
    total_variation, true_interventional, Cards,
};

fn fmt(p: &[f64]) -> String {
    let cells: Vec<String> = p.iter().map(|v| format!("{v:.3}")).collect();
    format!("[{}]", cells.join(", "))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scm = tiny_fixture();
    println!("binary fixture");
    for x in 0..2 {
        println!("  do(X={x})      {}", fmt(&true_interventional(&scm, x)));
        println!("  P(Y|X={x})     {}", fmt(&naive_conditional(&scm, x)));
        println!("  front-door    {}", fmt(&frontdoor_estimate(&scm, x)));
    }

    println!("\nconfounding strength vs naive error (3x3x3x3, seed 11)");
    for strength in [0.0, 0.5, 0.8, 1.0] {
        let scm = generate_scm(Cards::new(3, 3, 3, 3), strength, 11)?;
        let truth = true_interventional(&scm, 0);
        println!(
            "  strength {strength:.1}: TV naive {:.4}, TV front-door {:.1e}",
            total_variation(&naive_conditional(&scm, 0), &truth),
            total_variation(&frontdoor_estimate(&scm, 0), &truth),
        );
    }

    println!("\nfinite-sample front-door on the fixture, do(X=0)");
    let exact = frontdoor_estimate(&scm, 0);
    for (a, n) in [(10, 10), (100, 100), (250, 400)] {
        let sampled = finite_sample_frontdoor(&scm, 0, a, n, 3);
        println!("  A={a:<4} N={n:<4} TV {:.4}", total_variation(&sampled, &exact));
    }
    Ok(())
}
