//! Generate a synthetic forgetting-curve dataset and compare its empirical
//! correct rate with the generator's expectation.
//!
//! cargo run --release --example gen_synthetic -- [learners] [length] [out.csv]

use ktforget::data::{gen_synthetic, write_csv, SyntheticSpec};

fn main() -> ktforget::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let spec = SyntheticSpec {
        learners: args.first().and_then(|a| a.parse().ok()).unwrap_or(100),
        length: args.get(1).and_then(|a| a.parse().ok()).unwrap_or(50),
        concepts: 20,
        seed: 7,
        ..Default::default()
    };
    let data = gen_synthetic(&spec)?;
    let (rate, se) = data.expected_correct_rate();
    let emp = data.empirical_correct_rate();
    println!("{} interactions from {} learners", data.records.len(), spec.learners);
    println!(
        "correct rate {emp:.4}, expected {rate:.4} (se {se:.4}, z = {:+.2})",
        (emp - rate) / se
    );

    for r in data.records.iter().take(5) {
        println!(
            "  {} t={:?} concept={} correct={}",
            r.learner_id, r.timestamp_ms, r.concept_id, r.correct
        );
    }
    if let Some(out) = args.get(2) {
        write_csv(std::path::Path::new(out), &data.records)?;
        println!("wrote {out}");
    }
    Ok(())
}
