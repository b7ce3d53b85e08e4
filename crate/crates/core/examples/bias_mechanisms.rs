//! The four bias mechanisms on hand-sized inputs.

use ktforget::bias::{effective_distance, folibi_beta, folibi_slopes, mono_beta, rc_gamma};

fn main() -> ktforget::Result<()> {
    let slopes = folibi_slopes(8);
    println!("folibi slopes (H=8): {slopes:?}");
    let beta = folibi_beta(3, &slopes[..1]);
    println!("folibi beta, head 1, t=3: {beta:?}");

    let sim = [0.1, 0.2, 0.7];
    for tau in 1..3 {
        println!(
            "effective distance t=3 tau={tau}: {}",
            effective_distance(&sim, 3, tau)?
        );
    }

    // One head, t = 2: a query-key logit of 2 at distance 1 decays to 2/e.
    let logits = [0.0, 0.0, 2.0, 0.0];
    let dist = [0.0, 0.0, 1.0, 0.0];
    println!("mono beta (theta=1): {:?}", mono_beta(&logits, &dist, &[1.0], 2)?);

    let emb_sim = [0.2, 0.9];
    println!("rc gamma t=3 (S=1): {:?}", rc_gamma(&emb_sim, 3, 1.0)?);
    Ok(())
}
