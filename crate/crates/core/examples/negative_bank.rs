//! FIFO negative bank: eviction order, supervised versus unsupervised
//! eligibility and warm-up sampling while the bank is still short.
//!
//!     cargo run --example negative_bank

use crrcd::negatives::{Anchor, NegativeBank, SamplingMode, SamplingPolicy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> crrcd::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut bank = NegativeBank::new(6)?;
    let anchor = Anchor { sample_id: 3, label: Some(0) };
    let policy = SamplingPolicy { mode: SamplingMode::Supervised, n: 4 };

    for id in 0..9usize {
        bank.push(vec![id as f64], vec![-(id as f64)], id, Some(id % 3))?;
        let (picked, warm) = bank.sample_with_warmup(&policy, &anchor, &mut rng)?;
        let ids: Vec<usize> = picked.iter().map(|&i| bank.get(i).sample_id).collect();
        println!("after push {id}: bank {:?} negatives {ids:?}{}", bank.iter().map(|r| r.sample_id).collect::<Vec<_>>(), if warm { " (warm-up)" } else { "" });
    }

    for mode in [SamplingMode::Unsupervised, SamplingMode::Supervised] {
        let pool: Vec<usize> = bank.eligible(mode, &anchor)?.into_iter().map(|i| bank.get(i).sample_id).collect();
        println!("{mode:?} pool for anchor id 3 / label 0: {pool:?}");
    }
    match bank.sample_indices(&SamplingPolicy { mode: SamplingMode::Supervised, n: 5 }, &anchor, &mut rng) {
        Ok(_) => println!("unexpected: drew 5 negatives"),
        Err(e) => println!("asking for 5 supervised negatives: {e}"),
    }
    Ok(())
}
