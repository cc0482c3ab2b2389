//! Trains a small teacher and runs every evaluation protocol on its
//! embeddings: top-1, pair verification with the threshold sweep, rank-k
//! retrieval and a linear probe.
//!
//!     cargo run --release --example evaluate_protocols

use crrcd::config::ExperimentConfig;
use crrcd::data::{make_pairs, make_synthetic_split, Dataset, Split, SyntheticSpec};
use crrcd::evaluator::{linear_probe, retrieve, top1, verify_pairs, ProbeSettings};
use crrcd::trainer::train_teacher;

fn main() -> crrcd::Result<()> {
    let mut config = ExperimentConfig::default();
    config.teacher.arch = "mlp:64-32".into();
    config.teacher.epochs = 5;

    let spec = SyntheticSpec::new(10, 60, 32, 5);
    let train = Dataset::new("train", 10, spec.factor, make_synthetic_split(&spec, Split::Train)?)?;
    let test = Dataset::new("test", 10, spec.factor, make_synthetic_split(&spec, Split::Test)?)?;
    let teacher = train_teacher(&config, &train, None)?.model;

    println!("top1 on test: {:.4}", top1(&teacher, &test)?);

    let labelled: Vec<(usize, usize)> = test.samples.iter().map(|s| (s.sample_id, s.label)).collect();
    let pairs = make_pairs(&labelled, 600, 5);
    let report = verify_pairs(&teacher, &test, &pairs, config.eval.histogram_bins)?;
    print!("{}", report.to_text());

    // Gallery from the training split, probes from the test split.
    print!("{}", retrieve(&teacher, &train, &test, &config.eval.ranks)?.to_text());

    let probe = linear_probe(&teacher, &train, &test, &ProbeSettings::default())?;
    println!("linear probe top1: {probe:.4}");
    Ok(())
}
