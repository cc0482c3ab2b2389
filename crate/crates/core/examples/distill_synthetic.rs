//! Teacher pretraining and three student variants on the synthetic corpus:
//! no distillation (α = β = 0), KD only (β = 0) and the full relation
//! contrastive objective. Prints test top-1 for each seed and the mean.
//!
//!     cargo run --release --example distill_synthetic -- [seeds...]
//!
//! Overrides such as `beta=1` or `critic.n_negatives=32` may be mixed in
//! with the seeds.

use std::time::Instant;

use crrcd::config::ExperimentConfig;
use crrcd::data::{synthetic_datasets, SyntheticSpec};
use crrcd::evaluator::top1;
use crrcd::trainer::{distill_student, train_plain, train_teacher};

fn desk_config() -> ExperimentConfig {
    let text = include_str!("../configs/desk.toml");
    ExperimentConfig::from_toml(text).expect("bundled config parses")
}

fn main() -> crrcd::Result<()> {
    let mut seeds = Vec::new();
    let mut base = desk_config();
    for arg in std::env::args().skip(1) {
        match arg.parse::<u64>() {
            Ok(s) => seeds.push(s),
            Err(_) => base.apply_override(&arg)?,
        }
    }
    if seeds.is_empty() {
        seeds = vec![5, 6, 7];
    }
    base.validate()?;

    let results: Vec<crrcd::Result<[f64; 4]>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let base = base.clone();
                scope.spawn(move || run_seed(base, seed))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });

    let mut sum = [0.0; 4];
    println!("seed  teacher  plain    kd       crrcd");
    for (seed, r) in seeds.iter().zip(results) {
        let r = r?;
        println!("{seed:<5} {:.4}   {:.4}   {:.4}   {:.4}", r[0], r[1], r[2], r[3]);
        for (s, v) in sum.iter_mut().zip(r) {
            *s += v / seeds.len() as f64;
        }
    }
    println!("mean  {:.4}   {:.4}   {:.4}   {:.4}", sum[0], sum[1], sum[2], sum[3]);
    Ok(())
}

fn run_seed(mut config: ExperimentConfig, seed: u64) -> crrcd::Result<[f64; 4]> {
    config.seed = seed;
    let start = Instant::now();
    let spec = SyntheticSpec::new(10, 30, config.data.hires, seed);
    let (train, test) = synthetic_datasets(&spec, 100)?;

    let teacher = train_teacher(&config, &train, Some(&test))?;
    let t_acc = teacher.val_accuracy.unwrap_or(f64::NAN);

    let mut plain = config.clone();
    plain.loss.alpha = 0.0;
    plain.loss.beta = 0.0;
    let (p_model, _) = train_plain(&plain, &train)?;

    let mut kd = config.clone();
    kd.loss.beta = 0.0;
    let (k_model, _) = distill_student(&kd, &teacher.model, &train)?;

    let (c_model, _) = distill_student(&config, &teacher.model, &train)?;
    let out = [t_acc, top1(&p_model, &test)?, top1(&k_model, &test)?, top1(&c_model, &test)?];
    eprintln!("seed {seed}: {:.1}s", start.elapsed().as_secs_f64());
    Ok(out)
}
