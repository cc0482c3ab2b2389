//! Stops a teacher run half way, round-trips the checkpoint through disk
//! and resumes it; the metric trace matches an uninterrupted run exactly.
//!
//!     cargo run --release --example resume_training

use crrcd::checkpoint::Checkpoint;
use crrcd::config::ExperimentConfig;
use crrcd::data::{make_synthetic, Dataset};
use crrcd::trainer::{render_metrics, Trainer};

fn main() -> crrcd::Result<()> {
    let mut config = ExperimentConfig::default();
    config.teacher.arch = "mlp:32-16".into();
    config.teacher.epochs = 4;
    config.batch_size = 32;
    let train = Dataset::new("train", 4, 4, make_synthetic(4, 40, 32, 5)?)?;

    let mut full = Trainer::teacher(&config, &train)?;
    full.run(None)?;
    let (_, reference) = full.finish()?;

    let mut first = Trainer::teacher(&config, &train)?;
    let half = first.total_steps() / 2;
    first.run(Some(half))?;
    let path = std::env::temp_dir().join(format!("crrcd-resume-{}.ckpt", std::process::id()));
    first.checkpoint().save(&path)?;
    println!("stopped at step {half} of {}, checkpoint {}", first.total_steps(), path.display());

    let mut resumed = Trainer::resume(Checkpoint::load(&path)?, &config, &train, None)?;
    resumed.run(None)?;
    let (_, metrics) = resumed.finish()?;
    std::fs::remove_file(&path).ok();

    let same = render_metrics(&metrics) == render_metrics(&reference);
    println!("{} steps, identical metric trace: {same}", metrics.len());
    Ok(())
}
