//! Train a teacher on a five-clip toy dataset and print the log.
//!
//! `cargo run --release --example toy_teacher -- [config.txt] [out_dir]`

use mimic_core::motion::{generate_synthetic_dataset, Category, DatasetSpec};
use mimic_core::skeleton::Skeleton;
use mimic_core::train::{stream_rng, train_teacher, TrainConfig};

fn main() -> mimic_core::Result<()> {
    let config = match std::env::args().nth(1) {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    let mut spec = DatasetSpec::new(vec![(Category::Stand, 0.4), (Category::Sway, 0.2), (Category::Walk, 0.4)], 5);
    spec.intensity.push((Category::Walk, 0.6));
    spec.duration = [4.0, 8.0];
    let clips = generate_synthetic_dataset(&spec, &Skeleton::biped(), &mut stream_rng(7, 0))?;
    let start = std::time::Instant::now();
    let out = std::env::args().nth(2).map(std::path::PathBuf::from);
    let run = train_teacher(clips, config, 1, 0, out.as_deref(), |row| {
        println!("{:7.1}s\t{}\tmpjpe={:.4}", start.elapsed().as_secs_f64(), row.row(), row.mean_mpjpe)
    })?;
    println!("log_std {:?}", run.policy.log_std());
    Ok(())
}
