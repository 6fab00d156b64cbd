//! Overfits the small toy model on 64 fixed samples and prints training MPJPE.
//!
//! `cargo run --release -p xformer --example overfit_pilot -- [lr] [steps] [every] [default|none] [batch] [samples] [preset]`

use std::time::Instant;

use xformer::config::{AugmentConfig, DatasetSpec, ExperimentConfig, KeypointSource, ModelConfig};
use xformer::losses::LossReport;
use xformer::mesh::BranchTag;
use xformer::train::Trainer;

fn main() -> xformer::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let steps: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let every: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(100);
    let augment = args.get(4).map_or("default", String::as_str);
    let batch: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(8);
    let count: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(64);
    let preset = args.get(7).map_or("small_toy", String::as_str);

    let mut cfg = ExperimentConfig::small_toy();
    cfg.model = ModelConfig::preset(preset)?;
    cfg.train.lr = lr;
    cfg.train.batch_size = batch;
    if augment == "none" {
        cfg.data.augment = AugmentConfig::identity();
    }
    cfg.data.train = DatasetSpec {
        image_3d: count,
        seed: 7,
        ..DatasetSpec::default()
    };
    let mut trainer = Trainer::new(cfg)?;
    let train_set = trainer.train_set.clone();
    let mpjpe = |t: &Trainer| -> xformer::Result<[f64; 3]> {
        let r = t.evaluate(&train_set, KeypointSource::GroundTruth)?;
        let m = |b| r.row(b).map_or(f64::NAN, |row| row.mpjpe);
        Ok([
            m(BranchTag::Fused),
            m(BranchTag::Keypoint),
            m(BranchTag::Image),
        ])
    };
    let initial = mpjpe(&trainer)?[0];
    println!("lr {lr}  augment {augment}  batch {batch}  initial training MPJPE {initial:.6}");
    println!("{}", LossReport::csv_header());
    let start = Instant::now();
    for _ in 0..steps {
        let r = trainer.step()?;
        let s = trainer.step_count();
        if s % every == 0 {
            let [m, kp, img] = mpjpe(&trainer)?;
            println!(
                "step {s:>5}  MPJPE {m:.6} (kp {kp:.4}, img {img:.4})  ratio {:.4}  elapsed {:.1}s",
                m / initial,
                start.elapsed().as_secs_f64()
            );
            println!("  {}", r.csv_row(s));
        }
    }
    Ok(())
}
