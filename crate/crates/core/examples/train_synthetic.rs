//! Train the full module on a synthetic corpus and print per-epoch dev metrics.
//!
//! `cargo run --release --example train_synthetic -- [trigger|cooccur] [epochs] [lr]`

use sam_core::data::{make_synthetic, SyntheticSpec};
use sam_core::head::Pooling;
use sam_core::sam::SamConfig;
use sam_core::train::{train_run, Dataset, TrainConfig};

fn main() -> sam_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let kind = args.first().map(String::as_str).unwrap_or("trigger");
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(TrainConfig::default().lr);

    let spec = SyntheticSpec::parse(kind)?;
    let corpus = make_synthetic(&spec)?;
    println!("{} sentences, {} classes", corpus.len(), corpus.num_classes());

    let cfg = TrainConfig {
        lr,
        max_epochs: epochs,
        folds: 1,
        seed: 1,
        ..TrainConfig::default()
    };
    let start = std::time::Instant::now();
    let run = train_run(&Dataset::Text(corpus), &SamConfig::new(32, 16), Pooling::Mean, &cfg)?;
    for fold in &run.folds {
        for r in &fold.history {
            println!(
                "fold {} epoch {:>3}  loss {:.4}  acc {:.4}  f1 {:.4}  {:.2}s",
                fold.fold,
                r.epoch,
                r.train_loss,
                r.dev.accuracy,
                r.dev.binary_f1.unwrap_or(f64::NAN),
                r.dev.wall_seconds
            );
        }
        if let Some(f) = &fold.failure {
            println!("fold {} failed at epoch {}: {}", fold.fold, f.epoch, f.message);
        }
    }
    if let Some(s) = run.summary() {
        println!("mean accuracy {:.4}  macro-F1 {:.4}", s.accuracy, s.macro_f1);
    }
    println!("total {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
