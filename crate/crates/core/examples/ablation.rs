//! Train every ablation setting on the co-occurrence corpus and print the
//! comparison table.

use sam_core::data::{make_synthetic, SyntheticSpec};
use sam_core::head::Pooling;
use sam_core::sam::SamConfig;
use sam_core::train::{ablation_suite, AblationSetting, Dataset, TrainConfig};

fn main() -> sam_core::Result<()> {
    let corpus = make_synthetic(&SyntheticSpec::co_occurrence(2000, 50, 1))?;
    let cfg = TrainConfig {
        max_epochs: 20,
        folds: 1,
        seed: 1,
        ..TrainConfig::default()
    };
    let rows = ablation_suite(
        &Dataset::Text(corpus),
        &SamConfig::new(32, 16),
        Pooling::Mean,
        &cfg,
        &AblationSetting::ALL,
    )?;
    println!("{:<10} {:>8} {:>8} {:>9}", "setting", "acc", "F1", "s/epoch");
    for r in rows {
        match r.summary {
            Some(s) => println!(
                "{:<10} {:>8.4} {:>8.4} {:>9.3}",
                r.setting.name(),
                s.accuracy,
                s.binary_f1.unwrap_or(s.macro_f1),
                s.seconds_per_epoch
            ),
            None => println!("{:<10} {}", r.setting.name(), r.status),
        }
    }
    Ok(())
}
