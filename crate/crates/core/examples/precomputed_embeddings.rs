//! Write a SAMEMB1 file of frozen sentence vectors, read it back, and train
//! the attention layers on top of it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sam_core::backbone::{load_precomputed, store_precomputed, PrecomputedSet};
use sam_core::head::Pooling;
use sam_core::sam::SamConfig;
use sam_core::train::{train_run, Dataset, TrainConfig};

fn main() -> sam_core::Result<()> {
    let dim = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut set = PrecomputedSet::new(dim);
    for i in 0..400u32 {
        let label = i % 2;
        let len = rng.gen_range(3..=10);
        // One position of positive sentences carries a signature direction.
        let marked = rng.gen_range(0..len);
        let mut data = Vec::with_capacity(len * dim);
        for l in 0..len {
            for d in 0..dim {
                let signal = if label == 1 && l == marked && d < 2 { 1.5 } else { 0.0 };
                data.push(signal + rng.gen_range(-0.5..0.5));
            }
        }
        set.push(data, label)?;
    }

    let path = std::env::temp_dir().join("sam_example.samemb");
    store_precomputed(&path, &set)?;
    let loaded = load_precomputed(&path)?;
    println!("{} sequences of width {} in {}", loaded.sequences.len(), loaded.dim, path.display());

    let cfg = TrainConfig {
        max_epochs: 15,
        folds: 3,
        ..TrainConfig::default()
    };
    let run = train_run(&Dataset::from_precomputed(loaded)?, &SamConfig::new(dim, 10), Pooling::Max, &cfg)?;
    let s = run.summary().expect("training succeeded");
    println!("3-fold accuracy {:.4}, macro-F1 {:.4}", s.accuracy, s.macro_f1);
    Ok(())
}
