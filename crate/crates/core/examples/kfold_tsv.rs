//! Cross-validate on a TSV corpus (`label<TAB>text` per line).
//!
//! `cargo run --release --example kfold_tsv -- corpus.tsv [folds]`
//!
//! Without arguments a small sentiment-style corpus is generated first.

use sam_core::data::{kfold_split, parse_tsv};
use sam_core::head::Pooling;
use sam_core::sam::SamConfig;
use sam_core::train::{train_run, Dataset, TrainConfig};

const GOOD: [&str; 6] = ["great", "lovely", "fun", "moving", "sharp", "warm"];
const BAD: [&str; 6] = ["dull", "flat", "tedious", "messy", "cold", "bland"];
const FILL: [&str; 8] = ["the", "film", "plot", "was", "acting", "quite", "and", "story"];

fn toy_corpus() -> String {
    let mut out = String::new();
    for i in 0..300usize {
        let positive = i % 2 == 0;
        let cue = if positive { GOOD[i % 6] } else { BAD[(i / 2) % 6] };
        let mut words: Vec<&str> = (0..(4 + i % 5)).map(|j| FILL[(i * 3 + j * 5) % 8]).collect();
        words.insert((i * 7) % words.len(), cue);
        out.push_str(&format!("{}\t{}\n", positive as u8, words.join(" ")));
    }
    out
}

fn main() -> sam_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = match args.next() {
        Some(p) => p.into(),
        None => {
            let p = std::env::temp_dir().join("sam_toy.tsv");
            std::fs::write(&p, toy_corpus())?;
            p
        }
    };
    let folds: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);
    let corpus = parse_tsv(&path)?;
    println!("{} records, labels {:?}", corpus.len(), corpus.label_values);
    println!("fold sizes {:?}", kfold_split(&corpus.labels(), folds, 0)?.fold_sizes());

    let cfg = TrainConfig {
        max_epochs: 20,
        folds,
        ..TrainConfig::default()
    };
    let run = train_run(&Dataset::Text(corpus), &SamConfig::new(16, 12), Pooling::Mean, &cfg)?;
    for f in &run.folds {
        let best = f.best().expect("fold finished");
        println!("fold {}: best epoch {:>2}  accuracy {:.4}  F1 {:.4}", f.fold, f.best_epoch.unwrap(), best.accuracy, best.selection_metric());
    }
    let s = run.summary().unwrap();
    println!("mean accuracy {:.4}, macro-F1 {:.4}", s.accuracy, s.macro_f1);
    Ok(())
}
