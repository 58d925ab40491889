//! Train on the trigger corpus, then show where the model looks in a few
//! sentences. Writes `heatmap.svg` for the last one.

use sam_core::cli::{heatmap_for, heatmap_svg, Checkpoint};
use sam_core::data::{make_synthetic, SyntheticSpec};
use sam_core::head::Pooling;
use sam_core::sam::SamConfig;
use sam_core::train::{train_run, Dataset, TrainConfig};

fn main() -> sam_core::Result<()> {
    let corpus = make_synthetic(&SyntheticSpec::trigger(1000, 50, 3))?;
    let label_values = corpus.label_values.clone();
    let cfg = TrainConfig {
        max_epochs: 8,
        folds: 1,
        seed: 3,
        ..TrainConfig::default()
    };
    let run = train_run(&Dataset::Text(corpus), &SamConfig::new(16, 12), Pooling::Mean, &cfg)?;
    let best = run.best_fold().expect("training succeeded");
    let ck = Checkpoint {
        run_id: "example".into(),
        fold: best.fold,
        label_values,
        vocab: best.vocab.clone(),
        model: best.model.clone().unwrap(),
    };

    let mut last = None;
    for text in ["w3 w12 w7 w30 w4", "w3 w12 w8 w30 w4", "w7"] {
        let map = heatmap_for(&ck, text)?;
        println!("{text:<20} -> label {}", map.predicted_label);
        for (t, w) in map.tokens.iter().zip(&map.token_weights) {
            println!("    {t:<5} {w:.3} {}", "#".repeat((w * 40.0).round() as usize));
        }
        last = Some(map);
    }
    let map = last.unwrap();
    std::fs::write("heatmap.svg", heatmap_svg(&map.tokens, Some(&map.token_weights), None))?;
    println!("wrote heatmap.svg");
    Ok(())
}
