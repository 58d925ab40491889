//! Drive the command line in-process: train, then replay the manifest and
//! confirm the metrics match bit for bit.

use sam_core::cli::{run, TrainReport};

fn report(dir: &std::path::Path) -> TrainReport {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn main() {
    let root = std::env::temp_dir().join("sam_replay_example");
    let (first, second) = (root.join("first"), root.join("second"));
    let code = run([
        "sam", "train", "--synthetic", "cooccur:n=400", "--folds", "3", "--epochs", "5", "--seed", "9",
        "--out", first.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let manifest = first.join("manifest.json");
    let code = run(["sam", "replay", "--manifest", manifest.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert_eq!(code, 0);

    let (a, b) = (report(&first), report(&second));
    for (x, y) in a.folds.iter().zip(&b.folds) {
        let (x, y) = (x.best.as_ref().unwrap(), y.best.as_ref().unwrap());
        println!(
            "fold accuracy {:.4} vs {:.4}  identical bits: {}",
            x.accuracy,
            y.accuracy,
            x.accuracy.to_bits() == y.accuracy.to_bits() && x.confusion == y.confusion
        );
    }
}
