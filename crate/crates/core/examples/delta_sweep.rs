//! Sweep the filter threshold and write the curve as an SVG chart.
//!
//! `cargo run --release --example delta_sweep -- [out.svg]`

use sam_core::cli::line_chart_svg;
use sam_core::data::{make_synthetic, SyntheticSpec};
use sam_core::head::Pooling;
use sam_core::sam::SamConfig;
use sam_core::train::{default_delta_grid, delta_sweep, Dataset, TrainConfig};

fn main() -> sam_core::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "delta_sweep.svg".into());
    let corpus = make_synthetic(&SyntheticSpec::co_occurrence(1000, 50, 2))?;
    let cfg = TrainConfig {
        max_epochs: 10,
        folds: 1,
        seed: 2,
        ..TrainConfig::default()
    };
    let grid = default_delta_grid();
    let points = delta_sweep(&Dataset::Text(corpus), &SamConfig::new(16, 16), Pooling::Mean, &cfg, &grid)?;
    for p in &points {
        let acc = p.summary.as_ref().map_or(f64::NAN, |s| s.accuracy);
        println!("delta {:<5} accuracy {acc:.4}  max filtered weight {:.4}", p.delta, p.max_feature_weight.unwrap_or(f64::NAN));
    }
    let acc: Vec<Option<f64>> = points.iter().map(|p| p.summary.as_ref().map(|s| s.accuracy)).collect();
    std::fs::write(&out, line_chart_svg("accuracy against delta", "delta", &grid, &[("accuracy", acc)]))?;
    println!("wrote {out}");
    Ok(())
}
