use serde::{Deserialize, Serialize};

use super::harness::{train_run, RunSummary, TrainConfig};
use super::model::Dataset;
use crate::error::{Error, Result};
use crate::head::Pooling;
use crate::sam::{Order, SamConfig};

/// The six rows of the component ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationSetting {
    Baseline,
    NoFam,
    NoTam,
    TamThenFam,
    Delta01,
    Sam,
}

impl AblationSetting {
    pub const ALL: [Self; 6] = [
        Self::Baseline,
        Self::NoFam,
        Self::NoTam,
        Self::TamThenFam,
        Self::Delta01,
        Self::Sam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::NoFam => "-FAM",
            Self::NoTam => "-TAM",
            Self::TamThenFam => "TAM+FAM",
            Self::Delta01 => "delta=0.1",
            Self::Sam => "SAM",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Model configuration for this row, starting from `base` (whose
    /// `delta`, `order` and enable flags are overridden).
    pub fn configure(self, base: &SamConfig) -> SamConfig {
        let mut cfg = base.clone();
        cfg.delta = 0.0;
        cfg.order = Order::FamThenTam;
        cfg.fam_enabled = true;
        cfg.tam_enabled = true;
        match self {
            Self::Baseline => {
                cfg.fam_enabled = false;
                cfg.tam_enabled = false;
            }
            Self::NoFam => cfg.fam_enabled = false,
            Self::NoTam => cfg.tam_enabled = false,
            Self::TamThenFam => cfg.order = Order::TamThenFam,
            Self::Delta01 => cfg.delta = 0.1,
            Self::Sam => {}
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: AblationSetting,
    pub config: SamConfig,
    pub summary: Option<RunSummary>,
    /// Parameter digest of each fold's best model, in fold order.
    pub digests: Vec<String>,
    pub status: String,
}

fn status(summary: &Option<RunSummary>, failures: &[String]) -> String {
    match (summary, failures.first()) {
        (_, None) => "ok".into(),
        (Some(_), Some(first)) => format!("partial: {first}"),
        (None, Some(first)) => format!("failed: {first}"),
    }
}

/// Trains every requested setting with identical data, folds and seed.
/// A setting whose folds all fail still yields a row.
pub fn ablation_suite(dataset: &Dataset, base: &SamConfig, pooling: Pooling, cfg: &TrainConfig, settings: &[AblationSetting]) -> Result<Vec<AblationRow>> {
    settings
        .iter()
        .map(|&setting| {
            let config = setting.configure(base);
            let run = train_run(dataset, &config, pooling, cfg)?;
            let summary = run.summary();
            let failures: Vec<String> = run.folds.iter().filter_map(|f| f.failure.as_ref().map(|e| e.message.clone())).collect();
            Ok(AblationRow {
                setting,
                config,
                digests: run.folds.iter().filter_map(|f| f.model.as_ref().map(|m| m.digest())).collect(),
                status: status(&summary, &failures),
                summary,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub delta: f64,
    pub summary: Option<RunSummary>,
    /// Largest filtered feature weight over every fold's dev split.
    pub max_feature_weight: Option<f64>,
    pub status: String,
}

/// `start, start + step, ..., stop` with each point rounded to 1e-10 so the
/// grid prints cleanly.
pub fn delta_grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(0.0..=1.0).contains(&start) || !(0.0..=1.0).contains(&stop) || start > stop {
        return Err(Error::Config(format!(
            "delta grid {start}:{stop}:{step} must satisfy 0 <= start <= stop <= 1 and step > 0"
        )));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| ((start + i as f64 * step) * 1e10).round() / 1e10).collect())
}

/// `start:stop:step`, or a comma-separated list of values.
pub fn parse_delta_grid(s: &str) -> Result<Vec<f64>> {
    let num = |v: &str| {
        v.trim()
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("bad delta value {v:?}")))
    };
    let parts: Vec<&str> = s.split(':').collect();
    let grid = match parts.as_slice() {
        [a, b, c] => delta_grid(num(a)?, num(b)?, num(c)?)?,
        [_] => s.split(',').map(num).collect::<Result<Vec<f64>>>()?,
        _ => return Err(Error::Config(format!("bad delta grid {s:?}; expected start:stop:step"))),
    };
    check_grid(&grid)?;
    Ok(grid)
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("delta grid is empty".into()));
    }
    if let Some(d) = grid.iter().find(|d| !(0.0..=1.0).contains(*d)) {
        return Err(Error::Config(format!("delta {d} outside [0, 1]")));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("delta grid must be strictly increasing".into()));
    }
    Ok(())
}

/// The default grid: 0, 0.05, ..., 0.8.
pub fn default_delta_grid() -> Vec<f64> {
    delta_grid(0.0, 0.8, 0.05).expect("valid default grid")
}

/// Trains the full module at each `delta`, everything else fixed.
pub fn delta_sweep(dataset: &Dataset, base: &SamConfig, pooling: Pooling, cfg: &TrainConfig, deltas: &[f64]) -> Result<Vec<SweepPoint>> {
    check_grid(deltas)?;
    let full = AblationSetting::Sam.configure(base);
    deltas
        .iter()
        .map(|&delta| {
            let config = SamConfig { delta, ..full.clone() };
            let run = train_run(dataset, &config, pooling, cfg)?;
            let summary = run.summary();
            let failures: Vec<String> = run.folds.iter().filter_map(|f| f.failure.as_ref().map(|e| e.message.clone())).collect();
            let max_feature_weight = run
                .folds
                .iter()
                .filter_map(|f| f.max_feature_weight)
                .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
            Ok(SweepPoint {
                delta,
                status: status(&summary, &failures),
                summary,
                max_feature_weight,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_seventeen_points() {
        let g = default_delta_grid();
        assert_eq!(g.len(), 17);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[16], 0.8);
        assert_eq!(g[3], 0.15);
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_delta_grid("0:0.2:0.1").unwrap(), vec![0.0, 0.1, 0.2]);
        assert_eq!(parse_delta_grid("0.1,0.5").unwrap(), vec![0.1, 0.5]);
        assert!(parse_delta_grid("0.5,0.1").is_err());
        assert!(parse_delta_grid("0:1.5:0.5").is_err());
        assert!(parse_delta_grid("0:1:0").is_err());
    }

    #[test]
    fn settings_are_distinct() {
        let base = SamConfig::new(8, 6);
        let cfgs: Vec<SamConfig> = AblationSetting::ALL.iter().map(|s| s.configure(&base)).collect();
        for i in 0..cfgs.len() {
            for j in 0..i {
                assert_ne!(cfgs[i], cfgs[j]);
            }
        }
        assert!(cfgs[0].is_identity());
        for s in AblationSetting::ALL {
            assert_eq!(AblationSetting::from_name(s.name()), Some(s));
        }
    }
}
