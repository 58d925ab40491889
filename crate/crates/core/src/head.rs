//! Sequence pooling and the softmax classification layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Axis, Mask, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
    First,
}

impl std::str::FromStr for Pooling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            "first" => Ok(Pooling::First),
            other => Err(format!("unknown pooling `{other}` (expected mean, max or first)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub pooling: Pooling,
    /// `D×K`.
    pub w: Tensor,
    pub b: Tensor,
}

impl HeadParams {
    pub fn init<R: Rng>(dim: usize, num_classes: usize, pooling: Pooling, rng: &mut R) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        Ok(Self {
            pooling,
            w: crate::sam::glorot(dim, num_classes, rng),
            b: Tensor::zeros(&[num_classes]),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.b.numel()
    }
}

/// Reduces `B×L×D` to `B×D` over valid positions.
pub fn pool_sequence(tape: &mut Tape, x: Var, mask: &Mask, strategy: Pooling) -> Result<Var> {
    match strategy {
        Pooling::Mean => tape.masked_avg_pool(x, mask, Axis::Token),
        Pooling::Max => tape.masked_max_pool(x, mask, Axis::Token),
        Pooling::First => {
            if let Some(b) = (0..mask.batch()).find(|&b| !mask.is_valid(b, 0)) {
                return Err(Error::Precondition(format!(
                    "first-token pooling needs position 0 valid, row {b} is padding there"
                )));
            }
            tape.select_token(x, 0)
        }
    }
}

/// `pooled · W + b`.
pub fn logits(tape: &mut Tape, pooled: Var, w: Var, b: Var) -> Result<Var> {
    let z = tape.matmul(pooled, w)?;
    tape.add_bias(z, b)
}

pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}
