//! Sequential attention over token sequences: a feature-axis gate with a
//! hard floor, a token-axis softmax, and the toy-scale training harness used
//! to study them.
//!
//! ```
//! use sam_core::sam::{Sam, SamConfig};
//! use sam_core::tensor::{Mask, Tensor};
//! use rand::SeedableRng;
//!
//! let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
//! let sam = Sam::new(SamConfig::new(4, 3), &mut rng).unwrap();
//! let x = Tensor::new(vec![1, 3, 4], (0..12).map(|v| v as f64 / 12.0).collect()).unwrap();
//! let (y, trace) = sam.forward(&x, &Mask::from_lengths(3, &[2]).unwrap()).unwrap();
//! assert_eq!(y.shape(), &[1, 3, 4]);
//! assert!(trace.tam_map.is_some());
//! ```

pub mod backbone;
pub mod cli;
pub mod data;
pub mod error;
pub mod head;
pub mod sam;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
