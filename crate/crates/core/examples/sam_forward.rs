//! Run the attention module on a padded batch and print both maps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sam_core::sam::{Order, Sam, SamConfig};
use sam_core::tensor::{Mask, Tensor};

fn main() -> sam_core::Result<()> {
    let (batch, len, dim) = (2, 5, 6);
    let mut cfg = SamConfig::new(dim, len);
    cfg.delta = 0.2;
    cfg.order = Order::FamThenTam;
    let sam = Sam::new(cfg, &mut ChaCha8Rng::seed_from_u64(7))?;

    let x = Tensor::new(
        vec![batch, len, dim],
        (0..batch * len * dim).map(|i| ((i * 37) % 17) as f64 / 8.0 - 1.0).collect(),
    )?;
    // First sentence has 5 tokens, the second 3.
    let mask = Mask::from_lengths(len, &[5, 3])?;
    let (y, trace) = sam.forward(&x, &mask)?;

    for b in 0..batch {
        println!("sentence {b}");
        println!("  feature weights {:.3?}", trace.feature_weights(b, dim));
        println!("  token weights   {:.3?}", trace.token_weights(b, &mask));
        let first: Vec<f64> = (0..dim).map(|d| y.get(&[b, 0, d])).collect();
        println!("  output[0]       {first:.3?}");
    }
    Ok(())
}
