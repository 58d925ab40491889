//! Compare tape gradients of the full classification loss against central
//! differences, one parameter tensor at a time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sam_core::head::{cross_entropy, Pooling};
use sam_core::sam::SamConfig;
use sam_core::tensor::{finite_diff_check, Mask};
use sam_core::train::{Batch, BatchInput, Model, ModelConfig};

fn main() -> sam_core::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut sam = SamConfig::new(8, 6);
    sam.delta = 0.1;
    let model = Model::init(
        ModelConfig {
            sam,
            pooling: Pooling::Mean,
            num_classes: 2,
        },
        Some(10),
        &mut rng,
    )?;
    let lengths = [6, 4, 2];
    let mut ids = vec![0; 3 * 6];
    for (b, &n) in lengths.iter().enumerate() {
        for l in 0..n {
            ids[b * 6 + l] = rng.gen_range(1..10);
        }
    }
    let batch = Batch {
        input: BatchInput::Ids(ids),
        mask: Mask::from_lengths(6, &lengths)?,
        labels: vec![0, 1, 1],
    };

    for (j, (name, value)) in model.params().into_iter().enumerate() {
        let err = finite_diff_check(
            |tape, v| {
                let mut vars = model.register(tape, false);
                vars[j] = v;
                let f = model.forward_with(tape, &batch, vars, None)?;
                cross_entropy(tape, f.logits, &batch.labels)
            },
            value,
            1e-5,
        )?;
        println!("{name:<10} {:>4} values  max relative error {err:.2e}", value.numel());
    }
    Ok(())
}
