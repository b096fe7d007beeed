//! Draws many rank sketches, checks that their average is the identity, and
//! shows that sketched LoRA gradients vanish outside the active components.
//!
//! ```text
//! cargo run --release --example sketch_unbiasedness
//! ```

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fedlora::lora::{lora_grads, Batch, LoraState, SketchMatrix};

fn main() -> fedlora::Result<()> {
    let (gamma, k, draws) = (8, 2, 100_000);
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let mut sum = DVector::<f64>::zeros(gamma);
    for _ in 0..draws {
        sum += SketchMatrix::sample(gamma, k, &mut rng)?.diagonal();
    }
    let mean = sum / draws as f64;
    println!("rank {gamma}, k = {k}, {draws} sketches");
    println!("mean diagonal of S: {:.4?}", mean.as_slice());
    println!("max |mean - 1| = {:.4}", mean.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max));

    let state = LoraState::new(
        DMatrix::from_fn(4, 6, |i, j| 0.1 * (i as f64 - j as f64)),
        DMatrix::from_fn(4, gamma, |i, j| 0.05 * ((i * gamma + j) as f64).sin()),
        DMatrix::from_fn(gamma, 6, |i, j| 0.05 * ((i * 6 + j) as f64).cos()),
    )?;
    let batch = Batch::new(DMatrix::from_fn(5, 6, |i, j| ((i + 2 * j) % 5) as f64 - 2.0), vec![0, 1, 2, 3, 1])?;
    let sketch = SketchMatrix::sample(gamma, 3, &mut rng)?;
    let grads = lora_grads(&state, &sketch, &batch)?;
    println!("\nactive components {:?}", sketch.indices());
    for j in 0..gamma {
        println!(
            "component {j}: |grad B col| = {:.5}, |grad A row| = {:.5}",
            grads.b.column(j).norm(),
            grads.a.row(j).norm()
        );
    }
    Ok(())
}
