//! Cut a heatmap stack into patch tokens and reassemble it.

use mpt::camera::Vec2;
use mpt::heatmap::{detokenize, synthesize, tokenize};

fn main() -> anyhow::Result<()> {
    let joints: Vec<Vec2> = (0..17).map(|j| Vec2::new(20.0 + 11.0 * j as f64, 40.0 + 7.0 * j as f64)).collect();
    let stack = synthesize(&joints, &[true; 17], 3.0, 224, 224)?;
    let grid = tokenize(&stack, 8)?;
    println!("{} tokens of {} features", grid.token_count(), grid.feature_len());

    let back = detokenize(&grid, stack.sigma);
    let exact = back.data.iter().zip(&stack.data).all(|(a, b)| a.to_bits() == b.to_bits());
    println!("pixel round trip bit-exact: {exact}");
    Ok(())
}
