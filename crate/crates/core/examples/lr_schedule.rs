//! Warmup plus linear decay.

use mpt::config::TrainConfig;
use mpt::trainer::lr_at;

fn main() {
    let config = TrainConfig::default();
    let total = 1000;
    for step in [0, 50, 100, 250, 500, 750, 999, 1000] {
        println!("step {step:>4}: {:.3e}", lr_at(step, total, &config));
    }
}
