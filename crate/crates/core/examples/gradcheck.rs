//! Finite-difference check of the full training objective on a small model.
//! Pass `desk` to check the desk-scale model instead.

use mpt::body::BodyModel;
use mpt::model::ModelConfig;
use mpt::tensor::GradCheckOptions;
use mpt::trainer::end_to_end_gradcheck;

fn main() -> anyhow::Result<()> {
    let config = if std::env::args().any(|a| a == "desk") {
        ModelConfig::desk()
    } else {
        ModelConfig {
            block_hidden_sizes: vec![16, 8],
            heads_per_block: 2,
            mlp_ratio: 2,
            upsampler_hidden: 8,
            desk_scale: false,
            ..ModelConfig::desk()
        }
    };
    let r = end_to_end_gradcheck(&config, &BodyModel::standard(), 5, 2, &GradCheckOptions::default())?;
    println!("{} parameters, total loss {:.5}", r.parameter_count, r.loss.total);
    println!("{}", r.report);
    Ok(())
}
