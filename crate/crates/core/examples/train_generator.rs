//! Phase 2 in miniature: train the encoder/decoder pair against the patch
//! critic under a frozen matcher, then save checkpoints and the loss history.
//!
//! cargo run --release --example train_generator -- [out_dir]

use std::path::PathBuf;

use revdeid::matcher::{train_phase1, MatcherArch, Phase1Config};
use revdeid::training::{
    generate_synthetic_dataset, reconstruction_mse, save_critic, train_phase2_observed, Generator, StepEvent,
    SyntheticSpec, TrainConfig,
};
use revdeid::types::SignVector;

fn main() -> revdeid::Result<()> {
    env_logger::init();
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("revdeid-train"));
    let spec = SyntheticSpec {
        subjects: 8,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic_dataset(&spec, 5)?;
    let matcher = train_phase1(
        &ds,
        &Phase1Config {
            arch: MatcherArch::scaled_down(8),
            epochs: 4,
            ..Phase1Config::default()
        },
    )?;
    let cfg = TrainConfig {
        epochs: 4,
        sign_vector: "-1,1,1,1".parse::<SignVector>()?,
        ..TrainConfig::default()
    };
    let mut worst_weight = 0.0f64;
    let result = train_phase2_observed(&ds, &matcher, &cfg, &mut |e| {
        if let StepEvent::Critic { max_abs_weight, .. } = e {
            worst_weight = worst_weight.max(*max_abs_weight);
        }
    })?;
    println!("largest critic weight after clipping: {worst_weight:.4}");
    for r in &result.history.records {
        println!("epoch {:>2}: L_total {:>9.4}  L_mse {:.4}", r.epoch, r.total, r.terms.mse);
    }
    println!("reconstruction MSE: {:.4}", reconstruction_mse(&result.generator, &ds)?);

    result.generator.save(&out.join("generator.bin"))?;
    save_critic(&result.critic, cfg.t(), &out.join("critic.bin"))?;
    result.history.write_csv(&out.join("history.csv"))?;
    let reloaded = Generator::load(&out.join("generator.bin"), Some(4))?;
    println!("saved to {} (fingerprint {})", out.display(), reloaded.fingerprint());
    Ok(())
}
