//! Scale one objective weight and compare against the base run from the
//! same seed.
//!
//! cargo run --release --example ablation_sweep -- [param] [factor]

use revdeid::matcher::{train_phase1, MatcherArch, Phase1Config};
use revdeid::networks::{CriticArch, UNetArch};
use revdeid::training::{ablate, generate_synthetic_dataset, AblationParam, SyntheticSpec, TrainConfig};

fn main() -> revdeid::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let param: AblationParam = args.next().as_deref().unwrap_or("delta_gp").parse()?;
    let factor: f64 = args.next().map_or(Ok(10.0), |f| f.parse()).map_err(|_| revdeid::Error::Config("factor must be a number".into()))?;
    let ds = generate_synthetic_dataset(
        &SyntheticSpec {
            subjects: 6,
            ..SyntheticSpec::default()
        },
        2,
    )?;
    let train = ds.filter_subjects(|s| s < 5);
    let held_out = ds.filter_subjects(|s| s >= 5);
    let matcher = train_phase1(
        &train,
        &Phase1Config {
            arch: MatcherArch::scaled_down(8),
            epochs: 3,
            ..Phase1Config::default()
        },
    )?;
    let base = TrainConfig {
        epochs: 3,
        encoder_arch: UNetArch::encoder(4, 2),
        decoder_arch: UNetArch::decoder(4, 2),
        critic_arch: CriticArch {
            base_width: 4,
            layers: 3,
        },
        ..TrainConfig::default()
    };
    let report = ablate(&train, &held_out, &matcher, &base, param, factor)?;
    print!("{}", report.to_csv());
    println!("ablated run flagged: {}", report.ablated.flagged());
    Ok(())
}
