//! Phase 1: train the pairwise attribute matcher on a small synthetic set
//! and report per-label agreement accuracy on held-out subjects.
//!
//! cargo run --release --example attribute_matcher

use revdeid::matcher::{pair_accuracy, train_phase1_logged, MatcherArch, Phase1Config};
use revdeid::training::{generate_synthetic_dataset, SyntheticSpec};

fn main() -> revdeid::Result<()> {
    env_logger::init();
    let spec = SyntheticSpec {
        subjects: 12,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic_dataset(&spec, 3)?;
    let train = ds.filter_subjects(|s| s < 9);
    let test = ds.filter_subjects(|s| s >= 9);
    let cfg = Phase1Config {
        arch: MatcherArch::scaled_down(8),
        epochs: 8,
        ..Phase1Config::default()
    };
    let (model, history) = train_phase1_logged(&train, &cfg)?;
    for h in history.iter().filter(|h| h.epoch + 1 == cfg.epochs) {
        println!("label {} final epoch loss {:.3}", h.label, h.loss);
    }
    println!("train accuracy {:.3?}", pair_accuracy(&model, &train, 200, 1)?);
    println!("test accuracy  {:.3?}", pair_accuracy(&model, &test, 200, 1)?);
    let (a, b) = (&test.samples()[0].crop, &test.samples()[1].crop);
    println!("D_a(first two test crops) = {:.3?}", model.predict(a, b).values());
    Ok(())
}
