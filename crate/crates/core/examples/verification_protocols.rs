//! Decision environments for the four verification protocols, with d′,
//! AUC and KS, plus an SVG histogram. Uses pixel-distance scoring so no
//! training is needed; a trained matcher plugs in through `MatcherScorer`.
//!
//! cargo run --release --example verification_protocols -- [report_dir]

use std::path::PathBuf;

use revdeid::eval::{environment_rows, histogram_svg, metrics_csv, verification_protocol, write_text, PairCounts, PixelScorer, Protocol};
use revdeid::networks::UNetArch;
use revdeid::training::{generate_synthetic_dataset, Generator, SyntheticSpec};
use revdeid::types::{FaceCrop, SignVector};

fn main() -> revdeid::Result<()> {
    let report = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("revdeid-report"));
    let ds = generate_synthetic_dataset(
        &SyntheticSpec {
            subjects: 10,
            ..SyntheticSpec::default()
        },
        4,
    )?;
    let generator = Generator::new(UNetArch::encoder(8, 2), UNetArch::decoder(8, 2), SignVector::equal_soft(4), 0)?;
    let original: Vec<FaceCrop> = ds.samples().iter().map(|s| s.crop.clone()).collect();
    let anonymised = revdeid::cli::deidentify_dataset(&generator, &ds, 0)?;
    let counts = PairCounts {
        genuine: 200,
        impostor: 1000,
    };
    let mut rows = Vec::new();
    for protocol in Protocol::ALL {
        let (first, second) = match protocol {
            Protocol::Xx => (&original, &original),
            Protocol::Xa => (&original, &anonymised),
            _ => (&anonymised, &anonymised),
        };
        let (env, _) = verification_protocol(&ds, first, second, protocol, counts, &PixelScorer, 1)?;
        write_text(&report.join(format!("hist_{protocol}.svg")), &histogram_svg(protocol.name(), &env, 30))?;
        rows.extend(environment_rows(protocol.name(), &env, 1)?);
    }
    let csv = metrics_csv(&rows);
    write_text(&report.join("metrics.csv"), &csv)?;
    print!("{csv}");
    println!("report in {}", report.display());
    Ok(())
}
