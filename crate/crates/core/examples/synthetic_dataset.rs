//! Render the synthetic tracklet set, save it in the on-disk layout and
//! read it back.
//!
//! cargo run --release --example synthetic_dataset -- [out_dir]

use std::path::PathBuf;

use revdeid::training::{generate_synthetic_dataset, Dataset, SyntheticSpec};

fn main() -> revdeid::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("revdeid-synth"));
    let spec = SyntheticSpec {
        subjects: 6,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic_dataset(&spec, 7)?;
    println!(
        "{} crops, {} subjects, {} sequences, t = {}",
        ds.len(),
        ds.subjects().len(),
        ds.sequences().len(),
        ds.t()
    );
    for m in 1..ds.t() {
        println!("label {m}: categories {:?}", ds.categories(m));
    }
    ds.save(&out)?;
    let back = Dataset::load(&out)?;
    println!("reloaded {} crops from {}", back.len(), out.display());
    let first = &back.samples()[0];
    println!("first sample {:?} labels {:?}", first.index, first.labels.0);
    Ok(())
}
