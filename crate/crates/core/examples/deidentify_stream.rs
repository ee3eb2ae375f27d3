//! The public and privileged passes over a directory of scene frames:
//! de-identify with ROI metadata embedded, then reverse from the public
//! frames alone.
//!
//! cargo run --release --example deidentify_stream -- [work_dir]

use std::path::PathBuf;

use revdeid::networks::UNetArch;
use revdeid::pipeline::{embedded_boxes, process_stream, region_mse, synthetic_scenes, write_scenes, Mode, PipelineConfig};
use revdeid::training::{generate_synthetic_dataset, Generator, SyntheticSpec};
use revdeid::types::{Frame, SignVector};

fn main() -> revdeid::Result<()> {
    env_logger::init();
    let work = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("revdeid-stream"));
    let ds = generate_synthetic_dataset(
        &SyntheticSpec {
            subjects: 4,
            ..SyntheticSpec::default()
        },
        1,
    )?;
    let scenes = synthetic_scenes(&ds, 6, 160, 120, 2)?;
    let (raw, public, restored) = (work.join("raw"), work.join("public"), work.join("restored"));
    write_scenes(&raw, &scenes)?;

    // An untrained generator is enough to show the data flow; pass a trained
    // checkpoint path as a second argument to see real reconstructions.
    let generator = match std::env::args().nth(2) {
        Some(p) => Generator::load(p.as_ref(), None)?,
        None => Generator::new(UNetArch::encoder(8, 2), UNetArch::decoder(8, 2), SignVector::equal_soft(4), 0)?,
    };
    let cfg = PipelineConfig {
        seed: 11,
        ..PipelineConfig::default()
    };
    let s = process_stream(&raw, &public, Mode::Deidentify, &generator, None, &cfg)?;
    println!("deidentify: {} frames, {} faces", s.frames, s.faces);
    let r = process_stream(&public, &restored, Mode::Reverse, &generator, None, &cfg)?;
    println!("reverse:    {} frames, {} faces", r.frames, r.faces);

    let name = revdeid::types::frame_file_name(0);
    let pub0 = Frame::load_png(&public.join(&name), 0)?;
    let back0 = Frame::load_png(&restored.join(&name), 0)?;
    let boxes = embedded_boxes(&pub0)?;
    println!("frame 0 boxes from the public frame: {boxes:?}");
    println!(
        "face-region MSE vs original: public {:.1}, restored {:.1}",
        region_mse(&pub0, &scenes[0].frame, &boxes)?,
        region_mse(&back0, &scenes[0].frame, &boxes)?
    );
    println!("outputs under {}", work.display());
    Ok(())
}
