//! Public de-identification and privileged reversal of frame streams.
//!
//! De-identification detects faces, replaces each box with the generator's
//! anonymised face and hides the box list in the blue LSBs. Reversal reads
//! only the public frame: it extracts the boxes, decodes each region and
//! pastes the reconstructions back in the same order.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::stego::{decode_message, embed, encode_message, extract};
use crate::training::{compose_scene, Dataset, Generator};
use crate::types::{crop_roi, frame_file_name, paste_roi, BoundingBox, FaceCrop, Frame};

/// Anything that finds faces in a frame.
pub trait Detector {
    fn detect(&self, frame: &Frame) -> Result<Vec<Detection>>;
}

/// Replays known boxes, keyed by frame id. Stands in for a real head
/// detector on synthetic streams.
#[derive(Clone, Debug, Default)]
pub struct OracleDetector {
    boxes: BTreeMap<u64, Vec<Detection>>,
}

#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    frame: u64,
    file: String,
    boxes: Vec<BoundingBox>,
    confidences: Vec<f64>,
}

pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

impl OracleDetector {
    pub fn new(boxes: BTreeMap<u64, Vec<Detection>>) -> Self {
        OracleDetector { boxes }
    }

    /// Reads `detections.jsonl` (one `{frame, file, boxes, confidences}`
    /// object per line).
    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut boxes = BTreeMap::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DetectionRecord = serde_json::from_str(&line).map_err(|source| Error::Json {
                context: format!("{}:{}", path.display(), n + 1),
                source,
            })?;
            if rec.boxes.len() != rec.confidences.len() {
                return Err(Error::Config(format!(
                    "{}:{}: {} boxes but {} confidences",
                    path.display(),
                    n + 1,
                    rec.boxes.len(),
                    rec.confidences.len()
                )));
            }
            let dets = rec
                .boxes
                .into_iter()
                .zip(rec.confidences)
                .map(|(bbox, confidence)| Detection { bbox, confidence })
                .collect();
            boxes.insert(rec.frame, dets);
        }
        Ok(OracleDetector { boxes })
    }
}

impl Detector for OracleDetector {
    fn detect(&self, frame: &Frame) -> Result<Vec<Detection>> {
        Ok(self.boxes.get(&frame.frame_id).cloned().unwrap_or_default())
    }
}

/// A frame whose faces were replaced and whose box list is embedded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PublicFrame {
    pub frame: Frame,
    /// Boxes in the order they were pasted (and serialised).
    pub boxes: Vec<BoundingBox>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Fraction of the box size added on every side before cropping.
    pub box_expansion: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            box_expansion: 0.0,
        }
    }
}

/// Per-face noise seed, stable across runs for a given stream seed.
fn face_seed(seed: u64, frame_id: u64, k: usize) -> u64 {
    let mut z = seed ^ frame_id.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (k as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Detect, anonymise and paste every face, then embed the box list.
pub fn deidentify_frame(
    frame: &Frame,
    detector: &dyn Detector,
    generator: &Generator,
    config: &PipelineConfig,
) -> Result<PublicFrame> {
    let id = frame.frame_id;
    let detections = detector.detect(frame).map_err(|e| match e {
        Error::Detector { .. } => e,
        other => Error::Detector {
            frame_id: id,
            reason: other.to_string(),
        },
    })?;
    let mut boxes = Vec::with_capacity(detections.len());
    for d in &detections {
        if !(0.0..=1.0).contains(&d.confidence) {
            return Err(Error::Detector {
                frame_id: id,
                reason: format!("confidence {} outside [0,1]", d.confidence),
            });
        }
        d.bbox.validate(frame.width(), frame.height()).map_err(|e| Error::Detector {
            frame_id: id,
            reason: e.to_string(),
        })?;
        boxes.push(d.bbox.expand(config.box_expansion, frame.width(), frame.height()));
    }
    let crops = boxes.iter().map(|b| crop_roi(frame, b)).collect::<Result<Vec<_>>>()?;
    let seeds: Vec<u64> = (0..boxes.len()).map(|k| face_seed(config.seed, id, k)).collect();
    let faces = if crops.is_empty() {
        Vec::new()
    } else {
        generator.deidentify(&crops.iter().collect::<Vec<_>>(), &seeds)?
    };
    let mut out = frame.clone();
    for (b, face) in boxes.iter().zip(&faces) {
        out = paste_roi(&out, b, face)?;
    }
    let out = embed(&out, &encode_message(&boxes))?;
    Ok(PublicFrame { frame: out, boxes })
}

/// Boxes embedded in a public frame.
pub fn embedded_boxes(public: &Frame) -> Result<Vec<BoundingBox>> {
    decode_message(&extract(public)?)
}

/// Reconstructs the original faces of a public frame. Uses nothing but the
/// frame itself and the decoder.
pub fn reverse_frame(public: &Frame, generator: &Generator) -> Result<Frame> {
    let boxes = embedded_boxes(public)?;
    let crops = boxes.iter().map(|b| crop_roi(public, b)).collect::<Result<Vec<_>>>()?;
    if crops.is_empty() {
        return Ok(public.clone());
    }
    let recon = generator.reconstruct(&crops.iter().collect::<Vec<_>>())?;
    let mut out = public.clone();
    for (b, r) in boxes.iter().zip(&recon) {
        out = paste_roi(&out, b, r)?;
    }
    Ok(out)
}

/// Mean squared difference in `[0,255]` units over the union of `boxes`.
pub fn region_mse(a: &Frame, b: &Frame, boxes: &[BoundingBox]) -> Result<f64> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::Contract("region_mse: frame sizes differ".into()));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..a.height() {
        for x in 0..a.width() {
            if boxes.iter().any(|bb| bb.contains(x, y)) {
                let (p, q) = (a.get(x, y), b.get(x, y));
                sum += (0..3).map(|c| (p[c] as f64 - q[c] as f64).powi(2)).sum::<f64>();
                n += 3;
            }
        }
    }
    if n == 0 {
        return Err(Error::UndefinedStatistic("region_mse over an empty region".into()));
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Deidentify,
    Reverse,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Deidentify => "deidentify",
            Mode::Reverse => "reverse",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deidentify" => Ok(Mode::Deidentify),
            "reverse" => Ok(Mode::Reverse),
            _ => Err(Error::Config(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedFrame {
    pub file: String,
    pub error: String,
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSummary {
    /// Frames written to the output directory.
    pub frames: usize,
    /// Face boxes de-identified or reconstructed.
    pub faces: usize,
    pub failed_frames: Vec<FailedFrame>,
    pub mode: Mode,
    pub checkpoint_fingerprint: String,
}

/// PNG files of `dir` in name order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Applies `mode` to every frame of `in_dir` and writes the results plus
/// `summary.json` to `out_dir`. Frame ids are positions in name order. In
/// deidentify mode without an explicit detector, `in_dir/detections.jsonl`
/// is replayed.
pub fn process_stream(
    in_dir: &Path,
    out_dir: &Path,
    mode: Mode,
    generator: &Generator,
    detector: Option<&dyn Detector>,
    config: &PipelineConfig,
) -> Result<StreamSummary> {
    let files = list_frames(in_dir)?;
    let oracle;
    let detector = match (mode, detector) {
        (Mode::Deidentify, None) => {
            oracle = OracleDetector::load(&in_dir.join(DETECTIONS_FILE))?;
            Some(&oracle as &dyn Detector)
        }
        (_, d) => d,
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut summary = StreamSummary {
        frames: 0,
        faces: 0,
        failed_frames: Vec::new(),
        mode,
        checkpoint_fingerprint: generator.fingerprint(),
    };
    for (k, path) in files.iter().enumerate() {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let result = Frame::load_png(path, k as u64).and_then(|frame| match mode {
            Mode::Deidentify => {
                let public = deidentify_frame(&frame, detector.expect("set above"), generator, config)?;
                Ok((public.frame, public.boxes.len()))
            }
            Mode::Reverse => {
                let n = embedded_boxes(&frame)?.len();
                Ok((reverse_frame(&frame, generator)?, n))
            }
        });
        match result.and_then(|(out, n)| out.save_png(&out_dir.join(&name)).map(|_| n)) {
            Ok(n) => {
                summary.frames += 1;
                summary.faces += n;
            }
            Err(e) => {
                warn!("{mode}: skipping {name}: {e}");
                summary.failed_frames.push(FailedFrame {
                    file: name,
                    error: e.to_string(),
                });
            }
        }
    }
    let json = serde_json::to_string_pretty(&summary).map_err(|source| Error::Json {
        context: SUMMARY_FILE.into(),
        source,
    })?;
    let path = out_dir.join(SUMMARY_FILE);
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    info!(
        "{mode}: {} frames, {} faces, {} failed",
        summary.frames,
        summary.faces,
        summary.failed_frames.len()
    );
    Ok(summary)
}

/// One synthetic scene: a frame with faces pasted at known boxes.
#[derive(Clone, Debug)]
pub struct Scene {
    pub frame: Frame,
    pub boxes: Vec<BoundingBox>,
    /// Dataset positions of the pasted faces, aligned with `boxes`.
    pub samples: Vec<usize>,
}

/// `count` scenes of `width × height` holding one or two dataset faces each,
/// placed in disjoint halves of the frame.
pub fn synthetic_scenes(dataset: &Dataset, count: usize, width: u32, height: u32, seed: u64) -> Result<Vec<Scene>> {
    if dataset.is_empty() {
        return Err(Error::Config("synthetic scenes need a non-empty dataset".into()));
    }
    let side_max = (width / 2).min(height);
    if side_max < 32 {
        return Err(Error::Config(format!("a {width}x{height} scene cannot hold a 32 px face per half")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scenes = Vec::with_capacity(count);
    for k in 0..count {
        let faces = rng.random_range(1..=2u32);
        let mut boxes = Vec::new();
        let mut samples = Vec::new();
        for half in 0..faces {
            let s = rng.random_range(32..=side_max.min(72));
            let x0 = half * width / 2;
            let x = x0 + rng.random_range(0..=width / 2 - s);
            let y = rng.random_range(0..=height - s);
            boxes.push(BoundingBox::new(x, y, s, s));
            samples.push(rng.random_range(0..dataset.len()));
        }
        let pairs: Vec<(&FaceCrop, BoundingBox)> =
            samples.iter().zip(&boxes).map(|(&i, &b)| (&dataset.get(i).crop, b)).collect();
        let frame = compose_scene(&pairs, width, height, k as u64)?;
        scenes.push(Scene { frame, boxes, samples });
    }
    Ok(scenes)
}

/// Writes scenes as `frame_NNNNNN.png` plus the oracle `detections.jsonl`.
pub fn write_scenes(dir: &Path, scenes: &[Scene]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(DETECTIONS_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for (k, s) in scenes.iter().enumerate() {
        let file = frame_file_name(k);
        s.frame.save_png(&dir.join(&file))?;
        let rec = DetectionRecord {
            frame: k as u64,
            file,
            boxes: s.boxes.clone(),
            confidences: vec![1.0; s.boxes.len()],
        };
        let line = serde_json::to_string(&rec).map_err(|source| Error::Json {
            context: DETECTIONS_FILE.into(),
            source,
        })?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
