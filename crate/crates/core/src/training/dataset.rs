use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{crop_roi, frame_file_name, BoundingBox, FaceCrop, Frame, LabelVector, TrackletIndex, CROP_SIZE};

/// One labelled face crop and its tracklet coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub crop: FaceCrop,
    pub labels: LabelVector,
    pub index: TrackletIndex,
}

/// An in-memory labelled face set ordered by `(subject, sequence, frame)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    t: usize,
}

/// One line of `labels.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub subject: u32,
    pub sequence: u32,
    pub frame: u32,
    pub labels: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<[u32; 4]>>,
}

impl Dataset {
    pub fn new(mut samples: Vec<Sample>, t: usize) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.labels.len() != t) {
            return Err(Error::Contract(format!(
                "sample {:?} has {} labels, expected {t}",
                s.index,
                s.labels.len()
            )));
        }
        samples.sort_by_key(|s| s.index);
        for pair in samples.windows(2) {
            if pair[0].index == pair[1].index {
                return Err(Error::Contract(format!("duplicate tracklet index {:?}", pair[0].index)));
            }
        }
        Ok(Dataset { samples, t })
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn get(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    pub fn subjects(&self) -> BTreeSet<u32> {
        self.samples.iter().map(|s| s.index.subject).collect()
    }

    /// Sample positions grouped by `(subject, sequence)`.
    pub fn sequences(&self) -> BTreeMap<(u32, u32), Vec<usize>> {
        let mut out: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            out.entry((s.index.subject, s.index.sequence)).or_default().push(i);
        }
        out
    }

    /// Distinct values observed for attribute `m`.
    pub fn categories(&self, m: usize) -> BTreeSet<u32> {
        self.samples.iter().map(|s| s.labels.0[m]).collect()
    }

    /// Keeps the samples whose subject satisfies `keep`.
    pub fn filter_subjects(&self, keep: impl Fn(u32) -> bool) -> Dataset {
        Dataset {
            samples: self.samples.iter().filter(|s| keep(s.index.subject)).cloned().collect(),
            t: self.t,
        }
    }

    /// Keeps only the attributes at `labels`, in that order.
    pub fn project_labels(&self, labels: &[usize]) -> Result<Dataset> {
        if labels.is_empty() || labels.iter().any(|&m| m >= self.t) {
            return Err(Error::Config(format!("label selection {labels:?} out of range for t={}", self.t)));
        }
        let samples = self
            .samples
            .iter()
            .map(|s| Sample {
                labels: LabelVector(labels.iter().map(|&m| s.labels.0[m]).collect()),
                ..s.clone()
            })
            .collect();
        Ok(Dataset {
            samples,
            t: labels.len(),
        })
    }

    fn frame_path(root: &Path, idx: &TrackletIndex) -> PathBuf {
        root.join("subjects")
            .join(idx.subject.to_string())
            .join("sequences")
            .join(idx.sequence.to_string())
            .join(frame_file_name(idx.frame as usize))
    }

    /// Writes `subjects/<i>/sequences/<j>/frame_<k>.png` plus `labels.jsonl`.
    pub fn save(&self, root: &Path) -> Result<()> {
        let mut lines = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let path = Self::frame_path(root, &s.index);
            let dir = path.parent().expect("frame path has a parent");
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Frame::new(s.crop.to_image(), s.index.frame as u64)?.save_png(&path)?;
            let record = LabelRecord {
                subject: s.index.subject,
                sequence: s.index.sequence,
                frame: s.index.frame,
                labels: s.labels.0.clone(),
                boxes: Some(vec![[0, 0, CROP_SIZE as u32, CROP_SIZE as u32]]),
            };
            lines.push(serde_json::to_string(&record).map_err(|source| Error::Json {
                context: "labels.jsonl".into(),
                source,
            })?);
        }
        let labels = root.join("labels.jsonl");
        let mut f = fs::File::create(&labels).map_err(|e| Error::io(&labels, e))?;
        for line in lines {
            writeln!(f, "{line}").map_err(|e| Error::io(&labels, e))?;
        }
        Ok(())
    }

    /// Reads a dataset written by [`Dataset::save`]. When a record carries
    /// boxes, the first box is cropped; otherwise the whole frame is used.
    pub fn load(root: &Path) -> Result<Self> {
        let labels = root.join("labels.jsonl");
        let f = fs::File::open(&labels).map_err(|e| Error::io(&labels, e))?;
        let mut samples = Vec::new();
        let mut t = None;
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&labels, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: LabelRecord = serde_json::from_str(&line).map_err(|source| Error::Json {
                context: format!("{} line {}", labels.display(), n + 1),
                source,
            })?;
            let idx = TrackletIndex::new(rec.subject, rec.sequence, rec.frame);
            let frame = Frame::load_png(&Self::frame_path(root, &idx), rec.frame as u64)?;
            let bbox = match rec.boxes.as_ref().and_then(|b| b.first()) {
                Some(&[x, y, w, h]) => BoundingBox::new(x, y, w, h),
                None => BoundingBox::new(0, 0, frame.width(), frame.height()),
            };
            if *t.get_or_insert(rec.labels.len()) != rec.labels.len() {
                return Err(Error::Contract(format!("{}: inconsistent label count on line {}", labels.display(), n + 1)));
            }
            samples.push(Sample {
                crop: crop_roi(&frame, &bbox)?,
                labels: LabelVector(rec.labels),
                index: idx,
            });
        }
        Dataset::new(samples, t.unwrap_or(4))
    }
}
