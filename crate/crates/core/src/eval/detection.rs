//! Box overlap and ranked detection precision.

use crate::error::{Error, Result};
use crate::types::BoundingBox;

/// Intersection over union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = a.right().min(b.right()).saturating_sub(a.x.max(b.x) as u64);
    let iy = a.bottom().min(b.bottom()).saturating_sub(a.y.max(b.y) as u64);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

/// One scored detection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub confidence: f64,
}

/// All-point interpolated average precision of one image: detections are
/// ranked by confidence and greedily matched one-to-one to the unmatched
/// ground-truth box of highest overlap.
pub fn average_precision(detections: &[Detection], truth: &[BoundingBox], iou_threshold: f64) -> f64 {
    if truth.is_empty() || detections.is_empty() {
        return 0.0;
    }
    let mut ranked: Vec<&Detection> = detections.iter().collect();
    ranked.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut matched = vec![false; truth.len()];
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(ranked.len());
    for (rank, det) in ranked.iter().enumerate() {
        let best = truth
            .iter()
            .enumerate()
            .filter(|(g, _)| !matched[*g])
            .map(|(g, t)| (g, iou(&det.bbox, t)))
            .filter(|&(_, o)| o >= iou_threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((g, _)) = best {
            matched[g] = true;
            tp += 1;
        }
        points.push((tp as f64 / truth.len() as f64, tp as f64 / (rank + 1) as f64));
    }
    // Precision envelope, then area under the recall steps.
    for k in (0..points.len().saturating_sub(1)).rev() {
        points[k].1 = points[k].1.max(points[k + 1].1);
    }
    let mut ap = 0.0;
    let mut last_recall = 0.0;
    for (recall, precision) in points {
        ap += (recall - last_recall) * precision;
        last_recall = recall;
    }
    ap
}

/// Mean of [`average_precision`] over images. Images with neither
/// detections nor ground truth are skipped.
pub fn mean_average_precision(
    detections: &[Vec<Detection>],
    truth: &[Vec<BoundingBox>],
    iou_threshold: f64,
) -> Result<f64> {
    if detections.len() != truth.len() {
        return Err(Error::Contract(format!(
            "mAP: {} detection lists for {} images",
            detections.len(),
            truth.len()
        )));
    }
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(Error::Config(format!("IoU threshold must lie in (0,1), got {iou_threshold}")));
    }
    let aps: Vec<f64> = detections
        .iter()
        .zip(truth)
        .filter(|(d, t)| !(d.is_empty() && t.is_empty()))
        .map(|(d, t)| average_precision(d, t, iou_threshold))
        .collect();
    if aps.is_empty() {
        return Err(Error::UndefinedStatistic("mAP over images without boxes".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}
