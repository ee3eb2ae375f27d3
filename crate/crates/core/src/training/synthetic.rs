//! Procedurally rendered faces for desk-scale experiments. Identity fixes
//! the facial geometry and colouring; the soft labels each drive their own
//! visual channel; sequences change background and lighting; frames add
//! small pose and illumination jitter.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::types::{paste_roi_in_place, BoundingBox, FaceCrop, Frame, LabelVector, TrackletIndex, CROP_SIZE};

use super::dataset::{Dataset, Sample};

/// Dataset shape. `categories[m]` is the number of values of soft label
/// `m + 1` (label 0 is the identity), so `t = categories.len() + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub subjects: usize,
    pub sequences_per_subject: usize,
    pub frames_per_sequence: usize,
    pub categories: Vec<u32>,
}

impl Default for SyntheticSpec {
    /// 40 subjects × 2 sequences × 8 frames; gender 2, ethnicity 3, hairstyle 3.
    fn default() -> Self {
        SyntheticSpec {
            subjects: 40,
            sequences_per_subject: 2,
            frames_per_sequence: 8,
            categories: vec![2, 3, 3],
        }
    }
}

impl SyntheticSpec {
    /// Default shape with label count `t` (4 or 5; 5 adds an age label).
    pub fn with_t(t: usize) -> Result<Self> {
        let categories = match t {
            4 => vec![2, 3, 3],
            5 => vec![2, 3, 3, 3],
            _ => return Err(Error::Config(format!("synthetic data supports t of 4 or 5, got {t}"))),
        };
        Ok(SyntheticSpec {
            categories,
            ..Self::default()
        })
    }

    pub fn t(&self) -> usize {
        self.categories.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 || self.sequences_per_subject == 0 || self.frames_per_sequence == 0 {
            return Err(Error::Config("synthetic dataset dimensions must be positive".into()));
        }
        if !(3..=4).contains(&self.categories.len()) {
            return Err(Error::Config("synthetic data supports 3 or 4 soft labels".into()));
        }
        if let Some(c) = self.categories.iter().find(|&&c| !(2..=4).contains(&c)) {
            return Err(Error::Config(format!("soft label category counts must be in 2..=4, got {c}")));
        }
        Ok(())
    }
}

const SKIN: [[f32; 3]; 4] = [
    [236.0, 201.0, 172.0],
    [192.0, 140.0, 100.0],
    [112.0, 74.0, 50.0],
    [222.0, 184.0, 120.0],
];

const HAIR: [[f32; 3]; 5] = [
    [30.0, 22.0, 18.0],
    [90.0, 56.0, 30.0],
    [150.0, 105.0, 55.0],
    [210.0, 180.0, 110.0],
    [120.0, 40.0, 25.0],
];

/// Identity-level appearance.
#[derive(Clone, Debug)]
struct Subject {
    labels: Vec<u32>,
    /// Strength of the lower-face shading, set by the gender label.
    beard: f32,
    radius_x: f32,
    radius_y: f32,
    skin: [f32; 3],
    hair: [f32; 3],
    iris: [f32; 3],
    eye_dx: f32,
    eye_y: f32,
    eye_r: f32,
    brow_lift: f32,
    brow_tilt: f32,
    nose_len: f32,
    mouth_w: f32,
    mouth_y: f32,
    mole: Option<(f32, f32)>,
}

/// Sequence-level conditions.
#[derive(Clone, Debug)]
struct Session {
    background: [f32; 3],
    gain: f32,
    light_slope: f32,
    dx: f32,
    dy: f32,
    scale: f32,
}

fn lerp(a: f32, b: f32, f: f32) -> f32 {
    a + (b - a) * f
}

fn category_fraction(value: u32, count: u32) -> f32 {
    value as f32 / (count - 1).max(1) as f32
}

impl Subject {
    fn new(labels: Vec<u32>, categories: &[u32], rng: &mut ChaCha8Rng) -> Self {
        let gender = category_fraction(labels[1], categories[0]);
        let width = lerp(18.5, 14.5, gender) + rng.random_range(-0.8..0.8);
        let height = lerp(21.0, 23.0, gender) + rng.random_range(-0.8..0.8);
        let palette = SKIN[labels[2] as usize % SKIN.len()];
        let skin = palette.map(|c| c + rng.random_range(-10.0..10.0));
        let hair = HAIR[rng.random_range(0..HAIR.len())].map(|c| c + rng.random_range(-12.0..12.0));
        let iris = [
            rng.random_range(20.0..160.0),
            rng.random_range(40.0..170.0),
            rng.random_range(30.0..200.0),
        ];
        Subject {
            labels,
            beard: 1.0 - gender,
            radius_x: width,
            radius_y: height,
            skin,
            hair,
            iris,
            eye_dx: rng.random_range(6.5..10.5),
            eye_y: rng.random_range(-7.0..-2.5),
            eye_r: rng.random_range(1.6..3.0),
            brow_lift: rng.random_range(2.5..4.5),
            brow_tilt: rng.random_range(-0.35..0.35),
            nose_len: rng.random_range(4.0..9.0),
            mouth_w: rng.random_range(4.0..7.5),
            mouth_y: rng.random_range(9.0..13.5),
            mole: rng.random_bool(0.5).then(|| (rng.random_range(-10.0..10.0), rng.random_range(-2.0..8.0))),
        }
    }

    fn hairstyle(&self) -> u32 {
        self.labels[3]
    }

    fn age(&self) -> Option<u32> {
        self.labels.get(4).copied()
    }

    /// Colour at face-centred coordinates `(u, v)`, or `None` for background.
    fn shade(&self, u: f32, v: f32) -> Option<[f32; 3]> {
        let (rx, ry) = (self.radius_x, self.radius_y);
        let face = (u / rx).powi(2) + (v / ry).powi(2);
        let hair = match self.age() {
            Some(a) if a >= 2 => self.hair.map(|c| lerp(c, 185.0, 0.7)),
            _ => self.hair,
        };
        let cap_short = (u / (rx + 1.5)).powi(2) + ((v + 2.0) / (ry + 3.0)).powi(2) <= 1.0 && v < -ry * 0.55;
        let cap_full = (u / (rx + 2.5)).powi(2) + ((v + 1.0) / (ry + 4.0)).powi(2) <= 1.0 && v < -ry * 0.45;
        // Style 0 is bald; 1 long hair falling beside the face; 2 a bun on
        // top; 3 a fringe over the forehead.
        let covered = match self.hairstyle() {
            0 => false,
            1 => cap_full || (face > 1.0 && u.abs() <= rx + 6.0 && v > -ry * 0.5),
            2 => cap_short || u * u + (v + ry + 5.0).powi(2) <= 81.0,
            _ => cap_full || (v < -ry * 0.3 && face <= 1.0),
        };
        if covered {
            return Some(hair);
        }
        if face > 1.0 {
            return None;
        }
        let mut c = self.skin;
        // Shading darkens toward the jaw line.
        let rim = 1.0 - 0.18 * face.powi(3);
        c = c.map(|x| x * rim);
        if let Some(age) = self.age() {
            for k in 0..age {
                let line_v = -ry * 0.55 + 2.5 * k as f32;
                if (v - line_v).abs() < 0.5 && u.abs() < rx * 0.5 {
                    c = c.map(|x| x * 0.8);
                }
            }
        }
        for side in [-1.0f32, 1.0] {
            let ex = u - side * self.eye_dx;
            let ey = v - self.eye_y;
            let d2 = ex * ex + ey * ey;
            let r = self.eye_r;
            if d2 <= (0.55 * r).powi(2) {
                return Some([15.0, 12.0, 12.0]);
            }
            if d2 <= r * r {
                return Some(self.iris);
            }
            if (ex / (r + 1.6)).powi(2) + (ey / (r + 0.4)).powi(2) <= 1.0 {
                return Some([245.0, 245.0, 240.0]);
            }
            let brow_v = self.eye_y - r - self.brow_lift + side * self.brow_tilt * ex;
            if ex.abs() <= r + 2.0 && (v - brow_v).abs() <= 0.8 {
                return Some(hair.map(|x| x * 0.8));
            }
        }
        if u > -1.2 && u < 0.8 && v > self.eye_y + 2.0 && v < self.eye_y + 2.0 + self.nose_len {
            c = c.map(|x| x * 0.78);
        }
        if self.beard > 0.0 && v > self.mouth_y - 4.0 {
            c = [0, 1, 2].map(|i| lerp(c[i], [45.0, 40.0, 38.0][i], 0.85 * self.beard));
        }
        let blush = 1.0 - self.beard;
        if blush > 0.0 && (u.abs() - rx * 0.55).powi(2) + (v - 3.0).powi(2) <= 9.0 {
            c = [0, 1, 2].map(|i| lerp(c[i], [235.0, 90.0, 130.0][i], 0.8 * blush));
        }
        if (u / self.mouth_w).powi(2) + ((v - self.mouth_y) / 1.4).powi(2) <= 1.0 {
            return Some([175.0, 62.0, 68.0]);
        }
        if let Some((mx, my)) = self.mole {
            if (u - mx).powi(2) + (v - my).powi(2) <= 1.0 {
                return Some([70.0, 45.0, 35.0]);
            }
        }
        Some(c)
    }
}

impl Session {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        Session {
            background: [
                rng.random_range(30.0..225.0),
                rng.random_range(30.0..225.0),
                rng.random_range(30.0..225.0),
            ],
            gain: rng.random_range(0.85..1.15),
            light_slope: rng.random_range(-0.25..0.25),
            dx: rng.random_range(-2.5..2.5),
            dy: rng.random_range(-2.0..2.0),
            scale: rng.random_range(0.94..1.06),
        }
    }
}

fn render(subject: &Subject, session: &Session, rng: &mut ChaCha8Rng) -> FaceCrop {
    let dx = session.dx + rng.random_range(-1.0..1.0);
    let dy = session.dy + rng.random_range(-1.0..1.0);
    let gain = session.gain * rng.random_range(0.97..1.03);
    let scale = session.scale * rng.random_range(0.98..1.02);
    let noise = Normal::new(0.0f32, 2.0).expect("finite std");
    let (cx, cy) = (31.5 + dx, 33.0 + dy);
    let mut data = Vec::with_capacity(CROP_SIZE * CROP_SIZE * 3);
    for py in 0..CROP_SIZE {
        for px in 0..CROP_SIZE {
            let u = (px as f32 - cx) / scale;
            let v = (py as f32 - cy) / scale;
            let light = gain * (1.0 + session.light_slope * (px as f32 - 31.5) / 32.0);
            let base = subject.shade(u, v).map(|c| c.map(|x| x * light)).unwrap_or(session.background);
            for c in base {
                let value = (c + noise.sample(rng)).round().clamp(0.0, 255.0);
                data.push(value / 255.0);
            }
        }
    }
    FaceCrop::from_hwc(data).expect("rendered crop has 64x64x3 values")
}

/// Balanced label assignment: every category appears once the subject count
/// reaches the category count.
fn assign_labels(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<u32>> {
    let mut columns = Vec::with_capacity(spec.categories.len());
    for &count in &spec.categories {
        let mut col: Vec<u32> = (0..spec.subjects).map(|i| i as u32 % count).collect();
        col.shuffle(rng);
        columns.push(col);
    }
    (0..spec.subjects)
        .map(|i| {
            let mut labels = vec![i as u32];
            labels.extend(columns.iter().map(|c| c[i]));
            labels
        })
        .collect()
}

/// Renders `subjects × sequences × frames` labelled crops; identical for the same seed.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = assign_labels(spec, &mut rng);
    let mut samples = Vec::with_capacity(spec.subjects * spec.sequences_per_subject * spec.frames_per_sequence);
    for (i, labels) in labels.into_iter().enumerate() {
        let mut subject_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let subject = Subject::new(labels, &spec.categories, &mut subject_rng);
        for j in 0..spec.sequences_per_subject {
            let session = Session::new(&mut subject_rng);
            for k in 0..spec.frames_per_sequence {
                samples.push(Sample {
                    crop: render(&subject, &session, &mut subject_rng),
                    labels: LabelVector(subject.labels.clone()),
                    index: TrackletIndex::new(i as u32, j as u32, k as u32),
                });
            }
        }
    }
    Dataset::new(samples, spec.t())
}

/// Builds a `width × height` frame with a smooth background and each face
/// resampled into its box.
pub fn compose_scene(faces: &[(&FaceCrop, BoundingBox)], width: u32, height: u32, frame_id: u64) -> Result<Frame> {
    let mut rng = ChaCha8Rng::seed_from_u64(frame_id ^ 0xBAC6_0A11);
    let base: [f32; 3] = [
        rng.random_range(40.0..200.0),
        rng.random_range(40.0..200.0),
        rng.random_range(40.0..200.0),
    ];
    let mut frame = Frame::filled(width.max(1), height.max(1), [0, 0, 0], frame_id)?;
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            let f = (x + y) as f32 / (width + height) as f32;
            let rgb = base.map(|c| (c * (0.8 + 0.4 * f)).clamp(0.0, 255.0) as u8);
            frame.set(x, y, rgb);
        }
    }
    for (crop, bbox) in faces {
        paste_roi_in_place(&mut frame, bbox, crop)?;
    }
    Ok(frame)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            subjects: 6,
            sequences_per_subject: 2,
            frames_per_sequence: 3,
            categories: vec![2, 3, 3],
        }
    }

    #[test]
    fn counts_and_ids() {
        let spec = SyntheticSpec::default();
        let ds = generate_synthetic_dataset(&spec, 1).unwrap();
        assert_eq!(ds.len(), 640);
        assert_eq!(ds.subjects().len(), 40);
        for m in 1..4 {
            assert_eq!(ds.categories(m).len(), spec.categories[m - 1] as usize);
        }
    }

    #[test]
    fn same_seed_same_pixels() {
        let a = generate_synthetic_dataset(&small(), 7).unwrap();
        let b = generate_synthetic_dataset(&small(), 7).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(&small(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn labels_are_constant_within_subject() {
        let ds = generate_synthetic_dataset(&small(), 3).unwrap();
        for s in ds.samples() {
            let first = ds.samples().iter().find(|o| o.index.subject == s.index.subject).unwrap();
            assert_eq!(first.labels, s.labels);
            assert_eq!(s.labels.0[0], s.index.subject);
        }
    }

    #[test]
    fn t5_adds_age() {
        let ds = generate_synthetic_dataset(&SyntheticSpec::with_t(5).unwrap(), 0).unwrap();
        assert_eq!(ds.t(), 5);
        assert_eq!(ds.categories(4).len(), 3);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = small();
        spec.categories = vec![1, 3, 3];
        assert!(generate_synthetic_dataset(&spec, 0).is_err());
        spec.categories = vec![2, 3, 3];
        spec.subjects = 0;
        assert!(generate_synthetic_dataset(&spec, 0).is_err());
    }

    #[test]
    fn scene_contains_pasted_face() {
        let ds = generate_synthetic_dataset(&small(), 0).unwrap();
        let crop = &ds.get(0).crop;
        let bbox = BoundingBox::new(10, 20, 64, 64);
        let frame = compose_scene(&[(crop, bbox)], 160, 120, 5).unwrap();
        let back = crate::types::crop_roi(&frame, &bbox).unwrap();
        assert!(back.mean_squared_error(crop) < 1e-5);
    }
}
