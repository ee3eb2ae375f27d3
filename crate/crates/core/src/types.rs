//! Shared domain types, region arithmetic and colour histograms.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Side length of every face crop fed to the networks.
pub const CROP_SIZE: usize = 64;
/// Values in one crop (`64 * 64 * 3`).
pub const CROP_LEN: usize = CROP_SIZE * CROP_SIZE * 3;
/// Smallest frame side accepted by the pipeline.
pub const MIN_FRAME_SIDE: u32 = 64;

/// File name used for frame `k` inside a sequence directory.
pub fn frame_file_name(k: usize) -> String {
    format!("frame_{k:06}.png")
}

/// An 8-bit RGB video frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pixels: RgbImage,
    pub frame_id: u64,
}

impl Frame {
    pub fn new(pixels: RgbImage, frame_id: u64) -> Result<Self> {
        if pixels.width() < MIN_FRAME_SIDE || pixels.height() < MIN_FRAME_SIDE {
            return Err(Error::Contract(format!(
                "frame is {}x{}, both sides must be at least {MIN_FRAME_SIDE}",
                pixels.width(),
                pixels.height()
            )));
        }
        Ok(Frame { pixels, frame_id })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3], frame_id: u64) -> Result<Self> {
        Frame::new(RgbImage::from_pixel(width, height, image::Rgb(rgb)), frame_id)
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    pub fn image(&self) -> &RgbImage {
        &self.pixels
    }

    pub fn image_mut(&mut self) -> &mut RgbImage {
        &mut self.pixels
    }

    /// Interleaved RGB bytes, row-major.
    pub fn raw(&self) -> &[u8] {
        self.pixels.as_raw()
    }

    pub fn raw_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        self.pixels.get_pixel(x, y).0
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        self.pixels.put_pixel(x, y, image::Rgb(rgb));
    }

    pub fn load_png(path: &Path, frame_id: u64) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Frame::new(img.to_rgb8(), frame_id)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.pixels
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

/// Axis-aligned box: top-left corner plus width and height, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BoundingBox {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        BoundingBox { x, y, w, h }
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn right(&self) -> u64 {
        self.x as u64 + self.w as u64
    }

    pub fn bottom(&self) -> u64 {
        self.y as u64 + self.h as u64
    }

    pub fn contains(&self, px: u32, py: u32) -> bool {
        px >= self.x && (px as u64) < self.right() && py >= self.y && (py as u64) < self.bottom()
    }

    /// Checks `w, h >= 1` and that the box lies inside a `frame_w x frame_h` frame.
    pub fn validate(&self, frame_w: u32, frame_h: u32) -> Result<()> {
        if self.w == 0 || self.h == 0 || self.right() > frame_w as u64 || self.bottom() > frame_h as u64 {
            return Err(Error::Bounds {
                x: self.x,
                y: self.y,
                w: self.w,
                h: self.h,
                frame_w,
                frame_h,
            });
        }
        Ok(())
    }

    /// Grows the box by `factor` of its size on every side, clipped to the
    /// frame. A factor of 0 returns the box unchanged.
    pub fn expand(&self, factor: f64, frame_w: u32, frame_h: u32) -> BoundingBox {
        if factor <= 0.0 {
            return *self;
        }
        let dx = (self.w as f64 * factor).round() as i64;
        let dy = (self.h as f64 * factor).round() as i64;
        let x0 = (self.x as i64 - dx).max(0);
        let y0 = (self.y as i64 - dy).max(0);
        let x1 = (self.right() as i64 + dx).min(frame_w as i64);
        let y1 = (self.bottom() as i64 + dy).min(frame_h as i64);
        BoundingBox::new(x0 as u32, y0 as u32, (x1 - x0) as u32, (y1 - y0) as u32)
    }
}

/// A 64×64 RGB face crop, channel-last, values in `[0, 1]`.
#[derive(Clone, PartialEq)]
pub struct FaceCrop {
    data: Vec<f32>,
}

impl fmt::Debug for FaceCrop {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mean = self.data.iter().sum::<f32>() / CROP_LEN as f32;
        write!(f, "FaceCrop {{ mean: {mean:.4} }}")
    }
}

impl FaceCrop {
    /// Values are clamped into `[0, 1]`; `data` must hold exactly 64·64·3 values.
    pub fn from_hwc(data: Vec<f32>) -> Result<Self> {
        if data.len() != CROP_LEN {
            return Err(Error::Contract(format!("face crop needs {CROP_LEN} values, got {}", data.len())));
        }
        let data = data.into_iter().map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }).collect();
        Ok(FaceCrop { data })
    }

    pub fn filled(value: f32) -> Self {
        FaceCrop {
            data: vec![value.clamp(0.0, 1.0); CROP_LEN],
        }
    }

    pub fn hwc(&self) -> &[f32] {
        &self.data
    }

    /// Value at row `y`, column `x`, channel `c`.
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * CROP_SIZE + x) * 3 + c]
    }

    /// Channel-first copy (`[3, 64, 64]` flattened).
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = CROP_SIZE * CROP_SIZE;
        let mut out = vec![0.0; CROP_LEN];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = px[c];
            }
        }
        out
    }

    pub fn from_chw(chw: &[f32]) -> Result<Self> {
        if chw.len() != CROP_LEN {
            return Err(Error::Contract(format!("face crop needs {CROP_LEN} values, got {}", chw.len())));
        }
        let plane = CROP_SIZE * CROP_SIZE;
        let mut hwc = vec![0.0; CROP_LEN];
        for p in 0..plane {
            for c in 0..3 {
                hwc[p * 3 + c] = chw[c * plane + p];
            }
        }
        FaceCrop::from_hwc(hwc)
    }

    /// Stacks crops into an NCHW tensor.
    pub fn batch_tensor(crops: &[&FaceCrop]) -> Tensor {
        let mut data = Vec::with_capacity(crops.len() * CROP_LEN);
        for c in crops {
            data.extend(c.to_chw());
        }
        Tensor::from_vec(&[crops.len(), 3, CROP_SIZE, CROP_SIZE], data)
    }

    /// Splits an `[N, 3, 64, 64]` tensor back into crops.
    pub fn from_batch_tensor(t: &Tensor) -> Result<Vec<FaceCrop>> {
        if t.shape().len() != 4 || t.shape()[1..] != [3, CROP_SIZE, CROP_SIZE] {
            return Err(Error::Contract(format!("expected [N,3,64,64], got {:?}", t.shape())));
        }
        t.data().chunks_exact(CROP_LEN).map(FaceCrop::from_chw).collect()
    }

    /// Quantises to an 8-bit RGB image of the crop's own size.
    pub fn to_image(&self) -> RgbImage {
        RgbImage::from_fn(CROP_SIZE as u32, CROP_SIZE as u32, |x, y| {
            let px = |c| quantize(self.at(y as usize, x as usize, c));
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn mean_squared_error(&self, other: &FaceCrop) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / CROP_LEN as f64
    }
}

pub(crate) fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Ground-truth attributes in the fixed order (ID, gender, ethnicity,
/// hairstyle[, age]).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelVector(pub Vec<u32>);

impl LabelVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Names of the attributes in label order.
pub const ATTRIBUTE_NAMES: [&str; 5] = ["id", "gender", "ethnicity", "hairstyle", "age"];

/// `(subject i, sequence j, frame k)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TrackletIndex {
    pub subject: u32,
    pub sequence: u32,
    pub frame: u32,
}

impl TrackletIndex {
    pub const fn new(subject: u32, sequence: u32, frame: u32) -> Self {
        TrackletIndex {
            subject,
            sequence,
            frame,
        }
    }

    pub fn same_sequence(&self, other: &TrackletIndex) -> bool {
        self.subject == other.subject && self.sequence == other.sequence
    }
}

/// Per-attribute control: `+1` agree, `-1` disagree, `0` independent.
/// The ID component is always `-1`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SignVector(Vec<i8>);

impl SignVector {
    pub fn new(values: Vec<i8>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("sign vector is empty".into()));
        }
        if let Some(v) = values.iter().find(|v| !(-1..=1).contains(*v)) {
            return Err(Error::Config(format!("sign vector entries must be -1, 0 or 1 (got {v})")));
        }
        if values[0] != -1 {
            return Err(Error::Config(format!(
                "sign vector ID component must be -1 (got {})",
                values[0]
            )));
        }
        Ok(SignVector(values))
    }

    /// `[-1, 1, ..., 1]`: new identity, soft labels kept.
    pub fn equal_soft(t: usize) -> Self {
        let mut v = vec![1; t];
        v[0] = -1;
        SignVector(v)
    }

    /// `[-1, -1, ..., -1]`: every attribute changed.
    pub fn all_different(t: usize) -> Self {
        SignVector(vec![-1; t])
    }

    pub fn values(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn nonzero(&self) -> usize {
        self.0.iter().filter(|v| **v != 0).count()
    }
}

impl FromStr for SignVector {
    type Err = Error;

    /// Parses comma-separated integers, e.g. `"-1,1,1,1"`. The Unicode minus
    /// sign is accepted as well.
    fn from_str(s: &str) -> Result<Self> {
        let values = s
            .split(',')
            .map(|tok| {
                let tok = tok.trim().replace('\u{2212}', "-");
                tok.parse::<i8>()
                    .map_err(|_| Error::Config(format!("sign vector entry `{tok}` is not an integer")))
            })
            .collect::<Result<Vec<_>>>()?;
        SignVector::new(values)
    }
}

impl fmt::Display for SignVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", parts.join(","))
    }
}

/// Per-channel colour densities, channels concatenated (R bins, G bins, B bins).
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub bins: Vec<f64>,
    pub bin_count: usize,
}

impl Histogram {
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.bins[c * self.bin_count..(c + 1) * self.bin_count]
    }
}

/// Bilinear source coordinate for output index `i` when mapping `src_len`
/// samples onto `dst_len`, aligned on pixel centres.
fn source_coord(i: usize, src_len: usize, dst_len: usize) -> (usize, usize, f32) {
    let pos = ((i as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, (pos - lo as f64) as f32)
}

/// Crops `bbox` from `frame`, bilinearly resampled to 64×64, scaled to `[0, 1]`.
pub fn crop_roi(frame: &Frame, bbox: &BoundingBox) -> Result<FaceCrop> {
    bbox.validate(frame.width(), frame.height())?;
    let img = frame.image();
    let mut data = vec![0.0f32; CROP_LEN];
    let xs: Vec<_> = (0..CROP_SIZE).map(|u| source_coord(u, bbox.w as usize, CROP_SIZE)).collect();
    for v in 0..CROP_SIZE {
        let (y0, y1, fy) = source_coord(v, bbox.h as usize, CROP_SIZE);
        for (u, &(x0, x1, fx)) in xs.iter().enumerate() {
            let p = |xx: usize, yy: usize| img.get_pixel(bbox.x + xx as u32, bbox.y + yy as u32).0;
            let (p00, p10, p01, p11) = (p(x0, y0), p(x1, y0), p(x0, y1), p(x1, y1));
            for c in 0..3 {
                let top = p00[c] as f32 * (1.0 - fx) + p10[c] as f32 * fx;
                let bottom = p01[c] as f32 * (1.0 - fx) + p11[c] as f32 * fx;
                let val = top * (1.0 - fy) + bottom * fy;
                data[(v * CROP_SIZE + u) * 3 + c] = (val / 255.0).clamp(0.0, 1.0);
            }
        }
    }
    Ok(FaceCrop { data })
}

/// Returns a copy of `frame` with `crop` resampled into `bbox` and quantised
/// to 8 bits. Pixels outside the box are untouched.
pub fn paste_roi(frame: &Frame, bbox: &BoundingBox, crop: &FaceCrop) -> Result<Frame> {
    let mut out = frame.clone();
    paste_roi_in_place(&mut out, bbox, crop)?;
    Ok(out)
}

pub(crate) fn paste_roi_in_place(frame: &mut Frame, bbox: &BoundingBox, crop: &FaceCrop) -> Result<()> {
    bbox.validate(frame.width(), frame.height())?;
    let xs: Vec<_> = (0..bbox.w as usize).map(|i| source_coord(i, CROP_SIZE, bbox.w as usize)).collect();
    for j in 0..bbox.h as usize {
        let (y0, y1, fy) = source_coord(j, CROP_SIZE, bbox.h as usize);
        for (i, &(x0, x1, fx)) in xs.iter().enumerate() {
            let mut rgb = [0u8; 3];
            for (c, out) in rgb.iter_mut().enumerate() {
                let top = crop.at(y0, x0, c) * (1.0 - fx) + crop.at(y0, x1, c) * fx;
                let bottom = crop.at(y1, x0, c) * (1.0 - fx) + crop.at(y1, x1, c) * fx;
                *out = quantize(top * (1.0 - fy) + bottom * fy);
            }
            frame.set(bbox.x + i as u32, bbox.y + j as u32, rgb);
        }
    }
    Ok(())
}

/// Soft-binning weights for one value: `(lower bin, upper bin, upper weight,
/// d(upper weight)/dv)`. Values are clamped to the outer bin centres so the
/// weights of every value sum to one.
fn soft_bin(v: f32, bin_count: usize) -> (usize, usize, f64, f64) {
    let b = bin_count as f64;
    let raw = v as f64 * b - 0.5;
    let pos = raw.clamp(0.0, b - 1.0);
    let slope = if raw > 0.0 && raw < b - 1.0 { b } else { 0.0 };
    let lo = (pos.floor() as usize).min(bin_count - 2);
    (lo, lo + 1, pos - lo as f64, slope)
}

/// Per-channel colour histogram with triangular (linear-interpolation) bin
/// assignment over equal-width bins on `[0, 1]`, so it is differentiable in
/// the pixel values.
pub fn histogram(crop: &FaceCrop, bin_count: usize) -> Result<Histogram> {
    if bin_count < 2 {
        return Err(Error::Contract(format!("histogram needs at least 2 bins, got {bin_count}")));
    }
    let mut bins = vec![0.0f64; 3 * bin_count];
    for px in crop.hwc().chunks_exact(3) {
        for c in 0..3 {
            let (lo, hi, w, _) = soft_bin(px[c], bin_count);
            bins[c * bin_count + lo] += 1.0 - w;
            bins[c * bin_count + hi] += w;
        }
    }
    let n = (CROP_SIZE * CROP_SIZE) as f64;
    bins.iter_mut().for_each(|b| *b /= n);
    Ok(Histogram { bins, bin_count })
}

/// Pulls a gradient with respect to the histogram densities back onto the
/// crop's channel-last values.
pub fn histogram_backward(crop: &FaceCrop, bin_count: usize, d_bins: &[f64]) -> Vec<f64> {
    assert_eq!(d_bins.len(), 3 * bin_count);
    let n = (CROP_SIZE * CROP_SIZE) as f64;
    let mut out = vec![0.0; CROP_LEN];
    for (p, px) in crop.hwc().chunks_exact(3).enumerate() {
        for c in 0..3 {
            let (lo, hi, _, slope) = soft_bin(px[c], bin_count);
            out[p * 3 + c] = slope * (d_bins[c * bin_count + hi] - d_bins[c * bin_count + lo]) / n;
        }
    }
    out
}
