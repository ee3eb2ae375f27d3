//! ROI side channel: box lists serialised as `n,x,y,w,h,...,` text and hidden
//! in the blue-channel least-significant bits of the published frame.
//! The bit layout is described in `docs/stego-format.md`.

use crate::error::{Error, Result};
use crate::types::{BoundingBox, Frame};

/// Bits used by the length header.
pub const HEADER_BITS: usize = 32;

/// Serialises `boxes` as the count followed by `x,y,w,h` per box, every
/// number terminated by a comma.
pub fn encode_message(boxes: &[BoundingBox]) -> String {
    let mut out = format!("{},", boxes.len());
    for b in boxes {
        out.push_str(&format!("{},{},{},{},", b.x, b.y, b.w, b.h));
    }
    out
}

/// Parses one comma-terminated natural number starting at `pos`.
fn read_number(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    let start = *pos;
    let mut value: u32 = 0;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        value = value
            .checked_mul(10)
            .and_then(|v| v.checked_add((bytes[*pos] - b'0') as u32))
            .ok_or_else(|| Error::MalformedMessage {
                offset: start,
                reason: "number does not fit in 32 bits".into(),
            })?;
        *pos += 1;
    }
    if *pos == start {
        let reason = match bytes.get(*pos) {
            None => "unexpected end of message, expected a number".to_string(),
            Some(c) => format!("expected a digit, found {:?}", *c as char),
        };
        return Err(Error::MalformedMessage { offset: *pos, reason });
    }
    match bytes.get(*pos) {
        Some(b',') => {
            *pos += 1;
            Ok(value)
        }
        None => Err(Error::MalformedMessage {
            offset: *pos,
            reason: "number not terminated by a comma".into(),
        }),
        Some(c) => Err(Error::MalformedMessage {
            offset: *pos,
            reason: format!("expected ',', found {:?}", *c as char),
        }),
    }
}

/// Exact inverse of [`encode_message`].
pub fn decode_message(text: &str) -> Result<Vec<BoundingBox>> {
    let bytes = text.as_bytes();
    let mut pos = 0;
    let n = read_number(bytes, &mut pos)? as usize;
    let mut boxes = Vec::with_capacity(n.min(bytes.len() / 8 + 1));
    for _ in 0..n {
        let start = pos;
        if pos >= bytes.len() {
            return Err(Error::MalformedMessage {
                offset: pos,
                reason: format!("message declares {n} boxes but holds {}", boxes.len()),
            });
        }
        let x = read_number(bytes, &mut pos)?;
        let y = read_number(bytes, &mut pos)?;
        let w = read_number(bytes, &mut pos)?;
        let h = read_number(bytes, &mut pos)?;
        if w == 0 || h == 0 {
            return Err(Error::MalformedMessage {
                offset: start,
                reason: format!("box {} has zero width or height", boxes.len()),
            });
        }
        boxes.push(BoundingBox::new(x, y, w, h));
    }
    if pos != bytes.len() {
        return Err(Error::MalformedMessage {
            offset: pos,
            reason: "trailing data after the last box".into(),
        });
    }
    Ok(boxes)
}

/// A reversible carrier for the ROI message.
pub trait Embedder {
    /// Number of message bits (excluding any header) the frame can carry.
    fn capacity_bits(&self, frame: &Frame) -> usize;
    fn embed(&self, frame: &Frame, message: &str) -> Result<Frame>;
    fn extract(&self, frame: &Frame) -> Result<String>;
}

/// One bit per pixel in the blue LSB, row-major from the top-left: a 32-bit
/// big-endian bit count, then the message bytes, most significant bit first.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LsbEmbedder;

fn pixel_count(frame: &Frame) -> usize {
    frame.width() as usize * frame.height() as usize
}

impl Embedder for LsbEmbedder {
    fn capacity_bits(&self, frame: &Frame) -> usize {
        pixel_count(frame).saturating_sub(HEADER_BITS)
    }

    fn embed(&self, frame: &Frame, message: &str) -> Result<Frame> {
        let payload = message.len() * 8;
        let available = pixel_count(frame);
        let required = payload + HEADER_BITS;
        if required > available || payload > u32::MAX as usize {
            return Err(Error::Capacity { required, available });
        }
        let header = (payload as u32).to_be_bytes();
        let bits = header
            .iter()
            .chain(message.as_bytes())
            .flat_map(|&byte| (0..8).rev().map(move |i| (byte >> i) & 1));
        let mut out = frame.clone();
        let raw = out.raw_mut();
        for (p, bit) in bits.enumerate() {
            let blue = &mut raw[p * 3 + 2];
            *blue = (*blue & !1) | bit;
        }
        Ok(out)
    }

    fn extract(&self, frame: &Frame) -> Result<String> {
        let raw = frame.raw();
        let available = pixel_count(frame);
        if available < HEADER_BITS {
            return Err(Error::CorruptStream(format!(
                "frame has {available} pixels, fewer than the {HEADER_BITS}-bit header"
            )));
        }
        let bit = |p: usize| (raw[p * 3 + 2] & 1) as u32;
        let declared = (0..HEADER_BITS).fold(0u32, |acc, p| (acc << 1) | bit(p)) as usize;
        if declared > available - HEADER_BITS {
            return Err(Error::CorruptStream(format!(
                "header declares {declared} bits but only {} follow",
                available - HEADER_BITS
            )));
        }
        if declared % 8 != 0 {
            return Err(Error::CorruptStream(format!("header declares {declared} bits, not a whole number of bytes")));
        }
        let bytes: Vec<u8> = (0..declared / 8)
            .map(|i| {
                let base = HEADER_BITS + i * 8;
                (0..8).fold(0u8, |acc, k| (acc << 1) | bit(base + k) as u8)
            })
            .collect();
        String::from_utf8(bytes).map_err(|e| Error::CorruptStream(format!("payload is not valid text: {e}")))
    }
}

/// [`LsbEmbedder::embed`].
pub fn embed(frame: &Frame, message: &str) -> Result<Frame> {
    LsbEmbedder.embed(frame, message)
}

/// [`LsbEmbedder::extract`].
pub fn extract(frame: &Frame) -> Result<String> {
    LsbEmbedder.extract(frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn paper_boxes() -> Vec<BoundingBox> {
        vec![BoundingBox::new(10, 16, 9, 15), BoundingBox::new(25, 45, 8, 14)]
    }

    fn offset_of(r: Result<Vec<BoundingBox>>) -> usize {
        match r {
            Err(Error::MalformedMessage { offset, .. }) => offset,
            other => panic!("expected malformed message, got {other:?}"),
        }
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode_message(&paper_boxes()), "2,10,16,9,15,25,45,8,14,");
        assert_eq!(encode_message(&[]), "0,");
        assert_eq!(encode_message(&[BoundingBox::new(0, 0, 1, 1)]), "1,0,0,1,1,");
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode_message("2,10,16,9,15,25,45,8,14,").unwrap(), paper_boxes());
        assert_eq!(decode_message("0,").unwrap(), vec![]);
        assert_eq!(offset_of(decode_message("1,5,5,0,3,")), 2);
    }

    #[test]
    fn decode_errors_name_offsets() {
        assert_eq!(offset_of(decode_message("")), 0);
        assert_eq!(offset_of(decode_message("0")), 1);
        assert_eq!(offset_of(decode_message("0,x")), 2);
        assert_eq!(offset_of(decode_message("2,1,1,1,1,")), 10);
        assert_eq!(offset_of(decode_message("1,1,a,1,1,")), 4);
        assert_eq!(offset_of(decode_message("1,1,1,1,1")), 9);
        assert_eq!(offset_of(decode_message("1,-1,1,1,1,")), 2);
        assert_eq!(offset_of(decode_message("1,99999999999,1,1,1,")), 2);
    }

    #[test]
    fn short_message_uses_48_bits() {
        let frame = Frame::filled(64, 64, [200, 100, 255], 0).unwrap();
        let out = embed(&frame, "0,").unwrap();
        for p in 48..64 * 64 {
            assert_eq!(out.raw()[p * 3 + 2], 255);
        }
        // '0' = 0x30, ',' = 0x2C after a header of 16.
        let bits: Vec<u8> = (0..48).map(|p| out.raw()[p * 3 + 2] & 1).collect();
        let header: u32 = bits[..32].iter().fold(0, |a, &b| (a << 1) | b as u32);
        assert_eq!(header, 16);
        let first: u8 = bits[32..40].iter().fold(0, |a, &b| (a << 1) | b);
        assert_eq!(first, b'0');
        assert_eq!(extract(&out).unwrap(), "0,");
    }

    #[test]
    fn capacity_error_reports_bits() {
        let frame = Frame::filled(64, 64, [0, 0, 0], 0).unwrap();
        let msg = "9".repeat(509);
        match embed(&frame, &msg) {
            Err(Error::Capacity { required, available }) => {
                assert_eq!(required, 509 * 8 + 32);
                assert_eq!(available, 4096);
            }
            other => panic!("expected capacity error, got {other:?}"),
        }
        assert!(embed(&frame, &"9".repeat(508)).is_ok());
    }

    #[test]
    fn zero_lsbs_give_empty_text_that_fails_to_decode() {
        let frame = Frame::filled(64, 64, [10, 10, 10], 0).unwrap();
        let text = extract(&frame).unwrap();
        assert_eq!(text, "");
        assert!(decode_message(&text).is_err());
    }

    #[test]
    fn oversized_header_is_corrupt() {
        let mut frame = Frame::filled(64, 64, [10, 10, 11], 0).unwrap();
        frame.raw_mut()[2] = 11;
        assert!(matches!(extract(&frame), Err(Error::CorruptStream(_))));
    }

    #[test]
    fn flipping_one_payload_bit_changes_one_character_bit() {
        let frame = Frame::filled(64, 64, [1, 2, 3], 0).unwrap();
        let msg = "2,10,16,9,15,25,45,8,14,";
        let mut out = embed(&frame, msg).unwrap();
        let p = HEADER_BITS + 8 * 3 + 5;
        out.raw_mut()[p * 3 + 2] ^= 1;
        let got = extract(&out).unwrap();
        let diff: u32 = got.bytes().zip(msg.bytes()).map(|(a, b)| (a ^ b).count_ones()).sum();
        assert_eq!(diff, 1);
        assert_eq!(got.as_bytes()[3] ^ msg.as_bytes()[3], 1 << 2);
    }

    fn arb_frame() -> impl Strategy<Value = Frame> {
        (64u32..96, 64u32..80, any::<u64>()).prop_map(|(w, h, seed)| {
            let mut f = Frame::filled(w, h, [0, 0, 0], 0).unwrap();
            let mut s = seed;
            for b in f.raw_mut() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                *b = (s >> 56) as u8;
            }
            f
        })
    }

    proptest! {
        #[test]
        fn round_trip_and_mask(frame in arb_frame(), boxes in proptest::collection::vec((0u32..2000, 0u32..2000, 1u32..500, 1u32..500), 0..20)) {
            let boxes: Vec<BoundingBox> = boxes.into_iter().map(|(x, y, w, h)| BoundingBox::new(x, y, w, h)).collect();
            let msg = encode_message(&boxes);
            prop_assert_eq!(decode_message(&msg).unwrap(), boxes);
            let out = embed(&frame, &msg).unwrap();
            prop_assert_eq!(extract(&out).unwrap(), msg.clone());
            for (i, (a, b)) in frame.raw().iter().zip(out.raw()).enumerate() {
                let mask = if i % 3 == 2 { !1u8 } else { 0xFF };
                prop_assert_eq!(a & mask, b & mask);
            }
            prop_assert_eq!(embed(&frame, &msg).unwrap(), out);
        }
    }
}
