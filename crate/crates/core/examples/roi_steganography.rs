//! Hide a box list in a frame's blue LSBs and read it back.
//!
//! cargo run --example roi_steganography

use revdeid::stego::{decode_message, embed, encode_message, extract};
use revdeid::types::{BoundingBox, Frame};

fn main() -> revdeid::Result<()> {
    let boxes = [BoundingBox::new(10, 16, 9, 15), BoundingBox::new(25, 45, 8, 14)];
    let message = encode_message(&boxes);
    println!("message: {message}");

    let frame = Frame::filled(96, 64, [120, 80, 200], 0)?;
    let public = embed(&frame, &message)?;
    let changed = frame.raw().iter().zip(public.raw()).filter(|(a, b)| a != b).count();
    println!("bytes changed: {changed} of {} (all blue LSBs)", frame.raw().len());

    let recovered = decode_message(&extract(&public)?)?;
    assert_eq!(recovered, boxes);
    println!("recovered: {recovered:?}");

    match decode_message("2,10,16,9,15,25,45,8,") {
        Err(e) => println!("truncated message rejected: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
