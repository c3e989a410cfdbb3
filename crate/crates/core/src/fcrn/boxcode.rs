//! Per-pixel box parameterization of the localization head:
//! `(dy, dx, log h, log w)`, where `(dy, dx)` is the offset from the pixel
//! centre to the box centre in units of the output stride.

use crate::tensor::BBox;

pub fn encode_box(y: usize, x: usize, b: &BBox, stride: usize) -> [f64; 4] {
    let (cy, cx) = b.center();
    let s = stride as f64;
    [
        (cy - (y as f64 + 0.5)) / s,
        (cx - (x as f64 + 0.5)) / s,
        b.height().ln(),
        b.width().ln(),
    ]
}

/// Inverse of [`encode_box`]; `None` when the code does not describe a finite box.
pub fn decode_box(y: usize, x: usize, code: [f64; 4], stride: usize) -> Option<BBox> {
    let s = stride as f64;
    let cy = y as f64 + 0.5 + code[0] * s;
    let cx = x as f64 + 0.5 + code[1] * s;
    BBox::from_center(cy, cx, code[2].exp(), code[3].exp()).ok()
}
