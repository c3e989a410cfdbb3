use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in continuous pixel coordinates. Pixel `i` spans `[i, i+1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub y_min: f64,
    pub x_min: f64,
    pub y_max: f64,
    pub x_max: f64,
}

impl BBox {
    pub fn new(y_min: f64, x_min: f64, y_max: f64, x_max: f64) -> Result<Self> {
        let ok = [y_min, x_min, y_max, x_max].iter().all(|v| v.is_finite())
            && y_max > y_min
            && x_max > x_min;
        if !ok {
            return Err(Error::Shape(format!(
                "degenerate box ({y_min}, {x_min}, {y_max}, {x_max})"
            )));
        }
        Ok(Self {
            y_min,
            x_min,
            y_max,
            x_max,
        })
    }

    pub fn from_center(cy: f64, cx: f64, h: f64, w: f64) -> Result<Self> {
        Self::new(cy - h / 2.0, cx - w / 2.0, cy + h / 2.0, cx + w / 2.0)
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn area(&self) -> f64 {
        self.height() * self.width()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.y_min + self.y_max),
            0.5 * (self.x_min + self.x_max),
        )
    }

    /// Clips to `[0,height] x [0,width]`; `None` when nothing of positive area remains.
    pub fn clip(&self, height: f64, width: f64) -> Option<Self> {
        Self::new(
            self.y_min.max(0.0),
            self.x_min.max(0.0),
            self.y_max.min(height),
            self.x_max.min(width),
        )
        .ok()
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.y_min, self.x_min, self.y_max, self.x_max]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union of two boxes.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let inter = ih * iw;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(y0: f64, x0: f64, y1: f64, x1: f64) -> BBox {
        BBox::new(y0, x0, y1, x1).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &b(4.0, 4.0, 6.0, 6.0)), 0.0);
        assert!((box_iou(&a, &b(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-12);
        // touching edges share no interior
        assert_eq!(box_iou(&a, &b(0.0, 2.0, 2.0, 4.0)), 0.0);
    }

    #[test]
    fn degenerate_rejected() {
        assert!(BBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 2.0).is_err());
        assert!(b(-1.0, -1.0, 0.0, 0.5).clip(4.0, 4.0).is_none());
        assert_eq!(
            b(-2.0, 1.0, 3.0, 9.0).clip(4.0, 5.0),
            Some(b(0.0, 1.0, 3.0, 5.0))
        );
    }

    /// Counts covered unit pixels; independent of the interval arithmetic above.
    fn raster_iou(a: (u32, u32, u32, u32), c: (u32, u32, u32, u32)) -> f64 {
        let inside = |r: (u32, u32, u32, u32), y: u32, x: u32| y >= r.0 && y < r.2 && x >= r.1 && x < r.3;
        let (mut inter, mut union) = (0u32, 0u32);
        for y in 0..32 {
            for x in 0..32 {
                let (ia, ic) = (inside(a, y, x), inside(c, y, x));
                inter += (ia && ic) as u32;
                union += (ia || ic) as u32;
            }
        }
        inter as f64 / union as f64
    }

    fn int_box() -> impl Strategy<Value = (u32, u32, u32, u32)> {
        (0u32..31, 0u32..31)
            .prop_flat_map(|(y0, x0)| (Just(y0), Just(x0), (y0 + 1)..=32, (x0 + 1)..=32))
    }

    proptest! {
        #[test]
        fn iou_matches_raster_oracle(a in int_box(), c in int_box()) {
            let ba = b(a.0 as f64, a.1 as f64, a.2 as f64, a.3 as f64);
            let bc = b(c.0 as f64, c.1 as f64, c.2 as f64, c.3 as f64);
            let got = box_iou(&ba, &bc);
            prop_assert!((got - raster_iou(a, c)).abs() < 1e-12);
            prop_assert_eq!(got, box_iou(&bc, &ba));
            prop_assert_eq!(box_iou(&ba, &ba), 1.0);
        }
    }
}
