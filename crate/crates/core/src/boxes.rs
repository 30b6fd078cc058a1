//! Axis-aligned boxes in pixel units, top-left origin.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

impl BBox {
    pub const fn new(x: f32, y: f32, w: f32, h: f32) -> Self {
        BBox { x, y, w, h }
    }

    pub fn from_corners(x0: f32, y0: f32, x1: f32, y1: f32) -> Self {
        BBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn from_center(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        BBox {
            x: cx - 0.5 * w,
            y: cy - 0.5 * h,
            w,
            h,
        }
    }

    pub fn x1(&self) -> f32 {
        self.x + self.w
    }

    pub fn y1(&self) -> f32 {
        self.y + self.h
    }

    pub fn cx(&self) -> f32 {
        self.x + 0.5 * self.w
    }

    pub fn cy(&self) -> f32 {
        self.y + 0.5 * self.h
    }

    pub fn area(&self) -> f32 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn to_array(&self) -> [f32; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn from_array(a: [f32; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }

    /// Clamps to `[0, width] × [0, height]`.
    pub fn clip(&self, width: f32, height: f32) -> BBox {
        if self.x >= 0.0 && self.y >= 0.0 && self.x1() <= width && self.y1() <= height {
            return *self;
        }
        let x0 = self.x.clamp(0.0, width);
        let y0 = self.y.clamp(0.0, height);
        let x1 = self.x1().clamp(0.0, width);
        let y1 = self.y1().clamp(0.0, height);
        BBox::from_corners(x0, y0, x1, y1)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let span = |p: f32, len: f32| (p as f64, p as f64 + len as f64);
    let overlap = |(a0, a1): (f64, f64), (b0, b1): (f64, f64)| (a1.min(b1) - a0.max(b0)).max(0.0);
    let ix = overlap(span(a.x, a.w), span(b.x, b.w));
    let iy = overlap(span(a.y, a.h), span(b.y, b.h));
    let inter = ix * iy;
    let area = |b: &BBox| (b.w.max(0.0) as f64) * (b.h.max(0.0) as f64);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Serde adapter writing a [`BBox`] as `[x, y, w, h]`.
pub mod as_array {
    use super::BBox;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(b: &BBox, s: S) -> Result<S::Ok, S::Error> {
        b.to_array().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BBox, D::Error> {
        <[f32; 4]>::deserialize(d).map(BBox::from_array)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_hand_values() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(5.0, 5.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(iou(&a, &BBox::new(20.0, 0.0, 5.0, 5.0)), 0.0);
        let empty = BBox::new(3.0, 3.0, 0.0, 0.0);
        assert_eq!(iou(&empty, &empty), 0.0);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0f32..50.0, 0.0f32..50.0, 0.5f32..30.0, 0.5f32..30.0)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            let disjoint = a.x1() <= b.x || b.x1() <= a.x || a.y1() <= b.y || b.y1() <= a.y;
            prop_assert_eq!(ab == 0.0, disjoint);
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }
    }
}
