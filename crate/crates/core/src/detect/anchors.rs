use crate::boxes::BBox;

/// Height/width ratios of the anchors at every position.
pub const ANCHOR_RATIOS: [f32; 3] = [0.5, 1.0, 2.0];
/// Pixel stride of FPN levels 1..3.
pub const LEVEL_STRIDES: [usize; 3] = [2, 4, 8];
/// Anchor side (at ratio 1) of FPN levels 1..3.
pub const BASE_SIZES: [f32; 3] = [16.0, 32.0, 64.0];

/// Largest allowed log-scale delta, so `exp` cannot overflow.
const MAX_LOG_DELTA: f32 = 4.135_166_6; // ln(1000 / 16)

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl Anchor {
    pub fn to_box(&self) -> BBox {
        BBox::from_center(self.cx, self.cy, self.w, self.h)
    }
}

/// Anchors for the three FPN levels of one image size.
///
/// Within a level, anchor `a*H*W + y*W + x` sits at cell `(y, x)` with ratio
/// `a`, which is also the layout of the head's N×A×H×W output.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub levels: Vec<Vec<Anchor>>,
    pub sizes: Vec<(usize, usize)>,
}

impl AnchorSet {
    pub fn new(height: usize, width: usize) -> Self {
        let mut levels = Vec::new();
        let mut sizes = Vec::new();
        for (l, (&stride, &base)) in LEVEL_STRIDES.iter().zip(&BASE_SIZES).enumerate() {
            let (h, w) = (height / stride, width / stride);
            let mut v = Vec::with_capacity(h * w * ANCHOR_RATIOS.len());
            for &r in &ANCHOR_RATIOS {
                let aw = base / r.sqrt();
                let ah = base * r.sqrt();
                for y in 0..h {
                    for x in 0..w {
                        v.push(Anchor {
                            cx: (x as f32 + 0.5) * stride as f32,
                            cy: (y as f32 + 0.5) * stride as f32,
                            w: aw,
                            h: ah,
                        });
                    }
                }
            }
            levels.push(v);
            sizes.push((h, w));
            debug_assert_eq!(levels[l].len(), h * w * ANCHOR_RATIOS.len());
        }
        AnchorSet { levels, sizes }
    }

    pub fn len(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All anchors, level 1 first.
    pub fn iter(&self) -> impl Iterator<Item = &Anchor> {
        self.levels.iter().flatten()
    }

    /// Maps a global anchor index to `(level, index within level)`.
    pub fn locate(&self, mut index: usize) -> (usize, usize) {
        for (l, v) in self.levels.iter().enumerate() {
            if index < v.len() {
                return (l, index);
            }
            index -= v.len();
        }
        panic!("anchor index out of range");
    }
}

/// Regression targets of `b` relative to `anchor`, scaled by `weights`.
pub fn encode(b: &BBox, anchor: &Anchor, weights: [f32; 4]) -> [f32; 4] {
    [
        weights[0] * (b.cx() - anchor.cx) / anchor.w,
        weights[1] * (b.cy() - anchor.cy) / anchor.h,
        weights[2] * (b.w / anchor.w).ln(),
        weights[3] * (b.h / anchor.h).ln(),
    ]
}

/// Inverse of [`encode`], with the log-scale terms clamped.
pub fn decode(d: [f32; 4], anchor: &Anchor, weights: [f32; 4]) -> BBox {
    let dw = (d[2] / weights[2]).min(MAX_LOG_DELTA);
    let dh = (d[3] / weights[3]).min(MAX_LOG_DELTA);
    BBox::from_center(
        anchor.cx + d[0] / weights[0] * anchor.w,
        anchor.cy + d[1] / weights[1] * anchor.h,
        anchor.w * dw.exp(),
        anchor.h * dh.exp(),
    )
}

/// FPN level (0-based) for a box: `clamp(floor(log2(sqrt(area)/16)) + 1, 1, 3)`,
/// returned minus one.
pub fn fpn_level_for(b: &BBox) -> usize {
    let side = (b.area().max(1e-6) as f64).sqrt();
    let level = ((side / 16.0).log2().floor() + 1.0).clamp(1.0, 3.0);
    level as usize - 1
}
