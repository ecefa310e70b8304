//! Crop rectangles in normalized coordinates and the two pairwise metrics
//! (intersection-over-union, boundary displacement) the rest of the crate is
//! built on.
//!
//! A [`CropBox`] stores corners `(x1, y1, x2, y2)` as fractions of image
//! width/height. Corner form is the canonical representation; center-size
//! forms are conversion-only. Displacement is normalized per axis (boxes are
//! already in per-axis fractions), not by the image diagonal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in normalized coordinates, `0 <= x1 < x2 <= 1`,
/// `0 <= y1 < y2 <= 1`. Always has positive area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl CropBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = CropBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason| Error::InvalidBox {
            x1: self.x1,
            y1: self.y1,
            x2: self.x2,
            y2: self.y2,
            reason,
        };
        if !(self.x1.is_finite() && self.y1.is_finite() && self.x2.is_finite() && self.y2.is_finite())
        {
            return Err(fail("non-finite coordinate"));
        }
        if self.x1 < 0.0 || self.y1 < 0.0 || self.x2 > 1.0 || self.y2 > 1.0 {
            return Err(fail("coordinates outside [0, 1]"));
        }
        if self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(fail("zero or negative extent"));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Center-size view `(cx, cy, w, h)`.
    pub fn to_center_size(&self) -> (f64, f64, f64, f64) {
        (
            0.5 * (self.x1 + self.x2),
            0.5 * (self.y1 + self.y2),
            self.width(),
            self.height(),
        )
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Image dimensions in pixels, both at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl ImageSize {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Validation(format!(
                "image size must be positive, got {width}x{height}"
            )));
        }
        Ok(ImageSize { width, height })
    }
}

/// Integer rectangle produced by [`to_pixels`]; `x2`/`y2` are exclusive and
/// the extent is at least one pixel per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl PixelRect {
    pub fn width(&self) -> u32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> u32 {
        self.y2 - self.y1
    }
}

/// Intersection-over-union of two valid boxes. Symmetric, in `[0, 1]`,
/// zero for disjoint boxes and one exactly when the boxes coincide.
pub fn iou(a: &CropBox, b: &CropBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &CropBox, b: &CropBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Boundary displacement: mean of the four absolute normalized edge offsets,
/// accumulated in field order (x1, y1, x2, y2). Symmetric, zero iff equal.
pub fn disp(a: &CropBox, b: &CropBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(disp_unchecked(a, b))
}

pub(crate) fn disp_unchecked(a: &CropBox, b: &CropBox) -> f64 {
    ((a.x1 - b.x1).abs() + (a.y1 - b.y1).abs() + (a.x2 - b.x2).abs() + (a.y2 - b.y2).abs()) / 4.0
}

/// True iff `inner` lies entirely within `outer` (closed inequalities, so a
/// box contains itself).
pub fn contains(outer: &CropBox, inner: &CropBox) -> Result<bool> {
    outer.validate()?;
    inner.validate()?;
    Ok(contains_unchecked(outer, inner))
}

pub(crate) fn contains_unchecked(outer: &CropBox, inner: &CropBox) -> bool {
    outer.x1 <= inner.x1 && outer.y1 <= inner.y1 && outer.x2 >= inner.x2 && outer.y2 >= inner.y2
}

/// Convert a normalized box to pixel coordinates, rounding to the nearest
/// pixel. Degenerate rounding is repaired to a 1x1 rectangle instead of
/// erroring so downstream rendering never fails on a valid normalized box.
pub fn to_pixels(b: &CropBox, s: &ImageSize) -> PixelRect {
    let w = f64::from(s.width);
    let h = f64::from(s.height);
    let mut x1 = (b.x1 * w).round() as i64;
    let mut y1 = (b.y1 * h).round() as i64;
    let mut x2 = (b.x2 * w).round() as i64;
    let mut y2 = (b.y2 * h).round() as i64;
    x1 = x1.clamp(0, i64::from(s.width) - 1);
    y1 = y1.clamp(0, i64::from(s.height) - 1);
    x2 = x2.clamp(1, i64::from(s.width));
    y2 = y2.clamp(1, i64::from(s.height));
    if x2 <= x1 {
        x2 = x1 + 1;
    }
    if y2 <= y1 {
        y2 = y1 + 1;
    }
    PixelRect {
        x1: x1 as u32,
        y1: y1 as u32,
        x2: x2 as u32,
        y2: y2 as u32,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> CropBox {
        CropBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_identity() {
        let a = bx(0.1, 0.1, 0.9, 0.9);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn iou_disjoint() {
        let a = bx(0.0, 0.0, 0.4, 0.4);
        let b = bx(0.5, 0.5, 1.0, 1.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn iou_half_overlap() {
        // intersection 0.5, union 1.0
        let a = bx(0.0, 0.0, 1.0, 1.0);
        let b = bx(0.0, 0.0, 0.5, 1.0);
        assert!((iou(&a, &b).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn disp_identity() {
        let a = bx(0.2, 0.3, 0.8, 0.9);
        assert_eq!(disp(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn disp_uniform_inset() {
        let a = bx(0.0, 0.0, 1.0, 1.0);
        let b = bx(0.1, 0.1, 0.9, 0.9);
        assert!((disp(&a, &b).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn disp_single_edge() {
        let a = bx(0.0, 0.0, 1.0, 1.0);
        let b = bx(0.2, 0.0, 1.0, 1.0);
        assert!((disp(&a, &b).unwrap() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn disp_matches_independent_per_edge_recomputation_bitwise() {
        // Same field order, same operations: results must agree bit for bit.
        let pairs = [
            (bx(0.0, 0.0, 1.0, 1.0), bx(0.13, 0.27, 0.91, 0.88)),
            (bx(0.41, 0.02, 0.77, 0.63), bx(0.05, 0.33, 0.52, 0.97)),
        ];
        for (a, b) in pairs {
            let oracle = ((a.x1 - b.x1).abs()
                + (a.y1 - b.y1).abs()
                + (a.x2 - b.x2).abs()
                + (a.y2 - b.y2).abs())
                / 4.0;
            assert_eq!(disp(&a, &b).unwrap().to_bits(), oracle.to_bits());
        }
    }

    #[test]
    fn contains_cases() {
        let outer = bx(0.0, 0.0, 1.0, 1.0);
        let inner = bx(0.2, 0.2, 0.8, 0.8);
        assert!(contains(&outer, &inner).unwrap());
        assert!(contains(&inner, &inner).unwrap());
        let o = bx(0.0, 0.0, 0.5, 0.5);
        let i = bx(0.4, 0.4, 0.6, 0.6);
        assert!(!contains(&o, &i).unwrap());
    }

    #[test]
    fn to_pixels_exact_and_degenerate() {
        let s = ImageSize::new(100, 50).unwrap();
        let r = to_pixels(&bx(0.0, 0.0, 1.0, 1.0), &s);
        assert_eq!((r.x1, r.y1, r.x2, r.y2), (0, 0, 100, 50));

        let s = ImageSize::new(200, 100).unwrap();
        let r = to_pixels(&bx(0.25, 0.5, 0.75, 1.0), &s);
        assert_eq!((r.x1, r.y1, r.x2, r.y2), (50, 50, 150, 100));

        let s = ImageSize::new(100, 100).unwrap();
        let r = to_pixels(&bx(0.0, 0.0, 0.004, 0.004), &s);
        assert_eq!((r.width(), r.height()), (1, 1));
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(CropBox::new(0.5, 0.0, 0.5, 1.0).is_err());
        assert!(CropBox::new(-0.1, 0.0, 0.5, 1.0).is_err());
        assert!(CropBox::new(0.0, 0.0, 1.1, 1.0).is_err());
        assert!(CropBox::new(0.0, f64::NAN, 0.5, 1.0).is_err());
    }

    #[test]
    fn iou_matches_monte_carlo_estimator() {
        // Common random points for intersection and union counts keep the
        // ratio estimator tight enough for the 0.01 bound.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let gen_box = |rng: &mut rand_chacha::ChaCha8Rng| {
                let w = rng.gen_range(0.5..1.0f64);
                let h = rng.gen_range(0.5..1.0f64);
                let x1 = rng.gen_range(0.0..(1.0 - w));
                let y1 = rng.gen_range(0.0..(1.0 - h));
                bx(x1, y1, x1 + w, y1 + h)
            };
            let a = gen_box(&mut rng);
            let b = gen_box(&mut rng);
            let mut in_union = 0u64;
            let mut in_inter = 0u64;
            for _ in 0..100_000 {
                let x: f64 = rng.gen();
                let y: f64 = rng.gen();
                let ia = x >= a.x1 && x < a.x2 && y >= a.y1 && y < a.y2;
                let ib = x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2;
                if ia || ib {
                    in_union += 1;
                }
                if ia && ib {
                    in_inter += 1;
                }
            }
            let est = in_inter as f64 / in_union as f64;
            let exact = iou(&a, &b).unwrap();
            assert!(
                (est - exact).abs() < 0.01,
                "MC {est} vs exact {exact} for {a:?} {b:?}"
            );
        }
    }

    fn arb_box() -> impl Strategy<Value = CropBox> {
        (0.0..0.8f64, 0.0..0.8f64, 0.01..0.2f64, 0.01..0.2f64)
            .prop_map(|(x1, y1, dw, dh)| bx(x1, y1, (x1 + dw + 0.01).min(1.0), (y1 + dh + 0.01).min(1.0)))
    }

    proptest! {
        #[test]
        fn iou_disp_symmetric(a in arb_box(), b in arb_box()) {
            prop_assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
            prop_assert_eq!(disp(&a, &b).unwrap(), disp(&b, &a).unwrap());
        }

        #[test]
        fn iou_one_and_disp_zero_iff_equal(a in arb_box(), b in arb_box()) {
            if a == b {
                prop_assert_eq!(iou(&a, &b).unwrap(), 1.0);
                prop_assert_eq!(disp(&a, &b).unwrap(), 0.0);
            } else {
                prop_assert!(iou(&a, &b).unwrap() < 1.0);
                prop_assert!(disp(&a, &b).unwrap() > 0.0);
            }
        }

        #[test]
        fn to_pixels_always_positive_extent(b in arb_box(), w in 1u32..500, h in 1u32..500) {
            let r = to_pixels(&b, &ImageSize::new(w, h).unwrap());
            prop_assert!(r.width() >= 1 && r.height() >= 1);
            prop_assert!(r.x2 <= w && r.y2 <= h);
        }
    }
}
