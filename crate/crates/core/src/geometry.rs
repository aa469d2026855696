//! Pixel-space rectangles in continuous coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

impl std::ops::Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

impl std::ops::Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Mul<f64> for Point {
    type Output = Point;
    fn mul(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }
}

/// Axis-aligned rectangle `(x, y, w, h)` with `w > 0` and `h > 0`.
///
/// Serialized as `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct Rect {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl TryFrom<[f64; 4]> for Rect {
    type Error = Error;
    fn try_from(v: [f64; 4]) -> Result<Self> {
        Rect::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Rect> for [f64; 4] {
    fn from(r: Rect) -> Self {
        [r.x, r.y, r.w, r.h]
    }
}

impl Rect {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite rect ({x}, {y}, {w}, {h})"
            )));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "rect must have positive size, got {w}x{h}"
            )));
        }
        Ok(Self { x, y, w, h })
    }

    /// Rectangle of the given diagonal and aspect ratio `w / h` centered at `center`.
    pub fn from_center_diagonal(center: Point, diagonal: f64, aspect: f64) -> Result<Self> {
        if !(diagonal > 0.0 && aspect > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "diagonal {diagonal} and aspect {aspect} must be positive"
            )));
        }
        let h = diagonal / (1.0 + aspect * aspect).sqrt();
        let w = h * aspect;
        Rect::new(center.x - w / 2.0, center.y - h / 2.0, w, h)
    }

    pub fn square(x: f64, y: f64, side: f64) -> Result<Self> {
        Rect::new(x, y, side, side)
    }

    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn right(&self) -> f64 {
        self.x + self.w
    }
    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }
    pub fn area(&self) -> f64 {
        self.w * self.h
    }
    pub fn aspect(&self) -> f64 {
        self.w / self.h
    }

    pub fn center(&self) -> Point {
        Point::new(self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn diagonal(&self) -> f64 {
        self.w.hypot(self.h)
    }

    pub fn center_diagonal(&self) -> (Point, f64) {
        (self.center(), self.diagonal())
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Rect {
        Rect {
            x: self.x + dx,
            y: self.y + dy,
            ..*self
        }
    }

    pub fn intersection_area(&self, o: &Rect) -> f64 {
        let iw = self.right().min(o.right()) - self.x.max(o.x);
        let ih = self.bottom().min(o.bottom()) - self.y.max(o.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Intersection, or `None` when the rects do not overlap with positive area.
    pub fn intersect(&self, o: &Rect) -> Option<Rect> {
        let x0 = self.x.max(o.x);
        let y0 = self.y.max(o.y);
        let x1 = self.right().min(o.right());
        let y1 = self.bottom().min(o.bottom());
        Rect::new(x0, y0, x1 - x0, y1 - y0).ok()
    }

    /// Fraction of `self`'s area that lies inside `o`.
    pub fn overlap_fraction(&self, o: &Rect) -> f64 {
        self.intersection_area(o) / self.area()
    }

    pub fn contains(&self, o: &Rect) -> bool {
        o.x >= self.x && o.y >= self.y && o.right() <= self.right() && o.bottom() <= self.bottom()
    }

    /// Clips to `[0, width) x [0, height)`; `None` if nothing remains.
    pub fn clip_to(&self, width: f64, height: f64) -> Option<Rect> {
        self.intersect(&Rect {
            x: 0.0,
            y: 0.0,
            w: width,
            h: height,
        })
    }

    pub fn to_f32_array(&self) -> [f32; 4] {
        [self.x as f32, self.y as f32, self.w as f32, self.h as f32]
    }

    pub fn from_f32_array(a: [f32; 4]) -> Result<Rect> {
        Rect::new(a[0] as f64, a[1] as f64, a[2] as f64, a[3] as f64)
    }
}

/// Intersection over union of two rects, in `[0, 1]`.
pub fn iou(a: &Rect, b: &Rect) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Center point and diagonal length of `r`.
pub fn center_diagonal(r: &Rect) -> (Point, f64) {
    r.center_diagonal()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn r(x: f64, y: f64, w: f64, h: f64) -> Rect {
        Rect::new(x, y, w, h).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&r(0., 0., 10., 10.), &r(0., 0., 10., 10.)), 1.0);
        assert_eq!(iou(&r(0., 0., 10., 10.), &r(20., 20., 5., 5.)), 0.0);
        assert!((iou(&r(0., 0., 10., 10.), &r(5., 0., 10., 10.)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn center_diagonal_examples() {
        let (c, d) = center_diagonal(&r(0., 0., 10., 10.));
        assert_eq!((c.x, c.y), (5.0, 5.0));
        assert!((d - 200f64.sqrt()).abs() < 1e-12);
        let (c, d) = center_diagonal(&r(75., 75., 50., 50.));
        assert_eq!((c.x, c.y), (100.0, 100.0));
        assert!((d - 70.7107).abs() < 1e-4);
        let (c, d) = center_diagonal(&r(0., 0., 3., 4.));
        assert_eq!((c.x, c.y, d), (1.5, 2.0, 5.0));
    }

    #[test]
    fn invalid_rects_rejected() {
        assert!(Rect::new(0., 0., 0., 1.).is_err());
        assert!(Rect::new(0., 0., 1., -1.).is_err());
        assert!(Rect::new(f64::NAN, 0., 1., 1.).is_err());
        assert!(serde_json::from_str::<Rect>("[0,0,-1,2]").is_err());
        let ok: Rect = serde_json::from_str("[1,2,3,4]").unwrap();
        assert_eq!(ok, r(1., 2., 3., 4.));
    }

    #[test]
    fn clipping() {
        let c = r(-5., -5., 20., 20.).clip_to(10., 10.).unwrap();
        assert_eq!(c, r(0., 0., 10., 10.));
        assert!(r(20., 20., 5., 5.).clip_to(10., 10.).is_none());
    }

    fn arb_rect() -> impl Strategy<Value = Rect> {
        (
            -500.0..500.0f64,
            -500.0..500.0f64,
            0.5..300.0f64,
            0.5..300.0f64,
        )
            .prop_map(|(x, y, w, h)| Rect::new(x, y, w, h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_rect(), b in arb_rect()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn iou_self_and_far_translate(a in arb_rect(), b in arb_rect()) {
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
            let t = a.w().max(b.w()) + a.h().max(b.h());
            let moved = b.translate(a.x() - b.x() + t, a.y() - b.y() + t);
            prop_assert_eq!(iou(&a, &moved), 0.0);
        }

        #[test]
        fn center_diagonal_round_trip(a in arb_rect()) {
            let (c, d) = a.center_diagonal();
            let back = Rect::from_center_diagonal(c, d, a.aspect()).unwrap();
            prop_assert!((back.x() - a.x()).abs() < 1e-9);
            prop_assert!((back.y() - a.y()).abs() < 1e-9);
            prop_assert!((back.w() - a.w()).abs() < 1e-9);
            prop_assert!((back.h() - a.h()).abs() < 1e-9);
        }
    }
}
