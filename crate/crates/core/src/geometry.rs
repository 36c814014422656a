//! Pixel-space box and point arithmetic.
//!
//! Boxes use the corner convention `(x0, y0, x1, y1)` with `x0 < x1` and
//! `y0 < y1`, serialized as a JSON array `[x0, y0, x1, y1]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest magnitude allowed for the log-size terms of a [`BoxDelta`].
pub const LOG_SCALE_CLAMP: f64 = 4.0;

const PERTURB_RETRIES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// True when the point lies in `[0, width) x [0, height)`.
    pub fn within(&self, size: ImageSize) -> bool {
        self.is_finite()
            && self.x >= 0.0
            && self.y >= 0.0
            && self.x < size.width as f64
            && self.y < size.height as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: usize,
    pub height: usize,
}

impl ImageSize {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }
}

/// Axis-aligned box with strictly positive area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        if !(x0.is_finite() && y0.is_finite() && x1.is_finite() && y1.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "non-finite box ({x0}, {y0}, {x1}, {y1})"
            )));
        }
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::InvalidGeometry(format!(
                "box ({x0}, {y0}, {x1}, {y1}) has no area"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point {
        Point::new((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        (*self).into()
    }

    /// Strict interior test.
    pub fn contains_strictly(&self, p: Point) -> bool {
        p.x > self.x0 && p.x < self.x1 && p.y > self.y0 && p.y < self.y1
    }

    /// True when `other` lies strictly inside `self` on all four sides.
    pub fn contains_box_strictly(&self, other: &BBox) -> bool {
        other.x0 > self.x0 && other.y0 > self.y0 && other.x1 < self.x1 && other.y1 < self.y1
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    /// Clips to `[0, width] x [0, height]`.
    pub fn clip(&self, size: ImageSize) -> Result<BBox> {
        let (w, h) = (size.width as f64, size.height as f64);
        BBox::new(
            self.x0.clamp(0.0, w),
            self.y0.clamp(0.0, h),
            self.x1.clamp(0.0, w),
            self.y1.clamp(0.0, h),
        )
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x0: self.x0 + dx,
            y0: self.y0 + dy,
            x1: self.x1 + dx,
            y1: self.y1 + dy,
        }
    }

    /// Mirror across the vertical axis of an image of width `width`.
    pub fn hflip(&self, width: usize) -> BBox {
        let w = width as f64;
        BBox {
            x0: w - self.x1,
            y0: self.y0,
            x1: w - self.x0,
            y1: self.y1,
        }
    }
}

/// Distances from a point to the left, top, right and bottom box edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeDistances {
    pub l: f64,
    pub t: f64,
    pub r: f64,
    pub b: f64,
}

impl EdgeDistances {
    pub fn new(l: f64, t: f64, r: f64, b: f64) -> Self {
        Self { l, t, r, b }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.l, self.t, self.r, self.b]
    }
}

/// Anchor scales are areas in square pixels; ratios are width:height.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            scales: vec![32.0 * 32.0, 64.0 * 64.0, 128.0 * 128.0, 256.0 * 256.0],
            ratios: vec![2.0, 1.0, 0.5],
        }
    }
}

impl AnchorConfig {
    pub fn count(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.count() == 0 {
            return Err(Error::Config("anchor config needs at least one scale and ratio".into()));
        }
        let bad = self
            .scales
            .iter()
            .chain(&self.ratios)
            .any(|v| !(v.is_finite() && *v > 0.0));
        if bad {
            return Err(Error::Config("anchor scales and ratios must be positive".into()));
        }
        Ok(())
    }
}

/// Center offsets normalized by anchor size plus log-size factors.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Self {
        Self { dx, dy, dw, dh }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

pub fn box_from_point_distances(p: Point, d: EdgeDistances) -> Result<BBox> {
    if d.to_array().iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidGeometry(format!("invalid edge distances {d:?}")));
    }
    BBox::new(p.x - d.l, p.y - d.t, p.x + d.r, p.y + d.b)
}

pub fn distances_from_box(p: Point, b: &BBox) -> Result<EdgeDistances> {
    if !b.contains_strictly(p) {
        return Err(Error::PointOutside { x: p.x, y: p.y });
    }
    Ok(EdgeDistances::new(
        p.x - b.x0,
        p.y - b.y0,
        b.x1 - p.x,
        b.y1 - p.y,
    ))
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Generalized IoU, in `[-1, 1]`.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let hull = (a.x1.max(b.x1) - a.x0.min(b.x0)) * (a.y1.max(b.y1) - a.y0.min(b.y0));
    inter / union - (hull - union) / hull
}

/// Anchor prototypes centered on `p`, ordered scales-major, ratios-minor,
/// clipped to the image.
pub fn generate_prototypes(p: Point, cfg: &AnchorConfig, size: ImageSize) -> Result<Vec<BBox>> {
    cfg.validate()?;
    if !p.within(size) {
        return Err(Error::Input(format!(
            "point ({}, {}) outside {}x{} image",
            p.x, p.y, size.width, size.height
        )));
    }
    let mut out = Vec::with_capacity(cfg.count());
    for &area in &cfg.scales {
        for &ratio in &cfg.ratios {
            let w = (area * ratio).sqrt();
            let h = (area / ratio).sqrt();
            let raw = BBox {
                x0: p.x - w / 2.0,
                y0: p.y - h / 2.0,
                x1: p.x + w / 2.0,
                y1: p.y + h / 2.0,
            };
            out.push(raw.clip(size)?);
        }
    }
    Ok(out)
}

pub fn encode_delta(anchor: &BBox, target: &BBox) -> Result<BoxDelta> {
    let (ac, tc) = (anchor.center(), target.center());
    let (aw, ah) = (anchor.width(), anchor.height());
    let d = BoxDelta::new(
        (tc.x - ac.x) / aw,
        (tc.y - ac.y) / ah,
        (target.width() / aw).ln(),
        (target.height() / ah).ln(),
    );
    if d.to_array().iter().all(|v| v.is_finite()) {
        Ok(d)
    } else {
        Err(Error::Numeric(format!("non-finite delta {d:?}")))
    }
}

pub fn apply_delta(anchor: &BBox, d: &BoxDelta) -> Result<BBox> {
    if !d.to_array().iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite delta {d:?}")));
    }
    let c = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = c.x + d.dx * aw;
    let cy = c.y + d.dy * ah;
    let w = aw * d.dw.clamp(-LOG_SCALE_CLAMP, LOG_SCALE_CLAMP).exp();
    let h = ah * d.dh.clamp(-LOG_SCALE_CLAMP, LOG_SCALE_CLAMP).exp();
    BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

/// Uniform sample from the ellipse centered on the box with semi-axes of a
/// quarter of its width and height.
pub fn sample_click<R: Rng + ?Sized>(gt: &BBox, rng: &mut R) -> Point {
    let c = gt.center();
    let (a, b) = (gt.width() / 4.0, gt.height() / 4.0);
    let r = rng.random::<f64>().sqrt();
    let theta = rng.random::<f64>() * std::f64::consts::TAU;
    Point::new(c.x + a * r * theta.cos(), c.y + b * r * theta.sin())
}

/// Displaces each edge independently by `uniform(-rate, rate)` times the
/// matching side length.
pub fn perturb_box<R: Rng + ?Sized>(gt: &BBox, rate: f64, rng: &mut R) -> Result<BBox> {
    if !(0.0..=0.5).contains(&rate) {
        return Err(Error::Input(format!("deviation rate {rate} outside [0, 0.5]")));
    }
    if rate == 0.0 {
        return Ok(*gt);
    }
    let (w, h) = (gt.width(), gt.height());
    for _ in 0..PERTURB_RETRIES {
        let mut jitter = |side: f64| rng.random_range(-rate..=rate) * side;
        let x0 = gt.x0 + jitter(w);
        let y0 = gt.y0 + jitter(h);
        let x1 = gt.x1 + jitter(w);
        let y1 = gt.y1 + jitter(h);
        if let Ok(b) = BBox::new(x0, y0, x1, y1) {
            return Ok(b);
        }
    }
    Err(Error::InvalidGeometry(format!(
        "perturbation at rate {rate} collapsed the box {PERTURB_RETRIES} times"
    )))
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, bv)) if v <= bv => {}
            _ if v.is_nan() => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn assert_box_close(a: &BBox, b: &BBox, tol: f64) {
        for (u, v) in a.to_array().iter().zip(b.to_array()) {
            assert!((u - v).abs() < tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn point_distances_to_box() {
        let p = Point::new(50.0, 50.0);
        let b = box_from_point_distances(p, EdgeDistances::new(10.0, 20.0, 30.0, 40.0)).unwrap();
        assert_eq!(b, bb(40.0, 30.0, 80.0, 90.0));
        let b = box_from_point_distances(p, EdgeDistances::new(10.0, 10.0, 10.0, 10.0)).unwrap();
        assert_eq!(b, bb(40.0, 40.0, 60.0, 60.0));
        let err = box_from_point_distances(Point::new(5.0, 5.0), EdgeDistances::new(0.0, 0.0, 0.0, 0.0));
        assert!(matches!(err, Err(Error::InvalidGeometry(_))));
    }

    #[test]
    fn box_to_point_distances() {
        let d = distances_from_box(Point::new(50.0, 50.0), &bb(40.0, 30.0, 80.0, 90.0)).unwrap();
        assert_eq!(d, EdgeDistances::new(10.0, 20.0, 30.0, 40.0));
        let d = distances_from_box(Point::new(5.0, 5.0), &bb(0.0, 0.0, 10.0, 10.0)).unwrap();
        assert_eq!(d, EdgeDistances::new(5.0, 5.0, 5.0, 5.0));
        let err = distances_from_box(Point::new(0.0, 5.0), &bb(0.0, 0.0, 10.0, 10.0));
        assert!(matches!(err, Err(Error::PointOutside { .. })));
    }

    #[test]
    fn iou_examples() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bb(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert!((iou(&a, &bb(5.0, 0.0, 15.0, 10.0)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn prototype_examples() {
        let size = ImageSize::new(400, 400);
        let p = Point::new(100.0, 100.0);
        let square = AnchorConfig {
            scales: vec![64.0 * 64.0],
            ratios: vec![1.0],
        };
        assert_eq!(generate_prototypes(p, &square, size).unwrap(), vec![bb(68.0, 68.0, 132.0, 132.0)]);

        let wide = AnchorConfig {
            scales: vec![64.0 * 64.0],
            ratios: vec![2.0],
        };
        let b = generate_prototypes(p, &wide, size).unwrap()[0];
        assert_box_close(&b, &bb(54.75, 77.37, 145.25, 122.63), 0.01);

        let big = AnchorConfig {
            scales: vec![256.0 * 256.0],
            ratios: vec![1.0],
        };
        let b = generate_prototypes(Point::new(10.0, 10.0), &big, ImageSize::new(200, 200)).unwrap()[0];
        assert_eq!(b, bb(0.0, 0.0, 138.0, 138.0));
    }

    #[test]
    fn default_anchor_count_and_order() {
        let cfg = AnchorConfig::default();
        let boxes = generate_prototypes(Point::new(128.0, 128.0), &cfg, ImageSize::new(256, 256)).unwrap();
        assert_eq!(boxes.len(), 12);
        // scales-major: first three share the smallest area, widest first.
        assert!(boxes[0].width() > boxes[1].width() && boxes[1].width() > boxes[2].width());
        assert!((boxes[1].area() - 1024.0).abs() < 1e-9);
        assert!((boxes[4].area() - 4096.0).abs() < 1e-9);
    }

    #[test]
    fn delta_examples() {
        let anchor = bb(40.0, 40.0, 60.0, 60.0);
        let d = encode_delta(&anchor, &bb(45.0, 40.0, 65.0, 64.0)).unwrap();
        assert!((d.dx - 0.25).abs() < 1e-12);
        assert!((d.dy - 0.10).abs() < 1e-12);
        assert!(d.dw.abs() < 1e-12);
        assert!((d.dh - 1.2f64.ln()).abs() < 1e-12);
        assert_eq!(apply_delta(&anchor, &BoxDelta::default()).unwrap(), anchor);
        assert!(matches!(
            apply_delta(&anchor, &BoxDelta::new(f64::NAN, 0.0, 0.0, 0.0)),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn log_scale_is_clamped() {
        let anchor = bb(0.0, 0.0, 10.0, 10.0);
        let b = apply_delta(&anchor, &BoxDelta::new(0.0, 0.0, 10.0, -10.0)).unwrap();
        assert!((b.width() - 10.0 * 4f64.exp()).abs() < 1e-9);
        assert!((b.height() - 10.0 * (-4f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn click_sampler_membership_and_small_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = bb(0.0, 0.0, 100.0, 60.0);
        for _ in 0..10_000 {
            let p = sample_click(&gt, &mut rng);
            let e = ((p.x - 50.0) / 25.0).powi(2) + ((p.y - 30.0) / 15.0).powi(2);
            assert!(e <= 1.0 + 1e-12);
            assert!(gt.contains_strictly(p));
        }
        let tiny = bb(10.0, 10.0, 12.0, 12.0);
        for _ in 0..1000 {
            let p = sample_click(&tiny, &mut rng);
            assert!((p.x - 11.0).abs() <= 0.5 && (p.y - 11.0).abs() <= 0.5);
        }
    }

    #[test]
    fn perturb_bounds_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = bb(0.0, 0.0, 100.0, 100.0);
        assert_eq!(perturb_box(&gt, 0.0, &mut rng).unwrap(), gt);
        for _ in 0..1000 {
            let b = perturb_box(&gt, 0.2, &mut rng).unwrap();
            for (u, v) in b.to_array().iter().zip(gt.to_array()) {
                assert!((u - v).abs() <= 20.0 + 1e-9);
            }
        }
        assert!(perturb_box(&gt, 0.6, &mut rng).is_err());
    }

    #[test]
    fn perturbation_degrades_iou_monotonically() {
        // Monte-Carlo oracle: mean IoU over 10^4 draws per rate.
        let gt = bb(20.0, 30.0, 120.0, 90.0);
        let means: Vec<f64> = [0.1, 0.2, 0.3]
            .iter()
            .map(|&rate| {
                let mut rng = ChaCha8Rng::seed_from_u64(11);
                (0..10_000)
                    .map(|_| iou(&gt, &perturb_box(&gt, rate, &mut rng).unwrap()))
                    .sum::<f64>()
                    / 10_000.0
            })
            .collect();
        assert!(means[0] > means[1] && means[1] > means[2], "{means:?}");
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax_first(&[0.1, 0.9, 0.9, 0.2]), Some(1));
        assert_eq!(argmax_first(&[]), None);
        assert_eq!(argmax_first(&[f64::NAN, 0.5]), Some(1));
    }

    #[test]
    fn serde_array_form() {
        let b = bb(1.0, 2.0, 3.5, 4.0);
        let s = serde_json::to_string(&b).unwrap();
        assert_eq!(s, "[1.0,2.0,3.5,4.0]");
        assert_eq!(serde_json::from_str::<BBox>(&s).unwrap(), b);
        assert!(serde_json::from_str::<BBox>("[3,0,1,1]").is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_box() -> impl Strategy<Value = BBox> {
            (-200.0..200.0f64, -200.0..200.0f64, 1.0..150.0f64, 1.0..150.0f64)
                .prop_map(|(x, y, w, h)| bb(x, y, x + w, y + h))
        }

        proptest! {
            #[test]
            fn distances_round_trip(px in -100.0..100.0f64, py in -100.0..100.0f64,
                                    l in 0.01..80.0f64, t in 0.01..80.0f64,
                                    r in 0.01..80.0f64, b in 0.01..80.0f64) {
                let p = Point::new(px, py);
                let d = EdgeDistances::new(l, t, r, b);
                let bx = box_from_point_distances(p, d).unwrap();
                let back = distances_from_box(p, &bx).unwrap();
                // Exact only up to the floating rounding of p -/+ d.
                for (u, v) in back.to_array().iter().zip(d.to_array()) {
                    prop_assert!((u - v).abs() <= 1e-12 * (1.0 + px.abs().max(py.abs())));
                }
            }

            #[test]
            fn iou_symmetric_bounded(a in arb_box(), b in arb_box()) {
                let (ab, ba) = (iou(&a, &b), iou(&b, &a));
                prop_assert_eq!(ab, ba);
                prop_assert!((0.0..=1.0).contains(&ab));
                prop_assert_eq!(iou(&a, &a), 1.0);
                let g = giou(&a, &b);
                prop_assert!((-1.0..=1.0 + 1e-12).contains(&g) && g <= ab + 1e-12);
            }

            #[test]
            fn delta_round_trip(a in arb_box(), t in arb_box()) {
                prop_assume!((t.width() / a.width()).ln().abs() < LOG_SCALE_CLAMP);
                prop_assume!((t.height() / a.height()).ln().abs() < LOG_SCALE_CLAMP);
                let back = apply_delta(&a, &encode_delta(&a, &t).unwrap()).unwrap();
                for (u, v) in back.to_array().iter().zip(t.to_array()) {
                    prop_assert!((u - v).abs() < 1e-6);
                }
            }
        }
    }
}
