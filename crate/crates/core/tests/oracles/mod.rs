//! Independent oracles for the geometry and RoI code. Each check returns a
//! one-line summary on success.
#![allow(dead_code)]

use clicktrack_core::autodiff::Graph;
use clicktrack_core::features::{roi_align, roi_align_var};
use clicktrack_core::geometry::{
    apply_delta, box_from_point_distances, distances_from_box, encode_delta, iou, sample_click, BBox, EdgeDistances,
    Point,
};
use clicktrack_core::tensor::Tensor;
use clicktrack_core::FeatureMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Outcome = Result<String, String>;

fn int_box(rng: &mut ChaCha8Rng, span: i32) -> (i32, i32, i32, i32) {
    let x0 = rng.random_range(0..span - 1);
    let y0 = rng.random_range(0..span - 1);
    (x0, y0, rng.random_range(x0 + 1..=span), rng.random_range(y0 + 1..=span))
}

fn covers(b: (i32, i32, i32, i32), x: i32, y: i32) -> bool {
    b.0 <= x && x < b.2 && b.1 <= y && y < b.3
}

/// IoU of integer boxes against counting covered unit pixels.
pub fn iou_matches_raster(pairs: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = 48;
    for n in 0..pairs {
        let (a, b) = (int_box(&mut rng, span), int_box(&mut rng, span));
        let (mut inter, mut union) = (0u32, 0u32);
        for y in 0..span {
            for x in 0..span {
                let (ia, ib) = (covers(a, x, y), covers(b, x, y));
                inter += (ia && ib) as u32;
                union += (ia || ib) as u32;
            }
        }
        let raster = inter as f64 / union as f64;
        let f = |b: (i32, i32, i32, i32)| BBox::new(b.0 as f64, b.1 as f64, b.2 as f64, b.3 as f64).unwrap();
        let analytic = iou(&f(a), &f(b));
        if analytic != raster {
            return Err(format!("pair {n} {a:?} {b:?}: iou {analytic} raster {raster}"));
        }
    }
    Ok(format!("{pairs} integer pairs agree exactly"))
}

/// `apply_delta(a, encode_delta(a, t))` recovers `t`.
pub fn delta_round_trip(n: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let random_box = |rng: &mut ChaCha8Rng| {
            let (x, y) = (rng.random_range(-50.0..300.0), rng.random_range(-50.0..300.0));
            BBox::new(x, y, x + rng.random_range(4.0..150.0), y + rng.random_range(4.0..150.0)).unwrap()
        };
        let (a, t) = (random_box(&mut rng), random_box(&mut rng));
        let back = apply_delta(&a, &encode_delta(&a, &t).unwrap()).unwrap();
        for (u, v) in back.to_array().iter().zip(t.to_array()) {
            worst = worst.max((u - v).abs());
        }
    }
    if worst < 1e-6 {
        Ok(format!("{n} pairs, max error {worst:.2e} px"))
    } else {
        Err(format!("max error {worst:e} px"))
    }
}

/// Point plus edge distances to a box and back, on a grid where every
/// value is exactly representable.
pub fn point_distance_round_trip(n: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = |rng: &mut ChaCha8Rng, lo: i32, hi: i32| rng.random_range(lo..hi) as f64 / 8.0;
    for _ in 0..n {
        let p = Point::new(q(&mut rng, -800, 800), q(&mut rng, -800, 800));
        let d = EdgeDistances::new(q(&mut rng, 1, 800), q(&mut rng, 1, 800), q(&mut rng, 1, 800), q(&mut rng, 1, 800));
        let b = box_from_point_distances(p, d).unwrap();
        let back = distances_from_box(p, &b).unwrap();
        if back != d {
            return Err(format!("p {p:?}: {d:?} came back as {back:?}"));
        }
        let again = box_from_point_distances(p, back).unwrap();
        if again != b {
            return Err(format!("p {p:?}: box {b:?} came back as {again:?}"));
        }
    }
    Ok(format!("{n} grid cases exact both ways"))
}

/// Clicks fall in the quarter-axis ellipse and average to the box center.
pub fn ellipse_sampler(draws: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let boxes = [
        BBox::new(10.0, 20.0, 110.0, 60.0).unwrap(),
        BBox::new(0.0, 0.0, 3.0, 200.0).unwrap(),
        BBox::new(-40.5, 7.25, 20.0, 30.0).unwrap(),
    ];
    let mut worst_center = 0.0f64;
    for gt in &boxes {
        let c = gt.center();
        let (a, b) = (gt.width() / 4.0, gt.height() / 4.0);
        let (mut sx, mut sy) = (0.0, 0.0);
        for i in 0..draws {
            let p = sample_click(gt, &mut rng);
            let r = ((p.x - c.x) / a).powi(2) + ((p.y - c.y) / b).powi(2);
            if r > 1.0 + 1e-12 || !gt.contains_strictly(p) {
                return Err(format!("draw {i} at {p:?} outside the ellipse of {gt:?}"));
            }
            sx += p.x;
            sy += p.y;
        }
        let (mx, my) = (sx / draws as f64, sy / draws as f64);
        worst_center = worst_center.max((mx - c.x).hypot(my - c.y));
    }
    if worst_center < 0.5 {
        Ok(format!("{draws} draws per box all inside, mean off center by {worst_center:.3} px"))
    } else {
        Err(format!("sample mean {worst_center} px from the center"))
    }
}

/// Bilinear read in feature coordinates, zero outside the one-cell border.
fn bilinear(fm: &FeatureMap<f64>, fx: f64, fy: f64, k: usize) -> f64 {
    let (h, w) = (fm.height as f64, fm.width as f64);
    if fx < -1.0 || fy < -1.0 || fx > w || fy > h {
        return 0.0;
    }
    let (x, y) = (fx.clamp(0.0, w - 1.0), fy.clamp(0.0, h - 1.0));
    let (j0, i0) = (x.floor() as usize, y.floor() as usize);
    let (j1, i1) = ((j0 + 1).min(fm.width - 1), (i0 + 1).min(fm.height - 1));
    let (ax, ay) = (x - j0 as f64, y - i0 as f64);
    let v = |i: usize, j: usize| fm.data[(i * fm.width + j) * fm.channels + k];
    (1.0 - ay) * ((1.0 - ax) * v(i0, j0) + ax * v(i0, j1)) + ay * ((1.0 - ax) * v(i1, j0) + ax * v(i1, j1))
}

/// RoIAlign with 2x2 samples per bin, one sample at a time.
fn dense_roi(fm: &FeatureMap<f64>, b: &BBox, s: usize) -> Vec<f64> {
    let st = fm.stride as f64;
    let to_f = |v: f64| v / st - 0.5;
    let (x0, y0) = (to_f(b.x0), to_f(b.y0));
    let (bw, bh) = ((to_f(b.x1) - x0) / s as f64, (to_f(b.y1) - y0) / s as f64);
    let mut out = vec![0.0; s * s * fm.channels];
    for by in 0..s {
        for bx in 0..s {
            for k in 0..fm.channels {
                let mut acc = 0.0;
                for sy in [0.25, 0.75] {
                    for sx in [0.25, 0.75] {
                        acc += bilinear(fm, x0 + (bx as f64 + sx) * bw, y0 + (by as f64 + sy) * bh, k);
                    }
                }
                out[(by * s + bx) * fm.channels + k] = acc / 4.0;
            }
        }
    }
    out
}

/// Both RoIAlign paths against the sample-by-sample oracle on random maps
/// and boxes, partly outside the image.
pub fn roi_align_oracle(boxes: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, c, stride, s) = (12, 10, 3, 8, 7);
    let data: Vec<f64> = (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let fm = FeatureMap::new(h, w, c, stride, data.clone());
    let mut worst = 0.0f64;
    for _ in 0..boxes {
        let x0 = rng.random_range(-30.0..90.0);
        let y0 = rng.random_range(-30.0..100.0);
        let b = BBox::new(x0, y0, x0 + rng.random_range(0.5..100.0), y0 + rng.random_range(0.5..100.0)).unwrap();
        let want = dense_roi(&fm, &b, s);
        let direct = roi_align(&fm, &b, s);
        let mut g = Graph::<f64>::new();
        let fv = g.constant(Tensor::new(vec![h, w, c], data.clone()));
        let gv = roi_align_var(&mut g, fv, fm.grid(), &[b], s);
        for ((u, v), t) in direct.data.iter().zip(&g.value(gv).data).zip(&want) {
            worst = worst.max((u - t).abs()).max((v - t).abs());
        }
    }
    if worst < 1e-5 {
        Ok(format!("{boxes} boxes, max error {worst:.2e}"))
    } else {
        Err(format!("max error {worst:e}"))
    }
}
