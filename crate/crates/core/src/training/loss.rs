//! Cascade loss: per-stage L1 on regression targets plus generalized IoU on
//! the decoded boxes, and L2 between predicted and true prototype IoU.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{distances_from_box, encode_delta, iou, BBox, LOG_SCALE_CLAMP};
use crate::refiners::baselines::DistanceTrace;
use crate::refiners::gcr::GcrTrace;
use crate::refiners::Prediction;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub regression: f64,
    pub giou: f64,
    pub score: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            regression: 1.0,
            giou: 2.0,
            score: 1.0,
        }
    }
}

/// Weighted components; `total` is their sum.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub regression: Var,
    pub giou: Var,
    pub score: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub regression: f64,
    pub giou: f64,
    pub score: f64,
}

impl LossTerms {
    pub fn values<T: Real>(&self, g: &Graph<T>) -> LossBreakdown {
        LossBreakdown {
            total: g.item(self.total).f64(),
            regression: g.item(self.regression).f64(),
            giou: g.item(self.giou).f64(),
            score: g.item(self.score).f64(),
        }
    }
}

fn full<T: Real>(g: &mut Graph<T>, values: Vec<f64>) -> Var {
    let n = values.len();
    g.constant_f64(&[n], &values)
}

/// Corner columns `[x0, y0, x1, y1]` of `n` boxes.
type Corners = [Var; 4];

/// Mean of `1 - GIoU` between `n` boxes and one target.
fn giou_loss<T: Real>(g: &mut Graph<T>, boxes: Corners, gt: &BBox) -> Var {
    let n = g.value(boxes[0]).len();
    let [x0, y0, x1, y1] = boxes;
    let t = gt.to_array().map(|v| full(g, vec![v; n]));
    let ix0 = g.max(x0, t[0]);
    let iy0 = g.max(y0, t[1]);
    let ix1 = g.min(x1, t[2]);
    let iy1 = g.min(y1, t[3]);
    let iw = g.sub(ix1, ix0);
    let iw = g.relu(iw);
    let ih = g.sub(iy1, iy0);
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih);
    let w = g.sub(x1, x0);
    let h = g.sub(y1, y0);
    let area = g.mul(w, h);
    let gt_area = full(g, vec![gt.area(); n]);
    let sum = g.add(area, gt_area);
    let union = g.sub(sum, inter);
    let iou = g.div(inter, union);
    let ex0 = g.min(x0, t[0]);
    let ey0 = g.min(y0, t[1]);
    let ex1 = g.max(x1, t[2]);
    let ey1 = g.max(y1, t[3]);
    let ew = g.sub(ex1, ex0);
    let eh = g.sub(ey1, ey0);
    let enclosing = g.mul(ew, eh);
    let gap = g.sub(enclosing, union);
    let penalty = g.div(gap, enclosing);
    let giou = g.sub(iou, penalty);
    let m = g.mean(giou);
    g.affine(m, -1.0, 1.0)
}

/// Decodes `n x 4` anchor-relative deltas into corner columns, with the same
/// log-scale clamp as the geometry module.
fn decode_deltas<T: Real>(g: &mut Graph<T>, deltas: Var, refs: &[BBox]) -> Corners {
    let col = |f: fn(&BBox) -> f64| refs.iter().map(f).collect::<Vec<f64>>();
    let (acx, acy) = (col(|b| b.center().x), col(|b| b.center().y));
    let (aw, ah) = (col(BBox::width), col(BBox::height));
    let (acx, acy, aw, ah) = (full(g, acx), full(g, acy), full(g, aw), full(g, ah));
    let dx = g.column(deltas, 0);
    let dy = g.column(deltas, 1);
    let dw = g.column(deltas, 2);
    let dh = g.column(deltas, 3);
    let ox = g.mul(dx, aw);
    let cx = g.add(acx, ox);
    let oy = g.mul(dy, ah);
    let cy = g.add(acy, oy);
    let dw = g.clamp(dw, -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP);
    let dh = g.clamp(dh, -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP);
    let sw = g.exp(dw);
    let sh = g.exp(dh);
    let w = g.mul(aw, sw);
    let h = g.mul(ah, sh);
    let hw = g.scale(w, 0.5);
    let hh = g.scale(h, 0.5);
    [g.sub(cx, hw), g.sub(cy, hh), g.add(cx, hw), g.add(cy, hh)]
}

/// Sum over coordinates of `|pred - target|`, averaged over rows.
fn l1<T: Real>(g: &mut Graph<T>, pred: Var, target: Vec<f64>) -> Var {
    let shape = g.shape(pred).to_vec();
    let rows = shape[0] as f64;
    let t = g.constant_f64(&shape, &target);
    let d = g.sub(pred, t);
    let a = g.abs(d);
    let s = g.sum(a);
    g.scale(s, 1.0 / rows)
}

fn delta_targets(refs: &[BBox], gt: &BBox) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(refs.len() * 4);
    for r in refs {
        let d = encode_delta(r, gt)?;
        out.extend(d.to_array().map(|v| v.clamp(-LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)));
    }
    Ok(out)
}

/// L1 on the scale-normalized delta and GIoU of the decoded box, for one
/// refinement stage applied to `input`.
fn stage_parts<T: Real>(g: &mut Graph<T>, delta: Var, input: &BBox, scale: [f64; 4], gt: &BBox) -> Result<(Var, Var)> {
    let refs = std::slice::from_ref(input);
    let target: Vec<f64> = delta_targets(refs, gt)?.iter().zip(scale).map(|(t, s)| t / s).collect();
    let inv = g.constant_f64(&[1, 4], &scale.map(|s| 1.0 / s));
    let normalized = g.mul(delta, inv);
    let reg = l1(g, normalized, target);
    let corners = decode_deltas(g, delta, refs);
    Ok((reg, giou_loss(g, corners, gt)))
}

/// Weighted loss of a refinement stage run on an extra input box, such as a
/// jittered copy of the target. Carries no score term.
pub fn stage_loss<T: Real>(
    g: &mut Graph<T>,
    delta: Var,
    input: &BBox,
    scale: [f64; 4],
    gt: &BBox,
    w: &LossWeights,
) -> Result<LossTerms> {
    let (reg, gl) = stage_parts(g, delta, input, scale, gt)?;
    let regression = g.scale(reg, w.regression);
    let giou = g.scale(gl, w.giou);
    let score = g.constant(Tensor::scalar(T::zero()));
    finish(g, regression, giou, score)
}

fn weighted<T: Real>(g: &mut Graph<T>, parts: &[Var], w: f64) -> Var {
    let s = if parts.is_empty() {
        g.constant(Tensor::scalar(T::zero()))
    } else {
        g.add_n(parts)
    };
    g.scale(s, w)
}

fn finish<T: Real>(g: &mut Graph<T>, regression: Var, giou: Var, score: Var) -> Result<LossTerms> {
    let total = g.add_n(&[regression, giou, score]);
    if !g.item(total).is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    Ok(LossTerms {
        total,
        regression,
        giou,
        score,
    })
}

fn gcr_loss<T: Real>(g: &mut Graph<T>, t: &GcrTrace, gt: &BBox, w: &LossWeights) -> Result<LossTerms> {
    let mut reg = vec![l1(g, t.anchor_deltas, delta_targets(&t.anchors, gt)?)];
    let corners = decode_deltas(g, t.anchor_deltas, &t.anchors);
    let mut gious = vec![giou_loss(g, corners, gt)];
    for ((delta, input), scale) in t.stage_deltas.iter().zip(&t.stage_inputs).zip(&t.stage_scales) {
        let (r, gl) = stage_parts(g, *delta, input, *scale, gt)?;
        reg.push(r);
        gious.push(gl);
    }
    let true_iou: Vec<f64> = t
        .refined
        .iter()
        .map(|r| r.map_or(0.0, |b| iou(&b, gt)))
        .collect();
    let k = true_iou.len();
    let target = g.constant_f64(&[k], &true_iou);
    let diff = g.sub(t.scores, target);
    let sq = g.square(diff);
    let mse = g.mean(sq);

    let regression = weighted(g, &reg, w.regression);
    let giou = weighted(g, &gious, w.giou);
    let score = g.scale(mse, w.score);
    finish(g, regression, giou, score)
}

fn distance_loss<T: Real>(
    g: &mut Graph<T>,
    t: &DistanceTrace,
    gt: &BBox,
    scale: f64,
    w: &LossWeights,
) -> Result<LossTerms> {
    let target = distances_from_box(t.click, gt)?.to_array().map(|v| v / scale);
    let reg = l1(g, t.distances, target.to_vec());
    let d = [0, 1, 2, 3].map(|j| g.column(t.distances, j));
    let d = d.map(|v| g.scale(v, scale));
    let (px, py) = (full(g, vec![t.click.x]), full(g, vec![t.click.y]));
    let corners = [g.sub(px, d[0]), g.sub(py, d[1]), g.add(px, d[2]), g.add(py, d[3])];
    let gl = giou_loss(g, corners, gt);
    let regression = g.scale(reg, w.regression);
    let giou = g.scale(gl, w.giou);
    let score = g.constant(Tensor::scalar(T::zero()));
    finish(g, regression, giou, score)
}

/// Loss of one prediction against its ground truth box. `distance_scale`
/// converts the baselines' normalized distances to pixels.
pub fn compute_loss<T: Real>(
    g: &mut Graph<T>,
    pred: &Prediction,
    gt: &BBox,
    weights: &LossWeights,
    distance_scale: f64,
) -> Result<LossTerms> {
    match pred {
        Prediction::Gcr(t) => gcr_loss(g, t, gt, weights),
        Prediction::Distance(t) => distance_loss(g, t, gt, distance_scale, weights),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{giou, BoxDelta, Point};

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn graph_giou_matches_geometry() {
        let gt = b(10.0, 20.0, 60.0, 50.0);
        let boxes = [b(0.0, 0.0, 30.0, 30.0), b(100.0, 100.0, 120.0, 130.0), gt, b(20.0, 25.0, 40.0, 45.0)];
        let mut g = Graph::<f64>::new();
        let cols: Vec<Var> = (0..4)
            .map(|j| full(&mut g, boxes.iter().map(|bx| bx.to_array()[j]).collect()))
            .collect();
        let l = giou_loss(&mut g, [cols[0], cols[1], cols[2], cols[3]], &gt);
        let want: f64 = boxes.iter().map(|bx| 1.0 - giou(bx, &gt)).sum::<f64>() / 4.0;
        assert!((g.item(l) - want).abs() < 1e-12);
    }

    #[test]
    fn graph_decode_matches_apply_delta() {
        let refs = [b(10.0, 10.0, 50.0, 30.0), b(0.0, 5.0, 7.0, 90.0)];
        let deltas = [0.1, -0.3, 0.2, -5.0, -0.7, 0.4, 4.5, 0.0];
        let mut g = Graph::<f64>::new();
        let d = g.constant_f64(&[2, 4], &deltas);
        let c = decode_deltas(&mut g, d, &refs);
        for (i, r) in refs.iter().enumerate() {
            let want = crate::geometry::apply_delta(r, &BoxDelta::from_slice(&deltas[i * 4..i * 4 + 4])).unwrap();
            for (j, v) in want.to_array().iter().enumerate() {
                assert!((g.value(c[j]).data[i] - v).abs() < 1e-9);
            }
        }
    }

    fn distance_trace(g: &mut Graph<f64>, click: Point, d: [f64; 4]) -> DistanceTrace {
        let distances = g.constant_f64(&[1, 4], &d);
        let output = b(click.x - 32.0 * d[0], click.y - 32.0 * d[1], click.x + 32.0 * d[2], click.y + 32.0 * d[3]);
        DistanceTrace { click, distances, output }
    }

    #[test]
    fn perfect_distances_give_zero_loss() {
        let gt = b(20.0, 30.0, 84.0, 62.0);
        let click = Point::new(36.0, 46.0);
        let mut g = Graph::new();
        let t = distance_trace(&mut g, click, [0.5, 0.5, 1.5, 0.5]);
        let l = compute_loss(&mut g, &Prediction::Distance(t), &gt, &LossWeights::default(), 32.0).unwrap();
        assert_eq!(g.item(l.total), 0.0);
    }

    #[test]
    fn doubling_regression_weight_doubles_its_component() {
        let gt = b(20.0, 30.0, 84.0, 62.0);
        let click = Point::new(36.0, 46.0);
        let run = |w: LossWeights| {
            let mut g = Graph::new();
            let t = distance_trace(&mut g, click, [0.3, 0.9, 1.1, 0.2]);
            let l = compute_loss(&mut g, &Prediction::Distance(t), &gt, &w, 32.0).unwrap();
            l.values(&g)
        };
        let base = run(LossWeights::default());
        let doubled = run(LossWeights {
            regression: 2.0,
            ..LossWeights::default()
        });
        assert!(base.regression > 0.0);
        assert_eq!(doubled.regression, 2.0 * base.regression);
        assert_eq!(doubled.giou, base.giou);
        assert!(base.total >= 0.0);
    }
}
