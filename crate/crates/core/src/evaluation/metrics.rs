//! Success, precision and normalized precision over aligned box lists.
//!
//! Success(t) counts frames with IoU above `t`; at `t = 1` the test becomes
//! IoU equal to 1 so that a perfect prediction scores a full AUC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

pub const SUCCESS_THRESHOLDS: usize = 21;
pub const NORM_THRESHOLDS: usize = 21;
pub const PRECISION_PX: f64 = 20.0;

pub fn success_threshold(i: usize) -> f64 {
    i as f64 * 0.05
}

pub fn norm_threshold(i: usize) -> f64 {
    i as f64 * 0.025
}

fn succeeds(overlap: f64, t: f64) -> bool {
    if t >= 1.0 {
        overlap >= 1.0
    } else {
        overlap > t
    }
}

/// Per-sequence counts; every aggregate is derived from these so that the
/// breakdown and the totals always agree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub id: String,
    pub frames: usize,
    pub success_counts: Vec<usize>,
    pub precise: usize,
    pub norm_counts: Vec<usize>,
    pub iou_sum: f64,
    pub success_auc: f64,
    pub precision: f64,
    pub norm_precision: f64,
    pub mean_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub success_auc: f64,
    pub precision: f64,
    pub norm_precision: f64,
    pub mean_iou: f64,
    pub frames: usize,
    /// `(threshold, fraction)` pairs.
    pub success_curve: Vec<(f64, f64)>,
    pub norm_curve: Vec<(f64, f64)>,
    pub sequences: Vec<SequenceMetrics>,
    #[serde(default)]
    pub config: serde_json::Value,
}

fn center_errors(p: &BBox, g: &BBox) -> (f64, f64) {
    let (pc, gc) = (p.center(), g.center());
    let (dx, dy) = (pc.x - gc.x, pc.y - gc.y);
    let px = (dx * dx + dy * dy).sqrt();
    let norm = ((dx / g.width()).powi(2) + (dy / g.height()).powi(2)).sqrt();
    (px, norm)
}

pub fn sequence_metrics(id: &str, pred: &[BBox], gt: &[BBox]) -> Result<SequenceMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::Input(format!(
            "{} predicted boxes for {} ground-truth boxes",
            pred.len(),
            gt.len()
        )));
    }
    let mut success_counts = vec![0; SUCCESS_THRESHOLDS];
    let mut norm_counts = vec![0; NORM_THRESHOLDS];
    let mut precise = 0;
    let mut iou_sum = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let o = iou(p, g);
        iou_sum += o;
        for (i, c) in success_counts.iter_mut().enumerate() {
            *c += succeeds(o, success_threshold(i)) as usize;
        }
        let (px, norm) = center_errors(p, g);
        precise += (px <= PRECISION_PX) as usize;
        for (i, c) in norm_counts.iter_mut().enumerate() {
            *c += (norm <= norm_threshold(i)) as usize;
        }
    }
    let mut m = SequenceMetrics {
        id: id.to_string(),
        frames: pred.len(),
        success_counts,
        precise,
        norm_counts,
        iou_sum,
        success_auc: 0.0,
        precision: 0.0,
        norm_precision: 0.0,
        mean_iou: 0.0,
    };
    let (s, p, n, i) = rates(m.frames, &m.success_counts, m.precise, &m.norm_counts, m.iou_sum);
    m.success_auc = s;
    m.precision = p;
    m.norm_precision = n;
    m.mean_iou = i;
    Ok(m)
}

fn mean_fraction(counts: &[usize], frames: usize) -> f64 {
    counts.iter().map(|&c| c as f64 / frames as f64).sum::<f64>() / counts.len() as f64
}

fn rates(frames: usize, success: &[usize], precise: usize, norm: &[usize], iou_sum: f64) -> (f64, f64, f64, f64) {
    if frames == 0 {
        return (0.0, 0.0, 0.0, 0.0);
    }
    (
        mean_fraction(success, frames),
        precise as f64 / frames as f64,
        mean_fraction(norm, frames),
        iou_sum / frames as f64,
    )
}

/// Pools the frames of every sequence.
pub fn aggregate(sequences: Vec<SequenceMetrics>, config: serde_json::Value) -> MetricReport {
    let frames: usize = sequences.iter().map(|s| s.frames).sum();
    let mut success = vec![0; SUCCESS_THRESHOLDS];
    let mut norm = vec![0; NORM_THRESHOLDS];
    let mut precise = 0;
    let mut iou_sum = 0.0;
    for s in &sequences {
        success.iter_mut().zip(&s.success_counts).for_each(|(a, b)| *a += b);
        norm.iter_mut().zip(&s.norm_counts).for_each(|(a, b)| *a += b);
        precise += s.precise;
        iou_sum += s.iou_sum;
    }
    let (success_auc, precision, norm_precision, mean_iou) = rates(frames, &success, precise, &norm, iou_sum);
    let curve = |counts: &[usize], t: fn(usize) -> f64| {
        counts
            .iter()
            .enumerate()
            .map(|(i, &c)| (t(i), if frames == 0 { 0.0 } else { c as f64 / frames as f64 }))
            .collect()
    };
    MetricReport {
        success_auc,
        precision,
        norm_precision,
        mean_iou,
        frames,
        success_curve: curve(&success, success_threshold),
        norm_curve: curve(&norm, norm_threshold),
        sequences,
        config,
    }
}

/// Metrics of a single aligned sequence.
pub fn sot_metrics(pred: &[BBox], gt: &[BBox]) -> Result<MetricReport> {
    Ok(aggregate(vec![sequence_metrics("0", pred, gt)?], serde_json::Value::Null))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gt = vec![b(10.0, 10.0, 50.0, 40.0); 5];
        let r = sot_metrics(&gt, &gt).unwrap();
        assert_eq!((r.success_auc, r.precision, r.norm_precision), (1.0, 1.0, 1.0));
    }

    #[test]
    fn far_disjoint_predictions_score_zero() {
        let gt = vec![b(10.0, 10.0, 30.0, 30.0); 4];
        let pred = vec![b(100.0, 100.0, 120.0, 120.0); 4];
        let r = sot_metrics(&pred, &gt).unwrap();
        assert_eq!((r.success_auc, r.precision, r.norm_precision), (0.0, 0.0, 0.0));
    }

    #[test]
    fn half_and_half() {
        let gt = vec![b(10.0, 10.0, 30.0, 30.0); 4];
        let mut pred = gt.clone();
        pred[2] = b(100.0, 100.0, 120.0, 120.0);
        pred[3] = pred[2];
        let r = sot_metrics(&pred, &gt).unwrap();
        assert_eq!((r.success_auc, r.precision), (0.5, 0.5));
    }

    #[test]
    fn length_mismatch_is_an_input_error() {
        let gt = vec![b(0.0, 0.0, 1.0, 1.0); 2];
        assert!(matches!(sot_metrics(&gt[..1], &gt), Err(Error::Input(_))));
    }
}
