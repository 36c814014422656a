use clicktrack_core::evaluation::experiments::{
    run_deviation_experiment, run_refiner_comparison, EvalConfig, InitMethod, ModelSet, SequenceSet,
};
use clicktrack_core::evaluation::metrics::{sequence_metrics, sot_metrics};
use clicktrack_core::evaluation::report::{emit_report, read_report, Experiment, Report, REPORT_FILE};
use clicktrack_core::geometry::{iou, BBox};
use clicktrack_core::tracker::{track_sequence, TrackerConfig};
use clicktrack_core::training::corpus::{CorpusConfig, Split};
use clicktrack_core::training::synth::{render, MotionConfig, SceneConfig};
use proptest::prelude::*;

fn small_corpus(frames: usize, speed: f64) -> CorpusConfig {
    CorpusConfig {
        sequences: 3,
        frames,
        scene: SceneConfig {
            width: 128,
            height: 128,
            whole_side: (40.0, 70.0),
            single_side: (24.0, 50.0),
            clutter: 6,
            ..Default::default()
        },
        motion: MotionConfig {
            max_speed: speed,
            max_scale_rate: 0.0,
        },
        ..Default::default()
    }
}

fn mean_iou(pred: &[BBox], gt: &[BBox]) -> f64 {
    pred.iter().zip(gt).map(|(p, g)| iou(p, g)).sum::<f64>() / pred.len() as f64
}

#[test]
fn static_sequences_are_held_in_place() {
    let src = small_corpus(60, 0.0).source(Split::Sequences);
    for i in 0..src.len() {
        let scene = src.get(i).unwrap();
        for obj in scene.isolated() {
            let records = track_sequence(&scene.frames, &obj.boxes[0], &TrackerConfig::default()).unwrap();
            let pred: Vec<BBox> = records.iter().map(|r| r.bbox).collect();
            let m = mean_iou(&pred, &obj.boxes[1..]);
            assert!(m >= 0.9, "scene {i} object {}: mean IoU {m}", obj.id);
        }
    }
}

#[test]
fn steady_translation_is_followed() {
    let mut cfg = small_corpus(2, 0.0);
    cfg.sequences = 20;
    let frames = 20;
    let src = cfg.source(Split::Sequences);
    // An object without parts that has 40 px of room on one side.
    let (scene, target, step) = (0..src.len())
        .find_map(|i| {
            let scene = src.get(i).unwrap().into_owned();
            let pick = scene.isolated().iter().find_map(|o| {
                let b = o.boxes[0];
                if 128.0 - b.x1 >= 40.0 {
                    Some((o.id, 2.0))
                } else if b.x0 >= 40.0 {
                    Some((o.id, -2.0))
                } else {
                    None
                }
            });
            pick.map(|(id, step)| (scene, id, step))
        })
        .expect("some scene has room to move");
    let mut objects = scene.objects.clone();
    for o in &mut objects {
        let b = o.boxes[0];
        let step = if o.id == target { step } else { 0.0 };
        o.boxes = (0..frames)
            .map(|t| BBox::new(b.x0 + step * t as f64, b.y0, b.x1 + step * t as f64, b.y1).unwrap())
            .collect();
        o.occluded = vec![false; frames];
    }
    let images: Vec<_> = (0..frames).map(|t| render(scene.size, &scene.background, &objects, t)).collect();
    let obj = objects.iter().find(|o| o.id == target).unwrap();
    let records = track_sequence(&images, &obj.boxes[0], &TrackerConfig::default()).unwrap();
    let pred: Vec<BBox> = records.iter().map(|r| r.bbox).collect();
    let m = mean_iou(&pred, &obj.boxes[1..]);
    assert!(m >= 0.5, "mean IoU {m}");
}

#[test]
fn zero_deviation_matches_ground_truth_initialization() {
    let seqs = SequenceSet::generated(&small_corpus(8, 2.0), 3);
    let cfg = EvalConfig::default();
    let curve = run_deviation_experiment(&seqs, &cfg, &[0.0, 0.2]).unwrap();
    let cmp = run_refiner_comparison(&ModelSet::default(), &seqs, &cfg, &[InitMethod::GroundTruth]).unwrap();
    let upper = &cmp.row(InitMethod::GroundTruth).unwrap().report;
    let zero = &curve.points[0];
    assert_eq!(zero.init_iou, 1.0);
    assert_eq!(zero.report.sequences, upper.sequences);
    assert_eq!(zero.success_auc, upper.success_auc);
    assert_eq!(zero.precision, upper.precision);
    assert_eq!(zero.norm_precision, upper.norm_precision);
    assert_eq!(curve, run_deviation_experiment(&seqs, &cfg, &[0.0, 0.2]).unwrap());
}

#[test]
fn report_round_trips_and_plots_are_png() {
    let seqs = SequenceSet::generated(&small_corpus(6, 2.0), 2);
    let cfg = EvalConfig::default();
    let curve = run_deviation_experiment(&seqs, &cfg, &[0.0, 0.1, 0.2, 0.3]).unwrap();
    let mut report = Report::new("0.1.0+test", cfg, serde_json::json!({ "sequences": 2 }));
    report.experiments.push(Experiment::Deviation(curve));
    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(&report, dir.path()).unwrap();
    assert_eq!(read_report(&dir.path().join(REPORT_FILE)).unwrap(), report);
    let pngs: Vec<_> = files.iter().filter(|p| p.extension().is_some_and(|e| e == "png")).collect();
    assert!(!pngs.is_empty());
    for p in pngs {
        let bytes = std::fs::read(p).unwrap();
        assert!(bytes.len() > 100 && bytes.starts_with(b"\x89PNG"), "{}", p.display());
    }
}

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0..200.0f64, 0.0..200.0f64, 1.0..80.0f64, 1.0..80.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

fn arb_track() -> impl Strategy<Value = Vec<(BBox, BBox, BBox)>> {
    prop::collection::vec((arb_box(), arb_box(), arb_box()), 1..40)
}

proptest! {
    #[test]
    fn metrics_are_bounded(track in arb_track()) {
        let gt: Vec<BBox> = track.iter().map(|t| t.0).collect();
        let pred: Vec<BBox> = track.iter().map(|t| t.1).collect();
        let m = sot_metrics(&pred, &gt).unwrap();
        for v in [m.success_auc, m.precision, m.norm_precision, m.mean_iou] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(m.success_curve.windows(2).all(|w| w[1].1 <= w[0].1));
    }

    #[test]
    fn success_auc_is_monotone_in_framewise_iou(track in arb_track()) {
        let gt: Vec<BBox> = track.iter().map(|t| t.0).collect();
        let a: Vec<BBox> = track.iter().map(|t| t.1).collect();
        let better: Vec<BBox> = track
            .iter()
            .map(|(g, p, q)| if iou(q, g) >= iou(p, g) { *q } else { *p })
            .collect();
        let (ma, mb) = (sequence_metrics("a", &a, &gt).unwrap(), sequence_metrics("b", &better, &gt).unwrap());
        prop_assert!(mb.success_auc >= ma.success_auc);
        prop_assert!(mb.mean_iou >= ma.mean_iou - 1e-12);
    }

    #[test]
    fn ground_truth_predictions_score_one(track in arb_track()) {
        let gt: Vec<BBox> = track.iter().map(|t| t.0).collect();
        let m = sot_metrics(&gt, &gt).unwrap();
        prop_assert_eq!(m.success_auc, 1.0);
        prop_assert_eq!(m.precision, 1.0);
    }
}
