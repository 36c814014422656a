//! Refiner comparison, deviation, click robustness, attempts and held-out
//! refinement experiments. Every random draw comes from a stream keyed by
//! the experiment seed and the sample's position, so results do not depend
//! on evaluation order.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::metrics::{aggregate, sequence_metrics, MetricReport, SequenceMetrics};
use crate::geometry::{iou, perturb_box, sample_click, BBox, ImageSize, Point};
use crate::image::Image;
use crate::refiners::guidance::GuidanceKind;
use crate::refiners::{Encoded, Model, RefinerKind};
use crate::tracker::{track_sequence, TrackerConfig};
use crate::training::corpus::{CorpusConfig, SceneSource, Split};
use crate::training::synth::{SyntheticObject, SyntheticScene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttemptsConfig {
    pub max_attempts: usize,
    /// Simulated operator accepts an initial box with at least this IoU.
    pub accept_iou: f64,
    /// Deviation rate of hand-drawn boxes in box mode.
    pub box_rate: f64,
}

impl Default for AttemptsConfig {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            accept_iou: 0.5,
            box_rate: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    pub tracker: TrackerConfig,
    /// Overrides the model's inference stage count.
    pub stages: Option<usize>,
    pub deviation_rates: Vec<f64>,
    pub draws: usize,
    pub attempts: AttemptsConfig,
    pub cascade_stages: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            tracker: TrackerConfig::default(),
            stages: None,
            deviation_rates: vec![0.0, 0.1, 0.2, 0.3],
            draws: 6,
            attempts: AttemptsConfig::default(),
            cascade_stages: vec![0, 2, 4],
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for one draw.
pub fn stream(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    let s = keys.iter().fold(splitmix(seed), |acc, &k| splitmix(acc ^ splitmix(k)));
    ChaCha8Rng::seed_from_u64(s)
}

const TARGET: u64 = 1;
const CLICK: u64 = 2;
const DEVIATION: u64 = 3;
const ATTEMPT_POINT: u64 = 4;
const ATTEMPT_BOX: u64 = 5;
const HELDOUT: u64 = 6;
const NESTED: u64 = 7;
const DRAW: u64 = 8;

/// Evaluation sequences and their ids.
#[derive(Debug, Clone)]
pub struct SequenceSet {
    pub source: SceneSource,
    pub ids: Vec<String>,
}

impl SequenceSet {
    /// The first `n` sequences of a corpus, with the ids `write_corpus`
    /// gives them.
    pub fn generated(cfg: &CorpusConfig, n: usize) -> Self {
        let n = n.min(cfg.sequences);
        Self {
            source: cfg.source(Split::Sequences).take(n),
            ids: (0..n).map(|i| format!("{i:04}")).collect(),
        }
    }

    /// The first `n` sequences of a corpus directory.
    pub fn stored(root: &std::path::Path, n: usize) -> Result<Self> {
        let (source, mut ids) = crate::training::corpus::stored_split(root, Split::Sequences)?;
        ids.truncate(n);
        Ok(Self {
            source: source.take(n),
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// The object tracked in sequence `i`.
pub fn target<'a>(scene: &'a SyntheticScene, seed: u64, i: usize) -> &'a SyntheticObject {
    use rand::Rng;
    let mut rng = stream(seed, &[TARGET, i as u64]);
    &scene.objects[rng.random_range(0..scene.objects.len())]
}

#[derive(Debug, Default, Clone)]
pub struct ModelSet {
    pub gcr: Option<Model<f32>>,
    pub pfr: Option<Model<f32>>,
    pub bfr: Option<Model<f32>>,
}

impl ModelSet {
    pub fn insert(&mut self, model: Model<f32>) {
        let slot = match model.kind() {
            RefinerKind::Gcr => &mut self.gcr,
            RefinerKind::Pfr => &mut self.pfr,
            RefinerKind::Bfr => &mut self.bfr,
        };
        *slot = Some(model);
    }

    pub fn get(&self, kind: RefinerKind) -> Result<&Model<f32>> {
        match kind {
            RefinerKind::Gcr => self.gcr.as_ref(),
            RefinerKind::Pfr => self.pfr.as_ref(),
            RefinerKind::Bfr => self.bfr.as_ref(),
        }
        .ok_or_else(|| Error::Config(format!("no {kind} checkpoint loaded")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMethod {
    GroundTruth,
    /// Click with the learnable guidance vector.
    Gcr,
    /// Click plus the target's category.
    GcrText,
    Pfr,
    Bfr,
}

impl InitMethod {
    pub const ALL: [InitMethod; 5] = [
        InitMethod::GroundTruth,
        InitMethod::Gcr,
        InitMethod::GcrText,
        InitMethod::Pfr,
        InitMethod::Bfr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InitMethod::GroundTruth => "ground-truth",
            InitMethod::Gcr => "gcr",
            InitMethod::GcrText => "gcr-text",
            InitMethod::Pfr => "pfr",
            InitMethod::Bfr => "bfr",
        }
    }

    pub fn refiner(self) -> Option<RefinerKind> {
        match self {
            InitMethod::GroundTruth => None,
            InitMethod::Gcr | InitMethod::GcrText => Some(RefinerKind::Gcr),
            InitMethod::Pfr => Some(RefinerKind::Pfr),
            InitMethod::Bfr => Some(RefinerKind::Bfr),
        }
    }
}

/// Box used when the refiner cannot produce one: a small square on the
/// click.
pub fn fallback_box(p: Point, size: ImageSize) -> BBox {
    BBox::from_center(p.x, p.y, 16.0, 16.0)
        .and_then(|b| b.clip(size))
        .expect("click lies inside the image")
}

fn stages_for(model: &Model<f32>, cfg: &EvalConfig) -> usize {
    cfg.stages.unwrap_or(model.config.inference_stages).min(model.config.stages)
}

/// Refines a click; `None` when every anchor collapsed.
fn refine_click(
    model: &Model<f32>,
    enc: &Encoded<f32>,
    p: Point,
    category: Option<&str>,
    stages: usize,
) -> Result<Option<BBox>> {
    let kind = match category {
        Some(_) if model.kind() == RefinerKind::Gcr => model.guidance_kind(category)?,
        _ => GuidanceKind::Learnable,
    };
    match model.refine_encoded(enc, p, kind, stages) {
        Ok(out) => Ok(Some(out.final_box)),
        Err(Error::RefinementFailure(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Tracks from `b0` and scores frames 0..n, frame 0 being `b0` itself.
/// Identical starting boxes reuse earlier results.
struct Tracking<'a> {
    frames: &'a [Image],
    gt: Vec<BBox>,
    id: &'a str,
    cfg: &'a TrackerConfig,
    memo: Vec<(BBox, SequenceMetrics)>,
}

impl<'a> Tracking<'a> {
    fn new(scene: &'a SyntheticScene, target: &SyntheticObject, id: &'a str, cfg: &'a TrackerConfig) -> Self {
        Self {
            frames: &scene.frames,
            gt: target.boxes.clone(),
            id,
            cfg,
            memo: Vec::new(),
        }
    }

    fn run(&mut self, b0: &BBox) -> Result<SequenceMetrics> {
        let b0 = b0.clip(self.frames[0].size())?;
        if let Some((_, m)) = self.memo.iter().find(|(b, _)| *b == b0) {
            return Ok(m.clone());
        }
        let records = track_sequence(self.frames, &b0, self.cfg)?;
        let pred: Vec<BBox> = std::iter::once(b0).chain(records.iter().map(|r| r.bbox)).collect();
        let m = sequence_metrics(self.id, &pred, &self.gt)?;
        self.memo.push((b0, m.clone()));
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: InitMethod,
    /// Mean frame-0 IoU of the initial box.
    pub init_iou: f64,
    pub refine_failures: usize,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub sequences: usize,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn row(&self, m: InitMethod) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.method == m)
    }
}

pub fn run_refiner_comparison(
    models: &ModelSet,
    seqs: &SequenceSet,
    cfg: &EvalConfig,
    methods: &[InitMethod],
) -> Result<Comparison> {
    for m in methods {
        if let Some(k) = m.refiner() {
            models.get(k)?;
        }
    }
    let mut per: Vec<(Vec<SequenceMetrics>, f64, usize)> = vec![(Vec::new(), 0.0, 0); methods.len()];
    for (i, id) in seqs.ids.iter().enumerate() {
        let scene = seqs.source.get(i)?;
        let obj = target(&scene, cfg.seed, i);
        let gt0 = obj.boxes[0];
        let click = sample_click(&gt0, &mut stream(cfg.seed, &[CLICK, i as u64]));
        let mut encodings: BTreeMap<RefinerKind, Encoded<f32>> = BTreeMap::new();
        let mut track = Tracking::new(&scene, obj, id, &cfg.tracker);
        for (slot, &m) in methods.iter().enumerate() {
            let b0 = match m.refiner() {
                None => Some(gt0),
                Some(k) => {
                    let model = models.get(k)?;
                    if !encodings.contains_key(&k) {
                        encodings.insert(k, model.encode(&scene.frames[0])?);
                    }
                    let category = (m == InitMethod::GcrText).then_some(obj.category.as_str());
                    refine_click(model, &encodings[&k], click, category, stages_for(model, cfg))?
                }
            };
            let b0 = b0.unwrap_or_else(|| {
                per[slot].2 += 1;
                fallback_box(click, scene.size)
            });
            per[slot].1 += iou(&b0, &gt0);
            per[slot].0.push(track.run(&b0)?);
        }
    }
    let n = seqs.len().max(1) as f64;
    let rows = methods
        .iter()
        .zip(per)
        .map(|(&method, (metrics, init, failures))| ComparisonRow {
            method,
            init_iou: init / n,
            refine_failures: failures,
            report: aggregate(metrics, serde_json::json!({ "method": method.name(), "seed": cfg.seed })),
        })
        .collect();
    Ok(Comparison {
        sequences: seqs.len(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationPoint {
    pub rate: f64,
    pub samples: usize,
    pub init_iou: f64,
    pub success_auc: f64,
    pub precision: f64,
    pub norm_precision: f64,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationCurve {
    pub points: Vec<DeviationPoint>,
}

pub fn run_deviation_experiment(seqs: &SequenceSet, cfg: &EvalConfig, rates: &[f64]) -> Result<DeviationCurve> {
    if rates.first() != Some(&0.0) || rates.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "deviation rates must start at 0 and increase, got {rates:?}"
        )));
    }
    let mut per: Vec<(Vec<SequenceMetrics>, f64)> = vec![(Vec::new(), 0.0); rates.len()];
    for (i, id) in seqs.ids.iter().enumerate() {
        let scene = seqs.source.get(i)?;
        let obj = target(&scene, cfg.seed, i);
        let gt0 = obj.boxes[0];
        let mut track = Tracking::new(&scene, obj, id, &cfg.tracker);
        for (r, &rate) in rates.iter().enumerate() {
            let b0 = perturb_box(&gt0, rate, &mut stream(cfg.seed, &[DEVIATION, i as u64, r as u64]))?;
            per[r].1 += iou(&b0, &gt0);
            per[r].0.push(track.run(&b0)?);
        }
    }
    let n = seqs.len().max(1) as f64;
    let points = rates
        .iter()
        .zip(per)
        .map(|(&rate, (metrics, init))| {
            let report = aggregate(metrics, serde_json::json!({ "rate": rate, "seed": cfg.seed }));
            DeviationPoint {
                rate,
                samples: report.sequences.len(),
                init_iou: init / n,
                success_auc: report.success_auc,
                precision: report.precision,
                norm_precision: report.norm_precision,
                report,
            }
        })
        .collect();
    Ok(DeviationCurve { points })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub success_auc: f64,
    pub precision: f64,
    pub norm_precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawResult {
    pub seed: u64,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Robustness {
    pub guided: bool,
    pub draws: Vec<DrawResult>,
    pub mean: MetricSummary,
    /// Sample standard deviation across draws.
    pub std: MetricSummary,
}

pub fn draw_seeds(seed: u64, k: usize) -> Vec<u64> {
    (0..k as u64).map(|j| splitmix(seed ^ splitmix(DRAW + (j << 8)))).collect()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Full click-refine-track pipeline once per draw seed. With `guided` the
/// target's category accompanies the click.
pub fn run_click_robustness(
    model: &Model<f32>,
    seqs: &SequenceSet,
    cfg: &EvalConfig,
    seeds: &[u64],
    guided: bool,
) -> Result<Robustness> {
    if seeds.len() < 2 {
        return Err(Error::Config("click robustness needs at least two draws".into()));
    }
    let stages = stages_for(model, cfg);
    let mut per: Vec<Vec<SequenceMetrics>> = vec![Vec::new(); seeds.len()];
    for (i, id) in seqs.ids.iter().enumerate() {
        let scene = seqs.source.get(i)?;
        let obj = target(&scene, cfg.seed, i);
        let gt0 = obj.boxes[0];
        let enc = model.encode(&scene.frames[0])?;
        let mut track = Tracking::new(&scene, obj, id, &cfg.tracker);
        for (d, &s) in seeds.iter().enumerate() {
            let click = sample_click(&gt0, &mut stream(s, &[CLICK, i as u64]));
            let category = guided.then_some(obj.category.as_str());
            let b0 = refine_click(model, &enc, click, category, stages)?.unwrap_or_else(|| fallback_box(click, scene.size));
            per[d].push(track.run(&b0)?);
        }
    }
    let draws: Vec<DrawResult> = seeds
        .iter()
        .zip(per)
        .map(|(&seed, m)| DrawResult {
            seed,
            report: aggregate(m, serde_json::json!({ "draw_seed": seed, "guided": guided })),
        })
        .collect();
    let col = |f: fn(&MetricReport) -> f64| mean_std(&draws.iter().map(|d| f(&d.report)).collect::<Vec<_>>());
    let (s, p, n) = (col(|r| r.success_auc), col(|r| r.precision), col(|r| r.norm_precision));
    Ok(Robustness {
        guided,
        mean: MetricSummary {
            success_auc: s.0,
            precision: p.0,
            norm_precision: n.0,
        },
        std: MetricSummary {
            success_auc: s.1,
            precision: p.1,
            norm_precision: n.1,
        },
        draws,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputMode {
    Point,
    Box,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "policy")]
pub enum AttemptPolicy {
    Once,
    Multiple { max_attempts: usize, accept_iou: f64 },
}

impl AttemptPolicy {
    fn limit(&self) -> (usize, f64) {
        match *self {
            AttemptPolicy::Once => (1, f64::NEG_INFINITY),
            AttemptPolicy::Multiple {
                max_attempts,
                accept_iou,
            } => (max_attempts.max(1), accept_iou),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptsRow {
    pub input: InputMode,
    pub policy: AttemptPolicy,
    pub mean_attempts: f64,
    pub init_iou: f64,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptsTable {
    pub box_rate: f64,
    pub rows: Vec<AttemptsRow>,
}

impl AttemptsTable {
    pub fn row(&self, input: InputMode, once: bool) -> Option<&AttemptsRow> {
        self.rows
            .iter()
            .find(|r| r.input == input && matches!(r.policy, AttemptPolicy::Once) == once)
    }
}

/// Once against multiple attempts for clicks (refined by `model` with the
/// learnable guidance) and for hand-drawn boxes perturbed at `box_rate`.
/// A multiple-attempt operator redraws while the initial box misses the
/// acceptance IoU and keeps the last draw.
pub fn run_attempts_experiment(
    model: &Model<f32>,
    seqs: &SequenceSet,
    cfg: &EvalConfig,
    policies: &[AttemptPolicy],
) -> Result<AttemptsTable> {
    let stages = stages_for(model, cfg);
    let rate = cfg.attempts.box_rate;
    let layout: Vec<(InputMode, AttemptPolicy)> = [InputMode::Point, InputMode::Box]
        .into_iter()
        .flat_map(|m| policies.iter().map(move |&p| (m, p)))
        .collect();
    let mut per: Vec<(Vec<SequenceMetrics>, usize, f64)> = vec![(Vec::new(), 0, 0.0); layout.len()];
    for (i, id) in seqs.ids.iter().enumerate() {
        let scene = seqs.source.get(i)?;
        let obj = target(&scene, cfg.seed, i);
        let gt0 = obj.boxes[0];
        let enc = model.encode(&scene.frames[0])?;
        let mut track = Tracking::new(&scene, obj, id, &cfg.tracker);
        // Draws are shared between policies so that one attempt reduces
        // exactly to the once policy.
        let mut drawn: BTreeMap<(u8, usize), BBox> = BTreeMap::new();
        for (slot, &(mode, policy)) in layout.iter().enumerate() {
            let (max, accept) = policy.limit();
            let mut b0 = gt0;
            let mut used = 0;
            for a in 0..max {
                used = a + 1;
                let key = (mode as u8, a);
                b0 = match drawn.get(&key) {
                    Some(b) => *b,
                    None => {
                        let b = match mode {
                            InputMode::Point => {
                                let click = sample_click(&gt0, &mut stream(cfg.seed, &[ATTEMPT_POINT, i as u64, a as u64]));
                                refine_click(model, &enc, click, None, stages)?
                                    .unwrap_or_else(|| fallback_box(click, scene.size))
                            }
                            InputMode::Box => {
                                perturb_box(&gt0, rate, &mut stream(cfg.seed, &[ATTEMPT_BOX, i as u64, a as u64]))?
                            }
                        };
                        drawn.insert(key, b);
                        b
                    }
                };
                if iou(&b0, &gt0) >= accept {
                    break;
                }
            }
            per[slot].1 += used;
            per[slot].2 += iou(&b0, &gt0);
            per[slot].0.push(track.run(&b0)?);
        }
    }
    let n = seqs.len().max(1) as f64;
    let rows = layout
        .into_iter()
        .zip(per)
        .map(|((input, policy), (metrics, used, init))| AttemptsRow {
            input,
            policy,
            mean_attempts: used as f64 / n,
            init_iou: init / n,
            report: aggregate(metrics, serde_json::json!({ "input": input, "policy": policy, "box_rate": rate })),
        })
        .collect();
    Ok(AttemptsTable { box_rate: rate, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinerRow {
    pub method: InitMethod,
    pub samples: usize,
    pub mean_iou: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestedEval {
    pub pairs: usize,
    /// Mean IoU against the intended target over whole and part targets.
    pub learnable_iou: f64,
    pub category_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadePoint {
    pub stages: usize,
    pub mean_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldoutEval {
    pub scenes: usize,
    pub rows: Vec<RefinerRow>,
    pub nested: NestedEval,
    pub cascade: Vec<CascadePoint>,
    /// Share of samples whose IoU never drops from one stage to the next
    /// over the stages run at inference.
    pub monotone_fraction: f64,
    /// Same over the deepest cascade evaluated.
    pub monotone_fraction_deepest: f64,
}

impl HeldoutEval {
    pub fn mean_iou(&self, m: InitMethod) -> Option<f64> {
        self.rows.iter().find(|r| r.method == m).map(|r| r.mean_iou)
    }

    pub fn cascade_iou(&self, stages: usize) -> Option<f64> {
        self.cascade.iter().find(|c| c.stages == stages).map(|c| c.mean_iou)
    }
}

/// Frame-0 refinement quality on single images: one click per object,
/// the nested part/whole ambiguity subset, and the cascade depth ablation.
pub fn run_heldout_evaluation(models: &ModelSet, scenes: &SceneSource, cfg: &EvalConfig) -> Result<HeldoutEval> {
    let gcr = models.get(RefinerKind::Gcr)?;
    let (pfr, bfr) = (models.get(RefinerKind::Pfr)?, models.get(RefinerKind::Bfr)?);
    let stages = stages_for(gcr, cfg);
    let deepest = cfg.cascade_stages.iter().copied().max().unwrap_or(0);
    if deepest > gcr.config.stages {
        return Err(Error::Config(format!(
            "cascade depth {deepest} exceeds the {} trained stages",
            gcr.config.stages
        )));
    }
    let methods = [InitMethod::Gcr, InitMethod::GcrText, InitMethod::Pfr, InitMethod::Bfr];
    let mut sums = [(0usize, 0.0f64, 0usize); 4];
    let mut cascade = vec![0.0; cfg.cascade_stages.len()];
    let (mut cascade_n, mut monotone, mut monotone_deepest) = (0usize, 0usize, 0usize);
    let (mut pairs, mut learn_sum, mut cat_sum) = (0usize, 0.0, 0.0);
    for i in 0..scenes.len() {
        let scene = scenes.get(i)?;
        let img = &scene.frames[0];
        let (eg, ep, eb) = (gcr.encode(img)?, pfr.encode(img)?, bfr.encode(img)?);
        for (j, obj) in scene.objects.iter().enumerate() {
            let gt = obj.boxes[0];
            let click = sample_click(&gt, &mut stream(cfg.seed, &[HELDOUT, i as u64, j as u64]));
            let boxes = [
                refine_click(gcr, &eg, click, None, stages)?,
                refine_click(gcr, &eg, click, Some(&obj.category), stages)?,
                refine_click(pfr, &ep, click, None, 0)?,
                refine_click(bfr, &eb, click, None, 0)?,
            ];
            for (s, b) in sums.iter_mut().zip(boxes) {
                s.0 += 1;
                match b {
                    Some(b) => s.1 += iou(&b, &gt),
                    None => {
                        s.1 += iou(&fallback_box(click, scene.size), &gt);
                        s.2 += 1;
                    }
                }
            }
            match gcr.refine_encoded(&eg, click, GuidanceKind::Learnable, deepest) {
                Ok(out) => {
                    let ious: Vec<f64> = out.stage_boxes.iter().map(|b| iou(b, &gt)).collect();
                    for (c, &k) in cascade.iter_mut().zip(&cfg.cascade_stages) {
                        *c += ious[k];
                    }
                    monotone += ious[..=stages.min(deepest)].windows(2).all(|w| w[1] >= w[0]) as usize;
                    monotone_deepest += ious.windows(2).all(|w| w[1] >= w[0]) as usize;
                }
                Err(Error::RefinementFailure(_)) => {
                    let f = iou(&fallback_box(click, scene.size), &gt);
                    cascade.iter_mut().for_each(|c| *c += f);
                }
                Err(e) => return Err(e),
            }
            cascade_n += 1;
        }
        for (k, (whole, part)) in scene.nested_pairs().into_iter().enumerate() {
            let click = sample_click(&part.boxes[0], &mut stream(cfg.seed, &[NESTED, i as u64, k as u64]));
            let (gw, gp) = (whole.boxes[0], part.boxes[0]);
            let score = |b: Option<BBox>, gt: &BBox| b.map_or(0.0, |b| iou(&b, gt));
            let learn = refine_click(gcr, &eg, click, None, stages)?;
            learn_sum += (score(learn, &gw) + score(learn, &gp)) / 2.0;
            let as_whole = refine_click(gcr, &eg, click, Some(&whole.category), stages)?;
            let as_part = refine_click(gcr, &eg, click, Some(&part.category), stages)?;
            cat_sum += (score(as_whole, &gw) + score(as_part, &gp)) / 2.0;
            pairs += 1;
        }
    }
    let rows = methods
        .iter()
        .zip(sums)
        .map(|(&method, (n, s, f))| RefinerRow {
            method,
            samples: n,
            mean_iou: s / n.max(1) as f64,
            failures: f,
        })
        .collect();
    let cn = cascade_n.max(1) as f64;
    Ok(HeldoutEval {
        scenes: scenes.len(),
        rows,
        nested: NestedEval {
            pairs,
            learnable_iou: learn_sum / pairs.max(1) as f64,
            category_iou: cat_sum / pairs.max(1) as f64,
        },
        cascade: cfg
            .cascade_stages
            .iter()
            .zip(cascade)
            .map(|(&stages, s)| CascadePoint {
                stages,
                mean_iou: s / cn,
            })
            .collect(),
        monotone_fraction: monotone as f64 / cn,
        monotone_fraction_deepest: monotone_deepest as f64 / cn,
    })
}
