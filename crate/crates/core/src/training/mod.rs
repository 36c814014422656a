//! Synthetic data, loss, optimizer, the training loop and checkpoints.

pub mod checkpoint;
pub mod corpus;
pub mod loss;
pub mod optim;
pub mod synth;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{apply_delta, sample_click, BBox, BoxDelta, ImageSize};
use crate::image::Image;
use crate::refiners::guidance::GuidanceKind;
use crate::refiners::{Model, ModelConfig, RefinerHead, RefinerKind};

use corpus::SceneSource;
use loss::{compute_loss, stage_loss, LossBreakdown, LossWeights};
use optim::{clip_global_norm, AdamW, AdamWConfig, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augment {
    pub gray: f64,
    pub brightness: f64,
    pub brightness_range: (f64, f64),
    pub hflip: f64,
}

impl Default for Augment {
    fn default() -> Self {
        Self {
            gray: 0.1,
            brightness: 0.3,
            brightness_range: (0.7, 1.3),
            hflip: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub images_per_step: usize,
    /// Objects supervised per image; they share one backbone pass.
    pub targets_per_image: usize,
    pub schedule: Schedule,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub loss: LossWeights,
    /// Chance that a GCR sample is guided by its category instead of the
    /// learnable vector.
    pub category_probability: f64,
    pub augment: Augment,
    pub grad_clip: Option<f64>,
    pub log_every: usize,
    /// Extra inputs per GCR refinement stage and target, drawn around the
    /// target with the stage's output scale as spread.
    #[serde(default)]
    pub stage_jitter: usize,
}

impl TrainConfig {
    pub fn new(kind: RefinerKind) -> Self {
        Self {
            model: ModelConfig::new(kind),
            steps: 5000,
            images_per_step: 2,
            targets_per_image: 3,
            schedule: Schedule {
                initial: 1e-3,
                decay_steps: vec![3300, 4600],
                factor: 0.1,
            },
            optimizer: AdamWConfig::default(),
            seed: 1,
            loss: LossWeights::default(),
            category_probability: 0.5,
            augment: Augment::default(),
            grad_clip: Some(10.0),
            log_every: 50,
            stage_jitter: if kind == RefinerKind::Gcr { 2 } else { 0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        if self.images_per_step == 0 || self.targets_per_image == 0 || self.log_every == 0 {
            return Err(Error::Config("batch sizes and log interval must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.category_probability) {
            return Err(Error::Config("category_probability outside [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub lr: f64,
    /// Means over the steps since the previous entry.
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub steps_completed: usize,
    /// Mean loss of every completed step.
    pub losses: Vec<f64>,
    pub log: Vec<LogEntry>,
    /// Reason training stopped early; the model is the last good state.
    pub aborted: Option<String>,
    pub skipped_targets: usize,
}

fn augment<R: Rng + ?Sized>(img: &Image, boxes: &[BBox], a: &Augment, rng: &mut R) -> (Image, Vec<BBox>) {
    let mut img = img.clone();
    let mut boxes = boxes.to_vec();
    if rng.random::<f64>() < a.hflip {
        img = img.hflip();
        boxes = boxes.iter().map(|b| b.hflip(img.width())).collect();
    }
    if rng.random::<f64>() < a.gray {
        img = img.grayscale();
    }
    if rng.random::<f64>() < a.brightness {
        let f = rng.random_range(a.brightness_range.0..=a.brightness_range.1);
        img = img.brightness(f as f32);
    }
    (img, boxes)
}

/// `gt` moved by a delta drawn from `N(0, u * scale)` per component, with
/// `u` log-uniform in `[0.1, 1]` so that near-exact inputs are common too.
/// Clipped to the image; `None` when clipping leaves nothing.
fn jitter<R: Rng + ?Sized>(gt: &BBox, scale: [f64; 4], size: ImageSize, rng: &mut R) -> Option<BBox> {
    let u = 10f64.powf(-rng.random::<f64>());
    let d = scale.map(|s| u * s * rng.sample::<f64, _>(StandardNormal));
    apply_delta(gt, &BoxDelta::from_slice(&d)).ok()?.clip(size).ok()
}

struct StepResult {
    loss: LossBreakdown,
    grads: Vec<Vec<f32>>,
    skipped: usize,
}

fn run_step(
    model: &Model<f32>,
    cfg: &TrainConfig,
    source: &SceneSource,
    rng: &mut ChaCha8Rng,
) -> Result<Option<StepResult>> {
    let mut g = Graph::<f32>::new();
    let bound = model.store.bind(&mut g);
    let mut totals: Vec<Var> = Vec::new();
    let mut parts = Vec::new();
    let mut skipped = 0;
    for _ in 0..cfg.images_per_step {
        let scene = source.get(rng.random_range(0..source.len()))?;
        let boxes: Vec<BBox> = scene.objects.iter().map(|o| o.boxes[0]).collect();
        let (img, boxes) = augment(&scene.frames[0], &boxes, &cfg.augment, rng);
        let (fm, grid) = model.backbone.forward(&mut g, &bound, &img)?;
        let mut order: Vec<usize> = (0..boxes.len()).collect();
        order.shuffle(rng);
        for &i in order.iter().take(cfg.targets_per_image) {
            let gt = boxes[i];
            let click = sample_click(&gt, rng);
            let kind = if model.kind() == RefinerKind::Gcr && rng.random::<f64>() < cfg.category_probability {
                model.guidance_kind(Some(&scene.objects[i].category))?
            } else {
                GuidanceKind::Learnable
            };
            let pred = match model.predict(&mut g, &bound, fm, grid, img.size(), click, kind, model.config.stages, None) {
                Ok(p) => p,
                Err(Error::RefinementFailure(_) | Error::InvalidGeometry(_)) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let terms = compute_loss(&mut g, &pred, &gt, &cfg.loss, model.config.distance_scale)?;
            let mut part = terms.values(&g);
            let mut total = terms.total;
            if let RefinerHead::Gcr { guidance, head } = &model.head {
                let gv = guidance.lookup(&mut g, &bound, kind);
                let mut extra = vec![total];
                for stage in 0..model.config.stages {
                    let scale = head.stage_scale(stage);
                    for _ in 0..cfg.stage_jitter {
                        let Some(input) = jitter(&gt, scale, img.size(), rng) else { continue };
                        let delta = head.refine_step(&mut g, &bound, fm, grid, stage, &input, gv);
                        let t = stage_loss(&mut g, delta, &input, scale, &gt, &cfg.loss)?;
                        let v = t.values(&g);
                        part.total += v.total;
                        part.regression += v.regression;
                        part.giou += v.giou;
                        extra.push(t.total);
                    }
                }
                total = g.add_n(&extra);
            }
            parts.push(part);
            totals.push(total);
        }
    }
    if totals.is_empty() {
        return Ok(None);
    }
    let n = totals.len() as f64;
    let sum = g.add_n(&totals);
    let root = g.scale(sum, 1.0 / n);
    let grads = g.backward(root);
    let mut out: Vec<Vec<f32>> = model.store.iter().map(|p| vec![0.0; p.value.len()]).collect();
    for (id, grad) in grads.params(&g) {
        out[id].copy_from_slice(grad);
    }
    let mut loss = LossBreakdown::default();
    for p in &parts {
        loss.total += p.total / n;
        loss.regression += p.regression / n;
        loss.giou += p.giou / n;
        loss.score += p.score / n;
    }
    Ok(Some(StepResult {
        loss,
        grads: out,
        skipped,
    }))
}

/// Trains a fresh model from `cfg.model`. `progress` receives every log
/// entry as it is produced.
pub fn train(cfg: &TrainConfig, source: &SceneSource, mut progress: impl FnMut(&LogEntry)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Input("empty training corpus".into()));
    }
    let mut model = Model::<f32>::new(cfg.model.clone())?;
    let mut opt = AdamW::new(&model.store, cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = Instant::now();
    let mut out = TrainOutcome {
        model: model.clone(),
        steps_completed: 0,
        losses: Vec::with_capacity(cfg.steps),
        log: Vec::new(),
        aborted: None,
        skipped_targets: 0,
    };
    let mut window = (LossBreakdown::default(), 0usize, 0.0f64);
    for step in 0..cfg.steps {
        let lr = cfg.schedule.rate(step);
        let result = match run_step(&model, cfg, source, &mut rng) {
            Ok(r) => r,
            Err(Error::Numeric(m)) => {
                out.aborted = Some(format!("step {step}: {m}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let Some(mut r) = result else {
            continue;
        };
        out.skipped_targets += r.skipped;
        if r.grads.iter().flatten().any(|v| !v.is_finite()) {
            out.aborted = Some(format!("step {step}: non-finite gradient"));
            break;
        }
        let norm = match cfg.grad_clip {
            Some(max) => clip_global_norm(&mut r.grads, max),
            None => clip_global_norm(&mut r.grads, f64::INFINITY),
        };
        opt.step(&mut model.store, &r.grads, lr);
        if model.store.iter().any(|p| !p.value.all_finite()) {
            out.aborted = Some(format!("step {step}: parameters became non-finite"));
            break;
        }
        out.model.store = model.store.clone();
        out.steps_completed = step + 1;
        out.losses.push(r.loss.total);

        let (acc, count, gn) = &mut window;
        acc.total += r.loss.total;
        acc.regression += r.loss.regression;
        acc.giou += r.loss.giou;
        acc.score += r.loss.score;
        *count += 1;
        *gn += norm;
        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps {
            let c = *count as f64;
            let entry = LogEntry {
                step: step + 1,
                lr,
                loss: LossBreakdown {
                    total: acc.total / c,
                    regression: acc.regression / c,
                    giou: acc.giou / c,
                    score: acc.score / c,
                },
                grad_norm: *gn / c,
                elapsed_s: start.elapsed().as_secs_f64(),
            };
            progress(&entry);
            out.log.push(entry);
            window = (LossBreakdown::default(), 0, 0.0);
        }
    }
    Ok(out)
}

/// Mean of `losses` over the `width` steps ending at `step` (1-based).
pub fn smoothed(losses: &[f64], step: usize, width: usize) -> f64 {
    let end = step.min(losses.len());
    let begin = end.saturating_sub(width);
    let s = &losses[begin..end];
    s.iter().sum::<f64>() / s.len().max(1) as f64
}
